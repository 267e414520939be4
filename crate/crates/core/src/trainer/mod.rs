//! Adversarial training: Adam updates, the three-part discriminator step,
//! generator steps with the generator-twice guard, periodic proxy
//! evaluation with early stopping and collapse-restore, and the on-disk
//! history and checkpoints.

mod adam;
mod proxy;

pub use adam::{Adam, AdamConfig};
pub use proxy::{
    class_samples, evaluate_proxy, proxy_report, sample_grid, ProxyReport, CLASS_PENALTY, GRID_GUTTER,
    PROXY_SAMPLES_PER_CLASS,
};

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{make_batch, Batch, Batcher, ClassTable, Corpus};
use crate::error::{Error, Result};
use crate::gan::{
    discriminator_loss_threepart, generator_loss, Checkpoint, Discriminator, GanConfig, Generator,
    GeneratorObjective, LossWeights,
};
use crate::nn::{collect_grads, commit_batch_stats, Phase};
use crate::rng::Rng;
use crate::tensor::Tape;

pub const HISTORY_HEADER: [&str; 7] = ["step", "epoch", "d_loss", "g_loss", "d_real_acc", "gen_twice", "restored"];

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps (one D step plus its G steps count once).
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// A second generator step runs whenever the discriminator loss falls below this.
    pub gen_twice_threshold: f64,
    /// Epochs between proxy evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// A score above `collapse_factor × best` restores the best snapshot.
    pub collapse_factor: f64,
    pub weights: LossWeights,
    pub objective: GeneratorObjective,
    /// Samples per class drawn by each proxy evaluation.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 16,
            max_epochs: 1000,
            max_steps: None,
            seed: 0,
            gen_twice_threshold: 0.3,
            eval_every: 50,
            patience: 10,
            collapse_factor: 2.0,
            weights: LossWeights::default(),
            objective: GeneratorObjective::NonSaturating,
            eval_samples: PROXY_SAMPLES_PER_CLASS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if self.eval_every == 0 || self.patience == 0 || self.eval_samples == 0 {
            return Err(Error::invalid("eval_every, patience and eval_samples must be positive"));
        }
        if self.gen_twice_threshold.is_nan() {
            return Err(Error::invalid("generator-twice threshold is NaN"));
        }
        if !(self.collapse_factor > 0.0) {
            return Err(Error::invalid("collapse factor must be positive"));
        }
        Ok(())
    }
}

/// Losses and flags of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub d_loss: f64,
    /// Loss of the last generator step taken.
    pub g_loss: f64,
    /// Fraction of (real, true label) pairs the discriminator scored above ½.
    pub d_real_acc: f64,
    pub gen_twice: bool,
}

/// One line of the history CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real_acc: f64,
    pub gen_twice: bool,
    pub restored: bool,
}

/// Discrete events of a run.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    GenTwice { step: u64 },
    Restore { step: u64, epoch: usize, score: f64, best: f64 },
}

/// What a proxy evaluation led to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub score: f64,
    pub improved: bool,
    pub restored: bool,
    pub stop: bool,
}

/// Summary of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub evals: Vec<EvalRecord>,
    pub best_score: Option<f64>,
    pub steps: u64,
    pub epochs: usize,
    pub stopped_early: bool,
}

/// Scores the current generator; lower is better.
pub trait Evaluator {
    fn evaluate(&mut self, g: &Generator<f32>, corpus: &Corpus, classes: &ClassTable) -> Result<f64>;
}

/// [`evaluate_proxy`] with a fixed noise seed.
#[derive(Clone, Copy, Debug)]
pub struct ProxyEvaluator {
    pub per_class: usize,
    pub seed: u64,
}

impl Evaluator for ProxyEvaluator {
    fn evaluate(&mut self, g: &Generator<f32>, corpus: &Corpus, classes: &ClassTable) -> Result<f64> {
        Ok(evaluate_proxy(g, corpus, classes, self.per_class, self.seed)?.score)
    }
}

#[derive(Clone, Debug)]
struct Snapshot {
    generator: Generator<f32>,
    discriminator: Discriminator<f32>,
    gen_opt: Adam<f32>,
    disc_opt: Adam<f32>,
    step: u64,
}

/// Owns both networks, their optimizers and the run's bookkeeping.
pub struct Trainer {
    config: TrainConfig,
    generator: Generator<f32>,
    discriminator: Discriminator<f32>,
    gen_opt: Adam<f32>,
    disc_opt: Adam<f32>,
    corpus: Corpus,
    classes: ClassTable,
    batch_rng: Rng,
    noise_rng: Rng,
    step: u64,
    best: Option<(f64, Snapshot)>,
    evals_since_improvement: usize,
    history: Vec<HistoryRow>,
    events: Vec<Event>,
}

impl Trainer {
    pub fn new(corpus: Corpus, classes: ClassTable, arch: &GanConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if arch.embed_dim != classes.dim() {
            return Err(Error::invalid(format!(
                "architecture expects {}-dimensional embeddings, vocabulary has {}",
                arch.embed_dim,
                classes.dim()
            )));
        }
        if arch.image_size != corpus.image_size {
            return Err(Error::invalid(format!(
                "architecture expects {0}×{0} images, corpus has {1}×{1}",
                arch.image_size, corpus.image_size
            )));
        }
        if classes.num_classes() != corpus.num_classes() || classes.num_classes() < 2 {
            return Err(Error::invalid("need at least two classes, matching between corpus and embeddings"));
        }
        if config.batch_size > corpus.len() {
            return Err(Error::invalid(format!(
                "batch size {} exceeds corpus size {}",
                config.batch_size,
                corpus.len()
            )));
        }
        let root = Rng::new(config.seed);
        Ok(Self {
            generator: Generator::new(arch, &mut root.substream("generator-init"))?,
            discriminator: Discriminator::new(arch, &mut root.substream("discriminator-init"))?,
            gen_opt: Adam::new(config.adam)?,
            disc_opt: Adam::new(config.adam)?,
            batch_rng: root.substream("batches"),
            noise_rng: root.substream("noise"),
            corpus,
            classes,
            config,
            step: 0,
            best: None,
            evals_since_improvement: 0,
            history: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator<f32> {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator<f32> {
        &self.discriminator
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn classes(&self) -> &ClassTable {
        &self.classes
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.as_ref().map(|(s, _)| *s)
    }

    /// Generator and discriminator of the best evaluation so far.
    pub fn best_checkpoint(&self) -> Option<Result<Checkpoint>> {
        self.best.as_ref().map(|(_, snap)| self.checkpoint_of(snap))
    }

    /// The current networks.
    pub fn current_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(
            self.generator.clone(),
            self.discriminator.clone(),
            self.classes.words().to_vec(),
            self.step,
        )
    }

    fn checkpoint_of(&self, snap: &Snapshot) -> Result<Checkpoint> {
        Checkpoint::new(
            snap.generator.clone(),
            snap.discriminator.clone(),
            self.classes.words().to_vec(),
            snap.step,
        )
    }

    /// Draw a batch from the given corpus indices with the run's batch stream.
    pub fn batch(&mut self, indices: &[usize]) -> Result<Batch> {
        make_batch(&self.corpus, &self.classes, indices, &mut self.batch_rng)
    }

    /// Three discriminator passes (real/true, real/mismatched, fake/true),
    /// the weighted loss, and an Adam update of D only. The fakes come
    /// from a separate tape, so no gradient reaches G. Returns the loss and
    /// the fraction of real/true pairs scored above ½.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let n = batch.len();
        let z = self.generator.noise(n, &mut self.noise_rng);
        let fakes = {
            let mut scratch = Tape::new();
            scratch.freeze("gen.");
            let zv = scratch.constant(z);
            let tv = scratch.constant(batch.true_embeddings.clone());
            let out = self.generator.forward(&mut scratch, zv, tv, Phase::Train)?;
            scratch.value(out).clone()
        };

        let d = &self.discriminator;
        let mut tape = Tape::new();
        let real = tape.constant(batch.images.clone());
        let t_true = tape.constant(batch.true_embeddings.clone());
        let t_wrong = tape.constant(batch.mismatched_embeddings.clone());
        let fake = tape.constant(fakes);
        // both real pairs share one trunk pass: same images, same batch statistics
        let real_features = d.features(&mut tape, real, Phase::Train)?;
        let s_rt = d.head(&mut tape, real_features, t_true, Phase::Train)?;
        let s_rf = d.head(&mut tape, real_features, t_wrong, Phase::Train)?;
        let s_ft = d.forward(&mut tape, fake, t_true, Phase::Train)?;
        let loss = discriminator_loss_threepart(&mut tape, s_rt, s_rf, s_ft, &self.config.weights)?;
        tape.backward(loss)?;

        collect_grads(&mut self.discriminator, &tape);
        self.disc_opt.step(&mut self.discriminator)?;
        commit_batch_stats(&mut self.discriminator, &tape);

        let scores = tape.value(s_rt).data();
        let acc = scores.iter().filter(|&&s| s > 0.5).count() as f64 / scores.len() as f64;
        Ok((f64::from(tape.value(loss).item()), acc))
    }

    /// Fresh noise through G, scored by D with the true labels; Adam update
    /// of G only.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<f64> {
        let n = batch.len();
        let z = self.generator.noise(n, &mut self.noise_rng);
        let mut tape = Tape::new();
        tape.freeze("disc.");
        let zv = tape.constant(z);
        let tv = tape.constant(batch.true_embeddings.clone());
        let fake = self.generator.forward(&mut tape, zv, tv, Phase::Train)?;
        let s = self.discriminator.forward(&mut tape, fake, tv, Phase::Train)?;
        let loss = generator_loss(&mut tape, s, self.config.objective)?;
        tape.backward(loss)?;

        collect_grads(&mut self.generator, &tape);
        self.gen_opt.step(&mut self.generator)?;
        commit_batch_stats(&mut self.generator, &tape);
        Ok(f64::from(tape.value(loss).item()))
    }

    /// One D step, one G step, and a second G step when the discriminator
    /// loss is below the generator-twice threshold.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let (d_loss, d_real_acc) = self.discriminator_step(batch)?;
        let mut g_loss = self.generator_step(batch)?;
        self.step += 1;
        let gen_twice = d_loss < self.config.gen_twice_threshold;
        if gen_twice {
            g_loss = self.generator_step(batch)?;
            self.events.push(Event::GenTwice { step: self.step });
        }
        Ok(StepReport {
            d_loss,
            g_loss,
            d_real_acc,
            gen_twice,
        })
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            gen_opt: self.gen_opt.clone(),
            disc_opt: self.disc_opt.clone(),
            step: self.step,
        }
    }

    /// Fold one evaluation score into the early-stopping and collapse state.
    ///
    /// A strictly lower score than the best so far snapshots the current
    /// networks and optimizer states. Otherwise the patience counter grows,
    /// and a score above `collapse_factor × best` restores the snapshot.
    pub fn record_eval(&mut self, epoch: usize, score: f64) -> Result<EvalRecord> {
        if score.is_nan() {
            return Err(Error::invalid(format!("evaluation at epoch {epoch} returned NaN")));
        }
        let mut record = EvalRecord {
            epoch,
            step: self.step,
            score,
            improved: false,
            restored: false,
            stop: false,
        };
        match &self.best {
            Some((best, _)) if score >= *best => {
                let best = *best;
                self.evals_since_improvement += 1;
                if score > self.config.collapse_factor * best {
                    let snap = self.best.as_ref().expect("best exists").1.clone();
                    self.generator = snap.generator;
                    self.discriminator = snap.discriminator;
                    self.gen_opt = snap.gen_opt;
                    self.disc_opt = snap.disc_opt;
                    record.restored = true;
                    self.events.push(Event::Restore {
                        step: self.step,
                        epoch,
                        score,
                        best,
                    });
                    if let Some(row) = self.history.last_mut() {
                        row.restored = true;
                    }
                }
                record.stop = self.evals_since_improvement >= self.config.patience;
            }
            _ => {
                self.best = Some((score, self.snapshot()));
                self.evals_since_improvement = 0;
                record.improved = true;
            }
        }
        Ok(record)
    }

    /// Run epochs until `max_epochs`, `max_steps` or early stopping.
    /// Evaluates after every `eval_every` epochs and after the last one.
    /// With `out_dir`, writes `best.ckpt` on every improvement, a sample
    /// grid per evaluation under `samples/`, and at the end `final.ckpt`
    /// and `history.csv`.
    pub fn train(&mut self, evaluator: &mut dyn Evaluator, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir.join("samples")).map_err(|e| Error::io(dir, e))?;
        }
        let batcher = Batcher::new(self.corpus.len(), self.config.batch_size)?;
        let mut evals = Vec::new();
        let mut epochs = 0;
        let mut stopped_early = false;
        let max_steps = self.config.max_steps;
        let step_cap_hit = |s: u64| max_steps.is_some_and(|m| s >= m);
        'epochs: for epoch in 1..=self.config.max_epochs {
            if step_cap_hit(self.step) {
                break;
            }
            for indices in batcher.epoch(&mut self.batch_rng) {
                if step_cap_hit(self.step) {
                    break;
                }
                let batch = make_batch(&self.corpus, &self.classes, &indices, &mut self.batch_rng)?;
                let r = self.train_step(&batch)?;
                self.history.push(HistoryRow {
                    step: self.step,
                    epoch,
                    d_loss: r.d_loss,
                    g_loss: r.g_loss,
                    d_real_acc: r.d_real_acc,
                    gen_twice: r.gen_twice,
                    restored: false,
                });
            }
            epochs = epoch;
            let last = epoch == self.config.max_epochs || step_cap_hit(self.step);
            if epoch % self.config.eval_every == 0 || last {
                let score = evaluator.evaluate(&self.generator, &self.corpus, &self.classes)?;
                let record = self.record_eval(epoch, score)?;
                evals.push(record);
                if let Some(dir) = out_dir {
                    self.write_eval_artifacts(dir, &record)?;
                }
                if record.stop {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.current_checkpoint()?.save(dir.join("final.ckpt"))?;
            let path = dir.join("history.csv");
            fs::write(&path, self.history_csv()?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(TrainOutcome {
            evals,
            best_score: self.best_score(),
            steps: self.step,
            epochs,
            stopped_early,
        })
    }

    fn write_eval_artifacts(&self, dir: &Path, record: &EvalRecord) -> Result<()> {
        if record.improved {
            if let Some(ck) = self.best_checkpoint() {
                ck?.save(dir.join("best.ckpt"))?;
            }
        }
        let per_row = self.config.eval_samples.min(8);
        let grid = sample_grid(&self.generator, &self.classes, per_row, self.config.seed)?;
        let path: PathBuf = dir.join("samples").join(format!("epoch_{:06}.ppm", record.epoch));
        grid.save(path)
    }

    /// History as CSV text with floats at nine significant digits.
    pub fn history_csv(&self) -> Result<Vec<u8>> {
        history_csv(&self.history)
    }
}

/// Serialize history rows under [`HISTORY_HEADER`].
pub fn history_csv(rows: &[HistoryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HISTORY_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            format!("{:.8e}", r.d_loss),
            format!("{:.8e}", r.g_loss),
            format!("{:.8e}", r.d_real_acc),
            u8::from(r.gen_twice).to_string(),
            u8::from(r.restored).to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("flushing history: {e}")))
}
