use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use emojigan::dataset::{image_grid, make_synthetic_corpus, ClassTable, Corpus, Manifest};
use emojigan::embeddings::{average_vectors, fixture_vocabulary, Vocabulary};
use emojigan::gan::{Checkpoint, GanConfig, Generator, GeneratorObjective};
use emojigan::gradsuite;
use emojigan::trainer::{AdamConfig, ProxyEvaluator, TrainConfig, Trainer, GRID_GUTTER};
use emojigan::{Rng, Tensor};

const VOCAB_FILE: &str = "vocab.bin";

#[derive(Parser)]
#[command(name = "emojigan", version, about = "Conditional DC-GAN for emoji synthesis from word vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Sample a grid of emojis: one row per word, one column per sample.
    Generate(GenerateArgs),
    /// Generate from the average of two word vectors next to each endpoint.
    Blend(BlendArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus with a manifest and matching embeddings.
    MakeSynth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Header-less CSV of `filename,word` rows.
    #[arg(long, required_unless_present = "synthetic")]
    manifest: Option<PathBuf>,
    /// Directory holding the manifest images (default: the manifest's directory).
    #[arg(long)]
    images: Option<PathBuf>,
    /// word2vec binary file; required unless --synthetic.
    #[arg(long, required_unless_present = "synthetic")]
    embeddings: Option<PathBuf>,
    /// Train on generated faces with the built-in fixture vocabulary.
    #[arg(long, conflicts_with = "manifest")]
    synthetic: bool,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    per_class: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 32, value_parser = parse_image_size)]
    image_size: usize,
    /// Scale every word vector to unit length.
    #[arg(long)]
    normalize_embeddings: bool,
    /// Train the generator on mean ln(1 - D(G(z))) instead of -mean ln D(G(z)).
    #[arg(long)]
    literal_minimax: bool,
    #[arg(long, default_value_t = 0.3)]
    gen_twice_threshold: f64,
    /// Epochs between proxy evaluations.
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Evaluations without improvement before stopping.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Dimension of the fixture vocabulary used with --synthetic.
    #[arg(long, default_value_t = 300)]
    dim: usize,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct ArchArgs {
    #[arg(long, default_value_t = GanConfig::default().noise_dim)]
    noise_dim: usize,
    /// Width of the projected word vector fed to both networks.
    #[arg(long, default_value_t = GanConfig::default().embed_proj)]
    embed_proj: usize,
    /// Channels of the generator's first feature map.
    #[arg(long, default_value_t = GanConfig::default().gen_base)]
    gen_base: usize,
    /// Channels of the discriminator's first convolution.
    #[arg(long, default_value_t = GanConfig::default().disc_base)]
    disc_base: usize,
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// word2vec binary file (default: vocab.bin next to the checkpoint).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(required = true)]
    words: Vec<String>,
    #[command(flatten)]
    common: SamplingArgs,
}

#[derive(Args)]
struct BlendArgs {
    word_a: String,
    word_b: String,
    #[command(flatten)]
    common: SamplingArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Replace every check's tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "synth")]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 300)]
    dim: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Blend(a) => cmd_blend(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::MakeSynth(a) => cmd_make_synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn parse_image_size(s: &str) -> Result<usize, String> {
    match s {
        "32" => Ok(32),
        "64" => Ok(64),
        _ => Err(format!("image size must be 32 or 64, got {s}")),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_file(), "{what} not found: {}", path.display());
    Ok(())
}

/// Synthetic corpus images come from this stream, shared by `train --synthetic`
/// and `make-synth` so both see the same faces for a seed.
fn synth_rng(seed: u64) -> Rng {
    Rng::new(seed).substream("corpus")
}

fn load_data(a: &TrainArgs) -> Result<(Corpus, Vocabulary)> {
    if a.synthetic {
        let samples = make_synthetic_corpus(a.classes, a.per_class, a.image_size, &mut synth_rng(a.seed))?;
        return Ok((Corpus::from_samples(samples)?, fixture_vocabulary(a.dim)));
    }
    let manifest_path = a.manifest.as_deref().expect("required by clap");
    let embeddings = a.embeddings.as_deref().expect("required by clap");
    require_file(manifest_path, "manifest")?;
    require_file(embeddings, "embeddings file")?;
    let images = match &a.images {
        Some(dir) => dir.clone(),
        None => match manifest_path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        },
    };
    ensure!(images.is_dir(), "image directory not found: {}", images.display());

    let manifest = Manifest::load(manifest_path)?;
    ensure!(!manifest.rows.is_empty(), "manifest {} has no rows", manifest_path.display());
    let words: HashSet<String> = manifest.class_words().into_iter().collect();
    let vocab = Vocabulary::load_word2vec_binary(embeddings, Some(&words))
        .with_context(|| format!("reading {}", embeddings.display()))?;
    let missing: Vec<String> = manifest
        .class_words()
        .into_iter()
        .filter(|w| vocab.get(w).is_none())
        .collect();
    ensure!(missing.is_empty(), "manifest words missing from {}: {}", embeddings.display(), missing.join(", "));
    let corpus = Corpus::load(&manifest, &images, a.image_size)?;
    Ok((corpus, vocab))
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let (corpus, vocab) = load_data(&a)?;
    let words: Vec<&str> = corpus.class_words.iter().map(String::as_str).collect();
    let mut vocab = vocab.restricted_to(&words)?;
    if a.normalize_embeddings {
        vocab = vocab.normalized();
    }
    let classes = ClassTable::new(&corpus.class_words, &vocab)?;
    let arch = GanConfig {
        noise_dim: a.arch.noise_dim,
        embed_dim: vocab.dim(),
        embed_proj: a.arch.embed_proj,
        image_size: a.image_size,
        gen_base: a.arch.gen_base,
        disc_base: a.arch.disc_base,
    };
    let config = TrainConfig {
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        batch_size: a.batch,
        max_epochs: a.epochs,
        max_steps: a.max_steps,
        seed: a.seed,
        gen_twice_threshold: a.gen_twice_threshold,
        eval_every: a.eval_every,
        patience: a.patience,
        objective: if a.literal_minimax {
            GeneratorObjective::Minimax
        } else {
            GeneratorObjective::NonSaturating
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(corpus, classes, &arch, config)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    vocab.save_word2vec_binary(a.out.join(VOCAB_FILE))?;
    let mut evaluator = ProxyEvaluator {
        per_class: trainer.config().eval_samples,
        seed: a.seed,
    };
    let outcome = trainer.train(&mut evaluator, Some(&a.out))?;
    for e in &outcome.evals {
        println!(
            "epoch {:>5}  step {:>6}  proxy {:.4}{}{}",
            e.epoch,
            e.step,
            e.score,
            if e.improved { "  best" } else { "" },
            if e.restored { "  restored" } else { "" },
        );
    }
    println!(
        "{} steps over {} epochs{}; best proxy {:.4}; outputs in {}",
        outcome.steps,
        outcome.epochs,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        outcome.best_score.unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

struct Sampler {
    generator: Generator<f32>,
    vocab: Vocabulary,
}

impl Sampler {
    fn open(a: &SamplingArgs) -> Result<Self> {
        ensure!(a.count > 0, "nothing to generate: --count must be at least 1");
        require_file(&a.checkpoint, "checkpoint")?;
        let vocab_path = match &a.embeddings {
            Some(p) => p.clone(),
            None => a.checkpoint.with_file_name(VOCAB_FILE),
        };
        require_file(&vocab_path, "embeddings file")?;
        let checkpoint = Checkpoint::load(&a.checkpoint)?;
        let vocab = Vocabulary::load_word2vec_binary(&vocab_path, None)?;
        let dim = checkpoint.header.arch.embed_dim;
        ensure!(
            vocab.dim() == dim,
            "{} has {}-dimensional vectors but the checkpoint expects {dim}",
            vocab_path.display(),
            vocab.dim()
        );
        Ok(Self {
            generator: checkpoint.generator,
            vocab,
        })
    }

    fn vector(&self, word: &str) -> Result<&[f32]> {
        match self.vocab.get(word) {
            Some(e) => Ok(&e.vector),
            None => {
                let known: Vec<&str> = self.vocab.words().collect();
                bail!("unknown word {word:?}; known words: {}", known.join(", "))
            }
        }
    }

    /// One image per noise row, all conditioned on `vector`.
    fn row(&self, z: &Tensor<f32>, vector: &[f32]) -> Result<Vec<Tensor<f32>>> {
        let n = z.shape()[0];
        let t = Tensor::new(&[n, vector.len()], vector.repeat(n))?;
        let images = self.generator.generate(z, &t)?;
        Ok((0..n).map(|i| images.select(i)).collect::<emojigan::Result<_>>()?)
    }

    fn noise(&self, a: &SamplingArgs) -> Tensor<f32> {
        self.generator.noise(a.count, &mut Rng::new(a.seed).substream("sample"))
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_generate(a: GenerateArgs) -> Result<ExitCode> {
    let s = Sampler::open(&a.common)?;
    let vectors = a.words.iter().map(|w| s.vector(w)).collect::<Result<Vec<_>>>()?;
    let z = s.noise(&a.common);
    let rows = vectors.iter().map(|v| s.row(&z, v)).collect::<Result<Vec<_>>>()?;
    create_out(&a.common.out)?;
    let path = a.common.out.join("generated.ppm");
    image_grid(&rows, GRID_GUTTER)?.save(&path)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_blend(a: BlendArgs) -> Result<ExitCode> {
    let s = Sampler::open(&a.common)?;
    if a.word_a == a.word_b {
        eprintln!("warning: blending {:?} with itself; the middle row repeats the endpoints", a.word_a);
    }
    let (ea, eb) = (s.vocab.get(&a.word_a), s.vocab.get(&a.word_b));
    let (ta, tb) = (s.vector(&a.word_a)?.to_vec(), s.vector(&a.word_b)?.to_vec());
    let mid = average_vectors(ea.expect("checked"), eb.expect("checked"))?;
    let z = s.noise(&a.common);
    let rows = [s.row(&z, &ta)?, s.row(&z, &mid)?, s.row(&z, &tb)?];

    let mut report = csv::Writer::from_writer(Vec::new());
    report.write_record(["column", "d_blend_a", "d_blend_b", "d_a_b"])?;
    for col in 0..a.common.count {
        let (top, blend, bottom) = (&rows[0][col], &rows[1][col], &rows[2][col]);
        report.write_record([
            col.to_string(),
            format!("{:.8e}", blend.mean_abs_diff(top)?),
            format!("{:.8e}", blend.mean_abs_diff(bottom)?),
            format!("{:.8e}", top.mean_abs_diff(bottom)?),
        ])?;
    }
    create_out(&a.common.out)?;
    let grid = a.common.out.join("blend.ppm");
    image_grid(&rows, GRID_GUTTER)?.save(&grid)?;
    let csv_path = a.common.out.join("blend.csv");
    fs::write(&csv_path, report.into_inner()?).with_context(|| format!("writing {}", csv_path.display()))?;
    println!("wrote {} and {}", grid.display(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut failed = Vec::new();
    println!("{:<32} {:<4} {:>12} {:>10}  status", "check", "prec", "max_rel_err", "tolerance");
    for check in gradsuite::registry() {
        let mut r = check.run();
        if let Some(tol) = a.tolerance {
            r.tolerance = tol;
        }
        let status = match (&r.error, r.passed()) {
            (Some(e), _) => format!("ERROR {e}"),
            (None, true) => "ok".to_owned(),
            (None, false) => "FAIL".to_owned(),
        };
        println!("{:<32} {:<4} {:>12.3e} {:>10.0e}  {status}", r.name, r.precision, r.max_rel_err, r.tolerance);
        if !r.passed() {
            failed.push(format!("{} ({})", r.name, r.precision));
        }
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_make_synth(a: SynthArgs) -> Result<ExitCode> {
    let samples = make_synthetic_corpus(a.classes, a.per_class, a.image_size, &mut synth_rng(a.seed))?;
    create_out(&a.out)?;
    let mut manifest = Manifest::default();
    let mut seen = vec![0usize; a.classes];
    for s in &samples {
        let filename = format!("{}_{:03}.ppm", s.word, seen[s.label]);
        seen[s.label] += 1;
        emojigan::dataset::RgbImage::from_tensor(&s.pixels)?.save(a.out.join(&filename))?;
        manifest.rows.push(emojigan::dataset::ManifestRow {
            filename,
            word: s.word.clone(),
        });
    }
    let manifest_path = a.out.join("manifest.csv");
    fs::write(&manifest_path, manifest.to_csv()?).with_context(|| format!("writing {}", manifest_path.display()))?;
    fixture_vocabulary(a.dim).save_word2vec_binary(a.out.join("embeddings.bin"))?;
    println!(
        "wrote {} images, manifest.csv and embeddings.bin to {}",
        samples.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
