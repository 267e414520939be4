//! Conditional generator and discriminator, their objectives, and the
//! self-describing checkpoint format.

mod checkpoint;
pub mod loss;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use loss::{
    bce, discriminator_loss_threepart, generator_loss, minimax_value, structured_loss, GeneratorObjective,
    LossWeights, SCORE_EPS,
};

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassTable, Corpus};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm, Conv2d, ConvTranspose2d, Dense, Module, ParamKind, Phase};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Negative slope of the discriminator's leaky ReLUs.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Architecture hyperparameters shared by both networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanConfig {
    pub noise_dim: usize,
    pub embed_dim: usize,
    /// Width the embedding is projected to before it meets either network.
    pub embed_proj: usize,
    /// Square output side; a power of two, at least 8.
    pub image_size: usize,
    /// Channels of the generator's 4×4 seed; halved at every upsampling.
    pub gen_base: usize,
    /// Channels of the discriminator's first conv; doubled at every stage.
    pub disc_base: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 100,
            embed_dim: 300,
            embed_proj: 128,
            image_size: 32,
            gen_base: 256,
            disc_base: 64,
        }
    }
}

impl GanConfig {
    /// Number of stride-2 stages between 4×4 and the image size.
    pub fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 8 || !s.is_power_of_two() {
            return Err(Error::invalid(format!("image size {s} must be a power of two >= 8")));
        }
        if [self.noise_dim, self.embed_dim, self.embed_proj, self.disc_base].contains(&0) {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        let shrink = 1 << (self.stages() - 1);
        if self.gen_base == 0 || !self.gen_base.is_multiple_of(shrink) {
            return Err(Error::invalid(format!(
                "generator base width {} must be a positive multiple of {shrink}",
                self.gen_base
            )));
        }
        Ok(())
    }

    /// Generator channel widths from the 4×4 seed to the RGB output.
    pub fn gen_widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = (0..self.stages()).map(|i| self.gen_base >> i).collect();
        w.push(3);
        w
    }

    /// Discriminator channel widths from the RGB input to the 4×4 stage.
    pub fn disc_widths(&self) -> Vec<usize> {
        let mut w = vec![3];
        w.extend((0..self.stages()).map(|i| self.disc_base << i));
        w
    }
}

fn check_rows<T: Element>(tape: &Tape<T>, v: Var, what: &'static str, tail: &[usize]) -> Result<usize> {
    let s = tape.shape(v);
    if s.len() != tail.len() + 1 || s[1..] != *tail {
        let mut expected = vec![s.first().copied().unwrap_or(0)];
        expected.extend_from_slice(tail);
        return Err(Error::shape(what, s, &expected));
    }
    Ok(s[0])
}

fn same_batch(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("batch sizes differ: {a} vs {b}")));
    }
    Ok(())
}

/// `G(z, t)`: noise plus projected embedding, a dense layer to a 4×4 seed,
/// then stride-2 transposed convolutions up to an RGB image in `(−1, 1)`.
#[derive(Clone, Debug)]
pub struct Generator<T: Element = f32> {
    config: GanConfig,
    embed_proj: Dense<T>,
    input_proj: Dense<T>,
    input_bn: BatchNorm<T>,
    deconvs: Vec<ConvTranspose2d<T>>,
    bns: Vec<BatchNorm<T>>,
}

impl<T: Element> Generator<T> {
    /// Layers with placeholder values; see [`Generator::new`].
    pub fn uninit(config: &GanConfig) -> Result<Self> {
        config.validate()?;
        let w = config.gen_widths();
        let deconvs = w
            .windows(2)
            .enumerate()
            .map(|(i, p)| ConvTranspose2d::new(&format!("gen.deconv{i}"), p[0], p[1], 4, 2, 1))
            .collect();
        let bns = w[1..w.len() - 1]
            .iter()
            .enumerate()
            .map(|(i, &c)| BatchNorm::new(&format!("gen.bn{i}"), c))
            .collect();
        Ok(Self {
            config: config.clone(),
            embed_proj: Dense::new("gen.embed_proj", config.embed_dim, config.embed_proj),
            input_proj: Dense::new("gen.input_proj", config.noise_dim + config.embed_proj, w[0] * 16),
            input_bn: BatchNorm::new("gen.input_bn", w[0]),
            deconvs,
            bns,
        })
    }

    pub fn new(config: &GanConfig, rng: &mut Rng) -> Result<Self> {
        let mut g = Self::uninit(config)?;
        nn::init_params(&mut g, rng);
        Ok(g)
    }

    pub fn config(&self) -> &GanConfig {
        &self.config
    }

    /// `z: [N, noise_dim]`, `t: [N, embed_dim]` → `[N, 3, S, S]`.
    pub fn forward(&self, tape: &mut Tape<T>, z: Var, t: Var, phase: Phase) -> Result<Var> {
        let c = &self.config;
        let n = check_rows(tape, z, "generator noise", &[c.noise_dim])?;
        same_batch(n, check_rows(tape, t, "generator embedding", &[c.embed_dim])?)?;
        let slope = T::from_f64_lossy(LEAKY_SLOPE);

        let e = self.embed_proj.forward(tape, t)?;
        let e = tape.leaky_relu(e, slope);
        let h = tape.concat(&[z, e], 1)?;
        let h = self.input_proj.forward(tape, h)?;
        let h = tape.reshape(h, &[n, c.gen_base, 4, 4])?;
        let h = self.input_bn.forward(tape, h, phase)?;
        let mut h = tape.relu(h);
        for (i, deconv) in self.deconvs.iter().enumerate() {
            h = deconv.forward(tape, h)?;
            h = match self.bns.get(i) {
                Some(bn) => {
                    let y = bn.forward(tape, h, phase)?;
                    tape.relu(y)
                }
                None => tape.tanh(h),
            };
        }
        Ok(h)
    }

    /// Inference-mode generation on a private tape.
    pub fn generate(&self, z: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let tv = tape.constant(t.clone());
        let out = self.forward(&mut tape, zv, tv, Phase::Eval)?;
        Ok(tape.value(out).clone())
    }

    pub fn cast<U: Element>(&self) -> Result<Generator<U>> {
        let mut g = Generator::uninit(&self.config)?;
        nn::cast_params(self, &mut g)?;
        Ok(g)
    }

    /// Standard-normal noise `[n, noise_dim]`.
    pub fn noise(&self, n: usize, rng: &mut Rng) -> Tensor<T> {
        Tensor::randn(&[n, self.config.noise_dim], 0.0, 1.0, rng)
    }
}

impl<T: Element> Module<T> for Generator<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.embed_proj.visit(f);
        self.input_proj.visit(f);
        self.input_bn.visit(f);
        for d in &self.deconvs {
            d.visit(f);
        }
        for b in &self.bns {
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.embed_proj.visit_mut(f);
        self.input_proj.visit_mut(f);
        self.input_bn.visit_mut(f);
        for d in &mut self.deconvs {
            d.visit_mut(f);
        }
        for b in &mut self.bns {
            b.visit_mut(f);
        }
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = vec![&mut self.input_bn];
        out.extend(self.bns.iter_mut());
        out
    }
}

/// `D(v, t)`: stride-2 convolutions down to 4×4, the projected embedding
/// replicated over that grid and concatenated on channels, a 1×1 conv back
/// to the feature width, then a dense layer to one sigmoid score.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Element = f32> {
    config: GanConfig,
    convs: Vec<Conv2d<T>>,
    bns: Vec<BatchNorm<T>>,
    embed_proj: Dense<T>,
    joint: Conv2d<T>,
    joint_bn: BatchNorm<T>,
    output: Dense<T>,
}

impl<T: Element> Discriminator<T> {
    pub fn uninit(config: &GanConfig) -> Result<Self> {
        config.validate()?;
        let w = config.disc_widths();
        let last = *w.last().expect("at least one stage");
        let convs = w
            .windows(2)
            .enumerate()
            .map(|(i, p)| Conv2d::new(&format!("disc.conv{i}"), p[0], p[1], 4, 2, 1))
            .collect();
        // no normalization after the first conv
        let bns = w[2..]
            .iter()
            .enumerate()
            .map(|(i, &c)| BatchNorm::new(&format!("disc.bn{}", i + 1), c))
            .collect();
        Ok(Self {
            config: config.clone(),
            convs,
            bns,
            embed_proj: Dense::new("disc.embed_proj", config.embed_dim, config.embed_proj),
            joint: Conv2d::new("disc.joint", last + config.embed_proj, last, 1, 1, 0),
            joint_bn: BatchNorm::new("disc.joint_bn", last),
            output: Dense::new("disc.output", last * 16, 1),
        })
    }

    pub fn new(config: &GanConfig, rng: &mut Rng) -> Result<Self> {
        let mut d = Self::uninit(config)?;
        nn::init_params(&mut d, rng);
        Ok(d)
    }

    pub fn config(&self) -> &GanConfig {
        &self.config
    }

    /// `v: [N, 3, S, S]`, `t: [N, embed_dim]` → scores `[N, 1]` in `(0, 1)`.
    pub fn forward(&self, tape: &mut Tape<T>, v: Var, t: Var, phase: Phase) -> Result<Var> {
        let h = self.features(tape, v, phase)?;
        self.head(tape, h, t, phase)
    }

    /// Image trunk: `[N, 3, S, S]` → `[N, C, 4, 4]`. Depends on the image
    /// only, so one trunk output can be scored against several labels.
    pub fn features(&self, tape: &mut Tape<T>, v: Var, phase: Phase) -> Result<Var> {
        let s = self.config.image_size;
        check_rows(tape, v, "discriminator image", &[3, s, s])?;
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let mut h = v;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, h)?;
            if i > 0 {
                h = self.bns[i - 1].forward(tape, h, phase)?;
            }
            h = tape.leaky_relu(h, slope);
        }
        Ok(h)
    }

    /// Conditioning head: trunk features and embeddings → scores.
    pub fn head(&self, tape: &mut Tape<T>, features: Var, t: Var, phase: Phase) -> Result<Var> {
        let c = &self.config;
        let last = *c.disc_widths().last().expect("at least one stage");
        let n = check_rows(tape, features, "discriminator features", &[last, 4, 4])?;
        same_batch(n, check_rows(tape, t, "discriminator embedding", &[c.embed_dim])?)?;
        let slope = T::from_f64_lossy(LEAKY_SLOPE);

        let e = self.embed_proj.forward(tape, t)?;
        let e = tape.leaky_relu(e, slope);
        let e = tape.reshape(e, &[n, c.embed_proj, 1, 1])?;
        let e = tape.expand(e, &[n, c.embed_proj, 4, 4])?;
        let h = tape.concat(&[features, e], 1)?;
        let h = self.joint.forward(tape, h)?;
        let h = self.joint_bn.forward(tape, h, phase)?;
        let h = tape.leaky_relu(h, slope);
        let h = tape.reshape(h, &[n, last * 16])?;
        let logit = self.output.forward(tape, h)?;
        Ok(tape.sigmoid(logit))
    }

    /// Inference-mode scores on a private tape.
    pub fn score(&self, v: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vv = tape.constant(v.clone());
        let tv = tape.constant(t.clone());
        let out = self.forward(&mut tape, vv, tv, Phase::Eval)?;
        Ok(tape.value(out).clone())
    }

    pub fn cast<U: Element>(&self) -> Result<Discriminator<U>> {
        let mut d = Discriminator::uninit(&self.config)?;
        nn::cast_params(self, &mut d)?;
        Ok(d)
    }
}

impl<T: Element> Module<T> for Discriminator<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        for c in &self.convs {
            c.visit(f);
        }
        for b in &self.bns {
            b.visit(f);
        }
        self.embed_proj.visit(f);
        self.joint.visit(f);
        self.joint_bn.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        for c in &mut self.convs {
            c.visit_mut(f);
        }
        for b in &mut self.bns {
            b.visit_mut(f);
        }
        self.embed_proj.visit_mut(f);
        self.joint.visit_mut(f);
        self.joint_bn.visit_mut(f);
        self.output.visit_mut(f);
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out: Vec<&mut BatchNorm<T>> = self.bns.iter_mut().collect();
        out.push(&mut self.joint_bn);
        out
    }
}

/// `table[i][j]` = mean inference-mode score of the class-`i` images of
/// `corpus` paired with the class-`j` embedding.
pub fn score_table(d: &Discriminator<f32>, corpus: &Corpus, classes: &ClassTable) -> Result<Vec<Vec<f64>>> {
    let k = classes.num_classes();
    if k == 0 {
        return Err(Error::invalid("score table over zero classes"));
    }
    let mut table = Vec::with_capacity(k);
    for i in 0..k {
        let images: Vec<Tensor<f32>> = corpus
            .samples
            .iter()
            .filter(|s| s.label == i)
            .map(|s| s.pixels.clone())
            .collect();
        if images.is_empty() {
            return Err(Error::invalid(format!("class {i} has no images")));
        }
        let batch = Tensor::stack(&images)?;
        let row = (0..k)
            .map(|j| {
                let scores = d.score(&batch, &classes.rows(&vec![j; images.len()]))?;
                Ok(scores.data().iter().map(|&s| f64::from(s)).sum::<f64>() / images.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        table.push(row);
    }
    Ok(table)
}
