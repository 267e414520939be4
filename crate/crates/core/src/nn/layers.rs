use super::{Module, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{Element, StatUpdate, Tape, Tensor, Var};

/// Whether normalization layers use batch statistics or running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

fn param<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).with_requires_grad(true)
}

/// Fully connected layer, `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Dense<T: Element = f32> {
    name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Dense<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.to_owned(),
            weight: param(&[outputs, inputs]),
            bias: param(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.inputs() {
            return Err(Error::shape(
                "dense",
                tape.shape(x),
                &[self.outputs(), self.inputs()],
            ));
        }
        let w = tape.param(&format!("{}.weight", self.name), &self.weight);
        let b = tape.param(&format!("{}.bias", self.name), &self.bias);
        let y = tape.matmul_t(x, w)?;
        tape.add(y, b)
    }
}

impl<T: Element> Module<T> for Dense<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &self.weight, ParamKind::Weight);
        f(&format!("{}.bias", self.name), &self.bias, ParamKind::Bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &mut self.weight, ParamKind::Weight);
        f(&format!("{}.bias", self.name), &mut self.bias, ParamKind::Bias);
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        Vec::new()
    }
}

/// Strided 2-D cross-correlation, `W: [out_ch, in_ch, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Element = f32> {
    name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be positive");
        Self {
            name: name.to_owned(),
            weight: param(&[out_ch, in_ch, kernel, kernel]),
            bias: param(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.weight", self.name), &self.weight);
        let b = tape.param(&format!("{}.bias", self.name), &self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &self.weight, ParamKind::Weight);
        f(&format!("{}.bias", self.name), &self.bias, ParamKind::Bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &mut self.weight, ParamKind::Weight);
        f(&format!("{}.bias", self.name), &mut self.bias, ParamKind::Bias);
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        Vec::new()
    }
}

/// Transposed convolution ("deconvolution"), `W: [in_ch, out_ch, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Element = f32> {
    name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> ConvTranspose2d<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be positive");
        Self {
            name: name.to_owned(),
            weight: param(&[in_ch, out_ch, kernel, kernel]),
            bias: param(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.weight", self.name), &self.weight);
        let b = tape.param(&format!("{}.bias", self.name), &self.bias);
        tape.conv_transpose2d(x, w, Some(b), self.stride, self.padding)
    }
}

impl<T: Element> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &self.weight, ParamKind::Weight);
        f(&format!("{}.bias", self.name), &self.bias, ParamKind::Bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &mut self.weight, ParamKind::Weight);
        f(&format!("{}.bias", self.name), &mut self.bias, ParamKind::Bias);
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        Vec::new()
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Element = f32> {
    name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Element> BatchNorm<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_owned(),
            gamma: Tensor::ones(&[channels]).with_requires_grad(true),
            beta: param(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: T::from_f64_lossy(Self::EPS),
            momentum: T::from_f64_lossy(Self::MOMENTUM),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// In [`Phase::Train`] the batch statistics normalize the input and are
    /// recorded on the tape; [`super::commit_batch_stats`] later folds them
    /// into the running averages. [`Phase::Eval`] reads the running averages
    /// only, so it is a pure function of the layer state.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, phase: Phase) -> Result<Var> {
        let gamma = tape.param(&format!("{}.gamma", self.name), &self.gamma);
        let beta = tape.param(&format!("{}.beta", self.name), &self.beta);
        match phase {
            Phase::Eval => {
                let running = Some((self.running_mean.data(), self.running_var.data()));
                Ok(tape.batch_norm(x, gamma, beta, running, self.eps)?.0)
            }
            Phase::Train => {
                let s = tape.shape(x);
                let count = s[0] * s[2..].iter().product::<usize>();
                let (y, stats) = tape.batch_norm(x, gamma, beta, None, self.eps)?;
                let (mean, biased) = stats.expect("training mode returns batch statistics");
                let correction = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                tape.record_stats(StatUpdate {
                    layer: self.name.clone(),
                    mean,
                    var: biased.into_iter().map(|v| v * correction).collect(),
                });
                Ok(y)
            }
        }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn absorb(&mut self, update: &StatUpdate<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&update.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&update.var) {
            *r = keep * *r + m * b;
        }
    }
}

impl<T: Element> Module<T> for BatchNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&format!("{}.gamma", self.name), &self.gamma, ParamKind::Gamma);
        f(&format!("{}.beta", self.name), &self.beta, ParamKind::Beta);
        f(&format!("{}.running_mean", self.name), &self.running_mean, ParamKind::RunningMean);
        f(&format!("{}.running_var", self.name), &self.running_var, ParamKind::RunningVar);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma, ParamKind::Gamma);
        f(&format!("{}.beta", self.name), &mut self.beta, ParamKind::Beta);
        f(
            &format!("{}.running_mean", self.name),
            &mut self.running_mean,
            ParamKind::RunningMean,
        );
        f(
            &format!("{}.running_var", self.name),
            &mut self.running_var,
            ParamKind::RunningVar,
        );
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        vec![self]
    }
}
