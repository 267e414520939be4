//! Registry of finite-difference gradient checks covering every
//! differentiable op, layer, loss and the composed networks.
//!
//! Each check compares tape gradients against central differences and
//! reports the worst [`relative_error`]. Inputs are drawn away from the
//! kinks of piecewise-linear ops and from clamp bounds, where central
//! differences are not meaningful.

use crate::error::Result;
use crate::gan::{
    discriminator_loss_threepart, generator_loss, minimax_value, Discriminator, GanConfig, Generator,
    GeneratorObjective, LossWeights,
};
use crate::nn::{self, BatchNorm, Conv2d, ConvTranspose2d, Dense, Module, ParamKind, Phase};
use crate::rng::Rng;
use crate::tensor::{grad_check_many, relative_error, Element, Tape, Tensor, Var};

/// Step of the central differences.
pub const STEP: f64 = 1e-5;
/// Tolerance for checks run entirely in 64-bit.
pub const TOL_F64: f64 = 1e-6;
/// Tolerance for 32-bit analytic gradients of composed networks.
pub const TOL_F32: f64 = 1e-3;

/// One registered check.
pub struct GradCheck {
    pub name: &'static str,
    /// Precision of the analytic gradient.
    pub precision: &'static str,
    pub tolerance: f64,
    run: fn() -> Result<f64>,
}

impl GradCheck {
    pub fn run(&self) -> CheckResult {
        let outcome = (self.run)();
        CheckResult {
            name: self.name,
            precision: self.precision,
            tolerance: self.tolerance,
            max_rel_err: outcome.as_ref().copied().unwrap_or(f64::NAN),
            error: outcome.err().map(|e| e.to_string()),
        }
    }
}

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub precision: &'static str,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub error: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_err < self.tolerance
    }
}

/// Run every registered check in order.
pub fn run_all() -> Vec<CheckResult> {
    registry().iter().map(GradCheck::run).collect()
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 0.0, 1.0, &mut Rng::new(seed).substream("gradsuite"))
}

/// Normal samples pushed at least `gap` away from zero.
fn away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    let mut t = randn(shape, seed);
    for v in t.data_mut() {
        *v += gap.copysign(*v);
    }
    t
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed).substream("gradsuite-uniform");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect()).expect("shape")
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element carries a
/// distinct weight into the scalar.
fn weighted<T: Element>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let r = randn(tape.shape(y), seed ^ 0x5eed).cast::<T>();
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn op_check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    grad_check_many(
        |tape, v| {
            let y = f(tape, v)?;
            weighted(tape, y, 1)
        },
        inputs,
        STEP,
    )
}

/// Up to `count` evenly spaced indices into `0..len`.
fn spread(len: usize, count: usize) -> impl Iterator<Item = usize> {
    let count = count.min(len);
    (0..count).map(move |k| k * len / count)
}

/// Compare the gradients of `loss` with respect to the inputs and the
/// trainable parameters of `net` (analytic, precision `T`) against central
/// differences of `loss64` on the 64-bit copy `net64`. At most
/// `per_tensor` entries of each tensor are probed.
fn module_check<T, A, B>(
    net: &A,
    net64: &B,
    inputs: &[Tensor<f64>],
    loss: impl Fn(&A, &mut Tape<T>, &[Var]) -> Result<Var>,
    loss64: impl Fn(&B, &mut Tape<f64>, &[Var]) -> Result<Var>,
    per_tensor: usize,
) -> Result<f64>
where
    T: Element,
    A: Module<T>,
    B: Module<f64> + Clone,
{
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.cast())).collect();
    let l = loss(net, &mut tape, &vars)?;
    tape.backward(l)?;

    let eval = |net: &B, xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let l = loss64(net, &mut tape, &vars)?;
        Ok(tape.value(l).item())
    };
    let central = |up: f64, down: f64| (up - down) / (2.0 * STEP);

    let mut worst = 0f64;
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let grad = tape.grad(v).map(<[T]>::to_vec);
        for j in spread(inputs[i].len(), per_tensor) {
            let analytic = grad.as_ref().map_or(0.0, |g| g[j].to_f64_lossy());
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let up = eval(net64, &probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let down = eval(net64, &probe)?;
            probe[i].data_mut()[j] = orig;
            worst = worst.max(relative_error(analytic, central(up, down)));
        }
    }

    let mut params = Vec::new();
    net64.visit(&mut |name, t, kind| {
        if kind.trainable() {
            params.push((name.to_owned(), t.len()));
        }
    });
    for (name, len) in params {
        let grad = tape.param_grad(&name).map(<[T]>::to_vec);
        for j in spread(len, per_tensor) {
            let shifted = |delta: f64| {
                let mut copy = net64.clone();
                copy.visit_mut(&mut |n, t, _| {
                    if n == name {
                        t.data_mut()[j] += delta;
                    }
                });
                eval(&copy, inputs)
            };
            let analytic = grad.as_ref().map_or(0.0, |g| g[j].to_f64_lossy());
            worst = worst.max(relative_error(analytic, central(shifted(STEP)?, shifted(-STEP)?)));
        }
    }
    Ok(worst)
}

fn layer_check<M: Module<f64> + Clone>(
    layer: &M,
    inputs: &[Tensor<f64>],
    f: impl Fn(&M, &mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let loss = |m: &M, tape: &mut Tape<f64>, v: &[Var]| {
        let y = f(m, tape, v)?;
        weighted(tape, y, 2)
    };
    module_check(layer, layer, inputs, loss, loss, usize::MAX)
}

fn init<M: Module<f64>>(mut m: M, seed: u64) -> M {
    nn::init_params(&mut m, &mut Rng::new(seed));
    // larger weights than the training init keep activations well scaled
    m.visit_mut(&mut |_, t, kind| {
        if kind == ParamKind::Weight {
            for v in t.data_mut() {
                *v *= 25.0;
            }
        } else if kind.trainable() {
            let noise = randn(t.shape(), t.len() as u64);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += 0.1 * n;
            }
        }
    });
    m
}

fn tiny_arch() -> GanConfig {
    GanConfig {
        noise_dim: 3,
        embed_dim: 4,
        embed_proj: 2,
        image_size: 8,
        gen_base: 4,
        disc_base: 2,
    }
}

/// Generator and discriminator as one module.
#[derive(Clone)]
struct Pair<T: Element> {
    g: Generator<T>,
    d: Discriminator<T>,
}

impl<T: Element> Module<T> for Pair<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.g.visit(f);
        self.d.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.g.visit_mut(f);
        self.d.visit_mut(f);
    }
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = self.g.batch_norms_mut();
        v.extend(self.d.batch_norms_mut());
        v
    }
}

fn pair<T: Element>() -> Result<Pair<T>> {
    let c = tiny_arch();
    let mut rng = Rng::new(77);
    Ok(Pair {
        g: Generator::new(&c, &mut rng)?,
        d: Discriminator::new(&c, &mut rng)?,
    })
}

/// Non-saturating generator loss of `D(G(z, t), t)`, both nets in training mode.
fn adversarial<T: Element>(p: &Pair<T>, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    let fake = p.g.forward(tape, v[0], v[1], Phase::Train)?;
    let s = p.d.forward(tape, fake, v[1], Phase::Train)?;
    generator_loss(tape, s, GeneratorObjective::NonSaturating)
}

fn pair_inputs() -> Vec<Tensor<f64>> {
    let c = tiny_arch();
    vec![randn(&[3, c.noise_dim], 61), randn(&[3, c.embed_dim], 62)]
}

fn scores(seed: u64) -> Tensor<f64> {
    uniform(&[4, 1], seed, 0.05, 0.95)
}

macro_rules! check {
    ($name:expr, $body:expr) => {
        GradCheck {
            name: $name,
            precision: "f64",
            tolerance: TOL_F64,
            run: || $body,
        }
    };
}

/// Every registered check, in reporting order.
pub fn registry() -> Vec<GradCheck> {
    vec![
        check!("add", op_check(&[randn(&[3, 4], 1), randn(&[4], 2)], |t, v| t.add(v[0], v[1]))),
        check!("sub", op_check(&[randn(&[2, 3, 2], 3), randn(&[3, 1], 4)], |t, v| t.sub(v[0], v[1]))),
        check!("mul", op_check(&[randn(&[3, 4], 5), randn(&[3, 1], 6)], |t, v| t.mul(v[0], v[1]))),
        check!("scale", op_check(&[randn(&[5], 7)], |t, v| Ok(t.scale(v[0], -1.7)))),
        check!("add_scalar", op_check(&[randn(&[5], 8)], |t, v| Ok(t.add_scalar(v[0], 0.3)))),
        check!("one_minus", op_check(&[randn(&[5], 9)], |t, v| Ok(t.one_minus(v[0])))),
        check!("matmul", op_check(&[randn(&[3, 4], 10), randn(&[4, 2], 11)], |t, v| t.matmul(v[0], v[1]))),
        check!("matmul_t", op_check(&[randn(&[3, 4], 12), randn(&[5, 4], 13)], |t, v| t.matmul_t(v[0], v[1]))),
        check!("transpose", op_check(&[randn(&[3, 4], 14)], |t, v| t.transpose(v[0]))),
        check!("relu", op_check(&[away_from_zero(&[12], 15, 0.05)], |t, v| Ok(t.relu(v[0])))),
        check!("leaky_relu", op_check(&[away_from_zero(&[12], 16, 0.05)], |t, v| Ok(t.leaky_relu(v[0], 0.2)))),
        check!("tanh", op_check(&[randn(&[8], 17)], |t, v| Ok(t.tanh(v[0])))),
        check!("sigmoid", op_check(&[randn(&[8], 18)], |t, v| Ok(t.sigmoid(v[0])))),
        check!("ln", op_check(&[uniform(&[8], 19, 0.3, 3.0)], |t, v| t.ln(v[0]))),
        check!("clamp", {
            // no entry within 0.05 of either bound
            let mut x = uniform(&[12], 20, -1.0, 1.0);
            for v in x.data_mut() {
                if (v.abs() - 0.5).abs() < 0.05 {
                    *v += 0.1;
                }
            }
            op_check(&[x], |t, v| Ok(t.clamp(v[0], -0.5, 0.5)))
        }),
        check!("sum", grad_check_many(|t, v| Ok(t.sum(v[0])), &[randn(&[3, 2], 21)], STEP)),
        check!("mean", grad_check_many(|t, v| Ok(t.mean(v[0])), &[randn(&[3, 2], 22)], STEP)),
        check!("reshape", op_check(&[randn(&[2, 6], 23)], |t, v| t.reshape(v[0], &[3, 2, 2]))),
        check!("expand", op_check(&[randn(&[2, 1, 3], 24)], |t, v| t.expand(v[0], &[4, 2, 5, 3]))),
        check!("concat", op_check(&[randn(&[2, 3, 2], 25), randn(&[2, 1, 2], 26)], |t, v| t.concat(&[v[0], v[1]], 1))),
        check!("conv2d", op_check(
            &[randn(&[2, 3, 6, 5], 27), randn(&[4, 3, 3, 3], 28), randn(&[4], 29)],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        )),
        check!("conv_transpose2d", op_check(
            &[randn(&[2, 3, 3, 4], 30), randn(&[3, 2, 4, 4], 31), randn(&[2], 32)],
            |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1),
        )),
        check!("batch_norm_train", op_check(
            &[randn(&[4, 3, 2, 2], 33), uniform(&[3], 34, 0.5, 1.5), randn(&[3], 35)],
            |t, v| Ok(t.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0),
        )),
        check!("batch_norm_eval", {
            let (mean, var) = (randn(&[3], 36), uniform(&[3], 37, 0.5, 2.0));
            op_check(
                &[randn(&[4, 3, 2, 2], 38), uniform(&[3], 39, 0.5, 1.5), randn(&[3], 40)],
                move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], Some((mean.data(), var.data())), 1e-5)?.0),
            )
        }),
        check!("dense", layer_check(&init(Dense::new("dense", 4, 3), 41), &[randn(&[5, 4], 42)], |m, t, v| {
            m.forward(t, v[0])
        })),
        check!("conv2d_layer", layer_check(
            &init(Conv2d::new("conv", 2, 3, 4, 2, 1), 43),
            &[randn(&[2, 2, 6, 6], 44)],
            |m, t, v| m.forward(t, v[0]),
        )),
        check!("conv_transpose2d_layer", layer_check(
            &init(ConvTranspose2d::new("deconv", 3, 2, 4, 2, 1), 45),
            &[randn(&[2, 3, 3, 3], 46)],
            |m, t, v| m.forward(t, v[0]),
        )),
        check!("batch_norm_layer", layer_check(
            &init(BatchNorm::new("bn", 3), 47),
            &[randn(&[3, 3, 2, 2], 48)],
            |m, t, v| m.forward(t, v[0], Phase::Train),
        )),
        check!("minimax_value", grad_check_many(|t, v| minimax_value(t, v[0], v[1]), &[scores(49), scores(50)], STEP)),
        check!("discriminator_loss_threepart", {
            let w = LossWeights::new(0.5, 0.3, 0.2)?;
            grad_check_many(
                move |t, v| discriminator_loss_threepart(t, v[0], v[1], v[2], &w),
                &[scores(51), scores(52), scores(53)],
                STEP,
            )
        }),
        check!("generator_loss", grad_check_many(
            |t, v| generator_loss(t, v[0], GeneratorObjective::NonSaturating),
            &[scores(54)],
            STEP,
        )),
        check!("generator_loss_minimax", grad_check_many(
            |t, v| generator_loss(t, v[0], GeneratorObjective::Minimax),
            &[scores(55)],
            STEP,
        )),
        check!("generator", {
            let g = pair::<f64>()?.g;
            layer_check(&g, &pair_inputs(), |g, t, v| g.forward(t, v[0], v[1], Phase::Train))
        }),
        check!("discriminator", {
            let d = pair::<f64>()?.d;
            let inputs = [randn(&[3, 3, 8, 8], 56), randn(&[3, tiny_arch().embed_dim], 57)];
            layer_check(&d, &inputs, |d, t, v| d.forward(t, v[0], v[1], Phase::Train))
        }),
        check!("generator_discriminator", {
            let p = pair::<f64>()?;
            module_check(&p, &p, &pair_inputs(), adversarial, adversarial, 6)
        }),
        GradCheck {
            name: "generator_discriminator",
            precision: "f32",
            tolerance: TOL_F32,
            run: || {
                let p32 = pair::<f32>()?;
                let p64 = Pair {
                    g: p32.g.cast()?,
                    d: p32.d.cast()?,
                };
                module_check(&p32, &p64, &pair_inputs(), adversarial, adversarial, 6)
            },
        },
    ]
}
