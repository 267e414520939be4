use std::collections::HashMap;

use super::kernels::{self, Window};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for a user-supplied op: `(inputs, output, output_grad)`
/// to one gradient buffer per input.
pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    MatMul(Var, Var, bool),
    Transpose(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Expand(Var),
    Concat(Vec<Var>, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        window: Window,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        window: Window,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    Custom(Vec<Var>, BackwardFn<T>),
}

impl<T> Op<T> {
    #[cfg_attr(not(debug_assertions), allow(dead_code))]
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Ln(..) => "ln",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Expand(..) => "expand",
            Op::Concat(..) => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Custom(..) => "custom",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Ln(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Expand(a) => vec![*a],
            Op::Concat(parts, _) | Op::Custom(parts, _) => parts.clone(),
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Batch statistics observed by a normalization layer during a forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub layer: String,
    pub mean: Vec<T>,
    /// Unbiased per-channel variance.
    pub var: Vec<T>,
}

/// Record of every op in one forward pass, in execution order.
///
/// Values live on the tape; [`Var`] handles index into it. `backward`
/// walks the record in exact reverse order and accumulates gradients
/// into leaves that require them.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    frozen: Vec<String>,
    stats: Vec<StatUpdate<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<T: Element>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        #[cfg(debug_assertions)]
        if !value.is_finite() && inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
            panic!("{} produced a non-finite value from finite inputs", op.name());
        }
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value: value.with_requires_grad(false),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a tensor. It becomes a differentiable leaf if it requires grad.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Record a tensor that gradients never flow into.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    /// Differentiable leaf. Shorthand for `input(tensor.with_requires_grad(true))`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf)
    }

    /// Bind a named parameter. Binding the same name twice returns the
    /// first handle, so a network applied repeatedly shares its leaves.
    pub fn param(&mut self, name: &str, tensor: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(tensor.clone().with_requires_grad(trainable), Op::Leaf);
        self.params.insert(name.to_owned(), v);
        v
    }

    /// Parameters bound later whose names start with `prefix` are treated
    /// as constants: gradients still flow through them but are not stored.
    pub fn freeze(&mut self, prefix: &str) {
        self.frozen.push(prefix.to_owned());
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn param_grad(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate<T>) {
        self.stats.push(update);
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stats
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape(), data).expect("same shape");
        self.push(out, op)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = kernels::broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let (da, db) = (ta.data(), tb.data());
            kernels::for_each_broadcast(&shape, &[ta.shape(), tb.shape()], |_, idx| {
                data.push(f(da[idx[0]], db[idx[1]]))
            });
            data
        };
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, op))
    }

    /// Elementwise sum with broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::Shift(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, T::one())
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`, without materializing `bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let inner = if transpose_b { 1 } else { 0 };
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[inner] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1 - inner]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(m, k, n, ta.data(), false, tb.data(), transpose_b, &mut out, false);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b, transpose_b)))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::invalid(format!("transpose of shape {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = Tensor::new(&[c, r], transpose_buf(t.data(), r, c))?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    /// Rectifier; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    /// `x` for positive inputs, `slope·x` otherwise (derivative `slope` at 0).
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Natural logarithm. Inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= T::zero()) {
            return Err(Error::invalid(format!("ln of non-positive value {bad}")));
        }
        Ok(self.unary(x, |v| v.ln(), Op::Ln(x)))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where no clamping happened.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let n = T::from_usize(t.len()).expect("length fits");
        self.push(Tensor::scalar(s / n), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Materialize a broadcast of `x` to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        match kernels::broadcast_shape(t.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("expand", t.shape(), shape)),
        }
        let src = t.data();
        let mut data = Vec::with_capacity(shape.iter().product());
        kernels::for_each_broadcast(shape, &[t.shape()], |_, idx| data.push(src[idx[0]]));
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Expand(x)))
    }

    /// Join tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::invalid("empty concat"))?);
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total_axis += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    /// 2-D cross-correlation (no kernel flip) of `x: [N, C, H, W]` with
    /// `w: [O, C, kh, kw]` plus optional bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let out_h = conv_out(h, kh, stride, pad).ok_or_else(|| {
            Error::invalid(format!("conv2d output height < 1 (in {h}, k {kh}, s {stride}, p {pad})"))
        })?;
        let out_w = conv_out(wd, kw, stride, pad).ok_or_else(|| {
            Error::invalid(format!("conv2d output width < 1 (in {wd}, k {kw}, s {stride}, p {pad})"))
        })?;
        let window = Window {
            channels: c,
            in_h: h,
            in_w: wd,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let bias = self.bias_data(b, o, "conv2d")?;
        let (tx, tw) = (self.value(x), self.value(w));
        let (rows, cols) = (window.rows(), window.cols());
        let mut patches = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); n * o * cols];
        for i in 0..n {
            kernels::im2col(&tx.data()[i * c * h * wd..(i + 1) * c * h * wd], &window, &mut patches);
            let dst = &mut out[i * o * cols..(i + 1) * o * cols];
            kernels::matmul_into(o, rows, cols, tw.data(), false, &patches, false, dst, false);
            add_channel_bias(dst, bias.as_deref(), cols);
        }
        let out = Tensor::new(&[n, o, out_h, out_w], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, window }))
    }

    /// Transposed convolution: the adjoint of [`Tape::conv2d`] with the
    /// same stride and padding. `x: [N, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`,
    /// output spatial size `(H − 1)·stride − 2·pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(Error::shape("conv_transpose2d", sx, sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d stride must be positive"));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[1], sw[2], sw[3]);
        let out_h = deconv_out(h, kh, stride, pad).ok_or_else(|| {
            Error::invalid(format!("conv_transpose2d output height < 1 (in {h}, k {kh})"))
        })?;
        let out_w = deconv_out(wd, kw, stride, pad).ok_or_else(|| {
            Error::invalid(format!("conv_transpose2d output width < 1 (in {wd}, k {kw})"))
        })?;
        // The window describes the forward convolution this op is the adjoint of.
        let window = Window {
            channels: cout,
            in_h: out_h,
            in_w: out_w,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let bias = self.bias_data(b, cout, "conv_transpose2d")?;
        let (tx, tw) = (self.value(x), self.value(w));
        let (rows, cols) = (window.rows(), window.cols());
        let plane = out_h * out_w;
        let mut patches = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); n * cout * plane];
        for i in 0..n {
            let xs = &tx.data()[i * cin * cols..(i + 1) * cin * cols];
            kernels::matmul_into(rows, cin, cols, tw.data(), true, xs, false, &mut patches, false);
            let dst = &mut out[i * cout * plane..(i + 1) * cout * plane];
            kernels::col2im(&patches, &window, dst);
            add_channel_bias(dst, bias.as_deref(), plane);
        }
        let out = Tensor::new(&[n, cout, out_h, out_w], out)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, window }))
    }

    fn bias_data(&self, b: Option<Var>, channels: usize, op: &'static str) -> Result<Option<Vec<T>>> {
        match b {
            None => Ok(None),
            Some(b) => {
                let t = self.value(b);
                if t.shape() != [channels] {
                    return Err(Error::shape(op, t.shape(), &[channels]));
                }
                Ok(Some(t.data().to_vec()))
            }
        }
    }

    /// Per-channel normalization of `[N, C, ...]` followed by `gamma·x̂ + beta`.
    ///
    /// With `running = None` the batch statistics are used (biased
    /// variance) and returned as `(mean, biased_var)`; otherwise the given
    /// `(mean, var)` pair is used and nothing is returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() < 2 {
            return Err(Error::invalid(format!("batch_norm needs [N, C, ...], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::invalid(format!(
                    "batch_norm {name} shape {:?}, expected [{c}]",
                    self.shape(v)
                )));
            }
        }
        let count = n * spatial;
        let tx = self.value(x);
        let xd = tx.data();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::invalid("batch_norm running statistics length"));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if count < 2 {
                    return Err(Error::invalid(
                        "batch_norm in training mode needs at least two values per channel",
                    ));
                }
                let (m, v) = channel_moments(xd, n, c, spatial);
                (m, v, true)
            }
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let (m, is, gg, bb) = (mean[ch], invstd[ch], g[ch], bt[ch]);
                for k in base..base + spatial {
                    out[k] = gg * (xd[k] - m) * is + bb;
                }
            }
        }
        let out = Tensor::new(&s, out)?;
        let stats = batch_stats.then(|| (mean.clone(), var));
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            },
        );
        Ok((v, stats))
    }

    /// Record an op whose backward rule is supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), backward))
    }

    /// Reverse sweep from a scalar `loss`. Gradients add onto whatever the
    /// leaves already hold, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((id, g));
                continue;
            }
            for (input, contrib) in self.node_backward(id, &g) {
                if self.nodes[input.0].requires_grad {
                    acc(&mut grads[input.0], contrib);
                }
            }
        }
        for (id, g) in leaf_grads {
            acc(&mut self.nodes[id].grad, g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let map = |x: Var, f: &dyn Fn(T, T) -> T| -> Vec<T> {
            // f(input, output) gives the local derivative.
            val(x)
                .data()
                .iter()
                .zip(out.data())
                .zip(g)
                .map(|((&xi, &yi), &gi)| gi * f(xi, yi))
                .collect()
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                let mut res = Vec::new();
                if self.needs(*a) {
                    res.push((*a, kernels::reduce_to(g, out.shape(), val(*a).shape())));
                }
                if self.needs(*b) {
                    let mut gb = kernels::reduce_to(g, out.shape(), val(*b).shape());
                    gb.iter_mut().for_each(|v| *v = *v * sign);
                    res.push((*b, gb));
                }
                res
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut res = Vec::new();
                for (target, other, target_is_a) in [(*a, tb, true), (*b, ta, false)] {
                    if !self.needs(target) {
                        continue;
                    }
                    let tshape = val(target).shape();
                    let mut full = Vec::with_capacity(g.len());
                    let od = other.data();
                    let shapes: [&[usize]; 2] = if target_is_a {
                        [ta.shape(), tb.shape()]
                    } else {
                        [tb.shape(), ta.shape()]
                    };
                    kernels::for_each_broadcast(out.shape(), &shapes, |flat, idx| {
                        full.push(g[flat] * od[idx[1]])
                    });
                    res.push((target, kernels::reduce_to(&full, out.shape(), tshape)));
                }
                res
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::Shift(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::MatMul(a, b, transpose_b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = out.shape()[1];
                let mut res = Vec::new();
                if self.needs(*a) {
                    // dA = G·Bᵀ (or G·B when B was used transposed)
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_into(m, n, k, g, false, tb.data(), !transpose_b, &mut ga, false);
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    let gb = if *transpose_b {
                        // d(Bᵀ) = Aᵀ·G, so dB = Gᵀ·A : [n, k]
                        let mut gb = vec![T::zero(); n * k];
                        kernels::matmul_into(n, m, k, g, true, ta.data(), false, &mut gb, false);
                        gb
                    } else {
                        let mut gb = vec![T::zero(); k * n];
                        kernels::matmul_into(k, m, n, ta.data(), true, g, false, &mut gb, false);
                        gb
                    };
                    res.push((*b, gb));
                }
                res
            }
            Op::Transpose(x) => {
                let s = out.shape();
                vec![(*x, transpose_buf(g, s[0], s[1]))]
            }
            Op::Relu(x) => vec![(
                *x,
                map(*x, &|xi, _| if xi > T::zero() { T::one() } else { T::zero() }),
            )],
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                vec![(*x, map(*x, &|xi, _| if xi > T::zero() { T::one() } else { slope }))]
            }
            Op::Tanh(x) => vec![(*x, map(*x, &|_, y| T::one() - y * y))],
            Op::Sigmoid(x) => vec![(*x, map(*x, &|_, y| y * (T::one() - y)))],
            Op::Ln(x) => vec![(*x, map(*x, &|xi, _| T::one() / xi))],
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *x,
                    map(*x, &|xi, _| if xi >= lo && xi <= hi { T::one() } else { T::zero() }),
                )]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / T::from_usize(n).expect("len"); n])]
            }
            Op::Expand(x) => vec![(*x, kernels::reduce_to(g, out.shape(), val(*x).shape()))],
            Op::Concat(parts, axis) => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let row = s[*axis] * inner;
                let mut offset = 0;
                let mut res = Vec::new();
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        res.push((p, gp));
                    }
                    offset += chunk;
                }
                res
            }
            Op::Conv2d { x, w, b, window } => self.conv_backward(*x, *w, *b, window, g),
            Op::ConvTranspose2d { x, w, b, window } => self.deconv_backward(*x, *w, *b, window, g),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            } => self.bn_backward(*x, *gamma, *beta, mean, invstd, *batch_stats, g),
            Op::Custom(inputs, backward) => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let grads = backward(&ins, out, g);
                assert_eq!(grads.len(), inputs.len(), "custom backward arity");
                inputs.iter().copied().zip(grads).collect()
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Option<Var>, win: &Window, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let (tx, tw) = (self.value(x), self.value(w));
        let n = tx.shape()[0];
        let o = tw.shape()[0];
        let (rows, cols) = (win.rows(), win.cols());
        let img = win.channels * win.in_h * win.in_w;
        let mut patches = vec![T::zero(); rows * cols];
        let mut gw = self.needs(w).then(|| vec![T::zero(); o * rows]);
        let mut gx = self.needs(x).then(|| vec![T::zero(); n * img]);
        let mut dpatch = vec![T::zero(); rows * cols];
        for i in 0..n {
            let go = &g[i * o * cols..(i + 1) * o * cols];
            if let Some(gw) = gw.as_mut() {
                kernels::im2col(&tx.data()[i * img..(i + 1) * img], win, &mut patches);
                kernels::matmul_into(o, cols, rows, go, false, &patches, true, gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                kernels::matmul_into(rows, o, cols, tw.data(), true, go, false, &mut dpatch, false);
                kernels::col2im(&dpatch, win, &mut gx[i * img..(i + 1) * img]);
            }
        }
        let mut res = Vec::new();
        if let Some(gx) = gx {
            res.push((x, gx));
        }
        if let Some(gw) = gw {
            res.push((w, gw));
        }
        if let Some(b) = b.filter(|&b| self.needs(b)) {
            res.push((b, channel_sums(g, n, o, cols)));
        }
        res
    }

    fn deconv_backward(&self, x: Var, w: Var, b: Option<Var>, win: &Window, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, cin) = (tx.shape()[0], tx.shape()[1]);
        let cout = win.channels;
        let (rows, cols) = (win.rows(), win.cols());
        let plane = win.in_h * win.in_w;
        let mut dpatch = vec![T::zero(); rows * cols];
        let mut gw = self.needs(w).then(|| vec![T::zero(); cin * rows]);
        let mut gx = self.needs(x).then(|| vec![T::zero(); n * cin * cols]);
        for i in 0..n {
            kernels::im2col(&g[i * cout * plane..(i + 1) * cout * plane], win, &mut dpatch);
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[i * cin * cols..(i + 1) * cin * cols];
                kernels::matmul_into(cin, rows, cols, tw.data(), false, &dpatch, false, dst, false);
            }
            if let Some(gw) = gw.as_mut() {
                let xs = &tx.data()[i * cin * cols..(i + 1) * cin * cols];
                kernels::matmul_into(cin, cols, rows, xs, false, &dpatch, true, gw, true);
            }
        }
        let mut res = Vec::new();
        if let Some(gx) = gx {
            res.push((x, gx));
        }
        if let Some(gw) = gw {
            res.push((w, gw));
        }
        if let Some(b) = b.filter(|&b| self.needs(b)) {
            res.push((b, channel_sums(g, n, cout, plane)));
        }
        res
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        invstd: &[T],
        batch_stats: bool,
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let tx = self.value(x);
        let s = tx.shape();
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let xd = tx.data();
        let gm = self.value(gamma).data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for k in base..base + spatial {
                    let xhat = (xd[k] - mean[ch]) * invstd[ch];
                    dgamma[ch] += g[k] * xhat;
                    dbeta[ch] += g[k];
                }
            }
        }
        let mut res = Vec::new();
        if self.needs(x) {
            let mut dx = vec![T::zero(); xd.len()];
            let m = T::from_usize(n * spatial).expect("count");
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * spatial;
                    let scale = gm[ch] * invstd[ch];
                    for k in base..base + spatial {
                        dx[k] = if batch_stats {
                            // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                            let xhat = (xd[k] - mean[ch]) * invstd[ch];
                            scale / m * (m * g[k] - dbeta[ch] - xhat * dgamma[ch])
                        } else {
                            scale * g[k]
                        };
                    }
                }
            }
            res.push((x, dx));
        }
        if self.needs(gamma) {
            res.push((gamma, dgamma));
        }
        if self.needs(beta) {
            res.push((beta, dbeta));
        }
        res
    }
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn conv_out(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    (k >= 1 && span >= k).then(|| (span - k) / stride + 1)
}

pub(crate) fn deconv_out(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (input - 1) * stride + k;
    (k >= 1 && full > 2 * pad).then(|| full - 2 * pad)
}

fn transpose_buf<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn add_channel_bias<T: Element>(dst: &mut [T], bias: Option<&[T]>, plane: usize) {
    if let Some(bias) = bias {
        for (ch, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[ch]);
        }
    }
}

fn channel_sums<T: Element>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (i * c + ch) * plane;
            *o += g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    out
}

/// Per-channel mean and biased variance of `[N, C, spatial]` data.
fn channel_moments<T: Element>(x: &[T], n: usize, c: usize, spatial: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * spatial).expect("count");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            mean[ch] += x[base..base + spatial].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            let m = mean[ch];
            var[ch] += x[base..base + spatial]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{grad_check, grad_check_many};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 0.0, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn elementwise_add() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn multiply_by_zero_annihilates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let y = tape.mul(x, z).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_shape_and_gradients() {
        let a = rand_t(&[2, 1], 1);
        let b = rand_t(&[1, 3], 2);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.mul(va, vb).unwrap();
        assert_eq!(tape.shape(c), &[2, 3]);
        for op in 0..3 {
            let err = grad_check_many(
                |tape, v| {
                    let y = match op {
                        0 => tape.add(v[0], v[1])?,
                        1 => tape.sub(v[0], v[1])?,
                        _ => tape.mul(v[0], v[1])?,
                    };
                    let y2 = tape.mul(y, y)?;
                    Ok(tape.sum(y2))
                },
                &[a.clone(), b.clone()],
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-4, "op {op}: {err}");
        }
    }

    #[test]
    fn incompatible_shapes_name_both() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
        assert!(tape.matmul(r, r).is_err());
    }

    #[test]
    fn matmul_gradients() {
        let err = grad_check_many(
            |tape, v| {
                let p = tape.matmul(v[0], v[1])?;
                let s = tape.sigmoid(p);
                Ok(tape.sum(s))
            },
            &[rand_t(&[3, 4], 3), rand_t(&[4, 2], 4)],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn matmul_t_gradients() {
        let err = grad_check_many(
            |tape, v| {
                let p = tape.matmul_t(v[0], v[1])?;
                let s = tape.tanh(p);
                Ok(tape.sum(s))
            },
            &[rand_t(&[3, 4], 23), rand_t(&[5, 4], 24)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
        let th = tape.tanh(z);
        assert_eq!(tape.value(th).item(), 0.0);
        tape.backward(th).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[1.0]);

        let x = tape.leaf(t(&[3], &[-2.0, 0.0, 3.0]));
        let l = tape.leaf_relu_for_test(x);
        assert!((tape.value(l).data()[0] + 0.4).abs() < 1e-12);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        // subgradient at exactly zero is zero
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    impl Tape<f64> {
        fn leaf_relu_for_test(&mut self, x: Var) -> Var {
            self.leaky_relu(x, 0.2)
        }
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[4.0, 5.0, 6.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        // a second sweep accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn grad_check_reference_cases() {
        let x = rand_t(&[7], 11);
        assert!(grad_check(|tape, v| Ok(tape.sum(v)), &x, 1e-4).unwrap() < 1e-10);
        let e = grad_check(
            |tape, v| {
                let s = tape.sigmoid(v);
                Ok(tape.sum(s))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn grad_check_catches_wrong_backward() {
        // square with a backward rule missing the factor 2
        let x = rand_t(&[5], 12);
        let err = grad_check(
            |tape, v| {
                let xv = tape.value(v).clone();
                let out = Tensor::new(xv.shape(), xv.data().iter().map(|a| a * a).collect())?;
                let y = tape.custom(
                    &[v],
                    out,
                    Box::new(|ins, _, g| vec![ins[0].data().iter().zip(g).map(|(a, g)| a * g).collect()]),
                );
                Ok(tape.sum(y))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn param_binding_is_shared() {
        let w = t(&[2], &[1.0, 3.0]);
        let mut tape = Tape::new();
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.param_grad("w").unwrap(), &[2.0, 6.0]);
    }

    #[test]
    fn frozen_params_pass_gradient_without_storing_it() {
        let mut tape = Tape::new();
        tape.freeze("net.");
        let w = tape.param("net.w", &t(&[2], &[1.0, 3.0]));
        let x = tape.leaf(t(&[2], &[2.0, 5.0]));
        let p = tape.mul(w, x).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.param_grad("net.w").is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 3.0]);
    }

    #[test]
    fn concat_expand_reshape_gradients() {
        let a = rand_t(&[2, 3, 2, 2], 21);
        let b = rand_t(&[2, 1], 22);
        let err = grad_check_many(
            |tape, v| {
                let b4 = tape.reshape(v[1], &[2, 1, 1, 1])?;
                let e = tape.expand(b4, &[2, 2, 2, 2])?;
                let c = tape.concat(&[v[0], e], 1)?;
                let sq = tape.mul(c, c)?;
                let th = tape.tanh(sq);
                Ok(tape.mean(th))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv2d_hand_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let xv = rand_t(&[2, 3, 4, 4], 5);
        let mut eye = vec![0.0; 9];
        for c in 0..3 {
            eye[c * 3 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let w = tape.constant(t(&[3, 3, 1, 1], &eye));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), xv.data());
    }

    #[test]
    fn conv2d_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(tape.conv2d(x, w, None, 1, 0).is_err());
        let w = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(tape.conv2d(x, w, None, 1, 0).is_err());
    }

    #[test]
    fn conv2d_gradients() {
        let err = grad_check_many(
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                let y2 = tape.mul(y, y)?;
                Ok(tape.sum(y2))
            },
            &[rand_t(&[1, 2, 8, 8], 6), rand_t(&[3, 2, 3, 3], 7), rand_t(&[3], 8)],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn deconv_upsamples_by_two() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[1, 2, 4, 4], 9));
        let w = tape.constant(rand_t(&[2, 3, 4, 4], 10));
        let y = tape.conv_transpose2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 8, 8]);
    }

    #[test]
    fn deconv_unit_kernel_scales() {
        let xv = rand_t(&[1, 1, 3, 3], 13);
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.5]));
        let y = tape.conv_transpose2d(x, w, None, 1, 0).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(xv.data()) {
            assert_eq!(*a, 2.5 * b);
        }
    }

    #[test]
    fn deconv_gradients() {
        let err = grad_check_many(
            |tape, v| {
                let y = tape.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
                let y2 = tape.mul(y, y)?;
                Ok(tape.sum(y2))
            },
            &[rand_t(&[2, 2, 3, 3], 14), rand_t(&[2, 3, 4, 4], 15), rand_t(&[3], 16)],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn inner(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        let (n, c, o, k, s, p) = (2, 3, 2, 3, 2, 1);
        let h = 5; // (5 + 2 - 3) divisible by 2
        let x = rand_t(&[n, c, h, h], 17);
        let w = rand_t(&[o, c, k, k], 18);
        let ho = conv_out(h, k, s, p).unwrap();
        let y = rand_t(&[n, o, ho, ho], 19);
        let mut tape = Tape::new();
        let (vx, vw, vy) = (tape.constant(x.clone()), tape.constant(w), tape.constant(y.clone()));
        let cx = tape.conv2d(vx, vw, None, s, p).unwrap();
        let dy = tape.conv_transpose2d(vy, vw, None, s, p).unwrap();
        assert_eq!(tape.shape(dy), x.shape());
        let lhs = inner(tape.value(cx).data(), y.data());
        let rhs = inner(x.data(), tape.value(dy).data());
        assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn output_size_formulas_sweep() {
        let mut tape = Tape::<f32>::new();
        for k in 1..=5 {
            for s in 1..=3 {
                for p in 0..=2 {
                    for input in 1..=16 {
                        let x = tape.constant(Tensor::zeros(&[1, 1, input, input]));
                        let w = tape.constant(Tensor::zeros(&[1, 1, k, k]));
                        let conv = tape.conv2d(x, w, None, s, p);
                        match (input + 2 * p).checked_sub(k) {
                            Some(span) => {
                                let y = conv.unwrap();
                                assert_eq!(tape.shape(y)[2], span / s + 1);
                            }
                            None => assert!(conv.is_err()),
                        }
                        let deconv = tape.conv_transpose2d(x, w, None, s, p);
                        let full = (input - 1) * s + k;
                        if full > 2 * p {
                            assert_eq!(tape.shape(deconv.unwrap())[2], full - 2 * p);
                        } else {
                            assert!(deconv.is_err());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn batch_norm_gradients_train_and_eval() {
        for eval in [false, true] {
            let err = grad_check_many(
                |tape, v| {
                    let rm = [0.1, -0.2, 0.3];
                    let rv = [0.5, 1.5, 2.0];
                    let running = eval.then_some((&rm[..], &rv[..]));
                    let (y, _) = tape.batch_norm(v[0], v[1], v[2], running, 1e-5)?;
                    let w = tape.constant(rand_t(&[4, 3, 2, 2], 33));
                    let yw = tape.mul(y, w)?;
                    Ok(tape.sum(yw))
                },
                &[rand_t(&[4, 3, 2, 2], 30), rand_t(&[3], 31), rand_t(&[3], 32)],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "eval={eval}: {err}");
        }
    }

    #[test]
    fn ln_and_clamp() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, 0.5, 1.0]));
        let c = tape.clamp(x, 1e-7, 1.0 - 1e-7);
        assert_eq!(tape.value(c).data()[0], 1e-7);
        let l = tape.ln(c).unwrap();
        let s = tape.sum(l);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 2.0).abs() < 1e-12);
        assert!(tape.ln(x).is_err());
    }
}
