//! Buffer-level kernels shared by the tape ops.

use super::Element;

/// `c (+)= op(a)·op(b)` where `op(a)` is m×k and `op(b)` is k×n.
///
/// A transposed operand is stored row-major in its transposed shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index reachable through these
    // dimensions and strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape produced by broadcasting `a` against `b`, aligning trailing axes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank, i);
        let db = dim_from_right(b, rank, i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], rank: usize, i: usize) -> usize {
    let pad = rank - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Strides for reading `input` as if it had `out_shape`; broadcast axes get 0.
fn broadcast_strides(input: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - input.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + pad] = acc;
        }
        acc *= input[i];
    }
    strides
}

/// Visit every output position with the matching flat index in each input.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    inputs: &[&[usize]],
    mut f: impl FnMut(usize, &[usize]),
) {
    let strides: Vec<Vec<usize>> = inputs
        .iter()
        .map(|s| broadcast_strides(s, out_shape))
        .collect();
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut offsets = vec![0usize; inputs.len()];
    for flat in 0..total {
        f(flat, &offsets);
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            for (off, st) in offsets.iter_mut().zip(&strides) {
                *off += st[axis];
            }
            if counter[axis] < out_shape[axis] {
                break;
            }
            for (off, st) in offsets.iter_mut().zip(&strides) {
                *off -= st[axis] * out_shape[axis];
            }
            counter[axis] = 0;
        }
    }
}

/// Sum `grad` (shaped like the broadcast output) down to `input` shape.
pub(crate) fn reduce_to<T: Element>(grad: &[T], out_shape: &[usize], input: &[usize]) -> Vec<T> {
    if out_shape == input {
        return grad.to_vec();
    }
    let n: usize = input.iter().product();
    let mut acc = vec![T::zero(); n];
    for_each_broadcast(out_shape, &[input], |flat, idx| acc[idx[0]] += grad[flat]);
    acc
}

/// Spatial geometry of one 2-D correlation window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

impl Window {
    /// Output columns `ox` whose input column `ox·stride + kj − pad` lies
    /// inside the image, as a half-open range.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        // largest ox with ox·s + kj − p ≤ in_w − 1
        let hi = if self.in_w + p > kj {
            ((self.in_w + p - kj - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfold an image `[C, H, W]` into `[C·kh·kw, out_h·out_w]` patch columns.
pub(crate) fn im2col<T: Element>(img: &[T], w: &Window, cols: &mut [T]) {
    let ncols = w.cols();
    debug_assert_eq!(cols.len(), w.rows() * ncols);
    for c in 0..w.channels {
        let plane = &img[c * w.in_h * w.in_w..(c + 1) * w.in_h * w.in_w];
        for ki in 0..w.kh {
            for kj in 0..w.kw {
                let row = (c * w.kh + ki) * w.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = w.valid_cols(kj);
                for oy in 0..w.out_h {
                    let iy = (oy * w.stride + ki) as isize - w.pad as isize;
                    let line = &mut dst[oy * w.out_w..(oy + 1) * w.out_w];
                    if iy < 0 || iy >= w.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w.in_w..(iy as usize + 1) * w.in_w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * w.stride + kj - w.pad;
                    if w.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, &v) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(w.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into `[C, H, W]`.
pub(crate) fn col2im<T: Element>(cols: &[T], w: &Window, img: &mut [T]) {
    let ncols = w.cols();
    for c in 0..w.channels {
        let plane = &mut img[c * w.in_h * w.in_w..(c + 1) * w.in_h * w.in_w];
        for ki in 0..w.kh {
            for kj in 0..w.kw {
                let row = (c * w.kh + ki) * w.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = w.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * w.stride + kj - w.pad;
                for oy in 0..w.out_h {
                    let iy = (oy * w.stride + ki) as isize - w.pad as isize;
                    if iy < 0 || iy >= w.in_h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w.in_w..(iy as usize + 1) * w.in_w];
                    let part = &src[oy * w.out_w + lo..oy * w.out_w + hi];
                    for (d, &v) in line[first..].iter_mut().step_by(w.stride).zip(part) {
                        *d += v;
                    }
                }
            }
        }
    }
}
