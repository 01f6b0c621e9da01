//! Dense serial kernels. Every loop runs in a fixed order so results are
//! bit-reproducible.

use serde::{Deserialize, Serialize};

/// `c = op(a) · op(b)` for row-major `a` and `b`, where `op` transposes
/// when the matching flag is set. `m×k` and `k×n` are the shapes after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the
    // strides describe their row-major layout (read transposed if flagged).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` reads input axis `perm[i]`.
pub(crate) fn permute(a: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(a.len());
    if a.is_empty() {
        return out;
    }
    let rank = out_shape.len();
    if rank == 0 {
        return a.to_vec();
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = (0..last).map(|d| idx[d] * src_strides[d]).sum();
        let st = src_strides[last];
        for j in 0..out_shape[last] {
            out.push(a[base + j * st]);
        }
        // odometer over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Left-pads `small` with ones to the rank of `big`; returns per-axis strides
/// into `small` with 0 on broadcast axes.
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let pad = big.len() - small.len();
    let s = strides(small);
    (0..big.len())
        .map(|d| {
            if d < pad || small[d - pad] == 1 {
                0
            } else {
                s[d - pad]
            }
        })
        .collect()
}

pub(crate) fn can_broadcast(small: &[usize], big: &[usize]) -> bool {
    if small.len() > big.len() {
        return false;
    }
    let pad = big.len() - small.len();
    small
        .iter()
        .enumerate()
        .all(|(i, &e)| e == 1 || e == big[i + pad])
}

pub(crate) fn broadcast_to(a: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    fn rec(a: &[f64], to: &[usize], st: &[usize], d: usize, off: usize, out: &mut Vec<f64>) {
        if d + 1 == to.len() {
            if st[d] == 0 {
                out.extend(std::iter::repeat_n(a[off], to[d]));
            } else {
                out.extend_from_slice(&a[off..off + to[d]]);
            }
            return;
        }
        for i in 0..to[d] {
            rec(a, to, st, d + 1, off + i * st[d], out);
        }
    }
    let total: usize = to.iter().product();
    let mut out = Vec::with_capacity(total);
    if to.is_empty() {
        out.push(a[0]);
    } else if total > 0 {
        rec(a, to, &broadcast_strides(from, to), 0, 0, &mut out);
    }
    out
}

/// Adjoint of [`broadcast_to`]: sums `a` (shape `from`) down to `to`.
pub(crate) fn sum_to(a: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    fn rec(a: &[f64], from: &[usize], st: &[usize], d: usize, src: &mut usize, off: usize, out: &mut [f64]) {
        if d + 1 == from.len() {
            let row = &a[*src..*src + from[d]];
            *src += from[d];
            if st[d] == 0 {
                out[off] += row.iter().sum::<f64>();
            } else {
                for (o, v) in out[off..off + from[d]].iter_mut().zip(row) {
                    *o += v;
                }
            }
            return;
        }
        for i in 0..from[d] {
            rec(a, from, st, d + 1, src, off + i * st[d], out);
        }
    }
    let mut out = vec![0.0; to.iter().product()];
    if from.is_empty() {
        out[0] = a[0];
    } else if !a.is_empty() {
        let mut src = 0;
        rec(a, from, &broadcast_strides(to, from), 0, &mut src, 0, &mut out);
    }
    out
}

/// Geometry of a 2-D convolution over an NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.dilation * (self.kernel_h - 1) - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.dilation * (self.kernel_w - 1) - 1) / self.stride + 1
    }

    /// Rows of the column matrix: `channels · kernel_h · kernel_w`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the column matrix: `batch · out_h · out_w`.
    pub fn positions(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.height, self.width]
    }

    pub fn cols_shape(&self) -> Vec<usize> {
        vec![self.patch_len(), self.positions()]
    }

    fn fits(&self) -> bool {
        self.kernel_h > 0
            && self.kernel_w > 0
            && self.stride > 0
            && self.dilation > 0
            && self.height + 2 * self.padding > self.dilation * (self.kernel_h - 1)
            && self.width + 2 * self.padding > self.dilation * (self.kernel_w - 1)
    }

    pub(crate) fn validate(&self) -> bool {
        self.fits()
    }
}

/// Visits `(row, col, src)` where `src` is the flat input offset or `None`
/// for a padded tap.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, Option<usize>)) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                for n in 0..g.batch {
                    let plane = (n * g.channels + c) * g.height * g.width;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        let col0 = (n * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix =
                                (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            let src = if iy >= 0
                                && (iy as usize) < g.height
                                && ix >= 0
                                && (ix as usize) < g.width
                            {
                                Some(plane + iy as usize * g.width + ix as usize)
                            } else {
                                None
                            };
                            f(row, col0 + ox, src);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let positions = g.positions();
    let mut out = vec![0.0; g.patch_len() * positions];
    for_each_tap(g, |row, col, src| {
        if let Some(s) = src {
            out[row * positions + col] = x[s];
        }
    });
    out
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let positions = g.positions();
    let mut out = vec![0.0; g.batch * g.channels * g.height * g.width];
    for_each_tap(g, |row, col, src| {
        if let Some(s) = src {
            out[s] += cols[row * positions + col];
        }
    });
    out
}
