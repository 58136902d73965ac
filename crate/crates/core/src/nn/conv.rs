//! 3D cross-correlation kernels (im2col + gemm).
//!
//! Layouts: input `[N, Ci, D, H, W]`, weight `[Co, Ci, k, k, k]`, output
//! `[N, Co, Do, Ho, Wo]`. A transposed convolution with weight
//! `[Ci', Co', k, k, k]` is the input-gradient of the conv whose weight has the
//! same memory layout read as `[Co = Ci', Ci = Co', ...]`.

use crate::par;
use crate::{Error, Result};

/// Upper bound on im2col buffer size, in `f64`s.
const COL_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

fn out_len(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p >= k).then(|| (n + 2 * p - k) / s + 1)
}

impl ConvGeom {
    /// Geometry of a forward convolution.
    pub fn conv(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(Error::Shape(format!("conv3d expects 5-D input and weight, got {x_shape:?} and {w_shape:?}")));
        }
        let k = w_shape[2];
        if w_shape[3] != k || w_shape[4] != k {
            return Err(Error::Shape(format!("conv3d kernel must be cubic, got {w_shape:?}")));
        }
        if w_shape[1] != x_shape[1] {
            return Err(Error::Shape(format!(
                "conv3d weight expects {} input channels, input has {}",
                w_shape[1], x_shape[1]
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let input = [x_shape[2], x_shape[3], x_shape[4]];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = out_len(input[a], k, stride, pad)
                .ok_or_else(|| Error::Shape(format!("kernel {k} larger than padded input {input:?}")))?;
        }
        Ok(ConvGeom { n: x_shape[0], ci: x_shape[1], co: w_shape[0], k, stride, pad, input, output })
    }

    /// Equivalent forward-conv geometry of a transposed convolution.
    pub fn deconv(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(Error::Shape(format!("deconv3d expects 5-D input and weight, got {x_shape:?} and {w_shape:?}")));
        }
        let k = w_shape[2];
        if w_shape[3] != k || w_shape[4] != k {
            return Err(Error::Shape(format!("deconv3d kernel must be cubic, got {w_shape:?}")));
        }
        if w_shape[0] != x_shape[1] {
            return Err(Error::Shape(format!(
                "deconv3d weight expects {} input channels, input has {}",
                w_shape[0], x_shape[1]
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let small = [x_shape[2], x_shape[3], x_shape[4]];
        let mut big = [0; 3];
        for a in 0..3 {
            let full = (small[a] - 1) * stride + k;
            if full < 2 * pad + 1 {
                return Err(Error::Shape("deconv3d padding exceeds output".into()));
            }
            big[a] = full - 2 * pad;
        }
        Ok(ConvGeom { n: x_shape[0], ci: w_shape[1], co: w_shape[0], k, stride, pad, input: big, output: small })
    }

    pub fn k3(&self) -> usize {
        self.k * self.k * self.k
    }

    pub fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn rows(&self) -> usize {
        self.ci * self.k3()
    }

    fn slab_planes(&self) -> usize {
        let plane = self.output[1] * self.output[2];
        (COL_BUDGET / (self.rows() * plane).max(1)).clamp(1, self.output[0])
    }
}

/// `c = a · b (+ beta·c)`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len());
    assert!(k == 0 || last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above bound every index reachable through the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Visit every output row of the im2col matrix for output planes `z0..z1` of
/// one sample, as `f(col_offset, src_row_offset, lo, hi, kw)`. Columns
/// `lo..hi` of the row read input; the rest are padding. A source offset of
/// `usize::MAX` marks a row lying entirely in the padding.
#[inline]
fn for_each_patch_row<F>(g: &ConvGeom, z0: usize, z1: usize, mut f: F)
where
    F: FnMut(usize, usize, usize, usize, usize),
{
    let [d, h, w] = g.input;
    let [_, ho, wo] = g.output;
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let cols = (z1 - z0) * ho * wo;
    for c in 0..g.ci {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let mut t = row * cols;
                    for oz in z0..z1 {
                        let iz = (oz * s + kd) as isize - p;
                        for oy in 0..ho {
                            let iy = (oy * s + kh) as isize - p;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                f(t, usize::MAX, 0, 0, 0);
                            } else {
                                let base = ((c * d + iz as usize) * h + iy as usize) * w;
                                // Valid ox satisfy 0 <= ox*s + kw - p < w.
                                let lo = ((p - kw as isize).max(0) as usize).div_ceil(s).min(wo);
                                let hi_excl = {
                                    let lim = w as isize + p - kw as isize; // ox*s < lim
                                    if lim <= 0 {
                                        0
                                    } else {
                                        ((lim as usize - 1) / s + 1).min(wo)
                                    }
                                };
                                f(t, base, lo, hi_excl.max(lo), kw);
                            }
                            t += wo;
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom, z0: usize, z1: usize, cols: &mut [f64]) {
    let wo = g.output[2];
    let (s, p) = (g.stride, g.pad);
    for_each_patch_row(g, z0, z1, |t, base, lo, hi, kw| {
        let dst = &mut cols[t..t + wo];
        if base == usize::MAX {
            dst.fill(0.0);
            return;
        }
        dst[..lo].fill(0.0);
        dst[hi..].fill(0.0);
        if s == 1 {
            let ix0 = lo + kw - p;
            dst[lo..hi].copy_from_slice(&x[base + ix0..base + ix0 + (hi - lo)]);
        } else {
            for ox in lo..hi {
                dst[ox] = x[base + ox * s + kw - p];
            }
        }
    });
}

fn col2im(cols: &[f64], g: &ConvGeom, z0: usize, z1: usize, gx: &mut [f64]) {
    let wo = g.output[2];
    let (s, p) = (g.stride, g.pad);
    for_each_patch_row(g, z0, z1, |t, base, lo, hi, kw| {
        if base == usize::MAX {
            return;
        }
        let src = &cols[t..t + wo];
        if s == 1 {
            let ix0 = lo + kw - p;
            let dst = &mut gx[base + ix0..base + ix0 + (hi - lo)];
            for (d, v) in dst.iter_mut().zip(&src[lo..hi]) {
                *d += v;
            }
        } else {
            for ox in lo..hi {
                gx[base + ox * s + kw - p] += src[ox];
            }
        }
    });
}

/// Forward convolution; `bias` has `co` entries.
pub fn conv3d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (in_n, out_n) = (g.ci * g.in_spatial(), g.co * g.out_spatial());
    let mut y = vec![0.0; g.n * out_n];
    let planes = g.slab_planes();
    let plane = g.output[1] * g.output[2];
    let rows = g.rows();
    par::for_each_chunk_mut(&mut y, out_n, |n, y_n| {
        let x_n = &x[n * in_n..(n + 1) * in_n];
        let mut cols = vec![0.0; rows * planes * plane];
        let mut z0 = 0;
        while z0 < g.output[0] {
            let z1 = (z0 + planes).min(g.output[0]);
            let ncols = (z1 - z0) * plane;
            im2col(x_n, g, z0, z1, &mut cols[..rows * ncols]);
            gemm(
                g.co,
                rows,
                ncols,
                w,
                (rows, 1),
                &cols[..rows * ncols],
                (ncols, 1),
                0.0,
                &mut y_n[z0 * plane..],
                (g.out_spatial(), 1),
            );
            z0 = z1;
        }
        if let Some(b) = bias {
            for (c, chan) in y_n.chunks_mut(g.out_spatial()).enumerate() {
                chan.iter_mut().for_each(|v| *v += b[c]);
            }
        }
    });
    y
}

/// Gradient of the convolution with respect to its input.
pub fn conv3d_backward_input(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_n, out_n) = (g.ci * g.in_spatial(), g.co * g.out_spatial());
    let mut gx = vec![0.0; g.n * in_n];
    let planes = g.slab_planes();
    let plane = g.output[1] * g.output[2];
    let rows = g.rows();
    par::for_each_chunk_mut(&mut gx, in_n, |n, gx_n| {
        let gy_n = &gy[n * out_n..(n + 1) * out_n];
        let mut cols = vec![0.0; rows * planes * plane];
        let mut z0 = 0;
        while z0 < g.output[0] {
            let z1 = (z0 + planes).min(g.output[0]);
            let ncols = (z1 - z0) * plane;
            gemm(
                rows,
                g.co,
                ncols,
                w,
                (1, rows),
                &gy_n[z0 * plane..],
                (g.out_spatial(), 1),
                0.0,
                &mut cols[..rows * ncols],
                (ncols, 1),
            );
            col2im(&cols[..rows * ncols], g, z0, z1, gx_n);
            z0 = z1;
        }
    });
    gx
}

/// Gradient of the convolution with respect to its weight.
pub fn conv3d_backward_weight(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_n, out_n) = (g.ci * g.in_spatial(), g.co * g.out_spatial());
    let planes = g.slab_planes();
    let plane = g.output[1] * g.output[2];
    let rows = g.rows();
    let per_sample = par::map_range(g.n, |n| {
        let x_n = &x[n * in_n..(n + 1) * in_n];
        let gy_n = &gy[n * out_n..(n + 1) * out_n];
        let mut gw = vec![0.0; g.co * rows];
        let mut cols = vec![0.0; rows * planes * plane];
        let mut z0 = 0;
        while z0 < g.output[0] {
            let z1 = (z0 + planes).min(g.output[0]);
            let ncols = (z1 - z0) * plane;
            im2col(x_n, g, z0, z1, &mut cols[..rows * ncols]);
            gemm(
                g.co,
                ncols,
                rows,
                &gy_n[z0 * plane..],
                (g.out_spatial(), 1),
                &cols[..rows * ncols],
                (1, ncols),
                1.0,
                &mut gw,
                (rows, 1),
            );
            z0 = z1;
        }
        gw
    });
    let mut total = vec![0.0; g.co * rows];
    for gw in per_sample {
        total.iter_mut().zip(gw).for_each(|(t, v)| *t += v);
    }
    total
}

/// Per-channel sum over batch and space of a `[N, C, ...]` array.
pub fn channel_sums(y: &[f64], n: usize, c: usize, spatial: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let off = (s * c + ch) * spatial;
            *o += y[off..off + spatial].iter().sum::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop reference.
    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let [d, h, wd] = g.input;
        let [od, oh, ow] = g.output;
        let k = g.k;
        let mut y = vec![0.0; g.n * g.co * od * oh * ow];
        for n in 0..g.n {
            for co in 0..g.co {
                for z in 0..od {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b[co];
                            for ci in 0..g.ci {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let iz = (z * g.stride + kd) as isize - g.pad as isize;
                                            let iy = (yy * g.stride + kh) as isize - g.pad as isize;
                                            let ix = (xx * g.stride + kw) as isize - g.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((n * g.ci + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                            let wi = (((co * g.ci + ci) * k + kd) * k + kh) * k + kw;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            y[(((n * g.co + co) * od + z) * oh + yy) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (ci, co, dims, k, s, p) in [
            (1, 1, [3, 3, 3], 3, 1, 0),
            (1, 1, [3, 3, 3], 3, 1, 1),
            (2, 3, [4, 5, 6], 3, 2, 1),
            (3, 2, [4, 4, 4], 2, 2, 0),
            (2, 2, [5, 5, 5], 5, 1, 2),
            (1, 2, [6, 3, 4], 1, 1, 0),
        ] {
            let xs = [2, ci, dims[0], dims[1], dims[2]];
            let ws = [co, ci, k, k, k];
            let g = ConvGeom::conv(&xs, &ws, s, p).unwrap();
            let x = rand_vec(&mut rng, xs.iter().product());
            let w = rand_vec(&mut rng, ws.iter().product());
            let b = rand_vec(&mut rng, co);
            let fast = conv3d_forward(&x, &w, Some(&b), &g);
            let slow = naive_conv(&x, &w, &b, &g);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn identity_kernel() {
        let xs = [1, 2, 3, 3, 3];
        let g = ConvGeom::conv(&xs, &[2, 2, 1, 1, 1], 1, 0).unwrap();
        let x: Vec<f64> = (0..54).map(|i| i as f64).collect();
        let w = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(conv3d_forward(&x, &w, Some(&[0.0, 0.0]), &g), x);
    }

    #[test]
    fn stride_two_halves() {
        let g = ConvGeom::conv(&[1, 1, 4, 4, 4], &[1, 1, 2, 2, 2], 2, 0).unwrap();
        assert_eq!(g.output, [2, 2, 2]);
        let g = ConvGeom::conv(&[1, 1, 32, 32, 32], &[1, 1, 5, 5, 5], 1, 2).unwrap();
        assert_eq!(g.output, [32, 32, 32]);
        let g = ConvGeom::deconv(&[1, 1, 2, 2, 2], &[1, 1, 2, 2, 2], 2, 0).unwrap();
        assert_eq!(g.input, [4, 4, 4]);
    }

    #[test]
    fn slabbed_equals_unslabbed() {
        // Large enough to force several slabs.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = [1, 40, 16, 16, 16];
        let ws = [2, 40, 3, 3, 3];
        let g = ConvGeom::conv(&xs, &ws, 1, 1).unwrap();
        assert!(g.slab_planes() < g.output[0]);
        let x = rand_vec(&mut rng, xs.iter().product());
        let w = rand_vec(&mut rng, ws.iter().product());
        let b = vec![0.0; 2];
        let fast = conv3d_forward(&x, &w, Some(&b), &g);
        let slow = naive_conv(&x, &w, &b, &g);
        let err = fast.iter().zip(&slow).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn shape_errors() {
        assert!(ConvGeom::conv(&[1, 2, 4, 4, 4], &[1, 3, 3, 3, 3], 1, 1).is_err());
        assert!(ConvGeom::conv(&[1, 2, 2, 2, 2], &[1, 2, 5, 5, 5], 1, 0).is_err());
        assert!(ConvGeom::deconv(&[1, 2, 2, 2, 2], &[3, 1, 2, 2, 2], 2, 0).is_err());
    }
}
