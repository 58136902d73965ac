//! Affine grid generation and trilinear sampling on a `[-1, 1]³` frame.
//!
//! Target voxel `i` along an axis of length `n` sits at
//! `t = (i - c) / r` with `c = r = (n - 1) / 2`. A 3×4 matrix maps the target
//! homogeneous coordinate to a normalized source coordinate `s`, read back at
//! voxel position `u = c + r·s` with the kernel `max(0, 1 - |u - l|)` per axis
//! and zero outside the grid.

use crate::volume::snap;

#[inline]
fn frame(n: usize) -> (f64, f64) {
    let c = (n as f64 - 1.0) / 2.0;
    (c, if n > 1 { c } else { 1.0 })
}

#[inline]
fn unravel(dims: [usize; 3], i: usize) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

/// Normalized target coordinate of every voxel, `h` fastest.
pub(crate) fn target_coords(dims: [usize; 3]) -> Vec<[f64; 3]> {
    let f = dims.map(frame);
    (0..dims.iter().product())
        .map(|i| {
            let p = unravel(dims, i);
            [0, 1, 2].map(|a| (p[a] as f64 - f[a].0) / f[a].1)
        })
        .collect()
}

/// Normalized source coordinates `A · (t, 1)` for every target voxel.
pub(crate) fn affine_source(theta: &[f64], targets: &[[f64; 3]]) -> Vec<[f64; 3]> {
    targets
        .iter()
        .map(|t| {
            [0, 1, 2].map(|r| {
                let row = &theta[r * 4..r * 4 + 4];
                row[0] * t[0] + row[1] * t[1] + row[2] * t[2] + row[3]
            })
        })
        .collect()
}

/// Normalized to voxel units.
pub(crate) fn to_voxel(dims: [usize; 3], s: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let f = dims.map(frame);
    s.iter().map(|s| [0, 1, 2].map(|a| snap(f[a].0 + f[a].1 * s[a]))).collect()
}

/// `du/ds` per axis.
pub(crate) fn voxel_scale(dims: [usize; 3]) -> [f64; 3] {
    dims.map(|n| frame(n).1)
}

struct Corners {
    idx: [Option<usize>; 8],
    weight: [f64; 8],
    /// d weight / d u_a for each corner.
    dweight: [[f64; 3]; 8],
}

#[inline]
fn corners(dims: [usize; 3], u: [f64; 3]) -> Corners {
    let base = u.map(f64::floor);
    let frac = [u[0] - base[0], u[1] - base[1], u[2] - base[2]];
    let mut out = Corners { idx: [None; 8], weight: [0.0; 8], dweight: [[0.0; 3]; 8] };
    for c in 0..8 {
        let off = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
        let f = [0, 1, 2].map(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] });
        let df = [0, 1, 2].map(|a| if off[a] == 1 { 1.0 } else { -1.0 });
        out.weight[c] = f[0] * f[1] * f[2];
        out.dweight[c] = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
        let mut inside = true;
        let mut p = [0usize; 3];
        for a in 0..3 {
            let i = base[a] as i64 + off[a] as i64;
            if i < 0 || i >= dims[a] as i64 {
                inside = false;
            } else {
                p[a] = i as usize;
            }
        }
        if inside {
            out.idx[c] = Some((p[0] * dims[1] + p[1]) * dims[2] + p[2]);
        }
    }
    out
}

/// Sample every channel of `x` (`channels × spatial`) at voxel coordinates `u`.
pub(crate) fn sample(x: &[f64], channels: usize, dims: [usize; 3], u: &[[f64; 3]], out: &mut [f64]) {
    let spatial: usize = dims.iter().product();
    let n_out = u.len();
    for (i, &pos) in u.iter().enumerate() {
        let cs = corners(dims, pos);
        for ch in 0..channels {
            let src = &x[ch * spatial..(ch + 1) * spatial];
            let mut acc = 0.0;
            for c in 0..8 {
                if let Some(j) = cs.idx[c] {
                    acc += cs.weight[c] * src[j];
                }
            }
            out[ch * n_out + i] = acc;
        }
    }
}

/// Backward of [`sample`]: accumulates into `gx` and returns `d loss / d u`.
pub(crate) fn sample_backward(
    x: &[f64],
    channels: usize,
    dims: [usize; 3],
    u: &[[f64; 3]],
    gy: &[f64],
    mut gx: Option<&mut [f64]>,
) -> Vec<[f64; 3]> {
    let spatial: usize = dims.iter().product();
    let n_out = u.len();
    let mut gu = vec![[0.0; 3]; n_out];
    for (i, &pos) in u.iter().enumerate() {
        let cs = corners(dims, pos);
        for ch in 0..channels {
            let g = gy[ch * n_out + i];
            if g == 0.0 {
                continue;
            }
            let src = &x[ch * spatial..(ch + 1) * spatial];
            for c in 0..8 {
                if let Some(j) = cs.idx[c] {
                    if let Some(gx) = gx.as_deref_mut() {
                        gx[ch * spatial + j] += g * cs.weight[c];
                    }
                    for a in 0..3 {
                        gu[i][a] += g * src[j] * cs.dweight[c][a];
                    }
                }
            }
        }
    }
    gu
}

/// Chain `d loss / d u` back to the 12 affine parameters.
pub(crate) fn theta_grad(dims: [usize; 3], targets: &[[f64; 3]], gu: &[[f64; 3]]) -> [f64; 12] {
    let scale = voxel_scale(dims);
    let mut g = [0.0; 12];
    for (t, gu) in targets.iter().zip(gu) {
        for r in 0..3 {
            let gs = gu[r] * scale[r];
            g[r * 4] += gs * t[0];
            g[r * 4 + 1] += gs * t[1];
            g[r * 4 + 2] += gs * t[2];
            g[r * 4 + 3] += gs;
        }
    }
    g
}

pub(crate) const IDENTITY_THETA: [f64; 12] = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
