use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{index, Mask3D, Volume3D};
use crate::{Error, Result};

/// One random spatial transform, applied about the volume centre.
///
/// Forward map: `x_out = c + F · R(θ) · s · (x_in - c)` with `F` the axis
/// flips and `R` a rotation about the long (`h`) axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: [bool; 3],
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
    pub const MAX_ROTATION_DEG: f64 = 15.0;

    pub fn identity() -> Self {
        AugmentParams { scale: 1.0, flip: [false; 3], rotation_deg: 0.0 }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let scale = rng.gen_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1);
        let flip = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
        let rotation_deg = rng.gen_range(-Self::MAX_ROTATION_DEG..=Self::MAX_ROTATION_DEG);
        AugmentParams { scale, flip, rotation_deg }
    }

    /// Source position (continuous voxel coordinates) of output voxel `p`.
    fn source(&self, dims: [usize; 3], p: [usize; 3]) -> [f64; 3] {
        let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let mut q = [0.0; 3];
        for a in 0..3 {
            q[a] = p[a] as f64 - c[a];
            if self.flip[a] {
                q[a] = -q[a];
            }
        }
        let (sin, cos) = (-self.rotation_deg.to_radians()).sin_cos();
        let r = [cos * q[0] - sin * q[1], sin * q[0] + cos * q[1], q[2]];
        [c[0] + r[0] / self.scale, c[1] + r[1] / self.scale, c[2] + r[2] / self.scale]
    }
}

/// Snap coordinates within rounding noise of a grid node onto it.
#[inline]
pub(crate) fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Trilinear read with zero padding outside the grid.
pub(crate) fn trilinear(data: &[f32], dims: [usize; 3], pos: [f64; 3]) -> f64 {
    let pos = pos.map(snap);
    let base = pos.map(|x| x.floor());
    let frac = [pos[0] - base[0], pos[1] - base[1], pos[2] - base[2]];
    let mut acc = 0.0;
    for corner in 0..8 {
        let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut weight = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let i = base[a] as i64 + off[a] as i64;
            weight *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            if i < 0 || i >= dims[a] as i64 {
                inside = false;
            } else {
                idx[a] = i as usize;
            }
        }
        if inside && weight != 0.0 {
            acc += weight * f64::from(data[index(dims, idx[0], idx[1], idx[2])]);
        }
    }
    acc
}

fn nearest(data: &[u8], dims: [usize; 3], pos: [f64; 3]) -> u8 {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let i = snap(pos[a]).round();
        if i < 0.0 || i >= dims[a] as f64 {
            return 0;
        }
        idx[a] = i as usize;
    }
    data[index(dims, idx[0], idx[1], idx[2])]
}

/// Draw an [`AugmentParams`] from `seed` and apply it.
pub fn augment(vol: &Volume3D, masks: &[Mask3D], seed: u64) -> Result<(Volume3D, Vec<Mask3D>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_augment(vol, masks, &AugmentParams::sample(&mut rng))
}

/// Resample the volume trilinearly and the masks by nearest neighbour under
/// one shared transform; the grid is unchanged and exterior reads are zero.
pub fn apply_augment(vol: &Volume3D, masks: &[Mask3D], params: &AugmentParams) -> Result<(Volume3D, Vec<Mask3D>)> {
    let dims = vol.dims();
    if let Some(m) = masks.iter().find(|m| m.dims() != dims) {
        return Err(Error::Shape(format!("mask dims {:?} differ from volume dims {dims:?}", m.dims())));
    }
    let mut out = vec![0.0f32; vol.len()];
    let mut out_masks: Vec<Vec<u8>> = vec![vec![0u8; vol.len()]; masks.len()];
    for l in 0..dims[0] {
        for w in 0..dims[1] {
            for h in 0..dims[2] {
                let src = params.source(dims, [l, w, h]);
                let i = index(dims, l, w, h);
                out[i] = trilinear(vol.data(), dims, src) as f32;
                for (m, o) in masks.iter().zip(out_masks.iter_mut()) {
                    o[i] = nearest(m.data(), dims, src);
                }
            }
        }
    }
    let vol = Volume3D::new(dims, vol.voxel_mm(), out)?;
    let masks = masks
        .iter()
        .zip(out_masks)
        .map(|(m, data)| Mask3D::new(dims, m.voxel_mm(), m.structure(), data))
        .collect::<Result<Vec<_>>>()?;
    Ok((vol, masks))
}
