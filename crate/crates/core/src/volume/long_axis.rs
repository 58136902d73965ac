use super::{index, Mask3D, Volume3D};
use crate::{Error, Result};

/// Edge length of the network input cube.
pub const CROP: usize = 32;

/// Array axis carrying the LV long axis in a source volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    L,
    W,
    H,
}

/// Reorder a reconstructed volume so the long axis runs along `h`, then crop a
/// `32³` window around the LV.
///
/// The LV centre is the intensity centroid of voxels at or above half the
/// volume maximum. The window starts at `round(centre) - 16` on every axis,
/// clamped into the volume.
pub fn to_long_axis(vol: &Volume3D, long_axis: Axis) -> Result<Volume3D> {
    CropWindow::locate(vol, long_axis)?.crop(vol)
}

/// Axis permutation plus `32³` crop origin, reusable for a study's masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub long_axis: Axis,
    /// Origin in the permuted volume.
    pub start: [usize; 3],
}

impl CropWindow {
    pub fn locate(vol: &Volume3D, long_axis: Axis) -> Result<Self> {
        let (data, dims) = permute_long_axis_last(vol.data(), vol.dims(), long_axis);
        if dims.iter().any(|&d| d < CROP) {
            return Err(Error::InvalidArgument(format!("volume {dims:?} is too small to crop {CROP}³")));
        }
        let centre = half_max_centroid(&Volume3D::new(dims, vol.voxel_mm(), data)?)?;
        let mut start = [0usize; 3];
        for a in 0..3 {
            let s = centre[a].round() as i64 - (CROP / 2) as i64;
            start[a] = s.clamp(0, (dims[a] - CROP) as i64) as usize;
        }
        Ok(CropWindow { long_axis, start })
    }

    fn cut<T: Copy>(&self, data: &[T], dims: [usize; 3]) -> Result<Vec<T>> {
        let (p, pd) = permute_long_axis_last(data, dims, self.long_axis);
        if (0..3).any(|a| self.start[a] + CROP > pd[a]) {
            return Err(Error::Shape(format!("window at {:?} does not fit {pd:?}", self.start)));
        }
        let mut out = Vec::with_capacity(CROP * CROP * CROP);
        for l in 0..CROP {
            for w in 0..CROP {
                let row = index(pd, self.start[0] + l, self.start[1] + w, self.start[2]);
                out.extend_from_slice(&p[row..row + CROP]);
            }
        }
        Ok(out)
    }

    pub fn crop(&self, vol: &Volume3D) -> Result<Volume3D> {
        Volume3D::new([CROP; 3], vol.voxel_mm(), self.cut(vol.data(), vol.dims())?)
    }

    pub fn crop_mask(&self, mask: &Mask3D) -> Result<Mask3D> {
        Mask3D::new([CROP; 3], mask.voxel_mm(), mask.structure(), self.cut(mask.data(), mask.dims())?)
    }
}

/// Intensity-weighted centroid of the voxels `>= 0.5 * max`.
pub(crate) fn half_max_centroid(vol: &Volume3D) -> Result<[f64; 3]> {
    let max = vol.max();
    if max <= 0.0 {
        return Err(Error::Degenerate("volume has no positive intensity".into()));
    }
    let dims = vol.dims();
    let thr = 0.5 * max;
    let (mut acc, mut mass) = ([0.0f64; 3], 0.0f64);
    for l in 0..dims[0] {
        for w in 0..dims[1] {
            for h in 0..dims[2] {
                let v = vol.get(l, w, h);
                if v >= thr {
                    let v = f64::from(v);
                    acc[0] += v * l as f64;
                    acc[1] += v * w as f64;
                    acc[2] += v * h as f64;
                    mass += v;
                }
            }
        }
    }
    Ok([acc[0] / mass, acc[1] / mass, acc[2] / mass])
}

fn permute_long_axis_last<T: Copy>(data: &[T], src: [usize; 3], long_axis: Axis) -> (Vec<T>, [usize; 3]) {
    let order = match long_axis {
        Axis::H => return (data.to_vec(), src),
        Axis::L => [1, 2, 0],
        Axis::W => [0, 2, 1],
    };
    let dims = [src[order[0]], src[order[1]], src[order[2]]];
    let mut out = Vec::with_capacity(data.len());
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            for c in 0..dims[2] {
                let mut s = [0usize; 3];
                s[order[0]] = a;
                s[order[1]] = b;
                s[order[2]] = c;
                out.push(data[index(src, s[0], s[1], s[2])]);
            }
        }
    }
    (out, dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Structure;

    fn ring_volume(n: usize, centre: [f64; 3]) -> Volume3D {
        let mut v = Volume3D::zeros([n; 3], 6.4).unwrap();
        for l in 0..n {
            for w in 0..n {
                for h in 0..n {
                    let d = ((l as f64 - centre[0]).powi(2)
                        + (w as f64 - centre[1]).powi(2)
                        + (h as f64 - centre[2]).powi(2))
                    .sqrt();
                    if (4.0..7.0).contains(&d) {
                        v.set(l, w, h, 100.0);
                    }
                }
            }
        }
        v
    }

    #[test]
    fn centred_cube_is_unchanged() {
        let v = ring_volume(32, [15.5; 3]);
        assert_eq!(to_long_axis(&v, Axis::H).unwrap(), v);
    }

    #[test]
    fn window_follows_exhaustive_centroid() {
        let v = ring_volume(64, [40.0; 3]);
        // Exhaustive scan for the centroid, independent of the implementation.
        let max = v.data().iter().cloned().fold(0.0f32, f32::max);
        let mut sum = [0.0; 3];
        let mut mass = 0.0;
        for (i, &x) in v.data().iter().enumerate() {
            if x >= 0.5 * max {
                let (l, w, h) = (i / 4096, (i / 64) % 64, i % 64);
                sum[0] += x as f64 * l as f64;
                sum[1] += x as f64 * w as f64;
                sum[2] += x as f64 * h as f64;
                mass += x as f64;
            }
        }
        let start: Vec<usize> = sum.iter().map(|s| (s / mass).round() as usize - 16).collect();
        assert_eq!(start, vec![24, 24, 24]);
        let out = to_long_axis(&v, Axis::H).unwrap();
        for l in 0..32 {
            for w in 0..32 {
                for h in 0..32 {
                    assert_eq!(out.get(l, w, h), v.get(l + 24, w + 24, h + 24));
                }
            }
        }
    }

    #[test]
    fn zero_volume_fails() {
        let v = Volume3D::zeros([32; 3], 6.4).unwrap();
        assert!(matches!(to_long_axis(&v, Axis::H), Err(Error::Degenerate(_))));
    }

    #[test]
    fn too_small_fails() {
        let v = ring_volume(20, [10.0; 3]);
        assert!(matches!(to_long_axis(&v, Axis::H), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn long_axis_is_moved_last() {
        let mut v = Volume3D::zeros([40, 32, 32], 6.4).unwrap();
        v.set(39, 3, 5, 7.0);
        let (data, dims) = permute_long_axis_last(v.data(), v.dims(), Axis::L);
        assert_eq!(dims, [32, 32, 40]);
        assert_eq!(data[index(dims, 3, 5, 39)], 7.0);
    }

    #[test]
    fn masks_share_the_volume_window() {
        let v = ring_volume(48, [30.0, 20.0, 26.0]);
        let m = Mask3D::new([48; 3], 6.4, Structure::Myocardium, v.data().iter().map(|&x| u8::from(x > 0.0)).collect())
            .unwrap();
        let win = CropWindow::locate(&v, Axis::W).unwrap();
        let cv = win.crop(&v).unwrap();
        let cm = win.crop_mask(&m).unwrap();
        assert!(cv.data().iter().zip(cm.data()).all(|(&x, &b)| (x > 0.0) == (b == 1)));
        assert!(cm.count() > 0);
    }
}
