//! Segmentation network, localization network, and the affine warp.

mod layers;
mod spatial;
mod stn;
mod vnet;

pub use spatial::{grid_generate, sample, warp, AffineParams, ProbMap, SamplingGrid};
pub use stn::{Interpolation, Stn, StnConfig};
pub use vnet::{VNet, VNetConfig};

use crate::nn::Tensor;
use crate::volume::{ShapePrior, Volume3D};
use crate::{Error, Result};

/// Image intensities scaled to `[0, 1]` by the volume maximum.
pub fn normalize_intensity(vol: &Volume3D) -> Vec<f64> {
    let m = vol.max() as f64;
    let s = if m > 0.0 { 1.0 / m } else { 0.0 };
    vol.data().iter().map(|&v| v as f64 * s).collect()
}

/// Stack `(image, prior)` pairs into a `[N, channels, L, W, H]` batch.
/// One channel uses the image only; two channels append the prior.
pub fn input_tensor(items: &[(&Volume3D, Option<&ShapePrior>)], channels: usize) -> Result<Tensor> {
    let Some((first, _)) = items.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    if !(1..=2).contains(&channels) {
        return Err(Error::InvalidArgument(format!("{channels} input channels")));
    }
    let dims = first.dims();
    let mut data = Vec::with_capacity(items.len() * channels * first.len());
    for (img, prior) in items {
        if img.dims() != dims {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", dims, img.dims())));
        }
        data.extend(normalize_intensity(img));
        if channels == 2 {
            let p = prior.ok_or_else(|| Error::MissingPriors("two-channel input needs a shape prior".into()))?;
            if p.mask().dims() != dims {
                return Err(Error::Shape(format!("image {:?} vs prior {:?}", dims, p.mask().dims())));
            }
            data.extend(p.mask().to_f64());
        }
    }
    Tensor::new(vec![items.len(), channels, dims[0], dims[1], dims[2]], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts_inside_bands() {
        let v = VNetConfig::default().param_count().unwrap();
        let s = StnConfig::default().param_count().unwrap();
        assert!((6_660_000..=8_140_000).contains(&v), "{v}");
        assert!((1_089_000..=1_331_000).contains(&s), "{s}");
    }

    #[test]
    fn tiny_output_shape_and_range() {
        let net = VNet::new(VNetConfig { in_channels: 1, ..VNetConfig::tiny() }, 3).unwrap();
        let data = (0..8 * 8 * 8).map(|i| (i % 7) as f32).collect();
        let vol = Volume3D::new([8, 8, 8], 6.4, data).unwrap();
        let p = net.predict(&vol, None).unwrap();
        assert_eq!(p.dims(), [8, 8, 8]);
        assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn two_channels_without_prior_is_an_error() {
        let net = VNet::new(VNetConfig::tiny(), 3).unwrap();
        let vol = Volume3D::zeros([8, 8, 8], 6.4).unwrap();
        assert!(matches!(net.predict(&vol, None), Err(Error::MissingPriors(_))));
    }

    #[test]
    fn cubic_spline_is_rejected() {
        let c = StnConfig { interpolation: Interpolation::CubicSpline, ..StnConfig::tiny() };
        assert!(c.validate().is_err());
    }
}
