use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Cursor};
use super::{AffineParams, ProbMap};
use crate::nn::{read_checkpoint, warp, write_checkpoint, Checkpoint, ParamSet, Tape, Tensor, Var};
use crate::volume::ShapePrior;
use crate::{Error, Result};

/// Interpolation used by the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Trilinear,
    /// Reserved; rejected by [`StnConfig::validate`].
    CubicSpline,
}

/// Localization network: a conv stack, flatten, one dense layer to 12.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StnConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub interpolation: Interpolation,
}

impl Default for StnConfig {
    fn default() -> Self {
        StnConfig {
            in_channels: 2,
            input_size: 32,
            channels: vec![16, 32, 32, 72, 72, 144, 144],
            strides: vec![1, 2, 1, 2, 1, 2, 1],
            kernel: 3,
            interpolation: Interpolation::Trilinear,
        }
    }
}

impl StnConfig {
    pub fn tiny() -> Self {
        StnConfig { channels: vec![4, 8, 8, 8, 8, 16, 16], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("stn config: {m}")));
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return bad("channels and strides must be non-empty and of equal length");
        }
        if self.channels.contains(&0) || self.strides.contains(&0) || self.in_channels == 0 {
            return bad("channel counts and strides must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.interpolation != Interpolation::Trilinear {
            return bad("only trilinear interpolation is implemented");
        }
        if self.output_size() == 0 {
            return bad("input too small for the stride pattern");
        }
        Ok(())
    }

    /// Spatial size after the conv stack.
    pub fn output_size(&self) -> usize {
        let p = self.kernel / 2;
        self.strides.iter().fold(self.input_size, |n, &s| {
            if n + 2 * p < self.kernel {
                0
            } else {
                (n + 2 * p - self.kernel) / s + 1
            }
        })
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(Stn::new(self.clone(), 0)?.params.count())
    }
}

#[derive(Debug, Clone)]
pub struct Stn {
    config: StnConfig,
    params: ParamSet,
}

impl Stn {
    /// Conv layers are randomly initialized; the dense layer starts at zero
    /// weights with the identity transform as bias.
    pub fn new(config: StnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut ci = config.in_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            layers::push_conv(&mut ps, &mut rng, &format!("loc{i}"), ci, c, config.kernel, true);
            ci = c;
        }
        let f = ci * config.output_size().pow(3);
        ps.push("fc.w", Tensor::zeros(&[12, f]), true);
        ps.push("fc.b", Tensor::new(vec![12], warp::IDENTITY_THETA.to_vec())?, false);
        Ok(Stn { config, params: ps })
    }

    pub fn config(&self) -> &StnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        tape.bind(&self.params, trainable)
    }

    /// Affine parameters `[N, 12]` for input `[N, in_channels, n, n, n]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let n = self.config.input_size;
        let s = tape.shape(x);
        if s.len() != 5 || s[1] != self.config.in_channels || s[2..] != [n, n, n] {
            return Err(Error::Shape(format!(
                "stn expects [N, {}, {n}, {n}, {n}], got {s:?}",
                self.config.in_channels
            )));
        }
        let mut cur = Cursor::new(vars);
        let mut h = x;
        for &stride in &self.config.strides {
            h = layers::conv(tape, &mut cur, h, stride, self.config.kernel / 2, true)?;
        }
        let flat = tape.flatten(h)?;
        let (w, b) = (cur.next(), cur.next());
        cur.finish();
        tape.dense(flat, w, b)
    }

    /// Predict the affine map from `Y′` and the prior.
    pub fn localize(&self, y_prime: &ProbMap, prior: &ShapePrior) -> Result<AffineParams> {
        if y_prime.dims() != prior.mask().dims() {
            return Err(Error::Shape(format!("map {:?} vs prior {:?}", y_prime.dims(), prior.mask().dims())));
        }
        let dims = y_prime.dims();
        let mut data = y_prime.values().to_vec();
        data.extend(prior.mask().to_f64());
        let x = Tensor::new(vec![1, 2, dims[0], dims[1], dims[2]], data)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x);
        let t = self.forward(&mut tape, &vars, x)?;
        let mut lambda = [0.0; 12];
        lambda.copy_from_slice(tape.value(t).data());
        AffineParams::new(lambda)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": "stn", "config": self.config });
        write_checkpoint(path, &Checkpoint::from_params(&self.params, meta))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        if ck.meta["model"] != "stn" {
            return Err(Error::Checkpoint(format!("{} does not hold an stn", path.display())));
        }
        let config: StnConfig =
            serde_json::from_value(ck.meta["config"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut net = Stn::new(config, 0)?;
        net.params.load_from(&ck.tensors)?;
        Ok(net)
    }
}
