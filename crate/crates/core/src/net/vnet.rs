use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Cursor};
use super::{input_tensor, ProbMap};
use crate::nn::{read_checkpoint, write_checkpoint, Checkpoint, ParamSet, Tape, Var};
use crate::volume::{ShapePrior, Volume3D};
use crate::{Error, Result};

/// Encoder/decoder layout. Stage `i` works at `widths[i]` channels and
/// `1 / 2^i` resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VNetConfig {
    /// 1 for image only, 2 for image plus shape prior.
    pub in_channels: usize,
    pub out_channels: usize,
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub kernel: usize,
    pub keep_prob: f64,
}

impl Default for VNetConfig {
    fn default() -> Self {
        VNetConfig {
            in_channels: 2,
            out_channels: 1,
            widths: vec![16, 32, 64, 128],
            convs_per_stage: 2,
            kernel: 5,
            keep_prob: 0.8,
        }
    }
}

impl VNetConfig {
    /// Small layout for desk-scale runs and tests.
    pub fn tiny() -> Self {
        VNetConfig { widths: vec![4, 8, 16], convs_per_stage: 1, kernel: 3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("vnet config: {m}")));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive");
        }
        if self.convs_per_stage == 0 {
            return bad("convs_per_stage must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad("keep_prob must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(VNet::new(self.clone(), 0)?.params.count())
    }
}

#[derive(Debug, Clone)]
pub struct VNet {
    config: VNetConfig,
    params: ParamSet,
}

impl VNet {
    pub fn new(config: VNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let (k, w) = (config.kernel, &config.widths);
        for (i, &c) in w.iter().enumerate() {
            let mut ci = if i == 0 { config.in_channels } else { w[i - 1] };
            if i > 0 {
                layers::push_conv(&mut ps, &mut rng, &format!("enc{i}.down"), ci, c, 2, true);
                ci = c;
            }
            for j in 0..config.convs_per_stage {
                layers::push_conv(&mut ps, &mut rng, &format!("enc{i}.conv{j}"), ci, c, k, true);
                ci = c;
            }
        }
        for i in (0..w.len() - 1).rev() {
            let c = w[i];
            layers::push_deconv(&mut ps, &mut rng, &format!("dec{i}.up"), w[i + 1], c, 2);
            let mut ci = 2 * c;
            for j in 0..config.convs_per_stage {
                layers::push_conv(&mut ps, &mut rng, &format!("dec{i}.conv{j}"), ci, c, k, true);
                ci = c;
            }
        }
        layers::push_conv(&mut ps, &mut rng, "out", w[0], config.out_channels, 1, false);
        Ok(VNet { config, params: ps })
    }

    pub fn config(&self) -> &VNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Smallest spatial size step the encoder accepts.
    pub fn size_multiple(&self) -> usize {
        1 << (self.config.widths.len() - 1)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        tape.bind(&self.params, trainable)
    }

    /// Logits `[N, out_channels, L, W, H]` for input `[N, in_channels, L, W, H]`.
    pub fn forward<R: Rng>(&self, tape: &mut Tape, vars: &[Var], x: Var, training: bool, rng: &mut R) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(Error::Shape(format!("vnet expects [N, {}, L, W, H], got {s:?}", self.config.in_channels)));
        }
        let m = self.size_multiple();
        if s[2..].iter().any(|d| d % m != 0) {
            return Err(Error::Shape(format!("spatial dims {:?} must be multiples of {m}", &s[2..])));
        }
        let (pad, stages) = (self.config.kernel / 2, self.config.widths.len());
        let mut cur = Cursor::new(vars);
        let mut h = x;
        let mut skips = Vec::with_capacity(stages);
        for i in 0..stages {
            if i > 0 {
                h = layers::conv(tape, &mut cur, h, 2, 0, true)?;
            }
            for _ in 0..self.config.convs_per_stage {
                h = layers::conv(tape, &mut cur, h, 1, pad, true)?;
            }
            skips.push(h);
        }
        for i in (0..stages - 1).rev() {
            h = layers::deconv(tape, &mut cur, h, 2)?;
            h = tape.concat(h, skips[i])?;
            for _ in 0..self.config.convs_per_stage {
                h = layers::conv(tape, &mut cur, h, 1, pad, true)?;
            }
        }
        h = tape.dropout(h, self.config.keep_prob, rng, training)?;
        let out = layers::conv(tape, &mut cur, h, 1, 0, false)?;
        cur.finish();
        Ok(out)
    }

    /// Inference on one volume; `prior` is required for two input channels.
    pub fn predict(&self, image: &Volume3D, prior: Option<&ShapePrior>) -> Result<ProbMap> {
        Ok(self.predict_channels(image, prior)?.swap_remove(0))
    }

    /// One probability map per output channel.
    pub fn predict_channels(&self, image: &Volume3D, prior: Option<&ShapePrior>) -> Result<Vec<ProbMap>> {
        let x = input_tensor(&[(image, prior)], self.config.in_channels)?;
        let dims = image.dims();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x);
        let z = self.forward(&mut tape, &vars, x, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        let p = tape.sigmoid(z);
        let n: usize = dims.iter().product();
        tape.value(p).data().chunks(n).map(|c| ProbMap::new(dims, c.to_vec())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": "vnet", "config": self.config });
        write_checkpoint(path, &Checkpoint::from_params(&self.params, meta))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        if ck.meta["model"] != "vnet" {
            return Err(Error::Checkpoint(format!("{} does not hold a vnet", path.display())));
        }
        let config: VNetConfig =
            serde_json::from_value(ck.meta["config"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut net = VNet::new(config, 0)?;
        net.params.load_from(&ck.tensors)?;
        Ok(net)
    }
}
