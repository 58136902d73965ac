use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Variant;
use crate::net::{warp, ProbMap, Stn, VNet};
use crate::volume::{Mask3D, ShapePrior, Structure, Volume3D};
use crate::{Error, Result};

/// A fitted segmenter for one structure.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub variant: Variant,
    pub structure: Structure,
    pub vnet: Option<VNet>,
    pub stn: Option<Stn>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    variant: Variant,
    structure: Structure,
}

impl TrainedModel {
    /// The prior-only model.
    pub fn dp(structure: Structure) -> Self {
        TrainedModel { variant: Variant::Dp, structure, vnet: None, stn: None }
    }

    fn need_prior<'a>(&self, prior: Option<&'a ShapePrior>) -> Result<&'a ShapePrior> {
        prior.ok_or_else(|| Error::MissingPriors(format!("variant {} needs a shape prior", self.variant)))
    }

    fn vnet(&self) -> Result<&VNet> {
        self.vnet.as_ref().ok_or_else(|| Error::InvalidArgument(format!("variant {} has no V-Net", self.variant)))
    }

    /// Probability map for `image`. `prior` is the DP prior of this model's structure.
    pub fn predict(&self, image: &Volume3D, prior: Option<&ShapePrior>) -> Result<ProbMap> {
        match self.variant {
            Variant::Dp => Ok(ProbMap::from_mask(self.need_prior(prior)?.mask())),
            Variant::VNet => self.vnet()?.predict(image, None),
            Variant::McVNet => self.vnet()?.predict(image, Some(self.need_prior(prior)?)),
            Variant::DpStVNet => {
                let prior = self.need_prior(prior)?;
                let y = self.vnet()?.predict(image, Some(prior))?;
                let stn = self.stn.as_ref().ok_or_else(|| Error::InvalidArgument("missing deformation module".into()))?;
                let lambda = stn.localize(&y, prior)?;
                Ok(warp(&y, &lambda))
            }
        }
    }

    /// Binary mask at threshold 0.5.
    pub fn segment(&self, image: &Volume3D, prior: Option<&ShapePrior>) -> Result<Mask3D> {
        self.segment_at(image, prior, 0.5)
    }

    /// Binary mask at `p >= threshold`.
    pub fn segment_at(&self, image: &Volume3D, prior: Option<&ShapePrior>, threshold: f64) -> Result<Mask3D> {
        let p = self.predict(image, prior)?;
        Mask3D::from_probabilities(image.dims(), image.voxel_mm(), self.structure, p.values(), threshold)
    }

    /// Writes `model.json` plus `vnet.ckpt` / `stn.ckpt` where present.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = ModelMeta { variant: self.variant, structure: self.structure };
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(&meta).expect("plain struct");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        if let Some(v) = &self.vnet {
            v.save(&dir.join("vnet.ckpt"))?;
        }
        if let Some(s) = &self.stn {
            s.save(&dir.join("stn.ckpt"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ModelMeta =
            serde_json::from_str(&text).map_err(|e| Error::Metadata { path: path.clone(), message: e.to_string() })?;
        let vnet = if meta.variant == Variant::Dp { None } else { Some(VNet::load(&dir.join("vnet.ckpt"))?) };
        let stn = if meta.variant.has_stn() { Some(Stn::load(&dir.join("stn.ckpt"))?) } else { None };
        Ok(TrainedModel { variant: meta.variant, structure: meta.structure, vnet, stn })
    }
}
