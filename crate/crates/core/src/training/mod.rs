//! Losses, the three-stage schedule, and cross-validated experiments.

mod crossval;
mod loss;
mod model;
mod trainer;

pub use crossval::{
    clinical_rows, load_cases, run_crossval, run_crossval_cases, table2, Case, CaseMetric, ClinicalRow,
    CrossvalConfig, CrossvalPlan, CrossvalReport, FoldRun, Table2Row,
};
pub use loss::{ce_logits, ce_probs, loss_deformation, loss_global, loss_vnet, squared_norm, LossWeights};
pub use model::TrainedModel;
pub use trainer::{params_checksum, train, train_observed, EpochView, Sample, TrainOutcome};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::net::{StnConfig, VNetConfig};
use crate::nn::AdamConfig;
use crate::volume::Structure;
use crate::{Error, Result};

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The DP prior itself, no learning.
    Dp,
    /// Single-channel V-Net on the image.
    VNet,
    /// Dual-channel V-Net on image and prior.
    McVNet,
    /// Dual-channel V-Net followed by the affine shape deformation module.
    DpStVNet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dp, Variant::VNet, Variant::McVNet, Variant::DpStVNet];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dp => "dp",
            Variant::VNet => "vnet",
            Variant::McVNet => "mcvnet",
            Variant::DpStVNet => "dpstvnet",
        }
    }

    /// Name used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Dp => "DP",
            Variant::VNet => "V-Net",
            Variant::McVNet => "MC-V-Net",
            Variant::DpStVNet => "DP-ST-V-Net",
        }
    }

    pub fn needs_prior(self) -> bool {
        !matches!(self, Variant::VNet)
    }

    pub fn has_stn(self) -> bool {
        matches!(self, Variant::DpStVNet)
    }

    pub fn in_channels(self) -> usize {
        if self == Variant::VNet {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

/// Network architecture blocks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfigs {
    pub vnet: VNetConfig,
    pub stn: StnConfig,
}

impl NetConfigs {
    pub fn tiny() -> Self {
        NetConfigs { vnet: VNetConfig::tiny(), stn: StnConfig::tiny() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples drawn per epoch; `None` is one pass over the training set.
    pub samples_per_epoch: Option<usize>,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub l2_coeff: f64,
    pub s1_end: f64,
    pub s2_end: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub variant: Variant,
    pub structure: Structure,
    pub augment: bool,
    pub validate_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3000,
            batch_size: 8,
            samples_per_epoch: None,
            a: 1.0,
            b: 1.0,
            c: 1.0,
            l2_coeff: 1e-4,
            s1_end: 0.2,
            s2_end: 0.3,
            adam: AdamConfig::default(),
            seed: 0,
            variant: Variant::DpStVNet,
            structure: Structure::Myocardium,
            augment: true,
            validate_every: 25,
            checkpoint_every: 100,
        }
    }
}

/// Training stage of the multi-step schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// V-Net only.
    VNet = 1,
    /// Deformation module only.
    Deformation = 2,
    /// Both, jointly.
    Joint = 3,
}

impl Stage {
    pub fn id(self) -> u8 {
        self as u8
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { a: self.a, b: self.b, c: self.c }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.samples_per_epoch == Some(0) {
            return bad("samples_per_epoch must be positive".into());
        }
        if !(0.0 < self.s1_end && self.s1_end < self.s2_end && self.s2_end < 1.0) {
            return bad(format!("need 0 < s1_end < s2_end < 1, got {} and {}", self.s1_end, self.s2_end));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return bad(format!("l2_coeff {}", self.l2_coeff));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("learning rate {}", self.adam.lr));
        }
        if self.validate_every == 0 || self.checkpoint_every == 0 {
            return bad("validate_every and checkpoint_every must be positive".into());
        }
        self.loss_weights().validate()
    }

    /// First epochs of stage 2 and stage 3.
    pub fn stage_bounds(&self) -> (usize, usize) {
        let e = self.epochs as f64;
        ((self.s1_end * e).round() as usize, (self.s2_end * e).round() as usize)
    }

    /// Stage of `epoch` (0-based). Variants without a deformation module stay in stage 1.
    pub fn stage_at(&self, epoch: usize) -> Stage {
        if !self.variant.has_stn() {
            return Stage::VNet;
        }
        let (b1, b2) = self.stage_bounds();
        if epoch < b1 {
            Stage::VNet
        } else if epoch < b2 {
            Stage::Deformation
        } else {
            Stage::Joint
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub stage: u8,
    pub loss_vnet: Option<f64>,
    pub loss_deformation: Option<f64>,
    pub loss_global: Option<f64>,
    pub val_dsc_endo: Option<f64>,
    pub val_dsc_myo: Option<f64>,
    pub val_dsc_epi: Option<f64>,
}

impl TrainRecord {
    pub const HEADER: [&'static str; 8] = [
        "epoch",
        "stage",
        "loss_vnet",
        "loss_deformation",
        "loss_global",
        "val_dsc_endo",
        "val_dsc_myo",
        "val_dsc_epi",
    ];

    pub fn val_dsc(&self, s: Structure) -> Option<f64> {
        match s {
            Structure::Endocardium => self.val_dsc_endo,
            Structure::Myocardium => self.val_dsc_myo,
            Structure::Epicardium => self.val_dsc_epi,
        }
    }

    pub(crate) fn set_val_dsc(&mut self, s: Structure, v: f64) {
        let slot = match s {
            Structure::Endocardium => &mut self.val_dsc_endo,
            Structure::Myocardium => &mut self.val_dsc_myo,
            Structure::Epicardium => &mut self.val_dsc_epi,
        };
        *slot = Some(v);
    }
}
