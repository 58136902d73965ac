//! Left-ventricle segmentation for gated myocardial perfusion SPECT.
//!
//! The pipeline turns a long-axis 32³ perfusion volume into endocardium,
//! myocardium and epicardium masks:
//!
//! 1. [`dp_prior`] extracts a coarse shape prior with a dynamic-programming
//!    boundary search on polar-resampled long-axis slices.
//! 2. [`net`] runs a dual-channel V-Net (image + prior) and a spatial
//!    transformer that affinely warps the V-Net probability map.
//! 3. [`training`] fits both networks with a three-stage schedule.
//! 4. [`metrics`] and [`clinical`] score the masks and derive EDV, ESV,
//!    LVEF and scar burden.
//!
//! [`phantom`] provides synthetic gated studies with closed-form ground truth.

pub mod clinical;
pub mod dp_prior;
pub mod error;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
