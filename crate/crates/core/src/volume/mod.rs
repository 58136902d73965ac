//! Volumes, masks, gated studies and their on-disk formats.
//!
//! Voxels are addressed `(l, w, h)` with `h` varying fastest. In long-axis
//! orientation `h` runs along the LV long axis, apex at low `h`.

mod augment;
mod folds;
mod io;
mod long_axis;
mod manifest;

pub use augment::{augment, apply_augment, AugmentParams};
pub(crate) use augment::snap;
pub use folds::{stratified_folds, Fold};
pub use io::{load_mask, load_prior, load_volume, save_mask, save_prior, save_volume};
pub use long_axis::{to_long_axis, Axis, CropWindow, CROP};
pub use manifest::{DatasetManifest, StudyEntry};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default isotropic voxel edge in millimetres.
pub const DEFAULT_VOXEL_MM: f64 = 6.4;

/// Number of ECG gates per study.
pub const GATES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Endocardium,
    Myocardium,
    Epicardium,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Endocardium, Structure::Myocardium, Structure::Epicardium];

    pub fn short_name(self) -> &'static str {
        match self {
            Structure::Endocardium => "endo",
            Structure::Myocardium => "myo",
            Structure::Epicardium => "epi",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.short_name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    NormalOrMild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::NormalOrMild, Severity::Moderate, Severity::Severe];

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::NormalOrMild => "normal_or_mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyState {
    Stress,
    Rest,
}

impl StudyState {
    pub fn as_str(self) -> &'static str {
        match self {
            StudyState::Stress => "stress",
            StudyState::Rest => "rest",
        }
    }
}

pub(crate) fn check_dims(dims: [usize; 3], voxel_mm: f64) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("dims must be positive, got {dims:?}")));
    }
    if !(voxel_mm.is_finite() && voxel_mm > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel_mm must be positive, got {voxel_mm}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn index(dims: [usize; 3], l: usize, w: usize, h: usize) -> usize {
    (l * dims[1] + w) * dims[2] + h
}

/// A 3D scalar field (counts) on an isotropic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    voxel_mm: f64,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], voxel_mm: f64, data: Vec<f32>) -> Result<Self> {
        check_dims(dims, voxel_mm)?;
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(Error::LengthMismatch { expected, found: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Volume3D { dims, voxel_mm, data })
    }

    pub fn zeros(dims: [usize; 3], voxel_mm: f64) -> Result<Self> {
        Self::new(dims, voxel_mm, vec![0.0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_mm(&self) -> f64 {
        self.voxel_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, l: usize, w: usize, h: usize) -> f32 {
        self.data[index(self.dims, l, w, h)]
    }

    pub fn set(&mut self, l: usize, w: usize, h: usize, v: f32) {
        assert!(v.is_finite(), "volume values must be finite");
        let i = index(self.dims, l, w, h);
        self.data[i] = v;
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Values as `f64`, for network input.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// A binary mask of one LV structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    dims: [usize; 3],
    voxel_mm_bits: u64,
    structure: Structure,
    data: Vec<u8>,
}

impl Mask3D {
    pub fn new(dims: [usize; 3], voxel_mm: f64, structure: Structure, data: Vec<u8>) -> Result<Self> {
        check_dims(dims, voxel_mm)?;
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(Error::LengthMismatch { expected, found: data.len() });
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {} at index {i} is not binary", data[i])));
        }
        Ok(Mask3D { dims, voxel_mm_bits: voxel_mm.to_bits(), structure, data })
    }

    pub fn empty(dims: [usize; 3], voxel_mm: f64, structure: Structure) -> Result<Self> {
        Self::new(dims, voxel_mm, structure, vec![0; dims.iter().product()])
    }

    /// Binarise a probability map at `threshold` (values `>= threshold` are foreground).
    pub fn from_probabilities(
        dims: [usize; 3],
        voxel_mm: f64,
        structure: Structure,
        probs: &[f64],
        threshold: f64,
    ) -> Result<Self> {
        let data = probs.iter().map(|&p| u8::from(p >= threshold)).collect();
        Self::new(dims, voxel_mm, structure, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_mm(&self) -> f64 {
        f64::from_bits(self.voxel_mm_bits)
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn with_structure(mut self, structure: Structure) -> Self {
        self.structure = structure;
        self
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, l: usize, w: usize, h: usize) -> bool {
        self.data[index(self.dims, l, w, h)] != 0
    }

    pub fn set(&mut self, l: usize, w: usize, h: usize, v: bool) {
        let i = index(self.dims, l, w, h);
        self.data[i] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Voxel-wise `self AND NOT other`.
    pub fn minus(&self, other: &Mask3D) -> Result<Mask3D> {
        self.check_same_grid(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a & (1 - b)).collect();
        Mask3D::new(self.dims, self.voxel_mm(), self.structure, data)
    }

    /// Voxel-wise `self OR other`.
    pub fn union(&self, other: &Mask3D) -> Result<Mask3D> {
        self.check_same_grid(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a | b).collect();
        Mask3D::new(self.dims, self.voxel_mm(), self.structure, data)
    }

    pub(crate) fn check_same_grid(&self, other: &Mask3D) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("mask dims {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }
}

/// A binary shape prior, normally from the DP contour search or read back from disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePrior(Mask3D);

impl ShapePrior {
    pub fn new(mask: Mask3D) -> Self {
        ShapePrior(mask)
    }

    pub fn mask(&self) -> &Mask3D {
        &self.0
    }

    pub fn into_mask(self) -> Mask3D {
        self.0
    }

    pub fn structure(&self) -> Structure {
        self.0.structure()
    }
}

/// One ECG-gated acquisition: eight phase volumes on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedStudy {
    pub patient_id: String,
    pub state: StudyState,
    pub severity: Severity,
    gates: Vec<Volume3D>,
}

impl GatedStudy {
    pub fn new(patient_id: impl Into<String>, state: StudyState, severity: Severity, gates: Vec<Volume3D>) -> Result<Self> {
        if gates.len() != GATES {
            return Err(Error::InvalidArgument(format!("a gated study needs {GATES} gates, got {}", gates.len())));
        }
        let (dims, vox) = (gates[0].dims(), gates[0].voxel_mm());
        if gates.iter().any(|g| g.dims() != dims || g.voxel_mm() != vox) {
            return Err(Error::Shape("gates do not share dims and voxel size".into()));
        }
        Ok(GatedStudy { patient_id: patient_id.into(), state, severity, gates })
    }

    pub fn gates(&self) -> &[Volume3D] {
        &self.gates
    }

    pub fn into_gates(self) -> Vec<Volume3D> {
        self.gates
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_rejects_bad_input() {
        assert!(matches!(
            Volume3D::new([2, 2, 2], 6.4, vec![0.0; 7]),
            Err(Error::LengthMismatch { expected: 8, found: 7 })
        ));
        assert!(matches!(Volume3D::new([2, 2, 2], 6.4, vec![f32::NAN; 8]), Err(Error::NonFinite(0))));
        assert!(Volume3D::new([2, 2, 2], 0.0, vec![0.0; 8]).is_err());
        assert!(Volume3D::new([0, 2, 2], 6.4, vec![]).is_err());
    }

    #[test]
    fn mask_must_be_binary() {
        assert!(Mask3D::new([1, 1, 2], 6.4, Structure::Myocardium, vec![0, 2]).is_err());
        let m = Mask3D::new([1, 1, 2], 6.4, Structure::Myocardium, vec![0, 1]).unwrap();
        assert_eq!(m.count(), 1);
    }

    #[test]
    fn set_operations() {
        let a = Mask3D::new([1, 1, 4], 6.4, Structure::Epicardium, vec![1, 1, 1, 0]).unwrap();
        let b = Mask3D::new([1, 1, 4], 6.4, Structure::Endocardium, vec![0, 1, 0, 0]).unwrap();
        assert_eq!(a.minus(&b).unwrap().data(), &[1, 0, 1, 0]);
        assert_eq!(b.union(&a).unwrap().data(), &[1, 1, 1, 0]);
    }

    #[test]
    fn gated_study_needs_eight_gates() {
        let v = Volume3D::zeros([2, 2, 2], 6.4).unwrap();
        assert!(GatedStudy::new("p", StudyState::Rest, Severity::Moderate, vec![v.clone(); 7]).is_err());
        assert!(GatedStudy::new("p", StudyState::Rest, Severity::Moderate, vec![v; 8]).is_ok());
    }
}
