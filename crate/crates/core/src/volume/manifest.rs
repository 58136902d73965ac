//! Dataset manifest: one JSON file listing studies, gate volumes, per-gate
//! masks and severity. Paths are relative to the manifest's directory.
//!
//! ```json
//! {"studies": [{"patient_id": "P001", "state": "rest", "severity": "moderate",
//!   "gates": ["P001/rest/gate0.vol", "..."],
//!   "masks": {"endocardium": ["P001/rest/gate0_endo.msk", "..."], "...": []}}]}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_mask, load_volume, stratified_folds, Fold, GatedStudy, Mask3D, Severity, Structure, StudyState, GATES};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyEntry {
    pub patient_id: String,
    pub state: StudyState,
    pub severity: Severity,
    pub gates: Vec<PathBuf>,
    #[serde(default)]
    pub masks: BTreeMap<Structure, Vec<PathBuf>>,
}

impl StudyEntry {
    /// Stable key `patient/state`, used for output layout.
    pub fn key(&self) -> String {
        format!("{}/{}", self.patient_id, self.state.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub studies: Vec<StudyEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, studies: Vec<StudyEntry>) -> Self {
        DatasetManifest { studies, root: root.into() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Metadata { path: path.to_owned(), message: e.to_string() })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_structure()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    fn check_structure(&self) -> Result<()> {
        for s in &self.studies {
            if s.gates.len() != GATES {
                return Err(Error::InvalidArgument(format!("study {} lists {} gates", s.key(), s.gates.len())));
            }
            for (st, paths) in &s.masks {
                if paths.len() != GATES {
                    return Err(Error::InvalidArgument(format!(
                        "study {} lists {} {:?} masks",
                        s.key(),
                        paths.len(),
                        st
                    )));
                }
            }
        }
        Ok(())
    }

    /// Load every referenced file once, checking that each exists, parses, and
    /// that masks share their study's grid.
    pub fn validate(&self) -> Result<()> {
        self.check_structure()?;
        for i in 0..self.studies.len() {
            let study = self.load_study(i)?;
            let dims = study.gates()[0].dims();
            for st in self.studies[i].masks.keys() {
                for m in self.load_masks(i, *st)? {
                    if m.dims() != dims {
                        return Err(Error::Shape(format!(
                            "{}: mask dims {:?} differ from gate dims {dims:?}",
                            self.studies[i].key(),
                            m.dims()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn severity_counts(&self) -> BTreeMap<Severity, usize> {
        let mut counts = BTreeMap::new();
        for (_, sev) in self.patients() {
            *counts.entry(sev).or_insert(0) += 1;
        }
        counts
    }

    /// Distinct patients with their severity, in first-appearance order.
    pub fn patients(&self) -> Vec<(String, Severity)> {
        let mut out: Vec<(String, Severity)> = Vec::new();
        for s in &self.studies {
            if !out.iter().any(|(id, _)| *id == s.patient_id) {
                out.push((s.patient_id.clone(), s.severity));
            }
        }
        out
    }

    pub fn folds(&self, k: usize, seed: u64) -> Result<Vec<Fold>> {
        stratified_folds(&self.patients(), k, seed)
    }

    /// Indices of studies belonging to the given patients.
    pub fn study_indices(&self, patients: &[String]) -> Vec<usize> {
        (0..self.studies.len()).filter(|&i| patients.contains(&self.studies[i].patient_id)).collect()
    }

    pub fn load_study(&self, i: usize) -> Result<GatedStudy> {
        let e = &self.studies[i];
        let gates = e.gates.iter().map(|p| load_volume(self.resolve(p))).collect::<Result<Vec<_>>>()?;
        GatedStudy::new(e.patient_id.clone(), e.state, e.severity, gates)
    }

    pub fn load_masks(&self, i: usize, structure: Structure) -> Result<Vec<Mask3D>> {
        let e = &self.studies[i];
        let paths = e.masks.get(&structure).ok_or_else(|| {
            Error::InvalidArgument(format!("study {} has no {:?} masks", e.key(), structure))
        })?;
        paths.iter().map(|p| load_mask(self.resolve(p))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{save_mask, save_volume, Volume3D};

    fn write_study(dir: &Path, id: &str, sev: Severity) -> StudyEntry {
        let mut gates = Vec::new();
        let mut masks = Vec::new();
        for g in 0..GATES {
            let rel = PathBuf::from(format!("{id}/rest/gate{g}.vol"));
            save_volume(dir.join(&rel), &Volume3D::zeros([4, 4, 4], 6.4).unwrap()).unwrap();
            gates.push(rel);
            let mrel = PathBuf::from(format!("{id}/rest/gate{g}_myo.msk"));
            save_mask(dir.join(&mrel), &Mask3D::empty([4, 4, 4], 6.4, Structure::Myocardium).unwrap()).unwrap();
            masks.push(mrel);
        }
        StudyEntry {
            patient_id: id.into(),
            state: StudyState::Rest,
            severity: sev,
            gates,
            masks: BTreeMap::from([(Structure::Myocardium, masks)]),
        }
    }

    #[test]
    fn manifest_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let studies = vec![
            write_study(dir.path(), "A", Severity::Moderate),
            write_study(dir.path(), "B", Severity::Severe),
        ];
        let m = DatasetManifest::new(dir.path(), studies);
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.studies, m.studies);
        back.validate().unwrap();
        assert_eq!(back.severity_counts()[&Severity::Moderate], 1);
        assert_eq!(back.load_masks(1, Structure::Myocardium).unwrap().len(), 8);
        assert!(back.load_masks(1, Structure::Endocardium).is_err());
    }

    #[test]
    fn missing_file_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_study(dir.path(), "A", Severity::Moderate);
        fs::remove_file(dir.path().join(&s.gates[3])).unwrap();
        let m = DatasetManifest::new(dir.path(), vec![s]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn bad_severity_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, r#"{"studies":[{"patient_id":"x","state":"rest","severity":"mild","gates":[]}]}"#).unwrap();
        assert!(DatasetManifest::load(&p).is_err());
    }
}
