//! Synthetic gated left-ventricle studies with closed-form ground truth.
//!
//! The cavity is an ellipsoid truncated by a basal plane; the epicardium is
//! the same shape grown by the wall thickness. The long axis runs along `h`
//! with the apex at low `h`. Gate volumes follow a cosine over the cycle with
//! end-diastole at gate 0.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::volume::{
    save_mask, save_volume, DatasetManifest, GatedStudy, Mask3D, Severity, Structure, StudyEntry, StudyState,
    Volume3D, DEFAULT_VOXEL_MM, GATES,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScarSpec {
    /// Fraction of the azimuth covered by the scar.
    pub fraction: f64,
    /// Uptake inside the scar relative to normal myocardium.
    pub intensity: f64,
    pub start_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub patient_id: String,
    pub state: StudyState,
    pub size: usize,
    pub voxel_mm: f64,
    /// Cavity centre in voxel coordinates `(l, w, h)`.
    pub center: [f64; 3],
    /// Endocardial semi-axes `(a, b, c)` in mm per gate; `c` is the long axis.
    pub endo_axes_mm: Vec<[f64; 3]>,
    pub wall_mm: f64,
    /// Height of the basal cut above the centre, as a fraction of `c`.
    pub cut_fraction: f64,
    /// Mean counts in normal myocardium.
    pub myo_counts: f64,
    pub cavity_level: f64,
    pub background_level: f64,
    pub scar: Option<ScarSpec>,
    /// Poisson noise when true; otherwise the noiseless expectation.
    pub noise: bool,
    pub seed: u64,
}

/// Closed-form quantities of a phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub cavity_cc: Vec<f64>,
    pub myo_cc: Vec<f64>,
    pub edv_cc: f64,
    pub esv_cc: f64,
    pub lvef: f64,
    pub ed_gate: usize,
    pub es_gate: usize,
    pub scar_burden_pct: f64,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub study: GatedStudy,
    /// Per structure, one mask per gate.
    pub masks: BTreeMap<Structure, Vec<Mask3D>>,
    pub truth: PhantomTruth,
}

/// Volume of `x²/a² + y²/b² + z²/c² ≤ 1` below the plane `z = h`.
pub fn truncated_ellipsoid_volume(a: f64, b: f64, c: f64, h: f64) -> f64 {
    let h = h.clamp(-c, c);
    PI * a * b * ((h + c) - (h.powi(3) + c.powi(3)) / (3.0 * c * c))
}

/// Axis schedule with cavity volume `esv + (edv − esv)(1 + cos 2πg/8)/2`,
/// scaling `ed_axes_mm` isotropically.
pub fn beating_axes(ed_axes_mm: [f64; 3], ef: f64) -> Vec<[f64; 3]> {
    (0..GATES)
        .map(|g| {
            let rel = 1.0 - ef * (1.0 - (2.0 * PI * g as f64 / GATES as f64).cos()) / 2.0;
            let s = rel.cbrt();
            ed_axes_mm.map(|v| v * s)
        })
        .collect()
}

impl PhantomSpec {
    /// A noiseless, scar-free phantom centred in a 32³ grid.
    pub fn simple(patient_id: impl Into<String>, ed_axes_mm: [f64; 3], ef: f64) -> Self {
        let mut s = PhantomSpec {
            patient_id: patient_id.into(),
            state: StudyState::Rest,
            size: 32,
            voxel_mm: DEFAULT_VOXEL_MM,
            center: [0.0; 3],
            endo_axes_mm: beating_axes(ed_axes_mm, ef),
            wall_mm: 3.0 * DEFAULT_VOXEL_MM,
            cut_fraction: 0.5,
            myo_counts: 400.0,
            cavity_level: 0.08,
            background_level: 0.04,
            scar: None,
            noise: false,
            seed: 0,
        };
        s.center = s.centered();
        s
    }

    /// Centre that places the truncated epicardium in the middle of the grid.
    pub fn centered(&self) -> [f64; 3] {
        let mid = (self.size as f64 - 1.0) / 2.0;
        let ed = self.endo_axes_mm[0];
        let (c_epi, cut) = ((ed[2] + self.wall_mm) / self.voxel_mm, self.cut_fraction * ed[2] / self.voxel_mm);
        [mid, mid, mid + (c_epi - cut) / 2.0]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("phantom {}: {m}", self.patient_id)));
        if self.endo_axes_mm.len() != GATES {
            return bad(format!("{} gates, expected {GATES}", self.endo_axes_mm.len()));
        }
        if !(self.voxel_mm > 0.0) || self.size < 4 {
            return bad("grid too small".into());
        }
        if self.wall_mm < self.voxel_mm {
            return bad(format!("wall {} mm is thinner than one voxel", self.wall_mm));
        }
        if self.endo_axes_mm.iter().flatten().any(|&v| !(v > 0.0)) {
            return bad("semi-axes must be positive".into());
        }
        if !(self.cut_fraction > -1.0 && self.cut_fraction < 1.0) {
            return bad("cut_fraction must lie in (-1, 1)".into());
        }
        if let Some(s) = &self.scar {
            if !(0.0..1.0).contains(&s.fraction) || s.intensity < 0.0 {
                return bad("scar fraction must lie in [0, 1)".into());
            }
        }
        Ok(())
    }

    fn endo_cut_mm(&self, g: usize) -> f64 {
        self.cut_fraction * self.endo_axes_mm[g][2]
    }

    fn inside(&self, g: usize, p: [f64; 3], grow: f64) -> bool {
        let ax = self.endo_axes_mm[g].map(|v| v + grow);
        if p[2] > self.endo_cut_mm(g) {
            return false;
        }
        (p[0] / ax[0]).powi(2) + (p[1] / ax[1]).powi(2) + (p[2] / ax[2]).powi(2) <= 1.0
    }

    fn in_scar(&self, p: [f64; 3]) -> bool {
        let Some(s) = &self.scar else { return false };
        if s.fraction == 0.0 {
            return false;
        }
        let phi = (p[1].atan2(p[0]).to_degrees() - s.start_deg).rem_euclid(360.0);
        phi < 360.0 * s.fraction
    }

    fn truth(&self) -> PhantomTruth {
        let cavity: Vec<f64> = (0..GATES)
            .map(|g| {
                let [a, b, c] = self.endo_axes_mm[g];
                truncated_ellipsoid_volume(a, b, c, self.endo_cut_mm(g)) / 1000.0
            })
            .collect();
        let myo: Vec<f64> = (0..GATES)
            .map(|g| {
                let [a, b, c] = self.endo_axes_mm[g].map(|v| v + self.wall_mm);
                truncated_ellipsoid_volume(a, b, c, self.endo_cut_mm(g)) / 1000.0 - cavity[g]
            })
            .collect();
        let ed_gate = argmax(&cavity, |a, b| a > b);
        let es_gate = argmax(&cavity, |a, b| a < b);
        let (edv, esv) = (cavity[ed_gate], cavity[es_gate]);
        PhantomTruth {
            cavity_cc: cavity,
            myo_cc: myo,
            edv_cc: edv,
            esv_cc: esv,
            lvef: (edv - esv) / edv,
            ed_gate,
            es_gate,
            scar_burden_pct: self.scar.as_ref().map_or(0.0, |s| 100.0 * s.fraction),
        }
    }
}

fn argmax(v: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    (1..v.len()).fold(0, |best, i| if better(v[i], v[best]) { i } else { best })
}

/// Rasterize masks at voxel centres and draw the count volumes.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let n = spec.size;
    let dims = [n; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gates = Vec::with_capacity(GATES);
    let mut masks: BTreeMap<Structure, Vec<Mask3D>> = Structure::ALL.iter().map(|&s| (s, Vec::new())).collect();
    for g in 0..GATES {
        let mut endo = Mask3D::empty(dims, spec.voxel_mm, Structure::Endocardium)?;
        let mut epi = Mask3D::empty(dims, spec.voxel_mm, Structure::Epicardium)?;
        let mut data = vec![0.0f32; n * n * n];
        let mut i = 0;
        for l in 0..n {
            for w in 0..n {
                for h in 0..n {
                    let p = [l, w, h].map(|v| v as f64);
                    let mm = [0, 1, 2].map(|a| (p[a] - spec.center[a]) * spec.voxel_mm);
                    let in_endo = spec.inside(g, mm, 0.0);
                    let in_epi = spec.inside(g, mm, spec.wall_mm);
                    endo.set(l, w, h, in_endo);
                    epi.set(l, w, h, in_epi);
                    let level = if in_endo {
                        spec.cavity_level
                    } else if in_epi {
                        match &spec.scar {
                            Some(s) if spec.in_scar(mm) => s.intensity,
                            _ => 1.0,
                        }
                    } else {
                        spec.background_level
                    };
                    let mean = level * spec.myo_counts;
                    data[i] = if spec.noise && mean > 0.0 {
                        Poisson::new(mean).expect("positive mean").sample(&mut rng) as f32
                    } else {
                        mean as f32
                    };
                    i += 1;
                }
            }
        }
        let myo = epi.minus(&endo)?.with_structure(Structure::Myocardium);
        gates.push(Volume3D::new(dims, spec.voxel_mm, data)?);
        masks.get_mut(&Structure::Endocardium).expect("all").push(endo);
        masks.get_mut(&Structure::Myocardium).expect("all").push(myo);
        masks.get_mut(&Structure::Epicardium).expect("all").push(epi);
    }
    let severity = severity_for(spec.scar.as_ref().map_or(0.0, |s| s.fraction));
    let study = GatedStudy::new(spec.patient_id.clone(), spec.state, severity, gates)?;
    Ok(Phantom { study, masks, truth: spec.truth() })
}

/// Severity class implied by a scar fraction.
pub fn severity_for(fraction: f64) -> Severity {
    if fraction < 0.1 {
        Severity::NormalOrMild
    } else if fraction < 0.25 {
        Severity::Moderate
    } else {
        Severity::Severe
    }
}

/// `n` varied phantoms, severities dealt in turn so every class is populated.
pub fn phantom_suite(n: usize, seed: u64) -> Vec<PhantomSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let ed = [rng.gen_range(26.0..34.0), rng.gen_range(26.0..34.0), rng.gen_range(44.0..54.0)];
            let ef = rng.gen_range(0.3..0.7);
            let mut s = PhantomSpec::simple(format!("PH{i:03}"), ed, ef);
            s.state = if i % 2 == 0 { StudyState::Rest } else { StudyState::Stress };
            s.cut_fraction = rng.gen_range(0.4..0.6);
            s.center = s.centered();
            s.center[0] += rng.gen_range(-1.0..1.0);
            s.center[1] += rng.gen_range(-1.0..1.0);
            let fraction = match i % 3 {
                0 => {
                    if rng.gen_bool(0.5) {
                        0.0
                    } else {
                        rng.gen_range(0.03..0.08)
                    }
                }
                1 => rng.gen_range(0.12..0.22),
                _ => rng.gen_range(0.28..0.4),
            };
            s.scar = (fraction > 0.0).then(|| ScarSpec {
                fraction,
                intensity: 0.3,
                start_deg: rng.gen_range(0.0..360.0),
            });
            s.noise = true;
            s.seed = rng.gen();
            s
        })
        .collect()
}

/// Write studies, masks, analytic truth and a manifest under `dir`.
pub fn write_phantom_dataset(dir: &Path, specs: &[PhantomSpec]) -> Result<DatasetManifest> {
    let mut studies = Vec::with_capacity(specs.len());
    for spec in specs {
        let ph = generate_phantom(spec)?;
        let rel = PathBuf::from(&spec.patient_id).join(spec.state.as_str());
        let abs = dir.join(&rel);
        fs::create_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
        let mut gates = Vec::with_capacity(GATES);
        for (g, vol) in ph.study.gates().iter().enumerate() {
            let name = format!("gate{g}.vol");
            save_volume(abs.join(&name), vol)?;
            gates.push(rel.join(name));
        }
        let mut masks = BTreeMap::new();
        for (st, list) in &ph.masks {
            let mut paths = Vec::with_capacity(GATES);
            for (g, m) in list.iter().enumerate() {
                let name = format!("gate{g}_{}.msk", st.short_name());
                save_mask(abs.join(&name), m)?;
                paths.push(rel.join(name));
            }
            masks.insert(*st, paths);
        }
        let truth = serde_json::json!({ "spec": spec, "truth": ph.truth });
        let tpath = abs.join("truth.json");
        fs::write(&tpath, serde_json::to_string_pretty(&truth).expect("serialises") + "\n")
            .map_err(|e| Error::io(&tpath, e))?;
        studies.push(StudyEntry {
            patient_id: spec.patient_id.clone(),
            state: spec.state,
            severity: ph.study.severity,
            gates,
            masks,
        });
    }
    let manifest = DatasetManifest::new(dir, studies);
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Read back the analytic truth written next to a study.
pub fn load_truth(study_dir: &Path) -> Result<(PhantomSpec, PhantomTruth)> {
    let path = study_dir.join("truth.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    #[derive(Deserialize)]
    struct File {
        spec: PhantomSpec,
        truth: PhantomTruth,
    }
    let f: File =
        serde_json::from_str(&text).map_err(|e| Error::Metadata { path: path.clone(), message: e.to_string() })?;
    Ok((f.spec, f.truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_volume_limits() {
        let full = truncated_ellipsoid_volume(2.0, 3.0, 4.0, 4.0);
        assert!((full - 4.0 / 3.0 * PI * 24.0).abs() < 1e-9);
        let half = truncated_ellipsoid_volume(2.0, 3.0, 4.0, 0.0);
        assert!((half - full / 2.0).abs() < 1e-9);
    }

    #[test]
    fn programmed_ef() {
        let spec = PhantomSpec::simple("x", [30.0, 30.0, 50.0], 0.6);
        let t = spec.truth();
        assert!((t.lvef - 0.6).abs() < 1e-12);
        assert_eq!((t.ed_gate, t.es_gate), (0, 4));
    }

    #[test]
    fn masks_nest_and_volumes_match() {
        let spec = PhantomSpec::simple("x", [30.0, 30.0, 50.0], 0.5);
        let ph = generate_phantom(&spec).unwrap();
        for g in 0..GATES {
            let endo = &ph.masks[&Structure::Endocardium][g];
            let epi = &ph.masks[&Structure::Epicardium][g];
            let myo = &ph.masks[&Structure::Myocardium][g];
            assert!(endo.data().iter().zip(epi.data()).all(|(&a, &b)| a <= b));
            assert_eq!(myo.count() + endo.count(), epi.count());
            let cc = endo.count() as f64 * spec.voxel_mm.powi(3) / 1000.0;
            let rel = (cc - ph.truth.cavity_cc[g]).abs() / ph.truth.cavity_cc[g];
            assert!(rel < 0.1, "gate {g}: {cc} vs {}", ph.truth.cavity_cc[g]);
        }
    }

    #[test]
    fn thin_wall_rejected() {
        let mut spec = PhantomSpec::simple("x", [30.0, 30.0, 50.0], 0.5);
        spec.wall_mm = 3.0;
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn suite_is_deterministic_and_stratified() {
        let a = phantom_suite(12, 7);
        assert_eq!(a, phantom_suite(12, 7));
        let sev: Vec<Severity> =
            a.iter().map(|s| severity_for(s.scar.as_ref().map_or(0.0, |x| x.fraction))).collect();
        for class in Severity::ALL {
            assert_eq!(sev.iter().filter(|&&s| s == class).count(), 4);
        }
    }
}
