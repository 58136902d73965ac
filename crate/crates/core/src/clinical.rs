//! Cavity and myocardial volumes, ejection fraction, scar burden.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::volume::{index, GatedStudy, Mask3D, StudyState, Volume3D, GATES};
use crate::{Error, Result};

/// Fraction of the in-myocardium maximum below which uptake counts as scar.
pub const SCAR_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalReport {
    pub patient_id: String,
    pub state: StudyState,
    pub edv_cc: f64,
    pub esv_cc: f64,
    pub lvef: f64,
    pub ed_gate: usize,
    pub es_gate: usize,
    pub cavity_cc: Vec<f64>,
    pub myo_volume_cc: Vec<f64>,
    pub scar_burden_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ejection {
    pub edv_cc: f64,
    pub esv_cc: f64,
    pub lvef: f64,
    pub ed_gate: usize,
    pub es_gate: usize,
}

pub fn mask_volume_cc(mask: &Mask3D) -> f64 {
    mask.count() as f64 * mask.voxel_mm().powi(3) / 1000.0
}

/// Mask with every background pocket not 6-connected to the border filled.
pub fn fill_holes(mask: &Mask3D) -> Mask3D {
    let d = mask.dims();
    let n = mask.len();
    let mut outside = vec![false; n];
    let mut queue = VecDeque::new();
    let data = mask.data();
    for l in 0..d[0] {
        for w in 0..d[1] {
            for h in 0..d[2] {
                let border = l == 0 || w == 0 || h == 0 || l + 1 == d[0] || w + 1 == d[1] || h + 1 == d[2];
                let i = index(d, l, w, h);
                if border && data[i] == 0 {
                    outside[i] = true;
                    queue.push_back([l, w, h]);
                }
            }
        }
    }
    while let Some(p) = queue.pop_front() {
        for a in 0..3 {
            for step in [-1i64, 1] {
                let q = p[a] as i64 + step;
                if q < 0 || q >= d[a] as i64 {
                    continue;
                }
                let mut r = p;
                r[a] = q as usize;
                let j = index(d, r[0], r[1], r[2]);
                if !outside[j] && data[j] == 0 {
                    outside[j] = true;
                    queue.push_back(r);
                }
            }
        }
    }
    let mut out = mask.clone();
    for (i, o) in outside.iter().enumerate() {
        if !o {
            let (l, w, h) = (i / (d[1] * d[2]), (i / d[2]) % d[1], i % d[2]);
            out.set(l, w, h, true);
        }
    }
    out
}

/// Cavity volume per gate (filled endocardial masks).
pub fn cavity_curve(endo_masks: &[Mask3D]) -> Result<Vec<f64>> {
    check_gates(endo_masks)?;
    endo_masks
        .iter()
        .enumerate()
        .map(|(g, m)| {
            if m.count() == 0 {
                Err(Error::Degenerate(format!("empty endocardial mask at gate {g}")))
            } else {
                Ok(mask_volume_cc(&fill_holes(m)))
            }
        })
        .collect()
}

/// EDV and ESV as the largest and smallest cavity volume.
pub fn ef_from_volumes(volumes: &[f64]) -> Result<Ejection> {
    if volumes.is_empty() || volumes.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("volumes must be finite and non-negative".into()));
    }
    let mut ed_gate = 0;
    let mut es_gate = 0;
    for (g, &v) in volumes.iter().enumerate() {
        if v > volumes[ed_gate] {
            ed_gate = g;
        }
        if v < volumes[es_gate] {
            es_gate = g;
        }
    }
    let (edv, esv) = (volumes[ed_gate], volumes[es_gate]);
    if edv == 0.0 {
        return Err(Error::Degenerate("zero end-diastolic volume".into()));
    }
    Ok(Ejection { edv_cc: edv, esv_cc: esv, lvef: (edv - esv) / edv, ed_gate, es_gate })
}

pub fn ef_from_gates(endo_masks: &[Mask3D]) -> Result<Ejection> {
    ef_from_volumes(&cavity_curve(endo_masks)?)
}

/// Myocardial volume per gate.
pub fn volume_curve(myo_masks: &[Mask3D]) -> Result<Vec<f64>> {
    check_gates(myo_masks)?;
    Ok(myo_masks.iter().map(mask_volume_cc).collect())
}

/// Percentage of myocardial voxels below half of the in-myocardium maximum.
pub fn scar_burden(vol: &Volume3D, myo: &Mask3D) -> Result<f64> {
    if vol.dims() != myo.dims() {
        return Err(Error::Shape(format!("volume {:?} vs mask {:?}", vol.dims(), myo.dims())));
    }
    let inside: Vec<f32> =
        vol.data().iter().zip(myo.data()).filter(|(_, &m)| m != 0).map(|(&v, _)| v).collect();
    if inside.is_empty() {
        return Err(Error::Degenerate("empty myocardium".into()));
    }
    let max = inside.iter().copied().fold(f32::MIN, f32::max) as f64;
    let low = inside.iter().filter(|&&v| (v as f64) < SCAR_THRESHOLD * max).count();
    Ok(100.0 * low as f64 / inside.len() as f64)
}

fn check_gates(masks: &[Mask3D]) -> Result<()> {
    if masks.len() != GATES {
        return Err(Error::InvalidArgument(format!("{} gates, expected {GATES}", masks.len())));
    }
    let d = masks[0].dims();
    if masks.iter().any(|m| m.dims() != d) {
        return Err(Error::Shape("gate masks differ in dims".into()));
    }
    Ok(())
}

/// Full report for one study; scar burden is averaged over gates.
pub fn clinical_report(study: &GatedStudy, endo_masks: &[Mask3D], myo_masks: &[Mask3D]) -> Result<ClinicalReport> {
    let cavity = cavity_curve(endo_masks)?;
    let ej = ef_from_volumes(&cavity)?;
    let myo_volume_cc = volume_curve(myo_masks)?;
    let mut scar = 0.0;
    for (vol, myo) in study.gates().iter().zip(myo_masks) {
        scar += scar_burden(vol, myo)?;
    }
    Ok(ClinicalReport {
        patient_id: study.patient_id.clone(),
        state: study.state,
        edv_cc: ej.edv_cc,
        esv_cc: ej.esv_cc,
        lvef: ej.lvef,
        ed_gate: ej.ed_gate,
        es_gate: ej.es_gate,
        cavity_cc: cavity,
        myo_volume_cc,
        scar_burden_pct: scar / GATES as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Structure;

    #[test]
    fn voxel_volumes() {
        let mut m = Mask3D::empty([10, 10, 10], 6.4, Structure::Endocardium).unwrap();
        m.set(1, 1, 1, true);
        assert!((mask_volume_cc(&m) - 0.262144).abs() < 1e-12);
        let full = Mask3D::new([10, 10, 10], 6.4, Structure::Endocardium, vec![1; 1000]).unwrap();
        assert!((mask_volume_cc(&full) - 262.144).abs() < 1e-9);
    }

    #[test]
    fn ef_example() {
        let e = ef_from_volumes(&[100.0, 95.0, 80.0, 60.0, 40.0, 50.0, 70.0, 90.0]).unwrap();
        assert_eq!((e.edv_cc, e.esv_cc, e.ed_gate, e.es_gate), (100.0, 40.0, 0, 4));
        assert!((e.lvef - 0.6).abs() < 1e-12);
        let flat = ef_from_volumes(&[5.0; 8]).unwrap();
        assert_eq!((flat.lvef, flat.ed_gate, flat.es_gate), (0.0, 0, 0));
    }

    #[test]
    fn hollow_shell_is_filled() {
        let mut m = Mask3D::empty([7, 7, 7], 1.0, Structure::Endocardium).unwrap();
        for l in 1..6 {
            for w in 1..6 {
                for h in 1..6 {
                    if [l, w, h].iter().any(|&v| v == 1 || v == 5) {
                        m.set(l, w, h, true);
                    }
                }
            }
        }
        assert_eq!(fill_holes(&m).count(), 125);
    }

    #[test]
    fn scar_examples() {
        let myo = Mask3D::new([2, 2, 2], 6.4, Structure::Myocardium, vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        let uniform = Volume3D::new([2, 2, 2], 6.4, vec![3.0; 8]).unwrap();
        assert_eq!(scar_burden(&uniform, &myo).unwrap(), 0.0);
        let half = Volume3D::new([2, 2, 2], 6.4, vec![0.4, 1.0, 0.4, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(scar_burden(&half, &myo).unwrap(), 50.0);
        let empty = Mask3D::empty([2, 2, 2], 6.4, Structure::Myocardium).unwrap();
        assert!(scar_burden(&uniform, &empty).is_err());
    }
}
