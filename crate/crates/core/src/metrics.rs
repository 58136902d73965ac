//! Overlap, surface distance, and agreement statistics.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::net::ProbMap;
use crate::volume::{Mask3D, Structure};
use crate::{Error, Result};

/// Dice overlap `2|P ∩ G| / (|P| + |G|)`. Two empty masks score 1.
pub fn dsc(pred: &Mask3D, gt: &Mask3D) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("dsc of {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    Ok(dice(pred.data().iter().map(|&v| v != 0), gt.data()))
}

/// Dice of a probability map binarized at `threshold` (`p >= threshold`).
pub fn dsc_prob(pred: &ProbMap, gt: &Mask3D, threshold: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("dsc of {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    Ok(dice(pred.values().iter().map(|&v| v >= threshold), gt.data()))
}

fn dice(pred: impl Iterator<Item = bool>, gt: &[u8]) -> f64 {
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, &g) in pred.zip(gt) {
        let g = g != 0;
        np += p as usize;
        ng += g as usize;
        inter += (p && g) as usize;
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

const FAR: f64 = 1e12;

/// 1D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in voxels²) from every voxel to the
/// nearest foreground voxel of `mask`.
pub fn squared_distance_to(mask: &Mask3D) -> Vec<f64> {
    let d = mask.dims();
    let mut g: Vec<f64> = mask.data().iter().map(|&v| if v != 0 { 0.0 } else { FAR }).collect();
    let longest = *d.iter().max().expect("3 dims");
    let (mut f, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    let stride = [d[1] * d[2], d[2], 1];
    for axis in 0..3 {
        let n = d[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..d[others[0]] {
            for j in 0..d[others[1]] {
                let base = i * stride[others[0]] + j * stride[others[1]];
                for t in 0..n {
                    f[t] = g[base + t * stride[axis]];
                }
                edt_1d(&f[..n], &mut out[..n], &mut v[..n], &mut z[..n + 1]);
                for t in 0..n {
                    g[base + t * stride[axis]] = out[t].min(FAR);
                }
            }
        }
    }
    g
}

/// Directed distance `max_{a ∈ A} min_{b ∈ B} ‖a − b‖`, in mm.
pub fn directed_hausdorff_mm(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    check_pair(a, b)?;
    let dist = squared_distance_to(b);
    let worst = a.data().iter().zip(&dist).filter(|(&v, _)| v != 0).map(|(_, &d)| d).fold(0.0, f64::max);
    Ok(worst.sqrt() * a.voxel_mm())
}

/// Symmetric Hausdorff distance on voxel centres, in mm.
pub fn hausdorff_mm(pred: &Mask3D, gt: &Mask3D) -> Result<f64> {
    Ok(directed_hausdorff_mm(pred, gt)?.max(directed_hausdorff_mm(gt, pred)?))
}

fn check_pair(a: &Mask3D, b: &Mask3D) -> Result<()> {
    if a.dims() != b.dims() || a.voxel_mm() != b.voxel_mm() {
        return Err(Error::Shape(format!(
            "masks {:?}@{} vs {:?}@{}",
            a.dims(),
            a.voxel_mm(),
            b.dims(),
            b.voxel_mm()
        )));
    }
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::Degenerate("hausdorff distance of an empty mask".into()));
    }
    Ok(())
}

/// Signed relative error in percent.
pub fn relative_error(measured: f64, gt_value: f64) -> Result<f64> {
    if gt_value == 0.0 {
        return Err(Error::InvalidArgument("relative error against a zero reference".into()));
    }
    Ok((measured - gt_value) / gt_value * 100.0)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample Pearson correlation and its two-sided p-value.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch { expected: xs.len(), found: ys.len() });
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("pearson needs at least 3 pairs, got {n}")));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson of a constant series".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok((r, p))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// `(mean, difference)` per pair.
    pub points: Vec<(f64, f64)>,
}

/// Differences `x − y`, their mean, and `bias ± 1.96·sd` (sample sd).
pub fn bland_altman(xs: &[f64], ys: &[f64]) -> Result<BlandAltman> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch { expected: xs.len(), found: ys.len() });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("bland-altman needs at least 2 pairs".into()));
    }
    let points: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(x, y)| ((x + y) / 2.0, x - y)).collect();
    let diffs: Vec<f64> = points.iter().map(|p| p.1).collect();
    let s = MeanStd::of(&diffs);
    Ok(BlandAltman { bias: s.mean, sd: s.std, lower: s.mean - 1.96 * s.std, upper: s.mean + 1.96 * s.std, points })
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let m = mean(xs);
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean: m, std }
    }
}

/// Segmentation summary for one structure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureSummary {
    pub structure: Structure,
    pub dsc: MeanStd,
    pub hd_mm: MeanStd,
}

/// Agreement of a clinical parameter with its reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementSummary {
    pub parameter: String,
    pub pearson_r: f64,
    pub p_value: f64,
    pub bland_altman: BlandAltman,
    pub relative_error_pct: MeanStd,
}

impl AgreementSummary {
    pub fn new(parameter: impl Into<String>, measured: &[f64], reference: &[f64]) -> Result<Self> {
        let (pearson_r, p_value) = pearson(measured, reference)?;
        let rel = measured.iter().zip(reference).map(|(&m, &g)| relative_error(m, g)).collect::<Result<Vec<_>>>()?;
        Ok(AgreementSummary {
            parameter: parameter.into(),
            pearson_r,
            p_value,
            bland_altman: bland_altman(measured, reference)?,
            relative_error_pct: MeanStd::of(&rel),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub structures: Vec<StructureSummary>,
    pub agreement: Vec<AgreementSummary>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(points: &[[usize; 3]]) -> Mask3D {
        let mut m = Mask3D::empty([5, 5, 5], 6.4, Structure::Myocardium).unwrap();
        for p in points {
            m.set(p[0], p[1], p[2], true);
        }
        m
    }

    #[test]
    fn dsc_examples() {
        let a = mask(&[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]);
        let b = mask(&[[0, 0, 0], [0, 0, 1]]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert!((dsc(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc(&b, &mask(&[[4, 4, 4]])).unwrap(), 0.0);
        assert_eq!(dsc(&mask(&[]), &mask(&[])).unwrap(), 1.0);
        assert_eq!(dsc(&mask(&[]), &b).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask(&[[0, 0, 0]]);
        let b = mask(&[[3, 4, 0]]);
        assert_eq!(hausdorff_mm(&a, &a).unwrap(), 0.0);
        assert!((hausdorff_mm(&a, &b).unwrap() - 32.0).abs() < 1e-12);
        assert!(matches!(hausdorff_mm(&a, &mask(&[])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn relative_error_examples() {
        assert!((relative_error(169.58, 170.75).unwrap() - (-0.685)).abs() < 5e-4);
        assert!((relative_error(110.0, 100.0).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(relative_error(3.0, 3.0).unwrap(), 0.0);
        assert!(relative_error(1.0, 0.0).is_err());
    }

    #[test]
    fn pearson_extremes() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let (r, p) = pearson(&xs, &xs.map(|x| 2.0 * x)).unwrap();
        assert_eq!((r, p), (1.0, 0.0));
        let (r, _) = pearson(&xs, &xs.map(|x| -x)).unwrap();
        assert_eq!(r, -1.0);
        assert!(pearson(&xs, &[1.0; 4]).is_err());
    }

    #[test]
    fn bland_altman_offset() {
        let b = bland_altman(&[3.0, 4.0, 5.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((b.bias, b.lower, b.upper), (2.0, 2.0, 2.0));
        assert!(bland_altman(&[1.0], &[1.0, 2.0]).is_err());
    }
}
