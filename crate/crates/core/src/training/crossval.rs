use std::collections::{BTreeMap, BTreeSet};
use std::ops::ControlFlow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train_observed, NetConfigs, Sample, TrainConfig, TrainRecord, TrainedModel, Variant};
use crate::clinical::{clinical_report, ClinicalReport};
use crate::dp_prior::{generate_prior_with, DpParams, Priors};
use crate::metrics::{dsc, hausdorff_mm, MeanStd};
use crate::volume::{stratified_folds, DatasetManifest, GatedStudy, Mask3D, Severity, StudyState, Structure};
use crate::{par, Error, Result};

/// A gated study with its per-gate ground truth and DP priors.
#[derive(Debug, Clone)]
pub struct Case {
    pub study: GatedStudy,
    pub masks: BTreeMap<Structure, Vec<Mask3D>>,
    pub priors: Option<Vec<Priors>>,
}

impl Case {
    /// Bundle a study with its masks; DP priors are generated when `dp` is given.
    pub fn new(study: GatedStudy, masks: BTreeMap<Structure, Vec<Mask3D>>, dp: Option<&DpParams>) -> Result<Self> {
        for (s, m) in &masks {
            if m.len() != study.gates().len() {
                return Err(Error::InvalidArgument(format!("{} {:?} masks for {} gates", m.len(), s, study.gates().len())));
            }
        }
        let priors = match dp {
            Some(p) => Some(par::map_slice(study.gates(), |g| generate_prior_with(g, p)).into_iter().collect::<Result<_>>()?),
            None => None,
        };
        Ok(Case { study, masks, priors })
    }

    fn masks_of(&self, s: Structure) -> Result<&[Mask3D]> {
        self.masks
            .get(&s)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("study {} has no {:?} masks", self.study.patient_id, s)))
    }

    /// One sample per gate for `structure`.
    pub fn samples(&self, structure: Structure) -> Result<Vec<Sample<'_>>> {
        let masks = self.masks_of(structure)?;
        Ok(self
            .study
            .gates()
            .iter()
            .zip(masks)
            .enumerate()
            .map(|(g, (image, target))| Sample {
                image,
                target,
                prior: self.priors.as_ref().map(|p| p[g].get(structure)),
            })
            .collect())
    }
}

/// Load every study in the manifest; DP priors are generated when `dp` is given.
pub fn load_cases(manifest: &DatasetManifest, dp: Option<&DpParams>) -> Result<Vec<Case>> {
    let mut cases = Vec::with_capacity(manifest.studies.len());
    for i in 0..manifest.studies.len() {
        let study = manifest.load_study(i)?;
        let mut masks = BTreeMap::new();
        for &s in manifest.studies[i].masks.keys() {
            masks.insert(s, manifest.load_masks(i, s)?);
        }
        cases.push(Case::new(study, masks, dp)?);
    }
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossvalConfig {
    pub k: usize,
    /// Run only the first folds; `None` runs all `k`.
    pub max_folds: Option<usize>,
    /// Training patients per fold held out for validation.
    pub val_patients: usize,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig { k: 5, max_folds: None, val_patients: 1 }
    }
}

/// Everything a cross-validated experiment needs besides the data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CrossvalPlan {
    pub crossval: CrossvalConfig,
    pub train: TrainConfig,
    pub nets: NetConfigs,
    pub dp: DpParams,
    pub variants: Vec<Variant>,
    pub structures: Vec<Structure>,
}

/// Per-volume segmentation scores on a test fold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseMetric {
    pub fold: usize,
    pub patient_id: String,
    pub state: StudyState,
    pub severity: Severity,
    pub gate: usize,
    pub structure: Structure,
    pub variant: Variant,
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd_mm: Option<f64>,
}

/// Clinical parameters from predicted and from ground-truth masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalRow {
    pub fold: usize,
    pub variant: Variant,
    pub measured: ClinicalReport,
    pub reference: ClinicalReport,
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub variant: Variant,
    pub structure: Structure,
    pub records: Vec<TrainRecord>,
    pub model: TrainedModel,
}

#[derive(Debug, Clone, Default)]
pub struct CrossvalReport {
    pub metrics: Vec<CaseMetric>,
    pub clinical: Vec<ClinicalRow>,
    pub runs: Vec<FoldRun>,
}

/// One row of the method-comparison table: a metric for one method across structures.
#[derive(Debug, Clone, PartialEq)]
pub struct Table2Row {
    pub metric: &'static str,
    pub variant: Variant,
    /// Endocardium, myocardium, epicardium.
    pub cells: [Option<MeanStd>; 3],
}

/// Pool per-volume scores into mean ± std per (metric, variant, structure).
pub fn table2(metrics: &[CaseMetric]) -> Vec<Table2Row> {
    let variants: BTreeSet<Variant> = metrics.iter().map(|m| m.variant).collect();
    let mut rows = Vec::new();
    for metric in ["DSC", "HD"] {
        for &variant in &variants {
            let cells = Structure::ALL.map(|s| {
                let xs: Vec<f64> = metrics
                    .iter()
                    .filter(|m| m.variant == variant && m.structure == s)
                    .filter_map(|m| if metric == "DSC" { Some(m.dsc) } else { m.hd_mm })
                    .collect();
                (!xs.is_empty()).then(|| MeanStd::of(&xs))
            });
            rows.push(Table2Row { metric, variant, cells });
        }
    }
    rows
}

/// Clinical reports of `cases` from the two models' masks and from ground truth.
pub fn clinical_rows(cases: &[&Case], endo: &TrainedModel, myo: &TrainedModel) -> Result<Vec<(ClinicalReport, ClinicalReport)>> {
    cases
        .iter()
        .map(|c| {
            let seg = |m: &TrainedModel| -> Result<Vec<Mask3D>> {
                let samples = c.samples(m.structure)?;
                par::map_slice(&samples, |s| m.segment(s.image, s.prior)).into_iter().collect()
            };
            let measured = clinical_report(&c.study, &seg(endo)?, &seg(myo)?)?;
            let reference =
                clinical_report(&c.study, c.masks_of(Structure::Endocardium)?, c.masks_of(Structure::Myocardium)?)?;
            Ok((measured, reference))
        })
        .collect()
}

pub fn run_crossval(manifest: &DatasetManifest, plan: &CrossvalPlan) -> Result<CrossvalReport> {
    let need_prior = plan.variants.iter().any(|v| v.needs_prior());
    let cases = load_cases(manifest, need_prior.then_some(&plan.dp))?;
    run_crossval_cases(&cases, plan, None)
}

fn gather<'a>(cases: &[&'a Case], structure: Structure) -> Result<Vec<Sample<'a>>> {
    Ok(cases.iter().map(|c| c.samples(structure)).collect::<Result<Vec<_>>>()?.concat())
}

fn patients(cases: &[Case]) -> Vec<(String, Severity)> {
    let mut out: Vec<(String, Severity)> = Vec::new();
    for c in cases {
        if !out.iter().any(|(id, _)| *id == c.study.patient_id) {
            out.push((c.study.patient_id.clone(), c.study.severity));
        }
    }
    out
}

/// Cross-validation over loaded cases. Fold models and checkpoints go under
/// `out/fold{f}/{variant}_{structure}` when `out` is given.
pub fn run_crossval_cases(cases: &[Case], plan: &CrossvalPlan, out: Option<&Path>) -> Result<CrossvalReport> {
    let cv = &plan.crossval;
    let folds = stratified_folds(&patients(cases), cv.k, plan.train.seed)?;
    let n_folds = cv.max_folds.unwrap_or(cv.k).min(cv.k);
    let mut report = CrossvalReport::default();
    for (f, fold) in folds.iter().take(n_folds).enumerate() {
        if fold.train.len() <= cv.val_patients {
            return Err(Error::InvalidArgument(format!("fold {f} has too few training patients")));
        }
        let (fit_ids, val_ids) = fold.train.split_at(fold.train.len() - cv.val_patients);
        let pick = |ids: &[String]| -> Vec<&Case> { cases.iter().filter(|c| ids.contains(&c.study.patient_id)).collect() };
        let (fit, val, test) = (pick(fit_ids), pick(val_ids), pick(&fold.test));
        for &variant in &plan.variants {
            let mut fitted: BTreeMap<Structure, TrainedModel> = BTreeMap::new();
            for &structure in &plan.structures {
                let cfg = TrainConfig { variant, structure, seed: plan.train.seed.wrapping_add(f as u64), ..plan.train.clone() };
                let dir = out.map(|o| o.join(format!("fold{f}")).join(format!("{variant}_{}", structure.short_name())));
                let outcome = train_observed(&gather(&fit, structure)?, &gather(&val, structure)?, &cfg, &plan.nets, dir.as_deref(), &mut |_| ControlFlow::Continue(()))?;
                if let Some(d) = &dir {
                    outcome.model.save(d)?;
                }
                for c in &test {
                    let samples = c.samples(structure)?;
                    let scores = par::map_slice(&samples, |s| -> Result<(f64, Option<f64>)> {
                        let m = outcome.model.segment(s.image, s.prior)?;
                        let hd = if m.count() > 0 && s.target.count() > 0 { Some(hausdorff_mm(&m, s.target)?) } else { None };
                        Ok((dsc(&m, s.target)?, hd))
                    });
                    for (gate, r) in scores.into_iter().enumerate() {
                        let (d, hd_mm) = r?;
                        report.metrics.push(CaseMetric {
                            fold: f,
                            patient_id: c.study.patient_id.clone(),
                            state: c.study.state,
                            severity: c.study.severity,
                            gate,
                            structure,
                            variant,
                            dsc: d,
                            hd_mm,
                        });
                    }
                }
                fitted.insert(structure, outcome.model.clone());
                report.runs.push(FoldRun { fold: f, variant, structure, records: outcome.records, model: outcome.model });
            }
            if let (Some(endo), Some(myo)) = (fitted.get(&Structure::Endocardium), fitted.get(&Structure::Myocardium)) {
                for (measured, reference) in clinical_rows(&test, endo, myo)? {
                    report.clinical.push(ClinicalRow { fold: f, variant, measured, reference });
                }
            }
        }
    }
    Ok(report)
}
