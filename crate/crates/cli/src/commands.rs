use std::collections::BTreeMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spectlv_core::clinical::{clinical_report, ClinicalReport};
use spectlv_core::dp_prior::{generate_prior_with, Priors};
use spectlv_core::metrics::{dsc, hausdorff_mm, AgreementSummary, MeanStd};
use spectlv_core::phantom::{phantom_suite, write_phantom_dataset};
use spectlv_core::training::{
    run_crossval_cases, table2, train_observed, Case, CaseMetric, CrossvalPlan, Sample, TrainedModel, Variant,
};
use spectlv_core::volume::{
    load_mask, load_prior, save_mask, save_prior, save_volume, CropWindow, DatasetManifest, Mask3D, Severity,
    StudyEntry, StudyState, Structure, Volume3D,
};
use spectlv_core::{par, Error};

use crate::config::GlobalConfig;
use crate::error::{CliError, CliResult};
use crate::tables::*;
use crate::{Cli, Command, GlobalArgs, StructureArg, VariantArg};

struct Ctx<'a> {
    args: &'a GlobalArgs,
    cfg: GlobalConfig,
    out: PathBuf,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let args = &cli.global;
    let mut cfg = match &args.config {
        Some(p) => GlobalConfig::load(p)?,
        None => GlobalConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let cfg = cfg.finalize()?;
    let out = args.out.clone().ok_or_else(|| CliError::Usage("--out DIR is required".into()))?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let ctx = Ctx { args, cfg, out };
    let name = match &cli.command {
        Command::Prepare { input } => prepare(&ctx, input).map(|_| "prepare"),
        Command::Prior => prior(&ctx).map(|_| "prior"),
        Command::Phantom { n } => phantom(&ctx, *n).map(|_| "phantom"),
        Command::Train => train(&ctx).map(|_| "train"),
        Command::Predict { model } => predict(&ctx, model).map(|_| "predict"),
        Command::Eval { predictions } => eval(&ctx, predictions).map(|_| "eval"),
        Command::Clinical { predictions } => clinical(&ctx, predictions).map(|_| "clinical"),
        Command::Crossval => crossval(&ctx).map(|_| "crossval"),
        Command::Report { input } => report(&ctx, input).map(|_| "report"),
    }?;
    write_run_manifest(&ctx, name)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    config_sha256: String,
    seed: u64,
    parallel: bool,
    config: &'a GlobalConfig,
}

fn write_run_manifest(ctx: &Ctx, command: &str) -> CliResult<()> {
    let m = RunManifest {
        tool: "spectlv",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: ctx.cfg.hash(),
        seed: ctx.cfg.seed,
        parallel: par::is_parallel(),
        config: &ctx.cfg,
    };
    write_json(&ctx.out.join("run.json"), &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl Ctx<'_> {
    fn dataset(&self) -> CliResult<DatasetManifest> {
        let path = self.args.dataset.as_ref().or(self.cfg.paths.dataset.as_ref()).ok_or_else(|| {
            CliError::Missing("no dataset manifest; pass --dataset or set paths.dataset".into())
        })?;
        Ok(DatasetManifest::load(path)?)
    }

    fn priors_dir(&self) -> Option<&PathBuf> {
        self.args.priors.as_ref().or(self.cfg.paths.priors.as_ref())
    }

    fn variants(&self) -> Vec<Variant> {
        match self.args.variant {
            None => vec![self.cfg.train.variant],
            Some(VariantArg::All) => Variant::ALL.to_vec(),
            Some(VariantArg::Dp) => vec![Variant::Dp],
            Some(VariantArg::Vnet) => vec![Variant::VNet],
            Some(VariantArg::Mcvnet) => vec![Variant::McVNet],
            Some(VariantArg::Dpstvnet) => vec![Variant::DpStVNet],
        }
    }

    fn structures(&self) -> Vec<Structure> {
        match self.args.structure {
            None => vec![self.cfg.train.structure],
            Some(StructureArg::All) => Structure::ALL.to_vec(),
            Some(StructureArg::Endo) => vec![Structure::Endocardium],
            Some(StructureArg::Myo) => vec![Structure::Myocardium],
            Some(StructureArg::Epi) => vec![Structure::Epicardium],
        }
    }

    fn single<T: Copy>(&self, xs: Vec<T>, what: &str) -> CliResult<T> {
        match xs.as_slice() {
            [x] => Ok(*x),
            _ => Err(CliError::Usage(format!("{what} needs a single {what}, not `all`"))),
        }
    }
}

fn study_dir(e: &StudyEntry) -> PathBuf {
    PathBuf::from(&e.patient_id).join(e.state.as_str())
}

fn prior_path(root: &Path, e: &StudyEntry, gate: usize, s: Structure) -> PathBuf {
    root.join(study_dir(e)).join(format!("gate{gate}_{}.prior.msk", s.short_name()))
}

fn mask_path(root: &Path, e: &StudyEntry, gate: usize, s: Structure) -> PathBuf {
    root.join(study_dir(e)).join(format!("gate{gate}_{}.msk", s.short_name()))
}

fn prepare(ctx: &Ctx, input: &Path) -> CliResult<()> {
    let raw = DatasetManifest::load(input)?;
    let mut studies = Vec::with_capacity(raw.studies.len());
    for (i, e) in raw.studies.iter().enumerate() {
        let study = raw.load_study(i)?;
        // one window per study keeps the gates registered
        let g0 = &study.gates()[0];
        let mut sum = vec![0.0f32; g0.len()];
        for g in study.gates() {
            sum.iter_mut().zip(g.data()).for_each(|(s, v)| *s += v);
        }
        let win = CropWindow::locate(&Volume3D::new(g0.dims(), g0.voxel_mm(), sum)?, ctx.cfg.prepare.long_axis)?;
        let rel = study_dir(e);
        let dir = ctx.out.join(&rel);
        let mut entry = StudyEntry { gates: Vec::new(), masks: BTreeMap::new(), ..e.clone() };
        for (g, vol) in study.gates().iter().enumerate() {
            let name = format!("gate{g}.vol");
            save_volume(dir.join(&name), &win.crop(vol)?)?;
            entry.gates.push(rel.join(name));
        }
        for &s in e.masks.keys() {
            let mut paths = Vec::new();
            for (g, m) in raw.load_masks(i, s)?.iter().enumerate() {
                let name = format!("gate{g}_{}.msk", s.short_name());
                save_mask(dir.join(&name), &win.crop_mask(m)?)?;
                paths.push(rel.join(name));
            }
            entry.masks.insert(s, paths);
        }
        studies.push(entry);
    }
    DatasetManifest::new(&ctx.out, studies).save(ctx.out.join("manifest.json"))?;
    Ok(())
}

fn prior(ctx: &Ctx) -> CliResult<()> {
    let m = ctx.dataset()?;
    for (i, e) in m.studies.iter().enumerate() {
        let study = m.load_study(i)?;
        let priors = par::map_slice(study.gates(), |g| generate_prior_with(g, &ctx.cfg.dp_prior));
        for (g, p) in priors.into_iter().enumerate() {
            let p = p?;
            for s in Structure::ALL {
                let path = prior_path(&ctx.out, e, g, s);
                if let Some(d) = path.parent() {
                    fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
                }
                save_prior(&path, p.get(s))?;
            }
        }
    }
    write_json(&ctx.out.join("dp_prior.json"), &ctx.cfg.dp_prior)
}

fn phantom(ctx: &Ctx, n: Option<usize>) -> CliResult<()> {
    let n = n.unwrap_or(ctx.cfg.phantom.n);
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    write_phantom_dataset(&ctx.out, &phantom_suite(n, ctx.cfg.seed))?;
    Ok(())
}

fn load_disk_priors(dir: &Path, e: &StudyEntry) -> CliResult<Vec<Priors>> {
    (0..spectlv_core::volume::GATES)
        .map(|g| {
            let get = |s| -> CliResult<_> {
                let p = prior_path(dir, e, g, s);
                if !p.exists() {
                    return Err(CliError::Core(Error::MissingPriors(format!("{} not found", p.display()))));
                }
                Ok(load_prior(p)?)
            };
            Ok(Priors { endo: get(Structure::Endocardium)?, myo: get(Structure::Myocardium)?, epi: get(Structure::Epicardium)? })
        })
        .collect()
}

/// Load studies with masks, attaching disk priors when `need_priors`.
fn cases(ctx: &Ctx, m: &DatasetManifest, need_priors: bool) -> CliResult<Vec<Case>> {
    let dir = if need_priors {
        Some(ctx.priors_dir().ok_or_else(|| {
            CliError::Core(Error::MissingPriors("this variant needs DP priors; run `prior` and pass --priors".into()))
        })?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(m.studies.len());
    for (i, e) in m.studies.iter().enumerate() {
        let mut masks = BTreeMap::new();
        for &s in e.masks.keys() {
            masks.insert(s, m.load_masks(i, s)?);
        }
        let priors = dir.map(|d| load_disk_priors(d, e)).transpose()?;
        out.push(Case { study: m.load_study(i)?, masks, priors });
    }
    Ok(out)
}

fn train(ctx: &Ctx) -> CliResult<()> {
    let variant = ctx.single(ctx.variants(), "variant")?;
    let structure = ctx.single(ctx.structures(), "structure")?;
    if variant == Variant::Dp {
        return Ok(TrainedModel::dp(structure).save(&ctx.out.join("model"))?);
    }
    let m = ctx.dataset()?;
    let cases = cases(ctx, &m, variant.needs_prior())?;
    let patients = m.patients();
    let nval = ctx.cfg.crossval.val_patients.min(patients.len().saturating_sub(1));
    let val_ids: Vec<&String> = patients[patients.len() - nval..].iter().map(|(id, _)| id).collect();
    let (mut fit, mut val): (Vec<Sample>, Vec<Sample>) = (Vec::new(), Vec::new());
    for c in &cases {
        let s = c.samples(structure)?;
        if val_ids.contains(&&c.study.patient_id) {
            val.extend(s);
        } else {
            fit.extend(s);
        }
    }
    let cfg = spectlv_core::training::TrainConfig { variant, structure, ..ctx.cfg.train.clone() };
    let outcome = train_observed(&fit, &val, &cfg, &ctx.cfg.nets(), Some(&ctx.out.join("checkpoints")), &mut |_| ControlFlow::Continue(()))?;
    outcome.model.save(&ctx.out.join("model"))?;
    let rows: Vec<TrainLogCsv> = outcome.records.iter().map(TrainLogCsv::from).collect();
    write_csv(&ctx.out.join("train_log.csv"), TRAIN_LOG_HEADER, &rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionIndex {
    /// Variant that produced each structure.
    structures: BTreeMap<Structure, Variant>,
}

fn predict(ctx: &Ctx, model_dirs: &[PathBuf]) -> CliResult<()> {
    let models = model_dirs.iter().map(|d| TrainedModel::load(d)).collect::<Result<Vec<_>, _>>()?;
    let mut index = PredictionIndex { structures: BTreeMap::new() };
    for mo in &models {
        if index.structures.insert(mo.structure, mo.variant).is_some() {
            return Err(CliError::Usage(format!("two models for {:?}", mo.structure)));
        }
    }
    let m = ctx.dataset()?;
    let need = models.iter().any(|mo| mo.variant.needs_prior());
    let priors_dir = if need {
        Some(ctx.priors_dir().ok_or_else(|| {
            CliError::Core(Error::MissingPriors("a model needs DP priors; pass --priors".into()))
        })?)
    } else {
        None
    };
    for (i, e) in m.studies.iter().enumerate() {
        let study = m.load_study(i)?;
        let priors = priors_dir.map(|d| load_disk_priors(d, e)).transpose()?;
        for mo in &models {
            let masks = par::map_range(study.gates().len(), |g| {
                mo.segment_at(&study.gates()[g], priors.as_ref().map(|p| p[g].get(mo.structure)), ctx.cfg.metrics.threshold)
            });
            for (g, mask) in masks.into_iter().enumerate() {
                let path = mask_path(&ctx.out, e, g, mo.structure);
                if let Some(d) = path.parent() {
                    fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
                }
                save_mask(&path, &mask?)?;
            }
        }
    }
    write_json(&ctx.out.join("predictions.json"), &index)
}

fn load_predictions(dir: &Path) -> CliResult<PredictionIndex> {
    let p = dir.join("predictions.json");
    if !p.exists() {
        return Err(CliError::Missing(format!("{} not found; run `predict` first", p.display())));
    }
    read_json(&p)
}

fn metric_row(m: &CaseMetric) -> MetricRow {
    MetricRow {
        fold: Some(m.fold),
        patient_id: m.patient_id.clone(),
        state: m.state.as_str().into(),
        severity: m.severity.as_str().into(),
        gate: m.gate,
        structure: m.structure.short_name().into(),
        variant: m.variant.as_str().into(),
        dsc: m.dsc,
        hd_mm: m.hd_mm,
    }
}

fn score(pred: &Mask3D, gt: &Mask3D) -> CliResult<(f64, Option<f64>)> {
    let hd = if pred.count() > 0 && gt.count() > 0 { Some(hausdorff_mm(pred, gt)?) } else { None };
    Ok((dsc(pred, gt)?, hd))
}

fn eval(ctx: &Ctx, predictions: &Path) -> CliResult<()> {
    let index = load_predictions(predictions)?;
    let m = ctx.dataset()?;
    let mut metrics = Vec::new();
    for (i, e) in m.studies.iter().enumerate() {
        for (&s, &variant) in &index.structures {
            let gts = m.load_masks(i, s)?;
            for (g, gt) in gts.iter().enumerate() {
                let pred = load_mask(mask_path(predictions, e, g, s))?;
                let (d, hd_mm) = score(&pred, gt)?;
                metrics.push(CaseMetric {
                    fold: 0,
                    patient_id: e.patient_id.clone(),
                    state: e.state,
                    severity: e.severity,
                    gate: g,
                    structure: s,
                    variant,
                    dsc: d,
                    hd_mm,
                });
            }
        }
    }
    let rows: Vec<MetricRow> = metrics.iter().map(|x| MetricRow { fold: None, ..metric_row(x) }).collect();
    write_csv(&ctx.out.join("metrics.csv"), METRIC_HEADER, &rows)?;
    write_csv(&ctx.out.join("table2.csv"), TABLE2_HEADER, &table2_rows(&metrics))
}

fn table2_rows(metrics: &[CaseMetric]) -> Vec<Table2Csv> {
    table2(metrics)
        .into_iter()
        .map(|r| {
            let [en, my, ep] = r.cells;
            Table2Csv {
                metric: r.metric.into(),
                method: r.variant.label().into(),
                endocardium_mean: en.map(|c| c.mean),
                endocardium_std: en.map(|c| c.std),
                myocardium_mean: my.map(|c| c.mean),
                myocardium_std: my.map(|c| c.std),
                epicardium_mean: ep.map(|c| c.mean),
                epicardium_std: ep.map(|c| c.std),
            }
        })
        .collect()
}

fn clinical_csv(fold: Option<usize>, variant: Variant, a: &ClinicalReport, r: &ClinicalReport) -> ClinicalRowCsv {
    ClinicalRowCsv {
        fold,
        variant: variant.as_str().into(),
        patient_id: a.patient_id.clone(),
        state: a.state.as_str().into(),
        edv_cc: a.edv_cc,
        esv_cc: a.esv_cc,
        lvef: a.lvef,
        ed_gate: a.ed_gate,
        es_gate: a.es_gate,
        scar_burden_pct: a.scar_burden_pct,
        ref_edv_cc: r.edv_cc,
        ref_esv_cc: r.esv_cc,
        ref_lvef: r.lvef,
        ref_ed_gate: r.ed_gate,
        ref_es_gate: r.es_gate,
        ref_scar_burden_pct: r.scar_burden_pct,
    }
}

fn curve_rows(fold: Option<usize>, variant: Variant, a: &ClinicalReport, r: &ClinicalReport) -> Vec<VolumeCurveRow> {
    (0..a.cavity_cc.len())
        .map(|g| VolumeCurveRow {
            fold,
            variant: variant.as_str().into(),
            patient_id: a.patient_id.clone(),
            state: a.state.as_str().into(),
            gate: g,
            cavity_cc: a.cavity_cc[g],
            myo_cc: a.myo_volume_cc[g],
            ref_cavity_cc: r.cavity_cc[g],
            ref_myo_cc: r.myo_volume_cc[g],
        })
        .collect()
}

fn clinical(ctx: &Ctx, predictions: &Path) -> CliResult<()> {
    let index = load_predictions(predictions)?;
    let (Some(&ve), Some(&vm)) =
        (index.structures.get(&Structure::Endocardium), index.structures.get(&Structure::Myocardium))
    else {
        return Err(CliError::Missing("clinical needs endocardium and myocardium predictions".into()));
    };
    let variant = if ve == vm { ve } else { vm };
    let m = ctx.dataset()?;
    let (mut rows, mut curves) = (Vec::new(), Vec::new());
    for (i, e) in m.studies.iter().enumerate() {
        let study = m.load_study(i)?;
        let load = |s| -> CliResult<Vec<Mask3D>> {
            (0..study.gates().len()).map(|g| Ok(load_mask(mask_path(predictions, e, g, s))?)).collect()
        };
        let measured = clinical_report(&study, &load(Structure::Endocardium)?, &load(Structure::Myocardium)?)?;
        let reference = clinical_report(
            &study,
            &m.load_masks(i, Structure::Endocardium)?,
            &m.load_masks(i, Structure::Myocardium)?,
        )?;
        rows.push(clinical_csv(None, variant, &measured, &reference));
        curves.extend(curve_rows(None, variant, &measured, &reference));
    }
    write_csv(&ctx.out.join("clinical.csv"), CLINICAL_HEADER, &rows)?;
    write_csv(&ctx.out.join("volume_curves.csv"), VOLUME_CURVE_HEADER, &curves)
}

fn crossval(ctx: &Ctx) -> CliResult<()> {
    let variants = ctx.variants();
    let structures = ctx.structures();
    let m = ctx.dataset()?;
    let need = variants.iter().any(|v| v.needs_prior());
    // priors come from disk when given, otherwise they are generated here
    let cases = match (need, ctx.priors_dir()) {
        (true, Some(_)) | (false, _) => cases(ctx, &m, need)?,
        (true, None) => spectlv_core::training::load_cases(&m, Some(&ctx.cfg.dp_prior))?,
    };
    let plan = CrossvalPlan {
        crossval: ctx.cfg.crossval.clone(),
        train: ctx.cfg.train.clone(),
        nets: ctx.cfg.nets(),
        dp: ctx.cfg.dp_prior.clone(),
        variants,
        structures,
    };
    let report = run_crossval_cases(&cases, &plan, Some(&ctx.out.join("models")))?;
    let rows: Vec<MetricRow> = report.metrics.iter().map(metric_row).collect();
    write_csv(&ctx.out.join("metrics.csv"), METRIC_HEADER, &rows)?;
    write_csv(&ctx.out.join("table2.csv"), TABLE2_HEADER, &table2_rows(&report.metrics))?;
    let (mut clin, mut curves) = (Vec::new(), Vec::new());
    for c in &report.clinical {
        clin.push(clinical_csv(Some(c.fold), c.variant, &c.measured, &c.reference));
        curves.extend(curve_rows(Some(c.fold), c.variant, &c.measured, &c.reference));
    }
    write_csv(&ctx.out.join("clinical.csv"), CLINICAL_HEADER, &clin)?;
    write_csv(&ctx.out.join("volume_curves.csv"), VOLUME_CURVE_HEADER, &curves)?;
    for run in &report.runs {
        let rows: Vec<TrainLogCsv> = run.records.iter().map(TrainLogCsv::from).collect();
        let name = format!("fold{}_{}_{}.csv", run.fold, run.variant, run.structure.short_name());
        write_csv(&ctx.out.join("train_logs").join(name), TRAIN_LOG_HEADER, &rows)?;
    }
    Ok(())
}

fn parse_variant(s: &str, path: &Path) -> CliResult<Variant> {
    s.parse().map_err(|e: Error| CliError::csv(path, e))
}

fn summary_cells(xs: [Vec<f64>; 3]) -> [Option<MeanStd>; 3] {
    xs.map(|v| (!v.is_empty()).then(|| MeanStd::of(&v)))
}

fn report(ctx: &Ctx, input: &Path) -> CliResult<()> {
    let mpath = input.join("metrics.csv");
    let metrics: Vec<MetricRow> = read_csv(&mpath)?;
    let mut variants: Vec<Variant> =
        metrics.iter().map(|r| parse_variant(&r.variant, &mpath)).collect::<CliResult<Vec<_>>>()?;
    variants.sort();
    variants.dedup();
    let col = |r: &MetricRow| Structure::from_short_name(&r.structure).map(|s| s as usize);
    let pick = |metric: &str, r: &MetricRow| if metric == "DSC" { Some(r.dsc) } else { r.hd_mm };
    let (mut t2, mut t3) = (Vec::new(), Vec::new());
    for metric in ["DSC", "HD"] {
        for &v in &variants {
            let mut xs: [Vec<f64>; 3] = Default::default();
            let mut by_sev: BTreeMap<Severity, [Vec<f64>; 3]> = BTreeMap::new();
            for r in metrics.iter().filter(|r| r.variant == v.as_str()) {
                let (Some(c), Some(x)) = (col(r), pick(metric, r)) else { continue };
                xs[c].push(x);
                let sev = Severity::ALL
                    .into_iter()
                    .find(|s| s.as_str() == r.severity)
                    .ok_or_else(|| CliError::csv(&mpath, format!("unknown severity `{}`", r.severity)))?;
                by_sev.entry(sev).or_default()[c].push(x);
            }
            let [en, my, ep] = summary_cells(xs);
            t2.push(Table2Csv {
                metric: metric.into(),
                method: v.label().into(),
                endocardium_mean: en.map(|c| c.mean),
                endocardium_std: en.map(|c| c.std),
                myocardium_mean: my.map(|c| c.mean),
                myocardium_std: my.map(|c| c.std),
                epicardium_mean: ep.map(|c| c.mean),
                epicardium_std: ep.map(|c| c.std),
            });
            for (sev, xs) in by_sev {
                let [en, my, ep] = summary_cells(xs);
                t3.push(Table3Csv {
                    metric: metric.into(),
                    method: v.label().into(),
                    severity: sev.as_str().into(),
                    endocardium_mean: en.map(|c| c.mean),
                    endocardium_std: en.map(|c| c.std),
                    myocardium_mean: my.map(|c| c.mean),
                    myocardium_std: my.map(|c| c.std),
                    epicardium_mean: ep.map(|c| c.mean),
                    epicardium_std: ep.map(|c| c.std),
                });
            }
        }
    }
    write_csv(&ctx.out.join("table2.csv"), TABLE2_HEADER, &t2)?;
    write_csv(&ctx.out.join("table3.csv"), TABLE3_HEADER, &t3)?;

    let cpath = input.join("clinical.csv");
    let clinical: Vec<ClinicalRowCsv> = if cpath.exists() { read_csv(&cpath)? } else { Vec::new() };
    let (mut agree, mut scatter, mut ba) = (Vec::new(), Vec::new(), Vec::new());
    type Getter = fn(&ClinicalRowCsv) -> (f64, f64);
    let params: [(&str, Option<&str>, Getter); 5] = [
        ("lvef", None, |r| (r.lvef, r.ref_lvef)),
        ("esv_cc", None, |r| (r.esv_cc, r.ref_esv_cc)),
        ("edv_cc", None, |r| (r.edv_cc, r.ref_edv_cc)),
        ("scar_burden_stress_pct", Some(StudyState::Stress.as_str()), |r| (r.scar_burden_pct, r.ref_scar_burden_pct)),
        ("scar_burden_rest_pct", Some(StudyState::Rest.as_str()), |r| (r.scar_burden_pct, r.ref_scar_burden_pct)),
    ];
    let mut cvariants: Vec<Variant> =
        clinical.iter().map(|r| parse_variant(&r.variant, &cpath)).collect::<CliResult<Vec<_>>>()?;
    cvariants.sort();
    cvariants.dedup();
    for &v in &cvariants {
        for (name, state, get) in &params {
            let rows: Vec<&ClinicalRowCsv> = clinical
                .iter()
                .filter(|r| r.variant == v.as_str() && state.map_or(true, |s| r.state == s))
                .collect();
            let (meas, refs): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| get(r)).unzip();
            for (r, (&a, &b)) in rows.iter().zip(meas.iter().zip(&refs)) {
                let base = |x: &str| (v.as_str().to_string(), x.to_string(), r.patient_id.clone(), r.state.clone());
                let (variant, parameter, patient_id, state) = base(name);
                scatter.push(ScatterCsv {
                    variant: variant.clone(),
                    parameter: parameter.clone(),
                    patient_id: patient_id.clone(),
                    state: state.clone(),
                    measured: a,
                    reference: b,
                });
                ba.push(BlandAltmanCsv { variant, parameter, patient_id, state, mean: 0.5 * (a + b), diff: a - b });
            }
            // too few or constant series have no correlation to report
            if let Ok(s) = AgreementSummary::new(*name, &meas, &refs) {
                agree.push(AgreementCsv {
                    variant: v.as_str().into(),
                    parameter: s.parameter,
                    n: meas.len(),
                    pearson_r: s.pearson_r,
                    p_value: s.p_value,
                    bias: s.bland_altman.bias,
                    sd: s.bland_altman.sd,
                    lower: s.bland_altman.lower,
                    upper: s.bland_altman.upper,
                    rel_err_mean_pct: s.relative_error_pct.mean,
                    rel_err_std_pct: s.relative_error_pct.std,
                });
            }
        }
    }
    write_csv(&ctx.out.join("agreement.csv"), AGREEMENT_HEADER, &agree)?;
    write_csv(&ctx.out.join("scatter.csv"), SCATTER_HEADER, &scatter)?;
    write_csv(&ctx.out.join("bland_altman.csv"), BLAND_ALTMAN_HEADER, &ba)?;
    let vpath = input.join("volume_curves.csv");
    let curves: Vec<VolumeCurveRow> = if vpath.exists() { read_csv(&vpath)? } else { Vec::new() };
    write_csv(&ctx.out.join("volume_curves.csv"), VOLUME_CURVE_HEADER, &curves)
}
