//! CSV row layouts. Column order is the field order.

use std::fs::{self, File};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use spectlv_core::training::TrainRecord;

use crate::error::{CliError, CliResult};

/// Segmentation scores, one row per (patient, state, gate, structure, variant).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub fold: Option<usize>,
    pub patient_id: String,
    pub state: String,
    pub severity: String,
    pub gate: usize,
    pub structure: String,
    pub variant: String,
    pub dsc: f64,
    pub hd_mm: Option<f64>,
}

/// Clinical parameters from predicted and ground-truth masks for one study.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRowCsv {
    pub fold: Option<usize>,
    pub variant: String,
    pub patient_id: String,
    pub state: String,
    pub edv_cc: f64,
    pub esv_cc: f64,
    pub lvef: f64,
    pub ed_gate: usize,
    pub es_gate: usize,
    pub scar_burden_pct: f64,
    pub ref_edv_cc: f64,
    pub ref_esv_cc: f64,
    pub ref_lvef: f64,
    pub ref_ed_gate: usize,
    pub ref_es_gate: usize,
    pub ref_scar_burden_pct: f64,
}

/// Per-gate cavity and myocardial volume.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VolumeCurveRow {
    pub fold: Option<usize>,
    pub variant: String,
    pub patient_id: String,
    pub state: String,
    pub gate: usize,
    pub cavity_cc: f64,
    pub myo_cc: f64,
    pub ref_cavity_cc: f64,
    pub ref_myo_cc: f64,
}

/// Method comparison: mean ± std per structure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table2Csv {
    pub metric: String,
    pub method: String,
    pub endocardium_mean: Option<f64>,
    pub endocardium_std: Option<f64>,
    pub myocardium_mean: Option<f64>,
    pub myocardium_std: Option<f64>,
    pub epicardium_mean: Option<f64>,
    pub epicardium_std: Option<f64>,
}

/// Severity breakdown for one method.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table3Csv {
    pub metric: String,
    pub method: String,
    pub severity: String,
    pub endocardium_mean: Option<f64>,
    pub endocardium_std: Option<f64>,
    pub myocardium_mean: Option<f64>,
    pub myocardium_std: Option<f64>,
    pub epicardium_mean: Option<f64>,
    pub epicardium_std: Option<f64>,
}

/// Pearson and Bland-Altman summary for one clinical parameter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgreementCsv {
    pub variant: String,
    pub parameter: String,
    pub n: usize,
    pub pearson_r: f64,
    pub p_value: f64,
    pub bias: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub rel_err_mean_pct: f64,
    pub rel_err_std_pct: f64,
}

/// Scatter point for correlation plots.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScatterCsv {
    pub variant: String,
    pub parameter: String,
    pub patient_id: String,
    pub state: String,
    pub measured: f64,
    pub reference: f64,
}

/// Bland-Altman point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanCsv {
    pub variant: String,
    pub parameter: String,
    pub patient_id: String,
    pub state: String,
    pub mean: f64,
    pub diff: f64,
}

/// Training log row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLogCsv {
    pub epoch: usize,
    pub stage: u8,
    pub loss_vnet: Option<f64>,
    pub loss_deformation: Option<f64>,
    pub loss_global: Option<f64>,
    pub val_dsc_endo: Option<f64>,
    pub val_dsc_myo: Option<f64>,
    pub val_dsc_epi: Option<f64>,
}

impl From<&TrainRecord> for TrainLogCsv {
    fn from(r: &TrainRecord) -> Self {
        TrainLogCsv {
            epoch: r.epoch,
            stage: r.stage,
            loss_vnet: r.loss_vnet,
            loss_deformation: r.loss_deformation,
            loss_global: r.loss_global,
            val_dsc_endo: r.val_dsc_endo,
            val_dsc_myo: r.val_dsc_myo,
            val_dsc_epi: r.val_dsc_epi,
        }
    }
}

/// Write `rows` with a header row; an empty table still gets its header.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    csv::Reader::from_reader(file).deserialize().map(|r| r.map_err(|e| CliError::csv(path, e))).collect()
}

pub const METRIC_HEADER: &[&str] =
    &["fold", "patient_id", "state", "severity", "gate", "structure", "variant", "dsc", "hd_mm"];
pub const CLINICAL_HEADER: &[&str] = &[
    "fold",
    "variant",
    "patient_id",
    "state",
    "edv_cc",
    "esv_cc",
    "lvef",
    "ed_gate",
    "es_gate",
    "scar_burden_pct",
    "ref_edv_cc",
    "ref_esv_cc",
    "ref_lvef",
    "ref_ed_gate",
    "ref_es_gate",
    "ref_scar_burden_pct",
];
pub const VOLUME_CURVE_HEADER: &[&str] =
    &["fold", "variant", "patient_id", "state", "gate", "cavity_cc", "myo_cc", "ref_cavity_cc", "ref_myo_cc"];
pub const TABLE2_HEADER: &[&str] = &[
    "metric",
    "method",
    "endocardium_mean",
    "endocardium_std",
    "myocardium_mean",
    "myocardium_std",
    "epicardium_mean",
    "epicardium_std",
];
pub const TABLE3_HEADER: &[&str] = &[
    "metric",
    "method",
    "severity",
    "endocardium_mean",
    "endocardium_std",
    "myocardium_mean",
    "myocardium_std",
    "epicardium_mean",
    "epicardium_std",
];
pub const AGREEMENT_HEADER: &[&str] = &[
    "variant",
    "parameter",
    "n",
    "pearson_r",
    "p_value",
    "bias",
    "sd",
    "lower",
    "upper",
    "rel_err_mean_pct",
    "rel_err_std_pct",
];
pub const SCATTER_HEADER: &[&str] = &["variant", "parameter", "patient_id", "state", "measured", "reference"];
pub const BLAND_ALTMAN_HEADER: &[&str] = &["variant", "parameter", "patient_id", "state", "mean", "diff"];
pub const TRAIN_LOG_HEADER: &[&str] = &TrainRecord::HEADER;

#[cfg(test)]
mod tests {
    use super::*;

    fn serde_header<T: Serialize + Default>() -> Vec<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(T::default()).unwrap();
        let bytes = w.into_inner().unwrap();
        let text = String::from_utf8(bytes).unwrap();
        text.lines().next().unwrap().split(',').map(str::to_string).collect()
    }

    #[test]
    fn headers_follow_field_order() {
        assert_eq!(serde_header::<MetricRow>(), METRIC_HEADER);
        assert_eq!(serde_header::<ClinicalRowCsv>(), CLINICAL_HEADER);
        assert_eq!(serde_header::<VolumeCurveRow>(), VOLUME_CURVE_HEADER);
        assert_eq!(serde_header::<Table2Csv>(), TABLE2_HEADER);
        assert_eq!(serde_header::<Table3Csv>(), TABLE3_HEADER);
        assert_eq!(serde_header::<AgreementCsv>(), AGREEMENT_HEADER);
        assert_eq!(serde_header::<ScatterCsv>(), SCATTER_HEADER);
        assert_eq!(serde_header::<BlandAltmanCsv>(), BLAND_ALTMAN_HEADER);
        assert_eq!(serde_header::<TrainLogCsv>(), TRAIN_LOG_HEADER);
    }

    #[test]
    fn empty_table_keeps_header_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.csv");
        write_csv::<MetricRow>(&p, METRIC_HEADER, &[]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), METRIC_HEADER.join(",") + "\n");
        let row = MetricRow { patient_id: "PH000".into(), dsc: 0.5, hd_mm: Some(2.0), ..Default::default() };
        write_csv(&p, METRIC_HEADER, &[row.clone()]).unwrap();
        assert_eq!(read_csv::<MetricRow>(&p).unwrap(), vec![row]);
    }
}
