//! Evaluation harness: the named analyses that score a harmonization
//! method, assembled into a reproducible report.
//!
//! Each analysis implements [`Analysis`] and registers under a short
//! name, so an evaluation run selects its analyses at runtime via
//! [`create_analysis`] / [`run_evaluation`]. Every p-value family is
//! Benjamini-Hochberg adjusted within its analysis, and the report
//! carries both raw and adjusted values plus the family sizes.

pub mod analyses;
pub mod plots;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::baselines::RescaleMethod;
use crate::config::RunStamp;
use crate::error::{IguaneError, Result};
use crate::manifest::Sex;
use crate::networks::PredictorSpec;
use crate::stats::{benjamini_hochberg, ssim, SsimOptions};
use crate::volume::Volume;

pub use analyses::{
    AgeGmCorrelation, CohensDAnalysis, DistancePreservationAnalysis, PredictorTrainTest,
    SiteClassifier, SsimTraveling,
};

/// One image of the evaluation cohort, in both states.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub subject_id: String,
    pub site_id: String,
    pub age: Option<f64>,
    pub sex: Option<Sex>,
    /// The preprocessed (pre-harmonization) volume.
    pub before: Volume,
    /// The harmonized volume, in the method's output space.
    pub after: Volume,
}

/// One scalar measurement (e.g. a gray-matter fraction) extracted from an
/// image under a named harmonization method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Measurement {
    pub subject_id: String,
    /// Grouping key (study or site).
    pub group: String,
    /// Harmonization method the measurement was taken under.
    pub method: String,
    pub age: Option<f64>,
    pub diagnosis: Option<String>,
    pub value: f64,
}

/// Everything an evaluation run may consume. Analyses validate that the
/// pieces they need are present.
#[derive(Debug, Clone)]
pub struct EvalInput {
    /// Label of the harmonization method under evaluation.
    pub method: String,
    /// Intensity convention of the `after` volumes; fixes the SSIM shift
    /// and the predictor rescale.
    pub rescale: RescaleMethod,
    pub images: Vec<EvalImage>,
    pub measurements: Vec<Measurement>,
    pub seed: u64,
    pub predictor: PredictorSpec,
    pub predictor_epochs: usize,
    pub predictor_lr: f64,
    /// Fraction of images used to train predictors; the rest are tested.
    pub train_fraction: f64,
}

impl EvalInput {
    pub fn new(method: &str, rescale: RescaleMethod, seed: u64) -> EvalInput {
        EvalInput {
            method: method.to_string(),
            rescale,
            images: Vec::new(),
            measurements: Vec::new(),
            seed,
            predictor: PredictorSpec::default(),
            predictor_epochs: 20,
            predictor_lr: 1e-3,
            train_fraction: 0.8,
        }
    }
}

/// One metric of the report: an analysis, a group, a named value, its
/// sample size, and (for test statistics) raw and adjusted p-values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub analysis: String,
    pub group: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
}

impl MetricRow {
    pub fn new(analysis: &str, group: &str, metric: &str, value: f64, n: usize) -> MetricRow {
        MetricRow {
            analysis: analysis.to_string(),
            group: group.to_string(),
            metric: metric.to_string(),
            value,
            n,
            p_raw: None,
            p_adjusted: None,
        }
    }

    pub fn with_p(mut self, p: f64) -> MetricRow {
        self.p_raw = Some(p);
        self
    }
}

/// What one analysis produces: metric rows plus human-readable notices
/// about anything it skipped.
#[derive(Debug, Clone, Default)]
pub struct AnalysisOutput {
    pub rows: Vec<MetricRow>,
    pub notices: Vec<String>,
}

/// A named evaluation analysis.
pub trait Analysis {
    /// Registry name.
    fn name(&self) -> &'static str;

    /// Runs the analysis on the input, emitting rows with raw p-values
    /// only; adjustment happens at report assembly.
    fn run(&self, input: &EvalInput) -> Result<AnalysisOutput>;
}

/// Names accepted by [`create_analysis`].
pub const ANALYSIS_NAMES: [&str; 6] = [
    "ssim-traveling",
    "distance-preservation",
    "age-gm-correlation",
    "cohens-d",
    "predictor-train-test",
    "site-classifier",
];

/// Builds the named analysis. `predictor-train/test` is accepted as an
/// alias of `predictor-train-test`.
pub fn create_analysis(name: &str) -> Result<Box<dyn Analysis>> {
    match name {
        "ssim-traveling" => Ok(Box::new(SsimTraveling)),
        "distance-preservation" => Ok(Box::new(DistancePreservationAnalysis)),
        "age-gm-correlation" => Ok(Box::new(AgeGmCorrelation)),
        "cohens-d" => Ok(Box::new(CohensDAnalysis)),
        "predictor-train-test" | "predictor-train/test" => Ok(Box::new(PredictorTrainTest)),
        "site-classifier" => Ok(Box::new(SiteClassifier)),
        other => Err(IguaneError::Config(format!(
            "unknown analysis `{other}`; available: {}",
            ANALYSIS_NAMES.join(", ")
        ))),
    }
}

/// The assembled evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub stamp: RunStamp,
    pub rows: Vec<MetricRow>,
    pub notices: Vec<String>,
    /// Benjamini-Hochberg family size per analysis (analyses with no
    /// p-values are absent).
    pub p_family_sizes: BTreeMap<String, usize>,
}

/// Runs the named analyses in order and adjusts each analysis's p-value
/// family with Benjamini-Hochberg. An empty analysis list is a no-op
/// that only leaves a notice.
pub fn run_evaluation(
    names: &[String],
    input: &EvalInput,
    stamp: &RunStamp,
) -> Result<EvaluationReport> {
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut notices: Vec<String> = Vec::new();
    let mut p_family_sizes = BTreeMap::new();
    if names.is_empty() {
        notices.push("no analyses requested; report is empty".to_string());
    }
    for name in names {
        let analysis = create_analysis(name)?;
        let base = rows.len();
        let out = analysis.run(input)?;
        rows.extend(out.rows);
        notices.extend(out.notices.into_iter().map(|n| format!("{name}: {n}")));
        let family: Vec<usize> = (base..rows.len())
            .filter(|&i| rows[i].p_raw.is_some())
            .collect();
        if !family.is_empty() {
            let ps: Vec<f64> = family.iter().map(|&i| rows[i].p_raw.unwrap()).collect();
            let adjusted = benjamini_hochberg(&ps)?;
            for (&i, &adj) in family.iter().zip(&adjusted) {
                rows[i].p_adjusted = Some(adj);
            }
            p_family_sizes.insert(analysis.name().to_string(), family.len());
        }
    }
    Ok(EvaluationReport {
        method: input.method.clone(),
        stamp: stamp.clone(),
        rows,
        notices,
        p_family_sizes,
    })
}

/// Writes `report.json` and `report.csv` under `out_dir`; rerunning with
/// an identical report is byte-identical.
pub fn write_report(report: &EvaluationReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| IguaneError::io(out_dir, e))?;
    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| IguaneError::Data(format!("report serialization: {e}")))?;
    std::fs::write(&json_path, json + "\n").map_err(|e| IguaneError::io(&json_path, e))?;

    let csv_path = out_dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| IguaneError::Io {
        path: csv_path.clone(),
        source: std::io::Error::other(e),
    })?;
    w.write_record([
        "analysis",
        "group",
        "metric",
        "value",
        "n",
        "p_raw",
        "p_adjusted",
    ])
    .map_err(|e| IguaneError::Data(format!("csv write: {e}")))?;
    let fmt_p = |p: Option<f64>| p.map(|v| v.to_string()).unwrap_or_default();
    for r in &report.rows {
        w.write_record([
            r.analysis.clone(),
            r.group.clone(),
            r.metric.clone(),
            r.value.to_string(),
            r.n.to_string(),
            fmt_p(r.p_raw),
            fmt_p(r.p_adjusted),
        ])
        .map_err(|e| IguaneError::Data(format!("csv write: {e}")))?;
    }
    w.flush().map_err(|e| IguaneError::io(&csv_path, e))?;
    Ok((json_path, csv_path))
}

/// SSIM intensity shift for a method's output convention: shifts make
/// every voxel non-negative before windowed statistics.
pub fn ssim_shift_for(rescale: RescaleMethod) -> f64 {
    match rescale {
        RescaleMethod::PreprocOrIguane => 0.0,
        RescaleMethod::Hm => 10.0,
        RescaleMethod::Ws => 160.0,
    }
}

/// Mean local SSIM between two same-shape volumes after adding `shift`
/// to both. Negative shifted intensities are a validation error.
pub fn ssim_pair(a: &Volume, b: &Volume, shift: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(IguaneError::Validation(format!(
            "ssim_pair: dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let sa = a.data.mapv(|v| v + shift);
    let sb = b.data.mapv(|v| v + shift);
    let min = sa
        .iter()
        .chain(sb.iter())
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        return Err(IguaneError::Validation(format!(
            "ssim_pair: shifted intensities reach {min}; increase the shift"
        )));
    }
    ssim(&sa, &sb, &SsimOptions::default())
}

/// Fraction of brain voxels whose intensity lies in `[lo, hi)` — the
/// segmentation-free stand-in for a gray-matter volume fraction.
pub fn gm_band_fraction(vol: &Volume, lo: f64, hi: f64) -> Result<f64> {
    if !(hi > lo) {
        return Err(IguaneError::Validation(format!(
            "gm_band_fraction: empty band [{lo}, {hi})"
        )));
    }
    let mut brain = 0usize;
    let mut in_band = 0usize;
    Zip::from(&vol.data).and(&vol.mask).for_each(|&v, &m| {
        if m {
            brain += 1;
            if v >= lo && v < hi {
                in_band += 1;
            }
        }
    });
    if brain == 0 {
        return Err(IguaneError::DegenerateInput(
            "gm_band_fraction: volume mask contains no voxels".into(),
        ));
    }
    Ok(in_band as f64 / brain as f64)
}
