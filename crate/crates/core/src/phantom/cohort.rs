//! Cohort assembly: multi-site subject sets, traveling subjects, manifests,
//! and ground-truth tables.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{render, SiteEffect};
use super::{generate_anatomy, Anatomy, AnatomyParams, Diagnosis};
use crate::config::{stream_rng, RunStamp};
use crate::error::{IguaneError, Result};
use crate::manifest::{ImageRecord, Manifest, Sex};
use crate::volume::nifti::save_volume;

fn default_age_skew() -> f64 {
    1.0
}
fn default_male_fraction() -> f64 {
    0.5
}

/// Per-site slice of a cohort description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteSpec {
    pub site_id: String,
    pub n_subjects: usize,
    /// Inclusive age range, inside the study range [18, 80].
    pub age_range: [f64; 2],
    /// Power applied to the uniform draw: > 1 skews young, < 1 skews old.
    #[serde(default = "default_age_skew")]
    pub age_skew: f64,
    /// Fraction of subjects carrying the AD diagnosis.
    #[serde(default)]
    pub ad_fraction: f64,
    #[serde(default = "default_male_fraction")]
    pub male_fraction: f64,
}

/// Declarative description of a synthetic cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSpec {
    pub seed: u64,
    /// Site that acts as the harmonization reference.
    pub reference_site: String,
    pub sites: Vec<SiteSpec>,
    /// Subjects imaged at every site (evaluation only, never training).
    #[serde(default)]
    pub n_traveling: usize,
    #[serde(default)]
    pub anatomy: AnatomyParams,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        self.anatomy.validate()?;
        if self.sites.is_empty() {
            return Err(IguaneError::Validation("cohort needs at least one site".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sites {
            if s.site_id.is_empty()
                || !s
                    .site_id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(IguaneError::Validation(format!(
                    "site id {:?} must be non-empty alphanumeric/dash/underscore",
                    s.site_id
                )));
            }
            if !seen.insert(&s.site_id) {
                return Err(IguaneError::Validation(format!(
                    "duplicate site id {:?}",
                    s.site_id
                )));
            }
            if s.n_subjects == 0 {
                return Err(IguaneError::Validation(format!(
                    "site {:?} has no subjects",
                    s.site_id
                )));
            }
            let [lo, hi] = s.age_range;
            if !(18.0 <= lo && lo < hi && hi <= 80.0) {
                return Err(IguaneError::Validation(format!(
                    "site {:?} age range [{lo}, {hi}] must sit inside [18, 80]",
                    s.site_id
                )));
            }
            if !(s.age_skew > 0.0) {
                return Err(IguaneError::Validation("age_skew must be positive".into()));
            }
            if !(0.0..=1.0).contains(&s.ad_fraction) || !(0.0..=1.0).contains(&s.male_fraction) {
                return Err(IguaneError::Validation(
                    "ad_fraction and male_fraction must lie in [0, 1]".into(),
                ));
            }
        }
        if !self.sites.iter().any(|s| s.site_id == self.reference_site) {
            return Err(IguaneError::Validation(format!(
                "reference site {:?} is not in the site list",
                self.reference_site
            )));
        }
        Ok(())
    }
}

/// Where a generated cohort landed on disk.
#[derive(Debug, Clone)]
pub struct CohortSummary {
    pub n_subjects: usize,
    pub n_images: usize,
    pub manifest_path: PathBuf,
    pub train_manifest_path: PathBuf,
    pub travel_manifest_path: PathBuf,
    pub ground_truth_path: PathBuf,
}

#[derive(Serialize)]
struct GroundTruthRow<'a> {
    subject_id: &'a str,
    age: f64,
    sex: &'a str,
    diagnosis: &'a str,
    gm_frac_target: f64,
    gm_frac_achieved: f64,
    brain_voxels: usize,
    hippocampus_voxels: usize,
    hippocampus_model_volume: f64,
}

fn write_ground_truth(path: &Path, anatomies: &[Anatomy]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| IguaneError::Data(format!("{e}")))?;
    for a in anatomies {
        let row = GroundTruthRow {
            subject_id: &a.subject_id,
            age: a.age,
            sex: match a.sex {
                Sex::M => "M",
                Sex::F => "F",
            },
            diagnosis: a.diagnosis.as_str(),
            gm_frac_target: a.gm_frac_target,
            gm_frac_achieved: a.gm_frac,
            brain_voxels: a.brain_voxels,
            hippocampus_voxels: a.hippocampus_voxels,
            hippocampus_model_volume: a.hippocampus_model_volume,
        };
        w.serialize(row).map_err(|e| IguaneError::Data(format!("{e}")))?;
    }
    w.flush().map_err(|e| IguaneError::Data(format!("{e}")))?;
    Ok(())
}

/// Generate a cohort: volumes under `out_dir/images`, manifests and ground
/// truth at the top level. Rerunning with the same spec writes byte-identical
/// files.
///
/// Outputs:
/// - `manifest.csv`: every image (training subjects + traveling subjects)
/// - `manifest_train.csv`: one row per ordinary subject
/// - `manifest_travel.csv`: traveling subjects, one row per (subject, site)
/// - `ground_truth.csv`: one row per subject with the generating parameters
/// - `run_stamp.json`: config hash + seed
pub fn make_cohort(spec: &CohortSpec, out_dir: &Path) -> Result<CohortSummary> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| IguaneError::io(&images_dir, e))?;

    let effects: Vec<SiteEffect> = spec
        .sites
        .iter()
        .map(|s| SiteEffect::from_seed(&s.site_id, spec.seed))
        .collect();

    let mut train_records: Vec<ImageRecord> = Vec::new();
    let mut travel_records: Vec<ImageRecord> = Vec::new();
    let mut anatomies: Vec<Anatomy> = Vec::new();

    for (site, effect) in spec.sites.iter().zip(&effects) {
        for i in 0..site.n_subjects {
            let subject_id = format!("{}_s{i:03}", site.site_id);
            let mut rng = stream_rng(spec.seed, &format!("cohort/{subject_id}"));
            let u_age: f64 = rng.gen();
            let u_sex: f64 = rng.gen();
            let u_diag: f64 = rng.gen();
            let [lo, hi] = site.age_range;
            let age = lo + (hi - lo) * u_age.powf(site.age_skew);
            let sex = if u_sex < site.male_fraction { Sex::M } else { Sex::F };
            let diagnosis = if u_diag < site.ad_fraction {
                Diagnosis::Ad
            } else {
                Diagnosis::Cn
            };
            let anatomy =
                generate_anatomy(age, diagnosis, sex, &subject_id, spec.seed, &spec.anatomy)?;
            let vol = render(&anatomy, effect, spec.seed)?;
            let rel = PathBuf::from("images").join(format!(
                "{}__{subject_id}.nii.gz",
                site.site_id
            ));
            save_volume(&vol, &out_dir.join(&rel))?;
            train_records.push(ImageRecord {
                path: rel,
                subject_id: subject_id.clone(),
                site_id: site.site_id.clone(),
                age,
                sex,
                diagnosis: diagnosis.as_str().to_string(),
            });
            anatomies.push(anatomy);
        }
    }

    // Traveling subjects: one anatomy, rendered at every site. Ages spread
    // evenly over the union of the site ranges; diagnosis CN.
    if spec.n_traveling > 0 {
        let lo = spec
            .sites
            .iter()
            .map(|s| s.age_range[0])
            .fold(f64::INFINITY, f64::min);
        let hi = spec
            .sites
            .iter()
            .map(|s| s.age_range[1])
            .fold(f64::NEG_INFINITY, f64::max);
        for t in 0..spec.n_traveling {
            let subject_id = format!("trav_s{t:03}");
            let age = lo + (hi - lo) * (t as f64 + 0.5) / spec.n_traveling as f64;
            let sex = if t % 2 == 0 { Sex::F } else { Sex::M };
            let anatomy =
                generate_anatomy(age, Diagnosis::Cn, sex, &subject_id, spec.seed, &spec.anatomy)?;
            for (site, effect) in spec.sites.iter().zip(&effects) {
                let vol = render(&anatomy, effect, spec.seed)?;
                let rel = PathBuf::from("images").join(format!(
                    "{}__{subject_id}.nii.gz",
                    site.site_id
                ));
                save_volume(&vol, &out_dir.join(&rel))?;
                travel_records.push(ImageRecord {
                    path: rel,
                    subject_id: subject_id.clone(),
                    site_id: site.site_id.clone(),
                    age,
                    sex,
                    diagnosis: Diagnosis::Cn.as_str().to_string(),
                });
            }
            anatomies.push(anatomy);
        }
    }

    let n_subjects = anatomies.len();
    let mut all_records = train_records.clone();
    all_records.extend(travel_records.iter().cloned());
    let n_images = all_records.len();

    let manifest_path = out_dir.join("manifest.csv");
    let train_manifest_path = out_dir.join("manifest_train.csv");
    let travel_manifest_path = out_dir.join("manifest_travel.csv");
    let ground_truth_path = out_dir.join("ground_truth.csv");
    Manifest::new(all_records, out_dir.to_path_buf()).save(&manifest_path)?;
    Manifest::new(train_records, out_dir.to_path_buf()).save(&train_manifest_path)?;
    Manifest::new(travel_records, out_dir.to_path_buf()).save(&travel_manifest_path)?;
    write_ground_truth(&ground_truth_path, &anatomies)?;

    let stamp = RunStamp::new(spec, spec.seed)?;
    let stamp_path = out_dir.join("run_stamp.json");
    let stamp_json = serde_json::to_string_pretty(&stamp)
        .map_err(|e| IguaneError::Data(format!("{e}")))?;
    std::fs::write(&stamp_path, stamp_json.as_bytes())
        .map_err(|e| IguaneError::io(&stamp_path, e))?;

    Ok(CohortSummary {
        n_subjects,
        n_images,
        manifest_path,
        train_manifest_path,
        travel_manifest_path,
        ground_truth_path,
    })
}
