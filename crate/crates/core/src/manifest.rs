//! Cohort manifests: the CSV files that name every image along with the
//! covariates the sampler, trainer, and evaluation suite need.
//!
//! Expected header: `path,subject_id,site_id,age,sex,diagnosis`. Image
//! paths are resolved relative to the manifest's directory, so a cohort
//! folder can be moved wholesale.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IguaneError, Result};

pub const MANIFEST_HEADER: [&str; 6] = ["path", "subject_id", "site_id", "age", "sex", "diagnosis"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

/// One image row of a manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub subject_id: String,
    pub site_id: String,
    pub age: f64,
    pub sex: Sex,
    /// Free-form label; this codebase uses `CN` and `AD`.
    pub diagnosis: String,
}

/// A parsed manifest plus the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ImageRecord>, base_dir: PathBuf) -> Manifest {
        Manifest { records, base_dir }
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| IguaneError::Data(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| IguaneError::Data(format!("{}: {e}", path.display())))?
            .clone();
        let got: Vec<&str> = headers.iter().collect();
        if got != MANIFEST_HEADER {
            return Err(IguaneError::Data(format!(
                "{}: manifest header must be `{}`, got `{}`",
                path.display(),
                MANIFEST_HEADER.join(","),
                got.join(",")
            )));
        }
        let mut records = Vec::new();
        for (idx, row) in reader.deserialize::<ImageRecord>().enumerate() {
            let rec = row.map_err(|e| {
                IguaneError::Data(format!("{}: row {}: {e}", path.display(), idx + 2))
            })?;
            validate_record(&rec)
                .map_err(|e| IguaneError::Data(format!("{}: row {}: {e}", path.display(), idx + 2)))?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(IguaneError::Data(format!(
                "{}: manifest contains no rows",
                path.display()
            )));
        }
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Manifest { records, base_dir })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| IguaneError::io(parent, e))?;
            }
        }
        let mut writer =
            csv::Writer::from_path(path).map_err(|e| IguaneError::Data(format!("{e}")))?;
        for rec in &self.records {
            writer
                .serialize(rec)
                .map_err(|e| IguaneError::Data(format!("{e}")))?;
        }
        writer.flush().map_err(|e| IguaneError::io(path, e))?;
        Ok(())
    }

    /// Absolute (or base-relative) path for a record's image file.
    pub fn resolve_path(&self, rec: &ImageRecord) -> PathBuf {
        if rec.path.is_absolute() {
            rec.path.clone()
        } else {
            self.base_dir.join(&rec.path)
        }
    }

    /// Sorted unique site ids.
    pub fn sites(&self) -> Vec<String> {
        let mut s: Vec<String> = self
            .records
            .iter()
            .map(|r| r.site_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        s.sort();
        s
    }

    /// Record indices per site, in manifest order.
    pub fn indices_by_site(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, rec) in self.records.iter().enumerate() {
            map.entry(rec.site_id.clone()).or_default().push(i);
        }
        map
    }

    /// Subjects imaged at more than one site (traveling subjects), as
    /// subject id -> record indices sorted by site id.
    pub fn traveling_subjects(&self) -> BTreeMap<String, Vec<usize>> {
        let mut by_subject: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, rec) in self.records.iter().enumerate() {
            by_subject.entry(rec.subject_id.clone()).or_default().push(i);
        }
        by_subject.retain(|_, idxs| {
            let sites: std::collections::BTreeSet<&str> = idxs
                .iter()
                .map(|&i| self.records[i].site_id.as_str())
                .collect();
            sites.len() > 1
        });
        for idxs in by_subject.values_mut() {
            idxs.sort_by(|&a, &b| self.records[a].site_id.cmp(&self.records[b].site_id));
        }
        by_subject
    }
}

fn validate_record(rec: &ImageRecord) -> Result<()> {
    if rec.path.as_os_str().is_empty() {
        return Err(IguaneError::Validation("empty path".into()));
    }
    if rec.subject_id.is_empty() || rec.site_id.is_empty() {
        return Err(IguaneError::Validation(
            "subject_id and site_id must be nonempty".into(),
        ));
    }
    if !rec.age.is_finite() || rec.age < 0.0 || rec.age > 130.0 {
        return Err(IguaneError::Validation(format!(
            "implausible age {}",
            rec.age
        )));
    }
    Ok(())
}
