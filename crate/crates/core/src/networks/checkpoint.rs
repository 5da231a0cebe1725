//! Checkpoint directories: one `manifest.json` describing every array
//! plus a single `params.bin` with the raw little-endian f64 payload.
//!
//! Several networks share one checkpoint by prefixing their parameter
//! names (`gen_fwd/stem.w`, `disc_bwd/site_b/b0.g`, ...). Loading goes
//! through freshly constructed networks so parameter order always comes
//! from the constructor, never from the file.

use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::RunStamp;
use crate::error::{IguaneError, Result};
use crate::networks::ParamSet;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into params.bin, in f64 elements.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    kind: String,
    stamp: RunStamp,
    specs: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Collects named arrays for one checkpoint write.
#[derive(Default)]
pub struct CheckpointWriter {
    arrays: Vec<(String, ArrayD<f64>)>,
}

impl CheckpointWriter {
    pub fn new() -> CheckpointWriter {
        CheckpointWriter::default()
    }

    /// Adds every parameter of `params` under `prefix/`.
    pub fn add_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, value) in params.iter() {
            self.arrays.push((format!("{prefix}/{name}"), value.clone()));
        }
    }

    pub fn add_array(&mut self, name: &str, value: ArrayD<f64>) {
        self.arrays.push((name.to_string(), value));
    }

    pub fn write(
        self,
        dir: &Path,
        kind: &str,
        specs: serde_json::Value,
        stamp: &RunStamp,
    ) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (name, _) in &self.arrays {
            if !seen.insert(name.clone()) {
                return Err(IguaneError::Integrity(format!(
                    "duplicate checkpoint array name '{name}'"
                )));
            }
        }
        std::fs::create_dir_all(dir).map_err(|e| IguaneError::io(dir, e))?;
        let bin_path = dir.join(PARAMS_FILE);
        let file = std::fs::File::create(&bin_path).map_err(|e| IguaneError::io(&bin_path, e))?;
        let mut w = BufWriter::new(file);
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, value) in &self.arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: value.shape().to_vec(),
                offset,
            });
            for &v in value.iter() {
                w.write_all(&v.to_le_bytes())
                    .map_err(|e| IguaneError::io(&bin_path, e))?;
            }
            offset += value.len() as u64;
        }
        w.flush().map_err(|e| IguaneError::io(&bin_path, e))?;

        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: kind.to_string(),
            stamp: stamp.clone(),
            specs,
            arrays: entries,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| IguaneError::Integrity(format!("manifest serialization: {e}")))?;
        let man_path = dir.join(MANIFEST_FILE);
        std::fs::write(&man_path, text).map_err(|e| IguaneError::io(&man_path, e))?;
        Ok(())
    }
}

/// A loaded checkpoint: metadata plus all arrays in memory.
pub struct Checkpoint {
    pub kind: String,
    pub stamp: RunStamp,
    pub specs: serde_json::Value,
    arrays: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn read(dir: &Path) -> Result<Checkpoint> {
        let man_path = dir.join(MANIFEST_FILE);
        let text =
            std::fs::read_to_string(&man_path).map_err(|e| IguaneError::io(&man_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| IguaneError::Integrity(format!("{}: {e}", man_path.display())))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(IguaneError::Integrity(format!(
                "unsupported checkpoint format version {}",
                manifest.format_version
            )));
        }
        let bin_path = dir.join(PARAMS_FILE);
        let mut bytes = Vec::new();
        std::fs::File::open(&bin_path)
            .map_err(|e| IguaneError::io(&bin_path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| IguaneError::io(&bin_path, e))?;
        let total: usize = manifest
            .arrays
            .iter()
            .map(|a| a.shape.iter().product::<usize>())
            .sum();
        if bytes.len() != total * 8 {
            return Err(IguaneError::Integrity(format!(
                "params.bin holds {} bytes but manifest expects {}",
                bytes.len(),
                total * 8
            )));
        }
        let mut arrays = BTreeMap::new();
        for entry in &manifest.arrays {
            let len: usize = entry.shape.iter().product();
            let start = entry.offset as usize * 8;
            let mut data = Vec::with_capacity(len);
            for i in 0..len {
                let o = start + i * 8;
                data.push(f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| IguaneError::Integrity(format!("array '{}': {e}", entry.name)))?;
            if arrays.insert(entry.name.clone(), arr).is_some() {
                return Err(IguaneError::Integrity(format!(
                    "duplicate checkpoint array name '{}'",
                    entry.name
                )));
            }
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            stamp: manifest.stamp,
            specs: manifest.specs,
            arrays,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(IguaneError::Integrity(format!(
                "checkpoint kind '{}' where '{kind}' was expected",
                self.kind
            )));
        }
        Ok(())
    }

    /// Array names under a prefix (with the prefix stripped).
    pub fn names_under(&self, prefix: &str) -> Vec<String> {
        let pfx = format!("{prefix}/");
        self.arrays
            .keys()
            .filter_map(|k| k.strip_prefix(&pfx).map(str::to_string))
            .collect()
    }

    /// Copies arrays under `prefix/` into `params`, requiring an exact
    /// name and shape match in both directions.
    pub fn load_into(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let stored = self.names_under(prefix);
        let want: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in &stored {
            if !want.iter().any(|w| w == name) {
                return Err(IguaneError::Integrity(format!(
                    "checkpoint has unexpected array '{prefix}/{name}'"
                )));
            }
        }
        for name in &want {
            let key = format!("{prefix}/{name}");
            let arr = self.arrays.get(&key).ok_or_else(|| {
                IguaneError::Integrity(format!("checkpoint is missing array '{key}'"))
            })?;
            let dst = params.get_mut(name)?;
            if dst.shape() != arr.shape() {
                return Err(IguaneError::Integrity(format!(
                    "array '{key}' has shape {:?}, expected {:?}",
                    arr.shape(),
                    dst.shape()
                )));
            }
            dst.assign(arr);
        }
        Ok(())
    }

    /// Deserializes a field of the `specs` object.
    pub fn spec_field<T: serde::de::DeserializeOwned>(&self, field: &str) -> Result<T> {
        let v = self.specs.get(field).ok_or_else(|| {
            IguaneError::Integrity(format!("checkpoint specs missing field '{field}'"))
        })?;
        serde_json::from_value(v.clone())
            .map_err(|e| IguaneError::Integrity(format!("specs field '{field}': {e}")))
    }
}
