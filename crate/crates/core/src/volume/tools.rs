//! Adapter for external preprocessing executables (bias correction,
//! affine registration, brain extraction).
//!
//! Those tools are large third-party programs, so the pipeline shells
//! out to them through user-supplied command templates instead of
//! linking them. A chain is a list of named steps whose commands contain
//! `{input}` and `{output}` placeholders; each step's output feeds the
//! next. When no chain is configured (the usual case for data that is
//! already registered and skull-stripped), callers bypass this module
//! entirely.
//!
//! The chain definition is a small JSON file referenced by the
//! `IGUANE_TOOLS` environment variable or by config.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{IguaneError, Result};

/// Environment variable naming a JSON tool-chain definition.
pub const TOOLS_ENV: &str = "IGUANE_TOOLS";

/// One external command invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolStep {
    /// Short label used in file names and error messages.
    pub name: String,
    /// Shell command with `{input}` and `{output}` placeholders.
    pub command: String,
}

/// Ordered list of preprocessing commands.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ToolChain {
    pub steps: Vec<ToolStep>,
}

impl ToolChain {
    /// Loads the chain named by `IGUANE_TOOLS`, or `None` when the
    /// variable is unset (the bypass path).
    pub fn from_env() -> Result<Option<ToolChain>> {
        match std::env::var(TOOLS_ENV) {
            Ok(path) if !path.is_empty() => Ok(Some(Self::from_json_file(Path::new(&path))?)),
            _ => Ok(None),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<ToolChain> {
        let text = std::fs::read_to_string(path).map_err(|e| IguaneError::io(path, e))?;
        let chain: ToolChain = serde_json::from_str(&text).map_err(|e| {
            IguaneError::Config(format!("{}: invalid tool chain JSON: {e}", path.display()))
        })?;
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        for step in &self.steps {
            if step.name.is_empty() {
                return Err(IguaneError::Config("tool step with empty name".into()));
            }
            for ph in ["{input}", "{output}"] {
                if !step.command.contains(ph) {
                    return Err(IguaneError::Config(format!(
                        "tool step '{}' is missing the {ph} placeholder",
                        step.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Runs every step in order inside `work_dir`, returning the final
    /// output path. A nonzero exit or a missing output file aborts the
    /// chain with the captured stderr attached.
    pub fn run(&self, input: &Path, work_dir: &Path) -> Result<PathBuf> {
        self.validate()?;
        std::fs::create_dir_all(work_dir).map_err(|e| IguaneError::io(work_dir, e))?;
        let mut current = input.to_path_buf();
        for (idx, step) in self.steps.iter().enumerate() {
            let output = work_dir.join(format!("step{idx:02}_{}.nii.gz", step.name));
            let cmd = step
                .command
                .replace("{input}", &current.to_string_lossy())
                .replace("{output}", &output.to_string_lossy());
            let result = Command::new("/bin/sh")
                .arg("-c")
                .arg(&cmd)
                .output()
                .map_err(|e| {
                    IguaneError::Adapter(format!("tool '{}' failed to launch: {e}", step.name))
                })?;
            if !result.status.success() {
                return Err(IguaneError::Adapter(format!(
                    "tool '{}' exited with {}: {}",
                    step.name,
                    result
                        .status
                        .code()
                        .map_or_else(|| "signal".to_string(), |c| c.to_string()),
                    tail(&String::from_utf8_lossy(&result.stderr))
                )));
            }
            if !output.exists() {
                return Err(IguaneError::Adapter(format!(
                    "tool '{}' succeeded but produced no output at {}",
                    step.name,
                    output.display()
                )));
            }
            current = output;
        }
        Ok(current)
    }
}

/// Last few lines of a diagnostic stream, for error messages.
fn tail(s: &str) -> String {
    const MAX_LINES: usize = 8;
    let lines: Vec<&str> = s.lines().collect();
    let start = lines.len().saturating_sub(MAX_LINES);
    let t = lines[start..].join("\n");
    if t.is_empty() {
        "(no stderr)".to_string()
    } else {
        t
    }
}
