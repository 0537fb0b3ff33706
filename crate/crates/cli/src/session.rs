//! Output handling for one command: a lock per output directory, outputs
//! written under staging names and renamed only once everything succeeded,
//! and a JSON manifest next to the first output.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

pub const LOCK_NAME: &str = ".amips.lock";
const STAGING_SUFFIX: &str = ".partial";

pub struct Session {
    command: String,
    config: BTreeMap<String, String>,
    argv: Vec<String>,
    inputs: Vec<PathBuf>,
    /// `(final, staging)` pairs.
    outputs: Vec<(PathBuf, PathBuf)>,
    locks: Vec<PathBuf>,
    committed: bool,
}

fn staging_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(STAGING_SUFFIX);
    path.with_file_name(name)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn manifest_path(first_output: &Path) -> PathBuf {
    let mut name = first_output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    first_output.with_file_name(name)
}

impl Session {
    pub fn new(command: &str, config: BTreeMap<String, String>, argv: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            config,
            argv,
            inputs: Vec::new(),
            outputs: Vec::new(),
            locks: Vec::new(),
            committed: false,
        }
    }

    pub fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn lock(&mut self, dir: &Path) -> CliResult<()> {
        let lock = dir.join(LOCK_NAME);
        if self.locks.contains(&lock) {
            return Ok(());
        }
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                self.locks.push(lock);
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::usage(format!(
                "{} is locked by another command (remove {} if it is stale)",
                dir.display(),
                lock.display()
            ))),
            Err(e) => Err(CliError::data(format!("cannot create {}: {e}", lock.display()))),
        }
    }

    /// Declares an output and returns the path to write it to.
    pub fn output(&mut self, path: &Path) -> CliResult<PathBuf> {
        if self.inputs.iter().any(|i| i == path) {
            return Err(CliError::usage(format!("{} is both an input and an output", path.display())));
        }
        if self.outputs.iter().any(|(f, _)| f == path) {
            return Err(CliError::usage(format!("{} declared twice as an output", path.display())));
        }
        self.lock(&parent_dir(path))?;
        let staging = staging_path(path);
        self.outputs.push((path.to_path_buf(), staging.clone()));
        Ok(staging)
    }

    /// Writes the manifest and moves every staged output into place.
    pub fn commit(mut self, summary: Value) -> CliResult<()> {
        let Some(first) = self.outputs.first().map(|(f, _)| f.clone()) else {
            self.committed = true;
            return Ok(());
        };
        let inputs: Vec<Value> = self
            .inputs
            .iter()
            .map(|p| {
                let bytes = fs::metadata(p).map(|m| m.len()).ok();
                json!({ "path": p.display().to_string(), "bytes": bytes })
            })
            .collect();
        let outputs: Vec<String> = self.outputs.iter().map(|(f, _)| f.display().to_string()).collect();
        let manifest = json!({
            "command": self.command,
            "amips_version": env!("CARGO_PKG_VERSION"),
            "seed": self.config.get("seed").and_then(|s| s.parse::<u64>().ok()),
            "config": self.config,
            "argv": self.argv,
            "inputs": inputs,
            "outputs": outputs,
            "summary": summary,
        });
        let mpath = manifest_path(&first);
        let staged = self.output(&mpath)?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&staged, text + "\n").map_err(|e| CliError::data(format!("cannot write {}: {e}", staged.display())))?;
        for (fin, stage) in &self.outputs {
            fs::rename(stage, fin).map_err(|e| CliError::data(format!("cannot move output to {}: {e}", fin.display())))?;
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if !self.committed {
            for (_, stage) in &self.outputs {
                let _ = fs::remove_file(stage);
            }
        }
        for l in &self.locks {
            let _ = fs::remove_file(l);
        }
    }
}
