//! Run directories, manifests and exit-code mapping.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::Utc;
use lelab_core::LabError;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: msg.into(),
        }
    }
}

/// Input errors map to 64, everything numerical to 2.
pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Domain(_)
        | LabError::Infeasible(_)
        | LabError::Window(_)
        | LabError::Regime(_)
        | LabError::Composition(_) => EXIT_USAGE,
        _ => EXIT_NUMERIC,
    }
}

impl From<LabError> for Failure {
    fn from(err: LabError) -> Self {
        Self {
            code: exit_code(&err),
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Self::numeric(format!("i/o error: {err}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(err: serde_json::Error) -> Self {
        Self::numeric(format!("json error: {err}"))
    }
}

pub type CmdResult<T> = std::result::Result<T, Failure>;

/// Hex SHA-256 of the canonical JSON form of a resolved configuration.
pub fn digest(config: &Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json values serialize");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub check: String,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn new(check: impl Into<String>, pass: bool, value: f64, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            pass,
            value,
            tolerance,
        }
    }
}

/// One output directory `runs/<timestamp>-<digest>/`.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    config: Value,
    digest: String,
    started: String,
    outputs: Vec<String>,
    pub checks: Vec<CheckOutcome>,
    pub extra: serde_json::Map<String, Value>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, config: Value) -> CmdResult<Self> {
        let digest = digest(&json!({ "command": command, "config": config }));
        let now = Utc::now();
        let stamp = now.format("%Y%m%dT%H%M%SZ").to_string();
        let mut path = root.join(format!("{stamp}-{}", &digest[..12]));
        let mut k = 1;
        while path.exists() {
            path = root.join(format!("{stamp}-{}-{k}", &digest[..12]));
            k += 1;
        }
        fs::create_dir_all(&path)?;
        Ok(Self {
            path,
            command: command.into(),
            config,
            digest,
            started: now.to_rfc3339(),
            outputs: Vec::new(),
            checks: Vec::new(),
            extra: serde_json::Map::new(),
        })
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> CmdResult<()> {
        let mut w = BufWriter::new(File::create(self.path.join(name))?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        self.outputs.push(name.into());
        Ok(())
    }

    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> lelab_core::Result<()>,
    ) -> CmdResult<()> {
        let mut w = BufWriter::new(File::create(self.path.join(name))?);
        f(&mut w)?;
        w.flush()?;
        self.outputs.push(name.into());
        Ok(())
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Writes manifest.json; call last so that every output is listed.
    pub fn finish(mut self, status: &str) -> CmdResult<PathBuf> {
        let failing: Vec<&str> = self
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.check.as_str())
            .collect();
        let mut manifest = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "config_digest": self.digest,
            "timestamps": { "started": self.started, "finished": Utc::now().to_rfc3339() },
            "status": status,
            "outputs": self.outputs,
            "checks": self.checks,
            "summary": {
                "total": self.checks.len(),
                "passed": self.checks.len() - failing.len(),
                "failing": failing,
            },
        });
        let obj = manifest.as_object_mut().expect("manifest is an object");
        for (k, v) in std::mem::take(&mut self.extra) {
            obj.insert(k, v);
        }
        let path = self.path.join("manifest.json");
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(self.path)
    }
}
