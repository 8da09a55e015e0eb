use std::fs;
use std::path::{Path, PathBuf};

use rhvae::data::content_key;
use rhvae::Error;
use serde::Serialize;
use serde_json::Value;

/// Process exit codes.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Failure with the exit code it maps to.
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
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Usage(_) | Error::Shape { .. } | Error::UnsupportedDimension(_) => EXIT_USAGE,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
            Error::Parse { .. } | Error::Checkpoint(_) | Error::Insufficient(_) | Error::Io(_) => EXIT_DATA,
            Error::Divergence { .. } | Error::Numerical(_) | Error::Integration { .. } | Error::NonFiniteGradient { .. } => {
                EXIT_DIVERGED
            }
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

#[derive(Serialize)]
struct Input {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a Value,
    inputs: &'a [Input],
    outputs: Vec<String>,
}

/// An output directory that only appears under its final name once complete.
pub struct RunDir {
    target: PathBuf,
    staging: PathBuf,
    inputs: Vec<Input>,
}

impl RunDir {
    pub fn create(target: &Path, force: bool) -> Outcome<Self> {
        if target.exists() && !force && fs::read_dir(target)?.next().is_some() {
            return Err(Failure::usage(format!(
                "output directory {} is not empty (use --force to replace it)",
                target.display()
            )));
        }
        let name = target
            .file_name()
            .ok_or_else(|| Failure::usage(format!("bad output path {}", target.display())))?
            .to_string_lossy();
        let staging = target.with_file_name(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(Self {
            target: target.to_path_buf(),
            staging,
            inputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    /// Records an input file and its content hash in the manifest.
    pub fn input(&mut self, path: &Path) -> Outcome {
        let bytes = fs::read(path)?;
        self.inputs.push(Input {
            path: path.display().to_string(),
            sha256: content_key(&bytes),
        });
        Ok(())
    }

    /// Writes `manifest.json` and moves the directory into place. Returns the
    /// final paths of everything written.
    pub fn finish(self, command: &str, seed: u64, config: &impl Serialize) -> Outcome<Vec<PathBuf>> {
        let mut outputs: Vec<String> = fs::read_dir(&self.staging)?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<Result<_, _>>()?;
        outputs.sort();
        let config = serde_json::to_value(config).map_err(|e| Failure::usage(e.to_string()))?;
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: &config,
            inputs: &self.inputs,
            outputs: outputs.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::usage(e.to_string()))?;
        fs::write(self.staging.join("manifest.json"), text + "\n")?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target)?;
        }
        if let Some(parent) = self.target.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::rename(&self.staging, &self.target)?;
        let mut paths: Vec<PathBuf> = outputs.iter().map(|o| self.target.join(o)).collect();
        paths.push(self.target.join("manifest.json"));
        Ok(paths)
    }

    /// Removes the staging directory after a failure.
    pub fn abandon(self) {
        let _ = fs::remove_dir_all(&self.staging);
    }
}
