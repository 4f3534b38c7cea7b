//! Output directories with atomic writes and manifests.
//!
//! A command stages every file in a hidden directory next to its final
//! location, then renames the files into place one by one. Renames within a
//! directory are atomic, so readers never see a half-written file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_COPY: &str = "config.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub struct Stage {
    dir: PathBuf,
    tmp: PathBuf,
    files: Vec<String>,
}

impl Stage {
    pub fn new(dir: &Path, label: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        let tmp = dir.join(format!(".staging-{label}-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp)?;
        Ok(Self { dir: dir.to_path_buf(), tmp, files: Vec::new() })
    }

    /// Path inside the staging area, for writers that want a path. The file
    /// must then be registered with [`Stage::register`].
    pub fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn register(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        fs::write(self.path(name), contents).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        self.register(name);
        Ok(())
    }

    /// Staged files with their digests, in name order.
    pub fn digests(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut names = self.files.clone();
        names.sort();
        names.into_iter().map(|n| Ok((n.clone(), file_digest(&self.path(&n))?))).collect()
    }

    /// Moves every staged file into the output directory.
    pub fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let mut done = Vec::new();
        for name in &self.files {
            let dest = self.dir.join(name);
            fs::rename(self.tmp.join(name), &dest).map_err(|e| CliError::Io(format!("{}: {e}", dest.display())))?;
            done.push(dest);
        }
        fs::remove_dir_all(&self.tmp)?;
        Ok(done)
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        // Leftovers only exist if the command failed before commit.
        let _ = fs::remove_dir_all(&self.tmp);
    }
}

/// Deterministic run description. Wall time is kept out of it on purpose and
/// goes to a separate timing file.
pub struct Manifest {
    pub command: &'static str,
    pub seeds: Vec<u64>,
    pub inputs: Vec<(String, String)>,
    pub extra: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &'static str, seeds: Vec<u64>) -> Self {
        Self { command, seeds, inputs: Vec::new(), extra: Vec::new() }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.inputs.push((name, file_digest(path)?));
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.extra.push((key.to_string(), value.to_string()));
    }

    /// Writes config copy, manifest and timing into `stage`.
    pub fn finish(self, stage: &mut Stage, config_text: &str, elapsed: Duration) -> Result<(), CliError> {
        stage.write(CONFIG_COPY, config_text)?;
        let mut m = String::new();
        writeln!(m, "command={}", self.command).unwrap();
        writeln!(m, "volmin_version={}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(m, "config={CONFIG_COPY}").unwrap();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        writeln!(m, "seeds={}", seeds.join(",")).unwrap();
        for (name, digest) in &self.inputs {
            writeln!(m, "input.{name}=sha256:{digest}").unwrap();
        }
        for (k, v) in &self.extra {
            writeln!(m, "{k}={v}").unwrap();
        }
        for (name, digest) in stage.digests()? {
            writeln!(m, "output.{name}=sha256:{digest}").unwrap();
        }
        writeln!(m, "timing={}.timing.txt", self.command).unwrap();
        stage.write(&format!("{}.manifest.txt", self.command), &m)?;
        stage
            .write(&format!("{}.timing.txt", self.command), &format!("wall_seconds={:.3}\n", elapsed.as_secs_f64()))?;
        Ok(())
    }
}
