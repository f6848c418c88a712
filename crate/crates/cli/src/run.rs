//! Run directories, config merging and error classes.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use cascade_distill::checkpoint::MANIFEST;
use cascade_distill::config::RunConfig;
use cascade_distill::Error;
use serde::Serialize;

use crate::Common;

#[derive(Debug)]
pub enum CliError {
    RunDir(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::RunDir(_) => "run-dir",
            CliError::Core(Error::Config(_) | Error::Format { .. }) => "config",
            CliError::Core(Error::Dependency(_)) => "dependency",
            CliError::Core(Error::CodecMismatch(_)) => "codec-mismatch",
            CliError::Core(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.class() {
            "config" => 3,
            "dependency" => 4,
            "run-dir" => 5,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// File config (or defaults) with the common flags applied.
pub fn base_config(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

/// One command's output directory with its log.
pub struct RunDir {
    pub path: PathBuf,
    log: File,
}

impl RunDir {
    /// Creates `root/name`; an existing directory is only replaced with
    /// `overwrite`.
    pub fn create(c: &Common, name: &str) -> CliResult<Self> {
        let path = c.out.join(name);
        if path.exists() {
            if !c.overwrite {
                return Err(CliError::RunDir(format!(
                    "{} already exists; pass --overwrite to replace it",
                    path.display()
                )));
            }
            fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        }
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let log_path = path.join("log.txt");
        let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(Self { path, log })
    }

    pub fn log(&mut self, line: &str) {
        println!("{line}");
        // The log is best effort; the console copy already went out.
        let _ = writeln!(self.log, "{line}");
    }

    /// Writes the merged config verbatim.
    pub fn write_config(&self, cfg: &RunConfig) -> CliResult<()> {
        Ok(cfg.save(&self.path.join("config.toml"))?)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let p = self.path.join(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    pub fn sub(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

/// Checkpoint directory `root/name/sub` written by an earlier command.
pub fn dependency(c: &Common, name: &str, sub: &str, hint: &str) -> CliResult<PathBuf> {
    let p = c.out.join(name).join(sub);
    if p.join(MANIFEST).exists() {
        Ok(p)
    } else {
        Err(Error::Dependency(format!("{} not found; run `{hint}` first", p.display())).into())
    }
}

pub fn exists(c: &Common, name: &str, sub: &str) -> bool {
    c.out.join(name).join(sub).join(MANIFEST).exists()
}

/// Root of the shared artifact cache.
pub fn cache_root(c: &Common) -> PathBuf {
    std::env::var_os("CASCADE_DISTILL_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| c.out.join("cache"))
}

pub fn display(p: &Path) -> String {
    p.display().to_string()
}
