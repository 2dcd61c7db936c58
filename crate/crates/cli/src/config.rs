use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

/// Failure of a subcommand, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config, missing inputs or unreadable weights. Exit 1.
    Config(String),
    /// Something went wrong while processing valid inputs. Exit 2.
    Processing(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Processing(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Processing(m) => write!(f, "processing error: {m}"),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn config_err(e: impl fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

pub fn processing_err(e: impl fmt::Display) -> Failure {
    Failure::Processing(e.to_string())
}

/// Optional TOML file whose keys mirror the long flags (`-` becomes `_`).
/// Flags given on the command line win over file values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub method: Option<String>,
    pub target: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub adv_mode: Option<String>,
    pub patch_size: Option<usize>,
    pub stride: Option<usize>,
    pub policy: Option<String>,
    pub blend: Option<String>,
    pub slide: Option<String>,
    pub window: Option<usize>,
    pub uniform_window: Option<bool>,
    pub label: Option<String>,
    pub direction: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("--config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("--config {}: {e}", path.display())))
    }
}

/// Flag value, else config value, else nothing.
pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

pub fn require<T>(value: Option<T>, flag: &str, why: &str) -> CliResult<T> {
    value.ok_or_else(|| Failure::Config(format!("missing required flag {flag} ({why})")))
}

/// Parses a flag value, naming the flag in the error.
pub fn parse_flag<T>(value: &str, flag: &str) -> CliResult<T>
where
    T: std::str::FromStr,
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Failure::Config(format!("invalid value `{value}` for {flag}: {e}")))
}
