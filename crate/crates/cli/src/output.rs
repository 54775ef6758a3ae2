//! Failure classification and guarded file output.

use std::fmt;
use std::fs;
use std::path::Path;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Io(_) => 1,
            Self::Usage(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Numeric(m) | Self::Io(m) => f.write_str(m),
        }
    }
}

impl From<blora::Error> for Failure {
    fn from(e: blora::Error) -> Self {
        match e {
            blora::Error::NonFinite { .. } => Self::Numeric(e.to_string()),
            blora::Error::Io(_) => Self::Io(e.to_string()),
            other => Self::Usage(other.to_string()),
        }
    }
}

pub fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

/// Refuses to clobber existing files unless `force` is set.
pub fn check_free(path: &Path, force: bool) -> Result<(), Failure> {
    if path.exists() && !force {
        return Err(Failure::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

pub fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}
