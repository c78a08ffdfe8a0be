use std::fmt;
use std::io::Write;
use std::path::Path;

use anyhow::Context;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_PAIRING: u8 = 3;
pub const EXIT_MISSING: u8 = 4;
pub const EXIT_MISMATCH: u8 = 5;
pub const EXIT_SWEEP: u8 = 6;

/// An error plus the process exit code it maps to.
pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl fmt::Debug for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exit {}: {:#}", self.code, self.source)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn fail(code: u8, source: impl Into<anyhow::Error>) -> CliError {
    CliError { code, source: source.into() }
}

/// Default mapping from core errors to exit codes.
pub fn code_for(e: &attnvtg::Error) -> u8 {
    match e {
        attnvtg::Error::Pairing(_) => EXIT_PAIRING,
        attnvtg::Error::MissingPredictions(_) => EXIT_MISSING,
        attnvtg::Error::IdMismatch(_) => EXIT_MISMATCH,
        _ => EXIT_INPUT,
    }
}

pub trait CoreContext<T> {
    /// Attaches `what` (usually a path) and the matching exit code.
    fn at(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T> CoreContext<T> for attnvtg::Result<T> {
    fn at(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| {
            let code = code_for(&e);
            fail(code, anyhow::Error::new(e).context(what.to_string()))
        })
    }
}

pub fn read_to_string(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(|e| fail(EXIT_INPUT, e))
}

/// Writes `bytes` to `out` atomically (temp file + rename in the same
/// directory), or to stdout when `out` is `None`. An existing file is only
/// replaced with `force`.
pub fn emit(out: Option<&Path>, force: bool, bytes: &[u8]) -> CliResult<()> {
    let Some(path) = out else {
        let mut stdout = std::io::stdout().lock();
        return stdout
            .write_all(bytes)
            .and_then(|_| stdout.flush())
            .context("cannot write to stdout")
            .map_err(|e| fail(EXIT_INPUT, e));
    };
    if path.exists() && !force {
        return Err(fail(
            EXIT_INPUT,
            anyhow::anyhow!("{} already exists (use --force to overwrite)", path.display()),
        ));
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let write = || -> anyhow::Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path)?;
        Ok(())
    };
    write()
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(|e| fail(EXIT_INPUT, e))
}

pub fn json_line<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec(value).expect("serializable output");
    v.push(b'\n');
    v
}
