//! Up-front validation of command-line paths, run before any output is written.

use std::path::{Path, PathBuf};

use rfsep::waveforms::library::MANIFEST_FILE;

/// A bad argument detected before any work started.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: String) -> Result<T, UsageError> {
    Err(UsageError(msg))
}

/// The closest ancestor of `path` that exists must be a directory, so the
/// missing components can be created.
fn creatable(path: &Path) -> Result<(), UsageError> {
    for a in path.ancestors().skip(1) {
        let a = if a.as_os_str().is_empty() { Path::new(".") } else { a };
        if a.exists() {
            return if a.is_dir() {
                Ok(())
            } else {
                usage(format!("{}: {} is not a directory", path.display(), a.display()))
            };
        }
    }
    Ok(())
}

pub fn output_dir(path: &Path) -> Result<(), UsageError> {
    if path.exists() && !path.is_dir() {
        return usage(format!("output directory {} exists and is not a directory", path.display()));
    }
    creatable(path)
}

pub fn output_file(path: &Path) -> Result<(), UsageError> {
    if path.is_dir() {
        return usage(format!("output file {} is a directory", path.display()));
    }
    creatable(path)
}

pub fn input_file(path: &Path) -> Result<(), UsageError> {
    if !path.is_file() {
        return usage(format!("input file {} does not exist", path.display()));
    }
    Ok(())
}

pub fn library_dir(path: &Path) -> Result<(), UsageError> {
    if !path.join(MANIFEST_FILE).is_file() {
        return usage(format!("{} is not a signal library (no {MANIFEST_FILE})", path.display()));
    }
    Ok(())
}

pub fn library_dirs(paths: &[PathBuf]) -> Result<(), UsageError> {
    paths.iter().try_for_each(|p| library_dir(p))
}

/// Creates the parent directory of an output file.
pub fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p),
        _ => Ok(()),
    }
}
