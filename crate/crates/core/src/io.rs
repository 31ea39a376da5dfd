//! File helpers. Every artifact is written to a temporary sibling and renamed.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{MistError, Result};

pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        if !dir.is_dir() {
            return Err(MistError::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "directory does not exist"),
            ));
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| MistError::invalid("write", format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, contents).map_err(|e| MistError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| MistError::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MistError::io(path, e))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn create_dir_all(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| MistError::io(path, e))
}
