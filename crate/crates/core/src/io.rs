//! File helpers shared by checkpoints, datasets and reports.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{LabError, Result};

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| LabError::invalid(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.partial", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| LabError::io(&tmp, e))?;
        f.sync_all().map_err(|e| LabError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| LabError::invalid(format!("serializing {}: {e}", path.display())))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| {
        let offset = line_col_offset(&bytes, e.line(), e.column());
        LabError::Parse {
            path: path.to_path_buf(),
            offset,
            msg: e.to_string(),
        }
    })
}

pub(crate) fn line_col_offset(bytes: &[u8], line: usize, column: usize) -> u64 {
    let mut cur = 1;
    for (i, &b) in bytes.iter().enumerate() {
        if cur == line {
            return (i + column.saturating_sub(1)) as u64;
        }
        if b == b'\n' {
            cur += 1;
        }
    }
    bytes.len() as u64
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
