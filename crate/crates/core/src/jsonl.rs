//! Line-delimited JSON helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Reads every non-blank line of `path` as a `T`. Fails on the first bad line.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for item in read_lenient::<T>(path)? {
        out.push(item?);
    }
    Ok(out)
}

/// Yields one result per non-blank line so callers can reject single records
/// and keep going.
pub fn read_lenient<T: DeserializeOwned>(
    path: &Path,
) -> Result<impl Iterator<Item = Result<T, JsonlError>>, JsonlError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| JsonlError::Io { path: display.clone(), source })?;
    let reader = BufReader::new(file);
    Ok(reader
        .lines()
        .enumerate()
        .filter_map(move |(idx, line)| match line {
            Err(source) => Some(Err(JsonlError::Io { path: display.clone(), source })),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(serde_json::from_str(&l).map_err(|source| JsonlError::Parse {
                path: display.clone(),
                line: idx + 1,
                source,
            })),
        }))
}

pub fn write<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), JsonlError> {
    let display = path.display().to_string();
    let io = |source| JsonlError::Io { path: display.clone(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|source| JsonlError::Parse {
            path: display.clone(),
            line: 0,
            source,
        })?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}
