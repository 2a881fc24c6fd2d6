//! Dataset manifest: one CSV row `path,class,split` per sample.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub class: String,
    pub split: String,
}

pub fn write_manifest<W: Write>(writer: W, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a manifest. The header must be exactly `path,class,split` and every
/// split tag must be `train`, `val`, `test` or empty.
pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "class", "split"] {
        return Err(Error::Data(format!(
            "manifest header must be path,class,split, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        let row: ManifestRow = record?;
        if !matches!(row.split.as_str(), "" | "train" | "val" | "test") {
            return Err(Error::Data(format!("unknown split tag '{}'", row.split)));
        }
        if row.path.is_empty() {
            return Err(Error::Data("manifest row with empty path".into()));
        }
        rows.push(row);
    }
    Ok(rows)
}
