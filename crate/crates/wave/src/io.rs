//! Field snapshots as flat binary files and CSV extracts.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WaveError};
use crate::grid::{GridField, GridSpec};

const MAGIC: &[u8; 8] = b"CLWAVE01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    grid: GridSpec,
    step: usize,
    time: f64,
    shape: [usize; 2],
}

/// Writes `MAGIC`, a little-endian `u64` header length, the JSON header and the values
/// as little-endian `f64` in row-major order (x fastest).
pub fn write_field(path: &Path, grid: &GridSpec, field: &GridField) -> Result<()> {
    let header = Header { grid: grid.clone(), step: field.step, time: field.time, shape: field.shape };
    let json = serde_json::to_vec(&header).map_err(|e| WaveError::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * field.values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in &field.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<(GridSpec, GridField)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| WaveError::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| WaveError::Format(e.to_string()))?;
    let data = &bytes[16 + len..];
    let count = header.shape[0] * header.shape[1];
    if data.len() != 8 * count {
        return Err(bad("value count does not match the header shape"));
    }
    let values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header.grid, GridField { step: header.step, time: header.time, shape: header.shape, values }))
}

/// CSV extract `x,value` along row `j` of a field.
pub fn row_csv(grid: &GridSpec, field: &GridField, j: usize) -> String {
    let mut out = String::from("x,value\n");
    for i in 0..field.shape[0] {
        let x = grid.lo[0] + i as f64 * grid.h;
        out.push_str(&format!("{x},{}\n", field.at(i, j)));
    }
    out
}

/// Parses a CSV written by [`row_csv`].
pub fn parse_row_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l.split_once(',').ok_or_else(|| WaveError::Format(format!("bad line {l:?}")))?;
            let p = |s: &str| s.trim().parse::<f64>().map_err(|e| WaveError::Format(e.to_string()));
            Ok((p(a)?, p(b)?))
        })
        .collect()
}
