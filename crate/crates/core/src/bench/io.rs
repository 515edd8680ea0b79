use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Write `rows` as CSV preceded by a `# schema_version=N` comment line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_csv_to(&mut out, rows)?;
    out.flush()?;
    Ok(())
}

pub fn write_csv_to<T: Serialize, W: Write>(out: &mut W, rows: &[T]) -> Result<()> {
    writeln!(out, "# schema_version={SCHEMA_VERSION}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Line-delimited JSON with a schema header as the first record.
pub struct JsonlWriter<W: Write> {
    out: W,
}

impl JsonlWriter<BufWriter<File>> {
    pub fn create(path: &Path, kind: &str) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), kind)
    }
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(mut out: W, kind: &str) -> Result<Self> {
        serde_json::to_writer(&mut out, &serde_json::json!({ "schema_version": SCHEMA_VERSION, "kind": kind }))?;
        out.write_all(b"\n")?;
        Ok(Self { out })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Parse a seed list: `7`, `1..10` (inclusive), `1,4,9` or a mix such as `1..3,8`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::config(format!("invalid seed list '{text}'"));
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
            if b < a {
                return Err(bad());
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().map_err(|_| bad())?);
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}
