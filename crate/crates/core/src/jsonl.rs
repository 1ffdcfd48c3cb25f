//! Helpers for the line-oriented JSON files every stage reads and writes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Reads non-blank lines, yielding `(1-based line number, text)`.
pub fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((idx + 1, line));
    }
    Ok(out)
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text)
                .map(|rec| (line, rec))
                .map_err(|e| Error::parse(path, line, e.to_string()))
        })
        .collect()
}

/// Reads a file whose first line is a header record followed by data records.
pub fn read_with_header<H: DeserializeOwned, T: DeserializeOwned>(
    path: &Path,
) -> Result<(H, Vec<T>)> {
    let lines = read_lines(path)?;
    let mut iter = lines.into_iter();
    let (line, text) = iter
        .next()
        .ok_or_else(|| Error::EmptyFile { path: path.into() })?;
    let header = serde_json::from_str(&text).map_err(|e| Error::parse(path, line, e.to_string()))?;
    let records = iter
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| Error::parse(path, line, e.to_string()))
        })
        .collect::<Result<Vec<T>>>()?;
    Ok((header, records))
}

pub fn write_records<'a, H, T, I>(path: &Path, header: Option<&H>, records: I) -> Result<()>
where
    H: Serialize,
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let io_err = |e: std::io::Error| Error::io(path, e);
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    if let Some(h) = header {
        write_line(&mut w, h).map_err(io_err)?;
    }
    for rec in records {
        write_line(&mut w, rec).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn write_line<W: Write, T: Serialize + ?Sized>(w: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(std::io::Error::other)?;
    w.write_all(b"\n")
}

/// Writes records with no header line.
pub fn write_plain<'a, T, I>(path: &Path, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    write_records::<(), T, I>(path, None, records)
}
