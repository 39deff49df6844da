//! On-disk formats for matrices, labels and checkpoint series.
//!
//! Binary matrix (`.lgt`): `b"LGT1"`, `u32` LE rows, `u32` LE cols, then
//! `rows * cols` little-endian `f32` values in row-major order.
//! Binary labels (`.lbl`): `b"LBL1"`, `u32` LE n, then n `u32` LE indices.
//! CSV matrices carry a `c0,c1,...` header; CSV labels a single `label` column.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::{CheckpointSeries, LabelVector, LogitMatrix, Matrix};

pub const MATRIX_MAGIC: [u8; 4] = *b"LGT1";
pub const LABEL_MAGIC: [u8; 4] = *b"LBL1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.csv` is CSV, anything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_header(bytes: &[u8], magic: [u8; 4], header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: header_len as u64,
            found: bytes.len() as u64,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            expected: header_len as u64,
            found: bytes.len() as u64,
        });
    }
    Ok(())
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn check_payload(found: usize, expected: u64) -> Result<()> {
    let found = found as u64;
    if found < expected {
        Err(Error::Truncated { expected, found })
    } else if found > expected {
        Err(Error::shape(format!(
            "{} trailing bytes after declared payload",
            found - expected
        )))
    } else {
        Ok(())
    }
}

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::shape("too many rows"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::shape("too many columns"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(&MATRIX_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for (pos, &v) in m.as_slice().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite {
                row: pos / m.cols(),
                col: pos % m.cols(),
            });
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    read_header(bytes, MATRIX_MAGIC, HEADER_LEN)?;
    let rows = u32_at(bytes, 4) as usize;
    let cols = u32_at(bytes, 8) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::shape(format!("declared shape {rows}x{cols} is empty")));
    }
    let expected = HEADER_LEN as u64 + 4 * rows as u64 * cols as u64;
    check_payload(bytes.len(), expected)?;
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let n = u32::try_from(labels.len()).map_err(|_| Error::shape("too many labels"))?;
    let mut out = Vec::with_capacity(8 + 4 * labels.len());
    out.extend_from_slice(&LABEL_MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    for &l in labels {
        let l = u32::try_from(l).map_err(|_| Error::invalid(format!("label {l} overflows u32")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelVector> {
    read_header(bytes, LABEL_MAGIC, 8)?;
    let n = u32_at(bytes, 4) as usize;
    if n == 0 {
        return Err(Error::shape("label file declares zero labels"));
    }
    check_payload(bytes.len(), 8 + 4 * n as u64)?;
    Ok(LabelVector::new(
        bytes[8..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect(),
    ))
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            format!("expected {expected_len} fields, found {len}")
        }
        _ => e.to_string(),
    };
    Error::Parse { line, message }
}

fn parse_float(field: &str, line: u64) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|e| Error::Parse {
        line,
        message: format!("{field:?}: {e}"),
    })
}

pub fn parse_matrix_csv(text: &str) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_err)?.clone();
    for (j, h) in header.iter().enumerate() {
        if h.trim() != format!("c{j}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("header field {j} is {h:?}, expected \"c{j}\""),
            });
        }
    }
    let cols = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        for f in rec.iter() {
            data.push(parse_float(f, line)?);
        }
        rows += 1;
    }
    Matrix::new(rows, cols, data)
}

pub fn format_matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..m.cols()).map(|j| format!("c{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in m.row_iter() {
        let fields: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_labels_csv(text: &str) -> Result<LabelVector> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.len() != 1 || header.get(0).map(str::trim) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            message: "label CSV must have a single `label` column".into(),
        });
    }
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let f = rec[0].trim();
        labels.push(f.parse::<usize>().map_err(|e| Error::Parse {
            line,
            message: format!("{f:?}: {e}"),
        })?);
    }
    if labels.is_empty() {
        return Err(Error::shape("label CSV has no rows"));
    }
    Ok(LabelVector::new(labels))
}

pub fn format_labels_csv(labels: &[usize]) -> String {
    let mut out = String::from("label\n");
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}

pub fn load_matrix(path: &Path, format: Format) -> Result<Matrix> {
    match format {
        Format::Binary => decode_matrix(&read_bytes(path)?),
        Format::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_matrix_csv(&text)
        }
    }
}

pub fn save_matrix(m: &Matrix, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Binary => write_bytes(path, &encode_matrix(m)?),
        Format::Csv => write_bytes(path, format_matrix_csv(m).as_bytes()),
    }
}

pub fn load_labels(path: &Path, format: Format) -> Result<LabelVector> {
    match format {
        Format::Binary => decode_labels(&read_bytes(path)?),
        Format::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_labels_csv(&text)
        }
    }
}

pub fn save_labels(labels: &[usize], path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Binary => write_bytes(path, &encode_labels(labels)?),
        Format::Csv => write_bytes(path, format_labels_csv(labels).as_bytes()),
    }
}

/// Loads a matrix choosing the format from the file extension.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    load_matrix(path, Format::from_path(path))
}

pub fn read_logits(path: &Path) -> Result<LogitMatrix> {
    LogitMatrix::new(read_matrix(path)?)
}

pub fn read_labels(path: &Path) -> Result<LabelVector> {
    load_labels(path, Format::from_path(path))
}

pub fn epoch_file_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.lgt")
}

fn parse_epoch_file_name(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("epoch_")?.strip_suffix(".lgt")?;
    if digits.len() < 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Loads a checkpoint series from a manifest file (one matrix path per line,
/// relative paths resolved against the manifest's directory) or from a
/// directory of `epoch_NNNN.lgt` files numbered contiguously from 1.
pub fn load_checkpoints(path: &Path) -> Result<CheckpointSeries> {
    let files = if path.is_dir() {
        checkpoint_dir_files(path)?
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| root.join(l))
            .collect()
    };
    let epochs = files.iter().map(|f| read_logits(f)).collect::<Result<Vec<_>>>()?;
    CheckpointSeries::new(epochs)
}

fn checkpoint_dir_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut numbered = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(t) = name.to_str().and_then(parse_epoch_file_name) {
            numbered.push((t, entry.path()));
        }
    }
    numbered.sort();
    for (i, (t, _)) in numbered.iter().enumerate() {
        if *t != i + 1 {
            return Err(Error::invalid(format!(
                "{}: checkpoint numbering has a gap at epoch {}",
                dir.display(),
                i + 1
            )));
        }
    }
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

/// Writes `epoch_NNNN.lgt` files into `dir` plus a manifest at `manifest`
/// listing them relative to the manifest's directory.
pub fn save_checkpoints(series: &CheckpointSeries, dir: &Path, manifest: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut listing = String::new();
    for (t, m) in series.epochs().iter().enumerate() {
        let file = dir.join(epoch_file_name(t + 1));
        save_matrix(m, &file, Format::Binary)?;
        let rel = file.strip_prefix(root).unwrap_or(&file);
        listing.push_str(&rel.to_string_lossy());
        listing.push('\n');
    }
    write_bytes(manifest, listing.as_bytes())
}
