//! Feature file formats.
//!
//! Two formats are supported:
//!
//! - CSV, UTF-8 with `.` decimals: an optional first column named `label`
//!   followed by feature columns (written as `f0..f{d-1}`).
//! - Packed little-endian binary with a 16-byte header `(magic, n, d, flags)`
//!   where flags bit 0 marks the presence of a label block. Features are
//!   stored as `n*d` consecutive `f64`, then `n` labels as `u32` when
//!   present. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::datasets::DomainDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Magic bytes of the packed binary feature format, version 1.
pub const FEATURE_MAGIC: [u8; 4] = *b"FDS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureFormat {
    Csv,
    PackedBinary,
}

impl FeatureFormat {
    /// Pick a format from a file extension (`.csv` vs anything else binary).
    pub fn infer(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::PackedBinary,
        }
    }
}

impl std::str::FromStr for FeatureFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FeatureFormat::Csv),
            "packed-binary" | "binary" | "bin" => Ok(FeatureFormat::PackedBinary),
            other => Err(Error::parameter(format!("unknown feature format '{other}'"))),
        }
    }
}

/// Load a feature file. The domain tag is the file stem; the class count is
/// inferred as `max(label) + 1` for labeled data (use
/// [`DomainDataset::with_class_count`] to widen it).
pub fn load_features(path: &Path, format: FeatureFormat) -> Result<DomainDataset> {
    let tag = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    match format {
        FeatureFormat::Csv => load_csv(path, tag),
        FeatureFormat::PackedBinary => load_binary(path, tag),
    }
}

/// Write a dataset in the given format.
pub fn save_features(dataset: &DomainDataset, path: &Path, format: FeatureFormat) -> Result<()> {
    match format {
        FeatureFormat::Csv => save_csv(dataset, path),
        FeatureFormat::PackedBinary => save_binary(dataset, path),
    }
}

fn load_csv(path: &Path, tag: String) -> Result<DomainDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Load { row: 0, message: format!("{}: {e}", path.display()) })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Load { row: 0, message: e.to_string() })?
        .clone();
    if headers.is_empty() {
        return Err(Error::Load { row: 0, message: "empty header".to_string() });
    }
    let labeled = headers.get(0) == Some("label");
    let dim = if labeled { headers.len() - 1 } else { headers.len() };
    if dim == 0 {
        return Err(Error::Load { row: 0, message: "no feature columns".to_string() });
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Load { row, message: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(Error::Load {
                row,
                message: format!("{} fields, expected {}", record.len(), headers.len()),
            });
        }
        let mut fields = record.iter();
        if labeled {
            let raw = fields.next().unwrap();
            let label: usize = raw
                .trim()
                .parse()
                .map_err(|_| Error::Load { row, message: format!("bad label '{raw}'") })?;
            labels.push(label);
        }
        let feats: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Load { row, message: format!("bad value '{f}'") })
            })
            .collect::<Result<_>>()?;
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::Load { row: 0, message: "no data rows".to_string() });
    }
    let features = Matrix::from_rows(&rows)
        .map_err(|e| Error::Load { row: 0, message: e.to_string() })?;
    let class_count = labels.iter().max().map(|m| m + 1).unwrap_or(1);
    DomainDataset::new(features, if labeled { Some(labels) } else { None }, tag, class_count)
}

fn save_csv(dataset: &DomainDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let dim = dataset.dim();
    let mut header: Vec<String> = Vec::with_capacity(dim + 1);
    if dataset.is_labeled() {
        header.push("label".to_string());
    }
    header.extend((0..dim).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(io_format)?;
    for i in 0..dataset.len() {
        let mut record: Vec<String> = Vec::with_capacity(dim + 1);
        if let Some(ref labels) = dataset.labels {
            record.push(labels[i].to_string());
        }
        // Display for f64 prints the shortest string that round-trips
        record.extend(dataset.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(io_format)?;
    }
    w.flush()?;
    Ok(())
}

fn io_format(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn save_binary(dataset: &DomainDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = dataset.len() as u32;
    let d = dataset.dim() as u32;
    let flags: u32 = if dataset.is_labeled() { 1 } else { 0 };
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    w.write_all(&flags.to_le_bytes())?;
    for v in dataset.features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(ref labels) = dataset.labels {
        for &l in labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_binary(path: &Path, tag: String) -> Result<DomainDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| Error::Load { row: 0, message: "truncated header".to_string() })?;
    if header[0..4] != FEATURE_MAGIC {
        return Err(Error::Load { row: 0, message: "bad magic".to_string() });
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let flags = u32::from_le_bytes(header[12..16].try_into().unwrap());
    if n == 0 || d == 0 {
        return Err(Error::Load { row: 0, message: format!("empty shape {n}x{d}") });
    }
    let mut data = vec![0.0f64; n * d];
    let mut buf = [0u8; 8];
    for (i, v) in data.iter_mut().enumerate() {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Load { row: i / d, message: "truncated features".to_string() })?;
        *v = f64::from_le_bytes(buf);
    }
    let labels = if flags & 1 == 1 {
        let mut labels = Vec::with_capacity(n);
        let mut lbuf = [0u8; 4];
        for i in 0..n {
            r.read_exact(&mut lbuf)
                .map_err(|_| Error::Load { row: i, message: "truncated labels".to_string() })?;
            labels.push(u32::from_le_bytes(lbuf) as usize);
        }
        Some(labels)
    } else {
        None
    };
    let features =
        Matrix::from_vec(n, d, data).map_err(|e| Error::Load { row: 0, message: e.to_string() })?;
    let class_count = labels.as_ref().and_then(|l| l.iter().max()).map(|m| m + 1).unwrap_or(1);
    DomainDataset::new(features, labels, tag, class_count)
}
