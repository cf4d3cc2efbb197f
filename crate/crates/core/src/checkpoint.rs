//! Versioned binary parameter checkpoints.
//!
//! Layout (all little-endian): 4-byte magic, `u32` version, `u32` section
//! count, then per section a `u16` name length, the UTF-8 name, `u64` rows,
//! `u64` cols, and `rows * cols` consecutive `f64`. Sections are written in
//! the order given and read back in file order; round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::Mat;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, sections: &[(String, &Mat)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(sections.len() as u32).to_le_bytes())?;
    for (name, m) in sections {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("section name '{name}' too long")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Mat)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    if head[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut sections = Vec::with_capacity(count);
    for i in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(|_| Error::Format(format!("truncated section {i}")))?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|_| Error::Format(format!("truncated section {i}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format(format!("section {i} name is not UTF-8")))?;
        let mut dims = [0u8; 16];
        r.read_exact(&mut dims).map_err(|_| Error::Format(format!("truncated section {name}")))?;
        let rows = u64::from_le_bytes(dims[0..8].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(dims[8..16].try_into().unwrap()) as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated data in section {name}")))?;
            *v = f64::from_le_bytes(buf);
        }
        let m = Mat::from_vec(rows, cols, data).map_err(|e| Error::Format(e.to_string()))?;
        sections.push((name, m));
    }
    Ok(sections)
}

/// Find one section by name.
pub fn section<'a>(sections: &'a [(String, Mat)], name: &str) -> Result<&'a Mat> {
    sections
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m)
        .ok_or_else(|| Error::Format(format!("checkpoint missing section '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = RngState::new(3);
        let a = Mat::from_fn(4, 7, |_, _| rng.normal());
        let b = Mat::from_fn(1, 1, |_, _| rng.normal());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&path, &[("w_z".to_string(), &a), ("b_d".to_string(), &b)]).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "w_z");
        for (x, y) in back[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(section(&back, "b_d").unwrap().get(0, 0), b.get(0, 0));
        assert!(section(&back, "nope").is_err());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
