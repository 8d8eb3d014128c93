//! Sampled real-valued signals and their on-disk representation
//! (raw little-endian `f32`, one file per signal).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate of every synthesized and processed signal.
pub const SAMPLE_RATE: f64 = 50e6;

/// Length of one network input/output window.
pub const WINDOW_LEN: usize = 65_280;

/// Length of one library record.
pub const RECORD_LEN: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl TimeSignal {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn zeros(len: usize, sample_rate: f64) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }

    pub fn peak(&self) -> f64 {
        peak_abs(&self.samples)
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

pub fn peak_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn write_f32_file(path: &Path, samples: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &s in samples {
        w.write_all(&(s as f32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_f32_file(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_f32(path, &bytes)
}

/// Reads `len` samples starting at sample `offset` without loading the whole file.
pub fn read_f32_chunk(path: &Path, offset: usize, len: usize) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    r.seek(SeekFrom::Start((offset * 4) as u64))
        .map_err(|e| Error::io(path, e))?;
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode_f32(path, &bytes)
}

/// Number of `f32` samples stored in a raw signal file.
pub fn f32_file_len(path: &Path) -> Result<usize> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    Ok(meta.len() as usize / 4)
}

fn decode_f32(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Parameter(format!(
            "{}: size {} is not a multiple of 4 bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_file_roundtrip_and_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        let x: Vec<f64> = (0..100).map(|i| i as f64 * 0.25 - 3.0).collect();
        write_f32_file(&path, &x).unwrap();
        assert_eq!(f32_file_len(&path).unwrap(), 100);
        assert_eq!(read_f32_file(&path).unwrap(), x);
        assert_eq!(read_f32_chunk(&path, 10, 5).unwrap(), x[10..15].to_vec());
        assert!(read_f32_chunk(&path, 98, 5).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.f32");
        std::fs::write(&path, [0u8; 7]).unwrap();
        assert!(matches!(read_f32_file(&path), Err(Error::Parameter(_))));
    }
}
