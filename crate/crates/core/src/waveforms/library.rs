//! Signal libraries: a directory of raw `f32` records plus a JSON manifest.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_spec, synthesize, IntrapulseKind, InterpulseConfig, WaveformSpec};
use crate::error::{param, Error, Result};
use crate::signal::{read_f32_chunk, write_f32_file, SAMPLE_RATE};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Random access to a set of recorded signals.
pub trait SignalSource: Sync {
    fn record_count(&self) -> usize;
    fn record_len(&self, index: usize) -> usize;
    fn read_chunk(&self, index: usize, offset: usize, len: usize) -> Result<Vec<f64>>;

    fn read_record(&self, index: usize) -> Result<Vec<f64>> {
        self.read_chunk(index, 0, self.record_len(index))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub file: String,
    #[serde(flatten)]
    pub spec: WaveformSpec,
    pub sample_rate: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: IntrapulseKind,
    pub seed: u64,
    pub sample_rate: f64,
    pub length: usize,
    pub entries: Vec<LibraryEntry>,
}

/// A library stored on disk; chunks are read lazily.
#[derive(Debug, Clone)]
pub struct Library {
    pub dir: PathBuf,
    pub entries: Vec<LibraryEntry>,
}

impl Library {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        Ok(Self {
            dir,
            entries: manifest.entries,
        })
    }

    /// Concatenates several libraries into one record list.
    pub fn open_many<P: AsRef<Path>>(dirs: &[P]) -> Result<Self> {
        let mut merged = Self {
            dir: PathBuf::new(),
            entries: Vec::new(),
        };
        for d in dirs {
            let lib = Self::open(d)?;
            merged.entries.extend(lib.entries.into_iter().map(|mut e| {
                e.file = lib.dir.join(&e.file).to_string_lossy().into_owned();
                e
            }));
        }
        Ok(merged)
    }

    fn path_of(&self, entry: &LibraryEntry) -> PathBuf {
        self.dir.join(&entry.file)
    }
}

impl SignalSource for Library {
    fn record_count(&self) -> usize {
        self.entries.len()
    }

    fn record_len(&self, index: usize) -> usize {
        self.entries[index].length
    }

    fn read_chunk(&self, index: usize, offset: usize, len: usize) -> Result<Vec<f64>> {
        let entry = &self.entries[index];
        if offset + len > entry.length {
            return param(format!(
                "chunk [{offset}, {}) exceeds record length {}",
                offset + len,
                entry.length
            ));
        }
        read_f32_chunk(&self.path_of(entry), offset, len)
    }
}

/// A library held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemoryLibrary {
    pub records: Vec<Vec<f64>>,
}

impl InMemoryLibrary {
    pub fn new(records: Vec<Vec<f64>>) -> Self {
        Self { records }
    }
}

impl SignalSource for InMemoryLibrary {
    fn record_count(&self) -> usize {
        self.records.len()
    }

    fn record_len(&self, index: usize) -> usize {
        self.records[index].len()
    }

    fn read_chunk(&self, index: usize, offset: usize, len: usize) -> Result<Vec<f64>> {
        let rec = &self.records[index];
        if offset + len > rec.len() {
            return param(format!(
                "chunk [{offset}, {}) exceeds record length {}",
                offset + len,
                rec.len()
            ));
        }
        Ok(rec[offset..offset + len].to_vec())
    }
}

/// Per-record seed derived from the library seed (SplitMix64 finalizer).
pub fn record_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `count` specs of `kind` without synthesizing them.
pub fn library_specs(kind: IntrapulseKind, count: usize, seed: u64) -> Vec<WaveformSpec> {
    (0..count as u64)
        .map(|i| sample_spec(kind, &mut ChaCha8Rng::seed_from_u64(record_seed(seed, i))))
        .collect()
}

/// Synthesizes `count` records of `kind` into `out_dir` and writes the manifest.
///
/// Records are generated in parallel; each uses its own seed stream so the
/// output does not depend on scheduling.
pub fn generate_library(
    kind: IntrapulseKind,
    count: usize,
    length: usize,
    seed: u64,
    cfg: &InterpulseConfig,
    out_dir: &Path,
) -> Result<Manifest> {
    if count == 0 {
        return param("library count must be at least 1");
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = library_specs(kind, count, seed)
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let file = format!("{}_{i:05}.f32", kind.name());
            let signal = synthesize(&spec, length, cfg)?;
            write_f32_file(&out_dir.join(&file), &signal.samples)?;
            Ok(LibraryEntry {
                file,
                spec,
                sample_rate: SAMPLE_RATE,
                length,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        kind,
        seed,
        sample_rate: SAMPLE_RATE,
        length,
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
