//! Mixture construction: chunk selection, level scaling, noise and normalization.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::signal::{peak_abs, WINDOW_LEN};
use crate::waveforms::library::{record_seed, SignalSource};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureConfig {
    /// Samples per chunk.
    pub window_len: usize,
    /// Range of the per-signal peak level in dB relative to full scale.
    pub level_dbfs: (f64, f64),
    /// Range of the per-signal SNR in dB; `None` disables noise.
    pub snr_db: Option<(f64, f64)>,
    /// Redraw the chunk offset when a chunk is silent.
    pub require_active: bool,
    pub max_redraws: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            window_len: WINDOW_LEN,
            level_dbfs: (-80.0, -10.0),
            snr_db: Some((0.0, 30.0)),
            require_active: true,
            max_redraws: 32,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return param("mixture window length must be positive");
        }
        let (lo, hi) = self.level_dbfs;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return param(format!("invalid level range [{lo}, {hi}]"));
        }
        if let Some((lo, hi)) = self.snr_db {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return param(format!("invalid SNR range [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

/// Where a chunk came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkOrigin {
    pub record: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub mixture: Vec<f64>,
    pub truths: [Vec<f64>; 2],
    /// Peak level applied to each signal.
    pub scale_dbfs: [f64; 2],
    /// Per-signal SNR, if noise was added.
    pub snr_db: Option<[f64; 2]>,
    /// The maximum absolute mixture amplitude before normalization.
    pub norm_factor: f64,
    pub origins: [ChunkOrigin; 2],
}

impl MixtureSample {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    /// Splits a long sample into consecutive windows of `window_len` samples.
    pub fn windows(&self, window_len: usize) -> Result<Vec<MixtureSample>> {
        if window_len == 0 || !self.len().is_multiple_of(window_len) {
            return param(format!("{} samples do not split into windows of {window_len}", self.len()));
        }
        Ok((0..self.len() / window_len)
            .map(|k| {
                let r = k * window_len..(k + 1) * window_len;
                MixtureSample {
                    mixture: self.mixture[r.clone()].to_vec(),
                    truths: [self.truths[0][r.clone()].to_vec(), self.truths[1][r].to_vec()],
                    origins: self.origins.map(|o| ChunkOrigin {
                        record: o.record,
                        offset: o.offset + k * window_len,
                    }),
                    ..self.clone()
                }
            })
            .collect())
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Cuts a random `len`-sample chunk from `record`, redrawing silent chunks if configured.
pub fn draw_chunk(
    lib: &dyn SignalSource,
    record: usize,
    len: usize,
    cfg: &MixtureConfig,
    rng: &mut impl Rng,
) -> Result<(ChunkOrigin, Vec<f64>)> {
    let total = lib.record_len(record);
    if total < len {
        return param(format!("record {record} has {total} samples, need at least {len}"));
    }
    let attempts = if cfg.require_active { cfg.max_redraws.max(1) } else { 1 };
    let mut chunk = Vec::new();
    let mut offset = 0;
    for _ in 0..attempts {
        offset = rng.random_range(0..=total - len);
        chunk = lib.read_chunk(record, offset, len)?;
        if energy(&chunk) > 0.0 {
            break;
        }
    }
    Ok((ChunkOrigin { record, offset }, chunk))
}

/// Steps 3 to 6 of the mixing procedure applied to two clean chunks.
pub fn mix_chunks(chunks: [Vec<f64>; 2], origins: [ChunkOrigin; 2], cfg: &MixtureConfig, rng: &mut impl Rng) -> Result<MixtureSample> {
    let len = chunks[0].len();
    if chunks[1].len() != len {
        return param("chunks must have equal length");
    }
    let (lo, hi) = cfg.level_dbfs;
    let mut scale_dbfs = [0.0; 2];
    let mut truths = chunks;
    for (c, truth) in truths.iter_mut().enumerate() {
        let level = if lo < hi { rng.random_range(lo..hi) } else { lo };
        scale_dbfs[c] = level;
        let peak = peak_abs(truth);
        if peak > 0.0 {
            let gain = 10f64.powf(level / 20.0) / peak;
            truth.iter_mut().for_each(|v| *v *= gain);
        }
    }

    let mut mixture: Vec<f64> = truths[0].iter().zip(&truths[1]).map(|(a, b)| a + b).collect();
    let snr_db = match cfg.snr_db {
        None => None,
        Some((lo, hi)) => {
            let mut snr = [0.0; 2];
            for (c, truth) in truths.iter().enumerate() {
                snr[c] = if lo < hi { rng.random_range(lo..hi) } else { lo };
                let power = energy(truth) / len as f64;
                let sigma = (power / 10f64.powf(snr[c] / 10.0)).sqrt();
                if sigma > 0.0 {
                    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Numeric(e.to_string()))?;
                    mixture.iter_mut().for_each(|v| *v += normal.sample(rng));
                }
            }
            Some(snr)
        }
    };

    let norm_factor = peak_abs(&mixture);
    if !(norm_factor > 0.0 && norm_factor.is_finite()) {
        return Err(Error::Numeric(format!("cannot normalize a mixture with peak {norm_factor}")));
    }
    mixture.iter_mut().for_each(|v| *v /= norm_factor);
    for truth in &mut truths {
        truth.iter_mut().for_each(|v| *v /= norm_factor);
    }
    Ok(MixtureSample {
        mixture,
        truths,
        scale_dbfs,
        snr_db,
        norm_factor,
        origins,
    })
}

/// Builds one mixture from a given pair of records.
pub fn build_mixture_from(lib: &dyn SignalSource, pair: [usize; 2], cfg: &MixtureConfig, rng: &mut impl Rng) -> Result<MixtureSample> {
    cfg.validate()?;
    let (o1, c1) = draw_chunk(lib, pair[0], cfg.window_len, cfg, rng)?;
    let (o2, c2) = draw_chunk(lib, pair[1], cfg.window_len, cfg, rng)?;
    mix_chunks([c1, c2], [o1, o2], cfg, rng)
}

/// Draws two distinct records at random and mixes them.
pub fn build_mixture(lib: &dyn SignalSource, cfg: &MixtureConfig, rng: &mut impl Rng) -> Result<MixtureSample> {
    let n = lib.record_count();
    if n < 2 {
        return param(format!("need at least 2 records to mix, library has {n}"));
    }
    let a = rng.random_range(0..n);
    let b = (a + rng.random_range(1..n)) % n;
    build_mixture_from(lib, [a, b], cfg, rng)
}

/// `count` independent mixtures; mixture `i` uses its own seed stream, so the
/// result does not depend on thread scheduling.
pub fn build_mixtures(lib: &dyn SignalSource, count: usize, cfg: &MixtureConfig, seed: u64) -> Result<Vec<MixtureSample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| build_mixture(lib, cfg, &mut ChaCha8Rng::seed_from_u64(record_seed(seed, i))))
        .collect()
}

/// Pairs every record exactly once (an odd record out is dropped) after a seeded shuffle.
pub fn test_pairs(records: usize, seed: u64) -> Vec<[usize; 2]> {
    let mut order: Vec<usize> = (0..records).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks_exact(2).map(|p| [p[0], p[1]]).collect()
}

/// The deterministic test set: one mixture per pair from [`test_pairs`].
/// With `windows > 1` each mixture spans that many consecutive windows of the
/// same records, scaled and normalized as a whole.
pub fn build_test_set(lib: &dyn SignalSource, cfg: &MixtureConfig, windows: usize, seed: u64) -> Result<Vec<MixtureSample>> {
    if windows == 0 {
        return param("at least one window per test mixture");
    }
    let long = MixtureConfig {
        window_len: cfg.window_len * windows,
        ..*cfg
    };
    test_pairs(lib.record_count(), seed)
        .into_par_iter()
        .enumerate()
        .map(|(i, pair)| build_mixture_from(lib, pair, &long, &mut ChaCha8Rng::seed_from_u64(record_seed(seed, i as u64))))
        .collect()
}
