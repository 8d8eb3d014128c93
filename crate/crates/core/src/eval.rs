//! Separation metrics, channel-swap detection across stitched windows and
//! spectrogram rendering.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim, param, Error, Result};
use crate::loss::{upit, Permutation, ZeroReferencePolicy};
use crate::model::{Mode, Model};
use crate::tf_transform::{Stft, StftConfig};
use crate::training::MixtureSample;

/// Anything that maps one mixture window to two estimates.
pub trait Separator: Sync {
    fn window_len(&self) -> usize;
    fn separate(&self, mixture: &[f64]) -> Result<[Vec<f64>; 2]>;
}

impl Separator for Model {
    fn window_len(&self) -> usize {
        self.config.window_len
    }

    fn separate(&self, mixture: &[f64]) -> Result<[Vec<f64>; 2]> {
        self.forward(mixture, Mode::Inference)
    }
}

/// Separates a signal of any length window by window. The tail is zero-padded
/// to a full window and the outputs are truncated back to the input length.
pub fn separate_long(sep: &dyn Separator, signal: &[f64]) -> Result<[Vec<f64>; 2]> {
    let w = sep.window_len();
    if signal.is_empty() {
        return param("cannot separate an empty signal");
    }
    let windows = signal.len().div_ceil(w);
    let mut padded = signal.to_vec();
    padded.resize(windows * w, 0.0);
    let parts = padded
        .par_chunks(w)
        .map(|chunk| sep.separate(chunk))
        .collect::<Result<Vec<_>>>()?;
    let mut out = [Vec::with_capacity(padded.len()), Vec::with_capacity(padded.len())];
    for [a, b] in parts {
        out[0].extend(a);
        out[1].extend(b);
    }
    for o in &mut out {
        o.truncate(signal.len());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_sd_sdr: f64,
    /// Mean SD-SDR over the two channels of every evaluated window.
    pub per_sample_sd_sdr: Vec<f64>,
    /// Fraction of window boundaries at which the best permutation flips.
    pub swap_rate: f64,
    pub boundaries: usize,
    pub count: usize,
}

/// Marks every boundary between consecutive windows whose permutations differ.
pub fn swap_flags(perms: &[Permutation]) -> Vec<bool> {
    perms.windows(2).map(|p| p[0] != p[1]).collect()
}

/// Best permutation of each window against its truths, then [`swap_flags`].
pub fn detect_channel_swaps(estimates: &[[Vec<f64>; 2]], truths: &[[Vec<f64>; 2]]) -> Result<Vec<bool>> {
    if estimates.len() != truths.len() {
        return dim(format!("{} estimate windows but {} truth windows", estimates.len(), truths.len()));
    }
    if estimates.len() < 2 {
        return param("swap detection needs at least two windows");
    }
    let perms = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| Ok(upit([&t[0], &t[1]], [&e[0], &e[1]], ZeroReferencePolicy::Skip)?.permutation))
        .collect::<Result<Vec<_>>>()?;
    Ok(swap_flags(&perms))
}

struct WindowScore {
    sdr: Option<f64>,
    permutation: Option<Permutation>,
}

/// Separates every sample window by window and aggregates uPIT-aligned SD-SDR.
/// Samples spanning several windows also contribute swap boundaries.
pub fn evaluate(sep: &dyn Separator, samples: &[MixtureSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return param("evaluation set is empty");
    }
    let w = sep.window_len();
    let per_sample: Vec<Vec<WindowScore>> = samples
        .par_iter()
        .map(|s| {
            s.windows(w)?
                .iter()
                .map(|win| {
                    let est = sep.separate(&win.mixture)?;
                    match upit([&win.truths[0], &win.truths[1]], [&est[0], &est[1]], ZeroReferencePolicy::Skip) {
                        Ok(o) => Ok(WindowScore {
                            sdr: Some(o.mean_sdr()),
                            permutation: Some(o.permutation),
                        }),
                        Err(Error::ZeroReference) => Ok(WindowScore {
                            sdr: None,
                            permutation: None,
                        }),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut scores = Vec::new();
    let (mut boundaries, mut swaps) = (0usize, 0usize);
    for windows in &per_sample {
        scores.extend(windows.iter().filter_map(|s| s.sdr));
        for pair in windows.windows(2) {
            if let (Some(a), Some(b)) = (pair[0].permutation, pair[1].permutation) {
                boundaries += 1;
                swaps += usize::from(a != b);
            }
        }
    }
    if scores.is_empty() {
        return param("no window with a non-silent reference");
    }
    Ok(EvalReport {
        mean_sd_sdr: scores.iter().sum::<f64>() / scores.len() as f64,
        count: scores.len(),
        per_sample_sd_sdr: scores,
        swap_rate: if boundaries == 0 { 0.0 } else { swaps as f64 / boundaries as f64 },
        boundaries,
    })
}

/// Lower end of the displayed range, in dB relative to the spectrogram peak.
pub const IMAGE_FLOOR_DB: f64 = -80.0;

/// 256-entry RGB palette: black through blue, red and yellow to white.
fn palette() -> Vec<u8> {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.0]),
        (0.25, [0.1, 0.0, 0.6]),
        (0.55, [0.85, 0.1, 0.2]),
        (0.8, [1.0, 0.8, 0.0]),
        (1.0, [1.0, 1.0, 1.0]),
    ];
    let mut out = Vec::with_capacity(768);
    for i in 0..256 {
        let x = i as f64 / 255.0;
        let k = STOPS.iter().rposition(|(p, _)| *p <= x).unwrap_or(0).min(STOPS.len() - 2);
        let (p0, c0) = STOPS[k];
        let (p1, c1) = STOPS[k + 1];
        let t = ((x - p0) / (p1 - p0)).clamp(0.0, 1.0);
        for ch in 0..3 {
            out.push(((c0[ch] + t * (c1[ch] - c0[ch])) * 255.0).round() as u8);
        }
    }
    out
}

/// Palette indices of a log-magnitude spectrogram: `frames` columns, `bins`
/// rows, highest frequency in the top row.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn render_spectrogram(x: &[f64], config: StftConfig, zoom: usize) -> Result<SpectrogramImage> {
    if zoom == 0 {
        return param("zoom must be at least 1");
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("signal contains non-finite samples".into()));
    }
    // Display only: pad the tail to a whole number of hops.
    let mut padded = x.to_vec();
    padded.resize(x.len().div_ceil(config.hop.max(1)) * config.hop.max(1), 0.0);
    let spec = Stft::new(config)?.forward(&padded)?;
    let (bins, frames) = spec.values.dim();
    let mag = spec.values.mapv(|c| c.norm());
    let peak = mag.fold(0.0f64, |m, &v| m.max(v));
    let (width, height) = (frames * zoom, bins * zoom);
    let mut pixels = vec![0u8; width * height];
    for row in 0..height {
        let k = bins - 1 - row / zoom;
        for col in 0..width {
            let m = mag[[k, col / zoom]];
            let db = if peak > 0.0 && m > 0.0 { 20.0 * (m / peak).log10() } else { IMAGE_FLOOR_DB };
            let level = (db.clamp(IMAGE_FLOOR_DB, 0.0) - IMAGE_FLOOR_DB) / -IMAGE_FLOOR_DB;
            pixels[row * width + col] = (level * 255.0).round() as u8;
        }
    }
    Ok(SpectrogramImage { width, height, pixels })
}

/// Writes the spectrogram of `x` as an indexed PNG.
pub fn emit_spectrogram_image(x: &[f64], config: StftConfig, zoom: usize, path: &Path) -> Result<()> {
    let img = render_spectrogram(x, config, zoom)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(palette());
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&img.pixels)?;
    writer.finish()?;
    Ok(())
}
