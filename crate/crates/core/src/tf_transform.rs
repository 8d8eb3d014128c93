//! Fixed time-frequency front and back ends: centered Hann STFT, overlap-add
//! inverse, log-amplitude/phase encoding and complex mask decoding.
//!
//! The inverse transform and the mask decoder also expose their adjoints so the
//! network can be trained end to end in the time domain.

use std::f64::consts::{LN_10, PI};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{dim, param, Error, Result};

/// Amplitude floor inside `log10`.
pub const LOG_EPS: f64 = 1e-8;
/// Floor for the squared-window normalization of the inverse transform.
pub const WSUM_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 512,
            hop: 256,
            fft_size: 512,
        }
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize) -> Self {
        Self {
            window_len,
            hop,
            fft_size: window_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size != self.window_len || self.fft_size < 2 || !self.fft_size.is_multiple_of(2) {
            return param(format!(
                "window length ({}) must equal the FFT size ({}) and be even",
                self.window_len, self.fft_size
            ));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return param(format!("hop {} outside (0, {}]", self.hop, self.window_len));
        }
        Ok(())
    }

    /// Number of one-sided frequency bins.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames for a signal of `len` samples (centered framing).
    pub fn frames(&self, len: usize) -> Result<usize> {
        if !len.is_multiple_of(self.hop) {
            return dim(format!(
                "signal length {len} is not a multiple of the hop {}",
                self.hop
            ));
        }
        if len <= self.pad() {
            return dim(format!(
                "signal length {len} too short for reflect padding of {}",
                self.pad()
            ));
        }
        Ok(len / self.hop + 1)
    }

    /// Signal length reconstructed from `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        frames.saturating_sub(1) * self.hop
    }

    fn pad(&self) -> usize {
        self.fft_size / 2
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// An `F × T` one-sided complex STFT.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub values: Array2<Complex64>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Log10-amplitude (channel 0) and phase (channel 1) stacked along a third axis.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFeatures {
    pub values: Array3<f64>,
}

/// One complex mask per output source.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub masks: [Array2<Complex64>; 2],
}

/// Planned forward/inverse transform for one configuration.
#[derive(Clone)]
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window: hann(config.window_len),
            fft: planner.plan_fft_forward(config.fft_size),
            ifft: planner.plan_fft_inverse(config.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Centered (reflect-padded), Hann-windowed, one-sided STFT.
    pub fn forward(&self, x: &[f64]) -> Result<ComplexSpectrogram> {
        let cfg = &self.config;
        let frames = cfg.frames(x.len())?;
        let padded = reflect_pad(x, cfg.pad());
        let n = cfg.fft_size;
        let bins = cfg.bins();
        let mut values = Array2::zeros((bins, frames));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = t * cfg.hop;
            for (m, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(padded[start + m] * self.window[m], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                values[[k, t]] = buf[k];
            }
        }
        Ok(ComplexSpectrogram {
            values,
            config: *cfg,
        })
    }

    /// Overlap-add inverse normalized by the running sum of squared windows.
    pub fn inverse(&self, spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let (bins, frames) = spec.values.dim();
        self.check_grid(bins, frames)?;
        let n = cfg.fft_size;
        let padded_len = (frames - 1) * cfg.hop + n;
        let mut out = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            self.fill_hermitian(&mut buf, |k| spec.values[[k, t]]);
            self.ifft.process(&mut buf);
            let start = t * cfg.hop;
            for m in 0..n {
                out[start + m] += self.window[m] * buf[m].re / n as f64;
            }
        }
        let wsum = self.window_sum(frames);
        let pad = cfg.pad();
        let len = cfg.signal_len(frames);
        Ok((0..len)
            .map(|i| out[pad + i] / wsum[pad + i].max(WSUM_FLOOR))
            .collect())
    }

    /// Adjoint of [`Stft::inverse`]: maps `∂L/∂x` to `∂L/∂Re X + i·∂L/∂Im X`.
    pub fn inverse_backward(&self, grad: &[f64], frames: usize) -> Result<Array2<Complex64>> {
        let cfg = &self.config;
        if grad.len() != cfg.signal_len(frames) {
            return dim(format!(
                "gradient length {} does not match {frames} frames",
                grad.len()
            ));
        }
        let n = cfg.fft_size;
        let bins = cfg.bins();
        let pad = cfg.pad();
        let wsum = self.window_sum(frames);
        let mut scaled = vec![0.0; (frames - 1) * cfg.hop + n];
        for (i, g) in grad.iter().enumerate() {
            scaled[pad + i] = g / wsum[pad + i].max(WSUM_FLOOR);
        }
        let mut out = Array2::zeros((bins, frames));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = t * cfg.hop;
            for (m, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(self.window[m] * scaled[start + m], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                let edge = k == 0 || k == n / 2;
                let c = if edge { 1.0 } else { 2.0 } / n as f64;
                let im = if edge { 0.0 } else { c * buf[k].im };
                out[[k, t]] = Complex64::new(c * buf[k].re, im);
            }
        }
        Ok(out)
    }

    fn check_grid(&self, bins: usize, frames: usize) -> Result<()> {
        if bins != self.config.bins() || frames < 2 {
            return dim(format!(
                "spectrogram {bins}x{frames} incompatible with {} bins",
                self.config.bins()
            ));
        }
        Ok(())
    }

    fn fill_hermitian(&self, buf: &mut [Complex64], value: impl Fn(usize) -> Complex64) {
        let n = self.config.fft_size;
        buf[0] = Complex64::new(value(0).re, 0.0);
        buf[n / 2] = Complex64::new(value(n / 2).re, 0.0);
        for k in 1..n / 2 {
            let v = value(k);
            buf[k] = v;
            buf[n - k] = v.conj();
        }
    }

    fn window_sum(&self, frames: usize) -> Vec<f64> {
        let cfg = &self.config;
        let mut wsum = vec![0.0; (frames - 1) * cfg.hop + cfg.fft_size];
        for t in 0..frames {
            for (m, w) in self.window.iter().enumerate() {
                wsum[t * cfg.hop + m] += w * w;
            }
        }
        wsum
    }
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| x[pad - i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|j| x[n - 2 - j]));
    out
}

pub fn stft(x: &[f64], config: StftConfig) -> Result<ComplexSpectrogram> {
    Stft::new(config)?.forward(x)
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
    Stft::new(spec.config)?.inverse(spec)
}

/// Phase in `(-π, π]`.
fn phase(c: Complex64) -> f64 {
    let p = c.im.atan2(c.re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

pub fn encode_logamp_phase(spec: &ComplexSpectrogram) -> StackedFeatures {
    let (bins, frames) = spec.values.dim();
    let mut values = Array3::zeros((bins, frames, 2));
    for ((k, t), c) in spec.values.indexed_iter() {
        values[[k, t, 0]] = c.norm().max(LOG_EPS).log10();
        values[[k, t, 1]] = phase(*c);
    }
    StackedFeatures { values }
}

/// Builds the two complex masks from `[logamp₁, logamp₂, phase₁, phase₂]` channels.
pub fn decode_masks(raw: &Array3<f64>) -> Result<MaskPair> {
    let (bins, frames, ch) = raw.dim();
    if ch != 4 {
        return dim(format!("mask parameters need 4 channels, got {ch}"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite mask parameters".into()));
    }
    let mut masks = [Array2::zeros((bins, frames)), Array2::zeros((bins, frames))];
    for (c, mask) in masks.iter_mut().enumerate() {
        for ((k, t), m) in mask.indexed_iter_mut() {
            *m = Complex64::from_polar(10f64.powf(raw[[k, t, c]]), raw[[k, t, c + 2]]);
        }
    }
    Ok(MaskPair { masks })
}

/// Multiplies each mask with the mixture spectrogram. Returns the masked spectrograms.
pub fn mask_spectrograms(masks: &MaskPair, mixture: &ComplexSpectrogram) -> Result<[ComplexSpectrogram; 2]> {
    for m in &masks.masks {
        if m.dim() != mixture.values.dim() {
            return dim(format!(
                "mask {:?} does not match spectrogram {:?}",
                m.dim(),
                mixture.values.dim()
            ));
        }
    }
    Ok([0, 1].map(|c| ComplexSpectrogram {
        values: &masks.masks[c] * &mixture.values,
        config: mixture.config,
    }))
}

/// `x_c = istft(mask_c ∘ X)` for both sources.
pub fn apply_masks(masks: &MaskPair, mixture: &ComplexSpectrogram, stft: &Stft) -> Result<(Vec<f64>, Vec<f64>)> {
    let [a, b] = mask_spectrograms(masks, mixture)?;
    Ok((stft.inverse(&a)?, stft.inverse(&b)?))
}

/// Gradient of the loss w.r.t. the raw mask parameters, given the gradients
/// w.r.t. the masked spectrograms `Y_c = M_c ∘ X`.
pub fn decode_masks_backward(
    raw: &Array3<f64>,
    mixture: &ComplexSpectrogram,
    grad_masked: [&Array2<Complex64>; 2],
) -> Array3<f64> {
    let mut grad = Array3::zeros(raw.dim());
    for (c, g) in grad_masked.iter().enumerate() {
        for ((k, t), gy) in g.indexed_iter() {
            let m = Complex64::from_polar(10f64.powf(raw[[k, t, c]]), raw[[k, t, c + 2]]);
            let y = m * mixture.values[[k, t]];
            grad[[k, t, c]] = LN_10 * (gy.re * y.re + gy.im * y.im);
            grad[[k, t, c + 2]] = gy.im * y.re - gy.re * y.im;
        }
    }
    grad
}
