//! Pulse synthesis and pulse-train assembly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{codes, sample_pri, IntrapulseKind, InterpulseKind, WaveformSpec};
use crate::error::{param, Result};
use crate::signal::{TimeSignal, SAMPLE_RATE};

const PULSE_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

/// Parameters of the PRI agility patterns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpulseConfig {
    /// Inclusive range for the number of PRI values in a stagger cycle.
    pub stagger_levels: (usize, usize),
    /// Maximum relative deviation of a jittered PRI from its nominal value.
    pub jitter_fraction: f64,
    /// Inclusive range for the number of dwell PRI values.
    pub dwell_levels: (usize, usize),
    /// Inclusive range for the number of pulses held at one dwell PRI.
    pub dwell_pulses: (usize, usize),
}

impl Default for InterpulseConfig {
    fn default() -> Self {
        Self {
            stagger_levels: (2, 4),
            jitter_fraction: 0.1,
            dwell_levels: (2, 4),
            dwell_pulses: (4, 16),
        }
    }
}

fn spec_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sample index where each of `chips` equal chips starts (plus the end index).
fn chip_bounds(n: usize, chips: usize) -> Vec<usize> {
    (0..=chips)
        .map(|k| ((k * n) as f64 / chips as f64).round() as usize)
        .collect()
}

fn validate(spec: &WaveformSpec) -> Result<()> {
    let ok = spec.pulse_width.is_finite()
        && spec.pulse_width > 0.0
        && spec.frequency.is_finite()
        && spec.frequency >= 0.0
        && spec.bandwidth.is_finite()
        && spec.bandwidth >= 0.0
        && spec.pri_base.is_finite();
    if !ok {
        return param(format!("malformed waveform spec {spec:?}"));
    }
    if spec.interpulse != InterpulseKind::Cw && spec.pri_base < spec.pulse_width {
        return param("PRI shorter than the pulse width");
    }
    Ok(())
}

/// One real passband pulse of `round(PW·fs)` samples with a rectangular envelope.
pub fn synth_pulse(spec: &WaveformSpec) -> Result<TimeSignal> {
    validate(spec)?;
    let fs = SAMPLE_RATE;
    let n = (spec.pulse_width * fs).round() as usize;
    let mut out = vec![0.0; n];
    match spec.kind {
        IntrapulseKind::LinearChirp => {
            let slope = spec.bandwidth / spec.pulse_width;
            for (k, v) in out.iter_mut().enumerate() {
                let t = k as f64 / fs;
                *v = (2.0 * PI * (spec.frequency * t + 0.5 * slope * t * t)).cos();
            }
        }
        IntrapulseKind::Costas => {
            let order = costas_sequence_for(spec)?;
            let hops = order.len();
            if n < hops {
                return param(format!("pulse of {n} samples cannot hold {hops} Costas hops"));
            }
            let step = spec.bandwidth / hops as f64;
            let bounds = chip_bounds(n, hops);
            let mut phase = 0.0_f64;
            for (hop, &slot) in order.iter().enumerate() {
                let f = spec.frequency + (slot as f64 + 0.5) * step;
                let dphi = 2.0 * PI * f / fs;
                for v in &mut out[bounds[hop]..bounds[hop + 1]] {
                    *v = phase.cos();
                    phase = (phase + dphi) % (2.0 * PI);
                }
            }
        }
        kind => {
            let code_kind = kind.phase_code_kind().expect("phase-coded kind");
            let code = codes::phase_code(code_kind, spec.code_length)?;
            if n < code.len() {
                return param(format!(
                    "pulse of {n} samples cannot hold {} chips",
                    code.len()
                ));
            }
            let bounds = chip_bounds(n, code.len());
            for (chip, &phi) in code.phases.iter().enumerate() {
                for k in bounds[chip]..bounds[chip + 1] {
                    let t = k as f64 / fs;
                    out[k] = (2.0 * PI * spec.frequency * t + phi).cos();
                }
            }
        }
    }
    Ok(TimeSignal::new(out, fs))
}

/// The Costas hop order used by `spec` (a pure function of its seed).
pub fn costas_sequence_for(spec: &WaveformSpec) -> Result<Vec<usize>> {
    codes::costas_sequence(spec.code_length, &mut spec_rng(spec.seed, PULSE_STREAM))
}

/// Pulse start indices for a train of `total_len` samples.
pub fn pulse_schedule(
    spec: &WaveformSpec,
    pulse_len: usize,
    total_len: usize,
    cfg: &InterpulseConfig,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let fs = SAMPLE_RATE;
    if spec.interpulse == InterpulseKind::Cw {
        return (0..total_len).step_by(pulse_len.max(1)).collect();
    }

    let draw_levels = |rng: &mut dyn FnMut() -> f64, count: usize| {
        let mut v = vec![spec.pri_base];
        v.extend((1..count).map(|_| rng()));
        v
    };

    let intervals: Box<dyn FnMut(&mut dyn rand::RngCore) -> f64> = match spec.interpulse {
        InterpulseKind::ConstantPri => Box::new(|_| spec.pri_base),
        InterpulseKind::JitterPri => {
            let j = cfg.jitter_fraction;
            Box::new(move |r| spec.pri_base * (1.0 + r.random_range(-j..=j)))
        }
        InterpulseKind::StaggerPri => {
            let k = rng.random_range(cfg.stagger_levels.0..=cfg.stagger_levels.1);
            let levels = draw_levels(&mut || sample_pri(spec.pulse_width, rng), k);
            let mut idx = 0;
            Box::new(move |_| {
                let v = levels[idx % levels.len()];
                idx += 1;
                v
            })
        }
        InterpulseKind::DwellAndSwitch => {
            let k = rng.random_range(cfg.dwell_levels.0..=cfg.dwell_levels.1);
            let levels = draw_levels(&mut || sample_pri(spec.pulse_width, rng), k);
            let holds: Vec<usize> = (0..k)
                .map(|_| rng.random_range(cfg.dwell_pulses.0..=cfg.dwell_pulses.1))
                .collect();
            let (mut level, mut used) = (0, 0);
            Box::new(move |_| {
                if used == holds[level] {
                    level = (level + 1) % levels.len();
                    used = 0;
                }
                used += 1;
                levels[level]
            })
        }
        InterpulseKind::Cw => unreachable!(),
    };
    let mut intervals = intervals;

    let mut toas = Vec::new();
    let mut t = rng.random_range(0.0..spec.pri_base);
    loop {
        let idx = (t * fs).round() as usize;
        if idx >= total_len {
            break;
        }
        toas.push(idx);
        t += intervals(rng);
    }
    toas
}

/// Places copies of `pulse` according to the interpulse pattern of `spec`.
pub fn apply_interpulse(
    pulse: &TimeSignal,
    spec: &WaveformSpec,
    total_len: usize,
    rng: &mut impl Rng,
) -> Result<TimeSignal> {
    apply_interpulse_with(pulse, spec, total_len, &InterpulseConfig::default(), rng)
}

pub fn apply_interpulse_with(
    pulse: &TimeSignal,
    spec: &WaveformSpec,
    total_len: usize,
    cfg: &InterpulseConfig,
    rng: &mut impl Rng,
) -> Result<TimeSignal> {
    if pulse.is_empty() {
        return param("empty pulse");
    }
    if total_len < pulse.len() {
        return param(format!(
            "train length {total_len} shorter than the pulse ({} samples)",
            pulse.len()
        ));
    }
    let mut out = vec![0.0; total_len];
    for start in pulse_schedule(spec, pulse.len(), total_len, cfg, rng) {
        let end = (start + pulse.len()).min(total_len);
        out[start..end].copy_from_slice(&pulse.samples[..end - start]);
    }
    Ok(TimeSignal::new(out, pulse.sample_rate))
}

/// Full pulse train for `spec`; deterministic in the spec (including its seed).
pub fn synthesize(spec: &WaveformSpec, total_len: usize, cfg: &InterpulseConfig) -> Result<TimeSignal> {
    let pulse = synth_pulse(spec)?;
    apply_interpulse_with(&pulse, spec, total_len, cfg, &mut spec_rng(spec.seed, TRAIN_STREAM))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveforms::sample_spec;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rustfft::FftPlanner;

    fn spec(kind: IntrapulseKind, inter: InterpulseKind) -> WaveformSpec {
        WaveformSpec {
            kind,
            interpulse: inter,
            pulse_width: 10e-6,
            pri_base: 100e-6,
            frequency: 5e6,
            bandwidth: 0.0,
            code_length: 1,
            seed: 3,
        }
    }

    fn spectrum(x: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        buf[..x.len() / 2 + 1].iter().map(|c| c.norm()).collect()
    }

    fn peak_freq(x: &[f64]) -> f64 {
        let s = spectrum(x);
        let k = s
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        k as f64 * SAMPLE_RATE / x.len() as f64
    }

    fn analytic_phase(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut planner = FftPlanner::new();
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        planner.plan_fft_forward(n).process(&mut buf);
        for (k, c) in buf.iter_mut().enumerate() {
            if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
                continue;
            } else if k < n.div_ceil(2) {
                *c *= 2.0;
            } else {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        planner.plan_fft_inverse(n).process(&mut buf);
        let mut phase: Vec<f64> = buf.iter().map(|c| c.arg()).collect();
        for i in 1..n {
            while phase[i] - phase[i - 1] > PI {
                phase[i] -= 2.0 * PI;
            }
            while phase[i] - phase[i - 1] < -PI {
                phase[i] += 2.0 * PI;
            }
        }
        phase
    }

    /// Start indices of nonzero runs separated by at least `min_gap` zeros.
    fn toas_from_envelope(x: &[f64], min_gap: usize) -> Vec<usize> {
        let mut toas = Vec::new();
        let mut zeros = min_gap;
        for (i, &v) in x.iter().enumerate() {
            if v != 0.0 {
                if zeros >= min_gap {
                    toas.push(i);
                }
                zeros = 0;
            } else {
                zeros += 1;
            }
        }
        toas
    }

    #[test]
    fn chirp_instantaneous_frequency_is_linear() {
        let mut s = spec(IntrapulseKind::LinearChirp, InterpulseKind::ConstantPri);
        s.frequency = 3e6;
        s.bandwidth = 2e6;
        let x = synth_pulse(&s).unwrap().samples;
        assert_eq!(x.len(), 500);
        let phase = analytic_phase(&x);
        let n = x.len();
        for i in n / 10..9 * n / 10 {
            // Average the finite difference over a short window.
            let w = 5;
            let f = (phase[i + w] - phase[i - w]) / (2 * w) as f64 * SAMPLE_RATE / (2.0 * PI);
            let t = i as f64 / SAMPLE_RATE;
            let expected = 3e6 + 2e6 * t / 10e-6;
            assert!(
                ((f - expected) / expected).abs() < 0.01,
                "sample {i}: {f} vs {expected}"
            );
        }
    }

    #[test]
    fn frank_order_one_is_pure_tone() {
        let s = spec(IntrapulseKind::Frank, InterpulseKind::ConstantPri);
        let x = synth_pulse(&s).unwrap().samples;
        for (k, v) in x.iter().enumerate() {
            let expected = (2.0 * PI * 5e6 * k as f64 / SAMPLE_RATE).cos();
            assert!((v - expected).abs() < 1e-12);
        }
        assert!((peak_freq(&x) - 5e6).abs() < 1.0);
    }

    #[test]
    fn costas_three_hops_use_each_frequency_once() {
        let mut s = spec(IntrapulseKind::Costas, InterpulseKind::ConstantPri);
        s.code_length = 3;
        s.frequency = 5e6;
        s.bandwidth = 9e6;
        s.pulse_width = 12e-6;
        let x = synth_pulse(&s).unwrap().samples;
        let dwell = x.len() / 3;
        let order = costas_sequence_for(&s).unwrap();
        let mut seen = Vec::new();
        for (hop, &slot) in order.iter().enumerate() {
            let f = peak_freq(&x[hop * dwell..(hop + 1) * dwell]);
            let expected = 5e6 + (slot as f64 + 0.5) * 3e6;
            // Bin spacing is fs / 200 = 250 kHz.
            assert!((f - expected).abs() <= 250e3, "{f} vs {expected}");
            seen.push((f / 1e6).round() as i64);
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn too_many_chips_for_pulse_is_rejected() {
        let mut s = spec(IntrapulseKind::Frank, InterpulseKind::ConstantPri);
        s.pulse_width = 0.1e-6;
        s.code_length = 3;
        assert!(synth_pulse(&s).is_err());
    }

    #[test]
    fn constant_pri_spacing() {
        let s = spec(IntrapulseKind::Barker, InterpulseKind::ConstantPri);
        let mut s = s;
        s.code_length = 13;
        let x = synthesize(&s, 1_000_000, &InterpulseConfig::default()).unwrap();
        let toas = toas_from_envelope(&x.samples, 50);
        assert!(toas.len() > 100);
        for w in toas.windows(2) {
            assert_eq!(w[1] - w[0], 5000);
        }
    }

    #[test]
    fn cw_has_no_gaps() {
        let mut s = spec(IntrapulseKind::P3, InterpulseKind::Cw);
        s.code_length = 7;
        let x = synthesize(&s, 20_000, &InterpulseConfig::default()).unwrap();
        // RMS over every 20-sample window (4 carrier periods) stays well above zero.
        for w in x.samples.windows(20).step_by(7) {
            let rms = (w.iter().map(|v| v * v).sum::<f64>() / 20.0).sqrt();
            assert!(rms > 0.3, "rms {rms}");
        }
    }

    #[test]
    fn jitter_pri_stays_within_ten_percent() {
        let mut s = spec(IntrapulseKind::P1, InterpulseKind::JitterPri);
        s.code_length = 4;
        for seed in 0..5 {
            s.seed = seed;
            let x = synthesize(&s, 1_000_000, &InterpulseConfig::default()).unwrap();
            let toas = toas_from_envelope(&x.samples, 50);
            assert!(toas.len() > 100);
            let pri = s.pri_base * SAMPLE_RATE;
            for w in toas.windows(2) {
                let d = (w[1] - w[0]) as f64;
                assert!(d >= 0.9 * pri - 1.0 && d <= 1.1 * pri + 1.0, "{d} vs {pri}");
            }
        }
    }

    #[test]
    fn stagger_and_dwell_use_multiple_levels() {
        for inter in [InterpulseKind::StaggerPri, InterpulseKind::DwellAndSwitch] {
            let mut s = spec(IntrapulseKind::Frank, inter);
            s.code_length = 3;
            s.seed = 11;
            let x = synthesize(&s, 1_000_000, &InterpulseConfig::default()).unwrap();
            let toas = toas_from_envelope(&x.samples, 50);
            let mut diffs: Vec<usize> = toas.windows(2).map(|w| w[1] - w[0]).collect();
            assert!(diffs.iter().all(|&d| d >= 2 * 500 - 1));
            diffs.sort();
            diffs.dedup_by(|a, b| a.abs_diff(*b) <= 1);
            assert!((2..=4).contains(&diffs.len()), "{inter:?}: {diffs:?}");
        }
    }

    #[test]
    fn short_train_is_rejected() {
        let s = spec(IntrapulseKind::Frank, InterpulseKind::ConstantPri);
        let pulse = synth_pulse(&s).unwrap();
        let mut rng = spec_rng(0, 0);
        assert!(apply_interpulse(&pulse, &s, 10, &mut rng).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn pulses_are_bounded_and_in_band(kind_index in 0usize..6, seed in any::<u64>()) {
            let spec = sample_spec(IntrapulseKind::ALL[kind_index], &mut ChaCha8Rng::seed_from_u64(seed));
            let x = synth_pulse(&spec).unwrap().samples;
            prop_assert_eq!(x.len(), (spec.pulse_width * SAMPLE_RATE).round() as usize);
            prop_assert!(x.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
            // One-sided spectrum over [0, fs/2] against the time-domain energy.
            let n = x.len();
            let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            FftPlanner::new().plan_fft_forward(n).process(&mut buf);
            let one_sided: f64 = (0..=n / 2)
                .map(|k| {
                    let weight = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
                    weight * buf[k].norm_sqr()
                })
                .sum::<f64>()
                / n as f64;
            let energy: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!((one_sided / energy - 1.0).abs() < 0.01);
        }
    }
}
