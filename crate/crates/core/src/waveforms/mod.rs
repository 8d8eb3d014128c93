//! LPI waveform synthesis and parameter sampling.
//!
//! Training signals use Frank, P1 and Costas intrapulse modulation; test
//! signals use P3, Barker and linear chirps. Every pulse train is combined
//! with one of five interpulse patterns (CW, constant, stagger, jitter or
//! dwell-and-switch PRI).

pub mod codes;
pub mod library;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use codes::{costas_sequence, phase_code, PhaseCode, PhaseCodeKind};
pub use library::{generate_library, InMemoryLibrary, Library, LibraryEntry, SignalSource};
pub use synth::{apply_interpulse, apply_interpulse_with, pulse_schedule, synth_pulse, synthesize, InterpulseConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntrapulseKind {
    Frank,
    P1,
    Costas,
    P3,
    Barker,
    LinearChirp,
}

impl IntrapulseKind {
    pub const TRAIN: [IntrapulseKind; 3] = [Self::Frank, Self::P1, Self::Costas];
    pub const TEST: [IntrapulseKind; 3] = [Self::P3, Self::Barker, Self::LinearChirp];
    pub const ALL: [IntrapulseKind; 6] = [
        Self::Frank,
        Self::P1,
        Self::Costas,
        Self::P3,
        Self::Barker,
        Self::LinearChirp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Frank => "frank",
            Self::P1 => "p1",
            Self::Costas => "costas",
            Self::P3 => "p3",
            Self::Barker => "barker",
            Self::LinearChirp => "linear_chirp",
        }
    }

    pub fn phase_code_kind(self) -> Option<PhaseCodeKind> {
        match self {
            Self::Frank => Some(PhaseCodeKind::Frank),
            Self::P1 => Some(PhaseCodeKind::P1),
            Self::P3 => Some(PhaseCodeKind::P3),
            Self::Barker => Some(PhaseCodeKind::Barker),
            Self::Costas | Self::LinearChirp => None,
        }
    }
}

impl fmt::Display for IntrapulseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IntrapulseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm || (norm == "chirp" && *k == Self::LinearChirp))
            .ok_or_else(|| Error::Parameter(format!("unknown intrapulse kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpulseKind {
    Cw,
    ConstantPri,
    StaggerPri,
    JitterPri,
    DwellAndSwitch,
}

impl InterpulseKind {
    pub const ALL: [InterpulseKind; 5] = [
        Self::Cw,
        Self::ConstantPri,
        Self::StaggerPri,
        Self::JitterPri,
        Self::DwellAndSwitch,
    ];
}

/// Drawn parameters of one synthetic emitter. Times in seconds, frequencies in Hz.
///
/// `frequency` is the carrier for phase-coded kinds, the start frequency for
/// chirps and the lower band edge of the hop set for Costas codes.
/// `bandwidth` is zero for phase-coded kinds. `code_length` is the Frank/P1
/// order, the P3/Barker chip count or the Costas hop count (1 for chirps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveformSpec {
    pub kind: IntrapulseKind,
    pub interpulse: InterpulseKind,
    pub pulse_width: f64,
    pub pri_base: f64,
    pub frequency: f64,
    pub bandwidth: f64,
    pub code_length: usize,
    pub seed: u64,
}

pub const PW_RANGE: (f64, f64) = (4e-6, 50e-6);
pub const PRI_OFFSET_RANGE: (f64, f64) = (50e-6, 400e-6);
pub const CARRIER_RANGE: (f64, f64) = (3e6, 23e6);
pub const COSTAS_BANDWIDTH_RANGE: (f64, f64) = (5e6, 23e6);
pub const CHIRP_START_RANGE: (f64, f64) = (3e6, 15e6);
pub const CHIRP_MIN_BANDWIDTH: f64 = 2e6;
pub const CHIRP_MAX_FREQUENCY: f64 = 23e6;
/// Guard band kept between Costas hops and DC/Nyquist.
pub const COSTAS_EDGE_GUARD: f64 = 1e6;

/// Draws a PRI from `[2·PW, 2·PW + U)` with the upper offset `U ∈ [50, 400) µs`.
pub fn sample_pri(pulse_width: f64, rng: &mut impl Rng) -> f64 {
    let span = rng.random_range(PRI_OFFSET_RANGE.0..PRI_OFFSET_RANGE.1);
    2.0 * pulse_width + rng.random_range(0.0..span)
}

/// Draws a complete waveform description for the given intrapulse family.
pub fn sample_spec(kind: IntrapulseKind, rng: &mut impl Rng) -> WaveformSpec {
    let pulse_width = rng.random_range(PW_RANGE.0..PW_RANGE.1);
    let pri_base = sample_pri(pulse_width, rng);
    let interpulse = InterpulseKind::ALL[rng.random_range(0..InterpulseKind::ALL.len())];
    let (frequency, bandwidth, code_length) = match kind {
        IntrapulseKind::Frank | IntrapulseKind::P1 => (
            rng.random_range(CARRIER_RANGE.0..CARRIER_RANGE.1),
            0.0,
            rng.random_range(codes::FRANK_P1_LENGTHS),
        ),
        IntrapulseKind::P3 => (
            rng.random_range(CARRIER_RANGE.0..CARRIER_RANGE.1),
            0.0,
            rng.random_range(codes::P3_LENGTHS),
        ),
        IntrapulseKind::Barker => (
            rng.random_range(CARRIER_RANGE.0..CARRIER_RANGE.1),
            0.0,
            codes::BARKER_LENGTHS[rng.random_range(0..codes::BARKER_LENGTHS.len())],
        ),
        IntrapulseKind::Costas => {
            let bw = rng.random_range(COSTAS_BANDWIDTH_RANGE.0..COSTAS_BANDWIDTH_RANGE.1);
            let hi = crate::signal::SAMPLE_RATE / 2.0 - COSTAS_EDGE_GUARD - bw;
            let lo = rng.random_range(COSTAS_EDGE_GUARD..hi);
            let len = codes::COSTAS_LENGTHS[rng.random_range(0..codes::COSTAS_LENGTHS.len())];
            (lo, bw, len)
        }
        IntrapulseKind::LinearChirp => {
            let start = rng.random_range(CHIRP_START_RANGE.0..CHIRP_START_RANGE.1);
            let bw = rng.random_range(CHIRP_MIN_BANDWIDTH..CHIRP_MAX_FREQUENCY - start);
            (start, bw, 1)
        }
    };
    WaveformSpec {
        kind,
        interpulse,
        pulse_width,
        pri_base,
        frequency,
        bandwidth,
        code_length,
        seed: rng.random(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frank_draws_stay_in_table_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let s = sample_spec(IntrapulseKind::Frank, &mut rng);
            assert!((3e6..23e6).contains(&s.frequency));
            assert!((3..=8).contains(&s.code_length));
        }
    }

    #[test]
    fn seeded_draw_is_repeatable() {
        let a = sample_spec(IntrapulseKind::Costas, &mut ChaCha8Rng::seed_from_u64(77));
        let b = sample_spec(IntrapulseKind::Costas, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a, b);
    }

    #[test]
    fn kind_names_parse() {
        for k in IntrapulseKind::ALL {
            assert_eq!(k.name().parse::<IntrapulseKind>().unwrap(), k);
        }
        assert_eq!("chirp".parse::<IntrapulseKind>().unwrap(), IntrapulseKind::LinearChirp);
        assert!("qpsk".parse::<IntrapulseKind>().is_err());
    }
}
