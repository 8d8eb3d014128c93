//! Intrapulse modulation codes: polyphase (Frank, P1, P3), binary Barker
//! and Costas frequency-hop orders.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseCodeKind {
    Frank,
    P1,
    P3,
    Barker,
}

/// Chip phases in radians, in transmission order.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseCode {
    pub phases: Vec<f64>,
}

impl PhaseCode {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

pub const FRANK_P1_LENGTHS: std::ops::RangeInclusive<usize> = 3..=8;
pub const P3_LENGTHS: std::ops::RangeInclusive<usize> = 3..=20;
pub const BARKER_LENGTHS: [usize; 7] = [2, 3, 4, 5, 7, 11, 13];
pub const COSTAS_LENGTHS: [usize; 7] = [3, 4, 5, 6, 8, 9, 10];

const BARKER_SEQUENCES: [&[i8]; 7] = [
    &[1, -1],
    &[1, 1, -1],
    &[1, 1, -1, 1],
    &[1, 1, 1, -1, 1],
    &[1, 1, 1, -1, -1, 1, -1],
    &[1, 1, 1, -1, -1, -1, 1, -1, -1, 1, -1],
    &[1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1],
];

// One verified Costas permutation per length; the remaining arrays are the
// dihedral images of these (rotations and reflections preserve the property).
const COSTAS_BASE: [&[usize]; 7] = [
    &[0, 2, 1],
    &[0, 1, 3, 2],
    &[0, 2, 3, 1, 4],
    &[0, 2, 1, 5, 3, 4],
    &[1, 5, 2, 7, 6, 4, 0, 3],
    &[0, 2, 6, 3, 8, 7, 5, 1, 4],
    &[0, 1, 3, 7, 4, 9, 8, 6, 2, 5],
];

/// Chip phases for the given code family.
///
/// For Frank and P1 `code_length` is the order `M` and the code has `M²` chips;
/// for P3 and Barker it is the chip count.
pub fn phase_code(kind: PhaseCodeKind, code_length: usize) -> Result<PhaseCode> {
    let phases = match kind {
        PhaseCodeKind::Frank => {
            if code_length == 0 {
                return param("Frank code order must be positive");
            }
            let m = code_length;
            let mut p = Vec::with_capacity(m * m);
            for i in 0..m {
                for j in 0..m {
                    p.push(2.0 * PI * (i * j) as f64 / m as f64);
                }
            }
            p
        }
        PhaseCodeKind::P1 => {
            if code_length == 0 {
                return param("P1 code order must be positive");
            }
            let m = code_length as f64;
            let mut p = Vec::with_capacity(code_length * code_length);
            // Groups j = 1..M, elements i = 1..M within a group.
            for j in 1..=code_length {
                for i in 1..=code_length {
                    let (i, j) = (i as f64, j as f64);
                    p.push(-(PI / m) * (m - (2.0 * j - 1.0)) * ((j - 1.0) * m + (i - 1.0)));
                }
            }
            p
        }
        PhaseCodeKind::P3 => {
            if code_length == 0 {
                return param("P3 code length must be positive");
            }
            let m = code_length as f64;
            (0..code_length)
                .map(|i| PI * (i * i) as f64 / m)
                .collect()
        }
        PhaseCodeKind::Barker => {
            let seq = barker_sequence(code_length)?;
            seq.iter()
                .map(|&b| if b > 0 { 0.0 } else { PI })
                .collect()
        }
    };
    Ok(PhaseCode { phases })
}

/// The canonical ±1 Barker sequence of the given length.
pub fn barker_sequence(code_length: usize) -> Result<&'static [i8]> {
    match BARKER_LENGTHS.iter().position(|&l| l == code_length) {
        Some(idx) => Ok(BARKER_SEQUENCES[idx]),
        None => param(format!(
            "no Barker code of length {code_length} (supported: {BARKER_LENGTHS:?})"
        )),
    }
}

/// All stored Costas permutations of the given length.
pub fn costas_arrays(code_length: usize) -> Result<Vec<Vec<usize>>> {
    let Some(idx) = COSTAS_LENGTHS.iter().position(|&l| l == code_length) else {
        return param(format!(
            "no Costas array of length {code_length} (supported: {COSTAS_LENGTHS:?})"
        ));
    };
    let base = COSTAS_BASE[idx];
    let n = base.len();
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(8);
    let mut cur = base.to_vec();
    for _ in 0..4 {
        for candidate in [cur.clone(), reverse(&cur)] {
            if !out.contains(&candidate) {
                out.push(candidate);
            }
        }
        cur = rotate(&cur, n);
    }
    Ok(out)
}

/// Picks one of the stored Costas permutations uniformly at random.
pub fn costas_sequence(code_length: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut arrays = costas_arrays(code_length)?;
    let pick = rng.random_range(0..arrays.len());
    Ok(arrays.swap_remove(pick))
}

fn reverse(p: &[usize]) -> Vec<usize> {
    p.iter().rev().copied().collect()
}

// Quarter turn of the permutation matrix: dot (i, p[i]) maps to (p[i], n-1-i).
fn rotate(p: &[usize], n: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    for (i, &v) in p.iter().enumerate() {
        out[v] = n - 1 - i;
    }
    out
}
