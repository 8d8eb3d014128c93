//! Scale-dependent SDR and the utterance-level permutation-invariant objective
//! for two output channels.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};

/// Lower clamp applied to both energies inside the SD-SDR log ratio.
pub const SDR_CLAMP: f64 = 1e-12;

/// Largest attainable SD-SDR value (error energy clamped).
pub fn sdr_ceiling(reference_energy: f64) -> f64 {
    10.0 * (reference_energy.max(SDR_CLAMP) / SDR_CLAMP).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Permutation {
    Identity,
    Swap,
}

impl Permutation {
    pub const ALL: [Permutation; 2] = [Permutation::Identity, Permutation::Swap];

    /// Estimate channel assigned to truth channel `c`.
    pub fn source_of(self, c: usize) -> usize {
        match self {
            Permutation::Identity => c,
            Permutation::Swap => 1 - c,
        }
    }

    pub fn apply<T>(self, pair: [T; 2]) -> [T; 2] {
        match self {
            Permutation::Identity => pair,
            Permutation::Swap => {
                let [a, b] = pair;
                [b, a]
            }
        }
    }
}

/// How a ground-truth channel with zero energy is handled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroReferencePolicy {
    /// Drop the channel from the average; the remaining channel still decides the permutation.
    #[default]
    Skip,
    /// Fail with [`Error::ZeroReference`].
    Error,
}

struct SdrTerms {
    value: f64,
    alpha: f64,
    num_active: bool,
    den_active: bool,
    num: f64,
    den: f64,
}

fn sd_sdr_terms(s: &[f64], est: &[f64]) -> Result<SdrTerms> {
    if s.len() != est.len() {
        return dim(format!("reference length {} vs estimate length {}", s.len(), est.len()));
    }
    let energy: f64 = s.iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let dot: f64 = s.iter().zip(est).map(|(a, b)| a * b).sum();
    let alpha = dot / energy;
    let num = alpha * alpha * energy;
    let den: f64 = s.iter().zip(est).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(SdrTerms {
        value: 10.0 * (num.max(SDR_CLAMP) / den.max(SDR_CLAMP)).log10(),
        alpha,
        num_active: num > SDR_CLAMP,
        den_active: den > SDR_CLAMP,
        num,
        den,
    })
}

/// SD-SDR in dB of `estimate` against `reference`.
pub fn sd_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    Ok(sd_sdr_terms(reference, estimate)?.value)
}

/// SD-SDR and its gradient with respect to the estimate.
pub fn sd_sdr_with_grad(reference: &[f64], estimate: &[f64]) -> Result<(f64, Vec<f64>)> {
    let t = sd_sdr_terms(reference, estimate)?;
    let k = 10.0 / LN_10;
    let cn = if t.num_active { k * 2.0 * t.alpha / t.num } else { 0.0 };
    let cd = if t.den_active { k * 2.0 / t.den } else { 0.0 };
    let grad = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| cn * s - cd * (e - s))
        .collect();
    Ok((t.value, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpitOutcome {
    /// Negative mean SD-SDR under the best permutation.
    pub loss: f64,
    pub permutation: Permutation,
    /// SD-SDR of each truth channel against its assigned estimate (`None` if skipped).
    pub channel_sdr: [Option<f64>; 2],
}

impl UpitOutcome {
    pub fn mean_sdr(&self) -> f64 {
        -self.loss
    }
}

fn check_lengths(truths: [&[f64]; 2], estimates: [&[f64]; 2]) -> Result<()> {
    let n = truths[0].len();
    if truths.iter().chain(estimates.iter()).any(|x| x.len() != n) {
        return dim("all channels must have equal length");
    }
    Ok(())
}

fn score(
    truths: [&[f64]; 2],
    estimates: [&[f64]; 2],
    perm: Permutation,
    policy: ZeroReferencePolicy,
) -> Result<(f64, [Option<f64>; 2])> {
    let mut sdr = [None, None];
    for c in 0..2 {
        match sd_sdr(truths[c], estimates[perm.source_of(c)]) {
            Ok(v) => sdr[c] = Some(v),
            Err(Error::ZeroReference) if policy == ZeroReferencePolicy::Skip => {}
            Err(e) => return Err(e),
        }
    }
    let valid: Vec<f64> = sdr.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::ZeroReference);
    }
    // Two-term sum keeps the value exactly symmetric under channel swaps.
    Ok((valid.iter().sum::<f64>() / valid.len() as f64, sdr))
}

/// Full uPIT evaluation with an explicit zero-reference policy.
pub fn upit(truths: [&[f64]; 2], estimates: [&[f64]; 2], policy: ZeroReferencePolicy) -> Result<UpitOutcome> {
    check_lengths(truths, estimates)?;
    let (id_score, id_sdr) = score(truths, estimates, Permutation::Identity, policy)?;
    let (sw_score, sw_sdr) = score(truths, estimates, Permutation::Swap, policy)?;
    // Ties go to the identity.
    Ok(if sw_score > id_score {
        UpitOutcome {
            loss: -sw_score,
            permutation: Permutation::Swap,
            channel_sdr: sw_sdr,
        }
    } else {
        UpitOutcome {
            loss: -id_score,
            permutation: Permutation::Identity,
            channel_sdr: id_sdr,
        }
    })
}

/// `-max_π ½ Σ_c SD-SDR(s_c, ŝ_π(c))`.
pub fn upit_loss(truths: [&[f64]; 2], estimates: [&[f64]; 2]) -> Result<f64> {
    Ok(upit(truths, estimates, ZeroReferencePolicy::default())?.loss)
}

pub fn best_permutation(truths: [&[f64]; 2], estimates: [&[f64]; 2]) -> Result<Permutation> {
    Ok(upit(truths, estimates, ZeroReferencePolicy::default())?.permutation)
}

/// uPIT loss plus its gradient with respect to both estimate channels.
pub fn upit_with_grad(
    truths: [&[f64]; 2],
    estimates: [&[f64]; 2],
    policy: ZeroReferencePolicy,
) -> Result<(UpitOutcome, [Vec<f64>; 2])> {
    let outcome = upit(truths, estimates, policy)?;
    let n = truths[0].len();
    let mut grads = [vec![0.0; n], vec![0.0; n]];
    let active = outcome.channel_sdr.iter().flatten().count() as f64;
    for c in 0..2 {
        if outcome.channel_sdr[c].is_none() {
            continue;
        }
        let src = outcome.permutation.source_of(c);
        let (_, g) = sd_sdr_with_grad(truths[c], estimates[src])?;
        for (acc, v) in grads[src].iter_mut().zip(g) {
            *acc -= v / active;
        }
    }
    Ok((outcome, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn half_scaled_estimate_is_zero_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random(1000, &mut rng);
        let e: Vec<f64> = s.iter().map(|v| 0.5 * v).collect();
        assert_eq!(sd_sdr(&s, &e).unwrap(), 0.0);
    }

    #[test]
    fn perfect_and_orthogonal_estimates_hit_clamps() {
        let s = [1.0, 0.0, 2.0];
        assert_eq!(sd_sdr(&s, &s).unwrap(), sdr_ceiling(5.0));
        assert!(sd_sdr(&s, &s).unwrap() > 120.0);
        let ortho = [0.0, 3.0, 0.0];
        let v = sd_sdr(&s, &ortho).unwrap();
        assert!(v < -120.0 && v.is_finite());
    }

    #[test]
    fn zero_reference_is_an_error() {
        assert!(matches!(sd_sdr(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroReference)));
        assert!(matches!(sd_sdr(&[1.0], &[1.0, 0.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn swapped_unit_vectors() {
        let (s1, s2) = ([1.0, 0.0], [0.0, 1.0]);
        let out = upit([&s1, &s2], [&s2, &s1], ZeroReferencePolicy::Skip).unwrap();
        assert_eq!(out.permutation, Permutation::Swap);
        assert_eq!(out.loss, -sdr_ceiling(1.0));
    }

    #[test]
    fn best_permutation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random(64, &mut rng), random(64, &mut rng));
        assert_eq!(best_permutation([&a, &b], [&a, &b]).unwrap(), Permutation::Identity);
        assert_eq!(best_permutation([&a, &b], [&b, &a]).unwrap(), Permutation::Swap);
        let c = random(64, &mut rng);
        // Identical estimates score equally under both permutations.
        assert_eq!(best_permutation([&a, &b], [&c, &c]).unwrap(), Permutation::Identity);
    }

    #[test]
    fn skip_policy_drops_silent_channel() {
        let s1 = [1.0, 2.0, 3.0];
        let zero = [0.0; 3];
        let est = [[0.0, 0.1, 0.0], [1.0, 2.0, 3.1]];
        let out = upit([&s1, &zero], [&est[0], &est[1]], ZeroReferencePolicy::Skip).unwrap();
        assert_eq!(out.permutation, Permutation::Swap);
        assert!(out.channel_sdr[1].is_none());
        assert_eq!(out.loss, -sd_sdr(&s1, &est[1]).unwrap());
        assert!(upit([&s1, &zero], [&est[0], &est[1]], ZeroReferencePolicy::Error).is_err());
        assert!(upit([&zero, &zero], [&est[0], &est[1]], ZeroReferencePolicy::Skip).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s1, s2) = (random(32, &mut rng), random(32, &mut rng));
        let e1: Vec<f64> = s1.iter().map(|v| 0.7 * v + 0.2 * rng.random_range(-1.0..1.0)).collect();
        let e2: Vec<f64> = s2.iter().map(|v| 0.4 * v + 0.3 * rng.random_range(-1.0..1.0)).collect();
        for est in [[e1.clone(), e2.clone()], [e2.clone(), e1.clone()]] {
            let (_, grads) = upit_with_grad([&s1, &s2], [&est[0], &est[1]], ZeroReferencePolicy::Skip).unwrap();
            for ch in 0..2 {
                for i in 0..32 {
                    let h = 1e-6;
                    let mut p = est.clone();
                    p[ch][i] += h;
                    let mut m = est.clone();
                    m[ch][i] -= h;
                    let fp = upit_loss([&s1, &s2], [&p[0], &p[1]]).unwrap();
                    let fm = upit_loss([&s1, &s2], [&m[0], &m[1]]).unwrap();
                    let numeric = (fp - fm) / (2.0 * h);
                    let a = grads[ch][i];
                    assert!((a - numeric).abs() <= 1e-3 * a.abs().max(numeric.abs()).max(1e-6), "{a} vs {numeric}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn loss_is_invariant_to_channel_swaps(seed in any::<u64>(), n in 2usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = [random(n, &mut rng), random(n, &mut rng)];
            let e = [random(n, &mut rng), random(n, &mut rng)];
            let base = upit_loss([&s[0], &s[1]], [&e[0], &e[1]]).unwrap();
            prop_assert_eq!(base, upit_loss([&s[1], &s[0]], [&e[0], &e[1]]).unwrap());
            prop_assert_eq!(base, upit_loss([&s[0], &s[1]], [&e[1], &e[0]]).unwrap());
            let identity = -(sd_sdr(&s[0], &e[0]).unwrap() + sd_sdr(&s[1], &e[1]).unwrap()) / 2.0;
            prop_assert!(base <= identity);
        }

        #[test]
        fn scaled_reference_matches_closed_form(seed in any::<u64>(), alpha in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random(128, &mut rng);
            let e: Vec<f64> = s.iter().map(|v| alpha * v).collect();
            let expected = 10.0 * (alpha * alpha / ((1.0 - alpha) * (1.0 - alpha))).log10();
            prop_assert!((sd_sdr(&s, &e).unwrap() - expected).abs() < 1e-9);
        }
    }
}
