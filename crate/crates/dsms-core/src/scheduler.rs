//! Utility-weighted bandwidth scheduling.
//!
//! Each agent reports a scalar utility for its pending message. The
//! scheduler turns the utility vector into simplex weights (a tempered
//! softmax, optionally perturbed by Gumbel noise during training) and then
//! into even per-agent budgets:
//!
//! ```text
//! b_i = 2 * ceil((B/2 - n) * w_i)
//! ```
//!
//! The `-n` headroom absorbs the per-agent ceiling overshoot, so the total
//! never exceeds `B`, and strictly positive weights guarantee everyone at
//! least two units. The training-time `soft_ceil` counterpart of the
//! ceiling is a straight-through op: forward `ceil(x)`, backward identity
//! (see the tape op in [`crate::nn`]).

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("invalid temperature {0}: must be positive and finite")]
    InvalidTemperature(f64),
    #[error("invalid utilities: {0}")]
    InvalidUtilities(String),
    #[error("insufficient bandwidth {bandwidth} for {agents} agents: {reason}")]
    InsufficientBandwidth {
        bandwidth: usize,
        agents: usize,
        reason: &'static str,
    },
    #[error("weight vector is not a valid simplex point: {0}")]
    InvalidWeights(String),
    #[error("noise length {got} does not match {expected} agents")]
    NoiseLengthMismatch { got: usize, expected: usize },
}

/// Per-agent message utilities, one unbounded finite scalar each.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityVector(Vec<f64>);

impl UtilityVector {
    pub fn new(u: Vec<f64>) -> Result<Self, SchedulerError> {
        if u.is_empty() {
            return Err(SchedulerError::InvalidUtilities("empty".into()));
        }
        if let Some(idx) = u.iter().position(|v| !v.is_finite()) {
            return Err(SchedulerError::InvalidUtilities(format!(
                "non-finite entry at index {idx}"
            )));
        }
        Ok(Self(u))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Importance weights on the probability simplex: strictly positive,
/// summing to one within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self, SchedulerError> {
        if w.is_empty() {
            return Err(SchedulerError::InvalidWeights("empty".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(SchedulerError::InvalidWeights(
                "entries must be finite and strictly positive".into(),
            ));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SchedulerError::InvalidWeights(format!(
                "sum {sum} deviates from 1 by more than 1e-9"
            )));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Even per-agent bandwidth grants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetVector(Vec<usize>);

impl BudgetVector {
    pub fn new(b: Vec<usize>) -> Self {
        Self(b)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

/// Draw standard Gumbel(0, 1) noise, one sample per agent.
pub fn sample_gumbel_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-12..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Tempered softmax of `(u + g) / temperature`.
///
/// `noise` is the per-agent Gumbel perturbation; pass `None` in evaluation
/// mode for the plain noiseless softmax. The max is subtracted before
/// exponentiation for numerical stability.
pub fn gumbel_softmax(
    u: &UtilityVector,
    temperature: f64,
    noise: Option<&[f64]>,
) -> Result<WeightVector, SchedulerError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(SchedulerError::InvalidTemperature(temperature));
    }
    if let Some(g) = noise {
        if g.len() != u.len() {
            return Err(SchedulerError::NoiseLengthMismatch {
                got: g.len(),
                expected: u.len(),
            });
        }
    }
    let logits: Vec<f64> = u
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &ui)| (ui + noise.map_or(0.0, |g| g[i])) / temperature)
        .collect();
    Ok(WeightVector(softmax(&logits)))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Straight-through ceiling, forward half: the value is `ceil(x)`.
///
/// The backward half of the contract — gradient exactly 1 — lives with the
/// corresponding tape op in [`crate::nn`].
pub fn soft_ceil(x: f64) -> f64 {
    x.ceil()
}

/// Split an even total bandwidth `B` into even per-agent budgets.
///
/// Requires `B >= 2n + 2` so the multiplier `B/2 - n` stays positive and
/// every agent can receive its two-unit minimum. Guarantees
/// `sum(b) <= B`, `b_i >= 2` and `b_i` even.
pub fn allocate(
    w: &WeightVector,
    bandwidth: usize,
    n: usize,
) -> Result<BudgetVector, SchedulerError> {
    if n == 0 || w.len() != n {
        return Err(SchedulerError::InvalidWeights(format!(
            "weight vector has {} entries, expected {n}",
            w.len()
        )));
    }
    if !bandwidth.is_multiple_of(2) {
        return Err(SchedulerError::InsufficientBandwidth {
            bandwidth,
            agents: n,
            reason: "bandwidth must be even",
        });
    }
    if bandwidth < 2 * n + 2 {
        return Err(SchedulerError::InsufficientBandwidth {
            bandwidth,
            agents: n,
            reason: "need at least 2n + 2 units so every agent keeps a two-unit minimum",
        });
    }
    let multiplier = (bandwidth / 2 - n) as f64;
    let budgets: Vec<usize> = w
        .as_slice()
        .iter()
        .map(|&wi| 2 * soft_ceil(multiplier * wi) as usize)
        .collect();
    debug_assert!(budgets.iter().sum::<usize>() <= bandwidth);
    Ok(BudgetVector(budgets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_utilities_give_uniform_weights() {
        let u = UtilityVector::new(vec![1.0; 4]).unwrap();
        for tau in [0.1, 1.0, 7.5] {
            let w = gumbel_softmax(&u, tau, None).unwrap();
            for &wi in w.as_slice() {
                assert!((wi - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_noise_matches_plain_softmax() {
        let u = UtilityVector::new(vec![0.0, 0.0]).unwrap();
        let w = gumbel_softmax(&u, 1.0, Some(&[0.0, 0.0])).unwrap();
        assert!((w.as_slice()[0] - 0.5).abs() < 1e-12);
        assert!((w.as_slice()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weights_form_a_simplex_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(2..12);
            let u = UtilityVector::new((0..n).map(|_| rng.gen_range(-30.0..30.0)).collect())
                .unwrap();
            let noise = sample_gumbel_noise(&mut rng, n);
            let tau = rng.gen_range(0.05..5.0);
            let w = gumbel_softmax(&u, tau, Some(&noise)).unwrap();
            let sum: f64 = w.as_slice().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(w.as_slice().iter().all(|&wi| wi > 0.0));
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let u = UtilityVector::new(vec![800.0, -800.0, 0.0]).unwrap();
        let w = gumbel_softmax(&u, 0.1, None).unwrap();
        assert!(w.as_slice().iter().all(|wi| wi.is_finite()));
        assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn rejects_non_positive_temperature() {
        let u = UtilityVector::new(vec![1.0, 2.0]).unwrap();
        assert_eq!(
            gumbel_softmax(&u, 0.0, None),
            Err(SchedulerError::InvalidTemperature(0.0))
        );
        assert!(gumbel_softmax(&u, -1.0, None).is_err());
        assert!(gumbel_softmax(&u, f64::NAN, None).is_err());
    }

    #[test]
    fn soft_ceil_forward_values() {
        assert_eq!(soft_ceil(2.3), 3.0);
        assert_eq!(soft_ceil(7.0), 7.0);
        assert_eq!(soft_ceil(-1.2), -1.0);
    }

    #[test]
    fn paper_setting_uniform_weights() {
        // B = 64, n = 4: (32 - 4) * 0.25 = 7 exactly, so budgets are 14 each.
        let w = WeightVector::uniform(4);
        let b = allocate(&w, 64, 4).unwrap();
        assert_eq!(b.as_slice(), &[14, 14, 14, 14]);
        assert_eq!(b.total(), 56);
    }

    #[test]
    fn paper_setting_near_one_hot() {
        let w = WeightVector::new(vec![0.97, 0.01, 0.01, 0.01]).unwrap();
        let b = allocate(&w, 64, 4).unwrap();
        assert_eq!(b.as_slice(), &[56, 2, 2, 2]);
        assert_eq!(b.total(), 62);
    }

    #[test]
    fn minimum_feasible_bandwidth() {
        // B = 2n + 2 leaves a multiplier of exactly 1.
        let w = WeightVector::uniform(3);
        let b = allocate(&w, 8, 3).unwrap();
        assert_eq!(b.as_slice(), &[2, 2, 2]);
    }

    #[test]
    fn rejects_odd_or_scarce_bandwidth() {
        let w = WeightVector::uniform(4);
        assert!(matches!(
            allocate(&w, 63, 4),
            Err(SchedulerError::InsufficientBandwidth { .. })
        ));
        assert!(matches!(
            allocate(&w, 8, 4),
            Err(SchedulerError::InsufficientBandwidth { .. })
        ));
    }

    #[test]
    fn conservation_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let n = rng.gen_range(2..=16);
            let bandwidth = 2 * rng.gen_range(n + 1..=512);
            let u = UtilityVector::new((0..n).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .unwrap();
            let noise = sample_gumbel_noise(&mut rng, n);
            let tau = rng.gen_range(0.05..4.0);
            let w = gumbel_softmax(&u, tau, Some(&noise)).unwrap();
            let b = allocate(&w, bandwidth, n).unwrap();
            assert!(b.total() <= bandwidth);
            assert!(b.as_slice().iter().all(|&bi| bi >= 2 && bi % 2 == 0));
        }
    }

    #[test]
    fn growing_a_weight_never_shrinks_its_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(2..=8);
            let bandwidth = 2 * rng.gen_range(n + 1..=128);
            let u = UtilityVector::new((0..n).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .unwrap();
            let w = gumbel_softmax(&u, 1.0, None).unwrap();
            let b = allocate(&w, bandwidth, n).unwrap();

            // Bump agent 0, renormalizing the rest proportionally.
            let mut bumped = w.as_slice().to_vec();
            let delta = rng.gen_range(0.0..(1.0 - bumped[0]) * 0.9);
            let shrink = (1.0 - bumped[0] - delta) / (1.0 - bumped[0]);
            for entry in bumped.iter_mut().skip(1) {
                *entry *= shrink;
            }
            bumped[0] += delta;
            let total: f64 = bumped.iter().sum();
            for entry in bumped.iter_mut() {
                *entry /= total;
            }
            let b2 = allocate(&WeightVector::new(bumped).unwrap(), bandwidth, n).unwrap();
            assert!(b2.get(0) >= b.get(0));
        }
    }

    #[test]
    fn gumbel_noise_is_seed_deterministic() {
        let a = sample_gumbel_noise(&mut ChaCha8Rng::seed_from_u64(42), 8);
        let b = sample_gumbel_noise(&mut ChaCha8Rng::seed_from_u64(42), 8);
        assert_eq!(a, b);
    }
}
