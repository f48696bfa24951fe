//! Lossy spectral message codec.
//!
//! A fixed-size real message is moved to the frequency domain with a
//! discrete Fourier transform, truncated to the first `budget / 2` complex
//! coefficients (low frequencies first) and reconstructed on the receiving
//! side with an inverse transform. A real signal's spectrum is Hermitian,
//! so only the one-sided half (indices `0..=p/2`) is ever kept.
//!
//! Conventions:
//! * unnormalized forward transform, `1/p` on the inverse;
//! * one bandwidth unit is one real scalar slot, so a complex coefficient
//!   costs two units and every budget is even;
//! * transforms are direct `O(p^2)` summations, which is plenty for the
//!   message sizes this protocol runs at (`p <= 256`).

use num_complex::Complex64;
use thiserror::Error;

/// Default protocol message size shared by all agents.
pub const DEFAULT_MESSAGE_LEN: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("invalid budget {budget}: {reason}")]
    InvalidBudget { budget: usize, reason: &'static str },
    #[error("malformed message: {0}")]
    MalformedMessage(String),
}

/// A real-valued message of protocol size `p`, finite in every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMessage {
    values: Vec<f64>,
}

impl RealMessage {
    pub fn new(values: Vec<f64>) -> Result<Self, CodecError> {
        if values.len() < 2 {
            return Err(CodecError::InvalidMessage(format!(
                "message length {} is below the minimum of 2",
                values.len()
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::InvalidMessage(format!(
                "non-finite entry at index {idx}"
            )));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// One-sided spectrum of a real message: coefficients `0..=floor(p/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMessage {
    coefficients: Vec<Complex64>,
    original_len: usize,
}

impl SpectrumMessage {
    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }
}

/// A spectrum truncated to its first `budget / 2` coefficients.
///
/// `original_len` is the protocol constant `p`; it is known to every
/// receiver and never transmitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedSpectrum {
    coefficients: Vec<Complex64>,
    original_len: usize,
    budget: usize,
}

impl ClippedSpectrum {
    /// Rebuild a clipped spectrum from parts, e.g. after wire decoding.
    pub fn from_parts(
        coefficients: Vec<Complex64>,
        original_len: usize,
    ) -> Result<Self, CodecError> {
        let k = coefficients.len();
        if k == 0 {
            return Err(CodecError::MalformedMessage(
                "clipped spectrum must retain at least one coefficient".into(),
            ));
        }
        if original_len < 2 {
            return Err(CodecError::MalformedMessage(format!(
                "original length {original_len} is below the minimum of 2"
            )));
        }
        if k > one_sided_len(original_len) {
            return Err(CodecError::MalformedMessage(format!(
                "{k} coefficients exceed the one-sided spectrum of a length-{original_len} message"
            )));
        }
        Ok(Self {
            coefficients,
            original_len,
            budget: 2 * k,
        })
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    /// Bandwidth units this spectrum occupies on the medium (`2k`).
    pub fn budget(&self) -> usize {
        self.budget
    }
}

/// Number of one-sided coefficients of a length-`p` real signal.
pub fn one_sided_len(p: usize) -> usize {
    p / 2 + 1
}

/// Bandwidth units needed to send a length-`p` message losslessly.
pub fn full_budget(p: usize) -> usize {
    2 * one_sided_len(p)
}

/// Forward DFT of a real message, one-sided.
///
/// Coefficient `k` is `sum_q msg[q] * exp(-2*pi*i*k*q / p)` for
/// `k = 0..=floor(p/2)`.
pub fn dft_forward(msg: &RealMessage) -> SpectrumMessage {
    let p = msg.len();
    SpectrumMessage {
        coefficients: dft_forward_slice(msg.values()),
        original_len: p,
    }
}

/// Keep the first `budget / 2` coefficients, lowest frequency first.
pub fn clip_spectrum(
    spec: &SpectrumMessage,
    budget: usize,
) -> Result<ClippedSpectrum, CodecError> {
    validate_budget(budget)?;
    let keep = (budget / 2).min(spec.coefficients.len());
    Ok(ClippedSpectrum {
        coefficients: spec.coefficients[..keep].to_vec(),
        original_len: spec.original_len,
        budget: 2 * keep,
    })
}

/// Compress a message to fit `budget` bandwidth units.
pub fn compress(msg: &RealMessage, budget: usize) -> Result<ClippedSpectrum, CodecError> {
    clip_spectrum(&dft_forward(msg), budget)
}

/// Reconstruct the real message a clipped spectrum was cut from.
///
/// Missing high frequencies are treated as zero, the two-sided spectrum is
/// completed by Hermitian symmetry and the inverse transform carries the
/// `1/p` factor. The result is real; any imaginary residue of the inputs
/// (DC and Nyquist slots) is discarded.
pub fn reconstruct(clipped: &ClippedSpectrum) -> Result<RealMessage, CodecError> {
    let p = clipped.original_len;
    let k = clipped.coefficients.len();
    if k > one_sided_len(p) {
        return Err(CodecError::MalformedMessage(format!(
            "{k} coefficients exceed the one-sided spectrum of a length-{p} message"
        )));
    }
    let values = idft_reconstruct_slice(&to_interleaved(&clipped.coefficients), p);
    RealMessage::new(values)
}

fn validate_budget(budget: usize) -> Result<(), CodecError> {
    if budget == 0 {
        return Err(CodecError::InvalidBudget {
            budget,
            reason: "budget must be positive",
        });
    }
    if !budget.is_multiple_of(2) {
        return Err(CodecError::InvalidBudget {
            budget,
            reason: "budget must be even (a coefficient costs two units)",
        });
    }
    Ok(())
}

fn to_interleaved(coefficients: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * coefficients.len());
    for c in coefficients {
        out.push(c.re);
        out.push(c.im);
    }
    out
}

// ---------------------------------------------------------------------------
// Slice kernels. These are the single source of truth for the transform
// math; the differentiable tape ops reuse them so the forward values of the
// training path and the codec path cannot drift apart.
// ---------------------------------------------------------------------------

/// Precomputed angle: `2*pi*((k*q) mod p) / p`. Reducing the product keeps
/// the argument inside one period, which is noticeably more accurate than
/// feeding `sin`/`cos` a large multiple.
#[inline]
fn angle(k: usize, q: usize, p: usize) -> f64 {
    std::f64::consts::TAU * ((k * q) % p) as f64 / p as f64
}

/// One-sided forward DFT as interleaved `(re, im)` pairs of `Complex64`.
pub(crate) fn dft_forward_slice(values: &[f64]) -> Vec<Complex64> {
    let p = values.len();
    let half = one_sided_len(p);
    let mut out = Vec::with_capacity(half);
    for k in 0..half {
        let mut re = 0.0;
        let mut im = 0.0;
        for (q, &x) in values.iter().enumerate() {
            let theta = angle(k, q, p);
            re += x * theta.cos();
            im -= x * theta.sin();
        }
        out.push(Complex64::new(re, im));
    }
    out
}

/// Inverse transform of an interleaved one-sided spectrum (`2k` slots,
/// possibly clipped below `floor(p/2)+1` coefficients) back to `p` real
/// samples, with the `1/p` normalization.
///
/// Algebraically this is the real part of the full two-sided inverse DFT
/// after Hermitian mirroring: interior coefficients count twice, DC and (for
/// even `p`) Nyquist count once with their imaginary slots dropped.
pub(crate) fn idft_reconstruct_slice(interleaved: &[f64], p: usize) -> Vec<f64> {
    debug_assert!(interleaved.len().is_multiple_of(2));
    let k = interleaved.len() / 2;
    debug_assert!(k <= one_sided_len(p));
    let nyquist = if p.is_multiple_of(2) { p / 2 } else { usize::MAX };
    let mut out = vec![0.0; p];
    for (q, sample) in out.iter_mut().enumerate() {
        let mut acc = interleaved[0];
        for m in 1..k {
            let weight = if m == nyquist { 1.0 } else { 2.0 };
            let theta = angle(m, q, p);
            acc += weight * (interleaved[2 * m] * theta.cos() - interleaved[2 * m + 1] * theta.sin());
        }
        *sample = acc / p as f64;
    }
    out
}

/// Adjoint of [`dft_forward_slice`] viewed as a linear map on real vectors:
/// given the gradient w.r.t. the interleaved output, return the gradient
/// w.r.t. the input samples.
pub(crate) fn dft_forward_adjoint(upstream: &[f64], p: usize) -> Vec<f64> {
    debug_assert_eq!(upstream.len(), 2 * one_sided_len(p));
    let half = one_sided_len(p);
    let mut out = vec![0.0; p];
    for (q, g) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..half {
            let theta = angle(k, q, p);
            acc += upstream[2 * k] * theta.cos() - upstream[2 * k + 1] * theta.sin();
        }
        *g = acc;
    }
    out
}

/// Adjoint of [`idft_reconstruct_slice`]: gradient w.r.t. the interleaved
/// clipped spectrum given the gradient w.r.t. the reconstructed samples.
/// The imaginary slots of DC and Nyquist do not influence the forward value,
/// so their adjoints are exactly zero.
pub(crate) fn idft_reconstruct_adjoint(upstream: &[f64], k: usize, p: usize) -> Vec<f64> {
    debug_assert_eq!(upstream.len(), p);
    let nyquist = if p.is_multiple_of(2) { p / 2 } else { usize::MAX };
    let mut out = vec![0.0; 2 * k];
    if k == 0 {
        return out;
    }
    let inv_p = 1.0 / p as f64;
    out[0] = upstream.iter().sum::<f64>() * inv_p;
    for m in 1..k {
        let weight = if m == nyquist { 1.0 } else { 2.0 };
        let mut re = 0.0;
        let mut im = 0.0;
        for (q, &g) in upstream.iter().enumerate() {
            let theta = angle(m, q, p);
            re += g * theta.cos();
            im -= g * theta.sin();
        }
        out[2 * m] = weight * re * inv_p;
        out[2 * m + 1] = weight * im * inv_p;
    }
    out
}

/// Mean squared reconstruction error of a message squeezed through `budget`
/// units, relative to the message's own mean square (so the figure is scale
/// free). Zero-energy messages report absolute MSE instead.
pub fn relative_reconstruction_error(msg: &RealMessage, budget: usize) -> Result<f64, CodecError> {
    let restored = reconstruct(&compress(msg, budget)?)?;
    let p = msg.len() as f64;
    let mse = msg
        .values()
        .iter()
        .zip(restored.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / p;
    let energy = msg.values().iter().map(|v| v * v).sum::<f64>() / p;
    if energy > 0.0 {
        Ok(mse / energy)
    } else {
        Ok(mse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent O(p^2) oracle: full two-sided transform in polar form,
    // no shared code with the production kernels above.
    fn oracle_dft_full(values: &[f64]) -> Vec<Complex64> {
        let p = values.len();
        (0..p)
            .map(|k| {
                values
                    .iter()
                    .enumerate()
                    .map(|(q, &x)| {
                        x * Complex64::from_polar(
                            1.0,
                            -std::f64::consts::TAU * (k as f64) * (q as f64) / p as f64,
                        )
                    })
                    .sum()
            })
            .collect()
    }

    // Inverse oracle: zero-pad the one-sided coefficients, mirror them via
    // Hermitian symmetry and run the full complex inverse sum.
    fn oracle_idft(clipped: &[Complex64], p: usize) -> Vec<f64> {
        let half = one_sided_len(p);
        let mut two_sided = vec![Complex64::new(0.0, 0.0); p];
        for (m, c) in clipped.iter().enumerate().take(half) {
            two_sided[m] = *c;
        }
        for m in half..p {
            two_sided[m] = two_sided[p - m].conj();
        }
        (0..p)
            .map(|q| {
                let sum: Complex64 = two_sided
                    .iter()
                    .enumerate()
                    .map(|(m, c)| {
                        c * Complex64::from_polar(
                            1.0,
                            std::f64::consts::TAU * (m as f64) * (q as f64) / p as f64,
                        )
                    })
                    .sum();
                sum.re / p as f64
            })
            .collect()
    }

    fn random_message(rng: &mut ChaCha8Rng, p: usize) -> RealMessage {
        RealMessage::new((0..p).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn max_abs(xs: impl IntoIterator<Item = f64>) -> f64 {
        xs.into_iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    #[test]
    fn constant_signal_is_pure_dc() {
        let c = 1.75;
        let msg = RealMessage::new(vec![c; 4]).unwrap();
        let spec = dft_forward(&msg);
        assert_eq!(spec.coefficients().len(), 3);
        assert!((spec.coefficients()[0].re - 4.0 * c).abs() < 1e-12);
        assert!(spec.coefficients()[0].im.abs() < 1e-12);
        for coeff in &spec.coefficients()[1..] {
            assert!(coeff.norm() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let msg = RealMessage::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let spec = dft_forward(&msg);
        for coeff in spec.coefficients() {
            assert!((coeff.re - 1.0).abs() < 1e-12);
            assert!(coeff.im.abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in [4usize, 16, 32, 256] {
            let msg = random_message(&mut rng, p);
            let spec = dft_forward(&msg);
            let oracle = oracle_dft_full(msg.values());
            let scale = max_abs(oracle.iter().map(|c| c.norm())).max(1e-30);
            for (k, coeff) in spec.coefficients().iter().enumerate() {
                assert!(
                    (coeff - oracle[k]).norm() / scale <= 1e-9,
                    "p={p} k={k}: {coeff} vs oracle {}",
                    oracle[k]
                );
            }
        }
    }

    #[test]
    fn oracle_confirms_hermitian_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let msg = random_message(&mut rng, 32);
        let full = oracle_dft_full(msg.values());
        for k in 1..32 {
            assert!((full[k] - full[32 - k].conj()).norm() < 1e-9 * 32.0);
        }
    }

    #[test]
    fn reconstruct_matches_inverse_oracle_at_any_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in [4usize, 16, 32] {
            let msg = random_message(&mut rng, p);
            let spec = dft_forward(&msg);
            for budget in (2..=full_budget(p)).step_by(2) {
                let clipped = clip_spectrum(&spec, budget).unwrap();
                let restored = reconstruct(&clipped).unwrap();
                let oracle = oracle_idft(clipped.coefficients(), p);
                let scale = max_abs(oracle.iter().copied()).max(1e-30);
                for (a, b) in restored.values().iter().zip(&oracle) {
                    assert!((a - b).abs() / scale <= 1e-9, "p={p} budget={budget}");
                }
            }
        }
    }

    #[test]
    fn full_budget_round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for p in [4usize, 16, 32, 256] {
            let msg = random_message(&mut rng, p);
            let restored = reconstruct(&compress(&msg, full_budget(p)).unwrap()).unwrap();
            for (a, b) in msg.values().iter().zip(restored.values()) {
                assert!((a - b).abs() <= 1e-6, "p={p}");
            }
        }
    }

    #[test]
    fn constant_signal_survives_minimum_budget() {
        let msg = RealMessage::new(vec![0.4; 16]).unwrap();
        let restored = reconstruct(&compress(&msg, 2).unwrap()).unwrap();
        for v in restored.values() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn budget_two_keeps_only_dc() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let msg = random_message(&mut rng, 32);
        let clipped = compress(&msg, 2).unwrap();
        assert_eq!(clipped.coefficients().len(), 1);
        assert_eq!(clipped.budget(), 2);
    }

    #[test]
    fn oversized_budget_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let msg = random_message(&mut rng, 32);
        let clipped = compress(&msg, 100).unwrap();
        assert_eq!(clipped.coefficients().len(), 17);
        assert_eq!(clipped.budget(), 34);
        let restored = reconstruct(&clipped).unwrap();
        for (a, b) in msg.values().iter().zip(restored.values()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn mse_is_non_increasing_in_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let msg = random_message(&mut rng, 32);
            let mut prev = f64::INFINITY;
            for budget in (2..=full_budget(32)).step_by(2) {
                let restored = reconstruct(&compress(&msg, budget).unwrap()).unwrap();
                let mse = msg
                    .values()
                    .iter()
                    .zip(restored.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / 32.0;
                assert!(mse <= prev + 1e-12, "budget={budget}: {mse} > {prev}");
                prev = mse;
            }
        }
    }

    #[test]
    fn compress_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_message(&mut rng, 32);
        let y = random_message(&mut rng, 32);
        let (alpha, beta) = (0.7, -1.3);
        let combined = RealMessage::new(
            x.values()
                .iter()
                .zip(y.values())
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        )
        .unwrap();
        let budget = 18;
        let cx = compress(&x, budget).unwrap();
        let cy = compress(&y, budget).unwrap();
        let cc = compress(&combined, budget).unwrap();
        let scale = max_abs(cc.coefficients().iter().map(|c| c.norm())).max(1e-30);
        for ((a, b), c) in cx
            .coefficients()
            .iter()
            .zip(cy.coefficients())
            .zip(cc.coefficients())
        {
            assert!(((alpha * a + beta * b) - c).norm() / scale <= 1e-9);
        }
    }

    #[test]
    fn dc_and_nyquist_have_no_imaginary_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for p in [4usize, 16, 32, 256] {
            let spec = dft_forward(&random_message(&mut rng, p));
            assert!(spec.coefficients()[0].im.abs() <= 1e-9);
            if p % 2 == 0 {
                assert!(spec.coefficients()[p / 2].im.abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn rejects_non_finite_message() {
        let err = RealMessage::new(vec![1.0, f64::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, CodecError::InvalidMessage(_)));
        let err = RealMessage::new(vec![1.0, f64::INFINITY]).unwrap_err();
        assert!(matches!(err, CodecError::InvalidMessage(_)));
    }

    #[test]
    fn rejects_bad_budgets() {
        let msg = RealMessage::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(
            compress(&msg, 0),
            Err(CodecError::InvalidBudget { .. })
        ));
        assert!(matches!(
            compress(&msg, 3),
            Err(CodecError::InvalidBudget { .. })
        ));
    }

    #[test]
    fn rejects_oversized_clipped_spectrum() {
        let coeffs = vec![Complex64::new(1.0, 0.0); 4];
        assert!(matches!(
            ClippedSpectrum::from_parts(coeffs, 4),
            Err(CodecError::MalformedMessage(_))
        ));
    }

    #[test]
    fn adjoints_transpose_the_forward_maps() {
        // <A x, y> == <x, A^T y> for random x, y certifies the adjoint.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for p in [4usize, 7, 32] {
            let x: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..2 * one_sided_len(p))
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let ax = to_interleaved(&dft_forward_slice(&x));
            let aty = dft_forward_adjoint(&y, p);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0), "dft p={p}");

            for k in 1..=one_sided_len(p) {
                let spec: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let g: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let fwd = idft_reconstruct_slice(&spec, p);
                let adj = idft_reconstruct_adjoint(&g, k, p);
                let lhs: f64 = fwd.iter().zip(&g).map(|(a, b)| a * b).sum();
                let rhs: f64 = spec.iter().zip(&adj).map(|(a, b)| a * b).sum();
                assert!(
                    (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0),
                    "idft p={p} k={k}"
                );
            }
        }
    }
}
