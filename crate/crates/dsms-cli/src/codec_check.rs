//! On-demand codec property suite with its own direct-summation oracle,
//! coded independently of the library kernels (full two-sided transform in
//! polar form).

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsms_core::codec::{compress, dft_forward, full_budget, reconstruct, RealMessage};

fn oracle_dft(values: &[f64]) -> Vec<Complex64> {
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

fn oracle_idft(one_sided: &[Complex64], p: usize) -> Vec<f64> {
    let half = p / 2 + 1;
    let mut two_sided = vec![Complex64::new(0.0, 0.0); p];
    for (m, c) in one_sided.iter().enumerate().take(half) {
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

fn report(name: &str, pass: bool, detail: String) -> bool {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

/// Run every property; returns true when all pass.
pub fn run(sizes: &[usize], messages: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;

    // Forward-transform equivalence against the oracle.
    let mut worst_fwd: f64 = 0.0;
    for &p in sizes {
        for _ in 0..messages {
            let msg =
                RealMessage::new((0..p).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let spec = dft_forward(&msg);
            let oracle = oracle_dft(msg.values());
            let scale = oracle
                .iter()
                .map(|c| c.norm())
                .fold(0.0f64, f64::max)
                .max(1e-30);
            for (k, c) in spec.coefficients().iter().enumerate() {
                worst_fwd = worst_fwd.max((c - oracle[k]).norm() / scale);
            }
        }
    }
    ok &= report(
        "forward oracle equivalence",
        worst_fwd <= 1e-9,
        format!("max rel err {worst_fwd:.3e} (tol 1e-9)"),
    );

    // Inverse-transform equivalence at every legal budget.
    let mut worst_inv: f64 = 0.0;
    for &p in sizes {
        let msg = RealMessage::new((0..p).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        for budget in (2..=full_budget(p)).step_by(2) {
            let clipped = compress(&msg, budget).unwrap();
            let restored = reconstruct(&clipped).unwrap();
            let oracle = oracle_idft(clipped.coefficients(), p);
            let scale = oracle.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-30);
            for (a, b) in restored.values().iter().zip(&oracle) {
                worst_inv = worst_inv.max((a - b).abs() / scale);
            }
        }
    }
    ok &= report(
        "inverse oracle equivalence",
        worst_inv <= 1e-9,
        format!("max rel err {worst_inv:.3e} (tol 1e-9)"),
    );

    // Lossless full-budget round trip.
    let mut worst_rt: f64 = 0.0;
    for &p in sizes {
        for _ in 0..messages {
            let msg =
                RealMessage::new((0..p).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let restored = reconstruct(&compress(&msg, full_budget(p)).unwrap()).unwrap();
            for (a, b) in msg.values().iter().zip(restored.values()) {
                worst_rt = worst_rt.max((a - b).abs());
            }
        }
    }
    ok &= report(
        "full-budget round trip",
        worst_rt <= 1e-6,
        format!("max abs err {worst_rt:.3e} (tol 1e-6)"),
    );

    // Monotone rate-distortion.
    let mut violations = 0usize;
    for &p in sizes {
        for _ in 0..messages.min(20) {
            let msg =
                RealMessage::new((0..p).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let mut prev = f64::INFINITY;
            for budget in (2..=full_budget(p)).step_by(2) {
                let restored = reconstruct(&compress(&msg, budget).unwrap()).unwrap();
                let mse: f64 = msg
                    .values()
                    .iter()
                    .zip(restored.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / p as f64;
                if mse > prev + 1e-12 {
                    violations += 1;
                }
                prev = mse;
            }
        }
    }
    ok &= report(
        "monotone rate-distortion",
        violations == 0,
        format!("{violations} violations"),
    );
    ok
}
