//! Scalar circular-statistics kernel.
//!
//! Modified Bessel functions are evaluated in log space (power series below
//! [`SERIES_CUTOFF`], Hankel asymptotic expansion above) so that
//! concentrations far beyond the `f64` overflow point of `I_0` (about 713)
//! stay finite.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Switch point between the power series and the asymptotic expansion.
pub const SERIES_CUTOFF: f64 = 15.0;

const LN_TAU: f64 = 1.837_877_066_409_345_5;

/// Wraps an angle to `[-π, π)`.
pub fn wrap_pi(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Wraps an angle to `[0, 2π)`.
pub fn wrap_tau(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

fn check_nonnegative(x: f64) -> Result<()> {
    if x.is_nan() || x < 0.0 {
        Err(Error::Domain(format!(
            "Bessel argument must be nonnegative, got {x}"
        )))
    } else {
        Ok(())
    }
}

/// `(ln Σ_k (x²/4)^k / (k!)², ln Σ_k (x²/4)^k / (k!(k+1)!))`, i.e. `ln I_0(x)` and
/// `ln(I_1(x) / (x/2))`.
fn series_terms(x: f64) -> (f64, f64) {
    let q = 0.25 * x * x;
    let (mut t0, mut s0) = (1.0_f64, 1.0_f64);
    let (mut t1, mut s1) = (1.0_f64, 1.0_f64);
    let mut k = 1.0_f64;
    loop {
        t0 *= q / (k * k);
        t1 *= q / (k * (k + 1.0));
        s0 += t0;
        s1 += t1;
        if t0 < 1e-17 * s0 && t1 < 1e-17 * s1 {
            break;
        }
        k += 1.0;
    }
    (s0.ln(), s1.ln())
}

/// Hankel expansion sums for `I_0` and `I_1`, without the `e^x / sqrt(2πx)` prefactor.
fn asymptotic_sums(x: f64) -> (f64, f64) {
    let (mut a0, mut s0) = (1.0_f64, 1.0_f64);
    let (mut a1, mut s1) = (1.0_f64, 1.0_f64);
    let eight_x = 8.0 * x;
    for k in 1..60 {
        let kf = k as f64;
        let odd = (2.0 * kf - 1.0).powi(2);
        let n0 = a0 * odd / (kf * eight_x);
        let n1 = a1 * (odd - 4.0) / (kf * eight_x);
        // the expansion is divergent; stop at the smallest term
        if n0.abs() > a0.abs() {
            break;
        }
        a0 = n0;
        a1 = n1;
        s0 += a0;
        s1 += a1;
        if a0.abs() < 1e-17 * s0 && a1.abs() < 1e-17 * s1.abs() {
            break;
        }
    }
    (s0, s1)
}

/// `ln I_0(x)` for `x ≥ 0`, without input validation.
pub(crate) fn ln_i0(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        series_terms(x).0
    } else {
        let (s0, _) = asymptotic_sums(x);
        x - 0.5 * (TAU * x).ln() + s0.ln()
    }
}

/// `A(x) = I_1(x) / I_0(x)` for `x ≥ 0`, without input validation.
pub(crate) fn ratio_a(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if x < SERIES_CUTOFF {
        let (l0, l1) = series_terms(x);
        0.5 * x * (l1 - l0).exp()
    } else {
        let (s0, s1) = asymptotic_sums(x);
        s1 / s0
    }
}

/// `A(x) / x`, with its limit `1/2` at zero.
pub(crate) fn ratio_a_over_x(x: f64) -> f64 {
    if x < 1e-8 {
        0.5 - x * x / 16.0
    } else {
        ratio_a(x) / x
    }
}

/// Modified Bessel function of the first kind of order zero.
pub fn bessel_i0(x: f64) -> Result<f64> {
    check_nonnegative(x)?;
    Ok(ln_i0(x).exp())
}

/// `ln I_0(x)`, finite for arguments far above the overflow point of `I_0`.
pub fn log_bessel_i0(x: f64) -> Result<f64> {
    check_nonnegative(x)?;
    Ok(ln_i0(x))
}

/// Mean resultant length of a von Mises law with concentration `x`: `I_1(x)/I_0(x)`.
pub fn bessel_ratio_a(x: f64) -> Result<f64> {
    check_nonnegative(x)?;
    Ok(ratio_a(x))
}

/// Resultant of persistence and target unit vectors weighted by their coefficients.
///
/// Its direction is the von Mises mean direction and its length the concentration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusVector {
    pub vx: f64,
    pub vy: f64,
}

impl ConsensusVector {
    pub fn new(vx: f64, vy: f64) -> Self {
        Self { vx, vy }
    }

    pub fn length(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// Mean direction in `[-π, π)`; `None` for the zero vector.
    pub fn direction(&self) -> Option<f64> {
        if self.length() > 0.0 {
            Some(wrap_pi(self.vy.atan2(self.vx)))
        } else {
            None
        }
    }
}

/// Builds `κ_0 (cos y_prev, sin y_prev) + Σ_i κ_i z_i (cos x_i, sin x_i)`.
pub fn consensus_vector(
    prev_direction: f64,
    kappa: &[f64],
    target_angles: &[f64],
    target_weights: &[f64],
) -> Result<ConsensusVector> {
    let p = target_angles.len();
    if target_weights.len() != p {
        return Err(Error::Dimension {
            what: "target weights",
            expected: p,
            actual: target_weights.len(),
        });
    }
    if kappa.len() != p + 1 {
        return Err(Error::Dimension {
            what: "kappa",
            expected: p + 1,
            actual: kappa.len(),
        });
    }
    let mut vx = kappa[0] * prev_direction.cos();
    let mut vy = kappa[0] * prev_direction.sin();
    for ((k, x), z) in kappa[1..].iter().zip(target_angles).zip(target_weights) {
        vx += k * z * x.cos();
        vy += k * z * x.sin();
    }
    Ok(ConsensusVector { vx, vy })
}

/// Log density of a von Mises direction whose mean and concentration come from `v`.
///
/// Uses `ℓ cos(y − μ) = v_x cos y + v_y sin y`, so the zero vector needs no mean
/// direction and yields the uniform density.
pub fn von_mises_log_density(y: f64, v: ConsensusVector) -> f64 {
    v.vx * y.cos() + v.vy * y.sin() - LN_TAU - ln_i0(v.length())
}

/// Draws from a von Mises law with mean `mu` and concentration `ell`
/// (Best–Fisher rejection sampler). The result lies in `[0, 2π)`.
pub fn sample_von_mises<R: Rng + ?Sized>(mu: f64, ell: f64, rng: &mut R) -> f64 {
    if !(ell > 1e-9) {
        return wrap_tau(TAU * rng.random::<f64>());
    }
    let tau = 1.0 + (1.0 + 4.0 * ell * ell).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * ell);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = ell * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            let theta = f.clamp(-1.0, 1.0).acos();
            let signed = if u3 < 0.5 { -theta } else { theta };
            return wrap_tau(mu + signed);
        }
    }
}

/// Mean direction and mean resultant length of a sample of angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircularSummary {
    pub mean_direction: f64,
    pub resultant_length: f64,
    pub n: usize,
}

pub fn circular_summary(angles: &[f64]) -> Result<CircularSummary> {
    if angles.is_empty() {
        return Err(Error::Domain("circular summary of an empty sample".into()));
    }
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    let n = angles.len();
    Ok(CircularSummary {
        mean_direction: wrap_pi(s.atan2(c)),
        resultant_length: (s.hypot(c) / n as f64).min(1.0),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Plain power series for I_0, 50 terms.
    fn i0_series_oracle(x: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..50 {
            term *= (x / 2.0).powi(2) / (k as f64).powi(2);
            sum += term;
        }
        sum
    }

    #[test]
    fn i0_small_values() {
        assert_eq!(bessel_i0(0.0).unwrap(), 1.0);
        assert_relative_eq!(
            bessel_i0(1.0).unwrap(),
            1.266_065_877_752_008_3,
            epsilon = 1e-14
        );
        for x in [0.3, 2.0, 7.5, 14.0] {
            assert_relative_eq!(
                bessel_i0(x).unwrap(),
                i0_series_oracle(x),
                max_relative = 1e-13
            );
        }
    }

    #[test]
    fn log_i0_large_values() {
        // reference values from 40-digit arbitrary precision evaluation
        let cases = [
            (15.0, 12.735_669_109_476_906),
            (20.0, 17.589_610_428_244_274),
            (30.0, 27.384_701_433_171_936),
            (700.0, 695.805_699_998_443_4),
            (1e4, 9_994.475_903_781_432),
        ];
        for (x, want) in cases {
            assert_relative_eq!(log_bessel_i0(x).unwrap(), want, max_relative = 1e-13);
        }
        assert!((log_bessel_i0(20.0).unwrap() - i0_series_oracle(20.0).ln()).abs() < 1e-10);
    }

    #[test]
    fn continuity_at_cutoff() {
        let below = ln_i0(SERIES_CUTOFF - 1e-9);
        let above = ln_i0(SERIES_CUTOFF);
        assert!((below - above).abs() < 1e-8);
        assert!((ratio_a(SERIES_CUTOFF - 1e-9) - ratio_a(SERIES_CUTOFF)).abs() < 1e-9);
    }

    #[test]
    fn negative_arguments_rejected() {
        assert!(bessel_i0(-1.0).is_err());
        assert!(log_bessel_i0(-0.1).is_err());
        assert!(bessel_ratio_a(-2.0).is_err());
        assert!(bessel_ratio_a(f64::NAN).is_err());
    }

    #[test]
    fn ratio_a_values() {
        assert_eq!(bessel_ratio_a(0.0).unwrap(), 0.0);
        assert_relative_eq!(
            bessel_ratio_a(2.0).unwrap(),
            0.697_774_657_964_008,
            epsilon = 1e-13
        );
        assert_relative_eq!(
            bessel_ratio_a(5.0).unwrap(),
            0.893_383_137_044_085_2,
            epsilon = 1e-13
        );
        assert_relative_eq!(
            bessel_ratio_a(20.0).unwrap(),
            0.974_670_507_889_807_1,
            epsilon = 1e-13
        );
        let a50 = bessel_ratio_a(50.0).unwrap();
        assert_relative_eq!(a50, 0.989_948_967_378_497_8, epsilon = 1e-13);
        // three-term asymptotic form; the two-term form is off by ~1.03e-6 here
        let x = 50.0_f64;
        let asym = 1.0 - 1.0 / (2.0 * x) - 1.0 / (8.0 * x * x) - 1.0 / (8.0 * x.powi(3));
        assert!((a50 - asym).abs() < 1e-6);
        assert!((a50 - (1.0 - 1.0 / (2.0 * x) - 1.0 / (8.0 * x * x))).abs() < 2e-6);
    }

    #[test]
    fn ratio_a_monotone_and_log_i0_convex() {
        let mut prev = -1.0;
        let h = 1e-3;
        for i in 0..4000 {
            let x = i as f64 * 0.01;
            let a = ratio_a(x);
            assert!(a > prev && a < 1.0);
            prev = a;
            let second = (ln_i0(x + 2.0 * h) - 2.0 * ln_i0(x + h) + ln_i0(x)) / (h * h);
            assert!(second > -1e-6, "x = {x}: {second}");
        }
    }

    #[test]
    fn consensus_examples() {
        let v = consensus_vector(0.0, &[1.0, 0.0], &[2.0], &[1.0]).unwrap();
        assert_relative_eq!(v.vx, 1.0);
        assert_relative_eq!(v.vy, 0.0);
        assert_eq!(v.direction(), Some(0.0));
        assert_relative_eq!(v.length(), 1.0);

        let v = consensus_vector(0.0, &[1.0, 1.0], &[PI], &[1.0]).unwrap();
        assert!(v.length() < 1e-15);

        let v = consensus_vector(PI / 2.0, &[20.0, 10.0], &[0.0], &[1.0]).unwrap();
        assert_relative_eq!(v.length(), 22.360_679_774_997_9, epsilon = 1e-12);
        assert_relative_eq!(
            v.direction().unwrap(),
            1.107_148_717_794_09,
            epsilon = 1e-12
        );

        assert!(consensus_vector(0.0, &[1.0], &[0.0], &[1.0]).is_err());
        assert!(consensus_vector(0.0, &[1.0, 1.0], &[0.0], &[]).is_err());
        assert_eq!(ConsensusVector::new(0.0, 0.0).direction(), None);
    }

    #[test]
    fn log_density_examples() {
        let uniform = von_mises_log_density(1.234, ConsensusVector::new(0.0, 0.0));
        assert_relative_eq!(uniform, -(TAU.ln()), epsilon = 1e-15);
        assert_relative_eq!(uniform, -1.837_877_066_409_345, epsilon = 1e-12);

        let mu = 0.7_f64;
        let v = ConsensusVector::new(2.0 * mu.cos(), 2.0 * mu.sin());
        let want = 2.0 - (TAU * i0_series_oracle(2.0)).ln();
        assert_relative_eq!(von_mises_log_density(mu, v), want, epsilon = 1e-13);
        assert_relative_eq!(want, -0.661_870_607_892_301_8, epsilon = 1e-13);
    }

    #[test]
    fn density_integrates_to_one() {
        for ell in [0.0, 0.5, 5.0, 40.0] {
            let v = ConsensusVector::new(ell * 0.3_f64.cos(), ell * 0.3_f64.sin());
            let n = 512;
            let h = TAU / n as f64;
            let total: f64 = (0..n)
                .map(|i| von_mises_log_density(i as f64 * h, v).exp() * h)
                .sum();
            assert!((total - 1.0).abs() < 1e-6, "ell {ell}: {total}");
        }
    }

    #[test]
    fn sampler_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_von_mises(1.0, 0.0, &mut rng))
            .collect();
        assert!(draws.iter().all(|d| (0.0..TAU).contains(d)));
        assert!(circular_summary(&draws).unwrap().resultant_length < 0.01);

        let draws: Vec<f64> = (0..n)
            .map(|_| sample_von_mises(1.0, 5.0, &mut rng))
            .collect();
        let s = circular_summary(&draws).unwrap();
        assert!((s.resultant_length - ratio_a(5.0)).abs() < 0.01);

        let draws: Vec<f64> = (0..n)
            .map(|_| sample_von_mises(1.0, 20.0, &mut rng))
            .collect();
        let s = circular_summary(&draws).unwrap();
        assert!((s.mean_direction - 1.0).abs() < 0.01);
    }

    #[test]
    fn summary_examples() {
        let s = circular_summary(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!((s.mean_direction, s.resultant_length, s.n), (0.0, 1.0, 3));
        let s = circular_summary(&[0.0, PI]).unwrap();
        assert!(s.resultant_length < 1e-15);
        assert!(circular_summary(&[]).is_err());

        // A(0.675867) ≈ 0.32
        let ell = 0.675867473940402;
        assert!((ratio_a(ell) - 0.32).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..1000)
            .map(|_| sample_von_mises(0.4, ell, &mut rng))
            .collect();
        assert!((circular_summary(&draws).unwrap().resultant_length - 0.32).abs() < 0.05);
    }

    #[test]
    fn wrapping() {
        assert_eq!(wrap_pi(PI), -PI);
        assert_relative_eq!(wrap_pi(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-15);
        assert!((0.0..TAU).contains(&wrap_tau(-1e-18)));
        assert_relative_eq!(wrap_tau(-PI / 2.0), 3.0 * PI / 2.0, epsilon = 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn canonical_form_identity(
                y in 0.0..TAU, prev in 0.0..TAU,
                k in proptest::collection::vec(-30.0..30.0f64, 3),
                x in proptest::collection::vec(0.0..TAU, 2),
                z in proptest::collection::vec(0.0..3.0f64, 2),
            ) {
                let v = consensus_vector(prev, &k, &x, &z).unwrap();
                let ell = v.length();
                let lhs = match v.direction() {
                    Some(mu) => ell * (y - mu).cos(),
                    None => 0.0,
                };
                let rhs = k[0] * (y - prev).cos()
                    + k[1] * z[0] * (y - x[0]).cos()
                    + k[2] * z[1] * (y - x[1]).cos();
                prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
            }

            #[test]
            fn rotation_equivariance(
                y in 0.0..TAU, prev in 0.0..TAU, offset in -10.0..10.0f64,
                k in proptest::collection::vec(-20.0..20.0f64, 2),
                x in 0.0..TAU,
            ) {
                let a = von_mises_log_density(y, consensus_vector(prev, &k, &[x], &[1.0]).unwrap());
                let b = von_mises_log_density(
                    y + offset,
                    consensus_vector(prev + offset, &k, &[x + offset], &[1.0]).unwrap(),
                );
                prop_assert!((a - b).abs() < 1e-9);
            }

            #[test]
            fn target_permutation(
                prev in 0.0..TAU,
                k in proptest::collection::vec(-20.0..20.0f64, 3),
                x in proptest::collection::vec(0.0..TAU, 2),
                z in proptest::collection::vec(0.0..2.0f64, 2),
            ) {
                let a = consensus_vector(prev, &k, &x, &z).unwrap();
                let b = consensus_vector(prev, &[k[0], k[2], k[1]], &[x[1], x[0]], &[z[1], z[0]]).unwrap();
                prop_assert!((a.vx - b.vx).abs() < 1e-12 && (a.vy - b.vy).abs() < 1e-12);
            }
        }
    }
}
