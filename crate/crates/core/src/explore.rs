//! Exploratory tools: a two-component exponential mixture for step lengths,
//! the critical distance it implies, Kuiper's uniformity test, and turning
//! angle summaries split at the critical distance.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Max, Min, OrderStatistics};

use crate::circular::{circular_summary, wrap_pi, CircularSummary};
use crate::error::{Error, Result};
use crate::model::{Step, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSettings {
    pub n_starts: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for MixtureSettings {
    fn default() -> Self {
        Self {
            n_starts: 10,
            max_iters: 5000,
            rel_tol: 1e-10,
            seed: 1,
        }
    }
}

/// Two-component exponential mixture, components ordered by decreasing rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub weights: [f64; 2],
    pub rates: [f64; 2],
    pub loglik: f64,
    pub iterations: usize,
    /// A component weight fell below 1e-4.
    pub degenerate: bool,
    /// Number of zero distances replaced by half the smallest positive one.
    pub jittered: usize,
}

impl MixtureFit {
    pub fn mean(&self) -> f64 {
        self.weights[0] / self.rates[0] + self.weights[1] / self.rates[1]
    }
}

fn mixture_loglik(d: &[f64], w: [f64; 2], r: [f64; 2]) -> f64 {
    d.iter()
        .map(|&x| (w[0] * r[0] * (-r[0] * x).exp() + w[1] * r[1] * (-r[1] * x).exp()).ln())
        .sum()
}

/// One EM run; returns the fit and the per-iteration log-likelihood trace.
fn mixture_em(
    d: &[f64],
    mut w: [f64; 2],
    mut r: [f64; 2],
    settings: &MixtureSettings,
) -> (MixtureFit, Vec<f64>) {
    let n = d.len() as f64;
    let mut trace = vec![mixture_loglik(d, w, r)];
    let mut iterations = 0;
    for _ in 0..settings.max_iters {
        iterations += 1;
        let mut s_resp = 0.0;
        let mut s_resp_d = 0.0;
        let mut s_d = 0.0;
        for &x in d {
            let a = w[0] * r[0] * (-r[0] * x).exp();
            let b = w[1] * r[1] * (-r[1] * x).exp();
            let g = if a + b > 0.0 { a / (a + b) } else { 0.5 };
            s_resp += g;
            s_resp_d += g * x;
            s_d += x;
        }
        let nw = [s_resp / n, 1.0 - s_resp / n];
        let nr = [
            if s_resp_d > 0.0 {
                s_resp / s_resp_d
            } else {
                r[0]
            },
            if s_d - s_resp_d > 0.0 {
                (n - s_resp) / (s_d - s_resp_d)
            } else {
                r[1]
            },
        ];
        let change = (0..2)
            .map(|i| {
                ((nw[i] - w[i]) / w[i].max(1e-300))
                    .abs()
                    .max(((nr[i] - r[i]) / r[i]).abs())
            })
            .fold(0.0, f64::max);
        w = nw;
        r = nr;
        trace.push(mixture_loglik(d, w, r));
        if change < settings.rel_tol {
            break;
        }
    }
    if r[1] > r[0] {
        w.swap(0, 1);
        r.swap(0, 1);
    }
    let fit = MixtureFit {
        weights: w,
        rates: r,
        loglik: *trace.last().unwrap(),
        iterations,
        degenerate: w.iter().any(|&x| x < 1e-4),
        jittered: 0,
    };
    (fit, trace)
}

/// Multistart EM for a two-component exponential mixture.
pub fn fit_exp_mixture(distances: &[f64], settings: &MixtureSettings) -> Result<MixtureFit> {
    if distances.len() < 10 {
        return Err(Error::Domain(format!(
            "need at least 10 distances, got {}",
            distances.len()
        )));
    }
    if distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::Domain(
            "distances must be finite and non-negative".into(),
        ));
    }
    let smallest = distances
        .iter()
        .cloned()
        .filter(|&d| d > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !smallest.is_finite() {
        return Err(Error::Domain("all distances are zero".into()));
    }
    let jittered = distances.iter().filter(|&&d| d == 0.0).count();
    if jittered > 0 {
        warn!("{jittered} zero distances replaced by {}", smallest / 2.0);
    }
    let d: Vec<f64> = distances
        .iter()
        .map(|&x| if x == 0.0 { smallest / 2.0 } else { x })
        .collect();
    let base = d.len() as f64 / d.iter().sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut best: Option<MixtureFit> = None;
    for _ in 0..settings.n_starts.max(1) {
        let w0 = rng.random_range(0.05..0.95);
        let r0 = [
            base * rng.random_range(1.0..20.0),
            base * rng.random_range(0.05..1.0),
        ];
        let (fit, _) = mixture_em(&d, [w0, 1.0 - w0], r0, settings);
        if best.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
            best = Some(fit);
        }
    }
    let mut fit = best.expect("at least one start");
    fit.jittered = jittered;
    if fit.degenerate {
        warn!(
            "exponential mixture has a degenerate component: weights {:?}",
            fit.weights
        );
    }
    Ok(fit)
}

/// `w_1 / r_1 + w_2 / r_2`: the mixture mean, used as the short/long cutoff.
pub fn critical_distance(fit: &MixtureFit) -> f64 {
    fit.mean()
}

/// Kuiper's `V_n` and its asymptotic p-value (withheld for `n < 8`).
pub fn kuiper_statistic(angles: &[f64]) -> Result<(f64, Option<f64>)> {
    let n = angles.len();
    if n == 0 || angles.iter().any(|a| !a.is_finite()) {
        return Err(Error::Domain("Kuiper's test needs finite angles".into()));
    }
    let tau = std::f64::consts::TAU;
    let mut u: Vec<f64> = angles.iter().map(|a| a.rem_euclid(tau) / tau).collect();
    u.sort_by(|a, b| a.total_cmp(b));
    let nf = n as f64;
    let mut d_plus = 0.0_f64;
    let mut d_minus = 0.0_f64;
    for (i, &ui) in u.iter().enumerate() {
        d_plus = d_plus.max((i + 1) as f64 / nf - ui);
        d_minus = d_minus.max(ui - i as f64 / nf);
    }
    let v = d_plus + d_minus;
    if n < 8 {
        return Ok((v, None));
    }
    let sq = nf.sqrt();
    let lambda = (sq + 0.155 + 0.24 / sq) * v;
    Ok((v, Some(kuiper_tail(lambda))))
}

/// `Q(λ) = 2 Σ_j (4j²λ² − 1) exp(−2j²λ²)`.
fn kuiper_tail(lambda: f64) -> f64 {
    if lambda < 0.4 {
        return 1.0;
    }
    let l2 = lambda * lambda;
    let mut sum = 0.0;
    for j in 1..=100 {
        let j2 = (j * j) as f64;
        let term = (4.0 * j2 * l2 - 1.0) * (-2.0 * j2 * l2).exp();
        sum += term;
        if term.abs() < 1e-16 * sum.abs() {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSummary {
    pub count: usize,
    pub summary: Option<CircularSummary>,
    pub kuiper_v: Option<f64>,
    pub kuiper_p: Option<f64>,
}

impl SubsetSummary {
    fn from_angles(angles: &[f64]) -> Self {
        let summary = circular_summary(angles).ok();
        let (kuiper_v, kuiper_p) = match kuiper_statistic(angles) {
            Ok((v, p)) => (Some(v), p),
            Err(_) => (None, None),
        };
        Self {
            count: angles.len(),
            summary,
            kuiper_v,
            kuiper_p,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Five-number summary plus mean of the modelled step lengths (`t >= 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn distance_summary(traj: &Trajectory) -> DistanceSummary {
    let d: Vec<f64> = traj.steps.iter().skip(1).map(|s| s.distance).collect();
    let mut data = Data::new(d.clone());
    DistanceSummary {
        n: d.len(),
        min: data.min(),
        q1: data.lower_quartile(),
        median: data.median(),
        mean: d.iter().sum::<f64>() / d.len() as f64,
        q3: data.upper_quartile(),
        max: data.max(),
    }
}

/// Turning angles split at `d_critical`: steps with `d_t < d_critical` are short.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionDiagnostics {
    pub d_critical: f64,
    pub short: SubsetSummary,
    pub long: SubsetSummary,
}

pub fn partition_diagnostics(traj: &Trajectory, d_critical: f64) -> PartitionDiagnostics {
    let mut short = Vec::new();
    let mut long = Vec::new();
    for w in traj.steps.windows(2) {
        let turn = wrap_pi(w[1].direction - w[0].direction);
        if w[1].distance < d_critical {
            short.push(turn);
        } else {
            long.push(turn);
        }
    }
    let out = PartitionDiagnostics {
        d_critical,
        short: SubsetSummary::from_angles(&short),
        long: SubsetSummary::from_angles(&long),
    };
    if out.short.is_empty() || out.long.is_empty() {
        warn!("one side of the distance partition is empty");
    }
    out
}

/// Covariates for a single-state model whose coefficients differ between
/// short and long steps: the original targets, then the previous heading and
/// each target again, weighted by `z_t = 1{d_t > d_critical}`.
pub fn interaction_trajectory(traj: &Trajectory, d_critical: f64) -> Result<Trajectory> {
    let mut names = traj.target_names.clone();
    names.push("persistence:long".into());
    names.extend(traj.target_names.iter().map(|n| format!("{n}:long")));
    let mut steps = Vec::with_capacity(traj.steps.len());
    let mut prev = traj.steps[0].direction;
    for step in &traj.steps {
        let z = if step.distance > d_critical { 1.0 } else { 0.0 };
        let mut angles = step.target_angles.clone();
        let mut weights = step.target_weights.clone();
        angles.push(prev);
        weights.push(z);
        angles.extend(&step.target_angles);
        weights.extend(step.target_weights.iter().map(|w| w * z));
        steps.push(Step {
            direction: step.direction,
            distance: step.distance,
            target_angles: angles,
            target_weights: weights,
        });
        prev = step.direction;
    }
    Trajectory::new(names, steps)
}
