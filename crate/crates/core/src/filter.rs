//! Forward filtering, backward smoothing and pairwise posteriors.
//!
//! Rows are indexed by time `t = 0..=T`. Row 0 of `predicted` and `filtered`
//! is the initial law (no observation enters at `t = 0`); emissions enter for
//! `t = 1..=T`. The filter is scaled: each step is normalised and the logs of
//! the normalisers (plus the per-step emission offset) sum to the observed
//! log-likelihood, i.e. the sum of one-step-ahead predictive log densities.
//!
//! Semi-Markov models run the same recursions on the expanded chain; the
//! behaviour-level summaries are projections through the chain's projector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hidden::HiddenChain;
use crate::model::{DirectionalDesign, ModelSpec, Params, Trajectory};

/// Behaviour-level posterior quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    /// `predicted[t][k] = P(S_t = k | F_{t-1})`, `t = 0..=T`.
    pub predicted: Vec<Vec<f64>>,
    /// `filtered[t][k] = P(S_t = k | F_t)`.
    pub filtered: Vec<Vec<f64>>,
    /// `smoothed[t][k] = P(S_t = k | F_T)`.
    pub smoothed: Vec<Vec<f64>>,
    /// `pairwise[t-1][h][k] = P(S_{t-1} = h, S_t = k | F_T)` for `t = 1..=T`.
    pub pairwise: Vec<Vec<Vec<f64>>>,
    pub loglik: f64,
}

/// Output of the forward pass on the chain that is actually run.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub predicted: Vec<Vec<f64>>,
    pub filtered: Vec<Vec<f64>>,
    pub loglik: f64,
}

/// Full E-step output.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub summary: PosteriorSummary,
    /// `Σ_t P(S̃_{t-1} = a, S̃_t = b | F_T)` over expanded states (semi-Markov only).
    pub chain_pairwise_total: Option<Vec<Vec<f64>>>,
}

fn project(row: &[f64], chain: &HiddenChain) -> Vec<f64> {
    let mut out = vec![0.0; chain.n_behaviors];
    for (a, &p) in row.iter().enumerate() {
        out[chain.behavior[a]] += p;
    }
    out
}

fn predict(prev: &[f64], transition: &[Vec<f64>], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (b, &w) in prev.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, &p) in out.iter_mut().zip(&transition[b]) {
            *o += w * p;
        }
    }
}

/// Scaled forward recursion over chain states. `log_emissions[t-1][k]` is the
/// log emission of behaviour `k` at step `t`.
pub fn forward_chain(chain: &HiddenChain, log_emissions: &[Vec<f64>]) -> Result<ForwardPass> {
    let n = chain.len();
    let t_max = log_emissions.len();
    let mut predicted = Vec::with_capacity(t_max + 1);
    let mut filtered = Vec::with_capacity(t_max + 1);
    predicted.push(chain.initial.clone());
    filtered.push(chain.initial.clone());
    let mut loglik = 0.0;
    let mut pred = vec![0.0; n];
    let mut scaled = vec![0.0; chain.n_behaviors];
    for (i, le) in log_emissions.iter().enumerate() {
        let t = i + 1;
        predict(&filtered[i], &chain.transition, &mut pred);
        let offset = le.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !offset.is_finite() {
            return Err(Error::DegenerateStep { t });
        }
        for (s, &l) in scaled.iter_mut().zip(le) {
            *s = (l - offset).exp();
        }
        let mut filt: Vec<f64> = pred
            .iter()
            .zip(&chain.behavior)
            .map(|(&p, &g)| p * scaled[g])
            .collect();
        let norm: f64 = filt.iter().sum();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateStep { t });
        }
        filt.iter_mut().for_each(|x| *x /= norm);
        loglik += norm.ln() + offset;
        predicted.push(pred.clone());
        filtered.push(filt);
    }
    Ok(ForwardPass {
        predicted,
        filtered,
        loglik,
    })
}

/// Observed log-likelihood only (no stored posteriors).
pub fn chain_loglik(chain: &HiddenChain, log_emissions: &[Vec<f64>]) -> Result<f64> {
    let n = chain.len();
    let mut filt = chain.initial.clone();
    let mut pred = vec![0.0; n];
    let mut scaled = vec![0.0; chain.n_behaviors];
    let mut loglik = 0.0;
    for (i, le) in log_emissions.iter().enumerate() {
        predict(&filt, &chain.transition, &mut pred);
        let offset = le.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !offset.is_finite() {
            return Err(Error::DegenerateStep { t: i + 1 });
        }
        for (s, &l) in scaled.iter_mut().zip(le) {
            *s = (l - offset).exp();
        }
        let mut norm = 0.0;
        for a in 0..n {
            filt[a] = pred[a] * scaled[chain.behavior[a]];
            norm += filt[a];
        }
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateStep { t: i + 1 });
        }
        filt.iter_mut().for_each(|x| *x /= norm);
        loglik += norm.ln() + offset;
    }
    Ok(loglik)
}

/// Backward smoothing recursion: `smoothed[T] = filtered[T]` and
/// `smoothed[t][l] = filtered[t][l] Σ_k π_lk smoothed[t+1][k] / predicted[t+1][k]`.
pub fn backward_smooth(
    filtered: &[Vec<f64>],
    predicted: &[Vec<f64>],
    transition: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let len = filtered.len();
    let n = transition.len();
    let mut smoothed = vec![vec![0.0; n]; len];
    smoothed[len - 1] = filtered[len - 1].clone();
    let mut ratio = vec![0.0; n];
    for t in (0..len - 1).rev() {
        for k in 0..n {
            let pred = predicted[t + 1][k];
            let sm = smoothed[t + 1][k];
            ratio[k] = if pred > 0.0 {
                sm / pred
            } else if sm > 1e-300 {
                return Err(Error::InconsistentPosterior { t: t + 1 });
            } else {
                0.0
            };
        }
        let mut total = 0.0;
        for l in 0..n {
            let f = filtered[t][l];
            let s = if f == 0.0 {
                0.0
            } else {
                f * transition[l]
                    .iter()
                    .zip(&ratio)
                    .map(|(p, r)| p * r)
                    .sum::<f64>()
            };
            smoothed[t][l] = s;
            total += s;
        }
        // renormalise against rounding drift
        if total > 0.0 {
            smoothed[t].iter_mut().for_each(|x| *x /= total);
        }
    }
    Ok(smoothed)
}

/// `pairwise[t-1][h][k] = π_hk filtered[t-1][h] smoothed[t][k] / Σ_j π_jk filtered[t-1][j]`.
pub fn pairwise_posteriors(
    filtered: &[Vec<f64>],
    smoothed: &[Vec<f64>],
    transition: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = transition.len();
    let mut pred = vec![0.0; n];
    let mut out = Vec::with_capacity(filtered.len().saturating_sub(1));
    for t in 1..filtered.len() {
        predict(&filtered[t - 1], transition, &mut pred);
        let mut xi = vec![vec![0.0; n]; n];
        for k in 0..n {
            let sm = smoothed[t][k];
            if pred[k] <= 0.0 {
                if sm > 1e-300 {
                    return Err(Error::InconsistentPosterior { t });
                }
                continue;
            }
            let scale = sm / pred[k];
            for h in 0..n {
                xi[h][k] = transition[h][k] * filtered[t - 1][h] * scale;
            }
        }
        out.push(xi);
    }
    Ok(out)
}

/// Runs the full filter/smoother on `chain` and projects to behaviours.
pub fn posterior_chain(chain: &HiddenChain, log_emissions: &[Vec<f64>]) -> Result<Posterior> {
    let fwd = forward_chain(chain, log_emissions)?;
    let smoothed = backward_smooth(&fwd.filtered, &fwd.predicted, &chain.transition)?;
    let n = chain.len();
    let kb = chain.n_behaviors;
    let t_max = log_emissions.len();
    let expanded = chain.expanded.is_some();

    let mut pairwise = Vec::with_capacity(t_max);
    let mut total = if expanded {
        Some(vec![vec![0.0; n]; n])
    } else {
        None
    };
    for t in 1..=t_max {
        let pred = &fwd.predicted[t];
        let mut xi_b = vec![vec![0.0; kb]; kb];
        for k in 0..n {
            let sm = smoothed[t][k];
            if pred[k] <= 0.0 {
                if sm > 1e-300 {
                    return Err(Error::InconsistentPosterior { t });
                }
                continue;
            }
            let scale = sm / pred[k];
            for h in 0..n {
                let p = chain.transition[h][k];
                if p == 0.0 {
                    continue;
                }
                let v = p * fwd.filtered[t - 1][h] * scale;
                xi_b[chain.behavior[h]][chain.behavior[k]] += v;
                if let Some(tot) = total.as_mut() {
                    tot[h][k] += v;
                }
            }
        }
        pairwise.push(xi_b);
    }

    let summary = PosteriorSummary {
        predicted: fwd.predicted.iter().map(|r| project(r, chain)).collect(),
        filtered: fwd.filtered.iter().map(|r| project(r, chain)).collect(),
        smoothed: smoothed.iter().map(|r| project(r, chain)).collect(),
        pairwise,
        loglik: fwd.loglik,
    };
    Ok(Posterior {
        summary,
        chain_pairwise_total: total,
    })
}

/// Forward pass for `params`, projected to behaviours: `(predicted, filtered, loglik)`.
pub fn forward_filter(
    params: &Params,
    spec: &ModelSpec,
    traj: &Trajectory,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    crate::model::validate(spec, params, Some(traj)).into_result()?;
    let chain = HiddenChain::from_params(spec, params)?;
    let em = DirectionalDesign::new(traj).log_emissions(params);
    let fwd = forward_chain(&chain, &em)?;
    Ok((
        fwd.predicted.iter().map(|r| project(r, &chain)).collect(),
        fwd.filtered.iter().map(|r| project(r, &chain)).collect(),
        fwd.loglik,
    ))
}

/// Filter, smoother and pairwise posteriors for `params`.
pub fn posterior(params: &Params, spec: &ModelSpec, traj: &Trajectory) -> Result<Posterior> {
    crate::model::validate(spec, params, Some(traj)).into_result()?;
    let chain = HiddenChain::from_params(spec, params)?;
    let em = DirectionalDesign::new(traj).log_emissions(params);
    posterior_chain(&chain, &em)
}
