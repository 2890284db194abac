//! Post-fit inference: observed information by finite differences, standard
//! errors, Wald intervals, information criteria and state decoding.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::filter::{chain_loglik, PosteriorSummary};
use crate::hidden::{DwellDistribution, HiddenChain};
use crate::model::{validate, DirectionalDesign, ModelSpec, Params, Trajectory, Transition};

/// Condition number above which the observed information is declared singular.
const MAX_CONDITION: f64 = 1e13;

/// Observed log-likelihood (sum of one-step-ahead predictive log densities).
pub fn observed_loglik(params: &Params, spec: &ModelSpec, traj: &Trajectory) -> Result<f64> {
    validate(spec, params, Some(traj)).into_result()?;
    let chain = HiddenChain::from_params(spec, params)?;
    chain_loglik(&chain, &DirectionalDesign::new(traj).log_emissions(params))
}

/// `(AIC, BIC)` from a maximised log-likelihood.
pub fn information_criteria(loglik: f64, n_params: usize, n_obs: usize) -> (f64, f64) {
    let k = n_params as f64;
    (
        -2.0 * loglik + 2.0 * k,
        -2.0 * loglik + k * (n_obs as f64).ln(),
    )
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unconstrained coordinates: per transition row the logs of `π_hk / π_hh`
/// (`k ≠ h`), or `(log n, logit q)` per dwell law (`logit q` only when the size
/// is fixed); then κ as is; then `log λ`.
pub fn to_unconstrained(spec: &ModelSpec, params: &Params) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    match &params.transition {
        Transition::Matrix(m) => {
            for (h, row) in m.iter().enumerate() {
                for (k, &p) in row.iter().enumerate() {
                    if k != h {
                        out.push((p / row[h]).ln());
                    }
                }
            }
        }
        Transition::Dwell(d) => {
            for dw in d {
                if spec.fixed_dwell_size().is_none() {
                    out.push(dw.n.ln());
                }
                out.push((dw.q / (1.0 - dw.q)).ln());
            }
        }
    }
    out.extend(params.kappa.iter().flatten());
    out.extend(params.lambda.iter().map(|l| l.ln()));
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain(
            "parameters on the boundary have no unconstrained representation".into(),
        ));
    }
    Ok(out)
}

/// Inverse of [`to_unconstrained`]; the initial law and any fixed dwell size
/// come from `template`.
pub fn from_unconstrained(spec: &ModelSpec, template: &Params, theta: &[f64]) -> Params {
    let k = spec.n_states;
    let mut it = theta.iter().copied();
    let transition = match &template.transition {
        Transition::Matrix(_) => Transition::Matrix(
            (0..k)
                .map(|h| {
                    let eta: Vec<f64> = (0..k)
                        .map(|j| if j == h { 0.0 } else { it.next().unwrap() })
                        .collect();
                    let mx = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = eta.iter().map(|x| (x - mx).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|x| x / s).collect()
                })
                .collect(),
        ),
        Transition::Dwell(d) => Transition::Dwell(
            d.iter()
                .map(|_| {
                    let n = match spec.fixed_dwell_size() {
                        Some(n) => n,
                        None => it.next().unwrap().exp(),
                    };
                    DwellDistribution {
                        n,
                        q: logistic(it.next().unwrap()),
                    }
                })
                .collect(),
        ),
    };
    let kappa = template
        .kappa
        .iter()
        .map(|row| row.iter().map(|_| it.next().unwrap()).collect())
        .collect();
    let lambda = (0..k).map(|_| it.next().unwrap().exp()).collect();
    Params {
        transition,
        kappa,
        lambda,
        pi0: template.pi0.clone(),
    }
}

/// Natural-scale parameter names, in reporting order.
pub fn parameter_names(spec: &ModelSpec) -> Vec<String> {
    let k = spec.n_states;
    let mut names = Vec::new();
    if spec.is_semi_markov() {
        for h in 1..=k {
            names.push(format!("n[{h}]"));
            names.push(format!("q[{h}]"));
        }
    } else {
        for h in 1..=k {
            for j in 1..=k {
                names.push(format!("p[{h},{j}]"));
            }
        }
    }
    for h in 1..=k {
        for j in 0..=spec.n_targets {
            names.push(format!("kappa{j}[{h}]"));
        }
    }
    for h in 1..=k {
        names.push(format!("lambda[{h}]"));
    }
    names
}

fn natural_values(params: &Params) -> Vec<f64> {
    let mut out = Vec::new();
    match &params.transition {
        Transition::Matrix(m) => out.extend(m.iter().flatten()),
        Transition::Dwell(d) => d.iter().for_each(|d| out.extend([d.n, d.q])),
    }
    out.extend(params.kappa.iter().flatten());
    out.extend(&params.lambda);
    out
}

/// Jacobian of natural-scale values with respect to unconstrained coordinates.
fn natural_jacobian(spec: &ModelSpec, params: &Params) -> DMatrix<f64> {
    let n_nat = natural_values(params).len();
    let n_free = spec.n_free_params();
    let mut jac = DMatrix::zeros(n_nat, n_free);
    let k = spec.n_states;
    let (mut r, mut c) = (0, 0);
    match &params.transition {
        Transition::Matrix(m) => {
            for (h, row) in m.iter().enumerate() {
                let free: Vec<usize> = (0..k).filter(|&j| j != h).collect();
                for (kk, &pk) in row.iter().enumerate() {
                    for (fi, &j) in free.iter().enumerate() {
                        let delta = if kk == j { 1.0 } else { 0.0 };
                        jac[(r + kk, c + fi)] = pk * (delta - row[j]);
                    }
                }
                r += k;
                c += k - 1;
            }
        }
        Transition::Dwell(d) => {
            for dw in d {
                if spec.fixed_dwell_size().is_none() {
                    jac[(r, c)] = dw.n;
                    c += 1;
                }
                jac[(r + 1, c)] = dw.q * (1.0 - dw.q);
                c += 1;
                r += 2;
            }
        }
    }
    for _ in params.kappa.iter().flatten() {
        jac[(r, c)] = 1.0;
        r += 1;
        c += 1;
    }
    for l in &params.lambda {
        jac[(r, c)] = *l;
        r += 1;
        c += 1;
    }
    jac
}

/// Central finite-difference Hessian of `f` at `x` with steps
/// `ε^{1/3} (1 + |x_i|)`; off-diagonal terms use the four-point formula.
pub fn finite_difference_hessian<F>(f: F, x: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let n = x.len();
    let h: Vec<f64> = x
        .iter()
        .map(|v| f64::EPSILON.cbrt() * (1.0 + v.abs()))
        .collect();
    let eval = |shifts: &[(usize, f64)]| -> Result<f64> {
        let mut y = x.to_vec();
        for &(i, s) in shifts {
            y[i] += s;
        }
        f(&y)
    };
    let f0 = f(x)?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let values: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            if i == j {
                let up = eval(&[(i, h[i])])?;
                let dn = eval(&[(i, -h[i])])?;
                Ok((up - 2.0 * f0 + dn) / (h[i] * h[i]))
            } else {
                let pp = eval(&[(i, h[i]), (j, h[j])])?;
                let pm = eval(&[(i, h[i]), (j, -h[j])])?;
                let mp = eval(&[(i, -h[i]), (j, h[j])])?;
                let mm = eval(&[(i, -h[i]), (j, -h[j])])?;
                Ok((pp - pm - mp + mm) / (4.0 * h[i] * h[j]))
            }
        })
        .collect();
    let mut hess = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        let v = v?;
        hess[(i, j)] = v;
        hess[(j, i)] = v;
    }
    Ok(hess)
}

/// Inverse of the negative Hessian, with its conditioning diagnostics.
#[derive(Debug, Clone)]
pub struct Covariance {
    pub matrix: DMatrix<f64>,
    pub positive_definite: bool,
    pub condition: f64,
}

/// `v = (−H)^{-1}`. A matrix that is not positive definite is flagged but
/// still inverted; a numerically singular one is an error.
pub fn invert_negative_hessian(hess: &DMatrix<f64>) -> Result<Covariance> {
    let neg = -hess;
    let eig = SymmetricEigen::new(neg.clone());
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|e| e.abs()).collect();
    let max = abs.iter().cloned().fold(0.0, f64::max);
    let min = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(Error::SingularHessian { condition });
    }
    let positive_definite = eig.eigenvalues.iter().all(|&e| e > 0.0);
    let inv = eig.eigenvectors.clone()
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e))
        * eig.eigenvectors.transpose();
    let matrix = (&inv + inv.transpose()) * 0.5;
    Ok(Covariance {
        matrix,
        positive_definite,
        condition,
    })
}

/// Covariance of the unconstrained coordinates at `params`.
pub fn numerical_hessian(
    params: &Params,
    spec: &ModelSpec,
    traj: &Trajectory,
) -> Result<Covariance> {
    validate(spec, params, Some(traj)).into_result()?;
    let theta = to_unconstrained(spec, params)?;
    let design = DirectionalDesign::new(traj);
    let f = |x: &[f64]| -> Result<f64> {
        let p = from_unconstrained(spec, params, x);
        let chain = HiddenChain::from_params(spec, &p)?;
        chain_loglik(&chain, &design.log_emissions(&p))
    };
    let hess = finite_difference_hessian(f, &theta)?;
    invert_negative_hessian(&hess)
}

/// `estimate ± z_{(1+level)/2} · se`; non-finite bounds when `level ∉ (0, 1)`.
pub fn wald_ci(estimate: f64, se: f64, level: f64) -> (f64, f64) {
    if !(level > 0.0 && level < 1.0) {
        return (f64::NAN, f64::NAN);
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    (estimate - z * se, estimate + z * se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub parameters: Vec<ParameterEstimate>,
    /// Natural-scale covariance (delta method), rows in `parameters` order.
    pub covariance: Vec<Vec<f64>>,
    pub positive_definite: bool,
    pub condition_number: f64,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    pub n_obs: usize,
}

impl InferenceReport {
    pub fn wald_ci(&self, level: f64) -> Vec<(f64, f64)> {
        self.parameters
            .iter()
            .map(|p| wald_ci(p.estimate, p.std_error, level))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&ParameterEstimate> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Standard errors, covariance and information criteria at a fitted `params`.
pub fn infer(params: &Params, spec: &ModelSpec, traj: &Trajectory) -> Result<InferenceReport> {
    let loglik = observed_loglik(params, spec, traj)?;
    let cov = numerical_hessian(params, spec, traj)?;
    let jac = natural_jacobian(spec, params);
    let natural = &jac * &cov.matrix * jac.transpose();
    let values = natural_values(params);
    let parameters = parameter_names(spec)
        .into_iter()
        .zip(values)
        .enumerate()
        .map(|(i, (name, estimate))| {
            let var = natural[(i, i)];
            let std_error = if var >= 0.0 { var.sqrt() } else { f64::NAN };
            ParameterEstimate {
                name,
                estimate,
                std_error,
            }
        })
        .collect();
    let n_params = spec.n_free_params();
    let n_obs = traj.n_modelled();
    let (aic, bic) = information_criteria(loglik, n_params, n_obs);
    Ok(InferenceReport {
        parameters,
        covariance: natural
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        positive_definite: cov.positive_definite,
        condition_number: cov.condition,
        loglik,
        aic,
        bic,
        n_params,
        n_obs,
    })
}

/// Smoothed state probabilities for the modelled steps `t = 1..=T` and their
/// marginal argmax labels (0-based; ties go to the smaller index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub probabilities: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub fn decode_states(posterior: &PosteriorSummary) -> Decoding {
    let probabilities: Vec<Vec<f64>> = posterior.smoothed.iter().skip(1).cloned().collect();
    let labels = probabilities.iter().map(|row| argmax_first(row)).collect();
    Decoding {
        probabilities,
        labels,
    }
}

fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
