//! Observed data, model configuration and parameters.

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::circular::{consensus_vector, ln_i0, von_mises_log_density};
use crate::error::{Error, Result};
use crate::hidden::DwellDistribution;

/// One recorded step: bearing and length of the displacement from the
/// location at time `t` to the location at time `t + 1`, plus the covariates
/// available when the step was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub direction: f64,
    pub distance: f64,
    pub target_angles: Vec<f64>,
    pub target_weights: Vec<f64>,
}

/// A time series of steps indexed `t = 0..=T`.
///
/// Step 0 only supplies the previous direction for step 1; likelihood
/// contributions run over `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub target_names: Vec<String>,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(target_names: Vec<String>, steps: Vec<Step>) -> Result<Self> {
        let traj = Self {
            target_names,
            steps,
        };
        let problems = traj.violations();
        if let Some(first) = problems.into_iter().next() {
            return Err(Error::Data {
                row: first.0,
                message: first.1,
            });
        }
        Ok(traj)
    }

    /// Number of targets `p`.
    pub fn n_targets(&self) -> usize {
        self.target_names.len()
    }

    /// Index of the last step, `T`.
    pub fn last_index(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    /// Number of modelled steps (`T`).
    pub fn n_modelled(&self) -> usize {
        self.last_index()
    }

    pub fn mean_distance(&self) -> f64 {
        let n = self.n_modelled().max(1);
        self.steps.iter().skip(1).map(|s| s.distance).sum::<f64>() / n as f64
    }

    fn violations(&self) -> Vec<(usize, String)> {
        let p = self.n_targets();
        let mut out = Vec::new();
        if self.steps.len() < 3 {
            out.push((
                0,
                format!("need at least 3 steps (T >= 2), got {}", self.steps.len()),
            ));
        }
        for (t, s) in self.steps.iter().enumerate() {
            if !s.direction.is_finite() {
                out.push((t, "direction is not finite".into()));
            }
            if !(s.distance >= 0.0) || !s.distance.is_finite() {
                out.push((
                    t,
                    format!("distance must be finite and >= 0, got {}", s.distance),
                ));
            }
            if s.target_angles.len() != p || s.target_weights.len() != p {
                out.push((
                    t,
                    format!(
                        "expected {p} target angles and weights, got {} and {}",
                        s.target_angles.len(),
                        s.target_weights.len()
                    ),
                ));
            }
            if s.target_angles
                .iter()
                .chain(&s.target_weights)
                .any(|v| !v.is_finite())
            {
                out.push((t, "non-finite target covariate".into()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum HiddenKind {
    Markov,
    /// Two-state semi-Markov process with shifted negative binomial dwell
    /// times, approximated by an expanded chain truncated at `truncation[i]`
    /// dwell steps in state `i`. `fixed_size` holds every dwell size at that
    /// value during fitting.
    SemiMarkov {
        truncation: Vec<usize>,
        #[serde(default)]
        fixed_size: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceFamily {
    #[default]
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_states: usize,
    pub n_targets: usize,
    pub hidden: HiddenKind,
    #[serde(default)]
    pub distance_family: DistanceFamily,
}

/// Default dwell truncation per state for the expanded chain.
pub const DEFAULT_TRUNCATION: usize = 30;

impl ModelSpec {
    pub fn markov(n_states: usize, n_targets: usize) -> Self {
        Self {
            n_states,
            n_targets,
            hidden: HiddenKind::Markov,
            distance_family: DistanceFamily::Exponential,
        }
    }

    pub fn semi_markov(n_targets: usize, truncation: [usize; 2]) -> Self {
        Self {
            n_states: 2,
            n_targets,
            hidden: HiddenKind::SemiMarkov {
                truncation: truncation.to_vec(),
                fixed_size: None,
            },
            distance_family: DistanceFamily::Exponential,
        }
    }

    pub fn is_semi_markov(&self) -> bool {
        matches!(self.hidden, HiddenKind::SemiMarkov { .. })
    }

    pub fn fixed_dwell_size(&self) -> Option<f64> {
        match &self.hidden {
            HiddenKind::SemiMarkov { fixed_size, .. } => *fixed_size,
            HiddenKind::Markov => None,
        }
    }

    /// Number of free parameters (for information criteria).
    pub fn n_free_params(&self) -> usize {
        let k = self.n_states;
        let hidden = match &self.hidden {
            HiddenKind::Markov => k * (k - 1),
            HiddenKind::SemiMarkov { fixed_size, .. } => {
                if fixed_size.is_some() {
                    k
                } else {
                    2 * k
                }
            }
        };
        hidden + k * (self.n_targets + 1) + k
    }

    pub fn check(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(v.join("; ")))
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_states == 0 {
            out.push("state count must be at least 1".to_string());
        }
        if let HiddenKind::SemiMarkov {
            truncation,
            fixed_size,
        } = &self.hidden
        {
            if self.n_states != 2 {
                out.push(format!(
                    "semi-Markov hidden process requires 2 states, got {}",
                    self.n_states
                ));
            }
            if truncation.len() != self.n_states {
                out.push(format!(
                    "expected {} truncation counts, got {}",
                    self.n_states,
                    truncation.len()
                ));
            }
            if truncation.contains(&0) {
                out.push("truncation counts must be >= 1".to_string());
            }
            if let Some(n) = fixed_size {
                if !(*n > 0.0) {
                    out.push(format!("fixed dwell size must be positive, got {n}"));
                }
            }
        }
        out
    }
}

/// Hidden-process parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Transition {
    /// Row-stochastic `K × K` matrix, `matrix[h][k] = P(S_t = k | S_{t-1} = h)`.
    Matrix(Vec<Vec<f64>>),
    /// Dwell-time law per state (two-state semi-Markov process).
    Dwell(Vec<DwellDistribution>),
}

/// Full parameter set `θ = (transition, κ, λ)` plus the initial distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub transition: Transition,
    /// `kappa[k] = (κ_0, κ_1, …, κ_p)` for state `k`; `κ_0` weighs persistence.
    pub kappa: Vec<Vec<f64>>,
    /// Mean step length per state.
    pub lambda: Vec<f64>,
    /// Distribution of `S_0`.
    pub pi0: Vec<f64>,
}

impl Params {
    pub fn n_states(&self) -> usize {
        self.lambda.len()
    }

    /// Reorders states so that new state `i` is old state `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Params {
        let transition = match &self.transition {
            Transition::Matrix(m) => Transition::Matrix(
                order
                    .iter()
                    .map(|&h| order.iter().map(|&k| m[h][k]).collect())
                    .collect(),
            ),
            Transition::Dwell(d) => Transition::Dwell(order.iter().map(|&h| d[h]).collect()),
        };
        Params {
            transition,
            kappa: order.iter().map(|&k| self.kappa[k].clone()).collect(),
            lambda: order.iter().map(|&k| self.lambda[k]).collect(),
            pi0: order.iter().map(|&k| self.pi0[k]).collect(),
        }
    }

    /// Label states by decreasing persistence coefficient `κ_0`.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_states()).collect();
        order.sort_by(|&a, &b| {
            self.kappa[b][0]
                .partial_cmp(&self.kappa[a][0])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
    }

    pub fn canonicalized(&self) -> Params {
        self.permuted(&self.canonical_order())
    }

    /// Natural-scale values flattened in a fixed order, used for convergence checks.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match &self.transition {
            Transition::Matrix(m) => out.extend(m.iter().flatten()),
            Transition::Dwell(d) => d.iter().for_each(|d| out.extend([d.n, d.q])),
        }
        out.extend(self.kappa.iter().flatten());
        out.extend(&self.lambda);
        out
    }

    /// Greatest relative difference `|new − old| / (|old| + 1e-8)` across parameters.
    pub fn max_relative_change(&self, old: &Params) -> f64 {
        self.flat_values()
            .iter()
            .zip(old.flat_values())
            .map(|(new, old)| (new - old).abs() / (old.abs() + 1e-8))
            .fold(0.0, f64::max)
    }

    pub fn validate(&self, spec: &ModelSpec) -> Validation {
        validate(spec, self, None)
    }
}

/// Outcome of [`validate`]: every violated invariant, in discovery order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Validation {
    pub violations: Vec<String>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidModel(self.violations.join("; ")))
        }
    }
}

impl fmt::Display for Validation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            write!(f, "ok")
        } else {
            write!(f, "{}", self.violations.join("\n"))
        }
    }
}

/// Checks model, parameter and (optionally) data invariants, collecting all violations.
pub fn validate(spec: &ModelSpec, params: &Params, traj: Option<&Trajectory>) -> Validation {
    let mut v = spec.violations();
    let k = spec.n_states;
    let p = spec.n_targets;

    match (&params.transition, &spec.hidden) {
        (Transition::Matrix(m), HiddenKind::Markov) => {
            if m.len() != k {
                v.push(format!(
                    "transition matrix has {} rows, expected {k}",
                    m.len()
                ));
            }
            for (h, row) in m.iter().enumerate() {
                if row.len() != k {
                    v.push(format!(
                        "transition row {} has {} entries, expected {k}",
                        h + 1,
                        row.len()
                    ));
                }
                if row.iter().any(|x| !(*x >= 0.0 && *x <= 1.0)) {
                    v.push(format!(
                        "transition row {} has entries outside [0, 1]",
                        h + 1
                    ));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    v.push(format!(
                        "transition row {} sums to {sum}, expected 1",
                        h + 1
                    ));
                }
            }
        }
        (Transition::Dwell(d), HiddenKind::SemiMarkov { .. }) => {
            if d.len() != k {
                v.push(format!("expected {k} dwell distributions, got {}", d.len()));
            }
            for (h, dw) in d.iter().enumerate() {
                if !(dw.n > 0.0 && dw.n.is_finite()) {
                    v.push(format!(
                        "dwell size n for state {} must be positive, got {}",
                        h + 1,
                        dw.n
                    ));
                }
                if !(dw.q > 0.0 && dw.q < 1.0) {
                    v.push(format!(
                        "dwell probability q for state {} must lie in (0, 1), got {}",
                        h + 1,
                        dw.q
                    ));
                }
            }
        }
        (Transition::Matrix(_), _) => {
            v.push("semi-Markov model needs dwell parameters, got a transition matrix".into())
        }
        (Transition::Dwell(_), _) => {
            v.push("Markov model needs a transition matrix, got dwell parameters".into())
        }
    }

    if params.kappa.len() != k {
        v.push(format!(
            "kappa has {} rows, expected {k}",
            params.kappa.len()
        ));
    }
    for (s, row) in params.kappa.iter().enumerate() {
        if row.len() != p + 1 {
            v.push(format!(
                "kappa for state {} has {} entries, expected {}",
                s + 1,
                row.len(),
                p + 1
            ));
        }
        if row.iter().any(|x| !x.is_finite()) {
            v.push(format!("kappa for state {} is not finite", s + 1));
        }
    }
    if params.lambda.len() != k {
        v.push(format!(
            "lambda has {} entries, expected {k}",
            params.lambda.len()
        ));
    }
    if params.lambda.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        v.push("lambda must be positive".to_string());
    }
    if params.pi0.len() != k {
        v.push(format!(
            "pi0 has {} entries, expected {k}",
            params.pi0.len()
        ));
    }
    let pi_sum: f64 = params.pi0.iter().sum();
    if params.pi0.iter().any(|x| !(*x >= 0.0)) || (pi_sum - 1.0).abs() > 1e-12 {
        v.push(format!("pi0 must lie on the simplex (sum {pi_sum})"));
    }

    if let Some(traj) = traj {
        if traj.n_targets() != p {
            v.push(format!(
                "trajectory has {} targets, model expects {p}",
                traj.n_targets()
            ));
        }
        for (row, msg) in traj.violations() {
            v.push(format!("step {row}: {msg}"));
        }
    }
    Validation { violations: v }
}

/// `log f_k(y_t | F_{t-1}) + log g_k(d_t)` for state `k` at step `t ≥ 1`.
pub fn step_log_emission(
    params: &Params,
    spec: &ModelSpec,
    traj: &Trajectory,
    t: usize,
    k: usize,
) -> Result<f64> {
    if t == 0 || t > traj.last_index() {
        return Err(Error::Domain(format!(
            "emission index t must lie in 1..={}, got {t}",
            traj.last_index()
        )));
    }
    if k >= spec.n_states {
        return Err(Error::Domain(format!("state {k} out of range")));
    }
    let prev = &traj.steps[t - 1];
    let step = &traj.steps[t];
    let v = consensus_vector(
        prev.direction,
        &params.kappa[k],
        &step.target_angles,
        &step.target_weights,
    )?;
    Ok(von_mises_log_density(step.direction, v)
        + exponential_log_density(step.distance, params.lambda[k]))
}

pub(crate) fn exponential_log_density(d: f64, mean: f64) -> f64 {
    -mean.ln() - d / mean
}

/// Per-step regressors of the directional model, precomputed once per trajectory.
///
/// For step `t ≥ 1` and coefficient `j`, `basis` holds the unit vector of
/// term `j` scaled by its weight (persistence for `j = 0`, target `j` otherwise)
/// and `response` holds `basis_j · (cos y_t, sin y_t)`, so that the directional
/// log density is `κ·response − log(2π I_0(‖Σ_j κ_j basis_j‖))`.
#[derive(Debug, Clone)]
pub struct DirectionalDesign {
    n_coef: usize,
    bx: Vec<f64>,
    by: Vec<f64>,
    response: Vec<f64>,
    distance: Vec<f64>,
}

impl DirectionalDesign {
    pub fn new(traj: &Trajectory) -> Self {
        let n_coef = traj.n_targets() + 1;
        let t_max = traj.last_index();
        let mut bx = Vec::with_capacity(t_max * n_coef);
        let mut by = Vec::with_capacity(t_max * n_coef);
        let mut response = Vec::with_capacity(t_max * n_coef);
        let mut distance = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            let step = &traj.steps[t];
            let (sy, cy) = step.direction.sin_cos();
            let prev = traj.steps[t - 1].direction;
            let mut push = |angle: f64, weight: f64| {
                let (s, c) = angle.sin_cos();
                let (x, y) = (weight * c, weight * s);
                bx.push(x);
                by.push(y);
                response.push(x * cy + y * sy);
            };
            push(prev, 1.0);
            for (a, w) in step.target_angles.iter().zip(&step.target_weights) {
                push(*a, *w);
            }
            distance.push(step.distance);
        }
        Self {
            n_coef,
            bx,
            by,
            response,
            distance,
        }
    }

    pub fn n_coef(&self) -> usize {
        self.n_coef
    }

    /// Number of modelled steps `T`.
    pub fn len(&self) -> usize {
        self.distance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distance.is_empty()
    }

    /// Row for modelled step `i` (`t = i + 1`): `(basis_x, basis_y, response)`.
    pub(crate) fn row(&self, i: usize) -> (&[f64], &[f64], &[f64]) {
        let r = i * self.n_coef..(i + 1) * self.n_coef;
        (&self.bx[r.clone()], &self.by[r.clone()], &self.response[r])
    }

    pub fn distances(&self) -> &[f64] {
        &self.distance
    }

    /// Consensus vector and canonical term `κ·response` for modelled step `i`.
    #[inline]
    pub(crate) fn consensus(&self, i: usize, kappa: &[f64]) -> (f64, f64, f64) {
        let (bx, by, u) = self.row(i);
        let mut vx = 0.0;
        let mut vy = 0.0;
        let mut lin = 0.0;
        for j in 0..self.n_coef {
            vx += kappa[j] * bx[j];
            vy += kappa[j] * by[j];
            lin += kappa[j] * u[j];
        }
        (vx, vy, lin)
    }

    /// Directional log density of modelled step `i` under coefficients `kappa`.
    pub fn angle_log_density(&self, i: usize, kappa: &[f64]) -> f64 {
        let (vx, vy, lin) = self.consensus(i, kappa);
        lin - TAU.ln() - ln_i0(vx.hypot(vy))
    }

    /// `T × K` matrix of per-step, per-state log emissions (rows are `t = 1..=T`).
    pub fn log_emissions(&self, params: &Params) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                params
                    .kappa
                    .iter()
                    .zip(&params.lambda)
                    .map(|(kappa, &lambda)| {
                        self.angle_log_density(i, kappa)
                            + exponential_log_density(self.distance[i], lambda)
                    })
                    .collect()
            })
            .collect()
    }
}
