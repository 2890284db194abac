//! EM estimation: M-step blocks, the EM loop, and the short-run/long-run
//! multistart search.

use argmin::core::{CostFunction, Executor};
use argmin::solver::brent::BrentOpt;
use argmin::solver::neldermead::NelderMead;
use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circular::{ln_i0, ratio_a, ratio_a_over_x};
use crate::error::{Error, Result};
use crate::filter::{posterior_chain, Posterior, PosteriorSummary};
use crate::hidden::{hazard_vector, DwellDistribution, ExpandedChain, HiddenChain};
use crate::model::{
    validate, DirectionalDesign, HiddenKind, ModelSpec, Params, Trajectory, Transition,
};

/// Minimum total posterior weight for a state to be considered occupied.
const EMPTY_WEIGHT: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmSettings {
    pub n_starts: usize,
    pub short_run_max_iters: usize,
    pub short_run_rel_tol: f64,
    pub long_run_max_iters: usize,
    pub long_run_rel_tol: f64,
    /// Screening threshold on the smallest stationary probability.
    pub epsilon_stationary: f64,
    /// Screening bound on `max |κ|`.
    pub kappa_bound: f64,
    pub seed: u64,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            n_starts: 50,
            short_run_max_iters: 50,
            short_run_rel_tol: 1e-2,
            long_run_max_iters: 10_000,
            long_run_rel_tol: 1e-8,
            epsilon_stationary: 1e-3,
            kappa_bound: 100.0,
            seed: 1,
        }
    }
}

impl EmSettings {
    pub fn check(&self) -> Result<()> {
        let tols = [
            self.short_run_rel_tol,
            self.long_run_rel_tol,
            self.epsilon_stationary,
            self.kappa_bound,
        ];
        if self.n_starts == 0 {
            return Err(Error::Config("n_starts must be at least 1".into()));
        }
        if tols.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config(
                "EM tolerances and bounds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// What happened to one random start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "outcome")]
pub enum StartOutcome {
    Kept,
    Selected,
    ScreenedStationary { min_stationary: f64 },
    ScreenedKappa { max_abs_kappa: f64 },
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub index: usize,
    pub loglik: Option<f64>,
    #[serde(flatten)]
    pub outcome: StartOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Params,
    pub loglik: f64,
    pub n_iters: usize,
    pub converged: bool,
    pub multistart_audit: Vec<StartRecord>,
    /// Log-likelihood of the first (uniform initial law) pass, when run.
    pub first_pass_loglik: Option<f64>,
    pub posterior: PosteriorSummary,
}

/// Trajectory-dependent quantities shared by every EM iteration.
struct Problem<'a> {
    spec: &'a ModelSpec,
    design: DirectionalDesign,
}

impl<'a> Problem<'a> {
    fn new(spec: &'a ModelSpec, traj: &Trajectory) -> Result<Self> {
        spec.check()?;
        if traj.n_targets() != spec.n_targets {
            return Err(Error::Dimension {
                what: "trajectory targets",
                expected: spec.n_targets,
                actual: traj.n_targets(),
            });
        }
        Ok(Self {
            spec,
            design: DirectionalDesign::new(traj),
        })
    }

    fn e_step(&self, params: &Params) -> Result<(HiddenChain, Posterior)> {
        let chain = HiddenChain::from_params(self.spec, params)?;
        let em = self.design.log_emissions(params);
        let post = posterior_chain(&chain, &em)?;
        Ok((chain, post))
    }

    fn m_step(&self, params: &Params, chain: &HiddenChain, post: &Posterior) -> Result<Params> {
        let s = &post.summary;
        let k = self.spec.n_states;
        let transition = match &params.transition {
            Transition::Matrix(_) => {
                Transition::Matrix(m_step_transitions(&s.pairwise, &s.smoothed)?)
            }
            Transition::Dwell(d) => {
                let totals = post
                    .chain_pairwise_total
                    .as_ref()
                    .expect("semi-Markov posterior carries expanded totals");
                let expanded = chain.expanded.as_ref().expect("expanded chain");
                let fixed = self.spec.fixed_dwell_size();
                Transition::Dwell(m_step_dwell(expanded, totals, d, fixed)?.dwells)
            }
        };
        let mut kappa = Vec::with_capacity(k);
        let mut lambda = Vec::with_capacity(k);
        for state in 0..k {
            let w: Vec<f64> = s.smoothed[1..].iter().map(|r| r[state]).collect();
            let fit = m_step_kappa(&self.design, &w, &params.kappa[state])
                .map_err(|e| relabel_empty(e, state))?;
            if !fit.converged {
                debug!(
                    "kappa update for state {} stopped at gradient norm {:e}",
                    state + 1,
                    fit.gradient_norm
                );
            }
            kappa.push(fit.kappa);
            lambda.push(
                m_step_lambda(self.design.distances(), &w).map_err(|e| relabel_empty(e, state))?,
            );
        }
        Ok(Params {
            transition,
            kappa,
            lambda,
            pi0: params.pi0.clone(),
        })
    }

    fn run(
        &self,
        start: &Params,
        max_iters: usize,
        rel_tol: f64,
    ) -> Result<(Params, Posterior, usize, bool)> {
        validate(self.spec, start, None).into_result()?;
        let mut params = start.canonicalized();
        let (mut chain, mut post) = self.e_step(&params)?;
        let mut converged = false;
        let mut iters = 0;
        while iters < max_iters {
            iters += 1;
            let next = self.m_step(&params, &chain, &post)?.canonicalized();
            let (next_chain, next_post) = self.e_step(&next)?;
            let before = post.summary.loglik;
            let after = next_post.summary.loglik;
            if after < before - 1e-9 * before.abs().max(1.0) {
                return Err(Error::LoglikDecrease {
                    iteration: iters,
                    before,
                    after,
                });
            }
            let change = next.max_relative_change(&params);
            params = next;
            chain = next_chain;
            post = next_post;
            if change < rel_tol {
                converged = true;
                break;
            }
        }
        Ok((params, post, iters, converged))
    }
}

fn relabel_empty(e: Error, state: usize) -> Error {
    match e {
        Error::EmptyState { weight, .. } => Error::EmptyState { state, weight },
        other => other,
    }
}

/// Posterior quantities at `params`.
pub fn e_step(params: &Params, spec: &ModelSpec, traj: &Trajectory) -> Result<PosteriorSummary> {
    validate(spec, params, Some(traj)).into_result()?;
    let problem = Problem::new(spec, traj)?;
    Ok(problem.e_step(params)?.1.summary)
}

/// Closed-form transition update: expected transition counts over expected
/// visits, `π_hk = Σ_t ξ_t(h,k) / Σ_t γ_{t-1}(h)`.
pub fn m_step_transitions(
    pairwise: &[Vec<Vec<f64>>],
    smoothed: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let k = smoothed.first().map_or(0, |r| r.len());
    let mut counts = vec![vec![0.0; k]; k];
    for xi in pairwise {
        for (row, x) in counts.iter_mut().zip(xi) {
            for (c, v) in row.iter_mut().zip(x) {
                *c += v;
            }
        }
    }
    let mut out = Vec::with_capacity(k);
    for (h, row) in counts.into_iter().enumerate() {
        let visits: f64 = smoothed[..pairwise.len()].iter().map(|r| r[h]).sum();
        if !(visits > EMPTY_WEIGHT) {
            return Err(Error::EmptyState {
                state: h,
                weight: visits,
            });
        }
        let total: f64 = row.iter().sum();
        out.push(row.iter().map(|c| c / total).collect());
    }
    Ok(out)
}

/// Weighted mean step length.
pub fn m_step_lambda(distances: &[f64], weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if !(total > EMPTY_WEIGHT) {
        return Err(Error::EmptyState {
            state: 0,
            weight: total,
        });
    }
    Ok(distances
        .iter()
        .zip(weights)
        .map(|(d, w)| d * w)
        .sum::<f64>()
        / total)
}

/// Result of the concave κ maximisation for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaUpdate {
    pub kappa: Vec<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `Σ_t w_t [κ·u_t − ln I_0(‖V_t(κ)‖)]` (the `ln 2π` constant is dropped).
pub fn kappa_objective(design: &DirectionalDesign, weights: &[f64], kappa: &[f64]) -> f64 {
    weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w != 0.0)
        .map(|(i, w)| {
            let (vx, vy, lin) = design.consensus(i, kappa);
            w * (lin - ln_i0(vx.hypot(vy)))
        })
        .sum()
}

/// Objective, gradient and Hessian of [`kappa_objective`].
pub fn kappa_derivatives(
    design: &DirectionalDesign,
    weights: &[f64],
    kappa: &[f64],
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = design.n_coef();
    let mut f = 0.0;
    let mut g = DVector::zeros(p);
    let mut h = DMatrix::zeros(p, p);
    let mut vb = vec![0.0; p];
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (bx, by, u) = design.row(i);
        let (vx, vy, lin) = design.consensus(i, kappa);
        let ell = vx.hypot(vy);
        f += w * (lin - ln_i0(ell));
        let r = ratio_a_over_x(ell);
        // d(A(ℓ)/ℓ)/dℓ / ℓ
        let c2 = if ell < 1e-3 {
            -0.125 + ell * ell / 24.0
        } else {
            let a = ratio_a(ell);
            let da = 1.0 - a / ell - a * a;
            (da * ell - a) / (ell * ell * ell)
        };
        for j in 0..p {
            vb[j] = vx * bx[j] + vy * by[j];
            g[j] += w * (u[j] - r * vb[j]);
        }
        for j in 0..p {
            for l in j..p {
                let v = w * (r * (bx[j] * bx[l] + by[j] * by[l]) + c2 * vb[j] * vb[l]);
                h[(j, l)] -= v;
            }
        }
    }
    for j in 0..p {
        for l in 0..j {
            h[(j, l)] = h[(l, j)];
        }
    }
    (f, g, h)
}

/// Damped Newton ascent on the concave directional objective.
pub fn m_step_kappa(
    design: &DirectionalDesign,
    weights: &[f64],
    start: &[f64],
) -> Result<KappaUpdate> {
    let total: f64 = weights.iter().sum();
    if !(total > EMPTY_WEIGHT) {
        return Err(Error::EmptyState {
            state: 0,
            weight: total,
        });
    }
    let p = design.n_coef();
    let mut kappa = DVector::from_column_slice(start);
    let mut iterations = 0;
    let (mut f, mut g, mut h) = kappa_derivatives(design, weights, kappa.as_slice());
    let mut converged = g.norm() < 1e-8;
    while !converged && iterations < 100 {
        iterations += 1;
        let neg = -&h;
        let mut ridge = 0.0;
        let step = loop {
            let m = &neg + DMatrix::identity(p, p) * ridge;
            if let Some(ch) = m.cholesky() {
                break ch.solve(&g);
            }
            ridge = if ridge == 0.0 {
                1e-10 * (1.0 + neg.diagonal().amax())
            } else {
                ridge * 10.0
            };
        };
        let slope = g.dot(&step);
        // the predicted gain is below the rounding error of the objective
        if slope <= f64::EPSILON * f.abs().max(1.0) {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &kappa + &step * t;
            let ft = kappa_objective(design, weights, trial.as_slice());
            if ft >= f + 1e-4 * t * slope {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            break;
        };
        kappa = next;
        (f, g, h) = kappa_derivatives(design, weights, kappa.as_slice());
        converged = g.norm() < 1e-8;
    }
    let gradient_norm = g.norm();
    Ok(KappaUpdate {
        kappa: kappa.as_slice().to_vec(),
        objective: f,
        gradient_norm,
        iterations,
        converged,
    })
}

/// Expected switch/stay counts per dwell index for one behaviour.
#[derive(Debug, Clone)]
struct DwellCounts {
    switch: Vec<f64>,
    stay: Vec<f64>,
}

impl DwellCounts {
    fn from_expanded(chain: &ExpandedChain, totals: &[Vec<f64>], g: usize) -> Self {
        let m = chain.hazards[g].len();
        let other = chain.index_of(1 - g, 1).expect("dwell index 1 exists");
        let mut switch = vec![0.0; m];
        let mut stay = vec![0.0; m];
        for k in 1..=m {
            let from = chain.index_of(g, k).expect("state in range");
            let to = chain.index_of(g, (k + 1).min(m)).expect("state in range");
            switch[k - 1] = totals[from][other];
            stay[k - 1] = totals[from][to];
        }
        Self { switch, stay }
    }

    fn objective(&self, d: &DwellDistribution) -> f64 {
        let (hz, _) = hazard_vector(d, self.switch.len());
        let mut total = 0.0;
        for ((c, sw), st) in hz.iter().zip(&self.switch).zip(&self.stay) {
            if *sw > 0.0 {
                total += sw * c.ln();
            }
            if *st > 0.0 {
                total += st * (-c).ln_1p();
            }
        }
        total
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(q: f64) -> f64 {
    (q / (1.0 - q)).ln()
}

const LOG_N_RANGE: (f64, f64) = (-7.0, 7.0);
const LOGIT_Q_RANGE: (f64, f64) = (-14.0, 14.0);

struct DwellCost<'a> {
    counts: &'a DwellCounts,
    fixed_n: Option<f64>,
}

impl DwellCost<'_> {
    fn value(&self, log_n: f64, logit_q: f64) -> f64 {
        let inside = (LOG_N_RANGE.0..=LOG_N_RANGE.1).contains(&log_n)
            && (LOGIT_Q_RANGE.0..=LOGIT_Q_RANGE.1).contains(&logit_q);
        if !inside {
            return f64::INFINITY;
        }
        let d = DwellDistribution {
            n: log_n.exp(),
            q: logistic(logit_q),
        };
        let v = -self.counts.objective(&d);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

impl CostFunction for DwellCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.value(p[0], p[1]))
    }
}

struct FixedSizeCost<'a>(DwellCost<'a>);

impl CostFunction for FixedSizeCost<'_> {
    type Param = f64;
    type Output = f64;
    fn cost(&self, p: &f64) -> std::result::Result<f64, argmin::core::Error> {
        let n = self.0.fixed_n.expect("fixed size");
        Ok(self.0.value(n.ln(), *p))
    }
}

/// Outcome of the dwell-law update.
#[derive(Debug, Clone, PartialEq)]
pub struct DwellUpdate {
    pub dwells: Vec<DwellDistribution>,
    /// Per behaviour: whether the optimiser improved on the incoming law.
    pub improved: Vec<bool>,
}

/// Maximises the dwell part of the expected complete log-likelihood,
/// `Σ N_switch(k) ln c(k) + N_stay(k) ln(1 − c(k))`, separately per behaviour.
/// The incoming law is kept unless the optimiser finds a strictly better one.
pub fn m_step_dwell(
    chain: &ExpandedChain,
    totals: &[Vec<f64>],
    current: &[DwellDistribution],
    fixed_size: Option<f64>,
) -> Result<DwellUpdate> {
    let mut dwells = Vec::with_capacity(current.len());
    let mut improved = Vec::with_capacity(current.len());
    for (g, cur) in current.iter().enumerate() {
        let counts = DwellCounts::from_expanded(chain, totals, g);
        let mass: f64 = counts.switch.iter().chain(&counts.stay).sum();
        if !(mass > EMPTY_WEIGHT) {
            return Err(Error::EmptyState {
                state: g,
                weight: mass,
            });
        }
        let cost = DwellCost {
            counts: &counts,
            fixed_n: fixed_size,
        };
        let n0 = fixed_size.unwrap_or(cur.n);
        let x0 = [
            n0.ln().clamp(LOG_N_RANGE.0 + 0.5, LOG_N_RANGE.1 - 0.5),
            logit(cur.q).clamp(LOGIT_Q_RANGE.0 + 0.5, LOGIT_Q_RANGE.1 - 0.5),
        ];
        let incoming = cost.value(n0.ln(), logit(cur.q));
        let candidate = match fixed_size {
            Some(n) => optimise_fixed_size(cost).map(|lq| (n, lq)),
            None => optimise_dwell(cost, x0).map(|p| (p[0].exp(), p[1])),
        };
        let cost = DwellCost {
            counts: &counts,
            fixed_n: fixed_size,
        };
        match candidate {
            Some((n, lq)) if cost.value(n.ln(), lq) < incoming => {
                dwells.push(DwellDistribution { n, q: logistic(lq) });
                improved.push(true);
            }
            other => {
                if other.is_none() {
                    warn!(
                        "dwell optimiser failed for state {}; keeping incoming values",
                        g + 1
                    );
                }
                dwells.push(DwellDistribution { n: n0, q: cur.q });
                improved.push(false);
            }
        }
    }
    Ok(DwellUpdate { dwells, improved })
}

fn optimise_dwell(cost: DwellCost<'_>, x0: [f64; 2]) -> Option<Vec<f64>> {
    let simplex = vec![
        x0.to_vec(),
        vec![x0[0] + 0.3, x0[1]],
        vec![x0[0], x0[1] + 0.3],
    ];
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-12).ok()?;
    let res = Executor::new(cost, solver)
        .configure(|s| s.max_iters(2000))
        .run()
        .ok()?;
    res.state.best_param
}

fn optimise_fixed_size(cost: DwellCost<'_>) -> Option<f64> {
    let solver = BrentOpt::new(LOGIT_Q_RANGE.0, LOGIT_Q_RANGE.1).set_tolerance(1e-12, 1e-12);
    let res = Executor::new(FixedSizeCost(cost), solver)
        .configure(|s| s.max_iters(500))
        .run()
        .ok()?;
    res.state.best_param
}

/// Runs EM from `start` until `max_iters` or until the greatest relative
/// parameter change falls below `rel_tol`.
pub fn em_run(
    start: &Params,
    spec: &ModelSpec,
    traj: &Trajectory,
    max_iters: usize,
    rel_tol: f64,
) -> Result<FitResult> {
    let problem = Problem::new(spec, traj)?;
    validate(spec, start, Some(traj)).into_result()?;
    let (params, post, n_iters, converged) = problem.run(start, max_iters, rel_tol)?;
    Ok(FitResult {
        loglik: post.summary.loglik,
        params,
        n_iters,
        converged,
        multistart_audit: Vec::new(),
        first_pass_loglik: None,
        posterior: post.summary,
    })
}

fn dirichlet_flat<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

/// Random starting values with a uniform initial law.
pub fn random_start<R: Rng + ?Sized>(spec: &ModelSpec, traj: &Trajectory, rng: &mut R) -> Params {
    let k = spec.n_states;
    let transition = match &spec.hidden {
        HiddenKind::Markov => Transition::Matrix((0..k).map(|_| dirichlet_flat(k, rng)).collect()),
        HiddenKind::SemiMarkov { fixed_size, .. } => Transition::Dwell(
            (0..k)
                .map(|_| {
                    let n = rng.random_range(0.5..5.0);
                    DwellDistribution {
                        n: fixed_size.unwrap_or(n),
                        q: rng.random_range(0.05..0.8),
                    }
                })
                .collect(),
        ),
    };
    let kappa = (0..k)
        .map(|_| {
            (0..=spec.n_targets)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect()
        })
        .collect();
    let mean_d = traj.mean_distance().max(f64::MIN_POSITIVE);
    let mut lambda: Vec<f64> = (0..k)
        .map(|_| rng.random_range(0.5..2.0) * mean_d)
        .collect();
    lambda.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Params {
        transition,
        kappa,
        lambda,
        pi0: vec![1.0 / k as f64; k],
    }
}

fn screen(spec: &ModelSpec, params: &Params, settings: &EmSettings) -> StartOutcome {
    let max_abs_kappa = params
        .kappa
        .iter()
        .flatten()
        .fold(0.0_f64, |m, x| m.max(x.abs()));
    if !(max_abs_kappa < settings.kappa_bound) {
        return StartOutcome::ScreenedKappa { max_abs_kappa };
    }
    match crate::hidden::behavior_stationary(spec, params) {
        Ok(nu) => {
            let min_stationary = nu.iter().cloned().fold(f64::INFINITY, f64::min);
            if min_stationary <= settings.epsilon_stationary {
                StartOutcome::ScreenedStationary { min_stationary }
            } else {
                StartOutcome::Kept
            }
        }
        Err(e) => StartOutcome::Failed {
            message: e.to_string(),
        },
    }
}

/// Short-run/long-run multistart EM with the two-pass initial-law policy:
/// the first pass uses a uniform initial law, the second restarts EM from the
/// first-pass estimate with the initial law set to its stationary law.
pub fn fit(spec: &ModelSpec, traj: &Trajectory, settings: &EmSettings) -> Result<FitResult> {
    settings.check()?;
    let problem = Problem::new(spec, traj)?;

    let short: Vec<(Option<Params>, StartRecord)> = (0..settings.n_starts)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(index as u64);
            let start = random_start(spec, traj, &mut rng);
            match problem.run(
                &start,
                settings.short_run_max_iters,
                settings.short_run_rel_tol,
            ) {
                Ok((params, post, _, _)) => {
                    let outcome = screen(spec, &params, settings);
                    let keep = outcome == StartOutcome::Kept;
                    let record = StartRecord {
                        index,
                        loglik: Some(post.summary.loglik),
                        outcome,
                    };
                    (keep.then_some(params), record)
                }
                Err(e) => (
                    None,
                    StartRecord {
                        index,
                        loglik: None,
                        outcome: StartOutcome::Failed {
                            message: e.to_string(),
                        },
                    },
                ),
            }
        })
        .collect();

    let mut audit: Vec<StartRecord> = short.iter().map(|(_, r)| r.clone()).collect();
    let best = short
        .iter()
        .filter_map(|(p, r)| p.as_ref().map(|p| (p, r.loglik.unwrap(), r.index)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.2.cmp(&a.2)));
    let Some((best_params, _, best_index)) = best else {
        return Err(Error::AllStartsScreened {
            n_starts: settings.n_starts,
        });
    };
    audit[best_index].outcome = StartOutcome::Selected;

    let (first, first_post, iters1, conv1) = problem.run(
        best_params,
        settings.long_run_max_iters,
        settings.long_run_rel_tol,
    )?;
    let first_loglik = first_post.summary.loglik;

    let (params, post, n_iters, converged) = match crate::hidden::behavior_stationary(spec, &first)
    {
        Ok(nu) => {
            let mut start = first.clone();
            start.pi0 = nu;
            let (p, post, it, c) = problem.run(
                &start,
                settings.long_run_max_iters,
                settings.long_run_rel_tol,
            )?;
            (p, post, iters1 + it, c)
        }
        Err(e) => {
            warn!("first-pass fit has no stationary law ({e}); keeping the uniform initial law");
            (first, first_post, iters1, conv1)
        }
    };
    Ok(FitResult {
        loglik: post.summary.loglik,
        params,
        n_iters,
        converged,
        multistart_audit: audit,
        first_pass_loglik: Some(first_loglik),
        posterior: post.summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::scenario1_params;
    use crate::model::Step;
    use rand_distr::Normal;
    use std::f64::consts::TAU;

    fn random_traj(rng: &mut ChaCha8Rng, t_max: usize, p: usize) -> Trajectory {
        let steps = (0..=t_max)
            .map(|_| Step {
                direction: rng.random::<f64>() * TAU,
                distance: rng.random::<f64>() * 2.0,
                target_angles: (0..p).map(|_| rng.random::<f64>() * TAU).collect(),
                target_weights: (0..p).map(|_| rng.random::<f64>() * 1.5).collect(),
            })
            .collect();
        Trajectory::new((0..p).map(|i| format!("t{i}")).collect(), steps).unwrap()
    }

    #[test]
    fn transitions_from_hard_path() {
        let path = [0usize, 0, 1, 1, 1, 0, 1, 0, 0];
        let smoothed: Vec<Vec<f64>> = path
            .iter()
            .map(|&s| {
                if s == 0 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                }
            })
            .collect();
        let pairwise: Vec<Vec<Vec<f64>>> = path
            .windows(2)
            .map(|w| {
                let mut x = vec![vec![0.0; 2]; 2];
                x[w[0]][w[1]] = 1.0;
                x
            })
            .collect();
        let m = m_step_transitions(&pairwise, &smoothed).unwrap();
        // from 0: 0→0, 0→1, 0→1, 0→0 ; from 1: 1→1, 1→1, 1→0, 1→0
        assert_eq!(m, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        let path = [0usize, 0, 0, 1, 1];
        let smoothed: Vec<Vec<f64>> = path
            .iter()
            .map(|&s| vec![(s == 0) as u8 as f64, s as f64])
            .collect();
        let pairwise: Vec<Vec<Vec<f64>>> = path
            .windows(2)
            .map(|w| {
                let mut x = vec![vec![0.0; 2]; 2];
                x[w[0]][w[1]] = 1.0;
                x
            })
            .collect();
        let m = m_step_transitions(&pairwise, &smoothed).unwrap();
        assert!((m[0][0] - 2.0 / 3.0).abs() < 1e-15 && (m[1][1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transitions_uniform_and_empty() {
        let smoothed = vec![vec![0.5, 0.5]; 4];
        let pairwise = vec![vec![vec![0.25; 2]; 2]; 3];
        let m = m_step_transitions(&pairwise, &smoothed).unwrap();
        assert!(m.iter().flatten().all(|x| (x - 0.5).abs() < 1e-15));
        let smoothed = vec![vec![1.0, 0.0]; 4];
        let pairwise = vec![vec![vec![1.0, 0.0], vec![0.0, 0.0]]; 3];
        assert!(matches!(
            m_step_transitions(&pairwise, &smoothed),
            Err(Error::EmptyState { state: 1, .. })
        ));
    }

    #[test]
    fn transitions_maximise_q_block() {
        // compare with a projected-gradient ascent on the row objective Σ_k N_hk ln π_hk
        let counts = [[3.2, 1.1, 0.4], [0.3, 5.0, 2.2], [1.0, 1.0, 7.5]];
        let pairwise = vec![counts.iter().map(|r| r.to_vec()).collect::<Vec<_>>()];
        let smoothed = vec![
            counts.iter().map(|r| r.iter().sum()).collect::<Vec<f64>>(),
            vec![0.0; 3],
        ];
        let m = m_step_transitions(&pairwise, &smoothed).unwrap();
        for (h, row) in counts.iter().enumerate() {
            // softmax-parameterised gradient ascent
            let mut a = [0.0f64; 3];
            for _ in 0..20000 {
                let z: f64 = a.iter().map(|x| x.exp()).sum();
                let p: Vec<f64> = a.iter().map(|x| x.exp() / z).collect();
                let n: f64 = row.iter().sum();
                for j in 0..3 {
                    a[j] += 0.05 * (row[j] - n * p[j]);
                }
            }
            let z: f64 = a.iter().map(|x| x.exp()).sum();
            for j in 0..3 {
                assert!((a[j].exp() / z - m[h][j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn lambda_examples() {
        let d = [0.5, 1.5, 2.0, 4.0];
        assert!((m_step_lambda(&d, &[1.0; 4]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(m_step_lambda(&d, &[0.0, 0.0, 1.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(
            m_step_lambda(&d, &[0.0; 4]),
            Err(Error::EmptyState { .. })
        ));
        // bisection on the score of the weighted exponential log-likelihood
        let w = [0.2, 0.9, 0.4, 0.7];
        let score = |l: f64| -> f64 {
            d.iter()
                .zip(&w)
                .map(|(d, w)| w * (d / (l * l) - 1.0 / l))
                .sum()
        };
        let (mut a, mut b) = (0.01, 20.0);
        for _ in 0..200 {
            let c = 0.5 * (a + b);
            if score(c) > 0.0 {
                a = c;
            } else {
                b = c;
            }
        }
        assert!(((a + b) / 2.0 - m_step_lambda(&d, &w).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn kappa_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let traj = random_traj(&mut rng, 60, 2);
            let design = DirectionalDesign::new(&traj);
            let w: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
            let kappa: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (_, g, h) = kappa_derivatives(&design, &w, &kappa);
            let step = 1e-6;
            for j in 0..3 {
                let mut up = kappa.clone();
                let mut dn = kappa.clone();
                up[j] += step;
                dn[j] -= step;
                let fd = (kappa_objective(&design, &w, &up) - kappa_objective(&design, &w, &dn))
                    / (2.0 * step);
                assert!(
                    (fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0),
                    "{fd} {}",
                    g[j]
                );
                let (_, gu, _) = kappa_derivatives(&design, &w, &up);
                let (_, gd, _) = kappa_derivatives(&design, &w, &dn);
                for l in 0..3 {
                    let fdh = (gu[l] - gd[l]) / (2.0 * step);
                    assert!((fdh - h[(l, j)]).abs() <= 1e-5 * h[(l, j)].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn kappa_hessian_near_zero_concentration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traj = random_traj(&mut rng, 20, 1);
        let design = DirectionalDesign::new(&traj);
        let w = vec![1.0; 20];
        for scale in [1e-9, 1e-5, 1e-3, 2e-3] {
            let kappa = vec![scale, -0.5 * scale];
            let (_, g, h) = kappa_derivatives(&design, &w, &kappa);
            let step = 1e-6;
            for j in 0..2 {
                let mut up = kappa.clone();
                let mut dn = kappa.clone();
                up[j] += step;
                dn[j] -= step;
                let (_, gu, _) = kappa_derivatives(&design, &w, &up);
                let (_, gd, _) = kappa_derivatives(&design, &w, &dn);
                for l in 0..2 {
                    assert!(((gu[l] - gd[l]) / (2.0 * step) - h[(l, j)]).abs() < 1e-6);
                }
            }
            assert!(g.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn kappa_mle_identity() {
        // p = 0 and turning angles i.i.d. VM(0, κ): A(κ̂) equals the mean cosine
        // of the turning angles (resultant length when the mean direction is 0)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut dir = 0.0;
        let mut steps = Vec::new();
        for _ in 0..2001 {
            steps.push(Step {
                direction: dir,
                distance: 1.0,
                target_angles: vec![],
                target_weights: vec![],
            });
            dir = crate::circular::wrap_tau(
                dir + crate::circular::sample_von_mises(0.0, 3.0, &mut rng),
            );
        }
        let traj = Trajectory::new(vec![], steps).unwrap();
        let design = DirectionalDesign::new(&traj);
        let fit = m_step_kappa(&design, &vec![1.0; 2000], &[0.1]).unwrap();
        assert!(fit.converged && fit.gradient_norm < 1e-8);
        let turns: Vec<f64> = (1..=2000)
            .map(|t| traj.steps[t].direction - traj.steps[t - 1].direction)
            .collect();
        let mean_cos = turns.iter().map(|x| x.cos()).sum::<f64>() / 2000.0;
        assert!((ratio_a(fit.kappa[0]) - mean_cos).abs() < 1e-10);
        assert!((fit.kappa[0] - 3.0).abs() < 0.3);
    }

    #[test]
    fn kappa_empty_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traj = random_traj(&mut rng, 10, 1);
        let design = DirectionalDesign::new(&traj);
        assert!(matches!(
            m_step_kappa(&design, &[0.0; 10], &[1.0, 1.0]),
            Err(Error::EmptyState { .. })
        ));
    }

    #[test]
    fn kappa_objective_concave_along_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let traj = random_traj(&mut rng, 80, 2);
        let design = DirectionalDesign::new(&traj);
        let w: Vec<f64> = (0..80).map(|_| rng.random::<f64>()).collect();
        for _ in 0..100 {
            let a: Vec<f64> = (0..3).map(|_| rng.random_range(-30.0..30.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-30.0..30.0)).collect();
            let fa = kappa_objective(&design, &w, &a);
            let fb = kappa_objective(&design, &w, &b);
            for s in [0.1, 0.25, 0.5, 0.75, 0.9] {
                let m: Vec<f64> = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| (1.0 - s) * x + s * y)
                    .collect();
                let fm = kappa_objective(&design, &w, &m);
                assert!(fm >= (1.0 - s) * fa + s * fb - 1e-9);
            }
        }
    }

    /// Draws a path from the expanded chain and returns exact pairwise counts.
    fn dwell_counts_from_draws(
        d: DwellDistribution,
        n_spells: usize,
        m: usize,
        seed: u64,
    ) -> (ExpandedChain, Vec<Vec<f64>>) {
        let other = DwellDistribution { n: 1.0, q: 0.5 };
        let chain = crate::hidden::build_expanded_chain(&[d, other], &[m, m]).unwrap();
        let size = chain.len();
        let mut totals = vec![vec![0.0; size]; size];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = |rng: &mut ChaCha8Rng| -> u64 {
            let lam = rand_distr::Gamma::new(d.n, (1.0 - d.q) / d.q)
                .unwrap()
                .sample(rng);
            1 + rand_distr::Poisson::new(lam.max(1e-12))
                .unwrap()
                .sample(rng) as u64
        };
        let back = (chain.index_of(1, 1).unwrap(), chain.index_of(0, 1).unwrap());
        for _ in 0..n_spells {
            totals[back.0][back.1] += 1.0;
            let len = gamma(&mut rng) as usize;
            for k in 1..=len {
                let from = chain.index_of(0, k.min(m)).unwrap();
                let to = if k == len {
                    chain.index_of(1, 1).unwrap()
                } else {
                    chain.index_of(0, (k + 1).min(m)).unwrap()
                };
                totals[from][to] += 1.0;
            }
        }
        (chain, totals)
    }

    #[test]
    fn dwell_recovers_negative_binomial() {
        let truth = DwellDistribution { n: 3.0, q: 0.4 };
        // about 10^4 transitions
        let (chain, totals) = dwell_counts_from_draws(truth, 1800, 60, 5);
        let n_trans: f64 = totals.iter().flatten().sum();
        assert!(n_trans > 9000.0);
        let start = [
            DwellDistribution { n: 1.0, q: 0.2 },
            DwellDistribution { n: 1.0, q: 0.5 },
        ];
        let up = m_step_dwell(&chain, &totals, &start, None).unwrap();
        assert!(up.improved[0]);
        assert!((up.dwells[0].q - 0.4).abs() < 0.05, "{:?}", up.dwells[0]);
        let counts = DwellCounts::from_expanded(&chain, &totals, 0);
        assert!(counts.objective(&up.dwells[0]) >= counts.objective(&start[0]));
    }

    #[test]
    fn dwell_fixed_unit_size_matches_projected_counts() {
        let truth = DwellDistribution { n: 2.0, q: 0.3 };
        let (chain, totals) = dwell_counts_from_draws(truth, 300, 30, 8);
        let up = m_step_dwell(
            &chain,
            &totals,
            &[DwellDistribution { n: 1.0, q: 0.5 }; 2],
            Some(1.0),
        )
        .unwrap();
        // projected 2-state chain: switches out of state 0 over all transitions out of state 0
        let m0 = 30;
        let mut switch = 0.0;
        let mut total = 0.0;
        for a in 0..m0 {
            for b in 0..chain.len() {
                total += totals[a][b];
                if b >= m0 {
                    switch += totals[a][b];
                }
            }
        }
        assert_eq!(up.dwells[0].n, 1.0);
        assert!((up.dwells[0].q - switch / total).abs() < 1e-6);
    }

    #[test]
    fn dwell_never_worsens() {
        let truth = DwellDistribution { n: 4.0, q: 0.6 };
        let (chain, totals) = dwell_counts_from_draws(truth, 400, 30, 9);
        let counts = DwellCounts::from_expanded(&chain, &totals, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let cur = DwellDistribution {
                n: rng.random_range(0.5..8.0),
                q: rng.random_range(0.05..0.9),
            };
            let up = m_step_dwell(
                &chain,
                &totals,
                &[cur, DwellDistribution { n: 1.0, q: 0.5 }],
                None,
            )
            .unwrap();
            assert!(counts.objective(&up.dwells[0]) >= counts.objective(&cur));
        }
    }

    /// Small scenario-style trajectory simulated inline (one target straight ahead).
    fn two_state_data(seed: u64, t_max: usize) -> (Trajectory, Vec<usize>) {
        let params = scenario1_params();
        let m = match &params.transition {
            Transition::Matrix(m) => m.clone(),
            _ => unreachable!(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = 0;
        let mut dir = 0.0;
        let mut steps = vec![];
        let mut states = vec![0];
        steps.push(Step {
            direction: 0.0,
            distance: 1.0,
            target_angles: vec![1.0],
            target_weights: vec![1.0],
        });
        let noise = Normal::new(0.0, 1.5).unwrap();
        for _ in 1..=t_max {
            state = if rng.random::<f64>() < m[state][0] {
                0
            } else {
                1
            };
            let target = crate::circular::wrap_tau(noise.sample(&mut rng));
            let v = crate::circular::consensus_vector(dir, &params.kappa[state], &[target], &[1.0])
                .unwrap();
            let y = crate::circular::sample_von_mises(
                v.direction().unwrap_or(0.0),
                v.length(),
                &mut rng,
            );
            let d: f64 = Exp1.sample(&mut rng);
            steps.push(Step {
                direction: y,
                distance: d * params.lambda[state],
                target_angles: vec![target],
                target_weights: vec![1.0],
            });
            states.push(state);
            dir = y;
        }
        (Trajectory::new(vec!["x".into()], steps).unwrap(), states)
    }

    #[test]
    fn e_step_single_state_and_classification() {
        let (traj, truth) = two_state_data(3, 400);
        let mut p1 = scenario1_params();
        p1.transition = Transition::Matrix(vec![vec![1.0]]);
        p1.kappa.truncate(1);
        p1.lambda.truncate(1);
        p1.pi0 = vec![1.0];
        let s = e_step(&p1, &ModelSpec::markov(1, 1), &traj).unwrap();
        assert!(s.smoothed.iter().all(|r| r[0] == 1.0));

        let s = e_step(&scenario1_params(), &ModelSpec::markov(2, 1), &traj).unwrap();
        let hits = (1..=400)
            .filter(|&t| (s.smoothed[t][1] > 0.5) as usize == truth[t])
            .count();
        assert!(hits as f64 / 400.0 > 0.95, "{hits}");
    }

    #[test]
    fn em_start_at_truth_is_stable() {
        let (traj, _) = two_state_data(11, 500);
        let spec = ModelSpec::markov(2, 1);
        let truth = scenario1_params();
        let ll0 = crate::filter::posterior(&truth, &spec, &traj)
            .unwrap()
            .summary
            .loglik;
        // the truth is not the maximiser: EM climbs about χ²_8/2 from it
        let r = em_run(&truth, &spec, &traj, 10_000, 1e-8).unwrap();
        assert!(r.converged && r.loglik >= ll0 - 1e-9 && r.loglik - ll0 < 15.0);
        let again = em_run(&r.params, &spec, &traj, 5, 0.0).unwrap();
        assert!((again.loglik - r.loglik).abs() < 1e-4);
    }

    #[test]
    fn em_single_state_fixed_point() {
        let (traj, _) = two_state_data(12, 300);
        let spec = ModelSpec::markov(1, 1);
        let start = Params {
            transition: Transition::Matrix(vec![vec![1.0]]),
            kappa: vec![vec![0.5, 0.5]],
            lambda: vec![1.0],
            pi0: vec![1.0],
        };
        let one = em_run(&start, &spec, &traj, 1, 0.0).unwrap();
        let more = em_run(&one.params, &spec, &traj, 3, 0.0).unwrap();
        for (a, b) in one
            .params
            .flat_values()
            .iter()
            .zip(more.params.flat_values())
        {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((one.loglik - more.loglik).abs() < 1e-10);
    }

    #[test]
    fn em_monotone_from_random_starts() {
        let (traj, _) = two_state_data(13, 300);
        let spec = ModelSpec::markov(2, 1);
        let problem = Problem::new(&spec, &traj).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let mut params = random_start(&spec, &traj, &mut rng).canonicalized();
            let (mut chain, mut post) = problem.e_step(&params).unwrap();
            for _ in 0..15 {
                let next = problem
                    .m_step(&params, &chain, &post)
                    .unwrap()
                    .canonicalized();
                let (c, p) = problem.e_step(&next).unwrap();
                assert!(p.summary.loglik >= post.summary.loglik - 1e-9 * post.summary.loglik.abs());
                params = next;
                chain = c;
                post = p;
            }
        }
    }

    #[test]
    fn random_starts_valid_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = random_traj(&mut rng, 10, 2);
        for spec in [ModelSpec::markov(3, 2), ModelSpec::semi_markov(2, [20, 20])] {
            let mut a = ChaCha8Rng::seed_from_u64(7);
            let mut b = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..1000 {
                let p = random_start(&spec, &traj, &mut a);
                assert!(validate(&spec, &p, Some(&traj)).is_ok());
                assert!(p.kappa.iter().flatten().all(|k| k.abs() < 100.0));
                assert_eq!(p, random_start(&spec, &traj, &mut b));
            }
        }
    }

    #[test]
    fn fit_recovers_two_states() {
        let (traj, _) = two_state_data(21, 500);
        let spec = ModelSpec::markov(2, 1);
        let settings = EmSettings {
            n_starts: 10,
            ..EmSettings::default()
        };
        let r = fit(&spec, &traj, &settings).unwrap();
        let truth = scenario1_params();
        assert!(r.converged);
        assert!(
            (r.params.kappa[0][0] - truth.kappa[0][0]).abs() < 4.0,
            "{:?}",
            r.params
        );
        assert!((r.params.lambda[1] - truth.lambda[1]).abs() < 0.5);
        let ll = crate::filter::posterior(&r.params, &spec, &traj)
            .unwrap()
            .summary
            .loglik;
        assert!((ll - r.loglik).abs() < 1e-9);
        assert_eq!(r.multistart_audit.len(), 10);
        assert_eq!(
            r.multistart_audit
                .iter()
                .filter(|a| a.outcome == StartOutcome::Selected)
                .count(),
            1
        );
        // deterministic for a fixed seed
        let again = fit(&spec, &traj, &settings).unwrap();
        assert_eq!(again.loglik, r.loglik);
    }

    #[test]
    fn all_screened_reports_audit() {
        let (traj, _) = two_state_data(22, 200);
        let spec = ModelSpec::markov(2, 1);
        let settings = EmSettings {
            n_starts: 3,
            kappa_bound: 1e-6,
            ..EmSettings::default()
        };
        assert!(matches!(
            fit(&spec, &traj, &settings),
            Err(Error::AllStartsScreened { n_starts: 3 })
        ));
    }

    #[test]
    fn settings_checked() {
        let bad = EmSettings {
            n_starts: 0,
            ..EmSettings::default()
        };
        assert!(bad.check().is_err());
        let bad = EmSettings {
            long_run_rel_tol: 0.0,
            ..EmSettings::default()
        };
        assert!(bad.check().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn em_invariant_under_start_relabelling(seed in any::<u64>()) {
                let (traj, _) = two_state_data(seed % 1000, 150);
                let spec = ModelSpec::markov(2, 1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let start = random_start(&spec, &traj, &mut rng);
                let a = em_run(&start, &spec, &traj, 20, 1e-8).unwrap();
                let b = em_run(&start.permuted(&[1, 0]), &spec, &traj, 20, 1e-8).unwrap();
                prop_assert_eq!(a.loglik, b.loglik);
                prop_assert_eq!(&a.params, &b.params);
                prop_assert_eq!(a.params.canonicalized(), a.params.clone());
            }
        }
    }
}
