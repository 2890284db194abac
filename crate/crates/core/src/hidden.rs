//! Hidden-process structure: Markov transition matrices, shifted negative
//! binomial dwell laws, and the expanded Markov chain over
//! `(state, dwell index)` pairs that approximates a two-state semi-Markov
//! process.

use std::collections::VecDeque;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::{beta::beta_reg, gamma::ln_gamma};

use crate::error::{Error, Result};
use crate::model::{HiddenKind, ModelSpec, Params, Transition};

/// Shifted negative binomial dwell law on `{1, 2, …}`:
/// `Q(k) = Γ(k−1+n) / (Γ(n) (k−1)!) · q^n (1−q)^(k−1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DwellDistribution {
    /// Size.
    pub n: f64,
    /// Success probability.
    pub q: f64,
}

impl DwellDistribution {
    pub fn new(n: f64, q: f64) -> Result<Self> {
        if !(n > 0.0 && n.is_finite()) || !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!(
                "dwell law needs n > 0 and 0 < q < 1, got n = {n}, q = {q}"
            )));
        }
        Ok(Self { n, q })
    }

    pub fn ln_pmf(&self, k: u64) -> f64 {
        debug_assert!(k >= 1);
        let x = (k - 1) as f64;
        ln_gamma(x + self.n) - ln_gamma(self.n) - ln_gamma(x + 1.0)
            + self.n * self.q.ln()
            + x * (-self.q).ln_1p()
    }

    /// `P(dwell ≥ k)`.
    pub fn survival(&self, k: u64) -> f64 {
        if k <= 1 {
            1.0
        } else {
            beta_reg((k - 1) as f64, self.n, 1.0 - self.q)
        }
    }

    pub fn mean(&self) -> f64 {
        1.0 + self.n * (1.0 - self.q) / self.q
    }
}

pub fn dwell_pmf(d: &DwellDistribution, k: u64) -> Result<f64> {
    if k < 1 {
        return Err(Error::Domain("dwell times start at 1".into()));
    }
    Ok(d.ln_pmf(k).exp())
}

/// Hazard `c(k) = Q(k) / Σ_{j ≥ k} Q(j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hazard {
    pub value: f64,
    /// The survivor mass vanished numerically and the hazard was set to 1.
    pub saturated: bool,
}

pub fn hazard(d: &DwellDistribution, k: u64) -> Result<Hazard> {
    if k < 1 {
        return Err(Error::Domain("dwell times start at 1".into()));
    }
    let surv = d.survival(k);
    let mass = d.ln_pmf(k).exp();
    if !(surv > 0.0) || mass > surv * (1.0 + 1e-9) {
        warn!(
            "dwell survivor mass vanished at k = {k} (n = {}, q = {}); hazard saturated",
            d.n, d.q
        );
        return Ok(Hazard {
            value: 1.0,
            saturated: true,
        });
    }
    Ok(Hazard {
        value: (mass / surv).min(1.0),
        saturated: false,
    })
}

/// Markov chain over `(behaviour, dwell index)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedChain {
    /// `(behaviour g, dwell index k)` with 0-based behaviour and 1-based dwell index.
    pub states: Vec<(usize, usize)>,
    pub transition: Vec<Vec<f64>>,
    /// Behaviour of each expanded state.
    pub projector: Vec<usize>,
    /// Hazards `c_g(k)` per behaviour, `k = 1..=m_g`.
    pub hazards: Vec<Vec<f64>>,
    pub saturated: bool,
}

impl ExpandedChain {
    /// Index of expanded state `(g, k)`.
    pub fn index_of(&self, g: usize, k: usize) -> Option<usize> {
        self.states.iter().position(|&s| s == (g, k))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Hazards `c(1..=m)` for one dwell law, plus whether any saturated.
pub(crate) fn hazard_vector(d: &DwellDistribution, m: usize) -> (Vec<f64>, bool) {
    let mut sat = false;
    let hz = (1..=m as u64)
        .map(|k| {
            let h = hazard(d, k).expect("k >= 1");
            sat |= h.saturated;
            h.value
        })
        .collect();
    (hz, sat)
}

/// Builds the expanded chain: from `(i, k)` move to `(1−i, 1)` with probability
/// `c_i(k)` and to `(i, min(m_i, k+1))` otherwise.
pub fn build_expanded_chain(dwells: &[DwellDistribution], m: &[usize]) -> Result<ExpandedChain> {
    if dwells.len() != 2 || m.len() != 2 {
        return Err(Error::InvalidModel(format!(
            "expanded chain is defined for 2 states, got {} dwell laws and {} truncations",
            dwells.len(),
            m.len()
        )));
    }
    if m.contains(&0) {
        return Err(Error::InvalidModel("truncation counts must be >= 1".into()));
    }
    let states: Vec<(usize, usize)> = (0..2)
        .flat_map(|g| (1..=m[g]).map(move |k| (g, k)))
        .collect();
    let offset = [0, m[0]];
    let size = states.len();
    let mut transition = vec![vec![0.0; size]; size];
    let mut hazards = Vec::with_capacity(2);
    let mut saturated = false;
    for g in 0..2 {
        let (hz, sat) = hazard_vector(&dwells[g], m[g]);
        saturated |= sat;
        let other = offset[1 - g];
        for k in 1..=m[g] {
            let from = offset[g] + k - 1;
            let stay = offset[g] + k.min(m[g] - 1);
            let c = hz[k - 1];
            transition[from][other] += c;
            transition[from][stay] += 1.0 - c;
        }
        hazards.push(hz);
    }
    let projector = states.iter().map(|&(g, _)| g).collect();
    Ok(ExpandedChain {
        states,
        transition,
        projector,
        hazards,
        saturated,
    })
}

/// States reachable from `start` along positive-probability transitions.
fn reachable(transition: &[Vec<f64>], start: usize) -> Vec<bool> {
    let n = transition.len();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        for (j, &p) in transition[i].iter().enumerate() {
            if p > 0.0 && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

/// Stationary law `ν` of an irreducible row-stochastic matrix (`νP = ν`, `Σν = 1`).
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = transition.len();
    if n == 0 || transition.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension {
            what: "transition matrix",
            expected: n,
            actual: transition.first().map_or(0, Vec::len),
        });
    }
    let reach: Vec<Vec<bool>> = (0..n).map(|i| reachable(transition, i)).collect();
    if let Some(i) = (0..n).find(|&i| reach[i].iter().any(|r| !r)) {
        // smallest closed class reachable from a state that cannot reach everything
        let closed = (0..n)
            .filter(|&j| reach[i][j])
            .map(|j| (0..n).filter(|&k| reach[j][k]).collect::<Vec<_>>())
            .filter(|class| class.iter().all(|&k| class.iter().all(|&l| reach[k][l])))
            .min_by_key(Vec::len)
            .unwrap_or_default();
        return Err(Error::Reducible { absorbing: closed });
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    // (Pᵀ − I) ν = 0 with the last equation replaced by Σν = 1
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = transition[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Domain("stationary system is singular".into()))?;
    let mut nu: Vec<f64> = sol.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = nu.iter().sum();
    nu.iter_mut().for_each(|x| *x /= total);
    Ok(nu)
}

/// Hidden chain actually run by the filter: Markov states or expanded states,
/// with the behaviour each chain state maps to.
#[derive(Debug, Clone)]
pub struct HiddenChain {
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub behavior: Vec<usize>,
    pub n_behaviors: usize,
    pub expanded: Option<ExpandedChain>,
}

impl HiddenChain {
    pub fn from_params(spec: &ModelSpec, params: &Params) -> Result<Self> {
        let k = spec.n_states;
        match (&spec.hidden, &params.transition) {
            (HiddenKind::Markov, Transition::Matrix(m)) => Ok(Self {
                transition: m.clone(),
                initial: params.pi0.clone(),
                behavior: (0..k).collect(),
                n_behaviors: k,
                expanded: None,
            }),
            (HiddenKind::SemiMarkov { truncation, .. }, Transition::Dwell(d)) => {
                let chain = build_expanded_chain(d, truncation)?;
                // every dwell spell starts at dwell index 1
                let mut initial = vec![0.0; chain.len()];
                for (g, &w) in params.pi0.iter().enumerate() {
                    let idx = chain.index_of(g, 1).expect("dwell index 1 exists");
                    initial[idx] = w;
                }
                Ok(Self {
                    transition: chain.transition.clone(),
                    initial,
                    behavior: chain.projector.clone(),
                    n_behaviors: k,
                    expanded: Some(chain),
                })
            }
            _ => Err(Error::InvalidModel(
                "transition parameters do not match the hidden-process kind".into(),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.transition.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transition.is_empty()
    }

    /// Stationary law projected onto behaviours.
    pub fn behavior_stationary(&self) -> Result<Vec<f64>> {
        let nu = stationary_distribution(&self.transition)?;
        let mut out = vec![0.0; self.n_behaviors];
        for (i, p) in nu.into_iter().enumerate() {
            out[self.behavior[i]] += p;
        }
        Ok(out)
    }
}

/// Stationary law of the behaviour process implied by `params`.
pub fn behavior_stationary(spec: &ModelSpec, params: &Params) -> Result<Vec<f64>> {
    HiddenChain::from_params(spec, params)?.behavior_stationary()
}
