//! Synthetic trajectories: hidden chains, and the target-pursuit scenario in
//! which the animal starts near the south-west corner of a square map and
//! walks until it comes within `stop_radius` of a target.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::circular::{consensus_vector, sample_von_mises, wrap_tau};
use crate::error::{Error, Result};
use crate::hidden::DwellDistribution;
use crate::model::{validate, ModelSpec, Params, Step, Trajectory, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    fn is_proper(&self) -> bool {
        (0..2).all(|i| {
            self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] <= self.max[i]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub params: Params,
    pub map_extent: Rect,
    pub target_position: [f64; 2],
    pub start_region: Rect,
    pub stop_radius: f64,
    pub max_steps: usize,
}

/// Side of the default square map (calibrated so that scenario 1 walks last
/// about 530 steps on average).
pub const DEFAULT_MAP_SIDE: f64 = 295.0;

impl ScenarioConfig {
    /// Default geometry: target at the centre of a `DEFAULT_MAP_SIDE` square,
    /// start uniform in the south-west `[0, 50]²` corner.
    pub fn new(params: Params) -> Self {
        Self::with_map_side(params, DEFAULT_MAP_SIDE)
    }

    pub fn with_map_side(params: Params, side: f64) -> Self {
        Self {
            params,
            map_extent: Rect {
                min: [0.0, 0.0],
                max: [side, side],
            },
            target_position: [side / 2.0, side / 2.0],
            start_region: Rect {
                min: [0.0, 0.0],
                max: [50.0, 50.0],
            },
            stop_radius: 30.0,
            max_steps: 5000,
        }
    }

    /// Persistent attraction/repulsion scenario.
    pub fn scenario1() -> Self {
        Self::new(Params {
            transition: Transition::Matrix(vec![vec![0.9, 0.1], vec![0.2, 0.8]]),
            kappa: vec![vec![20.0, 10.0], vec![15.0, -6.5]],
            lambda: vec![0.7, 1.2],
            pi0: vec![0.5, 0.5],
        })
    }

    /// Moderate attraction / weakly oriented scenario, on a map large enough
    /// for walks of about 700 steps.
    pub fn scenario2() -> Self {
        Self::with_map_side(
            Params {
                transition: Transition::Matrix(vec![vec![0.6, 0.4], vec![0.1, 0.9]]),
                kappa: vec![vec![5.0, 4.5], vec![2.0, 0.4]],
                lambda: vec![2.0, 5.0],
                pi0: vec![0.5, 0.5],
            },
            1900.0,
        )
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        validate(spec, &self.params, None).into_result()?;
        if spec.n_targets != 1 {
            return Err(Error::InvalidModel(
                "the scenario has exactly one target".into(),
            ));
        }
        if !(self.stop_radius > 0.0) {
            return Err(Error::Config("stop_radius must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        let inside = self.map_extent.is_proper()
            && self.start_region.is_proper()
            && self.map_extent.contains(self.start_region.min)
            && self.map_extent.contains(self.start_region.max);
        if !inside {
            return Err(Error::Config("start region must lie inside the map".into()));
        }
        if !self.map_extent.contains(self.target_position) {
            return Err(Error::Config("target must lie inside the map".into()));
        }
        Ok(())
    }
}

/// Draws a dwell time from the shifted negative binomial law
/// (`1 +` a Poisson–Gamma mixture count).
pub fn sample_dwell<R: Rng + ?Sized>(d: &DwellDistribution, rng: &mut R) -> u64 {
    let rate = Gamma::new(d.n, (1.0 - d.q) / d.q)
        .expect("valid dwell law")
        .sample(rng);
    if rate <= 0.0 {
        return 1;
    }
    1 + Poisson::new(rate).expect("positive rate").sample(rng) as u64
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Streaming sampler of the hidden behaviour sequence `S_0, S_1, …`.
pub struct ChainSampler<'a> {
    params: &'a Params,
    state: Option<usize>,
    remaining: u64,
}

impl<'a> ChainSampler<'a> {
    pub fn new(params: &'a Params) -> Self {
        Self {
            params,
            state: None,
            remaining: 0,
        }
    }

    pub fn next_state<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let next = match (self.state, &self.params.transition) {
            (None, _) => sample_index(&self.params.pi0, rng),
            (Some(s), Transition::Matrix(m)) => sample_index(&m[s], rng),
            (Some(s), Transition::Dwell(_)) => {
                if self.remaining > 1 {
                    self.remaining -= 1;
                    s
                } else {
                    1 - s
                }
            }
        };
        if let Transition::Dwell(d) = &self.params.transition {
            if self.state != Some(next) {
                self.remaining = sample_dwell(&d[next], rng);
            }
        }
        self.state = Some(next);
        next
    }
}

/// Hidden states `S_0..=S_T`.
pub fn simulate_chain<R: Rng + ?Sized>(
    params: &Params,
    spec: &ModelSpec,
    t_max: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    validate(spec, params, None).into_result()?;
    let mut sampler = ChainSampler::new(params);
    Ok((0..=t_max).map(|_| sampler.next_state(rng)).collect())
}

/// Uniform initial heading.
pub fn y0_initialization<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.0..std::f64::consts::TAU)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTrack {
    pub trajectory: Trajectory,
    /// `S_0..=S_T`.
    pub states: Vec<usize>,
    /// Positions `P_{-1}, P_0, …, P_T`; step `t` moves from row `t` to row `t + 1`.
    pub positions: Vec<[f64; 2]>,
    /// The walk hit `max_steps` before reaching the target.
    pub truncated: bool,
}

fn bearing(from: [f64; 2], to: [f64; 2]) -> f64 {
    wrap_tau((to[1] - from[1]).atan2(to[0] - from[0]))
}

/// Simulates the target-pursuit walk. Step 0 only supplies the initial
/// heading and is placed so that it ends at the start position.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<SimulatedTrack> {
    config.check(spec)?;
    let params = &config.params;
    let exps: Vec<Exp<f64>> = params
        .lambda
        .iter()
        .map(|l| Exp::new(1.0 / l).expect("positive mean"))
        .collect();
    let mut chain = ChainSampler::new(params);
    let start = [
        rng.random_range(config.start_region.min[0]..=config.start_region.max[0]),
        rng.random_range(config.start_region.min[1]..=config.start_region.max[1]),
    ];
    let s0 = chain.next_state(rng);
    let y0 = y0_initialization(rng);
    let d0 = exps[s0].sample(rng);
    let before = [start[0] - d0 * y0.cos(), start[1] - d0 * y0.sin()];
    let mut steps = vec![Step {
        direction: y0,
        distance: d0,
        target_angles: vec![bearing(before, config.target_position)],
        target_weights: vec![1.0],
    }];
    let mut states = vec![s0];
    let mut positions = vec![before, start];
    let mut pos = start;
    let mut prev = y0;
    let target = config.target_position;
    let reached = |p: [f64; 2]| (p[0] - target[0]).hypot(p[1] - target[1]) <= config.stop_radius;
    let mut truncated = true;
    for _ in 0..config.max_steps {
        let s = chain.next_state(rng);
        let x = bearing(pos, target);
        let v = consensus_vector(prev, &params.kappa[s], &[x], &[1.0])?;
        let y = wrap_tau(sample_von_mises(
            v.direction().unwrap_or(prev),
            v.length(),
            rng,
        ));
        let d = exps[s].sample(rng);
        pos = [pos[0] + d * y.cos(), pos[1] + d * y.sin()];
        steps.push(Step {
            direction: y,
            distance: d,
            target_angles: vec![x],
            target_weights: vec![1.0],
        });
        states.push(s);
        positions.push(pos);
        prev = y;
        if reached(pos) {
            truncated = false;
            break;
        }
    }
    let trajectory = Trajectory::new(vec!["target".into()], steps)?;
    Ok(SimulatedTrack {
        trajectory,
        states,
        positions,
        truncated,
    })
}
