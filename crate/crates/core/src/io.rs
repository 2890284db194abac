//! Trajectory CSV files, run configuration and atomic output writes.
//!
//! Trajectory CSV schema (one row per step, header required):
//!
//! | column        | meaning                                              |
//! |---------------|------------------------------------------------------|
//! | `t`           | time stamp, strictly increasing                      |
//! | `y`           | step direction (radians, or degrees with a flag)     |
//! | `d`           | step length, finite and non-negative                 |
//! | `x_<name>`    | direction to target `<name>`                         |
//! | `z_<name>`    | weight of target `<name>`                            |
//! | `state`       | optional 1-based true state (simulated data)         |
//! | `easting`, `northing` | optional position at the end of the step     |
//!
//! When steps are derived from positions, `y` and `d` of row `i >= 1` come
//! from the displacement between rows `i - 1` and `i`. Row 0 is kept only if
//! it carries its own `y` and `d`; otherwise it is dropped.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::circular::wrap_tau;
use crate::em::EmSettings;
use crate::error::{Error, Result};
use crate::model::{HiddenKind, ModelSpec, Params, Step, Trajectory, DEFAULT_TRUNCATION};
use crate::simulate::{ScenarioConfig, SimulatedTrack, DEFAULT_MAP_SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngleUnits {
    #[default]
    Radians,
    Degrees,
}

impl AngleUnits {
    fn to_radians(self, v: f64) -> f64 {
        match self {
            AngleUnits::Radians => v,
            AngleUnits::Degrees => v.to_radians(),
        }
    }

    fn radians_to_units(self, v: f64) -> f64 {
        match self {
            AngleUnits::Radians => v,
            AngleUnits::Degrees => v.to_degrees(),
        }
    }
}

/// A trajectory together with the optional columns that travel with it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub trajectory: Trajectory,
    pub times: Vec<f64>,
    /// 0-based true states, one per step.
    pub states: Option<Vec<usize>>,
    /// Position at the end of each step.
    pub positions: Option<Vec<[f64; 2]>>,
}

impl TrajectoryTable {
    /// Wraps a trajectory with times `0, 1, …, T`.
    pub fn from_trajectory(trajectory: Trajectory) -> Self {
        let times = (0..trajectory.steps.len()).map(|t| t as f64).collect();
        Self {
            trajectory,
            times,
            states: None,
            positions: None,
        }
    }

    pub fn from_simulation(track: &SimulatedTrack) -> Self {
        let mut table = Self::from_trajectory(track.trajectory.clone());
        table.states = Some(track.states.clone());
        table.positions = Some(track.positions[1..].to_vec());
        table
    }
}

/// Direction and length of each displacement between consecutive positions.
pub fn derive_steps(positions: &[[f64; 2]]) -> Vec<(f64, f64)> {
    positions
        .windows(2)
        .map(|w| {
            let de = w[1][0] - w[0][0];
            let dn = w[1][1] - w[0][1];
            (wrap_tau(dn.atan2(de)), de.hypot(dn))
        })
        .collect()
}

/// Reads a trajectory CSV file.
pub fn ingest(path: &Path, units: AngleUnits, derive_from_positions: bool) -> Result<Trajectory> {
    Ok(read_trajectory(path, units, derive_from_positions)?.trajectory)
}

pub fn read_trajectory(
    path: &Path,
    units: AngleUnits,
    derive_from_positions: bool,
) -> Result<TrajectoryTable> {
    let file = fs::File::open(path)?;
    read_trajectory_from(file, units, derive_from_positions)
}

struct Columns {
    t: usize,
    y: Option<usize>,
    d: Option<usize>,
    targets: Vec<(String, usize, usize)>,
    state: Option<usize>,
    position: Option<(usize, usize)>,
}

fn schema_error(message: impl Into<String>) -> Error {
    Error::Data {
        row: 1,
        message: message.into(),
    }
}

fn locate_columns(headers: &csv::StringRecord, derive: bool) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h == name);
    let mut seen = HashSet::new();
    for h in headers.iter() {
        if !seen.insert(h) {
            return Err(schema_error(format!("duplicate column '{h}'")));
        }
    }
    let t = find("t").ok_or_else(|| schema_error("missing required column 't'"))?;
    let (y, d) = (find("y"), find("d"));
    let position = match (find("easting"), find("northing")) {
        (Some(e), Some(n)) => Some((e, n)),
        (None, None) => None,
        _ => return Err(schema_error("easting and northing must appear together")),
    };
    if derive {
        if position.is_none() {
            return Err(schema_error(
                "deriving steps needs 'easting' and 'northing' columns",
            ));
        }
    } else {
        for (name, col) in [("y", y), ("d", d)] {
            if col.is_none() {
                return Err(schema_error(format!("missing required column '{name}'")));
            }
        }
    }
    let mut targets = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if let Some(name) = h.strip_prefix("x_") {
            let z = find(&format!("z_{name}")).ok_or_else(|| {
                schema_error(format!("column 'x_{name}' has no matching 'z_{name}'"))
            })?;
            targets.push((name.to_string(), i, z));
        }
    }
    for h in headers.iter() {
        if let Some(name) = h.strip_prefix("z_") {
            if find(&format!("x_{name}")).is_none() {
                return Err(schema_error(format!(
                    "column 'z_{name}' has no matching 'x_{name}'"
                )));
            }
        }
    }
    Ok(Columns {
        t,
        y,
        d,
        targets,
        state: find("state"),
        position,
    })
}

struct Row {
    t: f64,
    y: Option<f64>,
    d: Option<f64>,
    angles: Vec<f64>,
    weights: Vec<f64>,
    state: Option<usize>,
    position: Option<[f64; 2]>,
}

fn parse_row(
    rec: &csv::StringRecord,
    cols: &Columns,
    line: usize,
    units: AngleUnits,
) -> Result<Row> {
    let err = |message: String| Error::Data { row: line, message };
    let field = |i: usize| rec.get(i).unwrap_or("").trim();
    let number = |i: usize, name: &str| -> Result<f64> {
        let raw = field(i);
        if raw.is_empty() {
            return Err(err(format!("missing value in column '{name}'")));
        }
        let v: f64 = raw.parse().map_err(|_| {
            err(format!(
                "cannot parse '{raw}' in column '{name}' as a number"
            ))
        })?;
        if !v.is_finite() {
            return Err(err(format!("non-finite value in column '{name}'")));
        }
        Ok(v)
    };
    let optional = |i: Option<usize>, name: &str| -> Result<Option<f64>> {
        match i {
            Some(i) if !field(i).is_empty() => number(i, name).map(Some),
            _ => Ok(None),
        }
    };
    let t = number(cols.t, "t")?;
    let y = optional(cols.y, "y")?.map(|v| wrap_tau(units.to_radians(v)));
    let d = optional(cols.d, "d")?;
    if let Some(d) = d {
        if d < 0.0 {
            return Err(err(format!("negative distance {d}")));
        }
    }
    let mut angles = Vec::with_capacity(cols.targets.len());
    let mut weights = Vec::with_capacity(cols.targets.len());
    for (name, x, z) in &cols.targets {
        angles.push(wrap_tau(
            units.to_radians(number(*x, &format!("x_{name}"))?),
        ));
        weights.push(number(*z, &format!("z_{name}"))?);
    }
    let state = match cols.state {
        Some(i) if !field(i).is_empty() => {
            let raw = field(i);
            let s: usize = raw
                .parse()
                .map_err(|_| err(format!("state '{raw}' is not a positive integer")))?;
            if s == 0 {
                return Err(err("states are numbered from 1".into()));
            }
            Some(s - 1)
        }
        _ => None,
    };
    let position = match cols.position {
        Some((e, n)) => Some([number(e, "easting")?, number(n, "northing")?]),
        None => None,
    };
    Ok(Row {
        t,
        y,
        d,
        angles,
        weights,
        state,
        position,
    })
}

/// Reads a trajectory CSV from any reader. Data errors carry the 1-based
/// line number in the file (the header is line 1).
pub fn read_trajectory_from<R: Read>(
    reader: R,
    units: AngleUnits,
    derive_from_positions: bool,
) -> Result<TrajectoryTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = locate_columns(&headers, derive_from_positions)?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(rows.len() + 2, |p| p.line() as usize);
        let row = parse_row(&rec, &cols, line, units)?;
        if let Some(prev) = rows.last().map(|r: &Row| r.t) {
            if !(row.t > prev) {
                return Err(Error::Data {
                    row: line,
                    message: format!("t must be strictly increasing ({} after {prev})", row.t),
                });
            }
        }
        if !derive_from_positions {
            for (name, v) in [("y", row.y), ("d", row.d)] {
                if v.is_none() {
                    return Err(Error::Data {
                        row: line,
                        message: format!("missing value in column '{name}'"),
                    });
                }
            }
        }
        rows.push(row);
        lines.push(line);
    }
    if cols.state.is_some()
        && rows.iter().any(|r| r.state.is_none())
        && rows.iter().any(|r| r.state.is_some())
    {
        let i = rows.iter().position(|r| r.state.is_none()).unwrap_or(0);
        return Err(Error::Data {
            row: lines[i],
            message: "state column is only partly filled".into(),
        });
    }

    let mut keep: Vec<(usize, f64, f64)> = Vec::with_capacity(rows.len());
    if derive_from_positions {
        let positions: Vec<[f64; 2]> = rows.iter().map(|r| r.position.expect("checked")).collect();
        let derived = derive_steps(&positions);
        if let Some(first) = rows.first() {
            if let (Some(y), Some(d)) = (first.y, first.d) {
                keep.push((0, y, d));
            }
        }
        keep.extend(
            derived
                .into_iter()
                .enumerate()
                .map(|(i, (y, d))| (i + 1, y, d)),
        );
    } else {
        keep.extend(
            rows.iter()
                .enumerate()
                .map(|(i, r)| (i, r.y.expect("checked"), r.d.expect("checked"))),
        );
    }

    let names: Vec<String> = cols.targets.iter().map(|(n, _, _)| n.clone()).collect();
    let steps: Vec<Step> = keep
        .iter()
        .map(|&(i, y, d)| Step {
            direction: y,
            distance: d,
            target_angles: rows[i].angles.clone(),
            target_weights: rows[i].weights.clone(),
        })
        .collect();
    let trajectory = Trajectory::new(names, steps).map_err(|e| match e {
        Error::Data { row, message } => Error::Data {
            row: keep.get(row).map_or(row, |k| lines[k.0]),
            message,
        },
        other => other,
    })?;
    let times = keep.iter().map(|k| rows[k.0].t).collect();
    let states = cols
        .state
        .filter(|_| rows.iter().all(|r| r.state.is_some()))
        .map(|_| {
            keep.iter()
                .map(|k| rows[k.0].state.expect("checked"))
                .collect()
        });
    let positions = cols.position.map(|_| {
        keep.iter()
            .map(|k| rows[k.0].position.expect("checked"))
            .collect()
    });
    Ok(TrajectoryTable {
        trajectory,
        times,
        states,
        positions,
    })
}

/// Shortest decimal text that parses back to the same `f64`, switching to
/// exponent notation for very small or very large magnitudes.
pub fn format_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn fmt(v: f64) -> String {
    format_f64(v)
}

/// Serializes a trajectory table in the CSV schema above.
pub fn trajectory_csv(table: &TrajectoryTable, units: AngleUnits) -> Result<Vec<u8>> {
    let traj = &table.trajectory;
    let n = traj.steps.len();
    for (what, len) in [
        ("times", Some(table.times.len())),
        ("states", table.states.as_ref().map(Vec::len)),
        ("positions", table.positions.as_ref().map(Vec::len)),
    ] {
        if let Some(len) = len {
            if len != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    actual: len,
                });
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string(), "y".into(), "d".into()];
    for name in &traj.target_names {
        header.push(format!("x_{name}"));
        header.push(format!("z_{name}"));
    }
    if table.states.is_some() {
        header.push("state".into());
    }
    if table.positions.is_some() {
        header.push("easting".into());
        header.push("northing".into());
    }
    w.write_record(&header)?;
    for (i, s) in traj.steps.iter().enumerate() {
        let mut rec = vec![
            fmt(table.times[i]),
            fmt(units.radians_to_units(s.direction)),
            fmt(s.distance),
        ];
        for (a, z) in s.target_angles.iter().zip(&s.target_weights) {
            rec.push(fmt(units.radians_to_units(*a)));
            rec.push(fmt(*z));
        }
        if let Some(states) = &table.states {
            rec.push((states[i] + 1).to_string());
        }
        if let Some(pos) = &table.positions {
            rec.push(fmt(pos[i][0]));
            rec.push(fmt(pos[i][1]));
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_trajectory(path: &Path, table: &TrajectoryTable, units: AngleUnits) -> Result<()> {
    write_atomic(path, &trajectory_csv(table, units)?)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Builds a CSV document from a header and string rows.
pub fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.into_iter().collect::<Vec<_>>())?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HiddenChoice {
    #[default]
    Markov,
    SemiMarkov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub states: usize,
    /// Target names, matched against `x_<name>` columns. Empty means every
    /// target in the file.
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default)]
    pub hidden: HiddenChoice,
    /// Dwell truncation per state (semi-Markov only).
    #[serde(default)]
    pub truncation: Option<Vec<usize>>,
    #[serde(default)]
    pub fixed_dwell_size: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioName {
    Scenario1,
    Scenario2,
}

/// Simulation settings. Unset fields fall back to the named scenario
/// (scenario 1 when no name is given).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub scenario: Option<ScenarioName>,
    #[serde(default)]
    pub params: Option<Params>,
    #[serde(default)]
    pub map_side: Option<f64>,
    #[serde(default)]
    pub stop_radius: Option<f64>,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl SimulationConfig {
    pub fn scenario_config(&self) -> ScenarioConfig {
        let base = match self.scenario {
            Some(ScenarioName::Scenario2) => ScenarioConfig::scenario2(),
            _ => ScenarioConfig::scenario1(),
        };
        let params = self.params.clone().unwrap_or(base.params.clone());
        let mut cfg = match self.map_side {
            Some(side) => ScenarioConfig::with_map_side(params, side),
            None if self.scenario.is_none() && self.params.is_some() => {
                ScenarioConfig::with_map_side(params, DEFAULT_MAP_SIDE)
            }
            None => ScenarioConfig { params, ..base },
        };
        if let Some(r) = self.stop_radius {
            cfg.stop_radius = r;
        }
        if let Some(m) = self.max_steps {
            cfg.max_steps = m;
        }
        cfg
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Run configuration, read from TOML.
///
/// ```toml
/// seed = 7
/// output_dir = "results"
///
/// [model]
/// states = 2
/// targets = ["target"]
/// hidden = "markov"
///
/// [em]
/// n_starts = 20
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `em.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub em: EmSettings,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.em_settings().check()?;
        cfg.model_spec_for(cfg.model.targets.len().max(1))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn em_settings(&self) -> EmSettings {
        let mut s = self.em.clone();
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }

    /// Model specification for data with `n_targets` selected targets.
    pub fn model_spec_for(&self, n_targets: usize) -> Result<ModelSpec> {
        let m = &self.model;
        let hidden = match m.hidden {
            HiddenChoice::Markov => {
                if m.truncation.is_some() || m.fixed_dwell_size.is_some() {
                    return Err(Error::Config(
                        "truncation and fixed_dwell_size apply to semi-markov models only".into(),
                    ));
                }
                HiddenKind::Markov
            }
            HiddenChoice::SemiMarkov => HiddenKind::SemiMarkov {
                truncation: m
                    .truncation
                    .clone()
                    .unwrap_or_else(|| vec![DEFAULT_TRUNCATION; m.states]),
                fixed_size: m.fixed_dwell_size,
            },
        };
        let spec = ModelSpec {
            n_states: m.states,
            n_targets,
            hidden,
            distance_family: Default::default(),
        };
        spec.check()?;
        Ok(spec)
    }

    /// Restricts `traj` to the configured targets, in configured order.
    pub fn select_targets(&self, traj: &Trajectory) -> Result<Trajectory> {
        if self.model.targets.is_empty() {
            return Ok(traj.clone());
        }
        let idx = self
            .model
            .targets
            .iter()
            .map(|name| {
                traj.target_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "target '{name}' is not in the data (available: {:?})",
                            traj.target_names
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = traj
            .steps
            .iter()
            .map(|s| Step {
                direction: s.direction,
                distance: s.distance,
                target_angles: idx.iter().map(|&j| s.target_angles[j]).collect(),
                target_weights: idx.iter().map(|&j| s.target_weights[j]).collect(),
            })
            .collect();
        Ok(Trajectory {
            target_names: self.model.targets.clone(),
            steps,
        })
    }

    /// Selected trajectory and the matching model specification.
    pub fn prepare(&self, traj: &Trajectory) -> Result<(Trajectory, ModelSpec)> {
        let selected = self.select_targets(traj)?;
        let spec = self.model_spec_for(selected.n_targets())?;
        Ok((selected, spec))
    }
}
