//! Rollout of learned models against the true systems, error metrics, and
//! the (Δt, M) error tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use crate::clock::Stopwatch;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::network::NetworkParams;
use crate::optimize::{train, TrainConfig, TrainStatus};
use crate::residual::{residual, ResidualScheme, SchemeKind};
use crate::systems::{default_substeps, derive_seed, generate_pairs, reference_integrate, DataPairSet, TrueSystem};

/// Largest RK4 step used when rolling out a model between grid points.
pub const ROLLOUT_MAX_STEP: f64 = 1e-3;
/// Largest RK4 step used for the true trajectory.
pub const TRUTH_MAX_STEP: f64 = 2.5e-4;

/// Number of equal RK4 substeps that keeps each one at or below `max_step`.
pub fn substeps_for(eval_step: f64, max_step: f64) -> usize {
    ((eval_step / max_step) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// The grid `0, step, 2 step, ..., horizon`. The horizon must be a whole
/// number of steps.
pub fn time_grid(horizon: f64, eval_step: f64) -> Result<Vec<f64>> {
    if !(eval_step > 0.0 && eval_step.is_finite()) || !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::contract(format!(
            "horizon and eval_step must be > 0 (got {horizon}, {eval_step})"
        )));
    }
    let n = (horizon / eval_step).round();
    if n < 1.0 || (n * eval_step - horizon).abs() > 1e-9 * horizon {
        return Err(Error::contract(format!(
            "horizon {horizon} is not a whole number of steps of {eval_step}"
        )));
    }
    let n = n as usize;
    let mut grid: Vec<f64> = (0..n).map(|i| i as f64 * eval_step).collect();
    grid.push(horizon);
    Ok(grid)
}

/// A trajectory sampled on a grid; truncated if the integration blew up.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// End of the grid interval in which a non-finite state appeared.
    pub diverged_at: Option<f64>,
}

/// Integrates `Φ' = field(Φ, t)` from `Φ0` with classical RK4, `substeps`
/// equal steps per grid interval, recording the state at every grid point.
pub fn rollout<F: VectorField + ?Sized>(
    field: &F,
    phi0: &[f64],
    horizon: f64,
    eval_step: f64,
    substeps: usize,
) -> Result<Rollout> {
    if phi0.len() != field.dim() {
        return Err(Error::contract(format!(
            "initial condition has dimension {}, model expects {}",
            phi0.len(),
            field.dim()
        )));
    }
    if let Some(i) = phi0.iter().position(|v| !v.is_finite()) {
        return Err(Error::contract(format!("initial condition entry {i} is not finite")));
    }
    let grid = time_grid(horizon, eval_step)?;
    let mut states = Vec::with_capacity(grid.len());
    states.push(phi0.to_vec());
    for w in grid.windows(2) {
        let last = states.last().expect("nonempty");
        match reference_integrate(field, last, w[0], w[1], substeps) {
            Ok(next) => states.push(next),
            Err(Error::Divergence { .. }) => {
                let times = grid[..states.len()].to_vec();
                return Ok(Rollout {
                    times,
                    states,
                    diverged_at: Some(w[1]),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Rollout {
        times: grid,
        states,
        diverged_at: None,
    })
}

/// Rollout of a learned network with the default substep rule.
pub fn rollout_learned(params: &NetworkParams, phi0: &[f64], horizon: f64, eval_step: f64) -> Result<Rollout> {
    rollout(params, phi0, horizon, eval_step, substeps_for(eval_step, ROLLOUT_MAX_STEP))
}

/// Reference trajectory of a true system on the evaluation grid.
pub fn true_trajectory(system: TrueSystem, phi0: &[f64], horizon: f64, eval_step: f64) -> Result<Rollout> {
    let r = rollout(&system, phi0, horizon, eval_step, substeps_for(eval_step, TRUTH_MAX_STEP))?;
    if r.diverged_at.is_some() {
        return Err(Error::Eval(format!("true {} trajectory diverged", system.name())));
    }
    Ok(r)
}

/// Running sums for Frobenius-norm errors over one or more stacked
/// trajectories.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorSums {
    pub diff_sq: f64,
    pub truth_sq: f64,
    pub points: usize,
}

impl ErrorSums {
    pub fn add(&mut self, pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::contract(format!(
                "trajectories have {} and {} grid points",
                pred.len(),
                truth.len()
            )));
        }
        for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
            if p.len() != t.len() {
                return Err(Error::contract(format!(
                    "grid point {k}: dimensions {} and {} differ",
                    p.len(),
                    t.len()
                )));
            }
            self.diff_sq += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            self.truth_sq += t.iter().map(|b| b * b).sum::<f64>();
        }
        self.points += pred.len();
        Ok(())
    }

    /// `‖pred − truth‖_F / ‖truth‖_F`.
    pub fn relative(&self) -> Result<f64> {
        if self.truth_sq == 0.0 {
            return Err(Error::Eval("relative error undefined for a zero reference".into()));
        }
        Ok((self.diff_sq / self.truth_sq).sqrt())
    }

    /// `‖pred − truth‖_F / sqrt(grid points)`.
    pub fn absolute(&self) -> Result<f64> {
        if self.points == 0 {
            return Err(Error::Eval("absolute error of an empty trajectory".into()));
        }
        Ok((self.diff_sq / self.points as f64).sqrt())
    }
}

pub fn relative_l2_error(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    let mut s = ErrorSums::default();
    s.add(pred, truth)?;
    s.relative()
}

pub fn abs_l2_error(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    let mut s = ErrorSums::default();
    s.add(pred, truth)?;
    s.absolute()
}

/// True and predicted trajectories on a shared grid, with their errors.
///
/// When the prediction diverged, all three series stop at the last finite
/// prediction and the metrics are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub times: Vec<f64>,
    pub true_states: Vec<Vec<f64>>,
    pub predicted_states: Vec<Vec<f64>>,
    pub metric_rel: Option<f64>,
    pub metric_abs: Option<f64>,
    pub diverged_at: Option<f64>,
}

impl TrajectoryResult {
    pub fn compare(truth: Rollout, pred: Rollout) -> Result<Self> {
        if truth.diverged_at.is_some() {
            return Err(Error::Eval("reference trajectory diverged".into()));
        }
        let n = pred.states.len();
        if truth.times.len() < n || truth.times[..n] != pred.times[..] {
            return Err(Error::contract("prediction and truth use different grids"));
        }
        let true_states = truth.states[..n].to_vec();
        let (metric_rel, metric_abs) = if pred.diverged_at.is_some() {
            (None, None)
        } else {
            (
                Some(relative_l2_error(&pred.states, &true_states)?),
                Some(abs_l2_error(&pred.states, &true_states)?),
            )
        };
        Ok(TrajectoryResult {
            times: pred.times,
            true_states,
            predicted_states: pred.states,
            metric_rel,
            metric_abs,
            diverged_at: pred.diverged_at,
        })
    }

    pub fn dim(&self) -> usize {
        self.true_states.first().map_or(0, Vec::len)
    }
}

/// What drives a table cell's rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellModel {
    /// Train a network on the cell's data.
    Network,
    /// Use the closed-form right-hand side (pipeline null test).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Smoke,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    pub system: TrueSystem,
    pub kind: SchemeKind,
    pub dts: Vec<f64>,
    pub stages: Vec<usize>,
    pub n_pairs: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub seed: u64,
    /// Independent training seeds per cell.
    pub replicates: usize,
    pub initial_conditions: Vec<Vec<f64>>,
    pub horizon: f64,
    pub eval_step: f64,
    pub model: CellModel,
    /// Fill the wall-time column. Off by default so reruns are byte-identical.
    pub record_time: bool,
}

impl TableSpec {
    /// The full grid of one of the three benchmark tables.
    pub fn paper(table: u8) -> Result<Self> {
        let (system, dts) = match table {
            1 => (TrueSystem::CubicOscillator, vec![0.01, 0.05, 0.1, 0.2]),
            2 => (TrueSystem::Glycolytic, vec![0.2, 0.5]),
            3 => (TrueSystem::HopfAugmented, vec![0.5, 1.0, 2.0]),
            _ => return Err(Error::config(format!("unknown table {table}; expected 1, 2 or 3"))),
        };
        Ok(TableSpec {
            name: format!("table{table}"),
            system,
            kind: SchemeKind::RecursiveRk4,
            dts,
            stages: vec![1, 2, 5, 10],
            n_pairs: 1000,
            hidden: vec![128],
            train: TrainConfig::default(),
            seed: 0,
            replicates: 1,
            initial_conditions: system.eval_initial_conditions(),
            horizon: system.eval_horizon(),
            eval_step: system.eval_step(),
            model: CellModel::Network,
            record_time: false,
        })
    }

    /// Reduced budget and a two-cell subset that still shows the M effect.
    pub fn smoke(table: u8) -> Result<Self> {
        let mut spec = TableSpec::paper(table)?;
        let (dt, stages) = match table {
            1 => (0.2, vec![1, 5]),
            2 => (0.2, vec![1, 10]),
            _ => (2.0, vec![1, 10]),
        };
        spec.dts = vec![dt];
        spec.stages = stages;
        spec.n_pairs = 500;
        spec.train.adam_steps = 2000;
        spec.train.lbfgs_max_iters = 200;
        Ok(spec)
    }

    pub fn at_scale(table: u8, scale: Scale) -> Result<Self> {
        match scale {
            Scale::Paper => TableSpec::paper(table),
            Scale::Smoke => TableSpec::smoke(table),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let d = self.system.dim();
        let mut w = vec![d];
        w.extend(&self.hidden);
        w.push(d);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.dts.is_empty() || self.stages.is_empty() {
            return Err(Error::config("table needs at least one Δt and one M"));
        }
        if let Some(dt) = self.dts.iter().find(|dt| !(**dt > 0.0 && dt.is_finite())) {
            return Err(Error::config(format!("Δt must be > 0, got {dt}")));
        }
        for &m in &self.stages {
            ResidualScheme::new(self.kind, m)?;
        }
        if self.n_pairs == 0 || self.replicates == 0 {
            return Err(Error::config("n_pairs and replicates must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        if self.initial_conditions.is_empty() {
            return Err(Error::config("table needs at least one evaluation initial condition"));
        }
        let d = self.system.dim();
        if let Some(ic) = self.initial_conditions.iter().find(|ic| ic.len() != d) {
            return Err(Error::config(format!(
                "initial condition {ic:?} does not have dimension {d}"
            )));
        }
        time_grid(self.horizon, self.eval_step).map_err(|e| Error::config(e.to_string()))?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum CellStatus {
    Ok,
    /// Training stopped early; metrics come from the best parameters seen.
    TrainDiverged(String),
    /// The learned model's rollout blew up at this time.
    RolloutDiverged(f64),
    Failed(String),
}

impl CellStatus {
    pub fn label(&self) -> String {
        match self {
            CellStatus::Ok => "ok".into(),
            CellStatus::TrainDiverged(_) => "train_diverged".into(),
            CellStatus::RolloutDiverged(t) => format!("rollout_diverged@{t}"),
            CellStatus::Failed(_) => "failed".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub dt: f64,
    pub stages: usize,
    pub replicate: usize,
    pub seed: u64,
    pub metric_rel: Option<f64>,
    pub metric_abs: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_seconds: Option<f64>,
    pub status: CellStatus,
    /// Per initial condition trajectories (empty for failed cells).
    pub trajectories: Vec<TrajectoryResult>,
    /// Trained parameters (network cells only).
    pub params: Option<NetworkParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableResult {
    pub spec: TableSpec,
    pub cells: Vec<CellResult>,
}

/// Data seed shared by every cell in a Δt row.
pub fn row_seed(base: u64, dt: f64) -> u64 {
    derive_seed(base, dt.to_bits())
}

/// Initialisation seed of one cell.
pub fn cell_seed(base: u64, dt: f64, stages: usize, replicate: usize) -> u64 {
    derive_seed(row_seed(base, dt), ((stages as u64) << 32) | replicate as u64)
}

/// Runs every (Δt, M, replicate) cell in order. `on_cell` sees each result
/// as soon as it is ready.
pub fn reproduce_table(spec: &TableSpec, mut on_cell: impl FnMut(&CellResult)) -> Result<TableResult> {
    spec.validate()?;
    let mut truths = Vec::with_capacity(spec.initial_conditions.len());
    for ic in &spec.initial_conditions {
        truths.push(true_trajectory(spec.system, ic, spec.horizon, spec.eval_step)?);
    }
    let mut cells = Vec::new();
    for &dt in &spec.dts {
        let data = generate_pairs(
            spec.system,
            &spec.system.default_domain(),
            spec.n_pairs,
            dt,
            row_seed(spec.seed, dt),
            default_substeps(dt),
        );
        for &m in &spec.stages {
            for replicate in 0..spec.replicates {
                let seed = cell_seed(spec.seed, dt, m, replicate);
                let start = Stopwatch::start();
                let mut cell = match &data {
                    Ok(data) => run_cell(spec, data, dt, m, seed, &truths),
                    Err(e) => failed_cell(e.to_string()),
                };
                cell.dt = dt;
                cell.stages = m;
                cell.replicate = replicate;
                cell.seed = seed;
                if spec.record_time {
                    cell.wall_seconds = Some(start.seconds());
                }
                on_cell(&cell);
                cells.push(cell);
            }
        }
    }
    Ok(TableResult {
        spec: spec.clone(),
        cells,
    })
}

fn failed_cell(message: String) -> CellResult {
    CellResult {
        dt: 0.0,
        stages: 0,
        replicate: 0,
        seed: 0,
        metric_rel: None,
        metric_abs: None,
        final_loss: None,
        wall_seconds: None,
        status: CellStatus::Failed(message),
        trajectories: Vec::new(),
        params: None,
    }
}

fn run_cell(spec: &TableSpec, data: &DataPairSet, dt: f64, m: usize, seed: u64, truths: &[Rollout]) -> CellResult {
    let outcome = (|| -> Result<CellResult> {
        let scheme = ResidualScheme::new(spec.kind, m)?;
        let substeps = substeps_for(spec.eval_step, ROLLOUT_MAX_STEP);
        let (final_loss, params, mut status) = match spec.model {
            CellModel::Exact => {
                // the unrolled scheme can be unstable for the stiff true
                // RHS at coarse M; the loss is then absent, not an error
                let mut total = Some(0.0);
                for pair in &data.pairs {
                    match residual(&scheme, pair, &spec.system) {
                        Ok(r) => total = total.map(|t| t + r.iter().map(|v| v * v).sum::<f64>()),
                        Err(Error::Divergence { .. }) => total = None,
                        Err(e) => return Err(e),
                    }
                }
                (total, None, CellStatus::Ok)
            }
            CellModel::Network => {
                let cfg = TrainConfig {
                    seed,
                    ..spec.train.clone()
                };
                let out = train(&scheme, &data.pairs, &spec.widths(), &cfg)?;
                let status = match out.status {
                    TrainStatus::Completed => CellStatus::Ok,
                    TrainStatus::Diverged { message, .. } => CellStatus::TrainDiverged(message),
                };
                (Some(out.final_loss), Some(out.params), status)
            }
        };
        let mut sums = ErrorSums::default();
        let mut trajectories = Vec::with_capacity(truths.len());
        let mut diverged = None;
        for (ic, truth) in spec.initial_conditions.iter().zip(truths) {
            let pred = match &params {
                Some(p) => rollout(p, ic, spec.horizon, spec.eval_step, substeps)?,
                None => rollout(&spec.system, ic, spec.horizon, spec.eval_step, substeps)?,
            };
            let result = TrajectoryResult::compare(truth.clone(), pred)?;
            match result.diverged_at {
                Some(t) => diverged = diverged.or(Some(t)),
                None => sums.add(&result.predicted_states, &result.true_states)?,
            }
            trajectories.push(result);
        }
        let (metric_rel, metric_abs) = match diverged {
            Some(t) => {
                status = CellStatus::RolloutDiverged(t);
                (None, None)
            }
            None => (Some(sums.relative()?), Some(sums.absolute()?)),
        };
        Ok(CellResult {
            dt,
            stages: m,
            replicate: 0,
            seed,
            metric_rel,
            metric_abs,
            final_loss,
            wall_seconds: None,
            status,
            trajectories,
            params,
        })
    })();
    outcome.unwrap_or_else(|e| failed_cell(e.to_string()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

impl TableResult {
    pub const CSV_HEADER: &'static str =
        "system,scheme,dt,M,seed,metric_rel,metric_abs,final_loss,wall_seconds,status";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.spec.system.name(),
                self.spec.kind.name(),
                c.dt,
                c.stages,
                c.seed,
                fmt_opt(c.metric_rel),
                fmt_opt(c.metric_abs),
                fmt_opt(c.final_loss),
                c.wall_seconds.map(|s| format!("{s:.3}")).unwrap_or_default(),
                c.status.label(),
            );
        }
        out
    }

    /// Rows Δt, columns M, relative error (replicate mean). Failed or
    /// diverged cells show `--`.
    pub fn render(&self) -> String {
        let mut grid: BTreeMap<(usize, usize), Vec<Option<f64>>> = BTreeMap::new();
        for c in &self.cells {
            let i = self.spec.dts.iter().position(|&d| d == c.dt).unwrap_or(0);
            let j = self.spec.stages.iter().position(|&m| m == c.stages).unwrap_or(0);
            grid.entry((i, j)).or_default().push(c.metric_rel);
        }
        let mut out = format!(
            "{} ({}, {}): relative l2 error\n{:>10}",
            self.spec.name,
            self.spec.system.name(),
            self.spec.kind.name(),
            "dt \\ M"
        );
        for m in &self.spec.stages {
            let _ = write!(out, "{:>12}", format!("M={m}"));
        }
        out.push('\n');
        for (i, dt) in self.spec.dts.iter().enumerate() {
            let _ = write!(out, "{dt:>10}");
            for j in 0..self.spec.stages.len() {
                let cell = grid.get(&(i, j)).and_then(|vals| {
                    let ok: Vec<f64> = vals.iter().flatten().copied().collect();
                    (ok.len() == vals.len()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
                });
                let text = cell.map_or("--".to_string(), |v| format!("{v:.4e}"));
                let _ = write!(out, "{text:>12}");
            }
            out.push('\n');
        }
        out
    }

    pub fn any_succeeded(&self) -> bool {
        self.cells.iter().any(|c| c.metric_rel.is_some())
    }

    pub fn cell(&self, dt: f64, stages: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.dt == dt && c.stages == stages)
    }
}
