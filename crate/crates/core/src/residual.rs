//! Integrator residuals `N_r`: the mismatch between the observed end state
//! of a data pair and the state predicted by integrating a candidate field
//! across the pair's time lag.
//!
//! Single-step kinds integrate the whole lag with one quadrature rule.
//! Recursive kinds split `[t1, t2]` into `M` uniform segments of width
//! `h = (t2 - t1) / M` and step through them with explicit Euler or the
//! classical four-stage Runge-Kutta update.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::field::{TapeField, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    EulerForward,
    EulerBackward,
    Trapezoid,
    RecursiveEuler,
    RecursiveRk4,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::EulerForward,
        SchemeKind::EulerBackward,
        SchemeKind::Trapezoid,
        SchemeKind::RecursiveEuler,
        SchemeKind::RecursiveRk4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::EulerForward => "euler_forward",
            SchemeKind::EulerBackward => "euler_backward",
            SchemeKind::Trapezoid => "trapezoid",
            SchemeKind::RecursiveEuler => "recursive_euler",
            SchemeKind::RecursiveRk4 => "recursive_rk4",
        }
    }

    pub fn is_recursive(self) -> bool {
        matches!(self, SchemeKind::RecursiveEuler | SchemeKind::RecursiveRk4)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown scheme '{s}' (expected one of euler_forward, euler_backward, trapezoid, recursive_euler, recursive_rk4)"
                ))
            })
    }
}

/// Residual kind plus stage count `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawScheme", into = "RawScheme")]
pub struct ResidualScheme {
    kind: SchemeKind,
    stages: usize,
}

#[derive(Serialize, Deserialize)]
struct RawScheme {
    kind: SchemeKind,
    stages: usize,
}

impl TryFrom<RawScheme> for ResidualScheme {
    type Error = Error;

    fn try_from(raw: RawScheme) -> Result<Self> {
        ResidualScheme::new(raw.kind, raw.stages)
    }
}

impl From<ResidualScheme> for RawScheme {
    fn from(s: ResidualScheme) -> Self {
        RawScheme {
            kind: s.kind,
            stages: s.stages,
        }
    }
}

impl ResidualScheme {
    pub fn new(kind: SchemeKind, stages: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::config("stage count M must be at least 1"));
        }
        if !kind.is_recursive() && stages != 1 {
            return Err(Error::config(format!("{kind} is single-step and requires M = 1, got {stages}")));
        }
        Ok(ResidualScheme { kind, stages })
    }

    pub fn single(kind: SchemeKind) -> Result<Self> {
        ResidualScheme::new(kind, 1)
    }

    pub fn recursive_euler(stages: usize) -> Result<Self> {
        ResidualScheme::new(SchemeKind::RecursiveEuler, stages)
    }

    pub fn recursive_rk4(stages: usize) -> Result<Self> {
        ResidualScheme::new(SchemeKind::RecursiveRk4, stages)
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn stages(&self) -> usize {
        self.stages
    }
}

impl fmt::Display for ResidualScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(M={})", self.kind, self.stages)
    }
}

/// Two snapshots `(Φ1, t1)` and `(Φ2, t2)` of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPair {
    pub phi1: Vec<f64>,
    pub t1: f64,
    pub phi2: Vec<f64>,
    pub t2: f64,
}

impl DataPair {
    pub fn new(phi1: Vec<f64>, t1: f64, phi2: Vec<f64>, t2: f64) -> Result<Self> {
        let pair = DataPair { phi1, t1, phi2, t2 };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi1.len() != self.phi2.len() || self.phi1.is_empty() {
            return Err(Error::contract(format!(
                "pair states must share a positive dimension, got {} and {}",
                self.phi1.len(),
                self.phi2.len()
            )));
        }
        if !(self.t2 > self.t1) || !self.t1.is_finite() || !self.t2.is_finite() {
            return Err(Error::contract(format!("pair needs t2 > t1, got t1={} t2={}", self.t1, self.t2)));
        }
        if self.phi1.iter().chain(&self.phi2).any(|v| !v.is_finite()) {
            return Err(Error::contract("pair states must be finite"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.phi1.len()
    }

    pub fn lag(&self) -> f64 {
        self.t2 - self.t1
    }
}

/// Uniform nodes `τ_0 = t1 < ... < τ_M = t2`.
pub fn partition(t1: f64, t2: f64, stages: usize) -> Result<Vec<f64>> {
    if stages == 0 {
        return Err(Error::contract("partition needs M >= 1"));
    }
    if !(t2 > t1) {
        return Err(Error::contract(format!("partition needs t2 > t1, got [{t1}, {t2}]")));
    }
    let m = stages as f64;
    let mut nodes: Vec<f64> = (0..stages).map(|s| t1 + (t2 - t1) * (s as f64 / m)).collect();
    nodes.push(t2);
    Ok(nodes)
}

fn axpy(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| xi + a * yi).collect()
}

fn checked(v: Vec<f64>, segment: usize) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::Divergence { segment, pair: None })
    }
}

/// Integrates `field` from `(phi1, t1)` to `t2` with a recursive scheme.
pub fn rollout<F: VectorField + ?Sized>(
    scheme: &ResidualScheme,
    field: &F,
    phi1: &[f64],
    t1: f64,
    t2: f64,
) -> Result<Vec<f64>> {
    if !scheme.kind.is_recursive() {
        return Err(Error::contract(format!("rollout needs a recursive scheme, got {}", scheme.kind)));
    }
    let tau = partition(t1, t2, scheme.stages)?;
    let h = (t2 - t1) / scheme.stages as f64;
    let mut state = phi1.to_vec();
    for s in 0..scheme.stages {
        let eval = |x: &[f64], t: f64| field.eval(x, t).and_then(|k| checked(k, s));
        state = match scheme.kind {
            SchemeKind::RecursiveEuler => {
                let k1 = eval(&state, tau[s])?;
                axpy(&state, h, &k1)
            }
            SchemeKind::RecursiveRk4 => {
                let half = tau[s] + 0.5 * h;
                let k1 = eval(&state, tau[s])?;
                let k2 = eval(&axpy(&state, 0.5 * h, &k1), half)?;
                let k3 = eval(&axpy(&state, 0.5 * h, &k2), half)?;
                let k4 = eval(&axpy(&state, h, &k3), tau[s + 1])?;
                state
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + (1.0 / 6.0) * h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                    .collect()
            }
            _ => unreachable!(),
        };
        state = checked(state, s)?;
    }
    Ok(state)
}

/// Residual of one pair under `scheme`.
pub fn residual<F: VectorField + ?Sized>(scheme: &ResidualScheme, pair: &DataPair, field: &F) -> Result<Vec<f64>> {
    pair.validate()?;
    if field.dim() != pair.dim() {
        return Err(Error::contract(format!(
            "field dimension {} does not match pair dimension {}",
            field.dim(),
            pair.dim()
        )));
    }
    let h = pair.lag();
    let diff: Vec<f64> = pair.phi2.iter().zip(&pair.phi1).map(|(b, a)| b - a).collect();
    let r = match scheme.kind {
        SchemeKind::EulerForward => axpy(&diff, -h, &field.eval(&pair.phi1, pair.t1)?),
        SchemeKind::EulerBackward => axpy(&diff, -h, &field.eval(&pair.phi2, pair.t2)?),
        SchemeKind::Trapezoid => {
            let f1 = field.eval(&pair.phi1, pair.t1)?;
            let f2 = field.eval(&pair.phi2, pair.t2)?;
            let avg: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a + b).collect();
            axpy(&diff, -0.5 * h, &avg)
        }
        SchemeKind::RecursiveEuler | SchemeKind::RecursiveRk4 => {
            let end = rollout(scheme, field, &pair.phi1, pair.t1, pair.t2)?;
            pair.phi2.iter().zip(&end).map(|(b, a)| b - a).collect()
        }
    };
    checked(r, scheme.stages.saturating_sub(1))
}

/// Packs one state vector per pair into a `dim x batch` column matrix.
pub(crate) fn columns<'a>(states: impl ExactSizeIterator<Item = &'a [f64]>, dim: usize) -> Result<Tensor> {
    let batch = states.len();
    let mut data = vec![0.0; dim * batch];
    for (j, s) in states.enumerate() {
        if s.len() != dim {
            return Err(Error::contract(format!("state {j} has dimension {}, expected {dim}", s.len())));
        }
        for (i, &v) in s.iter().enumerate() {
            data[i * batch + j] = v;
        }
    }
    Tensor::new(dim, batch, data)
}

/// Column-wise step widths, scaled by a constant.
struct StepScale {
    uniform: Option<f64>,
    per_column: Vec<f64>,
    dim: usize,
}

impl StepScale {
    fn new(widths: Vec<f64>, dim: usize) -> Self {
        let first = widths[0];
        let uniform = widths.iter().all(|&w| w == first).then_some(first);
        StepScale {
            uniform,
            per_column: widths,
            dim,
        }
    }

    /// Records `factor * h_j * x[:, j]`.
    fn apply(&self, tape: &mut Tape, x: NodeId, factor: f64) -> Result<NodeId> {
        match self.uniform {
            Some(h) => tape.scale(x, factor * h),
            None => {
                let batch = self.per_column.len();
                let mut data = Vec::with_capacity(self.dim * batch);
                for _ in 0..self.dim {
                    data.extend(self.per_column.iter().map(|h| factor * h));
                }
                let hs = tape.constant(Tensor::new(self.dim, batch, data)?);
                tape.hadamard(hs, x)
            }
        }
    }
}

fn in_segment<T>(segment: usize, batch: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { index, .. } => Error::Divergence {
            segment,
            pair: Some(index % batch),
        },
        other => other,
    })
}

/// Records the residuals of every pair as one `dim x batch` node.
pub fn residual_batch<F: TapeField + ?Sized>(
    tape: &mut Tape,
    scheme: &ResidualScheme,
    field: &F,
    pairs: &[DataPair],
) -> Result<NodeId> {
    let Some(first) = pairs.first() else {
        return Err(Error::contract("residual batch needs at least one pair"));
    };
    let dim = first.dim();
    if field.dim() != dim {
        return Err(Error::contract(format!(
            "field dimension {} does not match pair dimension {dim}",
            field.dim()
        )));
    }
    for p in pairs {
        p.validate()?;
    }
    let batch = pairs.len();
    let phi1 = tape.constant(columns(pairs.iter().map(|p| p.phi1.as_slice()), dim)?);
    let phi2 = tape.constant(columns(pairs.iter().map(|p| p.phi2.as_slice()), dim)?);
    let t1: Vec<f64> = pairs.iter().map(|p| p.t1).collect();
    let t2: Vec<f64> = pairs.iter().map(|p| p.t2).collect();
    let diff = tape.sub(phi2, phi1)?;

    let stages = scheme.stages;
    let lags = StepScale::new(pairs.iter().map(DataPair::lag).collect(), dim);
    match scheme.kind {
        SchemeKind::EulerForward | SchemeKind::EulerBackward | SchemeKind::Trapezoid => in_segment(0, batch, {
            let increment = match scheme.kind {
                SchemeKind::EulerForward => {
                    let f = field.eval(tape, phi1, &t1)?;
                    lags.apply(tape, f, 1.0)
                }
                SchemeKind::EulerBackward => {
                    let f = field.eval(tape, phi2, &t2)?;
                    lags.apply(tape, f, 1.0)
                }
                _ => {
                    let f1 = field.eval(tape, phi1, &t1)?;
                    let f2 = field.eval(tape, phi2, &t2)?;
                    let sum = tape.add(f1, f2)?;
                    lags.apply(tape, sum, 0.5)
                }
            };
            increment.and_then(|inc| tape.sub(diff, inc))
        }),
        SchemeKind::RecursiveEuler | SchemeKind::RecursiveRk4 => {
            let nodes: Vec<Vec<f64>> = pairs
                .iter()
                .map(|p| partition(p.t1, p.t2, stages))
                .collect::<Result<_>>()?;
            let steps = StepScale::new(pairs.iter().map(|p| p.lag() / stages as f64).collect(), dim);
            let mut state = phi1;
            for s in 0..stages {
                let tau: Vec<f64> = nodes.iter().map(|n| n[s]).collect();
                state = in_segment(s, batch, {
                    let mut step = || -> Result<NodeId> {
                        if scheme.kind == SchemeKind::RecursiveEuler {
                            let k1 = field.eval(tape, state, &tau)?;
                            let inc = steps.apply(tape, k1, 1.0)?;
                            return tape.add(state, inc);
                        }
                        let half: Vec<f64> = pairs
                            .iter()
                            .zip(&tau)
                            .map(|(p, t)| t + 0.5 * (p.lag() / stages as f64))
                            .collect();
                        let next: Vec<f64> = nodes.iter().map(|n| n[s + 1]).collect();
                        let k1 = field.eval(tape, state, &tau)?;
                        let d1 = steps.apply(tape, k1, 0.5)?;
                        let x2 = tape.add(state, d1)?;
                        let k2 = field.eval(tape, x2, &half)?;
                        let d2 = steps.apply(tape, k2, 0.5)?;
                        let x3 = tape.add(state, d2)?;
                        let k3 = field.eval(tape, x3, &half)?;
                        let d3 = steps.apply(tape, k3, 1.0)?;
                        let x4 = tape.add(state, d3)?;
                        let k4 = field.eval(tape, x4, &next)?;
                        // ((k1 + 2 k2) + 2 k3) + k4, same association as the plain path
                        let k2x = tape.scale(k2, 2.0)?;
                        let k3x = tape.scale(k3, 2.0)?;
                        let ksum = tape.add(k1, k2x)?;
                        let ksum = tape.add(ksum, k3x)?;
                        let ksum = tape.add(ksum, k4)?;
                        let inc = steps.apply(tape, ksum, 1.0 / 6.0)?;
                        tape.add(state, inc)
                    };
                    step()
                })?;
            }
            tape.sub(phi2, state)
        }
    }
}
