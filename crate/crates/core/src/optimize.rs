//! Training: full-batch Adam followed by an L-BFGS fine-tune of the
//! summed squared residual norms.

use std::fmt;
use crate::clock::Stopwatch;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::residual::{residual_batch, DataPair, ResidualScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batch {
    Full,
    /// Contiguous chunks of this many pairs, cycled in order.
    Size(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam_steps: usize,
    pub adam_lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub lbfgs_max_iters: usize,
    pub lbfgs_memory: usize,
    pub lbfgs_grad_tol: f64,
    pub seed: u64,
    pub batch: Batch,
    /// History is recorded every this many steps (and at phase ends).
    pub history_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam_steps: 10_000,
            adam_lr: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            lbfgs_max_iters: 5_000,
            lbfgs_memory: 10,
            lbfgs_grad_tol: 1e-9,
            seed: 0,
            batch: Batch::Full,
            history_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.adam_betas;
        let checks = [
            (self.adam_lr > 0.0 && self.adam_lr.is_finite(), "adam_lr must be > 0"),
            (b1 > 0.0 && b1 < 1.0, "adam beta1 must lie in (0, 1)"),
            (b2 > 0.0 && b2 < 1.0, "adam beta2 must lie in (0, 1)"),
            (self.adam_eps > 0.0, "adam_eps must be > 0"),
            (self.lbfgs_memory >= 1, "lbfgs_memory must be >= 1"),
            (self.lbfgs_grad_tol > 0.0, "lbfgs_grad_tol must be > 0"),
            (self.history_every >= 1, "history_every must be >= 1"),
            (self.batch != Batch::Size(0), "batch size must be >= 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.adam_lr,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
        }
    }

    pub fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iters: self.lbfgs_max_iters,
            memory: self.lbfgs_memory,
            grad_tol: self.lbfgs_grad_tol,
            ..LbfgsConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Adam,
    Lbfgs,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Adam => "adam",
            Phase::Lbfgs => "lbfgs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub grad_norm: f64,
    /// Wall time since training started.
    pub seconds: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_data(params: &NetworkParams, pairs: &[DataPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::contract("loss needs at least one data pair"));
    }
    let d = params.state_dim();
    if let Some((j, p)) = pairs.iter().enumerate().find(|(_, p)| p.dim() != d) {
        return Err(Error::contract(format!(
            "pair {j} has dimension {}, network state dimension is {d}",
            p.dim()
        )));
    }
    Ok(())
}

/// Sum over pairs of the squared residual norm, with its gradient in the
/// flat parameter layout of [`NetworkParams::flatten`].
pub fn loss_and_gradient(
    params: &NetworkParams,
    scheme: &ResidualScheme,
    pairs: &[DataPair],
) -> Result<(f64, Vec<f64>)> {
    check_data(params, pairs)?;
    let mut tape = Tape::new();
    let net = params.register(&mut tape);
    let r = residual_batch(&mut tape, scheme, &net, pairs)?;
    let sq = tape.square(r)?;
    let total = tape.sum(sq)?;
    let value = tape.value(total).data()[0];
    let grads = tape.backward(total)?;
    Ok((value, net.flat_gradient(&grads)))
}

pub fn loss(params: &NetworkParams, scheme: &ResidualScheme, pairs: &[DataPair]) -> Result<f64> {
    check_data(params, pairs)?;
    let mut tape = Tape::new();
    let net = params.register(&mut tape);
    let r = residual_batch(&mut tape, scheme, &net, pairs)?;
    let sq = tape.square(r)?;
    let total = tape.sum(sq)?;
    Ok(tape.value(total).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(theta: &[f64], grad: &[f64], state: &AdamState, cfg: &AdamConfig) -> Result<(Vec<f64>, AdamState)> {
    let n = theta.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Dimension {
            op: "adam_step",
            lhs: (n, 1),
            rhs: (grad.len(), 1),
        });
    }
    let step = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let mut next = AdamState {
        m: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        step,
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let g = grad[i];
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        out.push(theta[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
        next.m.push(m);
        next.v.push(v);
    }
    Ok((out, next))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub memory: usize,
    pub grad_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor per backtrack.
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iters: 5_000,
            memory: 10,
            grad_tol: 1e-9,
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbfgsStop {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsIterate {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub grad_norm: f64,
    pub stop: LbfgsStop,
    /// Number of trial points rejected because the objective failed or was not finite.
    pub non_finite_trials: usize,
    pub history: Vec<LbfgsIterate>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-loop recursion: returns `-H g` for the stored curvature pairs.
fn two_loop(grad: &[f64], pairs: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|qi| *qi *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|qi| *qi = -*qi);
    q
}

/// Limited-memory BFGS with a backtracking (Armijo) line search.
///
/// Failed or non-finite objective evaluations during the line search are
/// treated as insufficient decrease, so the returned point is always the
/// best iterate accepted so far.
pub fn lbfgs_minimize<F>(mut f: F, theta0: &[f64], cfg: &LbfgsConfig) -> Result<(Vec<f64>, LbfgsReport)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if cfg.memory == 0 || !(cfg.grad_tol > 0.0) || !(cfg.shrink > 0.0 && cfg.shrink < 1.0) {
        return Err(Error::config("invalid L-BFGS configuration"));
    }
    let start = Stopwatch::start();
    let (mut fx, mut g) = f(theta0)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eval("objective is not finite at the starting point".into()));
    }
    if g.len() != theta0.len() {
        return Err(Error::contract("gradient length differs from parameter length"));
    }
    let mut x = theta0.to_vec();
    let mut report = LbfgsReport {
        iterations: 0,
        evaluations: 1,
        initial_loss: fx,
        final_loss: fx,
        grad_norm: norm(&g),
        stop: LbfgsStop::MaxIterations,
        non_finite_trials: 0,
        history: vec![LbfgsIterate {
            iteration: 0,
            loss: fx,
            grad_norm: norm(&g),
            seconds: 0.0,
        }],
    };
    let mut memory: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(cfg.memory);

    loop {
        if report.grad_norm <= cfg.grad_tol {
            report.stop = LbfgsStop::GradientTolerance;
            break;
        }
        if report.iterations >= cfg.max_iters {
            report.stop = LbfgsStop::MaxIterations;
            break;
        }

        let mut dir = two_loop(&g, &memory);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            memory.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if memory.is_empty() {
            1.0 / norm(&dir).max(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            report.evaluations += 1;
            match f(&trial) {
                Ok((ft, gt)) if ft.is_finite() && gt.iter().all(|v| v.is_finite()) => {
                    if ft <= fx + cfg.c1 * step * slope {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                _ => report.non_finite_trials += 1,
            }
            step *= cfg.shrink;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            report.stop = LbfgsStop::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if memory.len() == cfg.memory {
                memory.remove(0);
            }
            memory.push((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        report.iterations += 1;
        report.grad_norm = norm(&g);
        report.final_loss = fx;
        report.history.push(LbfgsIterate {
            iteration: report.iterations,
            loss: fx,
            grad_norm: report.grad_norm,
            seconds: start.seconds(),
        });
    }
    Ok((x, report))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Training stopped early; the returned parameters are the best seen.
    Diverged {
        phase: Phase,
        step: usize,
        message: String,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<LossReport>,
    pub initial_loss: f64,
    /// Loss after the Adam phase (best iterate).
    pub adam_loss: f64,
    pub final_loss: f64,
    pub lbfgs: Option<LbfgsReport>,
    pub status: TrainStatus,
}

/// Runs the Adam phase, then L-BFGS from the best Adam iterate.
pub fn train(
    scheme: &ResidualScheme,
    pairs: &[DataPair],
    widths: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let init = NetworkParams::init(widths, cfg.seed)?;
    check_data(&init, pairs)?;
    let start = Stopwatch::start();
    let full = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let p = NetworkParams::unflatten(theta, widths)?;
        loss_and_gradient(&p, scheme, pairs)
    };

    let mut theta = init.flatten();
    let (initial_loss, g0) = full(&theta)?;
    let mut history = vec![LossReport {
        step: 0,
        phase: Phase::Adam,
        loss: initial_loss,
        grad_norm: norm(&g0),
        seconds: start.seconds(),
    }];
    let mut best = (initial_loss, theta.clone());
    let mut status = TrainStatus::Completed;

    let adam = cfg.adam();
    let mut state = AdamState::new(theta.len());
    let mut grad = g0;
    let chunk = match cfg.batch {
        Batch::Full => pairs.len(),
        Batch::Size(k) => k.min(pairs.len()),
    };
    let chunks = pairs.len().div_ceil(chunk);
    for step in 0..cfg.adam_steps {
        if step > 0 {
            let offset = (step % chunks) * chunk;
            let batch = &pairs[offset..(offset + chunk).min(pairs.len())];
            let p = NetworkParams::unflatten(&theta, widths)?;
            match loss_and_gradient(&p, scheme, batch) {
                Ok((l, g)) => {
                    if chunk == pairs.len() && l < best.0 {
                        best = (l, theta.clone());
                    }
                    if (step % cfg.history_every) == 0 {
                        history.push(LossReport {
                            step,
                            phase: Phase::Adam,
                            loss: l,
                            grad_norm: norm(&g),
                            seconds: start.seconds(),
                        });
                    }
                    grad = g;
                }
                Err(e) => {
                    status = TrainStatus::Diverged {
                        phase: Phase::Adam,
                        step,
                        message: shift_pair_index(e, offset).to_string(),
                    };
                    break;
                }
            }
            if chunk < pairs.len() && step % cfg.history_every == 0 {
                if let Ok(l) = loss(&p, scheme, pairs) {
                    if l < best.0 {
                        best = (l, theta.clone());
                    }
                }
            }
        }
        let (next, next_state) = adam_step(&theta, &grad, &state, &adam)?;
        theta = next;
        state = next_state;
    }
    if status == TrainStatus::Completed && cfg.adam_steps > 0 {
        match full(&theta) {
            Ok((l, g)) => {
                if l < best.0 {
                    best = (l, theta.clone());
                }
                history.push(LossReport {
                    step: cfg.adam_steps,
                    phase: Phase::Adam,
                    loss: l,
                    grad_norm: norm(&g),
                    seconds: start.seconds(),
                });
            }
            Err(e) => {
                status = TrainStatus::Diverged {
                    phase: Phase::Adam,
                    step: cfg.adam_steps,
                    message: e.to_string(),
                }
            }
        }
    }
    let adam_loss = best.0;

    let mut lbfgs_report = None;
    if status == TrainStatus::Completed && cfg.lbfgs_max_iters > 0 {
        let offset = start.seconds();
        let (theta_star, report) = lbfgs_minimize(full, &best.1, &cfg.lbfgs())?;
        for it in report.history.iter().skip(1) {
            if it.iteration % cfg.history_every == 0 || it.iteration == report.iterations {
                history.push(LossReport {
                    step: it.iteration,
                    phase: Phase::Lbfgs,
                    loss: it.loss,
                    grad_norm: it.grad_norm,
                    seconds: offset + it.seconds,
                });
            }
        }
        if report.final_loss <= best.0 {
            best = (report.final_loss, theta_star);
        }
        lbfgs_report = Some(report);
    }

    Ok(TrainOutcome {
        params: NetworkParams::unflatten(&best.1, widths)?,
        history,
        initial_loss,
        adam_loss,
        final_loss: best.0,
        lbfgs: lbfgs_report,
        status,
    })
}

fn shift_pair_index(e: Error, offset: usize) -> Error {
    match e {
        Error::Divergence { segment, pair } => Error::Divergence {
            segment,
            pair: pair.map(|p| p + offset),
        },
        other => other,
    }
}
