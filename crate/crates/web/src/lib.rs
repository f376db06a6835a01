//! Browser bindings for the demo page in `www/`.
//!
//! Arrays cross the boundary flattened row-major; every function documents
//! its layout. Errors surface as JS exceptions carrying the message. The
//! work is done by plain functions returning `rdnn::Result`, which the
//! native tests call directly (JsError cannot be built off wasm).

use wasm_bindgen::prelude::*;

use rdnn::evaluate::{rollout, substeps_for, true_trajectory, ROLLOUT_MAX_STEP};
use rdnn::network::NetworkParams;
use rdnn::optimize::{adam_step, loss_and_gradient, AdamConfig, AdamState};
use rdnn::residual::{residual, DataPair, ResidualScheme, SchemeKind};
use rdnn::systems::{default_substeps, generate_pairs, TrueSystem};

fn js(e: rdnn::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Hopf trajectory from `(x, y) = (2, 0)` for a given `mu`.
///
/// Layout: `[t, x, y]` per grid point.
#[wasm_bindgen]
pub fn hopf_trajectory(mu: f64, horizon: f64, step: f64) -> Result<Vec<f64>, JsError> {
    hopf_series(mu, horizon, step).map_err(js)
}

fn hopf_series(mu: f64, horizon: f64, step: f64) -> rdnn::Result<Vec<f64>> {
    let r = true_trajectory(TrueSystem::HopfAugmented, &[mu, 2.0, 0.0], horizon, step)?;
    Ok(r.times
        .iter()
        .zip(&r.states)
        .flat_map(|(t, s)| [*t, s[1], s[2]])
        .collect())
}

/// Mean squared residual of the true right-hand side on generated pairs,
/// for `M = 1..=max_stages`: the floor a perfectly learned field cannot go
/// below, which is what limits small `M` at large lags.
///
/// Layout: `[M, euler, rk4]` per stage count.
#[wasm_bindgen]
pub fn residual_floor(system: &str, dt: f64, max_stages: usize, n_pairs: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    floor_series(system, dt, max_stages, n_pairs, seed).map_err(js)
}

fn floor_series(system: &str, dt: f64, max_stages: usize, n_pairs: usize, seed: u64) -> rdnn::Result<Vec<f64>> {
    let system: TrueSystem = system.parse()?;
    let data = generate_pairs(system, &system.default_domain(), n_pairs, dt, seed, default_substeps(dt))?;
    let mean_sq = |scheme: ResidualScheme| -> f64 {
        let mut total = 0.0;
        let mut counted = 0usize;
        for pair in &data.pairs {
            // coarse unrolls of the stiff glycolytic field can overflow
            if let Ok(r) = residual(&scheme, pair, &system) {
                total += r.iter().map(|v| v * v).sum::<f64>();
                counted += 1;
            }
        }
        if counted == 0 {
            f64::NAN
        } else {
            total / counted as f64
        }
    };
    let mut out = Vec::with_capacity(3 * max_stages);
    for m in 1..=max_stages {
        out.push(m as f64);
        out.push(mean_sq(ResidualScheme::new(SchemeKind::RecursiveEuler, m)?));
        out.push(mean_sq(ResidualScheme::new(SchemeKind::RecursiveRk4, m)?));
    }
    Ok(out)
}

/// Small full-batch Adam run on cubic-oscillator pairs, stepped from JS so
/// the page stays responsive.
#[wasm_bindgen]
pub struct Trainer {
    scheme: ResidualScheme,
    pairs: Vec<DataPair>,
    widths: Vec<usize>,
    theta: Vec<f64>,
    adam: AdamState,
    cfg: AdamConfig,
    steps: usize,
    loss: f64,
}

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(dt: f64, stages: usize, n_pairs: usize, hidden: usize, lr: f64, seed: u64) -> Result<Trainer, JsError> {
        Trainer::build(dt, stages, n_pairs, hidden, lr, seed).map_err(js)
    }

    /// Runs `n` Adam steps and returns the last loss seen.
    pub fn step(&mut self, n: usize) -> Result<f64, JsError> {
        self.advance(n).map_err(js)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Learned and true trajectories from `(2, 0)`.
    ///
    /// Layout: `[t, x_true, y_true, x_pred, y_pred]` per grid point; the
    /// series stops early if the learned field blows up.
    pub fn predict(&self, horizon: f64, step: f64) -> Result<Vec<f64>, JsError> {
        self.prediction(horizon, step).map_err(js)
    }
}

impl Trainer {
    fn build(dt: f64, stages: usize, n_pairs: usize, hidden: usize, lr: f64, seed: u64) -> rdnn::Result<Trainer> {
        let system = TrueSystem::CubicOscillator;
        let scheme = ResidualScheme::recursive_rk4(stages)?;
        let data = generate_pairs(system, &system.default_domain(), n_pairs, dt, seed, default_substeps(dt))?;
        let widths = vec![2, hidden, 2];
        let theta = NetworkParams::init(&widths, seed)?.flatten();
        Ok(Trainer {
            scheme,
            pairs: data.pairs,
            adam: AdamState::new(theta.len()),
            widths,
            theta,
            cfg: AdamConfig { lr, ..AdamConfig::default() },
            steps: 0,
            loss: f64::NAN,
        })
    }

    fn advance(&mut self, n: usize) -> rdnn::Result<f64> {
        for _ in 0..n {
            let params = NetworkParams::unflatten(&self.theta, &self.widths)?;
            let (loss, grad) = loss_and_gradient(&params, &self.scheme, &self.pairs)?;
            let (theta, adam) = adam_step(&self.theta, &grad, &self.adam, &self.cfg)?;
            self.theta = theta;
            self.adam = adam;
            self.loss = loss;
            self.steps += 1;
        }
        Ok(self.loss)
    }

    fn prediction(&self, horizon: f64, step: f64) -> rdnn::Result<Vec<f64>> {
        let params = NetworkParams::unflatten(&self.theta, &self.widths)?;
        let ic = [2.0, 0.0];
        let truth = true_trajectory(TrueSystem::CubicOscillator, &ic, horizon, step)?;
        let pred = rollout(&params, &ic, horizon, step, substeps_for(step, ROLLOUT_MAX_STEP))?;
        Ok(pred
            .times
            .iter()
            .zip(&pred.states)
            .zip(&truth.states)
            .flat_map(|((t, p), q)| [*t, q[0], q[1], p[0], p[1]])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hopf_layout_and_decay() {
        let v = hopf_series(-0.2, 30.0, 0.1).unwrap();
        assert_eq!(v.len(), 3 * 301);
        let last = &v[v.len() - 3..];
        assert!((last[0] - 30.0).abs() < 1e-12);
        assert!(last[1].hypot(last[2]) < 0.05);
    }

    #[test]
    fn residual_floor_shrinks_with_stages() {
        // corner states of the cubic domain are stiff: explicit Euler only
        // settles once the sub-step is small, RK4 improves from the start
        let v = floor_series("cubic", 0.2, 24, 20, 1).unwrap();
        assert_eq!(v.len(), 3 * 24);
        for m in 1..24 {
            assert!(v[3 * m + 2] < v[3 * (m - 1) + 2]);
        }
        for m in 16..24 {
            assert!(v[3 * m + 1] < v[3 * (m - 1) + 1]);
        }
        assert!(v[3 * 23 + 1] < v[1]);
        assert!(floor_series("lorenz", 0.2, 4, 20, 1).is_err());
    }

    #[test]
    fn trainer_reduces_loss() {
        let mut t = Trainer::build(0.1, 2, 30, 16, 1e-2, 3).unwrap();
        let first = t.advance(1).unwrap();
        let later = t.advance(50).unwrap();
        assert_eq!(t.steps(), 51);
        assert!(later < first);
        let p = t.prediction(1.0, 0.1).unwrap();
        assert_eq!(p.len(), 5 * 11);
    }
}
