//! Feed-forward tanh network approximating the right-hand side `F(Φ, t)`.
//!
//! Hidden layers apply `tanh(W a + b)`; the output layer is affine so the
//! learned field is not bounded by the activation range. An autonomous
//! network reads the state only (`n_1 = d`), a non-autonomous one reads the
//! state with time appended (`n_1 = d + 1`). The output width is always `d`.
//!
//! Flat parameter layout: for each layer in order, the weight matrix in
//! row-major order followed by its bias vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Gradients, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::field::{TapeField, VectorField};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    widths: Vec<usize>,
    /// `weights[k]` is `widths[k+1] x widths[k]`, row-major.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::config(format!(
            "network needs at least an input and an output width, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::config(format!("network widths must be positive, got {widths:?}")));
    }
    let (n_in, n_out) = (widths[0], widths[widths.len() - 1]);
    if n_in != n_out && n_in != n_out + 1 {
        return Err(Error::config(format!(
            "input width must equal the output width (autonomous) or exceed it by one (time input), got {widths:?}"
        )));
    }
    Ok(())
}

/// Number of trainable values for the given widths.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl NetworkParams {
    /// Glorot-uniform weights with limit `sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        validate_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Ok(NetworkParams {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a network from explicit layer matrices (row-major) and biases.
    pub fn from_layers(widths: &[usize], weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        validate_widths(widths)?;
        let layers = widths.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::contract(format!("expected {layers} layers of weights and biases")));
        }
        for (k, w) in widths.windows(2).enumerate() {
            if weights[k].len() != w[0] * w[1] || biases[k].len() != w[1] {
                return Err(Error::contract(format!("layer {k} does not match widths {widths:?}")));
            }
        }
        if weights.iter().chain(&biases).flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("network parameters must be finite"));
        }
        Ok(NetworkParams {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn autonomous(&self) -> bool {
        self.widths[0] == self.state_dim()
    }

    pub fn state_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.widths)
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat
    }

    pub fn unflatten(flat: &[f64], widths: &[usize]) -> Result<Self> {
        validate_widths(widths)?;
        let expected = param_count(widths);
        if flat.len() != expected {
            return Err(Error::contract(format!(
                "flat parameter vector has length {}, widths {widths:?} need {expected}",
                flat.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut rest = flat;
        for w in widths.windows(2) {
            let (wm, tail) = rest.split_at(w[0] * w[1]);
            let (b, tail) = tail.split_at(w[1]);
            weights.push(wm.to_vec());
            biases.push(b.to_vec());
            rest = tail;
        }
        NetworkParams::from_layers(widths, weights, biases)
    }

    /// Evaluates the network at a single state and time.
    pub fn forward(&self, state: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = self.state_dim();
        if state.len() != d {
            return Err(Error::contract(format!(
                "network expects a state of dimension {d}, got {}",
                state.len()
            )));
        }
        let mut a = state.to_vec();
        if !self.autonomous() {
            a.push(t);
        }
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let n_in = a.len();
            let mut z = b.clone();
            for (i, zi) in z.iter_mut().enumerate() {
                let row = &w[i * n_in..(i + 1) * n_in];
                *zi += row.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>();
            }
            if k < last {
                z.iter_mut().for_each(|v| *v = autodiff::tanh(*v));
            }
            a = z;
        }
        Ok(a)
    }

    /// Records the parameters as tape leaves.
    pub fn register(&self, tape: &mut Tape) -> TapeNetwork {
        let layers = self
            .widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let weight = Tensor::new(w[1], w[0], self.weights[k].clone()).expect("validated");
                let bias = Tensor::new(w[1], 1, self.biases[k].clone()).expect("validated");
                (tape.param(weight), tape.param(bias))
            })
            .collect();
        TapeNetwork {
            layers,
            state_dim: self.state_dim(),
            autonomous: self.autonomous(),
        }
    }
}

impl VectorField for NetworkParams {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn eval(&self, state: &[f64], t: f64) -> Result<Vec<f64>> {
        self.forward(state, t)
    }
}

/// Network parameters living on a tape, evaluated on column batches.
#[derive(Debug, Clone)]
pub struct TapeNetwork {
    layers: Vec<(NodeId, NodeId)>,
    state_dim: usize,
    autonomous: bool,
}

impl TapeNetwork {
    /// Flattens per-leaf gradients in the same order as [`NetworkParams::flatten`].
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        let mut flat = Vec::new();
        for (w, b) in &self.layers {
            flat.extend_from_slice(grads[w].data());
            flat.extend_from_slice(grads[b].data());
        }
        flat
    }
}

impl TapeField for TapeNetwork {
    fn dim(&self) -> usize {
        self.state_dim
    }

    fn eval(&self, tape: &mut Tape, states: NodeId, times: &[f64]) -> Result<NodeId> {
        let (d, batch) = tape.shape(states);
        if d != self.state_dim || times.len() != batch {
            return Err(Error::Dimension {
                op: "network",
                lhs: (self.state_dim, times.len()),
                rhs: (d, batch),
            });
        }
        // The first layer folds its bias into the product: [W b] [x; 1].
        // Building both factors costs O(width) and O(d batch), whereas
        // broadcasting the bias separately costs two extra width x batch
        // intermediates per evaluation.
        let ones = tape.constant(Tensor::filled(1, batch, 1.0));
        let n_in = if self.autonomous { d } else { d + 1 };
        let unit = |rows: usize, cols: usize, at: &[(usize, usize)]| {
            let mut t = Tensor::zeros(rows, cols).into_data();
            at.iter().for_each(|&(i, j)| t[i * cols + j] = 1.0);
            Tensor::new(rows, cols, t)
        };
        let diag: Vec<(usize, usize)> = (0..d).map(|i| (i, i)).collect();
        let lift = tape.constant(unit(n_in + 1, d, &diag)?);
        let e_one = tape.constant(unit(n_in + 1, 1, &[(n_in, 0)])?);
        let mut x = tape.matmul(lift, states)?;
        let one_row = tape.matmul(e_one, ones)?;
        x = tape.add(x, one_row)?;
        if !self.autonomous {
            let e_time = tape.constant(unit(n_in + 1, 1, &[(d, 0)])?);
            let t_row = tape.constant(Tensor::new(1, batch, times.to_vec())?);
            let time_rows = tape.matmul(e_time, t_row)?;
            x = tape.add(x, time_rows)?;
        }
        let w_cols: Vec<(usize, usize)> = (0..n_in).map(|i| (i, i)).collect();
        let w_embed = tape.constant(unit(n_in, n_in + 1, &w_cols)?);
        let b_embed = tape.constant(unit(1, n_in + 1, &[(0, n_in)])?);

        let last = self.layers.len() - 1;
        let mut a = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let z = if k == 0 {
                let w_part = tape.matmul(w, w_embed)?;
                let b_part = tape.matmul(b, b_embed)?;
                let wb = tape.add(w_part, b_part)?;
                tape.matmul(wb, a)?
            } else {
                let wa = tape.matmul(w, a)?;
                let bias = tape.matmul(b, ones)?;
                tape.add(wa, bias)?
            };
            a = if k < last { tape.tanh(z)? } else { z };
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_count() {
        let p = NetworkParams::init(&[2, 128, 2], 3).unwrap();
        assert_eq!(p.param_count(), 642);
        assert_eq!(p.flatten().len(), 642);
    }

    #[test]
    fn init_is_seeded() {
        let a = NetworkParams::init(&[2, 128, 2], 11).unwrap();
        let b = NetworkParams::init(&[2, 128, 2], 11).unwrap();
        let c = NetworkParams::init(&[2, 128, 2], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn glorot_limit_holds() {
        let p = NetworkParams::init(&[2, 128, 2], 5).unwrap();
        let limit = (6.0f64 / 130.0).sqrt();
        assert!(p.weights(0).iter().all(|w| w.abs() <= limit));
        assert!(p.weights(1).iter().all(|w| w.abs() <= limit));
        assert!(p.biases(0).iter().all(|&b| b == 0.0));
    }

    #[test]
    fn invalid_widths() {
        assert!(matches!(NetworkParams::init(&[], 0), Err(Error::Config(_))));
        assert!(matches!(NetworkParams::init(&[2], 0), Err(Error::Config(_))));
        assert!(matches!(NetworkParams::init(&[2, 0, 2], 0), Err(Error::Config(_))));
        assert!(matches!(NetworkParams::init(&[4, 8, 2], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let widths = [3, 16, 3];
        let p = NetworkParams::unflatten(&vec![0.0; param_count(&widths)], &widths).unwrap();
        assert_eq!(p.forward(&[1.0, -2.0, 0.5], 0.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn odd_symmetry_cancels() {
        let p = NetworkParams::from_layers(
            &[1, 2, 1],
            vec![vec![1.0, -1.0], vec![1.0, 1.0]],
            vec![vec![0.0, 0.0], vec![0.0]],
        )
        .unwrap();
        assert_eq!(p.forward(&[0.5], 0.0).unwrap(), vec![0.0]);
    }

    #[test]
    fn hand_evaluated_composition() {
        let p = NetworkParams::from_layers(
            &[1, 1, 1],
            vec![vec![2.0], vec![3.0]],
            vec![vec![0.0], vec![0.5]],
        )
        .unwrap();
        let y = p.forward(&[0.25], 0.0).unwrap()[0];
        // 3 tanh(0.5) + 0.5
        assert!((y - 1.886_351_471_780_029).abs() < 1e-14);
    }

    #[test]
    fn output_is_unbounded() {
        let p = NetworkParams::from_layers(
            &[1, 1, 1],
            vec![vec![1.0], vec![10.0]],
            vec![vec![0.0], vec![5.0]],
        )
        .unwrap();
        assert!(p.forward(&[2.0], 0.0).unwrap()[0].abs() > 1.0);
    }

    #[test]
    fn unflatten_wrong_length() {
        assert!(matches!(NetworkParams::unflatten(&[0.0; 769], &[2, 128, 2]), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_dimension_mismatch() {
        let p = NetworkParams::init(&[2, 4, 2], 0).unwrap();
        assert!(p.forward(&[1.0], 0.0).is_err());
    }

    #[test]
    fn time_input_changes_output() {
        let p = NetworkParams::init(&[2, 8, 1], 9).unwrap();
        assert!(!p.autonomous());
        let a = p.forward(&[0.3], 0.0).unwrap();
        let b = p.forward(&[0.3], 1.0).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn tape_forward_matches_plain() {
        for widths in [vec![2usize, 16, 2], vec![3, 8, 8, 2]] {
            let p = NetworkParams::init(&widths, 21).unwrap();
            let d = p.state_dim();
            let cols = [[0.1, -0.7], [1.5, 0.25], [-2.0, 2.0]];
            let times = [0.0, 0.4, 1.3];
            let mut data = vec![0.0; d * 3];
            for (j, c) in cols.iter().enumerate() {
                for i in 0..d {
                    data[i * 3 + j] = c[i];
                }
            }
            let mut tape = Tape::new();
            let net = p.register(&mut tape);
            let x = tape.constant(Tensor::new(d, 3, data).unwrap());
            let y = net.eval(&mut tape, x, &times).unwrap();
            for (j, c) in cols.iter().enumerate() {
                let plain = p.forward(&c[..d], times[j]).unwrap();
                for (i, v) in plain.iter().enumerate() {
                    assert!((tape.value(y).get(i, j) - v).abs() < 1e-14);
                }
            }
        }
    }
}
