use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdnn::autodiff::{finite_diff_gradient, NodeId, Op, Tape, Tensor};
use rdnn::network::NetworkParams;
use rdnn::optimize::{loss, loss_and_gradient};
use rdnn::residual::{DataPair, ResidualScheme};

/// A random straight-line program over `n x n` leaves plus one 1x1 leaf.
#[derive(Debug, Clone)]
struct Program {
    n: usize,
    leaves: Vec<f64>,
    scalar: f64,
    steps: Vec<(u8, usize, usize, f64)>,
}

fn program() -> impl Strategy<Value = Program> {
    (1usize..=3, 1usize..=3).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec(-1.0f64..1.0, n * n * k),
            -1.0f64..1.0,
            prop::collection::vec((0u8..9, 0usize..64, 0usize..64, -2.0f64..2.0), 1..10),
        )
            .prop_map(move |(leaves, scalar, steps)| Program {
                n,
                leaves,
                scalar,
                steps,
            })
    })
}

/// Records the program with the given flat leaf values (matrices then the
/// scalar) and returns the scalar root plus the leaf ids.
fn record(p: &Program, flat: &[f64], tape: &mut Tape) -> (NodeId, Vec<NodeId>) {
    let nn = p.n * p.n;
    let k = p.leaves.len() / nn;
    let mut leaves: Vec<NodeId> = (0..k)
        .map(|i| tape.param(Tensor::new(p.n, p.n, flat[i * nn..(i + 1) * nn].to_vec()).unwrap()))
        .collect();
    let s = tape.param(Tensor::scalar(flat[k * nn]));
    let mut pool = leaves.clone();
    for &(op, i, j, c) in &p.steps {
        let a = pool[i % pool.len()];
        let b = pool[j % pool.len()];
        let node = match op {
            0 => tape.add(a, b),
            1 => tape.sub(a, b),
            2 => tape.scale(a, c),
            3 => tape.matmul(a, b),
            4 => tape.hadamard(a, b),
            5 => tape.tanh(a),
            6 => tape.square(a).and_then(|q| tape.tanh(q)),
            7 => tape.hadamard(a, s),
            _ => tape.add(s, a),
        }
        .unwrap();
        pool.push(node);
    }
    let last = *pool.last().unwrap();
    let sq = tape.square(last).unwrap();
    let root = tape.sum(sq).unwrap();
    leaves.push(s);
    (root, leaves)
}

fn eval(p: &Program, flat: &[f64]) -> rdnn::Result<f64> {
    let mut tape = Tape::new();
    let (root, _) = record(p, flat, &mut tape);
    Ok(tape.value(root).data()[0])
}

fn gradient(p: &Program, flat: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let (root, leaves) = record(p, flat, &mut tape);
    let g = tape.backward(root).unwrap();
    leaves.iter().flat_map(|id| g[id].data().to_vec()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn backward_matches_finite_differences(p in program()) {
        let mut flat = p.leaves.clone();
        flat.push(p.scalar);
        let value = eval(&p, &flat).unwrap();
        prop_assume!(value.abs() < 1e4);
        let ad = gradient(&p, &flat);
        let fd = finite_diff_gradient(|x| eval(&p, x), &flat, 1e-5).unwrap();
        prop_assume!(norm(&fd) > 1e-4);
        let err = rel_err(&ad, &fd);
        prop_assert!(err < 1e-6, "relative error {err:e}");
    }

    #[test]
    fn backward_is_linear(p in program(), q in program(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        // f and g share leaves when shapes agree; otherwise use p twice
        let q = if q.n == p.n && q.leaves.len() == p.leaves.len() { q } else { p.clone() };
        let mut flat = p.leaves.clone();
        flat.push(p.scalar);
        let mut tape = Tape::new();
        let (rf, leaves_f) = record(&p, &flat, &mut tape);
        let gf = tape.backward(rf).unwrap();
        let mut tape_g = Tape::new();
        let (rg, leaves_g) = record(&q, &flat, &mut tape_g);
        let gg = tape_g.backward(rg).unwrap();

        // combined graph on one tape: leaves are registered once, by p
        let mut tape_c = Tape::new();
        let (rf_c, leaves_c) = record(&p, &flat, &mut tape_c);
        let nn = p.n * p.n;
        let k = p.leaves.len() / nn;
        let rg_c = {
            // replay q against the leaves already on the tape
            let mut pool: Vec<NodeId> = leaves_c[..k].to_vec();
            let s = leaves_c[k];
            for &(op, i, j, c) in &q.steps {
                let x = pool[i % pool.len()];
                let y = pool[j % pool.len()];
                let node = match op {
                    0 => tape_c.add(x, y),
                    1 => tape_c.sub(x, y),
                    2 => tape_c.scale(x, c),
                    3 => tape_c.matmul(x, y),
                    4 => tape_c.hadamard(x, y),
                    5 => tape_c.tanh(x),
                    6 => tape_c.square(x).and_then(|t| tape_c.tanh(t)),
                    7 => tape_c.hadamard(x, s),
                    _ => tape_c.add(s, x),
                }.unwrap();
                pool.push(node);
            }
            let sq = tape_c.square(*pool.last().unwrap()).unwrap();
            tape_c.sum(sq).unwrap()
        };
        let fa = tape_c.scale(rf_c, a).unwrap();
        let gb = tape_c.scale(rg_c, b).unwrap();
        let root = tape_c.add(fa, gb).unwrap();
        let gc = tape_c.backward(root).unwrap();
        for idx in 0..leaves_c.len() {
            let (f, g, c) = (gf[&leaves_f[idx]].data(), gg[&leaves_g[idx]].data(), gc[&leaves_c[idx]].data());
            for e in 0..c.len() {
                let expected = a * f[e] + b * g[e];
                prop_assert!((c[e] - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "{} vs {}", c[e], expected);
            }
        }
    }

    #[test]
    fn replay_is_bitwise_deterministic(p in program()) {
        let mut flat = p.leaves.clone();
        flat.push(p.scalar);
        let g1 = gradient(&p, &flat);
        let g2 = gradient(&p, &flat);
        prop_assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(eval(&p, &flat).unwrap().to_bits(), eval(&p, &flat).unwrap().to_bits());
    }
}

#[test]
fn record_checks_arity_and_ids() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::scalar(1.0));
    assert!(tape.record(Op::Add, &[a]).is_err());
    let far = {
        let mut big = Tape::new();
        let mut id = big.constant(Tensor::scalar(0.0));
        for _ in 0..5 {
            id = big.tanh(id).unwrap();
        }
        id
    };
    assert!(tape.tanh(far).is_err());
}

#[test]
fn full_rk4_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let widths = [2, 128, 2];
    let params = NetworkParams::init(&widths, 77).unwrap();
    let phi1 = vec![rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)];
    let phi2 = vec![rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)];
    let pair = vec![DataPair::new(phi1, 0.0, phi2, 0.2).unwrap()];
    let scheme = ResidualScheme::recursive_rk4(2).unwrap();
    let (_, ad) = loss_and_gradient(&params, &scheme, &pair).unwrap();
    let fd = finite_diff_gradient(
        |theta| loss(&NetworkParams::unflatten(theta, &widths)?, &scheme, &pair),
        &params.flatten(),
        1e-5,
    )
    .unwrap();
    assert_eq!(ad.len(), 642);
    let err = rel_err(&ad, &fd);
    assert!(err < 1e-6, "relative error {err:e}");
}
