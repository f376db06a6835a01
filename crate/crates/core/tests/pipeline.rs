use proptest::prelude::*;

use rdnn::evaluate::{relative_l2_error, reproduce_table, CellModel, CellStatus, TableSpec};
use rdnn::optimize::{loss, train, TrainConfig, TrainStatus};
use rdnn::residual::ResidualScheme;
use rdnn::systems::{generate_pairs, TrueSystem};

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        adam_steps: 60,
        adam_lr: 5e-3,
        lbfgs_max_iters: 20,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn exact_model_reproduces_every_table_within_one_millionth() {
    for table in 1..=3 {
        let mut spec = TableSpec::paper(table).unwrap();
        spec.model = CellModel::Exact;
        spec.n_pairs = 16;
        spec.stages = vec![1, 10];
        let result = reproduce_table(&spec, |_| {}).unwrap();
        assert_eq!(result.cells.len(), spec.dts.len() * 2);
        for cell in &result.cells {
            assert_eq!(cell.status, CellStatus::Ok);
            let rel = cell.metric_rel.unwrap();
            assert!(rel < 1e-6, "table {table} dt {} M {}: {rel:e}", cell.dt, cell.stages);
        }
    }
}

#[test]
fn training_improves_and_is_deterministic() {
    let system = TrueSystem::CubicOscillator;
    let data = generate_pairs(system, &system.default_domain(), 40, 0.1, 9, 400).unwrap();
    let scheme = ResidualScheme::recursive_rk4(2).unwrap();
    let widths = [2, 16, 2];
    let a = train(&scheme, &data.pairs, &widths, &tiny_config(1)).unwrap();
    let b = train(&scheme, &data.pairs, &widths, &tiny_config(1)).unwrap();
    assert_eq!(a.status, TrainStatus::Completed);
    assert!(a.adam_loss <= a.initial_loss);
    assert!(a.final_loss <= a.adam_loss);
    assert_eq!(a.params.flatten(), b.params.flatten());
    assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    let recomputed = loss(&a.params, &scheme, &data.pairs).unwrap();
    assert!((recomputed - a.final_loss).abs() <= 1e-12 * a.final_loss);
}

#[test]
fn table_csv_is_byte_identical_across_reruns() {
    let mut spec = TableSpec::smoke(1).unwrap();
    spec.n_pairs = 30;
    spec.hidden = vec![8];
    spec.train = tiny_config(0);
    spec.stages = vec![1, 2];
    spec.horizon = 2.0;
    let first = reproduce_table(&spec, |_| {}).unwrap();
    let second = reproduce_table(&spec, |_| {}).unwrap();
    assert_eq!(first.to_csv(), second.to_csv());
    assert_eq!(first.render(), second.render());
    assert!(first.any_succeeded());
    assert!(first.to_csv().lines().all(|l| !l.contains("NaN")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relative_error_is_rotation_invariant(
        angle in 0.0f64..std::f64::consts::TAU,
        truth in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..40),
        noise in prop::collection::vec(prop::collection::vec(-0.5f64..0.5, 2), 40),
    ) {
        prop_assume!(truth.iter().flatten().any(|v| v.abs() > 1e-3));
        let pred: Vec<Vec<f64>> = truth.iter().zip(&noise).map(|(t, n)| vec![t[0] + n[0], t[1] + n[1]]).collect();
        let (c, s) = (angle.cos(), angle.sin());
        let rot = |v: &Vec<f64>| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let base = relative_l2_error(&pred, &truth).unwrap();
        let turned = relative_l2_error(
            &pred.iter().map(rot).collect::<Vec<_>>(),
            &truth.iter().map(rot).collect::<Vec<_>>(),
        ).unwrap();
        prop_assert!((base - turned).abs() <= 1e-12 * (1.0 + base));
    }
}
