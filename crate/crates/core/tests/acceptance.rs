//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 4-6 train full-size networks (minutes each on one core).
//! `RDNN_ACCEPTANCE_QUICK=1` skips them; `RDNN_ACCEPTANCE_SLOW=1` adds the
//! glycolytic study (7). The run exits nonzero on a FAIL only with
//! `RDNN_ACCEPTANCE_STRICT=1`, so that known, documented shortfalls do not
//! mask regressions reported by the ordinary test targets.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdnn::autodiff::finite_diff_gradient;
use rdnn::evaluate::{reproduce_table, CellModel, CellResult, TableSpec};
use rdnn::field::FnField;
use rdnn::network::NetworkParams;
use rdnn::optimize::{loss, loss_and_gradient};
use rdnn::residual::{residual, DataPair, ResidualScheme, SchemeKind};
use rdnn::systems::{lhs_sample, Domain};

struct Outcome {
    pass: bool,
    detail: String,
}

fn flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_check() -> Outcome {
    let schemes = [
        ResidualScheme::single(SchemeKind::EulerForward).unwrap(),
        ResidualScheme::single(SchemeKind::Trapezoid).unwrap(),
        ResidualScheme::recursive_euler(3).unwrap(),
        ResidualScheme::recursive_rk4(2).unwrap(),
    ];
    let widths = [2, 8, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let trials = 24;
    for i in 0..trials {
        let scheme = &schemes[i % schemes.len()];
        let params = NetworkParams::init(&widths, rng.gen()).unwrap();
        let mut point = || vec![rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)];
        let (phi1, phi2) = (point(), point());
        let t1 = rng.gen_range(-1.0..1.0);
        let pair = vec![DataPair::new(phi1, t1, phi2, t1 + rng.gen_range(0.05..0.5)).unwrap()];
        let (_, ad) = loss_and_gradient(&params, scheme, &pair).unwrap();
        let fd = finite_diff_gradient(
            |theta| loss(&NetworkParams::unflatten(theta, &widths)?, scheme, &pair),
            &params.flatten(),
            1e-5,
        )
        .unwrap();
        let diff: Vec<f64> = ad.iter().zip(&fd).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&fd));
    }
    Outcome {
        pass: worst < 1e-6,
        detail: format!("{trials} triples, worst relative error {worst:.2e} (< 1e-6)"),
    }
}

fn order_slopes() -> Outcome {
    let pair = DataPair::new(vec![1.0], 0.0, vec![1f64.exp()], 1.0).unwrap();
    let field = FnField::new(1, |x: &[f64], _| x.to_vec());
    let ms = [1usize, 2, 4, 8, 16];
    let mut pass = true;
    let mut parts = Vec::new();
    for (kind, target, tol) in [(SchemeKind::RecursiveEuler, 1.0, 0.2), (SchemeKind::RecursiveRk4, 4.0, 0.3)] {
        let logs: Vec<(f64, f64)> = ms
            .iter()
            .map(|&m| {
                let r = residual(&ResidualScheme::new(kind, m).unwrap(), &pair, &field).unwrap()[0];
                ((m as f64).log2(), r.abs().log2())
            })
            .collect();
        // least-squares slope of log2|r| against log2 M
        let n = logs.len() as f64;
        let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let rate = -sxy / sxx;
        let per_doubling: Vec<String> = logs.windows(2).map(|w| format!("{:.3}", w[0].1 - w[1].1)).collect();
        let ok = (rate - target).abs() <= tol;
        pass &= ok;
        parts.push(format!(
            "{kind} rate {rate:.3} (target {target} ± {tol}{}; per doubling {})",
            if ok { "" } else { ", outside" },
            per_doubling.join(" ")
        ));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn null_test() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    let mut failures = Vec::new();
    for table in 1..=3 {
        let mut spec = TableSpec::paper(table).unwrap();
        spec.model = CellModel::Exact;
        let result = reproduce_table(&spec, |_| {}).unwrap();
        for cell in &result.cells {
            cells += 1;
            match cell.metric_rel {
                Some(r) => worst = worst.max(r),
                None => failures.push(format!("table{table} dt {} M {}: {}", cell.dt, cell.stages, cell.status.label())),
            }
        }
    }
    Outcome {
        pass: failures.is_empty() && worst < 1e-6,
        detail: format!(
            "{cells} cells over three systems, worst relative error {worst:.2e} (< 1e-6){}, {:.0} s",
            if failures.is_empty() { String::new() } else { format!(", missing: {}", failures.join("; ")) },
            start.elapsed().as_secs_f64()
        ),
    }
}

fn run_cells(table: u8, dt: f64, stages: &[usize]) -> Vec<CellResult> {
    let mut spec = TableSpec::paper(table).unwrap();
    spec.dts = vec![dt];
    spec.stages = stages.to_vec();
    spec.record_time = true;
    reproduce_table(&spec, |c| {
        eprintln!(
            "  table{table} dt={} M={} rel={:?} loss={:?} {:.0}s {}",
            c.dt,
            c.stages,
            c.metric_rel,
            c.final_loss,
            c.wall_seconds.unwrap_or(0.0),
            c.status.label()
        )
    })
    .unwrap()
    .cells
}

fn rel_text(cell: &CellResult) -> String {
    cell.metric_rel.map_or_else(|| format!("none ({})", cell.status.label()), |v| format!("{v:.4}"))
}

fn large_lag_effect() -> Outcome {
    let cells = run_cells(1, 0.2, &[1, 5]);
    let (m1, m5) = (&cells[0], &cells[1]);
    let pass = match (m1.metric_rel, m5.metric_rel) {
        (Some(a), Some(b)) => a > 0.3 && b < 0.05 && a >= 10.0 * b,
        _ => false,
    };
    Outcome {
        pass,
        detail: format!(
            "cubic dt=0.2: M=1 error {} (> 0.3), M=5 error {} (< 0.05), ratio {}",
            rel_text(m1),
            rel_text(m5),
            match (m1.metric_rel, m5.metric_rel) {
                (Some(a), Some(b)) => format!("{:.1} (>= 10)", a / b),
                _ => "n/a".into(),
            }
        ),
    }
}

fn small_lag() -> Outcome {
    let cells = run_cells(1, 0.01, &[1]);
    Outcome {
        pass: cells[0].metric_rel.is_some_and(|v| v < 0.05),
        detail: format!("cubic dt=0.01 M=1 error {} (< 0.05)", rel_text(&cells[0])),
    }
}

fn bifurcation() -> Outcome {
    let cells = run_cells(3, 2.0, &[10]);
    let cell = &cells[0];
    if cell.trajectories.is_empty() {
        return Outcome {
            pass: false,
            detail: format!("no trajectories ({})", cell.status.label()),
        };
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for tr in &cell.trajectories {
        let mu = tr.true_states[0][0];
        let radius = |s: &Vec<f64>| s[1].hypot(s[2]);
        if tr.diverged_at.is_some() {
            pass = false;
            parts.push(format!("mu={mu}: diverged"));
            continue;
        }
        if mu < 0.0 {
            let r = radius(tr.predicted_states.last().unwrap());
            let ok = r < 0.2;
            pass &= ok;
            parts.push(format!("mu={mu}: final r={r:.3} (< 0.2)"));
        } else if [0.3, 0.5, 0.7].contains(&mu) {
            let target = f64::sqrt(mu);
            let tail: Vec<f64> = tr
                .times
                .iter()
                .zip(&tr.predicted_states)
                .filter(|(t, _)| **t >= 65.0)
                .map(|(_, s)| radius(s))
                .collect();
            let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ok = !tail.is_empty() && lo >= 0.75 * target && hi <= 1.25 * target;
            pass &= ok;
            parts.push(format!("mu={mu}: r in [{lo:.3}, {hi:.3}] on t>=65 (sqrt mu {target:.3} ± 25%)"));
        }
    }
    Outcome {
        pass,
        detail: format!("hopf dt=2 M=10 (train error {}): {}", rel_text(cell), parts.join("; ")),
    }
}

fn glycolytic_study() -> Outcome {
    let cells = run_cells(2, 0.2, &[1, 2, 5, 10]);
    let errors: Vec<Option<f64>> = cells.iter().map(|c| c.metric_rel).collect();
    let monotone = errors.iter().all(Option::is_some)
        && errors.windows(2).all(|w| w[1].unwrap() < w[0].unwrap());
    let last = errors[3];
    Outcome {
        pass: monotone && last.is_some_and(|v| v < 0.1),
        detail: format!(
            "glycolytic dt=0.2 errors M=1,2,5,10: {} (monotone, M=10 < 0.1)",
            cells.iter().map(rel_text).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn run_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_rdnn"))
        .args(args)
        .current_dir(dir)
        .output()
        .is_ok_and(|o| o.status.success())
}

fn tree(dir: &Path, prefix: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let rel = p.strip_prefix(prefix).unwrap().display().to_string();
        if p.is_dir() {
            tree(&p, prefix, out);
        } else {
            out.push((rel, fs::read(&p).unwrap()));
        }
    }
}

fn determinism() -> Outcome {
    let script: [&[&str]; 4] = [
        &["gen-data", "--system", "cubic", "--dt", "0.2", "--n", "200", "--seed", "3", "--out", "."],
        &["train", "--data", "pairs.csv", "--stages", "5", "--hidden", "16", "--adam-steps", "200", "--lbfgs-max-iters", "50", "--seed", "3", "--out", "."],
        &["predict", "--checkpoint", "checkpoint.json", "--ic", "2,0", "--horizon", "5", "--system", "cubic", "--out", "."],
        &["reproduce", "--table", "3", "--n", "50", "--adam-steps", "20", "--lbfgs-max-iters", "5", "--seed", "3", "--out", "."],
    ];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        for args in script {
            if !run_cli(dir.path(), args) {
                return Outcome {
                    pass: false,
                    detail: format!("`rdnn {}` failed", args.join(" ")),
                };
            }
        }
        let mut files = Vec::new();
        tree(dir.path(), dir.path(), &mut files);
        snapshots.push(files);
    }
    let (a, b) = (&snapshots[0], &snapshots[1]);
    let differing: Vec<&str> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    Outcome {
        pass: a.len() == b.len() && differing.is_empty(),
        detail: format!(
            "gen-data, train, predict, reproduce twice: {} files, {} differ{}",
            a.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    }
}

fn lhs_stratification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cases = 300;
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.gen_range(1..300);
        let d = rng.gen_range(1..10);
        let lower: Vec<f64> = (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let upper: Vec<f64> = lower.iter().map(|l| l + rng.gen_range(1e-3..20.0)).collect();
        let domain = Domain::new(lower, upper).unwrap();
        let points = lhs_sample(&domain, n, rng.gen()).unwrap();
        for axis in 0..d {
            let mut hits = vec![0usize; n];
            for p in &points {
                let (a, b) = (domain.lower[axis], domain.upper[axis]);
                let k = (((p[axis] - a) / (b - a)) * n as f64).floor() as usize;
                hits[k.min(n - 1)] += 1;
            }
            if hits.iter().any(|&h| h != 1) {
                bad += 1;
                break;
            }
        }
    }
    Outcome {
        pass: bad == 0,
        detail: format!("{cases} random (N, d, seed) draws, {bad} with a stratum not hit exactly once"),
    }
}

fn main() {
    let quick = flag("RDNN_ACCEPTANCE_QUICK");
    let slow = flag("RDNN_ACCEPTANCE_SLOW");
    type Criterion = (&'static str, fn() -> Outcome, bool);
    let criteria: [Criterion; 9] = [
        ("1 gradient check", gradient_check, true),
        ("2 integrator order", order_slopes, true),
        ("3 exact-RHS null test", null_test, true),
        ("4 cubic dt=0.2 M=1 vs M=5", large_lag_effect, !quick),
        ("5 cubic dt=0.01 M=1", small_lag, !quick),
        ("6 hopf bifurcation", bifurcation, !quick),
        ("7 glycolytic M study (slow)", glycolytic_study, slow && !quick),
        ("8 determinism", determinism, true),
        ("9 LHS stratification", lhs_stratification, true),
    ];
    let mut failed = 0;
    for (name, check, enabled) in criteria {
        if !enabled {
            let why = if name.starts_with('7') && !quick {
                "set RDNN_ACCEPTANCE_SLOW=1"
            } else {
                "RDNN_ACCEPTANCE_QUICK=1"
            };
            println!("SKIP criterion {name}: {why}");
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {} [{:.0} s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 && flag("RDNN_ACCEPTANCE_STRICT") {
        std::process::exit(1);
    }
}
