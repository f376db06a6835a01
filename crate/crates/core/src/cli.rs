//! The `rdnn` command line: `gen-data`, `train`, `predict`, `reproduce`.
//!
//! Settings come from an optional TOML file (`--config`) overlaid by
//! flags; flags win. Every setting is validated before any work starts.
//! Data goes to files under `--out`, summaries to stdout, and errors to
//! stderr as one line: `error kind=<kind> exit=<code>: <message>`.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 runtime failure or
//! divergence, 3 I/O or file format.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::evaluate::{self, CellModel, CellStatus, Scale, TableSpec, TrajectoryResult};
use crate::io::{self, Checkpoint};
use crate::optimize::{train, Batch, TrainConfig, TrainStatus};
use crate::residual::{ResidualScheme, SchemeKind};
use crate::systems::{default_substeps, generate_pairs, Domain, TrueSystem};

#[derive(Debug, Parser)]
#[command(name = "rdnn", version, about = "Discover ODE right-hand sides from sparsely sampled state pairs")]
pub struct Cli {
    /// TOML file with settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample initial states and advance them with the true system.
    GenData(GenDataArgs),
    /// Fit a network to a pair set.
    Train(TrainArgs),
    /// Roll a checkpoint out from an initial condition.
    Predict(PredictArgs),
    /// Rerun one of the benchmark error tables.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args, Default)]
pub struct GenDataArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Reference RK4 substeps per pair (default max(400, ceil(4000 dt))).
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub domain_lower: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub domain_upper: Option<Vec<f64>>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Pair CSV written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Names the system in the checkpoint; required with `--model exact`.
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub stages: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Feed time to the network as an extra input.
    #[arg(long)]
    pub time_input: bool,
    /// `network` (default) or `exact` (writes a closed-form checkpoint).
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub adam_steps: Option<usize>,
    #[arg(long)]
    pub adam_lr: Option<f64>,
    #[arg(long)]
    pub lbfgs_max_iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub history_every: Option<usize>,
    /// Record wall time in the history (breaks byte-identical reruns).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args, Default)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Initial condition, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub ic: Option<Vec<f64>>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub eval_step: Option<f64>,
    /// Compare against this true system and report the error.
    #[arg(long)]
    pub system: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct ReproduceArgs {
    /// 1 (cubic), 2 (glycolytic) or 3 (Hopf).
    #[arg(long)]
    pub table: Option<u8>,
    /// `paper` or `smoke` (default).
    #[arg(long)]
    pub scale: Option<String>,
    /// `network` (default) or `exact` (null test: no learning).
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub adam_steps: Option<usize>,
    #[arg(long)]
    pub lbfgs_max_iters: Option<usize>,
    #[arg(long)]
    pub timing: bool,
}

/// Keys accepted in the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub system: Option<String>,
    pub n: Option<usize>,
    pub dt: Option<f64>,
    pub substeps: Option<usize>,
    pub domain_lower: Option<Vec<f64>>,
    pub domain_upper: Option<Vec<f64>>,
    pub data: Option<PathBuf>,
    pub scheme: Option<String>,
    pub stages: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub time_input: Option<bool>,
    pub model: Option<String>,
    pub timing: Option<bool>,
    pub checkpoint: Option<PathBuf>,
    pub ic: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub eval_step: Option<f64>,
    pub table: Option<u8>,
    pub scale: Option<String>,
    pub replicates: Option<usize>,
    #[serde(default)]
    pub train: TrainKeys,
}

/// `[train]` section of the config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainKeys {
    pub adam_steps: Option<usize>,
    pub adam_lr: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub lbfgs_max_iters: Option<usize>,
    pub lbfgs_memory: Option<usize>,
    pub lbfgs_grad_tol: Option<f64>,
    pub batch_size: Option<usize>,
    pub history_every: Option<usize>,
}

impl TrainKeys {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($key:ident),*) => { $( if let Some(v) = self.$key { cfg.$key = v; } )* };
        }
        set!(adam_steps, adam_lr, adam_eps, lbfgs_max_iters, lbfgs_memory, lbfgs_grad_tol, history_every);
        if let Some(b) = self.adam_beta1 {
            cfg.adam_betas.0 = b;
        }
        if let Some(b) = self.adam_beta2 {
            cfg.adam_betas.1 = b;
        }
        if let Some(k) = self.batch_size {
            cfg.batch = Batch::Size(k);
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))
    }

    /// Overlays the flags of the chosen command; flags win.
    fn overlay(&mut self, cli: &Cli) {
        fn set<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        set(&mut self.seed, &cli.seed);
        set(&mut self.out, &cli.out);
        match &cli.command {
            Command::GenData(a) => {
                set(&mut self.system, &a.system);
                set(&mut self.n, &a.n);
                set(&mut self.dt, &a.dt);
                set(&mut self.substeps, &a.substeps);
                set(&mut self.domain_lower, &a.domain_lower);
                set(&mut self.domain_upper, &a.domain_upper);
            }
            Command::Train(a) => {
                set(&mut self.data, &a.data);
                set(&mut self.system, &a.system);
                set(&mut self.scheme, &a.scheme);
                set(&mut self.stages, &a.stages);
                set(&mut self.hidden, &a.hidden);
                set(&mut self.model, &a.model);
                set(&mut self.train.adam_steps, &a.adam_steps);
                set(&mut self.train.adam_lr, &a.adam_lr);
                set(&mut self.train.lbfgs_max_iters, &a.lbfgs_max_iters);
                set(&mut self.train.batch_size, &a.batch_size);
                set(&mut self.train.history_every, &a.history_every);
                if a.time_input {
                    self.time_input = Some(true);
                }
                if a.timing {
                    self.timing = Some(true);
                }
            }
            Command::Predict(a) => {
                set(&mut self.checkpoint, &a.checkpoint);
                set(&mut self.ic, &a.ic);
                set(&mut self.horizon, &a.horizon);
                set(&mut self.eval_step, &a.eval_step);
                set(&mut self.system, &a.system);
            }
            Command::Reproduce(a) => {
                set(&mut self.table, &a.table);
                set(&mut self.scale, &a.scale);
                set(&mut self.model, &a.model);
                set(&mut self.replicates, &a.replicates);
                set(&mut self.n, &a.n);
                set(&mut self.train.adam_steps, &a.adam_steps);
                set(&mut self.train.lbfgs_max_iters, &a.lbfgs_max_iters);
                if a.timing {
                    self.timing = Some(true);
                }
            }
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn system(&self) -> Result<Option<TrueSystem>> {
        self.system.as_deref().map(str::parse).transpose()
    }

    fn require_system(&self) -> Result<TrueSystem> {
        self.system()?
            .ok_or_else(|| Error::config("missing `system` (cubic_oscillator, glycolytic or hopf_augmented)"))
    }

    fn model(&self) -> Result<CellModel> {
        match self.model.as_deref() {
            None | Some("network") => Ok(CellModel::Network),
            Some("exact") => Ok(CellModel::Exact),
            Some(other) => Err(Error::config(format!("unknown model `{other}`; expected network or exact"))),
        }
    }

    fn train_config(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base;
        self.train.apply(&mut cfg);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } => 1,
        Error::NonFinite { .. } | Error::Divergence { .. } | Error::Eval(_) => 2,
        Error::Io { .. } | Error::Parse { .. } => 3,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Contract(_) | Error::Dimension { .. } => "input",
        Error::NonFinite { .. } | Error::Divergence { .. } => "divergence",
        Error::Eval(_) => "runtime",
        Error::Io { .. } => "io",
        Error::Parse { .. } => "format",
    }
}

/// Runs the command line and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage exit=1: {first}");
            return 1;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} exit={code}: {msg}", kind(&e));
            code
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.overlay(cli);
    match cli.command {
        Command::GenData(_) => gen_data(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Predict(_) => predict(&cfg),
        Command::Reproduce(_) => reproduce(&cfg),
    }
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let system = cfg.require_system()?;
    let n = cfg.n.unwrap_or(1000);
    let dt = cfg.dt.ok_or_else(|| Error::config("missing `dt`"))?;
    if !(dt > 0.0 && dt.is_finite()) || n == 0 {
        return Err(Error::config(format!("need dt > 0 and n >= 1 (got dt={dt}, n={n})")));
    }
    let domain = match (&cfg.domain_lower, &cfg.domain_upper) {
        (None, None) => system.default_domain(),
        (Some(lo), Some(hi)) => Domain::new(lo.clone(), hi.clone()).map_err(|e| Error::config(e.to_string()))?,
        _ => return Err(Error::config("domain_lower and domain_upper must be given together")),
    };
    if domain.dim() != system.dim() {
        return Err(Error::config(format!(
            "domain has dimension {}, {} has {}",
            domain.dim(),
            system.name(),
            system.dim()
        )));
    }
    let substeps = cfg.substeps.unwrap_or_else(|| default_substeps(dt));
    if substeps == 0 {
        return Err(Error::config("substeps must be >= 1"));
    }
    let seed = cfg.seed.unwrap_or(0);
    let set = generate_pairs(system, &domain, n, dt, seed, substeps)?;
    let path = cfg.out_dir().join("pairs.csv");
    io::write_pairs(&set, &path)?;
    println!(
        "gen-data: system={} n={} dt={dt} seed={seed} substeps={substeps} domain={:?}x{:?} rejected={} -> {}",
        system.name(),
        set.len(),
        domain.lower,
        domain.upper,
        set.provenance.rejected,
        path.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let model = cfg.model()?;
    let system = cfg.system()?;
    let out = cfg.out_dir();
    let ck_path = out.join("checkpoint.json");
    if model == CellModel::Exact {
        let system = system.ok_or_else(|| Error::config("`model = exact` needs `system`"))?;
        Checkpoint::exact(system).write(&ck_path)?;
        println!("train: exact {} right-hand side -> {}", system.name(), ck_path.display());
        return Ok(());
    }

    // validate everything before reading data
    let kind: SchemeKind = cfg.scheme.as_deref().unwrap_or("recursive_rk4").parse()?;
    let stages = cfg.stages.unwrap_or(if kind.is_recursive() { 5 } else { 1 });
    let scheme = ResidualScheme::new(kind, stages)?;
    let train_cfg = cfg.train_config(TrainConfig::default())?;
    let hidden = cfg.hidden.clone().unwrap_or_else(|| vec![128]);
    if hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::config("hidden widths must be a nonempty list of positive integers"));
    }
    let data_path = cfg.data.as_ref().ok_or_else(|| Error::config("missing `data` (pair CSV)"))?;

    let set = io::read_pairs(data_path)?;
    let d = set.dim().expect("read_pairs rejects empty sets");
    if let Some(s) = system.filter(|s| s.dim() != d) {
        return Err(Error::config(format!("data has dimension {d}, {} has {}", s.name(), s.dim())));
    }
    let mut widths = vec![if cfg.time_input.unwrap_or(false) { d + 1 } else { d }];
    widths.extend(&hidden);
    widths.push(d);

    let outcome = train(&scheme, &set.pairs, &widths, &train_cfg)?;
    let mut ck = Checkpoint::network(&outcome.params, train_cfg.seed, scheme, system);
    ck.final_loss = Some(outcome.final_loss);
    ck.write(&ck_path)?;
    let hist_path = out.join("history.csv");
    io::write_atomic(
        &hist_path,
        io::history_to_csv(&outcome.history, cfg.timing.unwrap_or(false)).as_bytes(),
    )?;
    println!(
        "train: pairs={} scheme={scheme} widths={widths:?} seed={} initial_loss={:.6e} final_loss={:.6e} -> {}",
        set.len(),
        train_cfg.seed,
        outcome.initial_loss,
        outcome.final_loss,
        ck_path.display()
    );
    match outcome.status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Diverged { phase, step, message } => Err(Error::Eval(format!(
            "training diverged in {phase} at step {step} ({message}); best parameters kept in {}",
            ck_path.display()
        ))),
    }
}

fn predict(cfg: &RunConfig) -> Result<()> {
    let truth_system = cfg.system()?;
    let ck_path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("missing `checkpoint`"))?;
    let ck = Checkpoint::read(ck_path)?;
    let model = ck.to_model()?;
    let known = truth_system.or(ck.system);
    let ic = match (&cfg.ic, known) {
        (Some(ic), _) => ic.clone(),
        (None, Some(s)) => s.eval_initial_conditions()[0].clone(),
        (None, None) => return Err(Error::config("missing `ic`")),
    };
    let horizon = cfg.horizon.or(known.map(TrueSystem::eval_horizon)).unwrap_or(25.0);
    let eval_step = cfg.eval_step.or(known.map(TrueSystem::eval_step)).unwrap_or(0.01);
    if ic.len() != crate::field::VectorField::dim(&model) {
        return Err(Error::contract(format!(
            "initial condition has dimension {}, checkpoint model has {}",
            ic.len(),
            crate::field::VectorField::dim(&model)
        )));
    }
    if let Some(s) = truth_system.filter(|s| s.dim() != ic.len()) {
        return Err(Error::config(format!("{} has dimension {}, initial condition has {}", s.name(), s.dim(), ic.len())));
    }
    evaluate::time_grid(horizon, eval_step).map_err(|e| Error::config(e.to_string()))?;

    let substeps = evaluate::substeps_for(eval_step, evaluate::ROLLOUT_MAX_STEP);
    let pred = evaluate::rollout(&model, &ic, horizon, eval_step, substeps)?;
    let result = match truth_system {
        Some(s) => TrajectoryResult::compare(evaluate::true_trajectory(s, &ic, horizon, eval_step)?, pred)?,
        None => TrajectoryResult {
            times: pred.times,
            true_states: Vec::new(),
            predicted_states: pred.states,
            metric_rel: None,
            metric_abs: None,
            diverged_at: pred.diverged_at,
        },
    };
    let path = cfg.out_dir().join("trajectory.csv");
    let provenance = serde_json::json!({
        "checkpoint": ck_path.display().to_string(),
        "model": ck.model,
        "ic": ic,
        "horizon": horizon,
        "eval_step": eval_step,
        "rollout_substeps": substeps,
        "true_system": truth_system.map(TrueSystem::name),
    });
    io::write_trajectory(&result, &path, provenance)?;
    let mut line = format!("predict: points={} horizon={horizon} eval_step={eval_step}", result.times.len());
    if let Some(t) = result.diverged_at {
        line.push_str(&format!(" diverged_at={t}"));
    }
    if let (Some(rel), Some(abs)) = (result.metric_rel, result.metric_abs) {
        line.push_str(&format!(" relative_l2_error={rel:.6e} abs_l2_error={abs:.6e}"));
    }
    println!("{line} -> {}", path.display());
    Ok(())
}

fn reproduce(cfg: &RunConfig) -> Result<()> {
    let table = cfg.table.ok_or_else(|| Error::config("missing `table` (1, 2 or 3)"))?;
    let scale = match cfg.scale.as_deref() {
        None | Some("smoke") => Scale::Smoke,
        Some("paper") => Scale::Paper,
        Some(other) => return Err(Error::config(format!("unknown scale `{other}`; expected paper or smoke"))),
    };
    let mut spec = TableSpec::at_scale(table, scale)?;
    spec.model = cfg.model()?;
    spec.seed = cfg.seed.unwrap_or(0);
    spec.train = cfg.train_config(spec.train.clone())?;
    if let Some(n) = cfg.n {
        spec.n_pairs = n;
    }
    if let Some(r) = cfg.replicates {
        spec.replicates = r;
    }
    if let Some(h) = &cfg.hidden {
        spec.hidden = h.clone();
    }
    spec.record_time = cfg.timing.unwrap_or(false);
    spec.validate()?;

    let scale_name = match scale {
        Scale::Paper => "paper",
        Scale::Smoke => "smoke",
    };
    let stem = format!("table{table}_{scale_name}");
    let out = cfg.out_dir();
    let cell_root = out.join(&stem);
    let mut write_err = None;
    let result = evaluate::reproduce_table(&spec, |cell| {
        let dir = cell_root.join(format!("dt{}_M{}_r{}", cell.dt, cell.stages, cell.replicate));
        let written = (|| -> Result<()> {
            if let Some(p) = &cell.params {
                let scheme = ResidualScheme::new(spec.kind, cell.stages)?;
                let mut ck = Checkpoint::network(p, cell.seed, scheme, Some(spec.system));
                ck.final_loss = cell.final_loss;
                ck.write(&dir.join("checkpoint.json"))?;
            }
            for (k, tr) in cell.trajectories.iter().enumerate() {
                let prov = serde_json::json!({
                    "table": table,
                    "system": spec.system.name(),
                    "dt": cell.dt,
                    "M": cell.stages,
                    "seed": cell.seed,
                    "ic": spec.initial_conditions[k],
                });
                io::write_trajectory(tr, &dir.join(format!("ic{k}.csv")), prov)?;
            }
            Ok(())
        })();
        if let Err(e) = written {
            write_err.get_or_insert(e);
        }
        let detail = match &cell.status {
            CellStatus::Failed(m) | CellStatus::TrainDiverged(m) => format!(" ({m})"),
            _ => String::new(),
        };
        println!(
            "reproduce: dt={} M={} seed={} rel={} status={}{detail}",
            cell.dt,
            cell.stages,
            cell.seed,
            cell.metric_rel.map_or("--".into(), |v| format!("{v:.4e}")),
            cell.status.label()
        );
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let csv_path = out.join(format!("{stem}.csv"));
    io::write_atomic(&csv_path, result.to_csv().as_bytes())?;
    let rendered = result.render();
    io::write_atomic(&out.join(format!("{stem}.txt")), rendered.as_bytes())?;
    print!("{rendered}");
    println!("reproduce: -> {}", csv_path.display());
    if result.any_succeeded() {
        Ok(())
    } else {
        Err(Error::Eval("every table cell failed".into()))
    }
}
