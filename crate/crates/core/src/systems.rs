//! Benchmark systems, Latin hypercube sampling, reference integration and
//! synthetic data-pair generation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::residual::DataPair;

/// Ground-truth systems used to synthesise data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueSystem {
    /// Damped oscillator with cubic kinetics, `Ẋ = A X³` (componentwise cube).
    CubicOscillator,
    /// Seven-species glycolytic oscillator.
    Glycolytic,
    /// Hopf normal form with the parameter carried as a constant state `(μ, x, y)`.
    HopfAugmented,
}

impl TrueSystem {
    pub const ALL: [TrueSystem; 3] = [
        TrueSystem::CubicOscillator,
        TrueSystem::Glycolytic,
        TrueSystem::HopfAugmented,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrueSystem::CubicOscillator => "cubic_oscillator",
            TrueSystem::Glycolytic => "glycolytic",
            TrueSystem::HopfAugmented => "hopf_augmented",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            TrueSystem::CubicOscillator => 2,
            TrueSystem::Glycolytic => 7,
            TrueSystem::HopfAugmented => 3,
        }
    }

    pub fn rhs(self, state: &[f64]) -> Vec<f64> {
        match self {
            TrueSystem::CubicOscillator => rhs_cubic([state[0], state[1]]).to_vec(),
            TrueSystem::Glycolytic => {
                let s: [f64; 7] = state.try_into().expect("glycolytic state has 7 entries");
                rhs_glycolytic(s).to_vec()
            }
            TrueSystem::HopfAugmented => rhs_hopf_augmented([state[0], state[1], state[2]]).to_vec(),
        }
    }

    /// Sampling box for initial states.
    pub fn default_domain(self) -> Domain {
        let (lower, upper) = match self {
            TrueSystem::CubicOscillator => (vec![-2.5, -2.5], vec![2.5, 2.5]),
            TrueSystem::Glycolytic => (
                vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.14, 0.05],
                vec![2.0, 3.0, 0.5, 0.5, 0.5, 2.67, 0.15],
            ),
            TrueSystem::HopfAugmented => (vec![-1.0, -2.0, -1.0], vec![1.0, 2.0, 1.0]),
        };
        Domain { lower, upper }
    }

    /// Time lags of the benchmark tables.
    pub fn default_lags(self) -> Vec<f64> {
        match self {
            TrueSystem::CubicOscillator => vec![0.01, 0.05, 0.1, 0.2],
            TrueSystem::Glycolytic => vec![0.2, 0.5],
            TrueSystem::HopfAugmented => vec![0.5, 1.0, 2.0],
        }
    }

    /// Initial conditions used to compare learned and true trajectories.
    pub fn eval_initial_conditions(self) -> Vec<Vec<f64>> {
        match self {
            TrueSystem::CubicOscillator => vec![vec![2.0, 0.0]],
            TrueSystem::Glycolytic => vec![vec![1.1, 1.0, 0.075, 0.175, 0.25, 0.9, 0.095]],
            TrueSystem::HopfAugmented => [-0.2, -0.1, 0.2, 0.3, 0.5, 0.7]
                .iter()
                .map(|&mu| vec![mu, 2.0, 0.0])
                .collect(),
        }
    }

    pub fn eval_horizon(self) -> f64 {
        match self {
            TrueSystem::CubicOscillator => 25.0,
            TrueSystem::Glycolytic => 5.0,
            TrueSystem::HopfAugmented => 75.0,
        }
    }

    pub fn eval_step(self) -> f64 {
        match self {
            TrueSystem::CubicOscillator | TrueSystem::Glycolytic => 0.01,
            TrueSystem::HopfAugmented => 0.05,
        }
    }
}

impl fmt::Display for TrueSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrueSystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cubic" | "cubic_oscillator" => Ok(TrueSystem::CubicOscillator),
            "glycolytic" => Ok(TrueSystem::Glycolytic),
            "hopf" | "hopf_augmented" => Ok(TrueSystem::HopfAugmented),
            other => Err(Error::config(format!(
                "unknown system '{other}' (expected cubic, glycolytic or hopf)"
            ))),
        }
    }
}

impl VectorField for TrueSystem {
    fn dim(&self) -> usize {
        TrueSystem::dim(*self)
    }

    fn eval(&self, state: &[f64], _t: f64) -> Result<Vec<f64>> {
        if state.len() != TrueSystem::dim(*self) {
            return Err(Error::contract(format!(
                "{} expects a state of dimension {}, got {}",
                self,
                TrueSystem::dim(*self),
                state.len()
            )));
        }
        Ok(self.rhs(state))
    }
}

pub fn rhs_cubic([x, y]: [f64; 2]) -> [f64; 2] {
    let (x3, y3) = (x * x * x, y * y * y);
    [-0.1 * x3 + 2.0 * y3, -2.0 * x3 - 0.1 * y3]
}

/// Glycolytic oscillator constants.
pub mod glycolytic {
    pub const J0: f64 = 2.5;
    pub const K1: f64 = 100.0;
    pub const K2: f64 = 6.0;
    pub const K3: f64 = 16.0;
    pub const K4: f64 = 100.0;
    pub const K5: f64 = 1.28;
    pub const K6: f64 = 12.0;
    pub const K: f64 = 1.8;
    pub const KAPPA: f64 = 13.0;
    pub const Q: i32 = 4;
    pub const K1_SAT: f64 = 0.52;
    pub const PSI: f64 = 0.1;
    pub const N: f64 = 1.0;
    pub const A: f64 = 4.0;
}

pub fn rhs_glycolytic(s: [f64; 7]) -> [f64; 7] {
    use glycolytic::*;
    let [s1, s2, s3, s4, s5, s6, s7] = s;
    let uptake = K1 * s1 * s6 / (1.0 + (s6 / K1_SAT).powi(Q));
    let v2 = K2 * s2 * (N - s5);
    let v3 = K3 * s3 * (A - s6);
    let v4 = K4 * s4 * s5;
    let v6 = K6 * s2 * s5;
    let exchange = KAPPA * (s4 - s7);
    [
        J0 - uptake,
        2.0 * uptake - v2 - v6,
        v2 - v3,
        v3 - v4 - exchange,
        v2 - v4 - v6,
        -2.0 * uptake + 2.0 * v3 - K5 * s6,
        PSI * exchange - K * s7,
    ]
}

pub fn rhs_hopf_augmented([mu, x, y]: [f64; 3]) -> [f64; 3] {
    let r2 = x * x + y * y;
    [0.0, mu * x + y - x * r2, -x + mu * y - y * r2]
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let d = Domain { lower, upper };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::config("domain bounds must be nonempty and of equal length"));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(format!("domain axis {i} needs lower < upper, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    /// Index of the equal-width stratum (out of `n`) holding `x` on `axis`.
    pub fn stratum(&self, axis: usize, n: usize, x: f64) -> usize {
        let (lo, hi) = (self.lower[axis], self.upper[axis]);
        let k = ((x - lo) / (hi - lo) * n as f64).floor();
        (k.max(0.0) as usize).min(n - 1)
    }
}

/// Mixes a base seed with a stream index (SplitMix64 finaliser), giving
/// independent seeds for table cells, data rows and resampling.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Latin hypercube sample: on every axis the `n` points occupy each of the
/// `n` equal-width strata exactly once.
pub fn lhs_sample(domain: &Domain, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    domain.validate()?;
    if n == 0 {
        return Err(Error::config("Latin hypercube sample size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; domain.dim()]; n];
    for axis in 0..domain.dim() {
        let (lo, hi) = (domain.lower[axis], domain.upper[axis]);
        let width = (hi - lo) / n as f64;
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (point, &k) in points.iter_mut().zip(&strata) {
            // redraw on the rare rounding that lands on a stratum edge
            let x = loop {
                let u: f64 = rng.gen();
                let x = lo + (k as f64 + u) * width;
                if x <= hi && domain.stratum(axis, n, x) == k {
                    break x;
                }
            };
            point[axis] = x;
        }
    }
    Ok(points)
}

/// Classical fixed-step RK4 from `t0` to `t1`.
pub fn reference_integrate<F: VectorField + ?Sized>(
    field: &F,
    phi0: &[f64],
    t0: f64,
    t1: f64,
    substeps: usize,
) -> Result<Vec<f64>> {
    if substeps == 0 {
        return Err(Error::contract("reference integration needs at least one substep"));
    }
    let h = (t1 - t0) / substeps as f64;
    let mut y = phi0.to_vec();
    let mut tmp = vec![0.0; y.len()];
    for step in 0..substeps {
        let t = t0 + step as f64 * h;
        let k1 = field.eval(&y, t)?;
        for i in 0..y.len() {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        let k2 = field.eval(&tmp, t + 0.5 * h)?;
        for i in 0..y.len() {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        let k3 = field.eval(&tmp, t + 0.5 * h)?;
        for i in 0..y.len() {
            tmp[i] = y[i] + h * k3[i];
        }
        let k4 = field.eval(&tmp, t + h)?;
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { segment: step, pair: None });
        }
    }
    Ok(y)
}

/// Default substep count for advancing data by `lag`: RK4 steps no wider
/// than 2.5e-4, which keeps the 4x-refinement change below 1e-8 relative on
/// all three benchmark systems.
pub fn default_substeps(lag: f64) -> usize {
    400usize.max((4000.0 * lag).ceil() as usize)
}

/// Snapshots of one trajectory, optionally with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Parameters held fixed along the series; appended to every state.
    pub params: Option<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>, params: Option<Vec<f64>>) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::contract("time series needs one state per time"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::contract("time series times must be strictly increasing"));
        }
        Ok(TimeSeries { times, states, params })
    }

    fn augmented(&self, j: usize) -> Vec<f64> {
        let mut s = self.states[j].clone();
        if let Some(mu) = &self.params {
            s.extend_from_slice(mu);
        }
        s
    }
}

/// Provenance of a pair set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub system: Option<String>,
    pub dt: Option<f64>,
    pub n: usize,
    pub seed: Option<u64>,
    pub substeps: Option<usize>,
    pub domain: Option<Domain>,
    /// Largest relative change of `Φ2` when re-integrated with 4x the substeps.
    pub generator_tolerance: Option<f64>,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPairSet {
    pub pairs: Vec<DataPair>,
    pub provenance: Provenance,
}

impl DataPairSet {
    pub fn new(pairs: Vec<DataPair>, provenance: Provenance) -> Result<Self> {
        if let Some(first) = pairs.first() {
            let d = first.dim();
            for (j, p) in pairs.iter().enumerate() {
                p.validate()
                    .map_err(|e| Error::contract(format!("pair {j}: {e}")))?;
                if p.dim() != d {
                    return Err(Error::contract(format!("pair {j} has dimension {}, expected {d}", p.dim())));
                }
            }
        }
        Ok(DataPairSet { pairs, provenance })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.pairs.first().map(DataPair::dim)
    }
}

fn relative_change(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Samples `n` initial states by LHS and advances each by `lag` with the
/// true system. Samples whose integration diverges are replaced by uniform
/// redraws; more than 10% replacements is an error.
pub fn generate_pairs(
    system: TrueSystem,
    domain: &Domain,
    n: usize,
    lag: f64,
    seed: u64,
    substeps: usize,
) -> Result<DataPairSet> {
    if !(lag > 0.0) || !lag.is_finite() {
        return Err(Error::config(format!("time lag must be positive, got {lag}")));
    }
    if domain.dim() != system.dim() {
        return Err(Error::config(format!(
            "domain has dimension {}, {} needs {}",
            domain.dim(),
            system,
            system.dim()
        )));
    }
    let starts = lhs_sample(domain, n, seed)?;
    let mut redraw = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7265_6a65_6374));
    let max_rejects = n / 10;
    let mut rejected = 0;
    let mut worst_change: f64 = 0.0;
    let mut pairs = Vec::with_capacity(n);
    for start in starts {
        let mut phi1 = start;
        let phi2 = loop {
            match reference_integrate(&system, &phi1, 0.0, lag, substeps) {
                Ok(end) => break end,
                Err(Error::Divergence { .. }) => {
                    rejected += 1;
                    if rejected > max_rejects {
                        return Err(Error::Eval(format!(
                            "{rejected} of {n} samples diverged while generating {system} data"
                        )));
                    }
                    phi1 = domain
                        .lower
                        .iter()
                        .zip(&domain.upper)
                        .map(|(lo, hi)| redraw.gen_range(*lo..=*hi))
                        .collect();
                }
                Err(e) => return Err(e),
            }
        };
        let fine = reference_integrate(&system, &phi1, 0.0, lag, 4 * substeps)?;
        worst_change = worst_change.max(relative_change(&phi2, &fine));
        pairs.push(DataPair::new(phi1, 0.0, phi2, lag)?);
    }
    let provenance = Provenance {
        system: Some(system.name().to_string()),
        dt: Some(lag),
        n,
        seed: Some(seed),
        substeps: Some(substeps),
        domain: Some(domain.clone()),
        generator_tolerance: Some(worst_change),
        rejected,
    };
    DataPairSet::new(pairs, provenance)
}

/// Re-organises trajectories into pairs `(Φ(t_j), t_j, Φ(t_{j+stride}), t_{j+stride})`.
pub fn pairs_from_series(series: &[TimeSeries], stride: usize) -> Result<DataPairSet> {
    if stride == 0 {
        return Err(Error::config("pair stride must be at least 1"));
    }
    let mut pairs = Vec::new();
    for (i, s) in series.iter().enumerate() {
        if s.times.len() < stride + 1 {
            return Err(Error::contract(format!(
                "series {i} has {} entries, stride {stride} needs at least {}",
                s.times.len(),
                stride + 1
            )));
        }
        for j in 0..s.times.len() - stride {
            pairs.push(DataPair::new(
                s.augmented(j),
                s.times[j],
                s.augmented(j + stride),
                s.times[j + stride],
            )?);
        }
    }
    let n = pairs.len();
    DataPairSet::new(
        pairs,
        Provenance {
            n,
            ..Provenance::default()
        },
    )
}
