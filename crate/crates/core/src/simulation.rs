//! Simulated single-index data and the Monte Carlo harness.
//!
//! Every replication draws from its own generator, seeded from
//! `(master seed, n, replication)`, so results do not depend on how the
//! replications are scheduled across threads.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{adaptive_fit, ols_fit, FitConfig};
use crate::models::{mle_fit, oracle_one_step, ModelSpec};
use crate::score::{fit_score, score_l2_diagnostic, KernelSpec, Score};
use crate::sphere::{align_sign, orthonormal_complement, projection_complement, retract, Direction};

/// Distribution of the predictors. Every law is scaled to mean zero and
/// identity covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    Gaussian,
    /// Multivariate t with `nu > 2` degrees of freedom, a scale mixture of normals.
    EllipticalT { nu: f64 },
    /// Independent `U(-√3, √3)` coordinates; not elliptical.
    UniformCube,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorLaw {
    pub kind: LawKind,
    pub p: usize,
}

impl PredictorLaw {
    pub const NAMES: [&'static str; 3] = ["gaussian", "elliptical_t", "uniform_cube"];

    pub fn new(kind: LawKind, p: usize) -> Self {
        Self { kind, p }
    }

    pub fn from_name(name: &str, p: usize, nu: f64) -> Option<Self> {
        let kind = match name {
            "gaussian" => LawKind::Gaussian,
            "elliptical_t" | "elliptical-t" => LawKind::EllipticalT { nu },
            "uniform_cube" | "uniform-cube" => LawKind::UniformCube,
            _ => return None,
        };
        Some(Self { kind, p })
    }

    /// Whether `E[x | b^T x]` is linear in `b^T x` for every `b`.
    pub fn is_elliptical(&self) -> bool {
        !matches!(self.kind, LawKind::UniformCube)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.p < 2 {
            problems.push(format!("law.p must be at least 2, got {}", self.p));
        }
        if let LawKind::EllipticalT { nu } = self.kind {
            if !(nu > 2.0 && nu.is_finite()) {
                problems.push(format!("law.kind.elliptical_t.nu must exceed 2, got {nu}"));
            }
        }
        problems
    }

    /// Fills `row` with one draw.
    pub fn sample_into<R: Rng + ?Sized>(&self, row: &mut [f64], rng: &mut R) {
        match self.kind {
            LawKind::Gaussian => {
                for c in row.iter_mut() {
                    *c = rng.sample(StandardNormal);
                }
            }
            LawKind::EllipticalT { nu } => {
                for c in row.iter_mut() {
                    *c = rng.sample(StandardNormal);
                }
                let w: f64 = ChiSquared::new(nu).expect("validated nu").sample(rng);
                let scale = ((nu - 2.0) / w).sqrt();
                for c in row.iter_mut() {
                    *c *= scale;
                }
            }
            LawKind::UniformCube => {
                let r = 3f64.sqrt();
                for c in row.iter_mut() {
                    *c = rng.random_range(-r..r);
                }
            }
        }
    }
}

/// `n` rows drawn from `law`.
pub fn gen_predictors<R: Rng + ?Sized>(law: &PredictorLaw, n: usize, rng: &mut R) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, law.p);
    let mut row = vec![0.0; law.p];
    for i in 0..n {
        law.sample_into(&mut row, rng);
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    x
}

/// Draws `x` from `law` and `y` from `model` at `t = β_0^T x`.
pub fn gen_dataset<R: Rng + ?Sized>(
    model: &ModelSpec,
    law: &PredictorLaw,
    beta0: &Direction,
    n: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if beta0.dim() != law.p {
        return Err(Error::Config(vec![format!(
            "beta0 has {} coordinates but the law has p = {}",
            beta0.dim(),
            law.p
        )]));
    }
    let x = gen_predictors(law, n, rng);
    let t = &x * beta0.as_vector();
    let y = DVector::from_iterator(n, t.iter().map(|&v| model.sample_response(v, rng)));
    Dataset::new(x, y)
}

/// Mixes a master seed with two indices (splitmix64 finalizer).
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(master) ^ a) ^ b.rotate_left(32))
}

/// Built-in functions `κ(t, y)` for the estimating-equation check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kappa {
    Constant,
    /// `t · y`
    Ty,
    /// `y^3`
    YCubed,
    /// `t^2 · y`
    T2y,
    /// The model's analytic score.
    TrueScore,
}

impl Kappa {
    pub const ALL: [Kappa; 5] = [Kappa::Constant, Kappa::Ty, Kappa::YCubed, Kappa::T2y, Kappa::TrueScore];

    pub fn name(self) -> &'static str {
        match self {
            Kappa::Constant => "constant",
            Kappa::Ty => "ty",
            Kappa::YCubed => "y_cubed",
            Kappa::T2y => "t2y",
            Kappa::TrueScore => "true_score",
        }
    }

    pub fn from_name(name: &str) -> Option<Kappa> {
        Kappa::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn eval(self, model: &ModelSpec, t: f64, y: f64) -> f64 {
        match self {
            Kappa::Constant => 1.0,
            Kappa::Ty => t * y,
            Kappa::YCubed => y * y * y,
            Kappa::T2y => t * t * y,
            Kappa::TrueScore => model.analytic_score(t, y),
        }
    }
}

impl fmt::Display for Kappa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Values of `κ` beyond this magnitude are clipped.
pub const KAPPA_CLIP: f64 = 1e6;
const RESIDUAL_BATCHES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lemma1Residual {
    /// `||Q_β mean(x κ(β^T x, y))||`.
    pub residual_norm: f64,
    /// Batch-means standard error, `sqrt(trace Cov)` of the projected mean.
    pub mc_se: f64,
    pub ratio: f64,
    pub n_mc: usize,
    /// Number of draws where `|κ|` exceeded the clip level.
    pub clipped: usize,
}

/// Monte Carlo estimate of `Q_β E[x κ(β^T x, y)]` with `(x, y)` drawn from
/// `law` and `model` at the true direction `beta`.
pub fn lemma1_residual<K, R>(
    kappa: &K,
    beta: &Direction,
    model: &ModelSpec,
    law: &PredictorLaw,
    n_mc: usize,
    rng: &mut R,
) -> Lemma1Residual
where
    K: Score + ?Sized,
    R: Rng + ?Sized,
{
    assert!(n_mc >= RESIDUAL_BATCHES, "need at least {RESIDUAL_BATCHES} draws");
    assert_eq!(beta.dim(), law.p, "direction dimension must equal p");
    let p = law.p;
    let q = projection_complement(beta);
    let b = beta.as_slice();
    let mut row = vec![0.0; p];
    let mut batch = vec![DVector::<f64>::zeros(p); RESIDUAL_BATCHES];
    let mut counts = [0usize; RESIDUAL_BATCHES];
    let mut clipped = 0;
    for i in 0..n_mc {
        law.sample_into(&mut row, rng);
        let t: f64 = row.iter().zip(b).map(|(a, c)| a * c).sum();
        let y = model.sample_response(t, rng);
        let mut k = kappa.score(t, y);
        if !(k.abs() <= KAPPA_CLIP) {
            clipped += 1;
            k = if k.is_nan() { 0.0 } else { k.clamp(-KAPPA_CLIP, KAPPA_CLIP) };
        }
        let slot = i * RESIDUAL_BATCHES / n_mc;
        counts[slot] += 1;
        for (acc, v) in batch[slot].iter_mut().zip(&row) {
            *acc += v * k;
        }
    }
    let means: Vec<DVector<f64>> = batch
        .iter()
        .zip(&counts)
        .map(|(s, &c)| &q * (s / c as f64))
        .collect();
    let total: DVector<f64> = batch.iter().fold(DVector::zeros(p), |a, s| a + s) / n_mc as f64;
    let residual = &q * total;
    let bf = RESIDUAL_BATCHES as f64;
    let center = means.iter().fold(DVector::zeros(p), |a, m| a + m) / bf;
    let var: f64 = means.iter().map(|m| (m - &center).norm_squared()).sum::<f64>() / (bf - 1.0);
    let mc_se = (var / bf).sqrt();
    let residual_norm = residual.norm();
    Lemma1Residual {
        residual_norm,
        mc_se,
        ratio: if mc_se > 0.0 { residual_norm / mc_se } else if residual_norm == 0.0 { 0.0 } else { f64::INFINITY },
        n_mc,
        clipped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Normalized least-squares slope.
    Ols,
    /// One-step estimator with the kernel score.
    Adaptive,
    /// One-step estimator with the analytic score.
    OracleOneStep,
    /// Maximum likelihood with the model known.
    Mle,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ols => "ols",
            Estimator::Adaptive => "adaptive",
            Estimator::OracleOneStep => "oracle_one_step",
            Estimator::Mle => "mle",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::Ols, Estimator::Adaptive, Estimator::OracleOneStep, Estimator::Mle]
}

/// Monte Carlo experiment. `beta0` defaults to `(1, ..., 1)/sqrt(p)` and is
/// normalized when given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub model: ModelSpec,
    pub law: PredictorLaw,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta0: Option<Vec<f64>>,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub seed: u64,
}

/// Cells in which more than this fraction of replications fail abort the run.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

impl McConfig {
    /// Every problem with the configuration, one message per field.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = self.model.validate();
        problems.extend(self.law.validate());
        problems.extend(self.fit.validate());
        if self.replications < 2 {
            problems.push(format!("replications must be at least 2, got {}", self.replications));
        }
        if self.n_grid.is_empty() {
            problems.push("n_grid must not be empty".into());
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            problems.push(format!("n_grid must be strictly increasing, got {:?}", self.n_grid));
        }
        let min_n = (self.law.p + 2).max(40);
        if let Some(&n) = self.n_grid.iter().find(|&&n| n < min_n) {
            problems.push(format!("n_grid entries must be at least {min_n}, got {n}"));
        }
        if self.estimators.is_empty() {
            problems.push("estimators must not be empty".into());
        }
        if let Some(b) = &self.beta0 {
            if b.len() != self.law.p {
                problems.push(format!("beta0 has {} coordinates but law.p = {}", b.len(), self.law.p));
            } else if retract(&DVector::from_column_slice(b)).is_err() {
                problems.push("beta0 must be a nonzero finite vector".into());
            }
        }
        problems
    }

    pub fn beta0(&self) -> Result<Direction> {
        match &self.beta0 {
            Some(b) => Direction::normalized(b),
            None => Direction::equiangular(self.law.p),
        }
    }
}

/// Summary of one estimator at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub estimator: Estimator,
    pub n: usize,
    pub successes: usize,
    pub failures: usize,
    pub median_angular_error: f64,
    pub q25_angular_error: f64,
    pub q75_angular_error: f64,
    /// Mean of `sqrt(n) Γ_0^T (β̂ - β_0)`.
    pub bias: Vec<f64>,
    /// Empirical covariance of `sqrt(n) Γ_0^T (β̂ - β_0)`.
    pub covariance: Vec<Vec<f64>>,
    pub trace_covariance: f64,
    /// `trace_covariance / trace_covariance(mle)` at the same `n`.
    pub efficiency_ratio: Option<f64>,
    /// First few failure messages.
    pub failure_messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub config: McConfig,
    pub beta0: Vec<f64>,
    pub cells: Vec<CellSummary>,
    /// Least-squares slope of log median angular error against log n.
    pub rate_slopes: BTreeMap<Estimator, f64>,
    /// Replication seeds per sample size, in replication order.
    pub seeds: BTreeMap<usize, Vec<u64>>,
}

impl McReport {
    pub fn cell(&self, estimator: Estimator, n: usize) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.estimator == estimator && c.n == n)
    }

    /// Flat CSV: `estimator,n,statistic,value`; rate slopes use `n = all`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimator,n,statistic,value\n");
        let mut row = |e: &str, n: &str, s: &str, v: f64| {
            out.push_str(&format!("{e},{n},{s},{v}\n"));
        };
        for c in &self.cells {
            let (e, n) = (c.estimator.name(), c.n.to_string());
            row(e, &n, "successes", c.successes as f64);
            row(e, &n, "failures", c.failures as f64);
            row(e, &n, "median_angular_error", c.median_angular_error);
            row(e, &n, "q25_angular_error", c.q25_angular_error);
            row(e, &n, "q75_angular_error", c.q75_angular_error);
            row(e, &n, "iqr_angular_error", c.q75_angular_error - c.q25_angular_error);
            for (k, b) in c.bias.iter().enumerate() {
                row(e, &n, &format!("bias_{}", k + 1), *b);
            }
            for (i, r) in c.covariance.iter().enumerate() {
                for (j, v) in r.iter().enumerate() {
                    row(e, &n, &format!("cov_{}_{}", i + 1, j + 1), *v);
                }
            }
            row(e, &n, "trace_covariance", c.trace_covariance);
            if let Some(r) = c.efficiency_ratio {
                row(e, &n, "efficiency_ratio", r);
            }
        }
        for (e, s) in &self.rate_slopes {
            row(e.name(), "all", "rate_slope", *s);
        }
        out
    }
}

/// `(angular error, Γ_0^T (β̂ - β_0))` for one estimate, sign-aligned to `β_0`.
fn deviation(estimate: &Direction, beta0: &Direction, basis: &crate::sphere::ComplementBasis) -> (f64, DVector<f64>) {
    let aligned = align_sign(estimate, beta0);
    let angle = aligned.angle_to(beta0);
    let dev = basis.coordinates(&(aligned.as_vector() - beta0.as_vector()));
    (angle, dev)
}

type Outcome = std::result::Result<(f64, DVector<f64>), String>;

fn run_replication(cfg: &McConfig, beta0: &Direction, n: usize, seed: u64) -> Vec<Outcome> {
    let basis = orthonormal_complement(beta0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = match gen_dataset(&cfg.model, &cfg.law, beta0, n, &mut rng) {
        Ok(d) => d,
        Err(e) => return cfg.estimators.iter().map(|_| Err(e.to_string())).collect(),
    };
    // Least squares in the original units: the same direction the whitened
    // fit maps back to.
    let ols = ols_fit(&data).map(|f| f.direction);
    cfg.estimators
        .iter()
        .map(|est| {
            let estimate = match est {
                Estimator::Ols => ols.as_ref().map(Clone::clone).map_err(|e| Error::Degenerate(e.to_string())),
                Estimator::Adaptive => {
                    let fit_cfg = FitConfig {
                        seed: derive_seed(seed, 1, cfg.fit.seed),
                        ..cfg.fit.clone()
                    };
                    adaptive_fit(&data, &fit_cfg).map(|r| r.beta_hat_original)
                }
                Estimator::OracleOneStep => ols
                    .as_ref()
                    .map_err(|e| Error::Degenerate(e.to_string()))
                    .and_then(|b| oracle_one_step(&data, &cfg.model, b)),
                Estimator::Mle => ols
                    .as_ref()
                    .map_err(|e| Error::Degenerate(e.to_string()))
                    .and_then(|b| mle_fit(&data, &cfg.model, b).map(|f| f.direction)),
            };
            estimate
                .map(|b| deviation(&b, beta0, &basis))
                .map_err(|e| e.to_string())
        })
        .collect()
}

/// Type-7 sample quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Least-squares slope of `ys` on `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx > 0.0 {
        Some(sxy / sxx)
    } else {
        None
    }
}

/// Empirical covariance (divisor `k - 1`) of the rows of `v`.
pub fn empirical_covariance(v: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let k = v.len();
    let d = v.first().map_or(0, |r| r.len());
    let mean = v.iter().fold(DVector::zeros(d), |a, r| a + r) / k as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in v {
        let c = r - &mean;
        cov += &c * c.transpose();
    }
    if k > 1 {
        cov /= (k - 1) as f64;
    }
    (mean, cov)
}

fn summarize(estimator: Estimator, n: usize, outcomes: &[&Outcome]) -> CellSummary {
    let mut angles = Vec::new();
    let mut devs = Vec::new();
    let mut failure_messages = Vec::new();
    let mut failures = 0;
    for o in outcomes {
        match o {
            Ok((a, d)) => {
                angles.push(*a);
                devs.push(d * (n as f64).sqrt());
            }
            Err(msg) => {
                failures += 1;
                if failure_messages.len() < 5 {
                    failure_messages.push(msg.clone());
                }
            }
        }
    }
    angles.sort_by(f64::total_cmp);
    let (mean, cov) = empirical_covariance(&devs);
    CellSummary {
        estimator,
        n,
        successes: angles.len(),
        failures,
        median_angular_error: quantile(&angles, 0.5),
        q25_angular_error: quantile(&angles, 0.25),
        q75_angular_error: quantile(&angles, 0.75),
        bias: mean.iter().copied().collect(),
        covariance: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        trace_covariance: cov.trace(),
        efficiency_ratio: None,
        failure_messages,
    }
}

/// Runs every requested estimator on `replications` datasets per sample size.
///
/// Failed fits are excluded from the summaries and counted; the run aborts
/// if more than 20% of the replications of any cell fail.
pub fn run_monte_carlo(cfg: &McConfig) -> Result<McReport> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let beta0 = cfg.beta0()?;
    let tasks: Vec<(usize, usize, u64)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replications).map(move |r| (n, r)))
        .map(|(n, r)| (n, r, derive_seed(cfg.seed, n as u64, r as u64)))
        .collect();
    let results: Vec<Vec<Outcome>> = tasks
        .par_iter()
        .map(|&(n, _, seed)| run_replication(cfg, &beta0, n, seed))
        .collect();

    let mut cells = Vec::new();
    let mut seeds = BTreeMap::new();
    for &n in &cfg.n_grid {
        let idx: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i].0 == n).collect();
        seeds.insert(n, idx.iter().map(|&i| tasks[i].2).collect());
        let mut row: Vec<CellSummary> = cfg
            .estimators
            .iter()
            .enumerate()
            .map(|(k, &est)| {
                let outs: Vec<&Outcome> = idx.iter().map(|&i| &results[i][k]).collect();
                summarize(est, n, &outs)
            })
            .collect();
        for c in &row {
            if c.failures as f64 > MAX_FAILURE_FRACTION * cfg.replications as f64 {
                return Err(Error::TooManyFailures {
                    estimator: c.estimator.name().into(),
                    n,
                    failed: c.failures,
                    total: cfg.replications,
                });
            }
        }
        if let Some(mle_trace) = row.iter().find(|c| c.estimator == Estimator::Mle).map(|c| c.trace_covariance) {
            for c in &mut row {
                c.efficiency_ratio = Some(c.trace_covariance / mle_trace);
            }
        }
        cells.extend(row);
    }

    let mut rate_slopes = BTreeMap::new();
    for &est in &cfg.estimators {
        let (xs, ys): (Vec<f64>, Vec<f64>) = cells
            .iter()
            .filter(|c| c.estimator == est && c.median_angular_error > 0.0)
            .map(|c| ((c.n as f64).ln(), c.median_angular_error.ln()))
            .unzip();
        if let Some(s) = ls_slope(&xs, &ys) {
            rate_slopes.insert(est, s);
        }
    }

    Ok(McReport {
        config: cfg.clone(),
        beta0: beta0.as_slice().to_vec(),
        cells,
        rate_slopes,
        seeds,
    })
}

/// Experiment for the `E[||x||^2 (l̂ - l)^2]` convergence check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreDiagConfig {
    pub model: ModelSpec,
    pub law: PredictorLaw,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta0: Option<Vec<f64>>,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    #[serde(default)]
    pub kernel: KernelSpec,
    /// Size of the independent evaluation sample, shared across the grid
    /// within a replication.
    pub eval_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ScoreDiagConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = self.model.validate();
        problems.extend(self.law.validate());
        problems.extend(self.kernel.validate());
        if self.n_grid.is_empty() {
            problems.push("n_grid must not be empty".into());
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            problems.push(format!("n_grid must be strictly increasing, got {:?}", self.n_grid));
        }
        if let Some(&n) = self.n_grid.iter().find(|&&n| n < 10) {
            problems.push(format!("n_grid entries must be at least 10, got {n}"));
        }
        if self.replications < 1 {
            problems.push("replications must be at least 1".into());
        }
        if self.eval_size < 1 {
            problems.push("eval_size must be at least 1".into());
        }
        if let Some(b) = &self.beta0 {
            if b.len() != self.law.p {
                problems.push(format!("beta0 has {} coordinates but law.p = {}", b.len(), self.law.p));
            }
        }
        problems
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreDiagReport {
    pub n_grid: Vec<usize>,
    /// `values[r][k]`: diagnostic of replication `r` at `n_grid[k]`.
    pub values: Vec<Vec<f64>>,
    pub mean_by_n: Vec<f64>,
    /// Slope of log mean diagnostic against log n; absent for a single-point grid.
    pub slope: Option<f64>,
    /// Fraction of replications whose values strictly decrease along the grid.
    pub fraction_decreasing: f64,
}

/// Fits the score on `n` draws at the true index and evaluates the weighted
/// squared error against the analytic score on an independent sample.
pub fn score_diagnostic_curve(cfg: &ScoreDiagConfig) -> Result<ScoreDiagReport> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let beta0 = match &cfg.beta0 {
        Some(b) => Direction::normalized(b)?,
        None => Direction::equiangular(cfg.law.p)?,
    };
    let values: Vec<Vec<f64>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX, r as u64));
            let eval = gen_dataset(&cfg.model, &cfg.law, &beta0, cfg.eval_size.max(cfg.law.p + 2), &mut eval_rng)?;
            cfg.n_grid
                .iter()
                .map(|&n| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, n as u64, r as u64));
                    let train = gen_dataset(&cfg.model, &cfg.law, &beta0, n, &mut rng)?;
                    let t = train.index(&beta0);
                    let field = fit_score(t.as_slice(), train.y().as_slice(), cfg.kernel)?;
                    Ok(score_l2_diagnostic(&field, &cfg.model, eval.x(), eval.y(), &beta0))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let k = cfg.n_grid.len();
    let mean_by_n: Vec<f64> = (0..k)
        .map(|j| values.iter().map(|v| v[j]).sum::<f64>() / values.len() as f64)
        .collect();
    let xs: Vec<f64> = cfg.n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = mean_by_n.iter().map(|v| v.ln()).collect();
    let slope = if ys.iter().all(|v| v.is_finite()) { ls_slope(&xs, &ys) } else { None };
    let decreasing = values.iter().filter(|v| v.windows(2).all(|w| w[1] < w[0])).count();
    Ok(ScoreDiagReport {
        n_grid: cfg.n_grid.clone(),
        values,
        mean_by_n,
        slope,
        fraction_decreasing: decreasing as f64 / cfg.replications as f64,
    })
}
