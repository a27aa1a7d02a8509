//! One-step adaptive estimator of the index direction.
//!
//! Starting from the least-squares direction `β_n`, a single Newton step on
//! the sphere is taken for the estimating equation `Q_β Σ x_i l̂(β^T x_i, y_i) = 0`:
//!
//! ```text
//! β̂ = retract(β_n + Γ (Γ^T Ĩ Γ)^{-1} Γ^T s)
//! ```
//!
//! where `Γ` spans the complement of `β_n`, `Ĩ = n^{-1} Σ x_i x_i^T l̂_i^2`
//! and `s = n^{-1} Σ x_i l̂_i`. Both averages carry the `1/n`, which makes
//! the update a proper Newton step with `Ĩ` on the per-observation scale.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{unwhiten_direction, whiten, Dataset};
use crate::error::{Error, Result};
use crate::score::{fit_score, KernelSpec, Score};
use crate::sphere::{orthonormal_complement, retract, ComplementBasis, Direction};

/// Largest accepted condition number of `Γ^T Ĩ Γ`.
pub const MAX_CONDITION: f64 = 1e10;

/// Slope norms below this multiple of `sd(y)` are reported as a likely null model.
pub const NULL_SLOPE_RATIO: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub kernel: KernelSpec,
    pub use_discretization: bool,
    pub discretization_mesh_constant: f64,
    pub use_sample_splitting: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::default(),
            use_discretization: false,
            discretization_mesh_constant: 0.1,
            use_sample_splitting: true,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = self.kernel.validate();
        if !(self.discretization_mesh_constant > 0.0 && self.discretization_mesh_constant.is_finite()) {
            problems.push(format!(
                "fit.discretization_mesh_constant must be positive, got {}",
                self.discretization_mesh_constant
            ));
        }
        problems
    }
}

/// Per-observation information matrix `n^{-1} Σ x_i x_i^T l_i^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub matrix: DMatrix<f64>,
}

impl FisherInfo {
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.matrix.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }
}

/// Least-squares fit used as the starting direction.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub direction: Direction,
    pub slope: DVector<f64>,
    pub slope_norm: f64,
    /// Slope norm below `NULL_SLOPE_RATIO · sd(y)`: `y` looks unrelated to `x`.
    pub null_model_warning: bool,
}

/// Regresses `y` on `x` with an intercept and normalizes the slope.
pub fn ols_fit(data: &Dataset) -> Result<OlsFit> {
    let x = data.x();
    let n = data.n();
    let mean_x = x.row_sum().transpose() / n as f64;
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= mean_x.transpose();
    }
    let mean_y = data.y().sum() / n as f64;
    let yc = data.y().add_scalar(-mean_y);
    let gram = xc.tr_mul(&xc);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("least-squares normal equations are singular".into()))?;
    let slope = chol.solve(&xc.tr_mul(&yc));
    let slope_norm = slope.norm();
    let sd_y = (yc.norm_squared() / n as f64).sqrt();
    let direction = retract(&slope)?;
    Ok(OlsFit {
        direction,
        null_model_warning: slope_norm < NULL_SLOPE_RATIO * sd_y,
        slope,
        slope_norm,
    })
}

/// Normalized least-squares slope.
pub fn ols_direction(data: &Dataset) -> Result<Direction> {
    Ok(ols_fit(data)?.direction)
}

fn score_values<S: Score + ?Sized>(data: &Dataset, beta: &Direction, field: &S) -> DVector<f64> {
    let t = data.index(beta);
    DVector::from_iterator(
        data.n(),
        t.iter().zip(data.y().iter()).map(|(&a, &b)| field.score(a, b)),
    )
}

fn info_from_scores(x: &DMatrix<f64>, l: &DVector<f64>) -> Result<FisherInfo> {
    if l.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateInformation(
            "the score vanishes at every observation (everything trimmed?)".into(),
        ));
    }
    let mut weighted = x.clone();
    for (mut row, &li) in weighted.row_iter_mut().zip(l.iter()) {
        row *= li;
    }
    let m = weighted.tr_mul(&weighted) / x.nrows() as f64;
    Ok(FisherInfo {
        matrix: (&m + m.transpose()) * 0.5,
    })
}

/// `n^{-1} Σ x_i x_i^T l̂(β^T x_i, y_i)^2`.
pub fn info_matrix<S: Score + ?Sized>(data: &Dataset, beta: &Direction, field: &S) -> Result<FisherInfo> {
    let l = score_values(data, beta, field);
    info_from_scores(data.x(), &l)
}

/// `n^{-1} Σ x_i l̂(β^T x_i, y_i)`.
pub fn score_sum<S: Score + ?Sized>(data: &Dataset, beta: &Direction, field: &S) -> DVector<f64> {
    let l = score_values(data, beta, field);
    data.x().tr_mul(&l) / data.n() as f64
}

fn restricted_inverse(basis: &ComplementBasis, info: &FisherInfo) -> Result<DMatrix<f64>> {
    let r = basis.restrict(&info.matrix);
    let r = (&r + r.transpose()) * 0.5;
    let ev = SymmetricEigen::new(r.clone()).eigenvalues;
    let (min, max) = (ev.min(), ev.max());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(Error::SingularInformation { condition });
    }
    r.cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::SingularInformation { condition })
}

/// Pieces of a Newton step, before retraction to the sphere.
#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub start: Direction,
    /// `Γ (Γ^T Ĩ Γ)^{-1} Γ^T s`, orthogonal to `start` by construction.
    pub step: DVector<f64>,
    pub info: FisherInfo,
    pub score: DVector<f64>,
}

impl NewtonStep {
    /// `start + step`.
    pub fn raw(&self) -> DVector<f64> {
        self.start.as_vector() + &self.step
    }
}

/// Computes the one-step update from `beta_n` without retracting.
pub fn newton_step<S: Score + ?Sized>(beta_n: &Direction, data: &Dataset, field: &S) -> Result<NewtonStep> {
    let l = score_values(data, beta_n, field);
    let info = info_from_scores(data.x(), &l)?;
    let score = data.x().tr_mul(&l) / data.n() as f64;
    let basis = orthonormal_complement(beta_n);
    let inv = restricted_inverse(&basis, &info)?;
    let step = basis.embed(&(inv * basis.coordinates(&score)));
    Ok(NewtonStep {
        start: beta_n.clone(),
        step,
        info,
        score,
    })
}

/// One Newton step on the sphere from `beta_n`, retracted.
pub fn one_step_update<S: Score + ?Sized>(beta_n: &Direction, data: &Dataset, field: &S) -> Result<Direction> {
    let step = newton_step(beta_n, data, field)?;
    if step.step.iter().all(|v| *v == 0.0) {
        return Ok(beta_n.clone());
    }
    retract(&step.raw())
}

/// Rounds each coordinate to the grid of spacing `mesh_constant / sqrt(n)`
/// and normalizes. If every coordinate rounds to zero the input is returned.
pub fn discretize(beta: &Direction, n: usize, mesh_constant: f64) -> Direction {
    let spacing = mesh_constant / (n as f64).sqrt();
    let rounded = beta.as_vector().map(|c| (c / spacing).round() * spacing);
    retract(&rounded).unwrap_or_else(|_| beta.clone())
}

/// `Γ (Γ^T I Γ)^{-1} Γ^T / n`.
pub fn complement_covariance(info: &FisherInfo, beta: &Direction, n: usize) -> Result<DMatrix<f64>> {
    let basis = orthonormal_complement(beta);
    let inv = restricted_inverse(&basis, info)?;
    let c = basis.lift(&inv) / n as f64;
    Ok((&c + c.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostics {
    /// Fraction of update evaluations where either density estimate was trimmed.
    pub trim_fraction: f64,
    /// `(σ_1, σ_2)` of the score estimate used in the update (first fold when splitting).
    pub bandwidths: (f64, f64),
    pub trim_level: f64,
    pub split_sizes: Vec<usize>,
    pub ols_slope_norm: f64,
    pub null_model_warning: bool,
    pub discretized: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Estimate on the whitened predictor scale.
    pub beta_hat: Direction,
    /// Estimate in the original predictor units.
    pub beta_hat_original: Direction,
    /// Least-squares start, whitened scale.
    pub beta_init: Direction,
    pub beta_init_original: Direction,
    /// Information estimate at `beta_hat`.
    pub info: FisherInfo,
    /// Plug-in covariance of `beta_hat`, whitened scale.
    pub asymptotic_covariance: DMatrix<f64>,
    pub standard_errors: DVector<f64>,
    /// Delta-method standard errors of `beta_hat_original`.
    pub standard_errors_original: DVector<f64>,
    pub n: usize,
    pub diagnostics: FitDiagnostics,
    pub config: FitConfig,
}

/// Serialized form of a [`FitResult`].
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub beta_hat: Vec<f64>,
    pub beta_hat_original: Vec<f64>,
    pub beta_init: Vec<f64>,
    pub beta_init_original: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub std_errors_original: Vec<f64>,
    pub info_eigenvalues: Vec<f64>,
    pub trim_fraction: f64,
    pub n: usize,
    pub diagnostics: FitDiagnostics,
    pub config: FitConfig,
    pub seed: u64,
}

impl FitResult {
    pub fn report(&self) -> FitReport {
        FitReport {
            beta_hat: self.beta_hat.as_slice().to_vec(),
            beta_hat_original: self.beta_hat_original.as_slice().to_vec(),
            beta_init: self.beta_init.as_slice().to_vec(),
            beta_init_original: self.beta_init_original.as_slice().to_vec(),
            std_errors: self.standard_errors.as_slice().to_vec(),
            std_errors_original: self.standard_errors_original.as_slice().to_vec(),
            info_eigenvalues: self.info.eigenvalues(),
            trim_fraction: self.diagnostics.trim_fraction,
            n: self.n,
            diagnostics: self.diagnostics.clone(),
            config: self.config.clone(),
            seed: self.config.seed,
        }
    }
}

/// Full pipeline: whiten, least-squares start, optional discretization,
/// cross-fitted (or full-sample) Newton step, plug-in covariance, and
/// back-transformation to the original predictor units.
pub fn adaptive_fit(raw: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let (whitener, data) = whiten(raw).map_err(Error::at("whitening"))?;
    let n = data.n();
    let ols = ols_fit(&data).map_err(Error::at("initial estimate"))?;
    let beta_init = ols.direction.clone();
    let start = if cfg.use_discretization {
        discretize(&beta_init, n, cfg.discretization_mesh_constant)
    } else {
        beta_init.clone()
    };

    let t_all = data.index(&start);
    let fit_on = |rows: &[usize]| {
        let t: Vec<f64> = rows.iter().map(|&i| t_all[i]).collect();
        let y: Vec<f64> = rows.iter().map(|&i| data.y()[i]).collect();
        fit_score(&t, &y, cfg.kernel)
    };

    let (beta_hat, trim_fraction, bandwidths, trim_level, split_sizes) = if cfg.use_sample_splitting {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let (a, b) = perm.split_at(n / 2);
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        let mut raw_sum = DVector::zeros(data.p());
        let mut trimmed = 0.0;
        let mut first = None;
        for (train, eval) in [(&a, &b), (&b, &a)] {
            let field = fit_on(train).map_err(Error::at("score estimation"))?;
            let eval_data = data.select(eval);
            let step = newton_step(&start, &eval_data, &field).map_err(Error::at("one-step update"))?;
            raw_sum += step.raw();
            let t_eval: Vec<f64> = eval.iter().map(|&i| t_all[i]).collect();
            let y_eval: Vec<f64> = eval.iter().map(|&i| data.y()[i]).collect();
            trimmed += field.trim_fraction(&t_eval, &y_eval) * eval.len() as f64;
            first.get_or_insert((field.sigma1, field.sigma2, field.delta));
        }
        let (s1, s2, delta) = first.expect("two folds");
        let beta_hat = retract(&(raw_sum * 0.5)).map_err(Error::at("one-step update"))?;
        (beta_hat, trimmed / n as f64, (s1, s2), delta, vec![a.len(), b.len()])
    } else {
        let all: Vec<usize> = (0..n).collect();
        let field = fit_on(&all).map_err(Error::at("score estimation"))?;
        let beta_hat = one_step_update(&start, &data, &field).map_err(Error::at("one-step update"))?;
        let trim = field.trim_fraction(t_all.as_slice(), data.y().as_slice());
        (beta_hat, trim, (field.sigma1, field.sigma2), field.delta, vec![n])
    };

    let t_hat = data.index(&beta_hat);
    let field_hat = fit_score(t_hat.as_slice(), data.y().as_slice(), cfg.kernel)
        .map_err(Error::at("covariance estimation"))?;
    let info = info_matrix(&data, &beta_hat, &field_hat).map_err(Error::at("covariance estimation"))?;
    let covariance = complement_covariance(&info, &beta_hat, n).map_err(Error::at("covariance estimation"))?;
    let standard_errors = covariance.diagonal().map(|v| v.max(0.0).sqrt());

    let beta_hat_original = unwhiten_direction(&whitener, &beta_hat).map_err(Error::at("back-transformation"))?;
    let beta_init_original = unwhiten_direction(&whitener, &beta_init).map_err(Error::at("back-transformation"))?;
    // d/dβ retract(Aβ) = (I - b b^T) A / ||Aβ||
    let mapped = &whitener.transform * beta_hat.as_vector();
    let b = beta_hat_original.as_vector();
    let jac = (DMatrix::identity(b.len(), b.len()) - b * b.transpose()) * &whitener.transform / mapped.norm();
    let cov_original = &jac * &covariance * jac.transpose();
    let standard_errors_original = cov_original.diagonal().map(|v| v.max(0.0).sqrt());

    Ok(FitResult {
        beta_hat,
        beta_hat_original,
        beta_init,
        beta_init_original,
        info,
        asymptotic_covariance: covariance,
        standard_errors,
        standard_errors_original,
        n,
        diagnostics: FitDiagnostics {
            trim_fraction,
            bandwidths,
            trim_level,
            split_sizes,
            ols_slope_norm: ols.slope_norm,
            null_model_warning: ols.null_model_warning,
            discretized: cfg.use_discretization,
        },
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_linear(n: usize, beta0: &Direction, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = beta0.dim();
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal));
        let t = &x * beta0.as_vector();
        let y = t.map(|v| v + rng.sample::<f64, _>(StandardNormal));
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn ols_recovers_noiseless_direction() {
        let beta0 = Direction::normalized(&[1.0, -2.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(60, 3, |_, _| rng.sample(StandardNormal));
        let y = &x * beta0.as_vector();
        let (_, white) = whiten(&Dataset::new(x.clone(), y.clone()).unwrap()).unwrap();
        let fit = ols_fit(&Dataset::new(x, y).unwrap()).unwrap();
        assert!(fit.direction.angle_to(&beta0) < 1e-10);
        assert!(fit.direction.dot(&beta0) > 0.0);
        assert!(!fit.null_model_warning);
        assert!(ols_direction(&white).is_ok());
    }

    #[test]
    fn ols_flags_null_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400_000;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample(StandardNormal));
        let y = DVector::from_fn(n, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
        let fit = ols_fit(&Dataset::new(x, y).unwrap()).unwrap();
        assert_abs_diff_eq!(fit.direction.as_vector().norm(), 1.0, epsilon = 1e-12);
        assert!(fit.null_model_warning, "slope norm {}", fit.slope_norm);
    }

    #[test]
    fn zero_score_gives_degenerate_information() {
        let data = gaussian_linear(100, &Direction::axis(2, 0).unwrap(), 1);
        let beta = Direction::axis(2, 0).unwrap();
        let zero = |_: f64, _: f64| 0.0;
        assert!(matches!(info_matrix(&data, &beta, &zero), Err(Error::DegenerateInformation(_))));
        assert_eq!(score_sum(&data, &beta, &zero), DVector::zeros(2));
        assert!(one_step_update(&beta, &data, &zero).is_err());
    }

    #[test]
    fn information_is_quadratic_in_the_score() {
        let beta = Direction::normalized(&[1.0, 1.0, 1.0]).unwrap();
        let data = gaussian_linear(500, &beta, 2);
        let l = |t: f64, y: f64| y - t;
        let l3 = |t: f64, y: f64| 3.0 * (y - t);
        let a = info_matrix(&data, &beta, &l).unwrap().matrix;
        let b = info_matrix(&data, &beta, &l3).unwrap().matrix;
        assert_abs_diff_eq!(b, a * 9.0, epsilon = 1e-10);
    }

    #[test]
    fn newton_fixed_point_when_complement_score_vanishes() {
        // rows ±e_j with a constant score: the score sum vanishes while the
        // information is I/3
        let mut rows = Vec::new();
        for j in 0..3 {
            for s in [1.0, -1.0] {
                let mut r = [0.0; 3];
                r[j] = s;
                rows.extend_from_slice(&r);
            }
        }
        let x = DMatrix::from_row_slice(6, 3, &rows);
        let data = Dataset::new(x, DVector::from_element(6, 1.0)).unwrap();
        let beta = Direction::axis(3, 0).unwrap();
        let l = |_: f64, y: f64| y;
        assert_eq!(one_step_update(&beta, &data, &l).unwrap(), beta);
    }

    #[test]
    fn raw_step_is_orthogonal_to_start() {
        let beta0 = Direction::equiangular(4).unwrap();
        let data = gaussian_linear(800, &beta0, 3);
        let start = Direction::normalized(&[1.0, 0.6, 1.3, 0.9]).unwrap();
        let l = |t: f64, y: f64| y - t;
        let step = newton_step(&start, &data, &l).unwrap();
        assert_abs_diff_eq!(start.as_vector().dot(&step.step), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(start.as_vector().dot(&(step.raw() - start.as_vector())), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn discretize_examples() {
        let e1 = Direction::axis(2, 0).unwrap();
        assert_eq!(discretize(&e1, 100, 0.1), e1);
        // spacing 0.1 / sqrt(100) = 0.01
        let beta = Direction::normalized(&[0.6049, 0.7963]).unwrap();
        let d = discretize(&beta, 100, 0.1);
        assert_abs_diff_eq!(d.as_vector(), &DVector::from_column_slice(&[0.6, 0.8]), epsilon = 1e-12);
        // a mesh coarser than every coordinate rounds to zero: keep the input
        let b = Direction::normalized(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(discretize(&b, 1, 10.0), b);
    }

    #[test]
    fn adaptive_fit_is_deterministic_and_well_formed() {
        let beta0 = Direction::equiangular(3).unwrap();
        let data = gaussian_linear(1000, &beta0, 5);
        let cfg = FitConfig { seed: 17, ..FitConfig::default() };
        let a = adaptive_fit(&data, &cfg).unwrap();
        let b = adaptive_fit(&data, &cfg).unwrap();
        assert_eq!(a.beta_hat, b.beta_hat);
        assert_eq!(a.asymptotic_covariance, b.asymptotic_covariance);
        assert!(a.beta_hat_original.angle_to(&beta0) < 0.2);
        assert!((&a.asymptotic_covariance * a.beta_hat.as_vector()).norm() < 1e-8);
        let sym = &a.asymptotic_covariance - a.asymptotic_covariance.transpose();
        assert!(sym.norm() < 1e-12);
        assert!(a.standard_errors.iter().all(|s| *s > 0.0));
        assert_eq!(a.diagnostics.split_sizes, vec![500, 500]);
        let json = serde_json::to_value(a.report()).unwrap();
        for key in ["beta_hat", "beta_hat_original", "beta_init", "std_errors", "info_eigenvalues", "trim_fraction", "config", "seed"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn adaptive_fit_variants_run() {
        let beta0 = Direction::equiangular(3).unwrap();
        let data = gaussian_linear(600, &beta0, 6);
        let cfg = FitConfig {
            use_sample_splitting: false,
            use_discretization: true,
            ..FitConfig::default()
        };
        let r = adaptive_fit(&data, &cfg).unwrap();
        assert_eq!(r.diagnostics.split_sizes, vec![600]);
        assert!(r.beta_hat_original.angle_to(&beta0) < 0.25);
        let bad = FitConfig { discretization_mesh_constant: -1.0, ..FitConfig::default() };
        assert!(matches!(adaptive_fit(&data, &bad), Err(Error::Config(_))));
    }
}
