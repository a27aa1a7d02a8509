//! Known-link single-index models `y = g(t) + ε`, their analytic scores,
//! and the oracle benchmarks built on them: the maximum likelihood estimator
//! on the sphere, the population information and the asymptotic covariance
//! of an efficient estimator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{complement_covariance, one_step_update, FisherInfo};
use crate::score::Score;
use crate::sphere::{chart_inverse, orthonormal_complement, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Sine,
    /// `g(t) = t + sin(t)`.
    CubicSmooth,
}

impl Link {
    pub const NAMES: [&'static str; 3] = ["identity", "sine", "cubic_smooth"];

    pub fn from_name(name: &str) -> Option<Link> {
        match name {
            "identity" => Some(Link::Identity),
            "sine" => Some(Link::Sine),
            "cubic_smooth" | "cubic-smooth" => Some(Link::CubicSmooth),
            _ => None,
        }
    }

    pub fn value(self, t: f64) -> f64 {
        match self {
            Link::Identity => t,
            Link::Sine => t.sin(),
            Link::CubicSmooth => t + t.sin(),
        }
    }

    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Sine => t.cos(),
            Link::CubicSmooth => 1.0 + t.cos(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLaw {
    Gaussian,
    Laplace,
    StudentT { nu: f64 },
}

impl ErrorLaw {
    pub const NAMES: [&'static str; 3] = ["gaussian", "laplace", "student_t"];

    /// Parses a law name; `nu` is used by `student_t`.
    pub fn from_name(name: &str, nu: f64) -> Option<ErrorLaw> {
        match name {
            "gaussian" => Some(ErrorLaw::Gaussian),
            "laplace" => Some(ErrorLaw::Laplace),
            "student_t" | "student-t" => Some(ErrorLaw::StudentT { nu }),
            _ => None,
        }
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, ErrorLaw::Laplace)
    }
}

/// A fully specified single-index model `y = g(t) + ε`, where `ε` has the
/// named law with scale `sigma_or_scale` (standard deviation for the
/// gaussian, `b` for the Laplace, the scale `s` of `s · t_ν`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub link: Link,
    pub error: ErrorLaw,
    pub sigma_or_scale: f64,
}

impl ModelSpec {
    pub fn new(link: Link, error: ErrorLaw, sigma_or_scale: f64) -> Self {
        Self {
            link,
            error,
            sigma_or_scale,
        }
    }

    pub fn gaussian_linear() -> Self {
        Self::new(Link::Identity, ErrorLaw::Gaussian, 1.0)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.sigma_or_scale > 0.0 && self.sigma_or_scale.is_finite()) {
            problems.push(format!(
                "model.sigma_or_scale must be positive, got {}",
                self.sigma_or_scale
            ));
        }
        if let ErrorLaw::StudentT { nu } = self.error {
            if !(nu > 0.0 && nu.is_finite()) {
                problems.push(format!("model.error.student_t.nu must be positive, got {nu}"));
            }
        }
        problems
    }

    /// `-f'(r)/f(r)` for the error density `f`.
    fn error_score(&self, r: f64) -> f64 {
        let s = self.sigma_or_scale;
        match self.error {
            ErrorLaw::Gaussian => r / (s * s),
            ErrorLaw::Laplace => {
                if r == 0.0 {
                    0.0
                } else {
                    r.signum() / s
                }
            }
            ErrorLaw::StudentT { nu } => (nu + 1.0) * r / (nu * s * s + r * r),
        }
    }

    fn error_log_density(&self, r: f64) -> f64 {
        let s = self.sigma_or_scale;
        match self.error {
            ErrorLaw::Gaussian => {
                -0.5 * (r / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            ErrorLaw::Laplace => -r.abs() / s - (2.0 * s).ln(),
            ErrorLaw::StudentT { nu } => {
                ln_gamma(0.5 * (nu + 1.0))
                    - ln_gamma(0.5 * nu)
                    - 0.5 * (nu * std::f64::consts::PI).ln()
                    - s.ln()
                    - 0.5 * (nu + 1.0) * (1.0 + (r / s).powi(2) / nu).ln()
            }
        }
    }

    /// `log η(y | t) = log f(y - g(t))`.
    pub fn log_density(&self, t: f64, y: f64) -> f64 {
        self.error_log_density(y - self.link.value(t))
    }

    /// `l(t, y) = ∂_t log η(y | t) = g'(t) · (-f'/f)(y - g(t))`.
    pub fn analytic_score(&self, t: f64, y: f64) -> f64 {
        self.link.derivative(t) * self.error_score(y - self.link.value(t))
    }

    pub fn sample_error<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let s = self.sigma_or_scale;
        match self.error {
            ErrorLaw::Gaussian => s * rng.sample::<f64, _>(StandardNormal),
            ErrorLaw::Laplace => {
                let e: f64 = rng.sample(Exp1);
                if rng.random::<bool>() {
                    s * e
                } else {
                    -s * e
                }
            }
            ErrorLaw::StudentT { nu } => {
                let d = StudentT::new(nu).expect("validated degrees of freedom");
                s * d.sample(rng)
            }
        }
    }

    /// `g(t) + ε`.
    pub fn sample_response<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> f64 {
        self.link.value(t) + self.sample_error(rng)
    }
}

impl Score for ModelSpec {
    fn score(&self, t: f64, y: f64) -> f64 {
        self.analytic_score(t, y)
    }
}

/// Stopping tolerance on `||Γ^T ∇|| / n`.
pub const MLE_GRADIENT_TOL: f64 = 1e-8;
pub const MLE_MAX_ITER: usize = 100;
const HESSIAN_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub direction: Direction,
    pub iterations: usize,
    /// `||Γ^T ∇|| / n` at the returned point.
    pub gradient_norm: f64,
    pub log_likelihood: f64,
}

fn log_likelihood(data: &Dataset, model: &ModelSpec, beta: &Direction) -> f64 {
    let t = data.index(beta);
    t.iter()
        .zip(data.y().iter())
        .map(|(&a, &b)| model.log_density(a, b))
        .sum()
}

/// Gradient of the log-likelihood in chart coordinates `α` around `anchor`.
fn chart_gradient(
    data: &Dataset,
    model: &ModelSpec,
    anchor: &Direction,
    basis: &crate::sphere::ComplementBasis,
    alpha: &DVector<f64>,
) -> Result<DVector<f64>> {
    let beta = chart_inverse(alpha, anchor, basis)?;
    let t = data.index(&beta);
    let l = DVector::from_iterator(
        data.n(),
        t.iter().zip(data.y().iter()).map(|(&a, &b)| model.analytic_score(a, b)),
    );
    let g = data.x().tr_mul(&l);
    // dβ/dα = Γ - anchor α^T / sqrt(1 - ||α||^2)
    let root = (1.0 - alpha.norm_squared()).sqrt();
    let along = anchor.as_vector().dot(&g);
    Ok(basis.coordinates(&g) - alpha * (along / root))
}

/// Maximizes `Σ log η(y_i | β^T x_i)` over the sphere.
///
/// Each iteration re-anchors the chart `β = Γ α + sqrt(1 - ||α||^2) anchor` at
/// the current iterate and takes a damped Newton step in `α`. The Hessian is
/// a central finite difference of the analytic gradient; when it is not
/// negative definite the step falls back to Fisher scoring with
/// `Γ^T (Σ x x^T l^2) Γ`.
pub fn mle_fit(data: &Dataset, model: &ModelSpec, init: &Direction) -> Result<MleFit> {
    let problems = model.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let n = data.n() as f64;
    let q = init.dim() - 1;
    let mut anchor = init.clone();
    let mut ll = log_likelihood(data, model, &anchor);
    let mut grad_norm = f64::INFINITY;
    for iter in 0..MLE_MAX_ITER {
        let basis = orthonormal_complement(&anchor);
        let zero = DVector::zeros(q);
        let grad = chart_gradient(data, model, &anchor, &basis, &zero)?;
        grad_norm = grad.norm() / n;
        if grad_norm < MLE_GRADIENT_TOL {
            return Ok(MleFit {
                direction: anchor,
                iterations: iter,
                gradient_norm: grad_norm,
                log_likelihood: ll,
            });
        }

        let mut hess = DMatrix::zeros(q, q);
        for k in 0..q {
            let mut e = DVector::zeros(q);
            e[k] = HESSIAN_STEP;
            let plus = chart_gradient(data, model, &anchor, &basis, &e)?;
            let minus = chart_gradient(data, model, &anchor, &basis, &(-e))?;
            hess.set_column(k, &((plus - minus) / (2.0 * HESSIAN_STEP)));
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let neg = -hess;
        let direction = match neg.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                let info = crate::estimator::info_matrix(data, &anchor, model)?;
                let r = basis.restrict(&info.matrix) * n;
                r.cholesky()
                    .ok_or(Error::SingularInformation { condition: f64::INFINITY })?
                    .solve(&grad)
            }
        };

        let mut scale = 1.0;
        let norm = direction.norm();
        if norm > 0.5 {
            scale = 0.5 / norm;
        }
        let tolerance = 1e-12 * (1.0 + ll.abs());
        let mut accepted = None;
        for _ in 0..40 {
            let alpha = &direction * scale;
            let candidate = chart_inverse(&alpha, &anchor, &basis)?;
            let cand_ll = log_likelihood(data, model, &candidate);
            if cand_ll >= ll - tolerance {
                accepted = Some((candidate, cand_ll));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((b, l)) => {
                anchor = b;
                ll = l;
            }
            None => break,
        }
    }
    Err(Error::NonConvergence {
        iterations: MLE_MAX_ITER,
        gradient_norm: grad_norm,
        last_iterate: anchor.as_slice().to_vec(),
    })
}

/// Monte Carlo estimate of `E[x x^T l^2(β^T x, y)]` with `x ~ N(0, I_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationInfo {
    pub matrix: DMatrix<f64>,
    /// Covariance of `x l(β^T x, y)`, centered by its sample mean.
    pub score_covariance: DMatrix<f64>,
    /// Batch-means standard error of `matrix`, Frobenius scale.
    pub mc_standard_error: f64,
    pub n_mc: usize,
}

const INFO_BATCHES: usize = 50;

pub fn population_info<R: Rng + ?Sized>(
    model: &ModelSpec,
    beta: &Direction,
    p: usize,
    n_mc: usize,
    rng: &mut R,
) -> PopulationInfo {
    assert_eq!(beta.dim(), p, "direction dimension must equal p");
    assert!(n_mc >= INFO_BATCHES, "need at least {INFO_BATCHES} draws");
    let mut total = DMatrix::zeros(p, p);
    let mut mean_score = DVector::zeros(p);
    let mut batch_sums: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p, p); INFO_BATCHES];
    let mut batch_counts = [0usize; INFO_BATCHES];
    let mut x = DVector::zeros(p);
    for i in 0..n_mc {
        for c in x.iter_mut() {
            *c = rng.sample(StandardNormal);
        }
        let t = beta.as_vector().dot(&x);
        let y = model.sample_response(t, rng);
        let l = model.analytic_score(t, y);
        let contrib = &x * x.transpose() * (l * l);
        let b = i * INFO_BATCHES / n_mc;
        batch_sums[b] += &contrib;
        batch_counts[b] += 1;
        total += contrib;
        mean_score += &x * l;
    }
    let nf = n_mc as f64;
    let matrix = &total / nf;
    let mean_score = mean_score / nf;
    let score_covariance = &matrix - &mean_score * mean_score.transpose();
    let mut var = 0.0;
    for (s, &c) in batch_sums.iter().zip(&batch_counts) {
        var += (s / c as f64 - &matrix).norm_squared();
    }
    let bf = INFO_BATCHES as f64;
    let mc_standard_error = (var / (bf - 1.0) / bf).sqrt();
    PopulationInfo {
        matrix: (&matrix + matrix.transpose()) * 0.5,
        score_covariance: (&score_covariance + score_covariance.transpose()) * 0.5,
        mc_standard_error,
        n_mc,
    }
}

/// Asymptotic covariance of an efficient estimator of the direction.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticCovariance {
    /// `Γ (Γ^T I Γ)^{-1} Γ^T / n`.
    pub simplified: DMatrix<f64>,
    /// `Γ (Γ^T I Γ)^{-1} Γ^T J Γ (Γ^T I Γ)^{-1} Γ^T / n` with `J` the score covariance.
    pub sandwich: DMatrix<f64>,
    /// `||sandwich - simplified||_F / ||simplified||_F`.
    pub relative_discrepancy: f64,
}

pub fn asymptotic_covariance(info: &PopulationInfo, beta: &Direction, n: usize) -> Result<AsymptoticCovariance> {
    let fi = FisherInfo {
        matrix: info.matrix.clone(),
    };
    let simplified = complement_covariance(&fi, beta, n)?;
    // simplified·n is Γ (Γ^T I Γ)^{-1} Γ^T
    let bread = &simplified * n as f64;
    let sandwich = &bread * &info.score_covariance * &bread / n as f64;
    let sandwich = (&sandwich + sandwich.transpose()) * 0.5;
    let relative_discrepancy = (&sandwich - &simplified).norm() / simplified.norm();
    Ok(AsymptoticCovariance {
        simplified,
        sandwich,
        relative_discrepancy,
    })
}

/// Newton step with the analytic score in place of the kernel estimate.
pub fn oracle_one_step(data: &Dataset, model: &ModelSpec, beta_n: &Direction) -> Result<Direction> {
    one_step_update(beta_n, data, model)
}
