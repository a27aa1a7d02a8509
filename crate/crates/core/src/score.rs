//! Kernel estimate of the score `l(t, y) = ∂_t log η(y | t)`.
//!
//! With `h` the joint density of `(T, Y)` and `g` the density of `T`,
//! `l = ∂_t h / h - ∂_t g / g`. Both log-derivatives are estimated with
//! product triweight kernels and trimmed to zero wherever the density
//! estimate does not exceed a cutoff `δ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::Direction;

/// Normalizing constant of the triweight kernel.
const TRIWEIGHT_C: f64 = 35.0 / 32.0;

/// Anything that can be evaluated as a score `(t, y) -> l(t, y)`.
pub trait Score: Sync {
    fn score(&self, t: f64, y: f64) -> f64;
}

impl<F> Score for F
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    fn score(&self, t: f64, y: f64) -> f64 {
        self(t, y)
    }
}

#[inline]
fn triweight(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let a = 1.0 - u * u;
    TRIWEIGHT_C * a * a * a
}

#[inline]
fn triweight_deriv(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let a = 1.0 - u * u;
    -6.0 * TRIWEIGHT_C * u * a * a
}

/// Product triweight kernel `∏ (35/32)(1 - u_j^2)^3 1{|u_j| <= 1}`.
///
/// The triweight is twice continuously differentiable with compact
/// support. Any dimension is accepted; the estimator only uses `d = 1, 2`.
pub fn kernel_value(u: &[f64]) -> f64 {
    u.iter().map(|&c| triweight(c)).product()
}

fn check_point(samples: &DMatrix<f64>, point: &[f64]) {
    assert_eq!(
        samples.ncols(),
        point.len(),
        "sample dimension and point dimension differ"
    );
}

/// Kernel density estimate `(m σ^d)^{-1} Σ_i w((point - s_i) / σ)` over the
/// rows `s_i` of the `m x d` matrix `samples`.
pub fn kde(samples: &DMatrix<f64>, point: &[f64], sigma: f64) -> f64 {
    check_point(samples, point);
    let (m, d) = samples.shape();
    let mut sum = 0.0;
    for i in 0..m {
        let mut k = 1.0;
        for j in 0..d {
            k *= triweight((point[j] - samples[(i, j)]) / sigma);
            if k == 0.0 {
                break;
            }
        }
        sum += k;
    }
    sum / (m as f64 * sigma.powi(d as i32))
}

/// Exact partial derivative of [`kde`] with respect to `point[0]`.
pub fn kde_partial1(samples: &DMatrix<f64>, point: &[f64], sigma: f64) -> f64 {
    check_point(samples, point);
    let (m, d) = samples.shape();
    let mut sum = 0.0;
    for i in 0..m {
        let mut k = triweight_deriv((point[0] - samples[(i, 0)]) / sigma);
        for j in 1..d {
            if k == 0.0 {
                break;
            }
            k *= triweight((point[j] - samples[(i, j)]) / sigma);
        }
        sum += k;
    }
    sum / (m as f64 * sigma.powi(d as i32 + 1))
}

/// `kde_partial1 / kde` where `kde > delta`, zero elsewhere.
pub fn trimmed_log_deriv(samples: &DMatrix<f64>, point: &[f64], sigma: f64, delta: f64) -> f64 {
    let density = kde(samples, point, sigma);
    if density > delta {
        kde_partial1(samples, point, sigma) / density
    } else {
        0.0
    }
}

/// Tuning constants of the score estimate. Bandwidths and the trim level are
/// derived from these and the training size `m`:
/// `σ_d = bandwidth_constant · s_d · m^{-1/(d+4)}` and
/// `δ = trim_constant · m^{-trim_exponent}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub bandwidth_constant: f64,
    pub trim_constant: f64,
    pub trim_exponent: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            bandwidth_constant: 2.5,
            trim_constant: 0.01,
            trim_exponent: 0.1,
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.bandwidth_constant > 0.0 && self.bandwidth_constant.is_finite()) {
            problems.push(format!(
                "kernel.bandwidth_constant must be positive, got {}",
                self.bandwidth_constant
            ));
        }
        if !(self.trim_constant > 0.0 && self.trim_constant.is_finite()) {
            problems.push(format!(
                "kernel.trim_constant must be positive, got {}",
                self.trim_constant
            ));
        }
        if !(self.trim_exponent > 0.0 && self.trim_exponent < 0.5) {
            problems.push(format!(
                "kernel.trim_exponent must lie in (0, 1/2), got {}",
                self.trim_exponent
            ));
        }
        problems
    }

    /// Bandwidth in standardized units for a `d`-dimensional estimate on `m` points.
    pub fn unit_bandwidth(&self, m: usize, d: u32) -> f64 {
        self.bandwidth_constant * (m as f64).powf(-1.0 / (d as f64 + 4.0))
    }

    pub fn trim_level(&self, m: usize) -> f64 {
        self.trim_constant * (m as f64).powf(-self.trim_exponent)
    }
}

/// Both halves of a score evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParts {
    /// Estimate of `∂_t h / h`, zero when trimmed.
    pub zeta: f64,
    /// Estimate of `∂_t g / g`, zero when trimmed.
    pub xi: f64,
    pub joint_trimmed: bool,
    pub marginal_trimmed: bool,
}

impl ScoreParts {
    /// `ζ̂ - ξ̂`, or zero when either density is trimmed: an observation in
    /// a low-density region drops out instead of keeping one half of the
    /// difference.
    pub fn value(&self) -> f64 {
        if self.joint_trimmed || self.marginal_trimmed {
            0.0
        } else {
            self.zeta - self.xi
        }
    }
}

/// A fitted score estimate `l̂(t, y) = ζ̂(t, y) - ξ̂(t)`.
///
/// Both coordinates are standardized by their training mean and standard
/// deviation before smoothing, so one bandwidth serves both axes of the
/// joint estimate and the trim level compares densities in standardized
/// units. Training points are kept sorted along `t` so that an evaluation
/// only visits the points inside the kernel support.
#[derive(Debug, Clone)]
pub struct ScoreField {
    train_t: Vec<f64>,
    train_y: Vec<f64>,
    /// Bandwidth of `ĝ` in `t` units.
    pub sigma1: f64,
    /// Bandwidth of `ĥ`, geometric mean of the per-axis bandwidths.
    pub sigma2: f64,
    pub delta: f64,
    pub kernel: KernelSpec,
    t_center: f64,
    t_scale: f64,
    y_center: f64,
    y_scale: f64,
    h1: f64,
    h2: f64,
    // standardized training points sorted by u
    u_sorted: Vec<f64>,
    v_by_u: Vec<f64>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m;
    (mean, var.sqrt())
}

/// Fits `l̂` on index values `train_t` and responses `train_y`.
pub fn fit_score(train_t: &[f64], train_y: &[f64], spec: KernelSpec) -> Result<ScoreField> {
    if train_t.len() != train_y.len() {
        return Err(Error::Degenerate(format!(
            "{} index values but {} responses",
            train_t.len(),
            train_y.len()
        )));
    }
    let m = train_t.len();
    if m < 10 {
        return Err(Error::Degenerate(format!(
            "score estimation needs at least 10 training points, got {m}"
        )));
    }
    if let Some(msg) = spec.validate().into_iter().next() {
        return Err(Error::Config(vec![msg]));
    }
    if train_t.iter().chain(train_y).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite training values".into()));
    }
    let (t_center, t_scale) = mean_sd(train_t);
    let (y_center, y_scale) = mean_sd(train_y);
    if !(t_scale > 1e-12 * (1.0 + t_center.abs())) {
        return Err(Error::Degenerate("index values have zero variance".into()));
    }
    if !(y_scale > 1e-12 * (1.0 + y_center.abs())) {
        return Err(Error::Degenerate("responses have zero variance".into()));
    }

    let mut order: Vec<usize> = (0..m).collect();
    let u: Vec<f64> = train_t.iter().map(|t| (t - t_center) / t_scale).collect();
    order.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
    let u_sorted: Vec<f64> = order.iter().map(|&i| u[i]).collect();
    let v_by_u: Vec<f64> = order
        .iter()
        .map(|&i| (train_y[i] - y_center) / y_scale)
        .collect();

    let h1 = spec.unit_bandwidth(m, 1);
    let h2 = spec.unit_bandwidth(m, 2);
    Ok(ScoreField {
        train_t: train_t.to_vec(),
        train_y: train_y.to_vec(),
        sigma1: h1 * t_scale,
        sigma2: h2 * (t_scale * y_scale).sqrt(),
        delta: spec.trim_level(m),
        kernel: spec,
        t_center,
        t_scale,
        y_center,
        y_scale,
        h1,
        h2,
        u_sorted,
        v_by_u,
    })
}

impl ScoreField {
    pub fn train_t(&self) -> &[f64] {
        &self.train_t
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y
    }

    pub fn m(&self) -> usize {
        self.train_t.len()
    }

    fn window(&self, u: f64, h: f64) -> std::ops::Range<usize> {
        let lo = self.u_sorted.partition_point(|&s| s <= u - h);
        let hi = self.u_sorted.partition_point(|&s| s < u + h);
        lo..hi.max(lo)
    }

    /// Evaluates both halves of the estimate at `(t, y)`.
    pub fn parts(&self, t: f64, y: f64) -> ScoreParts {
        let u = (t - self.t_center) / self.t_scale;
        let v = (y - self.y_center) / self.y_scale;
        let m = self.m() as f64;

        let (mut g, mut dg) = (0.0, 0.0);
        for &s in &self.u_sorted[self.window(u, self.h1)] {
            let a = (u - s) / self.h1;
            g += triweight(a);
            dg += triweight_deriv(a);
        }
        let g = g / (m * self.h1);
        let dg = dg / (m * self.h1 * self.h1);

        let (mut h, mut dh) = (0.0, 0.0);
        let range = self.window(u, self.h2);
        for (&s, &r) in self.u_sorted[range.clone()].iter().zip(&self.v_by_u[range]) {
            let kv = triweight((v - r) / self.h2);
            if kv == 0.0 {
                continue;
            }
            let a = (u - s) / self.h2;
            h += triweight(a) * kv;
            dh += triweight_deriv(a) * kv;
        }
        let h = h / (m * self.h2 * self.h2);
        let dh = dh / (m * self.h2 * self.h2 * self.h2);

        let marginal_trimmed = !(g > self.delta);
        let joint_trimmed = !(h > self.delta);
        // chain rule back to t units
        let xi = if marginal_trimmed { 0.0 } else { dg / g / self.t_scale };
        let zeta = if joint_trimmed { 0.0 } else { dh / h / self.t_scale };
        ScoreParts {
            zeta,
            xi,
            joint_trimmed,
            marginal_trimmed,
        }
    }

    /// Training points in standardized coordinates, in the order used for
    /// evaluation: an `m x 2` matrix of `(u, v)`.
    pub fn standardized_samples(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m(), 2, |i, j| {
            if j == 0 {
                self.u_sorted[i]
            } else {
                self.v_by_u[i]
            }
        })
    }

    /// Maps `(t, y)` to the standardized coordinates of
    /// [`standardized_samples`](Self::standardized_samples).
    pub fn standardize(&self, t: f64, y: f64) -> (f64, f64) {
        (
            (t - self.t_center) / self.t_scale,
            (y - self.y_center) / self.y_scale,
        )
    }

    /// Bandwidths `(h1, h2)` in standardized units.
    pub fn unit_bandwidths(&self) -> (f64, f64) {
        (self.h1, self.h2)
    }

    /// Fraction of the points `(t_i, y_i)` at which either density estimate is trimmed.
    pub fn trim_fraction(&self, t: &[f64], y: &[f64]) -> f64 {
        if t.is_empty() {
            return 0.0;
        }
        let trimmed = t
            .iter()
            .zip(y)
            .filter(|(&a, &b)| {
                let p = self.parts(a, b);
                p.joint_trimmed || p.marginal_trimmed
            })
            .count();
        trimmed as f64 / t.len() as f64
    }
}

impl Score for ScoreField {
    fn score(&self, t: f64, y: f64) -> f64 {
        self.parts(t, y).value()
    }
}

/// Empirical `mean_i ||x_i||^2 (l̂(β^T x_i, y_i) - l(β^T x_i, y_i))^2`.
pub fn score_l2_diagnostic<F: Score + ?Sized, T: Score + ?Sized>(
    field: &F,
    truth: &T,
    eval_x: &DMatrix<f64>,
    eval_y: &DVector<f64>,
    beta: &Direction,
) -> f64 {
    let n = eval_x.nrows();
    if n == 0 {
        return 0.0;
    }
    let t = eval_x * beta.as_vector();
    let mut sum = 0.0;
    for i in 0..n {
        let r2 = eval_x.row(i).norm_squared();
        let d = field.score(t[i], eval_y[i]) - truth.score(t[i], eval_y[i]);
        sum += r2 * d * d;
    }
    sum / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_column(m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, 1, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn kernel_values() {
        assert_abs_diff_eq!(kernel_value(&[0.0]), 1.09375);
        assert_abs_diff_eq!(kernel_value(&[0.0, 0.0]), 1.09375 * 1.09375);
        assert_abs_diff_eq!(kernel_value(&[0.0, 0.0]), 1.196_289_062_5, epsilon = 1e-10);
        assert_eq!(kernel_value(&[1.0]), 0.0);
        assert_eq!(kernel_value(&[0.2, -1.5]), 0.0);
    }

    #[test]
    fn kde_single_sample_and_support() {
        let s = DMatrix::from_element(1, 1, 0.0);
        assert_abs_diff_eq!(kde(&s, &[0.0], 1.0), 35.0 / 32.0);
        let s = DMatrix::from_column_slice(3, 1, &[0.0, 0.5, 1.0]);
        assert_eq!(kde(&s, &[2.5], 1.0), 0.0);
        assert_eq!(kde_partial1(&s, &[2.5], 1.0), 0.0);
    }

    #[test]
    fn derivative_vanishes_for_symmetric_pair() {
        let s = DMatrix::from_column_slice(2, 1, &[-0.4, 0.4]);
        assert_abs_diff_eq!(kde_partial1(&s, &[0.0], 1.0), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn trimming_examples() {
        let s = normal_column(500, 2);
        // far tail: density below δ
        assert_eq!(trimmed_log_deriv(&s, &[3.9], 0.5, 0.01), 0.0);
        // δ above the density maximum trims everything
        for &p in &[-1.0, 0.0, 0.7] {
            assert_eq!(trimmed_log_deriv(&s, &[p], 0.5, 10.0), 0.0);
        }
    }

    #[test]
    fn log_derivative_of_standard_normal() {
        // A single draw at m = 5000 has sampling sd near 0.17 at t = 1, so the
        // 0.15 tolerance is applied to the mean over independent samples.
        let m = 5000;
        let spec = KernelSpec::default();
        let (sigma, delta) = (spec.unit_bandwidth(m, 1), spec.trim_level(m));
        let reps = 20;
        let (mut at0, mut at1) = (0.0, 0.0);
        for seed in 0..reps {
            let s = normal_column(m, seed);
            at0 += trimmed_log_deriv(&s, &[0.0], sigma, delta) / reps as f64;
            at1 += trimmed_log_deriv(&s, &[1.0], sigma, delta) / reps as f64;
        }
        assert!(at0.abs() < 0.15, "{at0}");
        assert!((at1 + 1.0).abs() < 0.15, "{at1}");
    }

    #[test]
    fn field_matches_brute_force_on_standardized_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 400;
        let t: Vec<f64> = (0..m).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal) + 1.0).collect();
        let y: Vec<f64> = t.iter().map(|a| 3.0 * a + rng.sample::<f64, _>(StandardNormal)).collect();
        let field = fit_score(&t, &y, KernelSpec::default()).unwrap();
        let joint = field.standardized_samples();
        let marginal = joint.columns(0, 1).into_owned();
        let (h1, h2) = field.unit_bandwidths();
        for k in 0..50 {
            let (tt, yy) = (t[k] + 0.1, y[k] - 0.2);
            let (u, v) = field.standardize(tt, yy);
            let parts = field.parts(tt, yy);
            let xi = trimmed_log_deriv(&marginal, &[u], h1, field.delta) / field_scale(&t);
            let zeta = trimmed_log_deriv(&joint, &[u, v], h2, field.delta) / field_scale(&t);
            assert_abs_diff_eq!(parts.xi, xi, epsilon = 1e-12);
            assert_abs_diff_eq!(parts.zeta, zeta, epsilon = 1e-12);
        }
    }

    fn field_scale(t: &[f64]) -> f64 {
        mean_sd(t).1
    }

    #[test]
    fn gaussian_linear_score_at_a_point() {
        // single fits scatter with sd near 0.18 at this point; the 0.3
        // tolerance applies to the mean over independent training samples
        let m = 5000;
        let reps = 20;
        let mut mean = 0.0;
        for seed in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<f64> = t.iter().map(|a| a + rng.sample::<f64, _>(StandardNormal)).collect();
            let field = fit_score(&t, &y, KernelSpec::default()).unwrap();
            mean += field.score(0.0, 1.5) / reps as f64;
            if seed == 0 {
                // far outside the data both halves are trimmed
                let far = field.parts(40.0, -40.0);
                assert!(far.joint_trimmed && far.marginal_trimmed);
                assert_eq!(far.value(), 0.0);
                assert!(t.iter().zip(&y).all(|(&a, &b)| field.score(a, b).is_finite()));
            }
        }
        assert!((mean - 1.5).abs() < 0.3, "mean l̂(0, 1.5) = {mean}");
    }

    #[test]
    fn fit_rejects_degenerate_training_data() {
        let t = vec![1.0; 20];
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert!(matches!(fit_score(&t, &y, KernelSpec::default()), Err(Error::Degenerate(_))));
        assert!(fit_score(&y[..5], &y[..5], KernelSpec::default()).is_err());
        assert!(fit_score(&y, &y[..19], KernelSpec::default()).is_err());
    }

    #[test]
    fn zeta_is_translation_equivariant_in_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = 300;
        let t: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = t.iter().map(|a| a.sin() + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let c = 2.5;
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        let a = fit_score(&t, &y, KernelSpec::default()).unwrap();
        let b = fit_score(&t, &shifted, KernelSpec::default()).unwrap();
        for k in 0..m {
            let pa = a.parts(t[k], y[k]);
            let pb = b.parts(t[k], y[k] + c);
            assert_abs_diff_eq!(pa.zeta, pb.zeta, epsilon = 1e-12);
        }
    }

    #[test]
    fn diagnostic_of_truth_is_zero() {
        let truth = |t: f64, y: f64| y - t;
        let x = DMatrix::from_fn(20, 2, |i, j| (i + j) as f64 * 0.1);
        let y = DVector::from_fn(20, |i, _| i as f64 * 0.05);
        let beta = Direction::axis(2, 0).unwrap();
        assert_eq!(score_l2_diagnostic(&truth, &truth, &x, &y, &beta), 0.0);
    }
}
