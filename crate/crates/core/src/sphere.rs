//! Geometry of the unit sphere `{β : ||β|| = 1}` that houses the index
//! direction: complement projectors, orthonormal complements, the local chart
//! around an anchor direction and the sign convention used for comparisons.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-12;
const RETRACT_MIN_NORM: f64 = 1e-10;

/// A unit vector in `R^p`, `p >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Direction(DVector<f64>);

impl Direction {
    /// Wraps `v` after checking `p >= 2`, finiteness and `||v|| = 1` within 1e-12.
    pub fn new(v: DVector<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::Domain(format!(
                "a direction needs p >= 2 coordinates, got {}",
                v.len()
            )));
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("direction has non-finite coordinates".into()));
        }
        let norm = v.norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Domain(format!(
                "direction must have unit norm, got {norm}"
            )));
        }
        Ok(Self(v))
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(coords))
    }

    /// Normalizes an arbitrary vector; see [`retract`].
    pub fn normalized(coords: &[f64]) -> Result<Self> {
        retract(&DVector::from_column_slice(coords))
    }

    /// The `k`-th standard basis vector of `R^p`.
    pub fn axis(p: usize, k: usize) -> Result<Self> {
        if k >= p {
            return Err(Error::Domain(format!("axis {k} out of range for p = {p}")));
        }
        let mut v = DVector::zeros(p);
        v[k] = 1.0;
        Self::new(v)
    }

    /// `(1, ..., 1) / sqrt(p)`.
    pub fn equiangular(p: usize) -> Result<Self> {
        Self::normalized(&vec![1.0; p])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.0.dot(&other.0)
    }

    /// Sign-invariant angle `arccos(|<self, other>|)` in radians.
    pub fn angle_to(&self, other: &Direction) -> f64 {
        self.dot(other).abs().min(1.0).acos()
    }
}

impl std::ops::Neg for Direction {
    type Output = Direction;
    fn neg(self) -> Direction {
        Direction(-self.0)
    }
}

impl TryFrom<Vec<f64>> for Direction {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Direction::new(DVector::from_vec(v))
    }
}

impl From<Direction> for Vec<f64> {
    fn from(d: Direction) -> Vec<f64> {
        d.0.as_slice().to_vec()
    }
}

/// A `p x (p-1)` matrix with orthonormal columns spanning the orthogonal
/// complement of the direction it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplementBasis {
    columns: DMatrix<f64>,
}

impl ComplementBasis {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    /// `basis^T v`.
    pub fn coordinates(&self, v: &DVector<f64>) -> DVector<f64> {
        self.columns.tr_mul(v)
    }

    /// `basis a`.
    pub fn embed(&self, a: &DVector<f64>) -> DVector<f64> {
        &self.columns * a
    }

    /// `basis^T m basis`.
    pub fn restrict(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.columns.tr_mul(m) * &self.columns
    }

    /// `basis s basis^T` for a `(p-1) x (p-1)` matrix `s`.
    pub fn lift(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        &self.columns * s * self.columns.transpose()
    }
}

/// `Q_β = I - β β^T`.
pub fn projection_complement(beta: &Direction) -> DMatrix<f64> {
    let b = beta.as_vector();
    DMatrix::identity(b.len(), b.len()) - b * b.transpose()
}

/// Deterministic orthonormal basis of the complement of `beta`.
///
/// Sign rule: `beta` is first flipped so that its largest-magnitude
/// coordinate (lowest index on ties) is positive; call the result `b`. The
/// Householder reflector `H = I - 2 v v^T / v^T v` with
/// `v = b + s e_1`, `s = +1` if `b_1 >= 0` else `-1`, maps `b` to `-s e_1`;
/// the basis is columns `2..p` of `H`. Choosing `s` by the sign of `b_1`
/// keeps `v^T v >= 2`, so there is no cancellation. `beta` and `-beta`
/// yield the same basis.
pub fn orthonormal_complement(beta: &Direction) -> ComplementBasis {
    let p = beta.dim();
    let raw = beta.as_vector();
    let lead = raw.iamax();
    let b = if raw[lead] < 0.0 { -raw } else { raw.clone() };
    let s = if b[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut v = b;
    v[0] += s;
    let scale = 2.0 / v.norm_squared();
    let mut columns = DMatrix::zeros(p, p - 1);
    for j in 1..p {
        for i in 0..p {
            let delta = if i == j { 1.0 } else { 0.0 };
            columns[(i, j - 1)] = delta - scale * v[i] * v[j];
        }
    }
    ComplementBasis { columns }
}

/// Chart coordinates `α = basis^T β` of `beta` around `anchor`.
///
/// `basis` must be the complement basis of `anchor`, and `beta` must lie in
/// the open hemisphere `β^T anchor > 0`.
pub fn chart_forward(
    beta: &Direction,
    anchor: &Direction,
    basis: &ComplementBasis,
) -> Result<DVector<f64>> {
    check_chart_dims(anchor, basis)?;
    if beta.dim() != anchor.dim() {
        return Err(Error::Domain("direction and anchor differ in dimension".into()));
    }
    let c = beta.dot(anchor);
    if c <= 0.0 {
        return Err(Error::Domain(format!(
            "direction is outside the open hemisphere of the anchor (inner product {c})"
        )));
    }
    Ok(basis.coordinates(beta.as_vector()))
}

/// Inverse chart: `basis α + sqrt(1 - ||α||^2) anchor`, defined for `||α|| < 1`.
pub fn chart_inverse(
    alpha: &DVector<f64>,
    anchor: &Direction,
    basis: &ComplementBasis,
) -> Result<Direction> {
    check_chart_dims(anchor, basis)?;
    if alpha.len() + 1 != anchor.dim() {
        return Err(Error::Domain(format!(
            "chart coordinates must have length {}, got {}",
            anchor.dim() - 1,
            alpha.len()
        )));
    }
    let r2 = alpha.norm_squared();
    if !(r2 < 1.0) {
        return Err(Error::Domain(format!(
            "chart coordinates must satisfy ||α|| < 1, got {}",
            r2.sqrt()
        )));
    }
    let v = basis.embed(alpha) + anchor.as_vector() * (1.0 - r2).sqrt();
    // The construction is unit-norm up to rounding; renormalize so the
    // result passes the 1e-12 invariant.
    let n = v.norm();
    Direction::new(v / n)
}

fn check_chart_dims(anchor: &Direction, basis: &ComplementBasis) -> Result<()> {
    if basis.dim() != anchor.dim() {
        return Err(Error::Domain("basis and anchor differ in dimension".into()));
    }
    Ok(())
}

/// Maps a nonzero vector back onto the sphere.
pub fn retract(v: &DVector<f64>) -> Result<Direction> {
    let n = v.norm();
    if !n.is_finite() || n <= RETRACT_MIN_NORM {
        return Err(Error::Degenerate(format!(
            "cannot normalize a vector of norm {n}"
        )));
    }
    Direction::new(v / n)
}

/// `beta` or `-beta`, whichever has nonnegative inner product with
/// `reference`. Orthogonal pairs resolve to `+beta`.
pub fn align_sign(beta: &Direction, reference: &Direction) -> Direction {
    if beta.dot(reference) >= 0.0 {
        beta.clone()
    } else {
        -beta.clone()
    }
}

/// Sign convention when no reference exists: first nonzero coordinate positive.
pub fn canonical_sign(beta: &Direction) -> Direction {
    match beta.as_slice().iter().find(|c| **c != 0.0) {
        Some(c) if *c < 0.0 => -beta.clone(),
        _ => beta.clone(),
    }
}
