//! Datasets, CSV ingestion and predictor whitening.
//!
//! The estimators work on predictors with sample mean zero and identity
//! sample covariance. [`whiten`] produces such data together with the
//! [`Whitener`] needed to carry an estimated direction back to the original
//! predictor units.

use std::io::Read;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sphere::{retract, Direction};

/// Smallest accepted ratio of the smallest to the largest covariance eigenvalue.
pub const SINGULARITY_RATIO: f64 = 1e-10;

/// `n` observations of `(x, y)` with `x` in `R^p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    standardized: bool,
}

impl Dataset {
    /// Checks `p >= 2`, `n >= p + 2` and that every entry is finite.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n {
            return Err(Error::Degenerate(format!(
                "{} predictor rows but {} responses",
                n,
                y.len()
            )));
        }
        if p < 2 {
            return Err(Error::Degenerate(format!("need p >= 2 predictors, got {p}")));
        }
        if n < p + 2 {
            return Err(Error::Degenerate(format!(
                "need n >= p + 2 = {} observations, got {n}",
                p + 2
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("dataset contains non-finite values".into()));
        }
        Ok(Self {
            x,
            y,
            standardized: false,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Whether the predictors have been whitened by [`whiten`].
    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    /// Index values `x_i^T beta`.
    pub fn index(&self, beta: &Direction) -> DVector<f64> {
        &self.x * beta.as_vector()
    }

    /// Sub-dataset with the given rows, in order. The standardized flag is
    /// carried over although a subset is only approximately white.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            standardized: self.standardized,
        }
    }

    /// Writes the dataset as CSV with header `x1,...,xp,y`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let p = self.p();
        let mut header: Vec<String> = (1..=p).map(|k| format!("x{k}")).collect();
        header.push("y".into());
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = (0..p).map(|j| self.x[(i, j)].to_string()).collect();
            rec.push(self.y[i].to_string());
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Affine map from original predictor units to white coordinates,
/// `z = transform (x - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    pub mean: DVector<f64>,
    /// Symmetric inverse square root of the sample covariance.
    pub transform: DMatrix<f64>,
    pub inverse_transform: DMatrix<f64>,
}

impl Whitener {
    pub fn identity(p: usize) -> Self {
        Self {
            mean: DVector::zeros(p),
            transform: DMatrix::identity(p, p),
            inverse_transform: DMatrix::identity(p, p),
        }
    }

    /// Applies the map to every row of `x`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centered * &self.transform
    }
}

/// Reads CSV with header `x1,...,xp,y`.
pub fn load_dataset<R: Read>(source: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = reader
        .headers()
        .map_err(|e| Error::Ingest {
            row: 1,
            column: "header".into(),
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    let cols = names.len();
    if cols < 3 {
        return Err(Error::Ingest {
            row: 1,
            column: "header".into(),
            message: format!(
                "expected columns x1,...,xp,y with p >= 2, found {} column(s)",
                cols
            ),
        });
    }
    for (j, name) in names.iter().enumerate() {
        let want = if j + 1 == cols {
            "y".to_string()
        } else {
            format!("x{}", j + 1)
        };
        if *name != want {
            return Err(Error::Ingest {
                row: 1,
                column: name.to_string(),
                message: format!("expected header column {} to be {want:?}", j + 1),
            });
        }
    }
    let p = cols - 1;

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record.map_err(|e| Error::Ingest {
            row,
            column: "*".into(),
            message: e.to_string(),
        })?;
        if record.len() != cols {
            return Err(Error::Ingest {
                row,
                column: "*".into(),
                message: format!("expected {cols} fields, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| Error::Ingest {
                row,
                column: names[j].to_string(),
                message: format!("{cell:?} is not a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Ingest {
                    row,
                    column: names[j].to_string(),
                    message: format!("{cell:?} is not finite"),
                });
            }
            if j < p {
                xs.push(value);
            } else {
                ys.push(value);
            }
        }
    }
    let n = ys.len();
    if n < p + 2 {
        return Err(Error::Ingest {
            row: 0,
            column: "*".into(),
            message: format!("need at least p + 2 = {} rows, found {n}", p + 2),
        });
    }
    Dataset::new(DMatrix::from_row_slice(n, p, &xs), DVector::from_vec(ys))
}

/// Sample mean and covariance (divisor `n`) of the rows of `x`.
pub fn mean_and_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_sum().transpose() / n;
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / n;
    (mean, cov)
}

/// Centers and whitens the predictors, `z_i = Σ^{-1/2} (x_i - x̄)`.
///
/// The covariance uses divisor `n`, so the returned predictors satisfy
/// `Z^T Z / n = I` up to rounding.
pub fn whiten(data: &Dataset) -> Result<(Whitener, Dataset)> {
    let (mean, cov) = mean_and_covariance(&data.x);
    let eig = SymmetricEigen::new(cov);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(ratio > SINGULARITY_RATIO) {
        return Err(Error::RankDeficient { ratio });
    }
    let v = &eig.eigenvectors;
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.sqrt().recip()));
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let mut transform = v * inv_sqrt * v.transpose();
    let mut inverse_transform = v * sqrt * v.transpose();
    // exact symmetry
    transform = (&transform + transform.transpose()) * 0.5;
    inverse_transform = (&inverse_transform + inverse_transform.transpose()) * 0.5;
    let w = Whitener {
        mean,
        transform,
        inverse_transform,
    };
    let z = w.apply(&data.x);
    let out = Dataset {
        x: z,
        y: data.y.clone(),
        standardized: true,
    };
    Ok((w, out))
}

/// Carries a direction estimated on whitened predictors back to the
/// original units: `retract(transform · beta_z)`.
pub fn unwhiten_direction(w: &Whitener, beta_z: &Direction) -> Result<Direction> {
    retract(&(&w.transform * beta_z.as_vector()))
}
