//! Swarm distributions as finite point clouds: generators for the standard
//! source/target shapes plus CSV ingestion for arbitrary clouds.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A weighted-equally empirical distribution: `n` points in `R^d`, one per
/// row.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    points: DMatrix<f64>,
    label: String,
}

impl Ensemble {
    pub fn from_points(points: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::EmptyEnsemble);
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("ensemble points".into()));
        }
        Ok(Self {
            points,
            label: label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // n ≥ 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    /// Row `i` as a column state vector.
    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.row(i).transpose()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for i in 0..self.len() {
            m += self.point(i);
        }
        m / self.len() as f64
    }

    /// Write one point per row, columns to 17 significant digits so a load
    /// reproduces every f64 bit-exactly. A header row `x1,…,xd` is included.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.dim()).map(|j| format!("x{j}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.len() {
            for j in 0..self.dim() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{:.16e}", self.points[(i, j)]).expect("string write");
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Standard-normal draws via the Box–Muller transform, deterministic in the
/// generator state.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // u1 ∈ (0, 1] keeps the log finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Gaussian cloud with the given mean and covariance. The covariance is
/// factored internally; a non-positive-definite input is rejected.
pub fn gaussian(n: usize, mean: &DVector<f64>, cov: &DMatrix<f64>, seed: u64) -> Result<Ensemble> {
    let d = mean.len();
    if cov.nrows() != d || cov.ncols() != d {
        return Err(Error::Shape(format!(
            "covariance is {}x{}, mean has dimension {d}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
        Error::InvalidParameter("covariance must be symmetric positive definite".into())
    })?;
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = DMatrix::zeros(n, d);
    for i in 0..n {
        let g = DVector::from_fn(d, |_, _| standard_normal(&mut rng));
        let x = mean + &l * g;
        points.row_mut(i).copy_from(&x.transpose());
    }
    Ensemble::from_points(points, "gaussian")
}

/// One Gaussian mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Geometry generators for source/target clouds.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// 2D annulus: radius uniform in `radius ± thickness/2`, angle uniform.
    Ring {
        center: DVector<f64>,
        radius: f64,
        thickness: f64,
    },
    /// 3D solid square pyramid: base half-width `base_half_width` at z = 0,
    /// apex at `(0, 0, height)`, uniform over the volume.
    Pyramid { base_half_width: f64, height: f64 },
    /// 3D torus surface, major radius R, minor radius r, surface-uniform.
    Torus { major: f64, minor: f64 },
    /// Gaussian mixture; component picked per point by weight.
    Mixture(Vec<MixtureComponent>),
}

/// Sample `n` points from a shape, deterministic in the seed.
pub fn shape(kind: &Shape, n: usize, seed: u64) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        Shape::Ring {
            center,
            radius,
            thickness,
        } => {
            if center.len() != 2 {
                return Err(Error::InvalidParameter("ring center must be 2D".into()));
            }
            if !(*radius > 0.0 && *thickness >= 0.0 && radius - thickness / 2.0 > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "ring needs radius > thickness/2 ≥ 0, got radius {radius}, thickness {thickness}"
                )));
            }
            let mut points = DMatrix::zeros(n, 2);
            for i in 0..n {
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                let rad = radius + (rng.random::<f64>() - 0.5) * thickness;
                points[(i, 0)] = center[0] + rad * theta.cos();
                points[(i, 1)] = center[1] + rad * theta.sin();
            }
            Ensemble::from_points(points, "ring")
        }
        Shape::Pyramid {
            base_half_width,
            height,
        } => {
            let (a, h) = (*base_half_width, *height);
            if !(a > 0.0 && h > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "pyramid needs positive base half-width and height, got {a} and {h}"
                )));
            }
            let mut points = DMatrix::zeros(n, 3);
            for i in 0..n {
                // Cross-section area shrinks as (1−s)², so the height
                // fraction has CDF 1−(1−s)³.
                let s = 1.0 - (1.0 - rng.random::<f64>()).cbrt();
                let half = a * (1.0 - s);
                points[(i, 0)] = (rng.random::<f64>() * 2.0 - 1.0) * half;
                points[(i, 1)] = (rng.random::<f64>() * 2.0 - 1.0) * half;
                points[(i, 2)] = s * h;
            }
            Ensemble::from_points(points, "pyramid")
        }
        Shape::Torus { major, minor } => {
            let (big_r, small_r) = (*major, *minor);
            if !(big_r > small_r && small_r > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "torus needs major > minor > 0, got {big_r} and {small_r}"
                )));
            }
            let mut points = DMatrix::zeros(n, 3);
            for i in 0..n {
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                // Surface-uniform minor angle by rejection: area element is
                // proportional to R + r·cos φ.
                let phi = loop {
                    let cand = rng.random::<f64>() * std::f64::consts::TAU;
                    let accept = (big_r + small_r * cand.cos()) / (big_r + small_r);
                    if rng.random::<f64>() < accept {
                        break cand;
                    }
                };
                let ring = big_r + small_r * phi.cos();
                points[(i, 0)] = ring * theta.cos();
                points[(i, 1)] = ring * theta.sin();
                points[(i, 2)] = small_r * phi.sin();
            }
            Ensemble::from_points(points, "torus")
        }
        Shape::Mixture(components) => {
            if components.is_empty() {
                return Err(Error::InvalidParameter("mixture needs at least one component".into()));
            }
            let d = components[0].mean.len();
            let total: f64 = components.iter().map(|c| c.weight).sum();
            if components.iter().any(|c| c.weight < 0.0) || total <= 0.0 {
                return Err(Error::InvalidParameter(
                    "mixture weights must be nonnegative with positive sum".into(),
                ));
            }
            let mut factors = Vec::with_capacity(components.len());
            for c in components {
                if c.mean.len() != d || c.cov.nrows() != d || c.cov.ncols() != d {
                    return Err(Error::Shape("mixture components must share one dimension".into()));
                }
                let chol = Cholesky::new(c.cov.clone()).ok_or_else(|| {
                    Error::InvalidParameter(
                        "mixture covariance must be symmetric positive definite".into(),
                    )
                })?;
                factors.push(chol.l());
            }
            let mut points = DMatrix::zeros(n, d);
            for i in 0..n {
                let mut pick = rng.random::<f64>() * total;
                let mut idx = components.len() - 1;
                for (k, c) in components.iter().enumerate() {
                    if pick < c.weight {
                        idx = k;
                        break;
                    }
                    pick -= c.weight;
                }
                let g = DVector::from_fn(d, |_, _| standard_normal(&mut rng));
                let x = &components[idx].mean + &factors[idx] * g;
                points.row_mut(i).copy_from(&x.transpose());
            }
            Ensemble::from_points(points, "mixture")
        }
    }
}

/// Read a point cloud: one point per row, comma-separated numeric columns,
/// optional single header row (detected by any non-numeric cell).
pub fn load_csv(path: &Path) -> Result<Ensemble> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> =
            cells.iter().map(|c| c.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if rows.is_empty() && width.is_none() => {
                // Non-numeric first row is a header.
                width = Some(cells.len());
                continue;
            }
            Err(_) => {
                return Err(Error::Csv {
                    line: line_no,
                    msg: "non-numeric cell".into(),
                })
            }
        };
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Csv {
                line: line_no,
                msg: "non-finite value".into(),
            });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Csv {
                    line: line_no,
                    msg: format!("expected {w} columns, found {}", values.len()),
                })
            }
            _ => {}
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let d = rows[0].len();
    let points = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Ensemble::from_points(points, label)
}
