//! Dense linear-systems numerics for the fixed pair (A, B): matrix
//! exponentials, controllability Gramians, and controllability checks.
//!
//! The state transition matrix is `Φ(r,t) = e^{A(r−t)}` and the
//! controllability Gramian is
//!
//! ```text
//! W(t,r) = ∫ₜʳ Φ(r,τ) B Bᵀ Φ(r,τ)ᵀ dτ,
//! ```
//!
//! nonsingular for every `r > t` exactly when (A, B) is controllable. Both
//! operators depend on (t, r) only through the window length `r − t`, which
//! is what the [`OperatorCache`] keys on.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest one count as zero in
/// the Kalman rank decision.
pub const RANK_TOL: f64 = 1e-10;

/// Default minimum window length for training-window sampling. Keeps the
/// Gramian condition number bounded so Cholesky solves stay stable.
pub const DELTA_MIN_DEFAULT: f64 = 1e-3;

/// Continuous-time linear time-invariant system `ż = Az + Bu`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LtiSystem {
    /// Build a system from a d×d drift matrix and a d×m actuation matrix.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Shape(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.nrows() == 0 || b.ncols() == 0 {
            return Err(Error::Shape("d >= 1 and m >= 1 required".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::Shape(format!(
                "B must have {} rows to match A, got {}",
                a.nrows(),
                b.nrows()
            )));
        }
        if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("system matrices".into()));
        }
        Ok(Self { a, b })
    }

    /// `A = 0`, `B = I` in dimension `d`: every coordinate is driven directly.
    pub fn identity_channel(d: usize) -> Self {
        Self {
            a: DMatrix::zeros(d, d),
            b: DMatrix::identity(d, d),
        }
    }

    /// Planar rotation drift with angular rate `omega`, identity actuation.
    pub fn rotation2d(omega: f64) -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[0.0, -omega, omega, 0.0]),
            b: DMatrix::identity(2, 2),
        }
    }

    /// Skew drift in R³ combining an x–y rotation at rate `omega1` with a
    /// y–z rotation at rate `omega2`, identity actuation.
    pub fn rotation3d(omega1: f64, omega2: f64) -> Self {
        Self {
            a: DMatrix::from_row_slice(
                3,
                3,
                &[
                    0.0, -omega1, 0.0, //
                    omega1, 0.0, -omega2, //
                    0.0, omega2, 0.0,
                ],
            ),
            b: DMatrix::identity(3, 3),
        }
    }

    /// Double integrator: position fed by velocity, control through the
    /// acceleration channel.
    pub fn double_integrator() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// The input-channel outer product `B Bᵀ`.
    pub fn bbt(&self) -> DMatrix<f64> {
        &self.b * self.b.transpose()
    }

    /// Kalman rank test: rank of `[B, AB, …, A^{d−1}B]` equals d, rank judged
    /// by singular values above `RANK_TOL` times the largest one.
    pub fn is_controllable(&self) -> bool {
        let d = self.dim();
        let m = self.input_dim();
        let mut kalman = DMatrix::zeros(d, d * m);
        let mut block = self.b.clone();
        for k in 0..d {
            kalman.view_mut((0, k * m), (d, m)).copy_from(&block);
            if k + 1 < d {
                block = &self.a * block;
            }
        }
        let sv = kalman.svd(false, false).singular_values;
        let max = sv.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return false;
        }
        sv.iter().filter(|&&s| s > RANK_TOL * max).count() == d
    }

    /// Errs with [`Error::Uncontrollable`] unless the Kalman test passes.
    pub fn require_controllable(&self) -> Result<()> {
        if self.is_controllable() {
            Ok(())
        } else {
            Err(Error::Uncontrollable)
        }
    }

    /// Φ(len) = e^{A·len} together with W(len), the Gramian over any window
    /// of that length, via the block-exponential method: exponentiate
    /// `[[−A, BBᵀ], [0, Aᵀ]]·len` and recover `W = F₃ᵀ G₂` from the
    /// lower-right block F₃ and the upper-right block G₂. The result is
    /// symmetrized as `(W + Wᵀ)/2`.
    pub fn phi_and_gramian(&self, len: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if !(len.is_finite() && len > 0.0) {
            return Err(Error::Window(format!("window length {len} must be positive")));
        }
        let d = self.dim();
        let mut blk = DMatrix::zeros(2 * d, 2 * d);
        blk.view_mut((0, 0), (d, d)).copy_from(&(-&self.a));
        blk.view_mut((0, d), (d, d)).copy_from(&self.bbt());
        blk.view_mut((d, d), (d, d)).copy_from(&self.a.transpose());
        let e = expm(&blk, len)?;
        let g2 = e.view((0, d), (d, d)).into_owned();
        let f3 = e.view((d, d), (d, d)).into_owned();
        let w_raw = f3.transpose() * g2;
        let w = (&w_raw + w_raw.transpose()) * 0.5;
        let phi = expm(&self.a, len)?;
        Ok((phi, w))
    }

    /// Transition matrix and Gramian for a concrete window, with the Gramian
    /// Cholesky factor ready for solves.
    pub fn window_operators(&self, window: TimeWindow) -> Result<WindowOperators> {
        let (phi, gramian) = self.phi_and_gramian(window.len())?;
        let chol = Cholesky::new(gramian.clone())
            .ok_or_else(|| Error::GramianSingular { min_eig: min_symmetric_eig(&gramian) })?;
        Ok(WindowOperators {
            window,
            phi,
            gramian,
            chol,
        })
    }

    /// Gauss–Legendre approximation of the Gramian integral. Test oracle for
    /// the block-exponential path; the steering pipeline never calls it.
    pub fn gramian_quadrature(&self, window: TimeWindow, nodes: usize) -> Result<DMatrix<f64>> {
        if nodes < 8 {
            return Err(Error::InvalidParameter(format!(
                "quadrature needs at least 8 nodes, got {nodes}"
            )));
        }
        let (t, r) = (window.start(), window.end());
        let (xs, ws) = gauss_legendre(nodes);
        let mid = 0.5 * (t + r);
        let half = 0.5 * (r - t);
        let bbt = self.bbt();
        let d = self.dim();
        let mut acc = DMatrix::zeros(d, d);
        for (x, w) in xs.iter().zip(ws.iter()) {
            let tau = mid + half * x;
            let phi = expm(&self.a, r - tau)?;
            acc += (&phi * &bbt * phi.transpose()) * (w * half);
        }
        Ok(acc)
    }
}

/// Forward window `[t, r]` inside the unit horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWindow {
    t: f64,
    r: f64,
}

impl TimeWindow {
    /// Requires `0 ≤ t < r ≤ 1`.
    pub fn new(t: f64, r: f64) -> Result<Self> {
        if !(t.is_finite() && r.is_finite()) {
            return Err(Error::NonFinite("window endpoints".into()));
        }
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&r) || t >= r {
            return Err(Error::Window(format!("need 0 <= t < r <= 1, got [{t}, {r}]")));
        }
        Ok(Self { t, r })
    }

    /// Additionally requires `r − t ≥ min_gap`; used when sampling training
    /// windows.
    pub fn with_min_gap(t: f64, r: f64, min_gap: f64) -> Result<Self> {
        let w = Self::new(t, r)?;
        if w.len() < min_gap {
            return Err(Error::Window(format!(
                "window [{t}, {r}] shorter than the minimum gap {min_gap}"
            )));
        }
        Ok(w)
    }

    pub fn start(&self) -> f64 {
        self.t
    }

    pub fn end(&self) -> f64 {
        self.r
    }

    pub fn len(&self) -> f64 {
        self.r - self.t
    }

    pub fn contains(&self, tau: f64) -> bool {
        self.t <= tau && tau <= self.r
    }
}

/// Cached `Φ(r,t)` and `W(t,r)` for one window, Gramian factored.
#[derive(Debug, Clone)]
pub struct WindowOperators {
    window: TimeWindow,
    phi: DMatrix<f64>,
    gramian: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl WindowOperators {
    pub fn window(&self) -> TimeWindow {
        self.window
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn gramian(&self) -> &DMatrix<f64> {
        &self.gramian
    }

    /// Solve `W x = rhs` through the cached Cholesky factor.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

/// Smallest eigenvalue of a symmetric matrix; diagnostic for singular-Gramian
/// errors.
pub(crate) fn min_symmetric_eig(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

// Padé coefficients and θ thresholds for the scaling-and-squaring matrix
// exponential (orders 3, 5, 7, 9, 13).
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.53939833006323e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068;
const THETA_13: f64 = 5.371920351148152;

/// Matrix exponential `e^{M s}` by scaling and squaring with diagonal Padé
/// approximants, order selected from the 1-norm of `M s`.
pub fn expm(m: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!(
            "expm needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !s.is_finite() || m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("expm input".into()));
    }
    let a = m * s;
    let norm = one_norm(&a);
    let d = a.nrows();
    let eye = DMatrix::identity(d, d);

    let (u, v, squarings) = if norm <= THETA_3 {
        let (u, v) = pade_low(&a, &eye, &PADE3);
        (u, v, 0)
    } else if norm <= THETA_5 {
        let (u, v) = pade_low(&a, &eye, &PADE5);
        (u, v, 0)
    } else if norm <= THETA_7 {
        let (u, v) = pade_low(&a, &eye, &PADE7);
        (u, v, 0)
    } else if norm <= THETA_9 {
        let (u, v) = pade_low(&a, &eye, &PADE9);
        (u, v, 0)
    } else {
        let squarings = ((norm / THETA_13).log2().ceil() as i32).max(0) as u32;
        let scaled = &a / 2f64.powi(squarings as i32);
        let (u, v) = pade13(&scaled, &eye);
        (u, v, squarings)
    };

    // r = (V − U)⁻¹ (V + U)
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .ok_or_else(|| Error::NonFinite("singular denominator in Padé solve".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

/// U and V for the low-order diagonal Padé approximants (3, 5, 7, 9): with
/// `X = A²`, U = A·(b₁I + b₃X + …) and V = b₀I + b₂X + ….
fn pade_low(a: &DMatrix<f64>, eye: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let a2 = a * a;
    let mut u_poly = eye * b[1];
    let mut v = eye * b[0];
    let mut power = a2.clone();
    let mut k = 2;
    while k < b.len() {
        v += &power * b[k];
        if k + 1 < b.len() {
            u_poly += &power * b[k + 1];
        }
        if k + 2 < b.len() {
            power = &power * &a2;
        }
        k += 2;
    }
    (a * u_poly, v)
}

fn pade13(a: &DMatrix<f64>, eye: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &PADE13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + eye * b[1];
    let u = a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + eye * b[0];
    (u, v)
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Gauss–Legendre nodes and weights on [−1, 1], by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_deriv(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_deriv(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

const CACHE_QUANTUM: f64 = 1e-9;
const CACHE_CAP: usize = 16_384;

/// Window operators with an optional Cholesky factor. The factor is absent
/// when the Gramian over very short windows is numerically singular; solves
/// then report [`Error::GramianSingular`] while Φ and W stay usable.
#[derive(Debug, Clone)]
pub struct CachedOps {
    pub phi: DMatrix<f64>,
    pub gramian: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl CachedOps {
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.chol {
            Some(c) => Ok(c.solve(rhs)),
            None => Err(Error::GramianSingular {
                min_eig: min_symmetric_eig(&self.gramian),
            }),
        }
    }

    pub fn has_factor(&self) -> bool {
        self.chol.is_some()
    }
}

/// Memo of window operators keyed by window length quantized to 1e-9. LTI
/// time-invariance makes Φ and W functions of the length alone, so one entry
/// serves every window of that length. Capacity-capped: on overflow the memo
/// is cleared, which only costs recomputation.
#[derive(Debug, Clone)]
pub struct OperatorCache {
    sys: LtiSystem,
    memo: HashMap<u64, CachedOps>,
}

impl OperatorCache {
    pub fn new(sys: &LtiSystem) -> Self {
        Self {
            sys: sys.clone(),
            memo: HashMap::new(),
        }
    }

    pub fn sys(&self) -> &LtiSystem {
        &self.sys
    }

    fn key(len: f64) -> Result<u64> {
        if !(len.is_finite() && len > 0.0) {
            return Err(Error::Window(format!("window length {len} must be positive")));
        }
        Ok((len / CACHE_QUANTUM).round() as u64)
    }

    /// Operators for any window of the given length, computing and caching on
    /// first use.
    pub fn ops(&mut self, len: f64) -> Result<&CachedOps> {
        let key = Self::key(len)?;
        if !self.memo.contains_key(&key) {
            if self.memo.len() >= CACHE_CAP {
                self.memo.clear();
            }
            let (phi, gramian) = self.sys.phi_and_gramian(len)?;
            let chol = Cholesky::new(gramian.clone());
            self.memo.insert(key, CachedOps { phi, gramian, chol });
        }
        Ok(&self.memo[&key])
    }

    /// Read-only lookup; present only after [`OperatorCache::ops`] has run
    /// for the same quantized length. Lets parallel sections share the memo
    /// after a sequential prefill.
    pub fn get(&self, len: f64) -> Option<&CachedOps> {
        Self::key(len).ok().and_then(|k| self.memo.get(&k))
    }
}
