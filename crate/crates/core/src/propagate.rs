//! Few-step forward propagation of an ensemble under a coefficient field.
//!
//! The horizon is partitioned by a time grid; on each interval every member
//! queries the field once at the interval start and then follows the
//! corresponding minimum-energy control to the interval end, in closed form:
//! `z_{k+1} = Φ z_k + W c_k`. The controller is therefore a sampled-data
//! state feedback — the field sees whatever state the member actually
//! reached, not a precomputed plan.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::lti::{expm, LtiSystem, OperatorCache, TimeWindow, DELTA_MIN_DEFAULT};
use crate::model::CoefficientMap;
use crate::steering::ExactBridgeCoefficient;

/// Per-member interval result: next state, coefficient, energy, optional η.
type MemberStep = (DVector<f64>, DVector<f64>, f64, Option<DVector<f64>>);

/// Time grid 0 = t₀ < t₁ < … < t_K = 1 with a minimum interval length.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationPlan {
    grid: Vec<f64>,
}

impl PropagationPlan {
    /// Uniform grid with `k` intervals.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("need at least one interval".into()));
        }
        let grid = (0..=k).map(|i| i as f64 / k as f64).collect();
        Self::from_grid(grid)
    }

    pub fn from_grid(grid: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::InvalidParameter("grid needs at least two times".into()));
        }
        if grid[0] != 0.0 || *grid.last().unwrap() != 1.0 {
            return Err(Error::InvalidParameter(
                "grid endpoints must be exactly 0 and 1".into(),
            ));
        }
        for pair in grid.windows(2) {
            // NaN gaps must fail too, hence the explicit finiteness check.
            let gap = pair[1] - pair[0];
            if !gap.is_finite() || gap < DELTA_MIN_DEFAULT {
                return Err(Error::InvalidParameter(format!(
                    "grid gap {gap} below minimum {DELTA_MIN_DEFAULT}"
                )));
            }
        }
        Ok(Self { grid })
    }

    /// Number of intervals K.
    pub fn k(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
}

/// Everything recorded during one propagation run. States and coefficients
/// are row-per-member matrices; `eta` is present only when propagation ran
/// with deterministic member→target pairing.
#[derive(Debug, Clone)]
pub struct PropagationTrace {
    pub grid: Vec<f64>,
    /// K+1 matrices, n×d: the ensemble at each grid time.
    pub states: Vec<DMatrix<f64>>,
    /// K matrices, n×d: the coefficient each member used on each interval.
    pub coefficients: Vec<DMatrix<f64>>,
    /// K matrices, n×d: per-interval steering error against the exact
    /// oracle, `η = W·(c_exact − c_model)`.
    pub eta: Option<Vec<DMatrix<f64>>>,
    /// Per-member cumulative control energy Σ_k c_kᵀ W_k c_k.
    pub energy: DVector<f64>,
}

impl PropagationTrace {
    pub fn members(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.states[0].ncols()
    }

    /// Snapshot at grid index `k` as an ensemble.
    pub fn ensemble_at(&self, k: usize, label: &str) -> Result<Ensemble> {
        let m = self
            .states
            .get(k)
            .ok_or_else(|| Error::InvalidParameter(format!("no grid index {k}")))?;
        Ensemble::from_points(m.clone(), label)
    }

    pub fn final_ensemble(&self, label: &str) -> Result<Ensemble> {
        self.ensemble_at(self.states.len() - 1, label)
    }
}

fn propagate_inner<M: CoefficientMap + ?Sized>(
    sys: &LtiSystem,
    model: &M,
    rho0: &Ensemble,
    oracles: Option<&[ExactBridgeCoefficient]>,
    plan: &PropagationPlan,
) -> Result<PropagationTrace> {
    sys.require_controllable()?;
    let d = sys.dim();
    if rho0.dim() != d {
        return Err(Error::Shape(format!(
            "ensemble dimension {} does not match system dimension {d}",
            rho0.dim()
        )));
    }
    if model.state_dim() != d {
        return Err(Error::Shape(format!(
            "model dimension {} does not match system dimension {d}",
            model.state_dim()
        )));
    }
    let n = rho0.len();
    let mut cache = OperatorCache::new(sys);
    let mut states = Vec::with_capacity(plan.k() + 1);
    states.push(rho0.points().clone());
    let mut coefficients = Vec::with_capacity(plan.k());
    let mut eta: Option<Vec<DMatrix<f64>>> = oracles.map(|_| Vec::with_capacity(plan.k()));
    let mut energy = DVector::zeros(n);

    for k in 0..plan.k() {
        let (t, r) = (plan.grid[k], plan.grid[k + 1]);
        let ops = cache.ops(r - t)?;
        let phi = ops.phi.clone();
        let w = ops.gramian.clone();
        let current = states.last().unwrap();

        let rows: Result<Vec<MemberStep>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let z = current.row(i).transpose();
                let c = model.coefficient(&z, t, r)?;
                if c.len() != d {
                    return Err(Error::Shape(format!(
                        "model returned a {}-vector for a {d}-dimensional state",
                        c.len()
                    )));
                }
                let wc = &w * &c;
                let z_next = &phi * &z + &wc;
                if !z_next.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "member {i} left the finite range on interval [{t}, {r}]"
                    )));
                }
                let e = c.dot(&wc);
                let eta_i = match oracles {
                    Some(os) => {
                        let c_exact = os[i].coefficient(&z, t, r)?;
                        Some(&w * (c_exact - &c))
                    }
                    None => None,
                };
                Ok((z_next, c, e, eta_i))
            })
            .collect();
        let rows = rows?;

        let mut next = DMatrix::zeros(n, d);
        let mut coeff = DMatrix::zeros(n, d);
        let mut eta_k = oracles.map(|_| DMatrix::zeros(n, d));
        for (i, (z_next, c, e, eta_i)) in rows.into_iter().enumerate() {
            next.set_row(i, &z_next.transpose());
            coeff.set_row(i, &c.transpose());
            energy[i] += e;
            if let (Some(m), Some(v)) = (eta_k.as_mut(), eta_i) {
                m.set_row(i, &v.transpose());
            }
        }
        states.push(next);
        coefficients.push(coeff);
        if let (Some(list), Some(m)) = (eta.as_mut(), eta_k) {
            list.push(m);
        }
    }

    Ok(PropagationTrace {
        grid: plan.grid.clone(),
        states,
        coefficients,
        eta,
        energy,
    })
}

/// Propagate every member of `rho0` through the grid under `model`.
pub fn propagate<M: CoefficientMap + ?Sized>(
    sys: &LtiSystem,
    model: &M,
    rho0: &Ensemble,
    plan: &PropagationPlan,
) -> Result<PropagationTrace> {
    propagate_inner(sys, model, rho0, None, plan)
}

/// Propagate with deterministic pairing `rho0[i] → rho1[i]`, recording the
/// per-interval steering error of `model` against the exact per-pair oracle.
pub fn propagate_with_targets<M: CoefficientMap + ?Sized>(
    sys: &LtiSystem,
    model: &M,
    rho0: &Ensemble,
    rho1: &Ensemble,
    plan: &PropagationPlan,
) -> Result<PropagationTrace> {
    if rho0.len() != rho1.len() || rho0.dim() != rho1.dim() {
        return Err(Error::Shape(
            "target ensemble must match the source member-for-member".into(),
        ));
    }
    let oracles: Result<Vec<ExactBridgeCoefficient>> = (0..rho0.len())
        .map(|i| ExactBridgeCoefficient::new(sys, &rho0.point(i), &rho1.point(i)))
        .collect();
    propagate_inner(sys, model, rho0, Some(&oracles?), plan)
}

/// Continuous-time control at `tau` inside interval `k` of a recorded trace:
/// `u(τ) = Bᵀ Φ(t_{k+1}, τ)ᵀ c_k`.
pub fn reconstruct_control(
    sys: &LtiSystem,
    trace: &PropagationTrace,
    member: usize,
    k: usize,
    tau: f64,
) -> Result<DVector<f64>> {
    if member >= trace.members() {
        return Err(Error::InvalidParameter(format!(
            "member {member} out of range (have {})",
            trace.members()
        )));
    }
    let coeff = trace
        .coefficients
        .get(k)
        .ok_or_else(|| Error::InvalidParameter(format!("no interval {k}")))?;
    let (t, r) = (trace.grid[k], trace.grid[k + 1]);
    if !(t..=r).contains(&tau) {
        return Err(Error::OutsideWindow { tau, t, r });
    }
    let c = coeff.row(member).transpose();
    let phi_rt = expm(sys.a(), r - tau)?;
    Ok(sys.b().transpose() * phi_rt.transpose() * c)
}

/// Window steering error against a known true target:
/// `η = z_r_true − Φ z_t − W·c_model(z_t, t, r)`.
pub fn eta_residual<M: CoefficientMap + ?Sized>(
    sys: &LtiSystem,
    model: &M,
    z_t: &DVector<f64>,
    z_r_true: &DVector<f64>,
    w: TimeWindow,
) -> Result<DVector<f64>> {
    let ops = sys.window_operators(w)?;
    let c = model.coefficient(z_t, w.start(), w.end())?;
    Ok(z_r_true - ops.phi() * z_t - ops.gramian() * c)
}

/// Energy distance between two point sets,
/// `2·E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖`, with exact double sums (V-statistic:
/// within-set sums include the zero diagonal).
pub fn ensemble_distance(x: &Ensemble, y: &Ensemble) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "ensembles have dimensions {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    let (xm, ym) = (x.points(), y.points());
    let pair_mean = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> f64 {
        let partial: Vec<f64> = (0..a.nrows())
            .into_par_iter()
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..b.nrows() {
                    acc += (a.row(i) - b.row(j)).norm();
                }
                acc
            })
            .collect();
        partial.iter().sum::<f64>() / (a.nrows() * b.nrows()) as f64
    };
    Ok(2.0 * pair_mean(xm, ym) - pair_mean(xm, xm) - pair_mean(ym, ym))
}
