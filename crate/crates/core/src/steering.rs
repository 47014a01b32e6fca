//! Exact finite-horizon minimum-energy steering.
//!
//! Over a window `[t, r]` the minimum-energy control moving `z_t` to `z_r`
//! is `u(τ) = Bᵀ Φ(r,τ)ᵀ c` with the single coefficient vector
//!
//! ```text
//! c(z_t, t, r) = W(t,r)⁻¹ (z_r − Φ(r,t) z_t),
//! ```
//!
//! and applying it lands at `z_r = Φ(r,t) z_t + W(t,r) c`. The module also
//! builds the full-horizon bridge between endpoint draws — the supervision
//! path for training — and exposes the interval-additivity residual used by
//! the verification suite.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::{expm, LtiSystem, OperatorCache, TimeWindow, WindowOperators};

/// Minimum-energy coefficient for one window, anchored at the state it was
/// solved from.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringCoefficient {
    /// Gramian-weighted displacement: `W(t,r) c = z_r − Φ(r,t) z_t`.
    pub c: DVector<f64>,
    pub window: TimeWindow,
    /// The `z_t` the coefficient steers from.
    pub anchor_state: DVector<f64>,
}

/// One supervised draw: endpoint pair, training window, the bridge states at
/// both window edges, and the input-channel bridge velocity `B·v(z_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSample {
    pub z0: DVector<f64>,
    pub z1: DVector<f64>,
    pub window: TimeWindow,
    pub z_t: DVector<f64>,
    pub z_r: DVector<f64>,
    pub bridge_action: DVector<f64>,
}

fn check_dim(sys: &LtiSystem, v: &DVector<f64>, what: &str) -> Result<()> {
    if v.len() != sys.dim() {
        return Err(Error::Shape(format!(
            "{what} has length {}, system dimension is {}",
            v.len(),
            sys.dim()
        )));
    }
    Ok(())
}

/// `c = W(t,r)⁻¹ (z_r − Φ(r,t) z_t)` through the cached Cholesky factor.
pub fn exact_coefficient(
    sys: &LtiSystem,
    ops: &WindowOperators,
    z_t: &DVector<f64>,
    z_r: &DVector<f64>,
) -> Result<SteeringCoefficient> {
    check_dim(sys, z_t, "z_t")?;
    check_dim(sys, z_r, "z_r")?;
    let c = ops.solve(&(z_r - ops.phi() * z_t));
    Ok(SteeringCoefficient {
        c,
        window: ops.window(),
        anchor_state: z_t.clone(),
    })
}

/// Control signal `u(τ) = Bᵀ Φ(r,τ)ᵀ c` realized by a coefficient.
pub fn control_at(sys: &LtiSystem, coeff: &SteeringCoefficient, tau: f64) -> Result<DVector<f64>> {
    let w = coeff.window;
    if !w.contains(tau) {
        return Err(Error::OutsideWindow {
            tau,
            t: w.start(),
            r: w.end(),
        });
    }
    let phi_r_tau = expm(sys.a(), w.end() - tau)?;
    Ok(sys.b().transpose() * (phi_r_tau.transpose() * &coeff.c))
}

/// Endpoint reached by applying a coefficient: `z_r = Φ(r,t) z_t + W(t,r) c`.
pub fn endpoint_update(
    ops: &WindowOperators,
    z_t: &DVector<f64>,
    c: &DVector<f64>,
) -> DVector<f64> {
    ops.phi() * z_t + ops.gramian() * c
}

/// Full-horizon minimum-energy bridge pinned to one endpoint pair. The
/// horizon solve `λ = W(0,1)⁻¹ (z1 − Φ(1,0) z0)` happens once; states and
/// actions at interior times reuse it.
#[derive(Debug, Clone)]
pub struct Bridge {
    z0: DVector<f64>,
    z1: DVector<f64>,
    lambda: DVector<f64>,
}

impl Bridge {
    pub fn new(cache: &mut OperatorCache, z0: DVector<f64>, z1: DVector<f64>) -> Result<Self> {
        check_dim(cache.sys(), &z0, "z0")?;
        check_dim(cache.sys(), &z1, "z1")?;
        let ops = cache.ops(1.0)?;
        let lambda = ops.solve(&(&z1 - &ops.phi * &z0))?;
        Ok(Self { z0, z1, lambda })
    }

    /// Bridge state `z_τ = Φ(τ,0) z0 + W(0,τ) Φ(1,τ)ᵀ λ`.
    pub fn state(&self, cache: &mut OperatorCache, tau: f64) -> Result<DVector<f64>> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::OutsideWindow { tau, t: 0.0, r: 1.0 });
        }
        if tau == 0.0 {
            return Ok(self.z0.clone());
        }
        if tau == 1.0 {
            // The bridge interpolates its endpoints by construction.
            return Ok(self.z1.clone());
        }
        let (phi_tau_0, w_0_tau) = {
            let head = cache.ops(tau)?;
            (head.phi.clone(), head.gramian.clone())
        };
        let phi_1_tau = cache.ops(1.0 - tau)?.phi.clone();
        Ok(phi_tau_0 * &self.z0 + w_0_tau * (phi_1_tau.transpose() * &self.lambda))
    }

    /// Input-channel bridge velocity `B v(z_t, t) = B Bᵀ Φ(1,t)ᵀ λ`.
    pub fn action(&self, cache: &mut OperatorCache, t: f64) -> Result<DVector<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutsideWindow { tau: t, t: 0.0, r: 1.0 });
        }
        let d = cache.sys().dim();
        let phi_1_t = if t == 1.0 {
            DMatrix::identity(d, d)
        } else {
            cache.ops(1.0 - t)?.phi.clone()
        };
        Ok(cache.sys().bbt() * (phi_1_t.transpose() * &self.lambda))
    }
}

/// Bridge state at one time; builds a fresh operator cache. Use [`Bridge`]
/// with a shared cache when evaluating many times or many pairs.
pub fn bridge_state(
    sys: &LtiSystem,
    z0: &DVector<f64>,
    z1: &DVector<f64>,
    tau: f64,
) -> Result<DVector<f64>> {
    let mut cache = OperatorCache::new(sys);
    Bridge::new(&mut cache, z0.clone(), z1.clone())?.state(&mut cache, tau)
}

/// Input-channel bridge velocity at one time; builds a fresh operator cache.
pub fn bridge_action(
    sys: &LtiSystem,
    z0: &DVector<f64>,
    z1: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    let mut cache = OperatorCache::new(sys);
    Bridge::new(&mut cache, z0.clone(), z1.clone())?.action(&mut cache, t)
}

/// Assemble a training draw: bridge states at both window edges plus the
/// bridge action at the left edge.
pub fn make_bridge_sample(
    sys: &LtiSystem,
    z0: &DVector<f64>,
    z1: &DVector<f64>,
    w: TimeWindow,
) -> Result<BridgeSample> {
    let mut cache = OperatorCache::new(sys);
    make_bridge_sample_cached(&mut cache, z0, z1, w)
}

/// [`make_bridge_sample`] against a shared operator cache; the batch sampler
/// calls this so the horizon solve factors amortize across draws.
pub fn make_bridge_sample_cached(
    cache: &mut OperatorCache,
    z0: &DVector<f64>,
    z1: &DVector<f64>,
    w: TimeWindow,
) -> Result<BridgeSample> {
    let bridge = Bridge::new(cache, z0.clone(), z1.clone())?;
    let z_t = bridge.state(cache, w.start())?;
    let z_r = bridge.state(cache, w.end())?;
    let action = bridge.action(cache, w.start())?;
    Ok(BridgeSample {
        z0: z0.clone(),
        z1: z1.clone(),
        window: w,
        z_t,
        z_r,
        bridge_action: action,
    })
}

/// Interval-additivity defect over a split t < s < r:
///
/// ```text
/// ‖W(t,r)c(z_t,t,r) − Φ(r,s)W(t,s)c(z_t,t,s) − W(s,r)c(z_s,s,r)‖.
/// ```
///
/// Identically zero in exact arithmetic for any triple of states, in
/// particular along any trajectory of the dynamics; callers feed bridge
/// states at t, s, r.
pub fn additivity_residual(
    sys: &LtiSystem,
    z_t: &DVector<f64>,
    z_s: &DVector<f64>,
    z_r: &DVector<f64>,
    t: f64,
    s: f64,
    r: f64,
) -> Result<f64> {
    if !(t < s && s < r) {
        return Err(Error::Window(format!("need t < s < r, got ({t}, {s}, {r})")));
    }
    let ops_tr = sys.window_operators(TimeWindow::new(t, r)?)?;
    let ops_ts = sys.window_operators(TimeWindow::new(t, s)?)?;
    let ops_sr = sys.window_operators(TimeWindow::new(s, r)?)?;
    let c_tr = exact_coefficient(sys, &ops_tr, z_t, z_r)?;
    let c_ts = exact_coefficient(sys, &ops_ts, z_t, z_s)?;
    let c_sr = exact_coefficient(sys, &ops_sr, z_s, z_r)?;
    let whole = ops_tr.gramian() * &c_tr.c;
    let head = ops_sr.phi() * (ops_ts.gramian() * &c_ts.c);
    let tail = ops_sr.gramian() * &c_sr.c;
    Ok((whole - head - tail).norm())
}

/// Exact steering policy for one fixed endpoint pair: queried at `(z, t, r)`
/// it solves for the coefficient that lands on the pair's minimum-energy
/// bridge at time r, from wherever `z` actually is. State feedback by
/// construction — deviations from the bridge are corrected, not tracked.
///
/// Oracle for tests and diagnostics; training never sees it.
pub struct ExactBridgeCoefficient {
    sys: LtiSystem,
    bridge: Bridge,
    cache: std::sync::Mutex<OperatorCache>,
}

impl ExactBridgeCoefficient {
    pub fn new(sys: &LtiSystem, z0: &DVector<f64>, z1: &DVector<f64>) -> Result<Self> {
        let mut cache = OperatorCache::new(sys);
        let bridge = Bridge::new(&mut cache, z0.clone(), z1.clone())?;
        Ok(Self {
            sys: sys.clone(),
            bridge,
            cache: std::sync::Mutex::new(cache),
        })
    }
}

impl crate::model::CoefficientMap for ExactBridgeCoefficient {
    fn state_dim(&self) -> usize {
        self.sys.dim()
    }

    fn coefficient(&self, z: &DVector<f64>, t: f64, r: f64) -> Result<DVector<f64>> {
        check_dim(&self.sys, z, "z")?;
        if !(0.0 <= t && t < r && r <= 1.0) {
            return Err(Error::Window(format!("need 0 <= t < r <= 1, got [{t}, {r}]")));
        }
        let mut cache = self.cache.lock().expect("operator cache poisoned");
        let target = self.bridge.state(&mut cache, r)?;
        let ops = cache.ops(r - t)?;
        ops.solve(&(target - &ops.phi * z))
    }
}

impl crate::model::CoefficientMapDiff for ExactBridgeCoefficient {
    /// Central differences with h = 1e-6; the closed form has no cheap exact
    /// derivative in t because the window operators move with it.
    fn coefficient_jvp(
        &self,
        req: &crate::model::DirectionalDerivativeRequest,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        use crate::model::CoefficientMap as _;
        let h = 1e-6;
        let value = self.coefficient(req.z, req.t, req.r)?;
        let plus = self.coefficient(
            &(req.z + req.dz * h),
            req.t + req.dt * h,
            req.r + req.dr * h,
        )?;
        let minus = self.coefficient(
            &(req.z - req.dz * h),
            req.t - req.dt * h,
            req.r - req.dr * h,
        )?;
        Ok((value, (plus - minus) / (2.0 * h)))
    }
}

/// Fixed-step RK4 rollout of `ż = Az + B u(τ)` from `z_start` over
/// `[t0, t1]`. Verification oracle: every steering claim about endpoints is
/// cross-checked against this integrator.
pub fn integrate_controlled<F>(
    sys: &LtiSystem,
    z_start: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
    u: F,
) -> DVector<f64>
where
    F: Fn(f64) -> DVector<f64>,
{
    assert!(steps > 0 && t1 > t0);
    let h = (t1 - t0) / steps as f64;
    // Clamp evaluation times: t0 + k·h can overshoot t1 by one ulp.
    let f = |tau: f64, z: &DVector<f64>| sys.a() * z + sys.b() * u(tau.clamp(t0, t1));
    let mut z = z_start.clone();
    for k in 0..steps {
        let tau = t0 + k as f64 * h;
        let k1 = f(tau, &z);
        let k2 = f(tau + 0.5 * h, &(&z + &k1 * (0.5 * h)));
        let k3 = f(tau + 0.5 * h, &(&z + &k2 * (0.5 * h)));
        let k4 = f(tau + h, &(&z + &k3 * h));
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    z
}
