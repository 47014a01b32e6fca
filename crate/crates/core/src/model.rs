//! The learned interval-coefficient field `c_θ(z, t, r)`.
//!
//! A small fully-connected network over the features `(z, t, r, r−t)` with
//! three differentiation paths, all hand-rolled for the fixed architecture
//! family: plain evaluation, forward-mode dual numbers for the directional
//! derivative `dc_θ/dt` along a bridge (exact, not finite differences), and
//! reverse-mode parameter gradients for the training loss.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smooth elementwise nonlinearity applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    /// Value and first derivative at `x`.
    fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-x).exp());
                (x * sig, sig * (1.0 + x * (1.0 - sig)))
            }
            Activation::Tanh => {
                let th = x.tanh();
                (th, 1.0 - th * th)
            }
        }
    }

    fn tag(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Tanh),
            other => Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        }
    }
}

/// Anything that maps `(z, t, r)` to a steering coefficient. Implemented by
/// the learned field and by the exact oracles the tests steer with.
pub trait CoefficientMap: Sync {
    fn state_dim(&self) -> usize;
    fn coefficient(&self, z: &DVector<f64>, t: f64, r: f64) -> Result<DVector<f64>>;
}

/// A coefficient map that can also report its directional derivative, which
/// is what the training residual needs. The learned field differentiates
/// exactly; oracle implementations may fall back to finite differences.
pub trait CoefficientMapDiff: CoefficientMap {
    fn coefficient_jvp(
        &self,
        req: &DirectionalDerivativeRequest,
    ) -> Result<(DVector<f64>, DVector<f64>)>;
}

/// The all-zeros coefficient: propagating with it is pure free drift.
#[derive(Debug, Clone, Copy)]
pub struct ZeroCoefficient {
    pub dim: usize,
}

impl ZeroCoefficient {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl CoefficientMap for ZeroCoefficient {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn coefficient(&self, z: &DVector<f64>, _t: f64, _r: f64) -> Result<DVector<f64>> {
        if z.len() != self.dim {
            return Err(Error::Shape(format!(
                "state has length {}, expected {}",
                z.len(),
                self.dim
            )));
        }
        Ok(DVector::zeros(self.dim))
    }
}

/// Point and direction for one forward-mode derivative: the network is
/// differentiated along `(dz, dt, dr)`. Training always uses `dz = ż_t`
/// (the bridge velocity), `dt = 1`, `dr = 0` — r stays fixed while t moves.
#[derive(Debug, Clone, Copy)]
pub struct DirectionalDerivativeRequest<'a> {
    pub z: &'a DVector<f64>,
    pub t: f64,
    pub r: f64,
    pub dz: &'a DVector<f64>,
    pub dt: f64,
    pub dr: f64,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SWFMCOEF";
const CHECKPOINT_VERSION: u32 = 1;

/// Feed-forward interval-coefficient field.
///
/// `layer_dims = [d+3, h₁, …, h_k, d]`: input features `(z, t, r, r−t)`,
/// output the coefficient. Parameters live in one flat vector, layer by
/// layer, each layer as its weight matrix in row-major order followed by its
/// bias — the same layout the checkpoint file serializes.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidParameter(
            "need at least input and output layer dims".into(),
        ));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidParameter("zero-width layer".into()));
    }
    let (input, output) = (layer_dims[0], *layer_dims.last().unwrap());
    if input != output + 3 {
        return Err(Error::InvalidParameter(format!(
            "input width must be output width + 3 for features (z, t, r, r−t); got {input} and {output}"
        )));
    }
    Ok(())
}

fn param_count_for(layer_dims: &[usize]) -> usize {
    layer_dims
        .windows(2)
        .map(|w| w[1] * (w[0] + 1))
        .sum()
}

impl CoefficientField {
    /// Fresh field with SiLU hidden layers: hidden weights uniform in
    /// `±√(1/fan_in)`, biases zero, and the final layer all zero so the
    /// initial policy is exact free drift. Deterministic in `seed`.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        Self::init_with(layer_dims, Activation::Silu, seed)
    }

    pub fn init_with(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = layer_dims.len() - 1;
        let mut params = Vec::with_capacity(param_count_for(layer_dims));
        for l in 0..n_layers {
            let (nin, nout) = (layer_dims[l], layer_dims[l + 1]);
            let last = l + 1 == n_layers;
            let bound = (1.0 / nin as f64).sqrt();
            for _ in 0..nin * nout {
                params.push(if last {
                    0.0
                } else {
                    (rng.random::<f64>() * 2.0 - 1.0) * bound
                });
            }
            params.resize(params.len() + nout, 0.0);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            params,
            activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access for the optimizer. Single-writer contract:
    /// no forward/jvp/backprop may run concurrently with an update.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn check_state(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "state has length {}, field expects {}",
                z.len(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    fn features(&self, z: &DVector<f64>, t: f64, r: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend(z.iter().copied());
        x.push(t);
        x.push(r);
        x.push(r - t);
        x
    }

    /// Slices of one layer's weights (row-major `nout × nin`) and bias.
    fn layer(&self, offset: usize, nin: usize, nout: usize) -> (&[f64], &[f64]) {
        let w_end = offset + nin * nout;
        (&self.params[offset..w_end], &self.params[w_end..w_end + nout])
    }

    /// `c_θ(z, t, r)`. Pure: identical inputs give identical outputs.
    pub fn forward(&self, z: &DVector<f64>, t: f64, r: f64) -> Result<DVector<f64>> {
        self.check_state(z)?;
        let mut x = self.features(z, t, r);
        let mut offset = 0;
        let n_layers = self.layer_dims.len() - 1;
        for l in 0..n_layers {
            let (nin, nout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let (w, b) = self.layer(offset, nin, nout);
            offset += nout * (nin + 1);
            let mut y = vec![0.0; nout];
            for o in 0..nout {
                let row = &w[o * nin..(o + 1) * nin];
                let mut acc = b[o];
                for i in 0..nin {
                    acc += row[i] * x[i];
                }
                y[o] = acc;
            }
            if l + 1 < n_layers {
                for v in &mut y {
                    *v = self.activation.eval(*v).0;
                }
            }
            x = y;
        }
        Ok(DVector::from_vec(x))
    }

    /// Value and exact directional derivative along `(dz, dt, dr)`, by
    /// propagating dual numbers through every layer.
    pub fn jvp(&self, req: &DirectionalDerivativeRequest) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_state(req.z)?;
        if req.dz.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "tangent has length {}, field expects {}",
                req.dz.len(),
                self.output_dim()
            )));
        }
        let mut x = self.features(req.z, req.t, req.r);
        let mut dx = Vec::with_capacity(self.input_dim());
        dx.extend(req.dz.iter().copied());
        dx.push(req.dt);
        dx.push(req.dr);
        dx.push(req.dr - req.dt);

        let mut offset = 0;
        let n_layers = self.layer_dims.len() - 1;
        for l in 0..n_layers {
            let (nin, nout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let (w, b) = self.layer(offset, nin, nout);
            offset += nout * (nin + 1);
            let mut y = vec![0.0; nout];
            let mut dy = vec![0.0; nout];
            for o in 0..nout {
                let row = &w[o * nin..(o + 1) * nin];
                let mut acc = b[o];
                let mut dacc = 0.0;
                for i in 0..nin {
                    acc += row[i] * x[i];
                    dacc += row[i] * dx[i];
                }
                y[o] = acc;
                dy[o] = dacc;
            }
            if l + 1 < n_layers {
                for o in 0..nout {
                    let (val, slope) = self.activation.eval(y[o]);
                    y[o] = val;
                    dy[o] *= slope;
                }
            }
            x = y;
            dx = dy;
        }
        Ok((DVector::from_vec(x), DVector::from_vec(dx)))
    }

    /// Gradient of `cotangentᵀ · c_θ(z, t, r)` with respect to every
    /// parameter, in the flat parameter layout.
    pub fn backprop(
        &self,
        z: &DVector<f64>,
        t: f64,
        r: f64,
        output_cotangent: &DVector<f64>,
    ) -> Result<Vec<f64>> {
        self.check_state(z)?;
        if output_cotangent.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "cotangent has length {}, field expects {}",
                output_cotangent.len(),
                self.output_dim()
            )));
        }
        let n_layers = self.layer_dims.len() - 1;
        // Forward trace: layer inputs and pre-activations.
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut x = self.features(z, t, r);
        let mut offset = 0;
        for l in 0..n_layers {
            let (nin, nout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let (w, b) = self.layer(offset, nin, nout);
            offset += nout * (nin + 1);
            let mut y = vec![0.0; nout];
            for o in 0..nout {
                let row = &w[o * nin..(o + 1) * nin];
                let mut acc = b[o];
                for i in 0..nin {
                    acc += row[i] * x[i];
                }
                y[o] = acc;
            }
            inputs.push(x);
            preacts.push(y.clone());
            if l + 1 < n_layers {
                for v in &mut y {
                    *v = self.activation.eval(*v).0;
                }
            }
            x = y;
        }

        // Reverse sweep.
        let mut grad = vec![0.0; self.params.len()];
        let mut g: Vec<f64> = output_cotangent.iter().copied().collect();
        let mut layer_offsets = Vec::with_capacity(n_layers);
        let mut acc = 0;
        for l in 0..n_layers {
            layer_offsets.push(acc);
            acc += self.layer_dims[l + 1] * (self.layer_dims[l] + 1);
        }
        for l in (0..n_layers).rev() {
            let (nin, nout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let offset = layer_offsets[l];
            let x_in = &inputs[l];
            for o in 0..nout {
                let w_row = offset + o * nin;
                for i in 0..nin {
                    grad[w_row + i] = g[o] * x_in[i];
                }
                grad[offset + nout * nin + o] = g[o];
            }
            if l > 0 {
                let w = &self.params[offset..offset + nin * nout];
                let mut g_prev = vec![0.0; nin];
                for o in 0..nout {
                    let row = &w[o * nin..(o + 1) * nin];
                    for i in 0..nin {
                        g_prev[i] += row[i] * g[o];
                    }
                }
                for (gp, y) in g_prev.iter_mut().zip(&preacts[l - 1]) {
                    *gp *= self.activation.eval(*y).1;
                }
                g = g_prev;
            }
        }
        Ok(grad)
    }

    /// Serialize to a versioned binary checkpoint: magic, format version,
    /// activation tag, layer dims, then the flat little-endian f64 parameter
    /// array.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 4 * self.layer_dims.len() + 8 * self.params.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.activation.tag().to_le_bytes());
        buf.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated checkpoint: ran out of bytes reading {what}"
                )));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let magic = take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic: not a coefficient-field checkpoint".into()));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let activation = Activation::from_tag(u32::from_le_bytes(
            take(4, "activation tag")?.try_into().unwrap(),
        ))?;
        let n_dims = u32::from_le_bytes(take(4, "layer count")?.try_into().unwrap()) as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(Error::Checkpoint(format!("implausible layer count {n_dims}")));
        }
        let mut layer_dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            layer_dims.push(u32::from_le_bytes(take(4, "layer dim")?.try_into().unwrap()) as usize);
        }
        validate_dims(&layer_dims).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n_params = param_count_for(&layer_dims);
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(f64::from_le_bytes(take(8, "parameters")?.try_into().unwrap()));
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "trailing bytes: checkpoint has {} bytes past the parameter array",
                bytes.len() - pos
            )));
        }
        Ok(Self {
            layer_dims,
            params,
            activation,
        })
    }
}

impl CoefficientMap for CoefficientField {
    fn state_dim(&self) -> usize {
        self.output_dim()
    }

    fn coefficient(&self, z: &DVector<f64>, t: f64, r: f64) -> Result<DVector<f64>> {
        self.forward(z, t, r)
    }
}

impl CoefficientMapDiff for CoefficientField {
    fn coefficient_jvp(
        &self,
        req: &DirectionalDerivativeRequest,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.jvp(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut impl Rng, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn parameter_count_matches_layout() {
        let m = CoefficientField::init(&[5, 128, 128, 2], 0).unwrap();
        assert_eq!(m.param_count(), 17538);
        assert_eq!(m.param_count(), m.params().len());
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let a = CoefficientField::init(&[5, 16, 2], 7).unwrap();
        let b = CoefficientField::init(&[5, 16, 2], 7).unwrap();
        let c = CoefficientField::init(&[5, 16, 2], 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_dims_are_rejected() {
        assert!(CoefficientField::init(&[5], 0).is_err());
        assert!(CoefficientField::init(&[5, 0, 2], 0).is_err());
        // Input must be output + 3.
        assert!(CoefficientField::init(&[4, 16, 2], 0).is_err());
    }

    #[test]
    fn fresh_field_outputs_zero_everywhere() {
        let m = CoefficientField::init(&[5, 32, 32, 2], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let z = random_vec(&mut rng, 2);
            let out = m.forward(&z, 0.3, 0.9).unwrap();
            assert_eq!(out, DVector::zeros(2));
        }
    }

    #[test]
    fn forward_matches_hand_computation_on_one_hidden_unit() {
        // d = 1: features (z, t, r, r−t), one hidden unit, scalar output.
        let mut m = CoefficientField::init(&[4, 1, 1], 0).unwrap();
        m.params_mut()
            .copy_from_slice(&[0.5, -0.25, 0.1, 0.2, 0.3, 2.0, -0.1]);
        let (z, t, r) = (1.0f64, 0.25, 0.75);
        let y1 = 0.5 * z - 0.25 * t + 0.1 * r + 0.2 * (r - t) + 0.3;
        let sig = 1.0 / (1.0 + (-y1).exp());
        let want = 2.0 * (y1 * sig) - 0.1;
        let got = m.forward(&DVector::from_row_slice(&[z]), t, r).unwrap();
        assert_relative_eq!(got[0], want, epsilon = 1e-15);
    }

    #[test]
    fn forward_is_pure() {
        let mut m = CoefficientField::init(&[5, 8, 2], 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..m.param_count()).map(|_| rng.random::<f64>() - 0.5).collect();
        m.params_mut().copy_from_slice(&p);
        let z = random_vec(&mut rng, 2);
        let a = m.forward(&z, 0.2, 0.8).unwrap();
        let b = m.forward(&z, 0.2, 0.8).unwrap();
        assert_eq!(a, b);
    }

    fn randomized_field(dims: &[usize], seed: u64) -> CoefficientField {
        // init zeroes the last layer; overwrite everything for derivative tests.
        let mut m = CoefficientField::init(dims, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let p: Vec<f64> = (0..m.param_count())
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * 0.7)
            .collect();
        m.params_mut().copy_from_slice(&p);
        m
    }

    #[test]
    fn jvp_zero_tangent_gives_zero_derivative() {
        let m = randomized_field(&[5, 12, 2], 1);
        let z = DVector::from_row_slice(&[0.4, -0.2]);
        let dz = DVector::zeros(2);
        let (_, deriv) = m
            .jvp(&DirectionalDerivativeRequest {
                z: &z,
                t: 0.1,
                r: 0.9,
                dz: &dz,
                dt: 0.0,
                dr: 0.0,
            })
            .unwrap();
        assert_eq!(deriv, DVector::zeros(2));
    }

    #[test]
    fn jvp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = randomized_field(&[5, 24, 24, 2], 4);
        for _ in 0..20 {
            let z = random_vec(&mut rng, 2);
            let dz = random_vec(&mut rng, 2);
            let (t, r) = (0.2 + 0.3 * rng.random::<f64>(), 0.6 + 0.3 * rng.random::<f64>());
            let (dt, dr) = (1.0, 0.0);
            let (val, deriv) = m
                .jvp(&DirectionalDerivativeRequest { z: &z, t, r, dz: &dz, dt, dr })
                .unwrap();
            assert_eq!(val, m.forward(&z, t, r).unwrap());
            let h = 1e-5;
            let plus = m.forward(&(&z + &dz * h), t + dt * h, r + dr * h).unwrap();
            let minus = m.forward(&(&z - &dz * h), t - dt * h, r - dr * h).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            assert!((&deriv - &fd).amax() < 1e-6, "jvp vs fd gap {}", (&deriv - &fd).amax());
        }
    }

    #[test]
    fn jvp_of_linear_field_is_the_weight_action() {
        // No hidden layer: c = Wx + b, so the derivative is W·(dz,dt,dr,dr−dt).
        let mut m = CoefficientField::init(&[4, 1], 0).unwrap();
        m.params_mut().copy_from_slice(&[1.5, -2.0, 0.5, 3.0, 0.25]);
        let z = DVector::from_row_slice(&[0.3]);
        let dz = DVector::from_row_slice(&[2.0]);
        let (dt, dr) = (1.0, 0.0);
        let (_, deriv) = m
            .jvp(&DirectionalDerivativeRequest { z: &z, t: 0.2, r: 0.7, dz: &dz, dt, dr })
            .unwrap();
        let want = 1.5 * 2.0 - 2.0 * dt + 0.5 * dr + 3.0 * (dr - dt);
        assert_relative_eq!(deriv[0], want, epsilon = 1e-14);
    }

    #[test]
    fn jvp_is_linear_in_the_tangent() {
        let m = randomized_field(&[5, 16, 2], 9);
        let z = DVector::from_row_slice(&[0.1, -0.6]);
        let u = (DVector::from_row_slice(&[1.0, 2.0]), 0.5, -0.25);
        let w = (DVector::from_row_slice(&[-0.5, 0.75]), 1.0, 0.0);
        let (alpha, beta) = (1.75, -0.4);
        let eval = |dz: &DVector<f64>, dt: f64, dr: f64| {
            m.jvp(&DirectionalDerivativeRequest { z: &z, t: 0.3, r: 0.8, dz, dt, dr })
                .unwrap()
                .1
        };
        let combo = eval(
            &(&u.0 * alpha + &w.0 * beta),
            alpha * u.1 + beta * w.1,
            alpha * u.2 + beta * w.2,
        );
        let split = eval(&u.0, u.1, u.2) * alpha + eval(&w.0, w.1, w.2) * beta;
        assert_relative_eq!(combo, split, epsilon = 1e-12);
    }

    #[test]
    fn backprop_zero_cotangent_gives_zero_gradient() {
        let m = randomized_field(&[5, 10, 2], 5);
        let z = DVector::from_row_slice(&[0.2, 0.3]);
        let g = m.backprop(&z, 0.1, 0.8, &DVector::zeros(2)).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backprop_matches_per_parameter_finite_differences() {
        // 4·4+4 + 4·2+2 = 30 parameters.
        let base = randomized_field(&[4, 4, 1], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let z = random_vec(&mut rng, 1);
            let cot = random_vec(&mut rng, 1);
            let (t, r) = (0.25, 0.9);
            let grad = base.backprop(&z, t, r, &cot).unwrap();
            let h = 1e-6;
            for (k, &gk) in grad.iter().enumerate() {
                let mut plus = base.clone();
                plus.params_mut()[k] += h;
                let mut minus = base.clone();
                minus.params_mut()[k] -= h;
                let f = |m: &CoefficientField| cot.dot(&m.forward(&z, t, r).unwrap());
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let scale = fd.abs().max(gk.abs()).max(1e-3);
                assert!(
                    (gk - fd).abs() / scale <= 1e-5,
                    "param {k}: analytic {gk} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn zero_final_layer_blocks_gradient_to_hidden_layers() {
        let m = CoefficientField::init(&[5, 8, 2], 12).unwrap();
        let z = DVector::from_row_slice(&[0.5, -0.5]);
        // Loss ‖c‖²: cotangent 2c = 0, so every gradient entry is zero.
        let c = m.forward(&z, 0.2, 0.9).unwrap();
        let g = m.backprop(&z, 0.2, 0.9, &(c * 2.0)).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        // Generic cotangent: the final layer's own parameters see gradient,
        // but nothing propagates through the zero weight matrix.
        let g = m
            .backprop(&z, 0.2, 0.9, &DVector::from_row_slice(&[1.0, -1.0]))
            .unwrap();
        let hidden_params = 8 * 5 + 8;
        assert!(g[..hidden_params].iter().all(|&x| x == 0.0));
        assert!(g[hidden_params..].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let m = CoefficientField::init(&[5, 8, 2], 0).unwrap();
        let bad = DVector::zeros(3);
        let good = DVector::zeros(2);
        assert!(matches!(m.forward(&bad, 0.1, 0.9), Err(Error::Shape(_))));
        assert!(matches!(
            m.backprop(&good, 0.1, 0.9, &bad),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            m.jvp(&DirectionalDerivativeRequest {
                z: &good,
                t: 0.1,
                r: 0.9,
                dz: &bad,
                dt: 1.0,
                dr: 0.0
            }),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ckpt");
        let m = randomized_field(&[5, 16, 8, 2], 13);
        m.save(&path).unwrap();
        let back = CoefficientField::load(&path).unwrap();
        assert_eq!(m, back);
        let z = DVector::from_row_slice(&[0.7, -0.3]);
        let a = m.forward(&z, 0.15, 0.65).unwrap();
        let b = back.forward(&z, 0.15, 0.65).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ckpt");
        let m = randomized_field(&[5, 4, 2], 14);
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("truncated.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
        match CoefficientField::load(&truncated) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected truncation error, got {other:?}"),
        }

        let wrong_magic = dir.path().join("magic.ckpt");
        let mut tampered = bytes.clone();
        tampered[0] = b'X';
        std::fs::write(&wrong_magic, &tampered).unwrap();
        match CoefficientField::load(&wrong_magic) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected magic error, got {other:?}"),
        }

        let trailing = dir.path().join("trailing.ckpt");
        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0u8; 4]);
        std::fs::write(&trailing, &padded).unwrap();
        match CoefficientField::load(&trailing) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("trailing"), "{msg}"),
            other => panic!("expected trailing-bytes error, got {other:?}"),
        }

        let wrong_version = dir.path().join("version.ckpt");
        let mut bumped = bytes.clone();
        bumped[8] = 9;
        std::fs::write(&wrong_version, &bumped).unwrap();
        match CoefficientField::load(&wrong_version) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn zero_coefficient_map_is_free_drift() {
        let zc = ZeroCoefficient { dim: 3 };
        let z = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(zc.coefficient(&z, 0.0, 1.0).unwrap(), DVector::zeros(3));
        assert!(zc.coefficient(&DVector::zeros(2), 0.0, 1.0).is_err());
    }
}
