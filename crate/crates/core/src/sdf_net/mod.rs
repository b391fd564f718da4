//! Signed-distance auto-decoder `f(x, z; theta) = s`: a plain 5-layer ReLU
//! MLP over the concatenation of a normalized point and a latent shape code,
//! with exact reverse-mode gradients.

mod analytic;
mod batch;
mod checkpoint;

pub use analytic::{analytic_sdf, smooth_min, FAMILY_BOUNDS, AnalyticShape, RoundedBox, ShapeParams, FAMILY_BLEND};
pub use batch::{CodeConditioned, MlpBatch};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const LAYER_COUNT: usize = 5;
pub const ACTIVATION: &str = "relu";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub latent: usize,
    pub hidden: usize,
}

impl Default for DecoderDims {
    fn default() -> Self {
        DecoderDims {
            latent: 64,
            hidden: 128,
        }
    }
}

impl DecoderDims {
    pub fn input(&self) -> usize {
        3 + self.latent
    }

    /// `(out, in)` per layer.
    pub fn layer_shapes(&self) -> [(usize, usize); LAYER_COUNT] {
        let h = self.hidden;
        [(h, self.input()), (h, h), (h, h), (h, h), (1, h)]
    }
}

/// Dense layer, weight stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Layer {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn w(&self, row: usize, col: usize) -> f64 {
        self.weight[row * self.in_dim + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub dims: DecoderDims,
    pub layers: Vec<Layer>,
}

/// Latent vector addressing one shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeCode(pub Vec<f64>);

impl ShapeCode {
    pub fn zeros(dim: usize) -> Self {
        ShapeCode(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Gradients of `upstream * f(x, z; theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_point: Vec3,
    pub d_code: Vec<f64>,
    pub d_params: DecoderParams,
}

impl DecoderParams {
    pub fn zeros(dims: DecoderDims) -> Self {
        let layers = dims
            .layer_shapes()
            .iter()
            .map(|&(o, i)| Layer::zeros(o, i))
            .collect();
        DecoderParams { dims, layers }
    }

    /// Uniform initialization in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(seed: u64, dims: DecoderDims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = DecoderParams::zeros(dims);
        for layer in &mut params.layers {
            let bound = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != LAYER_COUNT {
            return Err(Error::Config(format!(
                "decoder must have {LAYER_COUNT} layers, found {}",
                self.layers.len()
            )));
        }
        for (layer, &(o, i)) in self.layers.iter().zip(self.dims.layer_shapes().iter()) {
            if layer.out_dim != o || layer.in_dim != i || layer.weight.len() != o * i || layer.bias.len() != o {
                return Err(Error::Config(format!(
                    "layer shape {}x{} does not match dims {o}x{i}",
                    layer.out_dim, layer.in_dim
                )));
            }
        }
        if !self.iter_values().all(f64::is_finite) {
            return Err(Error::Numeric("decoder parameters contain non-finite values".into()));
        }
        Ok(())
    }

    /// All values in storage order: per layer, weights row-major then bias.
    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    pub fn iter_values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter_values().collect()
    }

    pub fn from_flat(dims: DecoderDims, values: &[f64]) -> Result<Self> {
        let mut params = DecoderParams::zeros(dims);
        if values.len() != params.num_values() {
            return Err(Error::Dimension {
                expected: params.num_values(),
                got: values.len(),
            });
        }
        for (dst, src) in params.iter_values_mut().zip(values) {
            *dst = *src;
        }
        Ok(params)
    }

    pub fn check_code(&self, z: &ShapeCode) -> Result<()> {
        if z.dim() != self.dims.latent {
            return Err(Error::Dimension {
                expected: self.dims.latent,
                got: z.dim(),
            });
        }
        Ok(())
    }

    fn input_vector(&self, z: &ShapeCode, x: &Vec3) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.dims.input());
        input.extend_from_slice(&[x.x, x.y, x.z]);
        input.extend_from_slice(&z.0);
        input
    }

    /// Forward pass returning the activations of every layer (post-ReLU for
    /// hidden layers, raw for the output).
    fn activations(&self, z: &ShapeCode, x: &Vec3) -> Vec<Vec<f64>> {
        let mut acts = vec![self.input_vector(z, x)];
        for (li, layer) in self.layers.iter().enumerate() {
            let a = acts.last().unwrap();
            let mut out = layer.bias.clone();
            for (r, o) in out.iter_mut().enumerate() {
                let row = &layer.weight[r * layer.in_dim..(r + 1) * layer.in_dim];
                *o += row.iter().zip(a).map(|(w, v)| w * v).sum::<f64>();
            }
            if li + 1 < LAYER_COUNT {
                for o in &mut out {
                    *o = o.max(0.0);
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Signed distance predicted for normalized point `x` under code `z`.
    pub fn forward(&self, z: &ShapeCode, x: &Vec3) -> Result<f64> {
        self.check_code(z)?;
        Ok(self.activations(z, x)[LAYER_COUNT][0])
    }

    /// Exact gradients of `upstream * f` with respect to point, code and weights.
    pub fn backward(&self, z: &ShapeCode, x: &Vec3, upstream: f64) -> Result<GradBundle> {
        self.check_code(z)?;
        let acts = self.activations(z, x);
        let mut d_params = DecoderParams::zeros(self.dims);
        let mut g = vec![upstream];
        for li in (0..LAYER_COUNT).rev() {
            let layer = &self.layers[li];
            let a_in = &acts[li];
            let grad_layer = &mut d_params.layers[li];
            for r in 0..layer.out_dim {
                grad_layer.bias[r] = g[r];
                let row = &mut grad_layer.weight[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (w, a) in row.iter_mut().zip(a_in) {
                    *w = g[r] * a;
                }
            }
            let mut g_in = vec![0.0; layer.in_dim];
            for (r, gr) in g.iter().enumerate() {
                if *gr == 0.0 {
                    continue;
                }
                let row = &layer.weight[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (gi, w) in g_in.iter_mut().zip(row) {
                    *gi += gr * w;
                }
            }
            if li > 0 {
                // ReLU mask of the layer feeding this one
                for (gi, a) in g_in.iter_mut().zip(a_in) {
                    if *a <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = g_in;
        }
        Ok(GradBundle {
            d_point: Vec3::new(g[0], g[1], g[2]),
            d_code: g[3..].to_vec(),
            d_params,
        })
    }
}

/// Free-function forms matching the operation names used across the crate.
pub fn decoder_forward(params: &DecoderParams, z: &ShapeCode, x: &Vec3) -> Result<f64> {
    params.forward(z, x)
}

pub fn decoder_backward(params: &DecoderParams, z: &ShapeCode, x: &Vec3, upstream: f64) -> Result<GradBundle> {
    params.backward(z, x, upstream)
}

pub fn init_params(seed: u64, dims: DecoderDims) -> DecoderParams {
    DecoderParams::init(seed, dims)
}

/// Huber-form smooth l1: value and derivative with respect to `r`.
pub fn smooth_l1(r: f64, delta: f64) -> (f64, f64) {
    debug_assert!(delta > 0.0);
    if r.abs() < delta {
        (0.5 * r * r / delta, r / delta)
    } else {
        (r.abs() - 0.5 * delta, r.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> DecoderDims {
        DecoderDims { latent: 4, hidden: 8 }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = DecoderParams::zeros(small_dims());
        let z = ShapeCode(vec![0.3, -0.2, 1.0, 5.0]);
        assert_eq!(p.forward(&z, &Vec3::new(0.1, 0.5, -0.9)).unwrap(), 0.0);
    }

    #[test]
    fn forward_is_reproducible() {
        let a = DecoderParams::init(42, DecoderDims::default());
        let b = DecoderParams::init(42, DecoderDims::default());
        let z = ShapeCode(vec![0.01; 64]);
        let x = Vec3::new(0.2, -0.3, 0.1);
        assert_eq!(a.forward(&z, &x).unwrap().to_bits(), b.forward(&z, &x).unwrap().to_bits());
    }

    #[test]
    fn code_dimension_mismatch_is_error() {
        let p = DecoderParams::init(1, small_dims());
        let err = p.forward(&ShapeCode::zeros(5), &Vec3::zeros()).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 4, got: 5 }));
        assert!(p.backward(&ShapeCode::zeros(3), &Vec3::zeros(), 1.0).is_err());
    }

    #[test]
    fn init_seeds_and_bounds() {
        let dims = DecoderDims::default();
        let a = DecoderParams::init(1, dims);
        let b = DecoderParams::init(1, dims);
        let c = DecoderParams::init(2, dims);
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
        for layer in &a.layers {
            let bound = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            assert!(layer.weight.iter().all(|w| w.abs() <= bound));
            assert!(layer.bias.iter().all(|b| *b == 0.0));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_bundle() {
        let p = DecoderParams::init(3, small_dims());
        let z = ShapeCode(vec![0.1, 0.2, -0.1, 0.0]);
        let g = p.backward(&z, &Vec3::new(0.3, 0.1, -0.2), 0.0).unwrap();
        assert_eq!(g.d_point, Vec3::zeros());
        assert!(g.d_code.iter().all(|v| *v == 0.0));
        assert!(g.d_params.iter_values().all(|v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = DecoderParams::init(4, small_dims());
        let z = ShapeCode(vec![0.1, 0.2, -0.1, 0.3]);
        let x = Vec3::new(0.3, 0.1, -0.2);
        let g1 = p.backward(&z, &x, 1.0).unwrap();
        let g2 = p.backward(&z, &x, 2.0).unwrap();
        assert_eq!(g2.d_point, g1.d_point * 2.0);
        for (a, b) in g1.d_code.iter().zip(&g2.d_code) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in g1.d_params.iter_values().zip(g2.d_params.iter_values()) {
            assert_eq!(2.0 * a, b);
        }
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0, 0.05), (0.0, 0.0));
        let (v, d) = smooth_l1(0.05, 0.05);
        assert!((v - 0.025).abs() < 1e-15);
        assert_eq!(d, 1.0);
        let (v, d) = smooth_l1(-1.0, 0.05);
        assert!((v - 0.975).abs() < 1e-15);
        assert_eq!(d, -1.0);
    }

    #[test]
    fn smooth_l1_continuity_and_symmetry() {
        for delta in [0.01, 0.05, 1.0] {
            let eps = 1e-13;
            let (vl, dl) = smooth_l1(delta - eps, delta);
            let (vr, dr) = smooth_l1(delta + eps, delta);
            assert!((vl - vr).abs() < 1e-12);
            assert!((dl - dr).abs() < 1e-10);
            for r in [0.003, 0.2, 3.0] {
                assert_eq!(smooth_l1(r, delta).0, smooth_l1(-r, delta).0);
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let p = DecoderParams::init(9, small_dims());
        let q = DecoderParams::from_flat(p.dims, &p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(DecoderParams::from_flat(p.dims, &[0.0; 3]).is_err());
    }
}
