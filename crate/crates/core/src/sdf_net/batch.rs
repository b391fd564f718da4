//! Batched decoder evaluation on top of `matrixmultiply` kernels. Rows of
//! every matrix are samples; all buffers are row-major.

use super::{DecoderParams, Layer, ShapeCode, LAYER_COUNT};
use crate::error::Result;
use crate::geometry::Vec3;

/// `c (m x n) = a (m x k) * w^T + beta * c`, where `w` is `n x k`.
fn gemm_a_wt(m: usize, k: usize, n: usize, a: &[f64], w: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && w.len() >= n * k && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m x n) = g (m x k) * w`, where `w` is `k x n`.
fn gemm_g_w(m: usize, k: usize, n: usize, g: &[f64], w: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            g.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (out x in) += g^T (out x m) * a (m x in)`.
fn gemm_gt_a(m: usize, out: usize, inp: usize, g: &[f64], a: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            out,
            m,
            inp,
            1.0,
            g.as_ptr(),
            1,
            out as isize,
            a.as_ptr(),
            inp as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            inp as isize,
            1,
        );
    }
}

/// Borrowed view of a dense layer; lets the first layer be replaced by a
/// code-folded variant.
#[derive(Clone, Copy)]
struct LayerView<'a> {
    out_dim: usize,
    in_dim: usize,
    weight: &'a [f64],
    bias: &'a [f64],
}

impl<'a> From<&'a Layer> for LayerView<'a> {
    fn from(l: &'a Layer) -> Self {
        LayerView {
            out_dim: l.out_dim,
            in_dim: l.in_dim,
            weight: &l.weight,
            bias: &l.bias,
        }
    }
}

/// Reusable activation storage for a batch of samples.
#[derive(Debug, Default, Clone)]
pub struct MlpBatch {
    n: usize,
    input: Vec<f64>,
    acts: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    d_input: Vec<f64>,
}

impl MlpBatch {
    pub fn new() -> Self {
        MlpBatch::default()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Network output of the last forward pass, one value per sample.
    pub fn outputs(&self) -> &[f64] {
        &self.acts[LAYER_COUNT - 1][..self.n]
    }

    /// Gradient with respect to the first-layer input from the last backward
    /// pass (`n x in_dim`), filled only when requested.
    pub fn input_grads(&self) -> &[f64] {
        &self.d_input
    }

    /// Gradient with respect to the first layer's pre-activation (`n x hidden`).
    pub fn first_preact_grads(&self) -> &[f64] {
        &self.grads[0]
    }

    fn forward_views(&mut self, layers: &[LayerView<'_>; LAYER_COUNT], n: usize) {
        self.n = n;
        if self.acts.len() != LAYER_COUNT {
            self.acts = vec![Vec::new(); LAYER_COUNT];
            self.grads = vec![Vec::new(); LAYER_COUNT];
        }
        for li in 0..LAYER_COUNT {
            let l = layers[li];
            let (prev, rest) = self.acts.split_at_mut(li);
            let a_in: &[f64] = if li == 0 { &self.input } else { &prev[li - 1] };
            let out = &mut rest[0];
            out.resize(n * l.out_dim, 0.0);
            for row in out.chunks_exact_mut(l.out_dim) {
                row.copy_from_slice(l.bias);
            }
            gemm_a_wt(n, l.in_dim, l.out_dim, a_in, l.weight, 1.0, out);
            if li + 1 < LAYER_COUNT {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }

    /// Backward from per-sample upstream gradients. When `param_grads` is
    /// given, weight/bias gradients are accumulated into it.
    fn backward_views(
        &mut self,
        layers: &[LayerView<'_>; LAYER_COUNT],
        upstream: &[f64],
        mut param_grads: Option<&mut DecoderParams>,
        want_input: bool,
    ) {
        let n = self.n;
        debug_assert_eq!(upstream.len(), n);
        self.grads[LAYER_COUNT - 1].clear();
        self.grads[LAYER_COUNT - 1].extend_from_slice(upstream);
        for li in (0..LAYER_COUNT).rev() {
            let l = layers[li];
            if let Some(pg) = param_grads.as_deref_mut() {
                let a_in: &[f64] = if li == 0 { &self.input } else { &self.acts[li - 1] };
                let g = &self.grads[li];
                let gl = &mut pg.layers[li];
                gemm_gt_a(n, l.out_dim, l.in_dim, g, a_in, &mut gl.weight);
                for row in g.chunks_exact(l.out_dim) {
                    for (b, v) in gl.bias.iter_mut().zip(row) {
                        *b += v;
                    }
                }
            }
            if li == 0 {
                if want_input {
                    self.d_input.resize(n * l.in_dim, 0.0);
                    gemm_g_w(n, l.out_dim, l.in_dim, &self.grads[0], l.weight, &mut self.d_input);
                }
                break;
            }
            let (lower, upper) = self.grads.split_at_mut(li);
            let g_prev = &mut lower[li - 1];
            g_prev.resize(n * l.in_dim, 0.0);
            gemm_g_w(n, l.out_dim, l.in_dim, &upper[0], l.weight, g_prev);
            for (gv, a) in g_prev.iter_mut().zip(&self.acts[li - 1]) {
                if *a <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
    }

    /// Loads samples with per-sample codes: row `i` is `[x_i, z_i]`.
    pub fn load_samples<'a>(&mut self, samples: impl Iterator<Item = (&'a Vec3, &'a [f64])>, input_dim: usize) -> usize {
        self.input.clear();
        let mut n = 0;
        for (x, z) in samples {
            self.input.extend_from_slice(&[x.x, x.y, x.z]);
            self.input.extend_from_slice(z);
            n += 1;
        }
        debug_assert_eq!(self.input.len(), n * input_dim);
        n
    }

    /// Full forward over samples loaded with [`MlpBatch::load_samples`].
    pub fn forward_full(&mut self, params: &DecoderParams, n: usize) {
        let views = full_views(params);
        self.forward_views(&views, n);
    }

    /// Backward for a full forward pass; accumulates parameter gradients and
    /// optionally computes input gradients.
    pub fn backward_full(&mut self, params: &DecoderParams, upstream: &[f64], grads: &mut DecoderParams, want_input: bool) {
        let views = full_views(params);
        self.backward_views(&views, upstream, Some(grads), want_input);
    }
}

fn full_views(params: &DecoderParams) -> [LayerView<'_>; LAYER_COUNT] {
    std::array::from_fn(|i| LayerView::from(&params.layers[i]))
}

/// Decoder with a fixed shape code folded into the first-layer bias, so a
/// batch only carries the three point coordinates.
#[derive(Debug, Clone)]
pub struct CodeConditioned<'a> {
    params: &'a DecoderParams,
    point_weight: Vec<f64>,
    folded_bias: Vec<f64>,
}

impl<'a> CodeConditioned<'a> {
    pub fn new(params: &'a DecoderParams, z: &ShapeCode) -> Result<Self> {
        params.check_code(z)?;
        let first = &params.layers[0];
        let mut point_weight = Vec::with_capacity(first.out_dim * 3);
        let mut folded_bias = first.bias.clone();
        for r in 0..first.out_dim {
            let row = &first.weight[r * first.in_dim..(r + 1) * first.in_dim];
            point_weight.extend_from_slice(&row[..3]);
            folded_bias[r] += row[3..].iter().zip(&z.0).map(|(w, v)| w * v).sum::<f64>();
        }
        Ok(CodeConditioned {
            params,
            point_weight,
            folded_bias,
        })
    }

    pub fn params(&self) -> &DecoderParams {
        self.params
    }

    fn views(&self) -> [LayerView<'_>; LAYER_COUNT] {
        let first = &self.params.layers[0];
        std::array::from_fn(|i| {
            if i == 0 {
                LayerView {
                    out_dim: first.out_dim,
                    in_dim: 3,
                    weight: &self.point_weight,
                    bias: &self.folded_bias,
                }
            } else {
                LayerView::from(&self.params.layers[i])
            }
        })
    }

    /// Evaluates the field at every point; values are left in `batch.outputs()`.
    pub fn forward(&self, batch: &mut MlpBatch, points: &[Vec3]) {
        batch.input.clear();
        for p in points {
            batch.input.extend_from_slice(&[p.x, p.y, p.z]);
        }
        let views = self.views();
        batch.forward_views(&views, points.len());
    }

    /// Values only, chunked to bound memory for large point sets.
    pub fn values(&self, points: &[Vec3]) -> Vec<f64> {
        let mut batch = MlpBatch::new();
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(4096) {
            self.forward(&mut batch, chunk);
            out.extend_from_slice(batch.outputs());
        }
        out
    }

    /// After [`CodeConditioned::forward`], back-propagates `upstream` and
    /// returns the per-point spatial gradients.
    pub fn point_grads(&self, batch: &mut MlpBatch, upstream: &[f64]) -> Vec<Vec3> {
        let views = self.views();
        batch.backward_views(&views, upstream, None, true);
        batch
            .d_input
            .chunks_exact(3)
            .map(|g| Vec3::new(g[0], g[1], g[2]))
            .collect()
    }

    /// After [`CodeConditioned::forward`], back-propagates `upstream` and
    /// returns the gradient with respect to the shape code, summed over the batch.
    pub fn code_grad(&self, batch: &mut MlpBatch, upstream: &[f64]) -> Vec<f64> {
        let views = self.views();
        batch.backward_views(&views, upstream, None, false);
        let first = &self.params.layers[0];
        let hidden = first.out_dim;
        let mut colsum = vec![0.0; hidden];
        for row in batch.grads[0].chunks_exact(hidden) {
            for (c, v) in colsum.iter_mut().zip(row) {
                *c += v;
            }
        }
        let latent = first.in_dim - 3;
        let mut dz = vec![0.0; latent];
        for (r, c) in colsum.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            let row = &first.weight[r * first.in_dim + 3..(r + 1) * first.in_dim];
            for (d, w) in dz.iter_mut().zip(row) {
                *d += c * w;
            }
        }
        dz
    }
}
