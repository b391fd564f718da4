//! Shape prior: procedural training shapes, SDF supervision, simulated
//! partial scans and joint auto-decoder training of weights and codes.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, PointCloud, Vec3};
use crate::sdf_net::{
    smooth_l1, AnalyticShape, DecoderDims, DecoderParams, MlpBatch, ShapeCode, ShapeParams, FAMILY_BOUNDS,
};

/// Nominal car length used to place simulated sensors in metric terms.
pub const NOMINAL_LENGTH_M: f64 = 4.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSample {
    pub shape: usize,
    pub point: Vec3,
    pub target: f64,
}

/// One latent code per training shape, indexed by shape id.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTable {
    pub codes: Vec<ShapeCode>,
}

impl CodeTable {
    /// Codes drawn i.i.d. from `N(0, std^2)`.
    pub fn random(n: usize, dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        let codes = (0..n)
            .map(|_| ShapeCode((0..dim).map(|_| normal.sample(&mut rng)).collect()))
            .collect();
        CodeTable { codes }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.codes.first().map_or(0, |c| c.dim())
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<String, &Vec<f64>> = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("{i:06}"), &c.0))
            .collect();
        Ok(serde_json::to_string(&map)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: BTreeMap<String, Vec<f64>> = serde_json::from_str(s)?;
        let mut entries = map
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|id| (id, v))
                    .map_err(|_| Error::Format(format!("code table key {k:?} is not a shape id")))
            })
            .collect::<Result<Vec<_>>>()?;
        entries.sort_by_key(|(id, _)| *id);
        for (expect, (id, _)) in entries.iter().enumerate() {
            if *id != expect {
                return Err(Error::Format(format!("code table ids are not contiguous at {expect}")));
            }
        }
        let table = CodeTable {
            codes: entries.into_iter().map(|(_, v)| ShapeCode(v)).collect(),
        };
        let dim = table.dim();
        if table.codes.iter().any(|c| c.dim() != dim) {
            return Err(Error::Format("code table has mixed dimensions".into()));
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        CodeTable::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Componentwise mean of all codes.
pub fn mean_code(table: &CodeTable) -> Result<ShapeCode> {
    if table.is_empty() {
        return Err(Error::Empty("code table is empty".into()));
    }
    let mut mean = vec![0.0; table.dim()];
    for c in &table.codes {
        for (m, v) in mean.iter_mut().zip(&c.0) {
            *m += v;
        }
    }
    let n = table.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok(ShapeCode(mean))
}

/// Shapes with parameters drawn uniformly inside the family bounds.
pub fn sample_shape_family(seed: u64, n_shapes: usize) -> Result<Vec<AnalyticShape>> {
    if n_shapes == 0 {
        return Err(Error::Config("shape family needs at least one shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_shapes)
        .map(|_| AnalyticShape::from_params(random_shape_params(&mut rng)))
        .collect())
}

pub fn random_shape_params<R: Rng>(rng: &mut R) -> ShapeParams {
    let mut a = [0.0; 6];
    for (v, (_, lo, hi)) in a.iter_mut().zip(FAMILY_BOUNDS.iter()) {
        *v = rng.random_range(*lo..=*hi);
    }
    ShapeParams::from_array(a)
}

fn uniform_in_ball<R: Rng>(rng: &mut R, radius: f64) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Surface points by projecting uniform samples of the bounding box.
pub fn sample_surface_points(shape: &AnalyticShape, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [a, b, c] = shape.half_extents;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = Vec3::new(
            rng.random_range(-a..a) * 1.1,
            rng.random_range(-b..b) * 1.1,
            rng.random_range(-c..c) * 1.1,
        );
        if let Some(q) = shape.project_to_surface(&p) {
            out.push(q);
        }
    }
    out
}

/// `n` supervision samples: 80 % surface + N(0, 0.01^2), 10 % surface +
/// N(0, 0.05^2), 10 % uniform in the unit ball.
pub fn sample_sdf_pairs(shape: &AnalyticShape, shape_id: usize, n: usize, seed: u64) -> Result<Vec<TrainSample>> {
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let n_fine = n * 8 / 10;
    let n_coarse = n / 10;
    let n_near = n_fine + n_coarse;
    let surface = sample_surface_points(shape, n_near, seed ^ 0x5eed_5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine = Normal::new(0.0, 0.01).unwrap();
    let coarse = Normal::new(0.0, 0.05).unwrap();
    let mut out = Vec::with_capacity(n);
    for (i, s) in surface.iter().enumerate() {
        let dist = if i < n_fine { &fine } else { &coarse };
        let p = s + Vec3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng));
        out.push(TrainSample {
            shape: shape_id,
            point: p,
            target: shape.sdf(&p),
        });
    }
    while out.len() < n {
        let p = uniform_in_ball(&mut rng, 1.0);
        out.push(TrainSample {
            shape: shape_id,
            point: p,
            target: shape.sdf(&p),
        });
    }
    Ok(out)
}

/// Ray-cast first hits from a sensor at `sensor` (normalized units), with an
/// `n_azimuth x n_elevation` ray grid covering the shape's bounding sphere.
pub fn simulate_partial_scan(shape: &AnalyticShape, sensor: &Vec3, n_azimuth: usize, n_elevation: usize) -> Result<PointCloud> {
    if shape.sdf(sensor) <= 0.0 {
        return Err(Error::Config("sensor lies inside the shape".into()));
    }
    let radius = Vec3::from(shape.half_extents).norm();
    let dist = sensor.norm();
    let forward = -sensor / dist;
    let half_angle = if dist > radius { (radius / dist).asin() } else { std::f64::consts::FRAC_PI_2 };
    let up = Vec3::z();
    let mut right = forward.cross(&up);
    if right.norm() < 1e-9 {
        right = Vec3::x();
    }
    let right = right.normalize();
    let true_up = right.cross(&forward);
    let mut hits = Vec::new();
    let t_max = dist + radius + 1.0;
    for i in 0..n_azimuth {
        let u = if n_azimuth == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n_azimuth - 1) as f64 };
        for j in 0..n_elevation {
            let v = if n_elevation == 1 { 0.0 } else { -1.0 + 2.0 * j as f64 / (n_elevation - 1) as f64 };
            let dir = (forward + right * (u * half_angle.tan()) + true_up * (v * half_angle.tan())).normalize();
            if let Some(t) = shape.ray_cast(sensor, &dir, t_max) {
                hits.push(sensor + dir * t);
            }
        }
    }
    Ok(PointCloud::new(hits, Frame::Normalized))
}

/// Sensor positions around a shape at `min_m..max_m` meters, expressed in
/// normalized units for a car of nominal length.
pub fn random_sensor_positions(shape: &AnalyticShape, n: usize, min_m: f64, max_m: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_meter = 2.0 * shape.half_extents[0] / NOMINAL_LENGTH_M;
    (0..n)
        .map(|_| {
            let d = rng.random_range(min_m..max_m) * per_meter;
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let el = rng.random_range(0.0f64..20f64.to_radians());
            Vec3::new(d * el.cos() * az.cos(), d * el.cos() * az.sin(), d * el.sin())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub n_shapes: usize,
    pub samples_per_shape: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub code_regularizer: f64,
    pub code_init_std: f64,
    pub loss_delta: f64,
    pub latent: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            n_shapes: 64,
            samples_per_shape: 4096,
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-4,
            code_regularizer: 1e-4,
            code_init_std: 0.01,
            loss_delta: 0.05,
            latent: 64,
            hidden: 128,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> DecoderDims {
        DecoderDims {
            latent: self.latent,
            hidden: self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.samples_per_shape == 0 {
            return Err(Error::Config("epochs, batch size and sample count must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.code_regularizer < 0.0 || !(self.loss_delta > 0.0) {
            return Err(Error::Config("learning rate and loss delta must be positive".into()));
        }
        if self.latent == 0 || self.hidden == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = f64>) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: DecoderParams,
    pub codes: CodeTable,
    /// Mean training objective per epoch.
    pub loss_curve: Vec<f64>,
}

/// Builds the supervision set for every shape (parallel over shapes,
/// deterministic per shape).
pub fn build_training_set(shapes: &[AnalyticShape], samples_per_shape: usize, seed: u64) -> Result<Vec<TrainSample>> {
    let per_shape: Vec<Vec<TrainSample>> = shapes
        .par_iter()
        .enumerate()
        .map(|(i, s)| sample_sdf_pairs(s, i, samples_per_shape, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    Ok(per_shape.into_iter().flatten().collect())
}

/// Jointly fits decoder weights and one code per shape by Adam on
/// `mean smooth_l1(f(x, z_i) - sdf) + reg * mean ||z_i||^2`.
pub fn train_auto_decoder(shapes: &[AnalyticShape], config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    if shapes.len() < 2 {
        return Err(Error::Config("auto-decoder training needs at least two shapes".into()));
    }
    let samples = build_training_set(shapes, config.samples_per_shape, config.seed)?;
    train_on_samples(shapes.len(), &samples, config, |_, _| {})
}

/// Training loop over a prepared sample set. `on_epoch(epoch, loss)` is
/// called after every epoch.
pub fn train_on_samples(
    n_shapes: usize,
    samples: &[TrainSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    config.validate()?;
    let dims = config.dims();
    let mut params = DecoderParams::init(config.seed, dims);
    let mut codes = CodeTable::random(n_shapes, dims.latent, config.code_init_std, config.seed.wrapping_add(1));
    let mut param_opt = Adam::new(params.num_values(), config.learning_rate);
    let mut code_opt = Adam::new(n_shapes * dims.latent, config.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut batch = MlpBatch::new();
    let mut grads = DecoderParams::zeros(dims);
    let mut code_grads = vec![0.0; n_shapes * dims.latent];
    let mut upstream = Vec::with_capacity(config.batch_size);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let d = dims.latent;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len() as f64;
            let n = batch.load_samples(
                chunk.iter().map(|&i| (&samples[i].point, codes.codes[samples[i].shape].as_slice())),
                dims.input(),
            );
            batch.forward_full(&params, n);
            upstream.clear();
            let mut loss = 0.0;
            for (&i, &s) in chunk.iter().zip(batch.outputs()) {
                let (v, dv) = smooth_l1(s - samples[i].target, config.loss_delta);
                loss += v / b;
                upstream.push(dv / b);
            }
            for &i in chunk {
                loss += config.code_regularizer * codes.codes[samples[i].shape].squared_norm() / b;
            }
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch} (batch loss {loss})"
                )));
            }
            for g in grads.iter_values_mut() {
                *g = 0.0;
            }
            code_grads.iter_mut().for_each(|g| *g = 0.0);
            batch.backward_full(&params, &upstream, &mut grads, true);
            let input_dim = dims.input();
            for (row, &i) in chunk.iter().enumerate() {
                let shape = samples[i].shape;
                let dz = &batch.input_grads()[row * input_dim + 3..(row + 1) * input_dim];
                let z = &codes.codes[shape].0;
                let slot = &mut code_grads[shape * d..(shape + 1) * d];
                for k in 0..d {
                    slot[k] += dz[k] + 2.0 * config.code_regularizer * z[k] / b;
                }
            }
            param_opt.update(params.iter_values_mut(), grads.iter_values());
            code_opt.update(
                codes.codes.iter_mut().flat_map(|c| c.0.iter_mut()),
                code_grads.iter().copied(),
            );
            epoch_loss += loss;
            n_batches += 1;
        }
        let mean = epoch_loss / n_batches as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("training diverged at epoch {epoch}")));
        }
        loss_curve.push(mean);
        on_epoch(epoch, mean);
        if epoch % 10 == 0 {
            info!("epoch {epoch}: loss {mean:.6e}");
        }
    }
    Ok(TrainOutput {
        params,
        codes,
        loss_curve,
    })
}

/// Mean absolute decoder error at the given points (target zero).
pub fn mean_abs_surface_error(params: &DecoderParams, z: &ShapeCode, points: &[Vec3]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("no evaluation points".into()));
    }
    let cond = crate::sdf_net::CodeConditioned::new(params, z)?;
    let vals = cond.values(points);
    Ok(vals.iter().map(|v| v.abs()).sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_is_deterministic_and_bounded() {
        let a = sample_shape_family(3, 16).unwrap();
        let b = sample_shape_family(3, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_shape_family(1, 1).unwrap().len(), 1);
        assert!(sample_shape_family(1, 0).is_err());
        for s in &a {
            let p = s.params.unwrap();
            assert!(p.within_bounds());
            // non-degenerate volume
            assert!(s.half_extents.iter().all(|h| *h > 0.05));
            assert!(s.sdf(&Vec3::new(0.0, 0.0, s.body.center[2])) < 0.0);
        }
    }

    #[test]
    fn sdf_pairs_counts_and_targets() {
        let shape = sample_shape_family(5, 1).unwrap().remove(0);
        let pairs = sample_sdf_pairs(&shape, 0, 10_000, 9).unwrap();
        assert_eq!(pairs.len(), 10_000);
        for p in &pairs {
            assert_eq!(p.target, shape.sdf(&p.point));
        }
        // near-surface fraction: points within 4 sigma of the coarse band
        let near = pairs[..9000].len() as f64 / pairs.len() as f64;
        assert!((near - 0.9).abs() <= 0.02);
        let surface = sample_surface_points(&shape, 500, 1);
        assert!(surface.iter().all(|p| shape.sdf(p).abs() < 1e-9));
        assert!(sample_sdf_pairs(&shape, 0, 0, 1).is_err());
    }

    #[test]
    fn partial_scan_on_surface_and_visible() {
        let shape = sample_shape_family(2, 1).unwrap().remove(0);
        let sensor = Vec3::new(6.0, 0.0, 0.0);
        let scan = simulate_partial_scan(&shape, &sensor, 64, 32).unwrap();
        assert!(!scan.is_empty());
        assert!(scan.len() <= 64 * 32);
        assert!(scan.points.iter().all(|p| shape.sdf(p).abs() < 1e-4));
        // sensor on +x sees nothing of the far (-x) half beyond the back face
        let back = -shape.half_extents[0] * 0.9;
        assert!(scan.points.iter().all(|p| p.x > back));
        assert!(simulate_partial_scan(&shape, &Vec3::zeros(), 4, 4).is_err());
    }

    #[test]
    fn code_table_json_round_trip_and_mean() {
        let table = CodeTable::random(12, 5, 0.01, 3);
        let back = CodeTable::from_json(&table.to_json().unwrap()).unwrap();
        assert_eq!(back, table);
        let single = CodeTable { codes: vec![ShapeCode(vec![1.0, -2.0])] };
        assert_eq!(mean_code(&single).unwrap(), ShapeCode(vec![1.0, -2.0]));
        let opposite = CodeTable {
            codes: vec![ShapeCode(vec![0.5, -0.25]), ShapeCode(vec![-0.5, 0.25])],
        };
        assert_eq!(mean_code(&opposite).unwrap(), ShapeCode(vec![0.0, 0.0]));
        let brute: Vec<f64> = (0..5)
            .map(|k| table.codes.iter().map(|c| c.0[k]).sum::<f64>() / 12.0)
            .collect();
        for (a, b) in mean_code(&table).unwrap().0.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(mean_code(&CodeTable { codes: vec![] }).is_err());
    }

    #[test]
    fn training_rejects_single_shape_and_bad_config() {
        let shapes = sample_shape_family(1, 1).unwrap();
        assert!(train_auto_decoder(&shapes, &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
