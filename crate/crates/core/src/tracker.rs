//! Tracking by alternating pose estimation and shape-code adaptation against
//! a pretrained SDF decoder, with a history of aggregated canonical points.
//! Also hosts the constant-velocity Kalman filter detection baseline.

use std::path::Path;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    chamfer_single_side, crop_world_points, inside_box, wrap_angle, BoxSize, Frame, NnIndex, PointCloud, Pose, Vec3,
    VoxelGrid,
};
use crate::lidar_sim::{Detection, DetectionNoise, TrackletSequence, FRAME_DT};
use crate::prior_train::{mean_code, CodeTable};
use crate::sdf_net::{load_checkpoint, smooth_l1, CodeConditioned, DecoderParams, MlpBatch, ShapeCode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    /// Smooth-l1 threshold.
    pub delta: f64,
    /// Code regularizer weight, applied as `lambda * |z|^2 / d`.
    pub lambda: f64,
    /// Chamfer loss weight.
    pub gamma: f64,
    pub pose_lr: f64,
    pub code_lr: f64,
    pub pose_iters: usize,
    pub code_iters: usize,
    /// Adaptation is skipped when the newest frame adds fewer points.
    pub min_adapt_points: usize,
    pub crop_dilation: f64,
    /// Box dilation used when moving the tracked crop into the history.
    pub history_dilation: f64,
    /// Voxel size of the history buffer, meters.
    pub history_voxel: f64,
    pub detection_weight: f64,
    /// Association radius for detections, meters.
    pub detection_gate: f64,
    pub use_detections: bool,
    pub use_regularizer: bool,
    pub use_cd_loss: bool,
    pub use_shape_loss: bool,
    /// Frames that may update the shape code (frame 0 included); `None` = all.
    pub adapt_frames: Option<usize>,
    /// Stop pose descent after this many iterations without improvement; 0 = never.
    pub pose_patience: usize,
    /// Relative objective decrease that counts as an improvement for `pose_patience`.
    pub pose_rel_tol: f64,
    /// Upper bound on history points used per adaptation (strided subset); 0 = all.
    pub adapt_max_points: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            delta: 0.05,
            lambda: 10.0,
            gamma: 0.1,
            pose_lr: 0.1,
            code_lr: 1e-3,
            pose_iters: 300,
            code_iters: 20,
            min_adapt_points: 10,
            crop_dilation: 1.25,
            history_dilation: 1.1,
            history_voxel: 0.05,
            detection_weight: 1.0,
            detection_gate: 3.0,
            use_detections: false,
            use_regularizer: true,
            use_cd_loss: true,
            use_shape_loss: true,
            adapt_frames: None,
            pose_patience: 0,
            pose_rel_tol: 1e-6,
            adapt_max_points: 0,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("delta", self.delta),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("pose_lr", self.pose_lr),
            ("code_lr", self.code_lr),
            ("history_voxel", self.history_voxel),
            ("detection_weight", self.detection_weight),
            ("detection_gate", self.detection_gate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.pose_iters == 0 || self.code_iters == 0 {
            return Err(Error::Config("iteration counts must be at least 1".into()));
        }
        if !(self.crop_dilation >= 1.0) || !(self.history_dilation >= 1.0) {
            return Err(Error::Config("box dilations must be >= 1".into()));
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        if self.use_regularizer {
            self.lambda
        } else {
            0.0
        }
    }

    fn effective_gamma(&self) -> f64 {
        if self.use_cd_loss {
            self.gamma
        } else {
            0.0
        }
    }

    /// Whether the shape code may change at frame `t`.
    pub fn adapts_at(&self, t: usize) -> bool {
        self.adapt_frames.is_none_or(|k| t < k)
    }
}

/// Decoder weights together with the mean training code used to start tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePrior {
    pub params: DecoderParams,
    pub mean_code: ShapeCode,
}

impl ShapePrior {
    pub fn new(params: DecoderParams, mean_code: ShapeCode) -> Result<Self> {
        params.check_code(&mean_code)?;
        Ok(ShapePrior { params, mean_code })
    }

    pub fn from_table(params: DecoderParams, table: &CodeTable) -> Result<Self> {
        ShapePrior::new(params, mean_code(table)?)
    }

    pub fn load(checkpoint: &Path, codes: &Path) -> Result<Self> {
        let (params, _) = load_checkpoint(checkpoint)?;
        ShapePrior::from_table(params, &CodeTable::load(codes)?)
    }
}

/// Objective trace of one inner optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptRecord {
    pub initial: f64,
    pub best: f64,
    /// Gradient steps taken.
    pub iterations: usize,
    /// Step index of the returned iterate (0 = starting point).
    pub best_iteration: usize,
}

impl OptRecord {
    pub fn descended(&self) -> bool {
        self.best <= self.initial
    }
}

/// Canonical-frame points aggregated over tracked frames, voxel-capped.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    grid: VoxelGrid,
    points: Vec<Vec3>,
    index: NnIndex,
    frame_counts: Vec<usize>,
}

impl HistoryBuffer {
    pub fn new(voxel: f64) -> Self {
        HistoryBuffer {
            grid: VoxelGrid::new(voxel),
            points: Vec::new(),
            index: NnIndex::build(Vec::new()),
            frame_counts: Vec::new(),
        }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn index(&self) -> &NnIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points contributed by each update, before downsampling.
    pub fn frame_counts(&self) -> &[usize] {
        &self.frame_counts
    }

    pub fn newest_count(&self) -> usize {
        self.frame_counts.last().copied().unwrap_or(0)
    }

    /// Adds canonical points as one frame's contribution.
    pub fn push_canonical(&mut self, canonical: &[Vec3]) {
        self.frame_counts.push(canonical.len());
        if canonical.is_empty() {
            return;
        }
        for p in canonical {
            self.grid.insert(p);
        }
        self.points = self.grid.centroids();
        self.index = NnIndex::build(self.points.clone());
    }
}

/// Moves the world points of a frame that fall inside the box at `pose`
/// (dilated by `config.history_dilation`) into the history; returns how many
/// were added.
pub fn update_history(history: &mut HistoryBuffer, crop_world: &[Vec3], pose: &Pose, size: &BoxSize, config: &TrackConfig) -> usize {
    let canonical: Vec<Vec3> = crop_world
        .iter()
        .map(|p| pose.world_to_canonical(p))
        .filter(|q| inside_box(q, size, config.history_dilation))
        .collect();
    history.push_canonical(&canonical);
    canonical.len()
}

/// Nearest detection by center distance, if within `gate` meters.
pub fn associate_detection(detections: &[Detection], pose: &Pose, gate: f64) -> Option<Pose> {
    detections
        .iter()
        .map(|d| (d.pose.center_distance(pose), d.pose))
        .filter(|(dist, _)| *dist < gate)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, p)| p)
}

fn strided_subset(points: &[Vec3], cap: usize) -> Vec<Vec3> {
    if cap == 0 || points.len() <= cap {
        return points.to_vec();
    }
    (0..cap).map(|i| points[i * points.len() / cap]).collect()
}

const CHUNK: usize = 4096;

/// Mean smooth-l1 of the field over normalized points plus the scaled code
/// regularizer, and its gradient with respect to the code.
fn code_objective(
    params: &DecoderParams,
    z: &ShapeCode,
    normalized: &[Vec3],
    delta: f64,
    lambda: f64,
    batch: &mut MlpBatch,
) -> Result<(f64, Vec<f64>)> {
    let cond = CodeConditioned::new(params, z)?;
    let n = normalized.len() as f64;
    let d = z.dim() as f64;
    let mut data = 0.0;
    let mut grad = vec![0.0; z.dim()];
    let mut upstream = Vec::with_capacity(CHUNK);
    for chunk in normalized.chunks(CHUNK) {
        cond.forward(batch, chunk);
        upstream.clear();
        for &s in batch.outputs() {
            let (v, dv) = smooth_l1(s, delta);
            data += v;
            upstream.push(dv / n);
        }
        for (g, v) in grad.iter_mut().zip(cond.code_grad(batch, &upstream)) {
            *g += v;
        }
    }
    let reg = lambda * z.squared_norm() / d;
    for (g, v) in grad.iter_mut().zip(&z.0) {
        *g += 2.0 * lambda * v / d;
    }
    let obj = data / n + reg;
    if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("shape code objective is not finite".into()));
    }
    Ok((obj, grad))
}

/// Plain gradient descent on the code with best-iterate return.
fn descend_code(params: &DecoderParams, z0: &ShapeCode, normalized: &[Vec3], config: &TrackConfig) -> Result<(ShapeCode, OptRecord)> {
    let lambda = config.effective_lambda();
    let mut batch = MlpBatch::new();
    let mut z = z0.clone();
    let mut best = (f64::INFINITY, z0.clone(), 0);
    let mut initial = 0.0;
    for it in 0..=config.code_iters {
        let (obj, grad) = code_objective(params, &z, normalized, config.delta, lambda, &mut batch)?;
        if it == 0 {
            initial = obj;
        }
        if obj < best.0 {
            best = (obj, z.clone(), it);
        }
        if it == config.code_iters {
            break;
        }
        for (v, g) in z.0.iter_mut().zip(&grad) {
            *v -= config.code_lr * g;
        }
    }
    Ok((
        best.1,
        OptRecord {
            initial,
            best: best.0,
            iterations: config.code_iters,
            best_iteration: best.2,
        },
    ))
}

fn normalize_all(canonical: &[Vec3], size: &BoxSize) -> Vec<Vec3> {
    let s = size.normalization_scale();
    canonical.iter().map(|q| q * s).collect()
}

/// Shape code for the first frame, optimized from `start` (the mean code)
/// on the canonical crop. An empty crop is an error; callers fall back to
/// the mean code.
pub fn init_shape_code(
    crop0: &PointCloud,
    params: &DecoderParams,
    start: &ShapeCode,
    size: &BoxSize,
    config: &TrackConfig,
) -> Result<(ShapeCode, OptRecord)> {
    if crop0.is_empty() {
        return Err(Error::Empty(
            "first-frame crop has no points; fall back to the mean code".into(),
        ));
    }
    debug_assert_eq!(crop0.frame, Frame::Canonical);
    let normalized = normalize_all(&strided_subset(&crop0.points, config.adapt_max_points), size);
    descend_code(params, start, &normalized, config)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptOutcome {
    pub gated: bool,
    pub record: Option<OptRecord>,
}

/// Adapts the code to all history points unless the newest frame contributed
/// fewer than `config.min_adapt_points`, in which case `z_prev` is returned
/// untouched.
pub fn adapt_code(
    history: &HistoryBuffer,
    z_prev: &ShapeCode,
    params: &DecoderParams,
    size: &BoxSize,
    config: &TrackConfig,
) -> Result<(ShapeCode, AdaptOutcome)> {
    if history.newest_count() < config.min_adapt_points || history.is_empty() {
        return Ok((
            z_prev.clone(),
            AdaptOutcome {
                gated: true,
                record: None,
            },
        ));
    }
    let normalized = normalize_all(&strided_subset(history.points(), config.adapt_max_points), size);
    let (z, record) = descend_code(params, z_prev, &normalized, config)?;
    Ok((
        z,
        AdaptOutcome {
            gated: false,
            record: Some(record),
        },
    ))
}

/// Detection l1 loss: summed absolute translation error plus wrapped yaw error.
pub fn detection_l1(pose: &Pose, det: &Pose) -> (f64, [f64; 4]) {
    let d = [pose.tx - det.tx, pose.ty - det.ty, pose.tz - det.tz, wrap_angle(pose.yaw - det.yaw)];
    let value = d.iter().map(|v| v.abs()).sum();
    (value, d.map(|v| if v == 0.0 { 0.0 } else { v.signum() }))
}

/// Pose objective for fixed world points, code and history.
struct PoseProblem<'a> {
    points: &'a [Vec3],
    cond: CodeConditioned<'a>,
    scale: f64,
    delta: f64,
    shape: bool,
    gamma: f64,
    history: Option<&'a NnIndex>,
    detection: Option<(Pose, f64)>,
}

impl PoseProblem<'_> {
    fn evaluate(&self, pose: &Pose, batch: &mut MlpBatch, want_grad: bool) -> Result<(f64, [f64; 4])> {
        let mut obj = 0.0;
        let mut grad = [0.0; 4];
        let n = self.points.len() as f64;
        let canonical: Vec<Vec3> = self.points.iter().map(|p| pose.world_to_canonical(p)).collect();
        let mut point_grad = vec![Vec3::zeros(); canonical.len()];

        if self.shape && !canonical.is_empty() {
            let normalized: Vec<Vec3> = canonical.iter().map(|q| q * self.scale).collect();
            self.cond.forward(batch, &normalized);
            let mut upstream = Vec::with_capacity(normalized.len());
            for &s in batch.outputs() {
                let (v, dv) = smooth_l1(s, self.delta);
                obj += v / n;
                upstream.push(dv / n);
            }
            if want_grad {
                for (g, d) in point_grad.iter_mut().zip(self.cond.point_grads(batch, &upstream)) {
                    *g += d * self.scale;
                }
            }
        }
        if let Some(index) = self.history {
            if self.gamma > 0.0 && !canonical.is_empty() {
                let (cd, grads) = chamfer_single_side(&canonical, index)?;
                obj += self.gamma * cd;
                for (g, d) in point_grad.iter_mut().zip(grads) {
                    *g += d * self.gamma;
                }
            }
        }
        if want_grad {
            for (p, g) in self.points.iter().zip(&point_grad) {
                let jt = pose.jacobian(p).transpose() * g;
                for k in 0..4 {
                    grad[k] += jt[k];
                }
            }
        }
        if let Some((det, w)) = &self.detection {
            let (v, sub) = detection_l1(pose, det);
            obj += w * v;
            for k in 0..4 {
                grad[k] += w * sub[k];
            }
        }
        if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("pose objective is not finite".into()));
        }
        Ok((obj, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub record: Option<OptRecord>,
    pub n_crop: usize,
    pub empty_crop: bool,
    pub detection: Option<Pose>,
}

/// Crops `frame` at `prev_pose` and minimizes the tracking objective over
/// (tx, ty, tz, yaw) with plain gradient descent, returning the best iterate.
/// Also returns the cropped world points for the history update.
#[allow(clippy::too_many_arguments)]
pub fn estimate_pose(
    frame: &PointCloud,
    prev_pose: &Pose,
    size: &BoxSize,
    z: &ShapeCode,
    params: &DecoderParams,
    history: &HistoryBuffer,
    detections: &[Detection],
    config: &TrackConfig,
) -> Result<(PoseEstimate, Vec<Vec3>)> {
    debug_assert_eq!(frame.frame, Frame::World);
    let crop = crop_world_points(frame, prev_pose, size, config.crop_dilation);
    if crop.is_empty() {
        return Ok((
            PoseEstimate {
                pose: *prev_pose,
                record: None,
                n_crop: 0,
                empty_crop: true,
                detection: None,
            },
            crop,
        ));
    }
    let detection = if config.use_detections {
        associate_detection(detections, prev_pose, config.detection_gate)
    } else {
        None
    };
    let problem = PoseProblem {
        points: &crop,
        cond: CodeConditioned::new(params, z)?,
        scale: size.normalization_scale(),
        delta: config.delta,
        shape: config.use_shape_loss,
        gamma: config.effective_gamma(),
        history: (!history.is_empty()).then(|| history.index()),
        detection: detection.map(|d| (d, config.detection_weight)),
    };
    let mut batch = MlpBatch::new();
    let mut pose = *prev_pose;
    let mut best = (f64::INFINITY, pose, 0);
    let mut initial = 0.0;
    let mut stale = 0;
    let mut steps = 0;
    for it in 0..=config.pose_iters {
        let last = it == config.pose_iters;
        let (obj, grad) = problem.evaluate(&pose, &mut batch, !last)?;
        if it == 0 {
            initial = obj;
        }
        if obj < best.0 {
            if obj < best.0 - config.pose_rel_tol * best.0.abs() {
                stale = 0;
            } else {
                stale += 1;
            }
            best = (obj, pose, it);
        } else {
            stale += 1;
        }
        if last || (config.pose_patience > 0 && stale >= config.pose_patience) {
            break;
        }
        let lr = config.pose_lr;
        pose = Pose::new(
            pose.tx - lr * grad[0],
            pose.ty - lr * grad[1],
            pose.tz - lr * grad[2],
            pose.yaw - lr * grad[3],
        );
        steps += 1;
    }
    Ok((
        PoseEstimate {
            pose: best.1,
            record: Some(OptRecord {
                initial,
                best: best.0,
                iterations: steps,
                best_iteration: best.2,
            }),
            n_crop: crop.len(),
            empty_crop: false,
            detection,
        },
        crop,
    ))
}

/// Per-frame record of what the tracker did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame: usize,
    pub n_crop: usize,
    pub n_history_added: usize,
    pub history_size: usize,
    pub empty_crop: bool,
    pub detection_used: bool,
    pub pose: Option<OptRecord>,
    pub code: Option<OptRecord>,
    /// Adaptation skipped because the frame added too few points.
    pub gated: bool,
    /// Adaptation disabled for this frame by `adapt_frames`.
    pub frozen: bool,
}

/// Online tracker state for one tracklet.
#[derive(Debug, Clone)]
pub struct TrackState<'a> {
    prior: &'a ShapePrior,
    config: TrackConfig,
    size: BoxSize,
    pub code: ShapeCode,
    pub pose: Pose,
    pub history: HistoryBuffer,
    pub diagnostics: Vec<FrameDiagnostics>,
}

impl<'a> TrackState<'a> {
    /// Frame 0: crop at the given pose, initialize the code and seed the history.
    pub fn start(frame0: &PointCloud, pose0: Pose, size: BoxSize, prior: &'a ShapePrior, config: &TrackConfig) -> Result<Self> {
        config.validate()?;
        prior.params.check_code(&prior.mean_code)?;
        let crop = crop_world_points(frame0, &pose0, &size, config.crop_dilation);
        let canonical = PointCloud::new(crop.iter().map(|p| pose0.world_to_canonical(p)).collect(), Frame::Canonical);
        let mut diag = FrameDiagnostics {
            frame: 0,
            n_crop: crop.len(),
            n_history_added: 0,
            history_size: 0,
            empty_crop: crop.is_empty(),
            detection_used: false,
            pose: None,
            code: None,
            gated: false,
            frozen: !config.adapts_at(0),
        };
        let code = if !config.adapts_at(0) {
            prior.mean_code.clone()
        } else if crop.len() < config.min_adapt_points {
            diag.gated = true;
            prior.mean_code.clone()
        } else {
            let (z, record) = init_shape_code(&canonical, &prior.params, &prior.mean_code, &size, config)?;
            diag.code = Some(record);
            z
        };
        let mut history = HistoryBuffer::new(config.history_voxel);
        diag.n_history_added = update_history(&mut history, &crop, &pose0, &size, config);
        diag.history_size = history.len();
        Ok(TrackState {
            prior,
            config: config.clone(),
            size,
            code,
            pose: pose0,
            history,
            diagnostics: vec![diag],
        })
    }

    /// One tracking step: pose estimation, history update, then code adaptation.
    pub fn step(&mut self, frame: &PointCloud, detections: &[Detection]) -> Result<Pose> {
        let t = self.diagnostics.len();
        let (est, crop) = estimate_pose(
            frame,
            &self.pose,
            &self.size,
            &self.code,
            &self.prior.params,
            &self.history,
            detections,
            &self.config,
        )?;
        self.pose = est.pose;
        let added = update_history(&mut self.history, &crop, &self.pose, &self.size, &self.config);
        let mut diag = FrameDiagnostics {
            frame: t,
            n_crop: est.n_crop,
            n_history_added: added,
            history_size: self.history.len(),
            empty_crop: est.empty_crop,
            detection_used: est.detection.is_some(),
            pose: est.record,
            code: None,
            gated: false,
            frozen: !self.config.adapts_at(t),
        };
        if self.config.adapts_at(t) {
            let (z, outcome) = adapt_code(&self.history, &self.code, &self.prior.params, &self.size, &self.config)?;
            self.code = z;
            diag.gated = outcome.gated;
            diag.code = outcome.record;
        }
        self.diagnostics.push(diag);
        Ok(self.pose)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub poses: Vec<Pose>,
    /// Code after each frame.
    pub codes: Vec<ShapeCode>,
    pub diagnostics: Vec<FrameDiagnostics>,
}

impl TrackOutput {
    pub fn final_code(&self) -> &ShapeCode {
        self.codes.last().expect("at least one frame")
    }

    /// Every inner optimization returned an objective no worse than its start.
    pub fn descent_violations(&self) -> usize {
        self.diagnostics
            .iter()
            .flat_map(|d| [d.pose, d.code])
            .flatten()
            .filter(|r| !r.descended())
            .count()
    }
}

/// Runs the tracker over a whole tracklet starting from its frame-0 pose.
pub fn track_sequence(seq: &TrackletSequence, prior: &ShapePrior, config: &TrackConfig) -> Result<TrackOutput> {
    seq.validate()?;
    let first = &seq.frames[0];
    let mut state = TrackState::start(&first.points, first.gt_pose, seq.size, prior, config)?;
    let mut poses = vec![state.pose];
    let mut codes = vec![state.code.clone()];
    for frame in &seq.frames[1..] {
        poses.push(state.step(&frame.points, &frame.detections)?);
        codes.push(state.code.clone());
    }
    Ok(TrackOutput {
        poses,
        codes,
        diagnostics: state.diagnostics,
    })
}

// ---- Kalman filter baseline ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KfConfig {
    pub gate: f64,
    /// Process noise as white acceleration, m/s^2.
    pub accel_std: f64,
    /// Process noise on yaw acceleration, rad/s^2.
    pub yaw_accel_std: f64,
    pub meas_std_xyz: f64,
    pub meas_std_yaw: f64,
    pub init_vel_std: f64,
    pub init_yaw_rate_std: f64,
}

impl Default for KfConfig {
    fn default() -> Self {
        let noise = DetectionNoise::default();
        KfConfig {
            gate: 3.0,
            accel_std: 2.0,
            yaw_accel_std: 1.0,
            meas_std_xyz: noise.sigma_xyz,
            meas_std_yaw: noise.sigma_yaw,
            init_vel_std: 5.0,
            init_yaw_rate_std: 0.5,
        }
    }
}

impl KfConfig {
    /// Measurement noise taken from the tracklet's detection settings.
    pub fn for_sequence(seq: &TrackletSequence) -> Self {
        let mut c = KfConfig::default();
        if let Some(noise) = seq.meta.detection_noise {
            c.meas_std_xyz = noise.sigma_xyz;
            c.meas_std_yaw = noise.sigma_yaw;
        }
        c
    }
}

type Mat8 = SMatrix<f64, 8, 8>;
type Vec8 = SVector<f64, 8>;

/// Constant-velocity Kalman filter over (x, y, z, yaw) and their rates,
/// updated with the nearest detection inside the gate.
pub fn kf_baseline(seq: &TrackletSequence) -> Vec<Pose> {
    kf_track(seq, &KfConfig::for_sequence(seq))
}

pub fn kf_track(seq: &TrackletSequence, config: &KfConfig) -> Vec<Pose> {
    let dt = FRAME_DT;
    let p0 = seq.initial_pose();
    let mut x = Vec8::zeros();
    x.fixed_rows_mut::<4>(0).copy_from_slice(&p0.to_array());
    let mut p = Mat8::zeros();
    for i in 4..7 {
        p[(i, i)] = config.init_vel_std.powi(2);
    }
    p[(7, 7)] = config.init_yaw_rate_std.powi(2);

    let mut f = Mat8::identity();
    for i in 0..4 {
        f[(i, i + 4)] = dt;
    }
    let mut q = Mat8::zeros();
    for i in 0..4 {
        let s2 = if i < 3 { config.accel_std.powi(2) } else { config.yaw_accel_std.powi(2) };
        q[(i, i)] = s2 * dt.powi(4) / 4.0;
        q[(i, i + 4)] = s2 * dt.powi(3) / 2.0;
        q[(i + 4, i)] = s2 * dt.powi(3) / 2.0;
        q[(i + 4, i + 4)] = s2 * dt * dt;
    }
    let mut r = SMatrix::<f64, 4, 4>::zeros();
    for i in 0..3 {
        r[(i, i)] = config.meas_std_xyz.powi(2).max(1e-12);
    }
    r[(3, 3)] = config.meas_std_yaw.powi(2).max(1e-12);
    let h = SMatrix::<f64, 4, 8>::identity();

    let mut out = vec![p0];
    for frame in &seq.frames[1..] {
        x = f * x;
        x[3] = wrap_angle(x[3]);
        p = f * p * f.transpose() + q;
        let predicted = Pose::new(x[0], x[1], x[2], x[3]);
        if let Some(det) = associate_detection(&frame.detections, &predicted, config.gate) {
            let mut innov = SVector::<f64, 4>::from(det.to_array()) - h * x;
            innov[3] = wrap_angle(innov[3]);
            let s = h * p * h.transpose() + r;
            if let Some(s_inv) = s.try_inverse() {
                let k = p * h.transpose() * s_inv;
                x += k * innov;
                x[3] = wrap_angle(x[3]);
                let ikh = Mat8::identity() - k * h;
                p = ikh * p * ikh.transpose() + k * r * k.transpose();
            }
        }
        out.push(Pose::new(x[0], x[1], x[2], x[3]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar_sim::{gen_tracklet, TrackletConfig};
    use crate::sdf_net::DecoderDims;

    fn det(x: f64, y: f64) -> Detection {
        Detection {
            pose: Pose::new(x, y, 0.0, 0.0),
            score: 0.9,
        }
    }

    #[test]
    fn association_gate_boundaries() {
        let p = Pose::identity();
        assert_eq!(associate_detection(&[], &p, 3.0), None);
        assert!(associate_detection(&[det(2.9, 0.0)], &p, 3.0).is_some());
        assert!(associate_detection(&[det(3.1, 0.0)], &p, 3.0).is_none());
        let chosen = associate_detection(&[det(2.0, 0.0), det(0.0, 1.0), det(0.0, 5.0)], &p, 3.0).unwrap();
        assert_eq!(chosen.ty, 1.0);
    }

    #[test]
    fn detection_l1_wraps_yaw() {
        let a = Pose::new(1.0, 0.0, 0.0, 3.1);
        let b = Pose::new(0.0, 0.5, 0.0, -3.1);
        let (v, g) = detection_l1(&a, &b);
        let dyaw = 2.0 * std::f64::consts::PI - 6.2;
        assert!((v - (1.0 + 0.5 + dyaw)).abs() < 1e-12);
        assert_eq!(g, [1.0, -1.0, 0.0, -1.0]);
    }

    #[test]
    fn history_voxel_cap_and_counts() {
        let config = TrackConfig::default();
        let size = BoxSize::new(1.0, 1.0, 1.0).unwrap();
        let mut h = HistoryBuffer::new(config.history_voxel);
        let pts: Vec<Vec3> = (0..200).map(|i| Vec3::new(0.3 * (i as f64 * 0.37).sin(), 0.3 * (i as f64 * 0.11).cos(), 0.0)).collect();
        update_history(&mut h, &pts, &Pose::identity(), &size, &config);
        let once = h.len();
        update_history(&mut h, &pts, &Pose::identity(), &size, &config);
        assert_eq!(h.len(), once);
        assert_eq!(h.frame_counts(), &[200, 200]);
        // packing bound over the dilated box
        let side = 1.1 / config.history_voxel + 1.0;
        assert!((h.len() as f64) <= side.powi(3));
        update_history(&mut h, &[], &Pose::identity(), &size, &config);
        assert_eq!(h.len(), once);
        assert_eq!(h.newest_count(), 0);
        assert_eq!(h.index().len(), h.len());
    }

    #[test]
    fn adaptation_gate_keeps_code_bitwise() {
        let params = DecoderParams::init(3, DecoderDims { latent: 8, hidden: 16 });
        let size = BoxSize::new(1.5, 1.8, 4.5).unwrap();
        let config = TrackConfig::default();
        let z = ShapeCode((0..8).map(|i| 0.01 * i as f64 - 0.013).collect());
        let mut h = HistoryBuffer::new(0.05);
        let many: Vec<Vec3> = (0..100).map(|i| Vec3::new(0.02 * i as f64 - 1.0, 0.1, 0.2)).collect();
        h.push_canonical(&many);
        h.push_canonical(&many[..9]);
        let (out, outcome) = adapt_code(&h, &z, &params, &size, &config).unwrap();
        assert!(outcome.gated);
        assert!(out.0.iter().zip(&z.0).all(|(a, b)| a.to_bits() == b.to_bits()));
        h.push_canonical(&many[..10]);
        let (out, outcome) = adapt_code(&h, &z, &params, &size, &config).unwrap();
        assert!(!outcome.gated);
        let rec = outcome.record.unwrap();
        assert!(rec.best <= rec.initial);
        assert_ne!(out, z);
    }

    #[test]
    fn regularizer_dominance_shrinks_code() {
        let params = DecoderParams::init(5, DecoderDims { latent: 8, hidden: 16 });
        let size = BoxSize::new(1.5, 1.8, 4.5).unwrap();
        let config = TrackConfig {
            lambda: 1e6,
            code_lr: 1e-8,
            ..TrackConfig::default()
        };
        let start = ShapeCode(vec![0.3; 8]);
        let crop = PointCloud::new(vec![Vec3::new(0.5, 0.2, 0.1), Vec3::new(-1.0, 0.3, 0.0)], Frame::Canonical);
        let (z, rec) = init_shape_code(&crop, &params, &start, &size, &config).unwrap();
        assert!(z.norm() <= start.norm());
        assert!(rec.best <= rec.initial);
        assert!(init_shape_code(&PointCloud::empty(Frame::Canonical), &params, &start, &size, &config).is_err());
    }

    #[test]
    fn kf_follows_exact_detections() {
        let config = TrackletConfig {
            n_frames: 30,
            detections: Some(DetectionNoise {
                sigma_xyz: 0.0,
                sigma_yaw: 0.0,
                fn_prob: 0.0,
                fp_rate: 0.0,
            }),
            ..TrackletConfig::default()
        };
        let seq = gen_tracklet(&config, 4).unwrap();
        let out = kf_baseline(&seq);
        assert_eq!(out.len(), seq.len());
        for (t, (p, f)) in out.iter().zip(&seq.frames).enumerate().skip(5) {
            let d = f.detections[0].pose;
            assert!(p.center_distance(&d) < 1e-6, "frame {t}");
            assert!(wrap_angle(p.yaw - d.yaw).abs() < 1e-6);
        }
    }

    #[test]
    fn kf_without_detections_extrapolates_from_start() {
        let seq = gen_tracklet(&TrackletConfig { n_frames: 10, ..TrackletConfig::default() }, 1).unwrap();
        let out = kf_baseline(&seq);
        assert!(out.iter().all(|p| *p == seq.initial_pose()));
    }

    #[test]
    fn adapt_frames_schedule() {
        let mut c = TrackConfig::default();
        assert!(c.adapts_at(0) && c.adapts_at(1000));
        c.adapt_frames = Some(0);
        assert!(!c.adapts_at(0));
        c.adapt_frames = Some(5);
        assert!(c.adapts_at(4) && !c.adapts_at(5));
    }

    #[test]
    fn config_validation() {
        assert!(TrackConfig::default().validate().is_ok());
        assert!(TrackConfig { pose_iters: 0, ..TrackConfig::default() }.validate().is_err());
        assert!(TrackConfig { crop_dilation: 0.9, ..TrackConfig::default() }.validate().is_err());
        assert!(TrackConfig { gamma: -1.0, ..TrackConfig::default() }.validate().is_err());
        let parsed: std::result::Result<TrackConfig, _> = serde_json::from_str(r#"{"bogus": 1}"#);
        assert!(parsed.is_err());
    }
}
