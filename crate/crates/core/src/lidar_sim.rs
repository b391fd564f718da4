//! Synthetic tracklets: object trajectories, sphere-traced LiDAR returns from
//! the posed analytic shape, and noisy detector boxes.

use std::f64::consts::{PI, TAU};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crop_points, wrap_angle, BoxSize, Frame, PointCloud, Pose, Vec3};
use crate::prior_train::random_shape_params;
use crate::sdf_net::AnalyticShape;

/// Seconds between frames (10 Hz).
pub const FRAME_DT: f64 = 0.1;
/// Upper bound on per-frame displacement (54 km/h at 10 Hz).
pub const MAX_STEP_M: f64 = 1.5;
pub const TRACKLET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionProfile {
    Straight,
    Turn,
    StopAndGo,
}

impl MotionProfile {
    pub const ALL: [MotionProfile; 3] = [MotionProfile::Straight, MotionProfile::Turn, MotionProfile::StopAndGo];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub origin: [f64; 3],
    /// Horizontal angular step, radians.
    pub azimuth_resolution: f64,
    pub elevation_rows: usize,
    pub elevation_min: f64,
    pub elevation_max: f64,
    /// Standard deviation of the range error, meters.
    pub range_noise: f64,
    pub dropout: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        SensorSpec {
            origin: [0.0, 0.0, 1.8],
            azimuth_resolution: 0.5f64.to_radians(),
            elevation_rows: 32,
            elevation_min: (-18.0f64).to_radians(),
            elevation_max: 2.0f64.to_radians(),
            range_noise: 0.02,
            dropout: 0.1,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.azimuth_resolution > 0.0) || self.elevation_rows == 0 || !(self.elevation_max > self.elevation_min) {
            return Err(Error::Config("sensor resolutions must be positive".into()));
        }
        if self.range_noise < 0.0 || !(0.0..1.0).contains(&self.dropout) && self.dropout != 1.0 {
            return Err(Error::Config("range noise must be >= 0 and dropout in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    fn row_elevation(&self, row: usize) -> f64 {
        if self.elevation_rows == 1 {
            return 0.5 * (self.elevation_min + self.elevation_max);
        }
        self.elevation_min + (self.elevation_max - self.elevation_min) * row as f64 / (self.elevation_rows - 1) as f64
    }
}

/// Default cruise speed range, m/s. At 10 Hz the fastest object moves 0.45 m
/// per frame, inside the margin of a 1.25x crop around a 3.9 m box.
pub const DEFAULT_SPEED_RANGE: [f64; 2] = [1.0, 4.5];

/// Trajectory of object poses at 10 Hz; yaw follows the heading of motion.
pub fn gen_trajectory(seed: u64, n_frames: usize, profile: MotionProfile) -> Result<Vec<Pose>> {
    gen_trajectory_with_speed(seed, n_frames, profile, DEFAULT_SPEED_RANGE)
}

/// As [`gen_trajectory`] with an explicit cruise speed range in m/s.
pub fn gen_trajectory_with_speed(seed: u64, n_frames: usize, profile: MotionProfile, speed_range: [f64; 2]) -> Result<Vec<Pose>> {
    if n_frames < 2 {
        return Err(Error::Config("a trajectory needs at least two frames".into()));
    }
    if !(speed_range[0] >= 0.0 && speed_range[1] > speed_range[0]) {
        return Err(Error::Config("speed range must be increasing and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speed: f64 = rng.random_range(speed_range[0]..speed_range[1]);
    let heading0: f64 = rng.random_range(-PI..PI);
    let yaw_rate: f64 = match profile {
        MotionProfile::Turn => rng.random_range(0.1..0.35) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        _ => 0.0,
    };
    let period: f64 = rng.random_range(4.0..8.0);
    let phase: f64 = rng.random_range(0.0..TAU);

    let mut poses = Vec::with_capacity(n_frames);
    let mut pos = Vec3::zeros();
    let mut heading = heading0;
    for k in 0..n_frames {
        let t = k as f64 * FRAME_DT;
        poses.push(Pose::new(pos.x, pos.y, 0.0, heading));
        let v = match profile {
            MotionProfile::StopAndGo => speed * (TAU * t / period + phase).sin().max(0.0),
            _ => speed,
        };
        let step = (v * FRAME_DT).min(MAX_STEP_M);
        pos += Vec3::new(heading.cos(), heading.sin(), 0.0) * step;
        heading = wrap_angle(heading + yaw_rate * FRAME_DT);
    }
    Ok(poses)
}

/// World-frame signed distance of the posed, denormalized shape (meters).
pub fn world_sdf(shape: &AnalyticShape, pose: &Pose, size: &BoxSize, p: &Vec3) -> f64 {
    let s = size.normalization_scale();
    shape.sdf(&(pose.world_to_canonical(p) * s)) / s
}

fn trace(shape: &AnalyticShape, pose: &Pose, size: &BoxSize, origin: &Vec3, dir: &Vec3, t0: f64, t1: f64) -> Option<f64> {
    let mut t = t0;
    for _ in 0..512 {
        let d = world_sdf(shape, pose, size, &(origin + dir * t));
        if d < 1e-7 {
            return Some(t);
        }
        t += d;
        if t > t1 {
            return None;
        }
    }
    None
}

/// Ground hits included by [`render_scan_with_ground`] reach this far beyond
/// the object's bounding radius.
const GROUND_MARGIN_M: f64 = 3.0;

/// Simulated scan of a single posed object.
pub fn render_scan(shape: &AnalyticShape, pose: &Pose, size: &BoxSize, spec: &SensorSpec, seed: u64) -> PointCloud {
    render_scan_with_ground(shape, pose, size, spec, seed, false)
}

/// As [`render_scan`], optionally adding ground returns (z = 0) around the object.
pub fn render_scan_with_ground(
    shape: &AnalyticShape,
    pose: &Pose,
    size: &BoxSize,
    spec: &SensorSpec,
    seed: u64,
    ground: bool,
) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = spec.origin();
    let center = pose.translation();
    let radius = 0.5 * (size.h * size.h + size.w * size.w + size.l * size.l).sqrt();
    let window_radius = if ground { radius + GROUND_MARGIN_M } else { radius };
    let to_center = center - origin;
    let dist = to_center.norm();
    if dist <= radius {
        return PointCloud::empty(Frame::World);
    }
    let half_angle = (window_radius / dist).min(1.0).asin();
    let az_c = to_center.y.atan2(to_center.x);
    let el_c = (to_center.z / to_center.xy().norm()).atan();
    let noise = Normal::new(0.0, spec.range_noise.max(0.0)).unwrap();

    let k_lo = ((az_c - half_angle) / spec.azimuth_resolution).floor() as i64;
    let k_hi = ((az_c + half_angle) / spec.azimuth_resolution).ceil() as i64;
    let mut points = Vec::new();
    for row in 0..spec.elevation_rows {
        let el = spec.row_elevation(row);
        if ground {
            if (el - el_c).abs() > half_angle && el > el_c {
                continue;
            }
        } else if (el - el_c).abs() > half_angle {
            continue;
        }
        for k in k_lo..=k_hi {
            let az = k as f64 * spec.azimuth_resolution;
            let dir = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let hit = trace(shape, pose, size, &origin, &dir, (dist - radius - 0.5).max(0.0), dist + radius + 0.5);
            let range = match hit {
                Some(t) => Some(t),
                None if ground && dir.z < -1e-6 => {
                    let t = -origin.z / dir.z;
                    let p = origin + dir * t;
                    ((p - center).xy().norm() <= window_radius).then_some(t)
                }
                None => None,
            };
            let Some(r) = range else { continue };
            let r_noisy = if spec.range_noise > 0.0 { r + noise.sample(&mut rng) } else { r };
            let keep = spec.dropout <= 0.0 || rng.random::<f64>() >= spec.dropout;
            if keep {
                points.push(origin + dir * r_noisy);
            }
        }
    }
    PointCloud::new(points, Frame::World)
}

/// Height-threshold ground removal.
pub fn remove_ground(cloud: &PointCloud, z_threshold: f64) -> PointCloud {
    PointCloud::new(
        cloud.points.iter().filter(|p| p.z > z_threshold).copied().collect(),
        cloud.frame,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub pose: Pose,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionNoise {
    pub sigma_xyz: f64,
    pub sigma_yaw: f64,
    /// Probability of missing the true object.
    pub fn_prob: f64,
    /// Probability of one false positive in a frame.
    pub fp_rate: f64,
}

impl Default for DetectionNoise {
    fn default() -> Self {
        DetectionNoise {
            sigma_xyz: 0.1,
            sigma_yaw: 0.05,
            fn_prob: 0.05,
            fp_rate: 0.1,
        }
    }
}

/// Radius around the true object inside which false positives appear.
pub const FALSE_POSITIVE_RADIUS_M: f64 = 15.0;
const DETECTION_SCORE: f64 = 0.9;

/// Simulated detector output for one frame.
pub fn gen_detections(gt: &Pose, noise: &DetectionNoise, seed: u64) -> Result<Vec<Detection>> {
    if !(0.0..1.0).contains(&noise.fn_prob) && noise.fn_prob != 1.0 || !(0.0..1.0).contains(&noise.fp_rate) {
        return Err(Error::Config("detection probabilities must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if rng.random::<f64>() >= noise.fn_prob {
        let n_xyz = Normal::new(0.0, noise.sigma_xyz.max(0.0)).unwrap();
        let n_yaw = Normal::new(0.0, noise.sigma_yaw.max(0.0)).unwrap();
        out.push(Detection {
            pose: Pose::new(
                gt.tx + n_xyz.sample(&mut rng),
                gt.ty + n_xyz.sample(&mut rng),
                gt.tz + n_xyz.sample(&mut rng),
                gt.yaw + n_yaw.sample(&mut rng),
            ),
            score: DETECTION_SCORE,
        });
    }
    if rng.random::<f64>() < noise.fp_rate {
        let r = FALSE_POSITIVE_RADIUS_M * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..TAU);
        out.push(Detection {
            pose: Pose::new(gt.tx + r * a.cos(), gt.ty + r * a.sin(), gt.tz, rng.random_range(-PI..PI)),
            score: DETECTION_SCORE,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackletConfig {
    pub n_frames: usize,
    /// Fixed profile, or cycled by seed when absent.
    pub profile: Option<MotionProfile>,
    pub sensor: SensorSpec,
    /// Range of the mean object distance from the sensor, meters.
    pub distance_range: [f64; 2],
    /// Cruise speed range, m/s.
    pub speed_range: [f64; 2],
    /// Range of the object length, meters.
    pub length_range: [f64; 2],
    pub detections: Option<DetectionNoise>,
    pub ground_plane: bool,
}

impl Default for TrackletConfig {
    fn default() -> Self {
        TrackletConfig {
            n_frames: 100,
            profile: None,
            sensor: SensorSpec::default(),
            distance_range: [8.0, 25.0],
            speed_range: DEFAULT_SPEED_RANGE,
            length_range: [3.9, 5.0],
            detections: None,
            ground_plane: false,
        }
    }
}

impl TrackletConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::Config("tracklets need at least two frames".into()));
        }
        if !(self.distance_range[0] > 0.0 && self.distance_range[1] >= self.distance_range[0]) {
            return Err(Error::Config("invalid distance range".into()));
        }
        if !(self.length_range[0] > 0.0 && self.length_range[1] >= self.length_range[0]) {
            return Err(Error::Config("invalid length range".into()));
        }
        self.sensor.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackletFrame {
    pub points: PointCloud,
    pub gt_pose: Pose,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackletMeta {
    pub seed: u64,
    pub profile: MotionProfile,
    pub sensor: SensorSpec,
    pub detection_noise: Option<DetectionNoise>,
    pub ground_plane: bool,
    /// Object points inside the ground-truth box in frame 0.
    pub first_frame_points: usize,
    /// Mean horizontal distance between sensor and object, meters.
    pub mean_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackletSequence {
    pub size: BoxSize,
    pub shape: AnalyticShape,
    pub frames: Vec<TrackletFrame>,
    pub meta: TrackletMeta,
}

impl TrackletSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn initial_pose(&self) -> Pose {
        self.frames[0].gt_pose
    }

    pub fn gt_poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.gt_pose).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Format("tracklet has fewer than two frames".into()));
        }
        if self.frames.iter().any(|f| !f.gt_pose.is_finite() || !f.points.is_finite()) {
            return Err(Error::Format("tracklet contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Object points in frame 0 under the ground-truth box.
pub fn count_first_frame_points(seq: &TrackletSequence) -> usize {
    crop_points(&seq.frames[0].points, &seq.frames[0].gt_pose, &seq.size, 1.0).len()
}

fn quantize_f32(p: Vec3) -> Vec3 {
    Vec3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64)
}

fn place_trajectory(raw: &[Pose], rng: &mut ChaCha8Rng, config: &TrackletConfig, half_height: f64) -> Vec<Pose> {
    let n = raw.len() as f64;
    let centroid = raw.iter().fold(Vec3::zeros(), |acc, p| acc + p.translation()) / n;
    let mut placed = Vec::new();
    for _ in 0..64 {
        let d = rng.random_range(config.distance_range[0]..=config.distance_range[1]);
        let bearing = rng.random_range(-PI..PI);
        let shift = Vec3::new(d * bearing.cos(), d * bearing.sin(), 0.0) - centroid;
        placed = raw
            .iter()
            .map(|p| Pose::new(p.tx + shift.x, p.ty + shift.y, half_height, p.yaw))
            .collect();
        let ok = placed
            .iter()
            .all(|p| (p.tx.hypot(p.ty)) > 6.0 && p.tx.hypot(p.ty) < config.distance_range[1] + 40.0);
        if ok {
            break;
        }
    }
    placed
}

/// Full synthetic tracklet; deterministic given `(config, seed)`.
pub fn gen_tracklet(config: &TrackletConfig, seed: u64) -> Result<TrackletSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = AnalyticShape::from_params(random_shape_params(&mut rng));
    let length = rng.random_range(config.length_range[0]..=config.length_range[1]);
    let size = shape.box_size(length);
    let profile = config
        .profile
        .unwrap_or(MotionProfile::ALL[(seed % MotionProfile::ALL.len() as u64) as usize]);
    let raw = gen_trajectory_with_speed(rng.random(), config.n_frames, profile, config.speed_range)?;
    let poses = place_trajectory(&raw, &mut rng, config, size.h / 2.0);

    let mut frames = Vec::with_capacity(poses.len());
    for pose in &poses {
        let scan_seed: u64 = rng.random();
        let det_seed: u64 = rng.random();
        let cloud = render_scan_with_ground(&shape, pose, &size, &config.sensor, scan_seed, config.ground_plane);
        let points = PointCloud::new(cloud.points.into_iter().map(quantize_f32).collect(), Frame::World);
        let detections = match &config.detections {
            Some(noise) => gen_detections(pose, noise, det_seed)?,
            None => Vec::new(),
        };
        frames.push(TrackletFrame {
            points,
            gt_pose: *pose,
            detections,
        });
    }
    let origin = config.sensor.origin();
    let mean_distance = poses
        .iter()
        .map(|p| (p.translation() - origin).xy().norm())
        .sum::<f64>()
        / poses.len() as f64;
    let mut seq = TrackletSequence {
        size,
        shape,
        frames,
        meta: TrackletMeta {
            seed,
            profile,
            sensor: config.sensor,
            detection_noise: config.detections,
            ground_plane: config.ground_plane,
            first_frame_points: 0,
            mean_distance,
        },
    };
    seq.meta.first_frame_points = count_first_frame_points(&seq);
    Ok(seq)
}

// ---- file format ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    gt_pose: Pose,
    n_points: usize,
    /// Little-endian f32 xyz triples, base64.
    points: String,
    detections: Vec<Detection>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackletFile {
    schema_version: u32,
    meta: TrackletMeta,
    size: BoxSize,
    shape: AnalyticShape,
    frames: Vec<FrameRecord>,
}

pub fn encode_points_f32(points: &[Vec3]) -> String {
    let mut bytes = Vec::with_capacity(points.len() * 12);
    for p in points {
        for v in [p.x, p.y, p.z] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    B64.encode(bytes)
}

pub fn decode_points_f32(s: &str, expected: usize) -> Result<Vec<Vec3>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Format(format!("invalid base64 point blob: {e}")))?;
    if bytes.len() != expected * 12 {
        return Err(Error::Format(format!(
            "point blob holds {} bytes, expected {} points",
            bytes.len(),
            expected
        )));
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap()) as f64;
            Vec3::new(f(0), f(4), f(8))
        })
        .collect())
}

impl TrackletSequence {
    pub fn to_json(&self) -> Result<String> {
        let file = TrackletFile {
            schema_version: TRACKLET_SCHEMA_VERSION,
            meta: self.meta.clone(),
            size: self.size,
            shape: self.shape.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameRecord {
                    gt_pose: f.gt_pose,
                    n_points: f.points.len(),
                    points: encode_points_f32(&f.points.points),
                    detections: f.detections.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: TrackletFile = serde_json::from_str(s)?;
        if file.schema_version != TRACKLET_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported tracklet schema version {}",
                file.schema_version
            )));
        }
        let frames = file
            .frames
            .into_iter()
            .map(|r| {
                Ok(TrackletFrame {
                    points: PointCloud::new(decode_points_f32(&r.points, r.n_points)?, Frame::World),
                    gt_pose: r.gt_pose,
                    detections: r.detections,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let seq = TrackletSequence {
            size: BoxSize::new(file.size.h, file.size.w, file.size.l)?,
            shape: file.shape,
            frames,
            meta: file.meta,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        TrackletSequence::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_shape() -> (AnalyticShape, BoxSize) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = AnalyticShape::from_params(random_shape_params(&mut rng));
        let size = shape.box_size(4.5);
        (shape, size)
    }

    #[test]
    fn trajectory_properties() {
        for seed in 0..30 {
            for profile in MotionProfile::ALL {
                let poses = gen_trajectory(seed, 100, profile).unwrap();
                assert_eq!(poses.len(), 100);
                assert_eq!(poses, gen_trajectory(seed, 100, profile).unwrap());
                for w in poses.windows(2) {
                    let d = w[1].translation() - w[0].translation();
                    assert!(d.norm() <= MAX_STEP_M + 1e-12);
                    if d.norm() > 1e-9 {
                        let heading = d.y.atan2(d.x);
                        assert!(wrap_angle(heading - w[0].yaw).abs() < 1e-9);
                    } else {
                        assert!(wrap_angle(w[1].yaw - w[0].yaw).abs() < 1e-12);
                    }
                }
                if profile == MotionProfile::Straight {
                    assert!(poses.iter().all(|p| p.yaw == poses[0].yaw));
                }
            }
        }
        assert!(gen_trajectory(0, 1, MotionProfile::Straight).is_err());
        for seed in 0..10 {
            let fast = gen_trajectory_with_speed(seed, 50, MotionProfile::Turn, [10.0, 25.0]).unwrap();
            assert!(fast.windows(2).all(|w| w[0].center_distance(&w[1]) <= MAX_STEP_M + 1e-12));
        }
    }

    #[test]
    fn noiseless_scan_lies_on_surface() {
        let (shape, size) = test_shape();
        let spec = SensorSpec {
            range_noise: 0.0,
            dropout: 0.0,
            ..SensorSpec::default()
        };
        let pose = Pose::new(12.0, 5.0, size.h / 2.0, 0.6);
        let scan = render_scan(&shape, &pose, &size, &spec, 3);
        assert!(scan.len() > 50);
        let s = size.normalization_scale();
        for p in &scan.points {
            let n = pose.world_to_canonical(p) * s;
            assert!(shape.sdf(&n).abs() < 1e-3);
        }
    }

    #[test]
    fn far_objects_return_fewer_points() {
        let (shape, size) = test_shape();
        let spec = SensorSpec::default();
        let near = render_scan(&shape, &Pose::new(10.0, 0.0, size.h / 2.0, 0.3), &size, &spec, 1);
        let far = render_scan(&shape, &Pose::new(60.0, 0.0, size.h / 2.0, 0.3), &size, &spec, 1);
        assert!(far.len() < near.len());
    }

    #[test]
    fn full_dropout_is_empty() {
        let (shape, size) = test_shape();
        let spec = SensorSpec {
            dropout: 1.0,
            ..SensorSpec::default()
        };
        assert!(render_scan(&shape, &Pose::new(10.0, 0.0, size.h / 2.0, 0.0), &size, &spec, 1).is_empty());
    }

    #[test]
    fn ground_mode_and_removal() {
        let (shape, size) = test_shape();
        let spec = SensorSpec {
            range_noise: 0.0,
            dropout: 0.0,
            ..SensorSpec::default()
        };
        let pose = Pose::new(15.0, 0.0, size.h / 2.0, 0.0);
        let plain = render_scan(&shape, &pose, &size, &spec, 1);
        let with_ground = render_scan_with_ground(&shape, &pose, &size, &spec, 1, true);
        assert!(with_ground.len() > plain.len());
        let cleaned = remove_ground(&with_ground, 0.05);
        assert!(cleaned.points.iter().all(|p| p.z > 0.05));
        assert!(cleaned.len() >= plain.len() * 9 / 10);
    }

    #[test]
    fn detections_behaviour() {
        let gt = Pose::new(3.0, 4.0, 0.8, 0.2);
        let exact = DetectionNoise {
            sigma_xyz: 0.0,
            sigma_yaw: 0.0,
            fn_prob: 0.0,
            fp_rate: 0.0,
        };
        let d = gen_detections(&gt, &exact, 5).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].pose, gt);
        let all_missed = DetectionNoise {
            fn_prob: 1.0,
            fp_rate: 0.5,
            ..exact
        };
        for seed in 0..50 {
            for det in gen_detections(&gt, &all_missed, seed).unwrap() {
                assert!(det.pose.center_distance(&gt) <= FALSE_POSITIVE_RADIUS_M + 1e-9);
                assert_ne!(det.pose, gt);
            }
        }
        assert!(gen_detections(&gt, &DetectionNoise { fp_rate: 1.0, ..exact }, 1).is_err());
    }

    #[test]
    fn true_positive_error_statistics() {
        // per-axis folded normal mean sigma*sqrt(2/pi); norm over 3 axes
        let gt = Pose::new(0.0, 0.0, 0.0, 0.0);
        let sigma = 0.3;
        let noise = DetectionNoise {
            sigma_xyz: sigma,
            sigma_yaw: 0.0,
            fn_prob: 0.0,
            fp_rate: 0.0,
        };
        let mut mean_abs = Vec3::zeros();
        let n = 10_000;
        for seed in 0..n {
            let d = gen_detections(&gt, &noise, seed).unwrap()[0].pose;
            mean_abs += Vec3::new(d.tx.abs(), d.ty.abs(), d.tz.abs());
        }
        mean_abs /= n as f64;
        let per_axis = sigma * (2.0 / PI).sqrt();
        for i in 0..3 {
            assert!((mean_abs[i] - per_axis).abs() < 0.01);
        }
        assert!((mean_abs.norm() - per_axis * 3f64.sqrt()).abs() < 0.01);
    }

    #[test]
    fn tracklet_is_deterministic_and_round_trips() {
        let config = TrackletConfig {
            n_frames: 6,
            detections: Some(DetectionNoise::default()),
            ..TrackletConfig::default()
        };
        let a = gen_tracklet(&config, 42).unwrap();
        let b = gen_tracklet(&config, 42).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.len(), 6);
        assert_eq!(a.meta.first_frame_points, count_first_frame_points(&a));
        let back = TrackletSequence::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(TrackletSequence::from_json(&a.to_json().unwrap().replace("\"schema_version\":1", "\"schema_version\":9")).is_err());
    }

    #[test]
    fn gt_crop_recovers_object_points() {
        let config = TrackletConfig {
            n_frames: 5,
            sensor: SensorSpec {
                range_noise: 0.0,
                ..SensorSpec::default()
            },
            ..TrackletConfig::default()
        };
        for seed in 0..5 {
            let seq = gen_tracklet(&config, seed).unwrap();
            for f in &seq.frames {
                let kept = crop_points(&f.points, &f.gt_pose, &seq.size, 1.0).len();
                assert_eq!(kept, f.points.len());
            }
        }
    }
}
