//! Rigid yaw-plus-translation transforms, box cropping, canonical
//! normalization and the nearest-neighbour machinery used by the tracker.

mod chamfer;
mod iou;
mod kdtree;

pub use chamfer::{chamfer_single_side, voxel_downsample, VoxelGrid};
pub use iou::{bev_corners, box_iou_3d, convex_clip, polygon_area};
pub use kdtree::NnIndex;

use std::f64::consts::PI;

use nalgebra::{Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Margin applied on top of the box half-diagonal when mapping into the
/// decoder's unit-sphere domain.
pub const NORMALIZATION_MARGIN: f64 = 1.03;

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Object pose: world-frame center and heading about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub yaw: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn new(tx: f64, ty: f64, tz: f64, yaw: f64) -> Self {
        Pose {
            tx,
            ty,
            tz,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Pose::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.tx, self.ty, self.tz)
    }

    pub fn is_finite(&self) -> bool {
        self.tx.is_finite() && self.ty.is_finite() && self.tz.is_finite() && self.yaw.is_finite()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tz, self.yaw]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Pose::new(a[0], a[1], a[2], a[3])
    }

    /// `R(-yaw) (p - t)`.
    pub fn world_to_canonical(&self, p: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.translation();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// `R(yaw) q + t`.
    pub fn canonical_to_world(&self, q: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(
            c * q.x - s * q.y + self.tx,
            s * q.x + c * q.y + self.ty,
            q.z + self.tz,
        )
    }

    /// Partial derivatives of [`Pose::world_to_canonical`] with respect to
    /// `(tx, ty, tz, yaw)`, one column each.
    pub fn jacobian(&self, p: &Vec3) -> Matrix3x4<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.translation();
        Matrix3x4::new(
            -c,
            -s,
            0.0,
            -s * d.x + c * d.y,
            s,
            -c,
            0.0,
            -c * d.x - s * d.y,
            0.0,
            0.0,
            -1.0,
            0.0,
        )
    }

    /// Horizontal distance between two pose centers.
    pub fn center_distance(&self, other: &Pose) -> f64 {
        (self.translation() - other.translation()).norm()
    }
}

/// Free-function form of [`Pose::world_to_canonical`].
pub fn world_to_canonical(pose: &Pose, p: &Vec3) -> Vec3 {
    pose.world_to_canonical(p)
}

pub fn canonical_to_world(pose: &Pose, q: &Vec3) -> Vec3 {
    pose.canonical_to_world(q)
}

pub fn pose_jacobian(pose: &Pose, p: &Vec3) -> Matrix3x4<f64> {
    pose.jacobian(p)
}

/// Object extents in meters: height (z), width (y), length (x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSize {
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

impl BoxSize {
    pub fn new(h: f64, w: f64, l: f64) -> Result<Self> {
        if !(h > 0.0 && w > 0.0 && l > 0.0) || !(h.is_finite() && w.is_finite() && l.is_finite()) {
            return Err(Error::Config(format!(
                "box extents must be positive and finite, got h={h} w={w} l={l}"
            )));
        }
        Ok(BoxSize { h, w, l })
    }

    /// Half extents ordered as canonical axes (x = length, y = width, z = height).
    pub fn half_extents(&self) -> Vec3 {
        Vec3::new(self.l / 2.0, self.w / 2.0, self.h / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    /// Factor mapping canonical meters into the decoder's normalized frame.
    pub fn normalization_scale(&self) -> f64 {
        let diag = (self.h * self.h + self.w * self.w + self.l * self.l).sqrt();
        2.0 / (diag * NORMALIZATION_MARGIN)
    }
}

pub fn normalize_canonical(size: &BoxSize, p: &Vec3) -> Vec3 {
    p * size.normalization_scale()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    World,
    Canonical,
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, frame: Frame) -> Self {
        PointCloud { points, frame }
    }

    pub fn empty(frame: Frame) -> Self {
        PointCloud {
            points: Vec::new(),
            frame,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// True when canonical point `q` lies inside the box scaled by `dilation`.
pub fn inside_box(q: &Vec3, size: &BoxSize, dilation: f64) -> bool {
    let half = size.half_extents() * dilation;
    q.x.abs() <= half.x && q.y.abs() <= half.y && q.z.abs() <= half.z
}

/// Selects the points of a world-frame cloud inside the (dilated) box at
/// `pose`, returned in the canonical frame of that pose. Input order is kept.
pub fn crop_points(frame: &PointCloud, pose: &Pose, size: &BoxSize, dilation: f64) -> PointCloud {
    debug_assert!(dilation >= 1.0, "crop dilation must be >= 1");
    let points = frame
        .points
        .iter()
        .map(|p| pose.world_to_canonical(p))
        .filter(|q| inside_box(q, size, dilation))
        .collect();
    PointCloud::new(points, Frame::Canonical)
}

/// Same selection as [`crop_points`] but keeps the world coordinates.
pub fn crop_world_points(frame: &PointCloud, pose: &Pose, size: &BoxSize, dilation: f64) -> Vec<Vec3> {
    frame
        .points
        .iter()
        .filter(|p| inside_box(&pose.world_to_canonical(p), size, dilation))
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-PI..PI),
        )
    }

    #[test]
    fn identity_transform() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().world_to_canonical(&p), p);
    }

    #[test]
    fn quarter_turn_transform() {
        let pose = Pose::new(1.0, 0.0, 0.0, PI / 2.0);
        let q = pose.world_to_canonical(&Vec3::new(1.0, 1.0, 0.0));
        assert!((q - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn transform_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let p = Vec3::new(
                rng.random_range(-80.0..80.0),
                rng.random_range(-80.0..80.0),
                rng.random_range(-5.0..5.0),
            );
            let back = pose.canonical_to_world(&pose.world_to_canonical(&p));
            assert!((back - p).norm() < 1e-12);
            let fwd = pose.world_to_canonical(&pose.canonical_to_world(&p));
            assert!((fwd - p).norm() < 1e-12);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
        assert!((wrap_angle(2.0 * PI + 0.25) - 0.25).abs() < 1e-12);
        for k in -20..20 {
            let a = wrap_angle(k as f64 * 0.7);
            assert!(a > -PI && a <= PI);
        }
    }

    #[test]
    fn jacobian_identity_translation_columns() {
        let j = Pose::identity().jacobian(&Vec3::new(0.3, -2.0, 5.0));
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { -1.0 } else { 0.0 };
                assert_eq!(j[(r, c)], expect);
            }
        }
    }

    #[test]
    fn jacobian_yaw_column_at_zero() {
        let pose = Pose::new(2.0, 1.0, 0.0, 0.0);
        let j = pose.jacobian(&Vec3::new(3.0, 1.0, 0.0));
        assert_eq!(j.column(3).into_owned(), Vec3::new(0.0, -1.0, 0.0));
    }

    #[test]
    fn normalization_examples() {
        let unit = BoxSize::new(1.0, 1.0, 1.0).unwrap();
        assert_eq!(normalize_canonical(&unit, &Vec3::zeros()), Vec3::zeros());
        let corner = normalize_canonical(&unit, &Vec3::new(0.5, 0.5, 0.5));
        assert!((corner.norm() - 1.0 / 1.03).abs() < 1e-12);

        let two = BoxSize::new(2.0, 2.0, 2.0).unwrap();
        let p = normalize_canonical(&two, &Vec3::new(1.0, 0.0, 0.0));
        let expect = 2.0 / (2.0 * 3f64.sqrt() * 1.03);
        assert!((p.x - expect).abs() < 1e-15);
        assert_eq!((p.y, p.z), (0.0, 0.0));
    }

    #[test]
    fn box_size_rejects_non_positive() {
        assert!(BoxSize::new(0.0, 1.0, 1.0).is_err());
        assert!(BoxSize::new(1.0, -1.0, 1.0).is_err());
        assert!(BoxSize::new(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn crop_empty_and_center() {
        let size = BoxSize::new(1.5, 1.8, 4.5).unwrap();
        let pose = Pose::new(10.0, -3.0, 0.75, 0.4);
        let empty = PointCloud::empty(Frame::World);
        assert!(crop_points(&empty, &pose, &size, 1.25).is_empty());

        let center = PointCloud::new(vec![pose.translation()], Frame::World);
        for dilation in [1.0, 1.25, 3.0] {
            let out = crop_points(&center, &pose, &size, dilation);
            assert_eq!(out.len(), 1);
            assert!(out.points[0].norm() < 1e-12);
            assert_eq!(out.frame, Frame::Canonical);
        }
    }

    #[test]
    fn crop_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                )
            })
            .collect();
        let cloud = PointCloud::new(pts.clone(), Frame::World);
        let size = BoxSize::new(1.0, 1.0, 1.0).unwrap();
        let out = crop_points(&cloud, &Pose::identity(), &size, 1.0);
        let expected: Vec<Vec3> = pts
            .into_iter()
            .filter(|p| p.x.abs() <= 0.5 && p.y.abs() <= 0.5 && p.z.abs() <= 0.5)
            .collect();
        assert_eq!(out.points, expected);
    }

    #[test]
    fn crop_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&mut rng);
        let size = BoxSize::new(1.6, 1.9, 4.6).unwrap();
        let pts: Vec<Vec3> = (0..2000)
            .map(|_| {
                pose.canonical_to_world(&Vec3::new(
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ))
            })
            .collect();
        let world = crop_world_points(&PointCloud::new(pts, Frame::World), &pose, &size, 1.0);
        let once = crop_points(&PointCloud::new(world.clone(), Frame::World), &pose, &size, 1.0);
        assert_eq!(once.len(), world.len());
        // cropping canonical output again at the identity pose keeps everything
        let twice = crop_points(&PointCloud::new(once.points.clone(), Frame::World), &Pose::identity(), &size, 1.0);
        assert_eq!(twice.points, once.points);
    }
}
