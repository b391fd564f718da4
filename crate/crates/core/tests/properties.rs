use std::f64::consts::PI;

use imptrack::eval::{accuracy_robustness, success_precision, TrackletResult};
use imptrack::geometry::{
    box_iou_3d, chamfer_single_side, crop_points, voxel_downsample, wrap_angle, BoxSize, Frame, NnIndex, PointCloud,
    Pose, Vec3,
};
use imptrack::recon::marching_cubes_fn;
use imptrack::sdf_net::{smooth_l1, DecoderDims, DecoderParams, ShapeCode};
use imptrack::tracker::{adapt_code, HistoryBuffer, TrackConfig};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = Pose> {
    (-50.0..50.0, -50.0..50.0, -3.0..3.0, -10.0..10.0).prop_map(|(x, y, z, a)| Pose::new(x, y, z, a))
}

fn size() -> impl Strategy<Value = BoxSize> {
    (0.3..3.0, 0.3..3.0, 0.5..6.0).prop_map(|(h, w, l)| BoxSize::new(h, w, l).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn wrapped_yaw_in_half_open_range(a in -1e3..1e3f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        prop_assert!((a.sin() - w.sin()).abs() < 1e-9 && (a.cos() - w.cos()).abs() < 1e-9);
    }

    #[test]
    fn pose_transform_inverts(p in pose(), x in vec3(80.0)) {
        let back = p.canonical_to_world(&p.world_to_canonical(&x));
        prop_assert!((back - x).norm() < 1e-12);
    }

    #[test]
    fn iou_bounds_and_symmetry(pa in pose(), sa in size(), d in vec3(3.0), yaw in -4.0..4.0f64, sb in size()) {
        let pb = Pose::new(pa.tx + d.x, pa.ty + d.y, pa.tz + d.z, yaw);
        let ab = box_iou_3d(&pa, &sa, &pb, &sb);
        let ba = box_iou_3d(&pb, &sb, &pa, &sa);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((box_iou_3d(&pa, &sa, &pa, &sa) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn chamfer_non_negative_and_zero_on_subset(pts in prop::collection::vec(vec3(5.0), 1..60), extra in prop::collection::vec(vec3(5.0), 0..30)) {
        let mut target = pts.clone();
        target.extend(extra.iter().copied());
        let (cd, grads) = chamfer_single_side(&pts, &NnIndex::build(target)).unwrap();
        prop_assert_eq!(cd, 0.0);
        prop_assert!(grads.iter().all(|g| g.norm() == 0.0));
        let (cd2, _) = chamfer_single_side(&extra, &NnIndex::build(pts.clone())).unwrap();
        prop_assert!(cd2 >= 0.0);
    }

    #[test]
    fn crop_is_idempotent_and_inside(pts in prop::collection::vec(vec3(6.0), 0..200), s in size(), yaw in -3.0..3.0f64) {
        let p = Pose::new(0.3, -0.2, 0.1, yaw);
        let cloud = PointCloud::new(pts, Frame::World);
        let once = crop_points(&cloud, &p, &s, 1.0);
        let world = PointCloud::new(once.points.iter().map(|q| p.canonical_to_world(q)).collect(), Frame::World);
        let twice = crop_points(&world, &p, &s, 1.0);
        prop_assert_eq!(once.len(), twice.len());
        let h = s.half_extents();
        prop_assert!(once.points.iter().all(|q| q.x.abs() <= h.x && q.y.abs() <= h.y && q.z.abs() <= h.z));
    }

    #[test]
    fn voxel_downsample_never_grows(pts in prop::collection::vec(vec3(3.0), 0..300), voxel in 0.05..1.0f64) {
        let cloud = PointCloud::new(pts, Frame::Canonical);
        let down = voxel_downsample(&cloud, voxel);
        prop_assert!(down.len() <= cloud.len());
        prop_assert_eq!(down.is_empty(), cloud.is_empty());
    }

    #[test]
    fn smooth_l1_symmetric_and_non_negative(r in -3.0..3.0f64, delta in 0.01..1.0f64) {
        let (a, da) = smooth_l1(r, delta);
        let (b, db) = smooth_l1(-r, delta);
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!((da + db).abs() < 1e-15);
        prop_assert!(da.abs() <= 1.0 + 1e-15);
    }

    #[test]
    fn metrics_bounded(offsets in prop::collection::vec(vec3(3.0), 2..40)) {
        let gt: Vec<Pose> = (0..offsets.len()).map(|i| Pose::new(i as f64 * 0.3, 0.0, 0.0, 0.1)).collect();
        let pred: Vec<Pose> = gt.iter().zip(&offsets).map(|(g, o)| Pose::new(g.tx + o.x, g.ty + o.y, g.tz + o.z, g.yaw)).collect();
        let r = TrackletResult::new("x", pred, gt, BoxSize::new(1.5, 1.8, 4.5).unwrap(), 50, 12.0).unwrap();
        let (s, p) = success_precision(&r);
        let (a, rb) = accuracy_robustness(&r);
        for v in [s, p, a, rb] {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&v));
        }
    }

    #[test]
    fn sphere_meshes_are_watertight(r in 0.2..0.9f64, c in vec3(0.1), res in 12usize..40) {
        let out = marching_cubes_fn(|p| (p - c).norm() - r, res, (-1.1, 1.1)).unwrap();
        prop_assert!(!out.uniform_field);
        prop_assert!(out.mesh.is_watertight());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // fewer than the minimum newest points never changes the code
    #[test]
    fn sparse_newest_frame_keeps_code_bitwise(
        older in prop::collection::vec(vec3(0.9), 0..120),
        newest in prop::collection::vec(vec3(0.9), 0..10),
        code in prop::collection::vec(-0.3..0.3f64, 8),
        seed in 0u64..1000,
    ) {
        let params = DecoderParams::init(seed, DecoderDims { latent: 8, hidden: 16 });
        let config = TrackConfig { code_iters: 3, ..TrackConfig::default() };
        let size = BoxSize::new(1.5, 1.8, 4.5).unwrap();
        let mut history = HistoryBuffer::new(config.history_voxel);
        history.push_canonical(&older);
        history.push_canonical(&newest);
        let z = ShapeCode(code);
        let (out, outcome) = adapt_code(&history, &z, &params, &size, &config).unwrap();
        prop_assert!(outcome.gated);
        prop_assert!(out.0.iter().zip(&z.0).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn adaptation_never_ends_above_start(
        newest in prop::collection::vec(vec3(0.9), 10..80),
        code in prop::collection::vec(-0.3..0.3f64, 8),
        seed in 0u64..1000,
    ) {
        let params = DecoderParams::init(seed, DecoderDims { latent: 8, hidden: 16 });
        let config = TrackConfig { code_iters: 5, code_lr: 0.05, ..TrackConfig::default() };
        let size = BoxSize::new(1.5, 1.8, 4.5).unwrap();
        let mut history = HistoryBuffer::new(config.history_voxel);
        history.push_canonical(&newest);
        let (_, outcome) = adapt_code(&history, &ShapeCode(code), &params, &size, &config).unwrap();
        let record = outcome.record.expect("not gated");
        prop_assert!(record.best <= record.initial);
    }
}
