use imptrack::experiment::{bundled_prior, shape_metrics, tracklet_result, ResultFile};
use imptrack::geometry::{crop_world_points, Frame, PointCloud};
use imptrack::lidar_sim::{gen_tracklet, DetectionNoise, TrackletConfig, TrackletSequence};
use imptrack::tracker::{
    adapt_code, estimate_pose, init_shape_code, kf_baseline, track_sequence, update_history, HistoryBuffer, TrackConfig,
};

fn short(seed: u64) -> TrackletSequence {
    let config = TrackletConfig {
        n_frames: 12,
        distance_range: [8.0, 14.0],
        ..TrackletConfig::default()
    };
    gen_tracklet(&config, seed).unwrap()
}

fn fast() -> TrackConfig {
    TrackConfig {
        pose_iters: 40,
        code_iters: 5,
        adapt_max_points: 256,
        ..TrackConfig::default()
    }
}

#[test]
fn tracker_follows_the_alternation_step_by_step() {
    let prior = bundled_prior().unwrap();
    let seq = short(3);
    let config = fast();
    let out = track_sequence(&seq, &prior, &config).unwrap();

    // replay with the free functions: pose with z_{t-1}, then history, then code
    let f0 = &seq.frames[0];
    let crop0 = crop_world_points(&f0.points, &f0.gt_pose, &seq.size, config.crop_dilation);
    let canon0 = PointCloud::new(crop0.iter().map(|p| f0.gt_pose.world_to_canonical(p)).collect(), Frame::Canonical);
    let (mut z, _) = init_shape_code(&canon0, &prior.params, &prior.mean_code, &seq.size, &config).unwrap();
    let mut history = HistoryBuffer::new(config.history_voxel);
    update_history(&mut history, &crop0, &f0.gt_pose, &seq.size, &config);
    let mut pose = f0.gt_pose;
    assert_eq!(out.codes[0], z);
    for (t, frame) in seq.frames.iter().enumerate().skip(1) {
        let (est, crop) = estimate_pose(&frame.points, &pose, &seq.size, &z, &prior.params, &history, &[], &config).unwrap();
        pose = est.pose;
        update_history(&mut history, &crop, &pose, &seq.size, &config);
        z = adapt_code(&history, &z, &prior.params, &seq.size, &config).unwrap().0;
        assert_eq!(out.poses[t], pose, "frame {t}");
        assert_eq!(out.codes[t], z, "frame {t}");
    }
    assert_eq!(out.descent_violations(), 0);
}

#[test]
fn tracking_is_deterministic() {
    let prior = bundled_prior().unwrap();
    let seq = short(4);
    let a = track_sequence(&seq, &prior, &fast()).unwrap();
    let b = track_sequence(&seq, &prior, &fast()).unwrap();
    assert_eq!(a, b);
    let ra = ResultFile::from_track(&seq, &a, None).unwrap().to_json().unwrap();
    let rb = ResultFile::from_track(&seq, &b, None).unwrap().to_json().unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn zero_adapted_frames_keep_the_mean_code() {
    let prior = bundled_prior().unwrap();
    let seq = short(5);
    let config = TrackConfig {
        adapt_frames: Some(0),
        ..fast()
    };
    let out = track_sequence(&seq, &prior, &config).unwrap();
    assert!(out.codes.iter().all(|z| *z == prior.mean_code));
    assert!(out.diagnostics.iter().all(|d| d.frozen && d.code.is_none()));

    let k = TrackConfig {
        adapt_frames: Some(4),
        ..fast()
    };
    let out = track_sequence(&seq, &prior, &k).unwrap();
    assert!(out.codes[4..].windows(2).all(|w| w[0] == w[1]));
    assert!(out.diagnostics[..4].iter().all(|d| !d.frozen));
}

#[test]
fn short_tracklet_is_tracked() {
    let prior = bundled_prior().unwrap();
    let seq = short(6);
    let out = track_sequence(&seq, &prior, &fast()).unwrap();
    let r = tracklet_result(&seq, out.poses.clone()).unwrap();
    assert!(r.mean_iou() > 0.5, "mean IoU {}", r.mean_iou());
    let m = shape_metrics(&seq, &prior, out.final_code()).unwrap();
    assert!(m.acd > 0.0 && m.acd < 0.05, "acd {}", m.acd);
    assert!((0.0..=1.0).contains(&m.recall));
}

#[test]
fn result_files_share_one_schema() {
    let prior = bundled_prior().unwrap();
    let config = TrackletConfig {
        n_frames: 8,
        detections: Some(DetectionNoise::default()),
        ..TrackletConfig::default()
    };
    let seq = gen_tracklet(&config, 9).unwrap();
    let track = ResultFile::from_track(&seq, &track_sequence(&seq, &prior, &fast()).unwrap(), None).unwrap();
    let kf = ResultFile::from_kf(&seq, kf_baseline(&seq)).unwrap();
    let keys = |f: &ResultFile| -> Vec<String> {
        let v: serde_json::Value = serde_json::from_str(&f.to_json().unwrap()).unwrap();
        v.as_object().unwrap().keys().cloned().collect()
    };
    assert_eq!(keys(&track), keys(&kf));
    let back = ResultFile::from_json(&kf.to_json().unwrap()).unwrap();
    assert_eq!(back, kf);
    assert!(ResultFile::from_json(&kf.to_json().unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7")).is_err());
}
