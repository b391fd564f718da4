//! Experiment plumbing shared by the command line and the test suites:
//! versioned JSON configs, synthetic suites, batch tracking, result files
//! and the ablation matrix.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    accuracy_robustness, aggregate_report, success_precision, DifficultyThresholds, Report, TrackletResult,
};
use crate::geometry::{BoxSize, Pose, Vec3};
use crate::lidar_sim::{gen_tracklet, DetectionNoise, TrackletConfig, TrackletSequence};
use crate::prior_train::{sample_surface_points, TrainConfig};
use crate::recon::{acd_mesh, marching_cubes, recall_at, sample_surface, DEFAULT_BOUNDS, METRIC_RESOLUTION, RECALL_THRESHOLD_M};
use crate::sdf_net::ShapeCode;
use crate::tracker::{kf_baseline, track_sequence, FrameDiagnostics, ShapePrior, TrackConfig, TrackOutput};

pub const CONFIG_VERSION: u32 = 1;
pub const RESULT_SCHEMA_VERSION: u32 = 1;
/// Overrides the root directory for generated artifacts.
pub const DATA_DIR_ENV: &str = "IMPTRACK_DATA_DIR";
/// Ground-truth surface samples per tracklet for shape metrics.
pub const GT_SURFACE_SAMPLES: usize = 5000;

/// Directory holding the committed decoder checkpoint and code table.
pub fn bundled_prior_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join("prior")
}

pub fn bundled_prior() -> Result<ShapePrior> {
    let dir = bundled_prior_dir();
    ShapePrior::load(&dir.join("decoder.ckpt"), &dir.join("codes.json"))
}

/// Output root: `IMPTRACK_DATA_DIR` when set, else `fallback`.
pub fn data_root(fallback: &Path) -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.to_path_buf())
}

/// Parses a JSON config whose top-level `version` must equal [`CONFIG_VERSION`].
pub fn parse_versioned<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CONFIG_VERSION as u64 => {}
        Some(v) => return Err(Error::Config(format!("unsupported config version {v}"))),
        None => return Err(Error::Config("config lacks a numeric \"version\" field".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_versioned(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub version: u32,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            version: CONFIG_VERSION,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Tracklet `i` of a suite uses seed `base_seed + i`.
    pub base_seed: u64,
    pub n_tracklets: usize,
    pub tracklet: TrackletConfig,
    pub track: TrackConfig,
    /// Detector noise of the high-noise detection suite.
    pub noisy_detections: DetectionNoise,
    pub difficulty: DifficultyThresholds,
    /// Distance bin width, meters.
    pub distance_bin: f64,
    /// Decoder checkpoint and code table; the bundled prior when absent.
    pub checkpoint: Option<PathBuf>,
    pub codes: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            base_seed: 1000,
            n_tracklets: 20,
            tracklet: TrackletConfig::default(),
            track: suite_track_config(),
            noisy_detections: DetectionNoise {
                sigma_xyz: 0.3,
                sigma_yaw: 0.05,
                fn_prob: 0.2,
                fp_rate: 0.1,
            },
            difficulty: DifficultyThresholds::default(),
            distance_bin: 10.0,
            checkpoint: None,
            codes: None,
            output_dir: None,
        }
    }
}

/// Tracker settings used by the experiment suites: the library defaults
/// plus early stopping of the pose descent and a cap on adaptation points.
pub fn suite_track_config() -> TrackConfig {
    TrackConfig {
        pose_patience: 20,
        pose_rel_tol: 1e-4,
        adapt_max_points: 1024,
        ..TrackConfig::default()
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if self.n_tracklets == 0 {
            return Err(Error::Config("n_tracklets must be positive".into()));
        }
        if !(self.distance_bin > 0.0) {
            return Err(Error::Config("distance_bin must be positive".into()));
        }
        self.tracklet.validate()?;
        self.track.validate()
    }

    pub fn prior(&self) -> Result<ShapePrior> {
        match (&self.checkpoint, &self.codes) {
            (Some(c), Some(z)) => ShapePrior::load(c, z),
            (None, None) => bundled_prior(),
            _ => Err(Error::Config("checkpoint and codes must be given together".into())),
        }
    }

    /// Same tracklets with simulated noisy detections attached. Scans are
    /// identical to the plain suite for equal seeds.
    pub fn detection_tracklets(&self) -> TrackletConfig {
        TrackletConfig {
            detections: Some(self.noisy_detections),
            ..self.tracklet.clone()
        }
    }
}

/// Runs `f` on a pool of `jobs` worker threads (`jobs == 1` is sequential
/// and bit-reproducible; results are order-independent either way).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn gen_suite(config: &TrackletConfig, base_seed: u64, n: usize) -> Result<Vec<TrackletSequence>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| gen_tracklet(config, base_seed + i))
        .collect()
}

pub fn tracklet_result(seq: &TrackletSequence, poses: Vec<Pose>) -> Result<TrackletResult> {
    TrackletResult::new(
        format!("{:06}", seq.meta.seed),
        poses,
        seq.gt_poses(),
        seq.size,
        seq.meta.first_frame_points,
        seq.meta.mean_distance,
    )
}

#[derive(Debug, Clone)]
pub struct TrackRun {
    pub output: TrackOutput,
    pub result: TrackletResult,
}

pub fn track_suite(suite: &[TrackletSequence], prior: &ShapePrior, config: &TrackConfig) -> Result<Vec<TrackRun>> {
    suite
        .par_iter()
        .map(|seq| {
            let output = track_sequence(seq, prior, config)?;
            let result = tracklet_result(seq, output.poses.clone())?;
            Ok(TrackRun { output, result })
        })
        .collect()
}

pub fn kf_suite(suite: &[TrackletSequence]) -> Result<Vec<TrackletResult>> {
    suite.par_iter().map(|seq| tracklet_result(seq, kf_baseline(seq))).collect()
}

/// Ground-truth surface of a tracklet's object in metric canonical units.
pub fn gt_surface(seq: &TrackletSequence, n: usize) -> Vec<Vec3> {
    let s = seq.size.normalization_scale();
    sample_surface_points(&seq.shape, n, seq.meta.seed)
        .into_iter()
        .map(|p| p / s)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    /// Squared meters.
    pub acd: f64,
    pub recall: f64,
}

/// ACD and recall of the decoder shape `z` against the tracklet's true surface.
pub fn shape_metrics(seq: &TrackletSequence, prior: &ShapePrior, z: &ShapeCode) -> Result<ShapeMetrics> {
    let gt = gt_surface(seq, GT_SURFACE_SAMPLES);
    let out = marching_cubes(&prior.params, z, METRIC_RESOLUTION, DEFAULT_BOUNDS)?;
    if out.uniform_field {
        return Err(Error::Empty("decoder field has no zero crossing".into()));
    }
    let acd = acd_mesh(&gt, &out.mesh, &seq.size, 0)?;
    let s = seq.size.normalization_scale();
    let pred: Vec<Vec3> = sample_surface(&out.mesh, crate::recon::ACD_SAMPLES, 0)?
        .points
        .iter()
        .map(|p| p / s)
        .collect();
    Ok(ShapeMetrics {
        acd,
        recall: recall_at(&gt, &pred, RECALL_THRESHOLD_M)?,
    })
}

/// Short digest of a code's little-endian bytes.
pub fn code_checksum(z: &ShapeCode) -> String {
    let mut h = Sha256::new();
    for v in &z.0 {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub success: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub robustness: f64,
    pub mean_iou: f64,
    pub mean_center_error: f64,
}

impl SequenceMetrics {
    pub fn of(r: &TrackletResult) -> Self {
        let (success, precision) = success_precision(r);
        let (accuracy, robustness) = accuracy_robustness(r);
        SequenceMetrics {
            success,
            precision,
            accuracy,
            robustness,
            mean_iou: r.mean_iou(),
            mean_center_error: r.mean_center_error(),
        }
    }
}

/// Per-tracklet output of `track` and `kf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub schema_version: u32,
    pub method: String,
    pub tracklet_seed: u64,
    pub size: BoxSize,
    pub first_frame_points: usize,
    pub mean_distance: f64,
    pub gt_poses: Vec<Pose>,
    pub poses: Vec<Pose>,
    pub code_checksums: Vec<String>,
    pub final_code: Option<ShapeCode>,
    pub diagnostics: Vec<FrameDiagnostics>,
    pub metrics: SequenceMetrics,
    pub shape: Option<ShapeMetrics>,
}

impl ResultFile {
    pub fn from_track(seq: &TrackletSequence, output: &TrackOutput, shape: Option<ShapeMetrics>) -> Result<Self> {
        let r = tracklet_result(seq, output.poses.clone())?;
        Ok(ResultFile {
            schema_version: RESULT_SCHEMA_VERSION,
            method: "imptrack".into(),
            tracklet_seed: seq.meta.seed,
            size: seq.size,
            first_frame_points: seq.meta.first_frame_points,
            mean_distance: seq.meta.mean_distance,
            gt_poses: seq.gt_poses(),
            poses: output.poses.clone(),
            code_checksums: output.codes.iter().map(code_checksum).collect(),
            final_code: Some(output.final_code().clone()),
            diagnostics: output.diagnostics.clone(),
            metrics: SequenceMetrics::of(&r),
            shape,
        })
    }

    pub fn from_kf(seq: &TrackletSequence, poses: Vec<Pose>) -> Result<Self> {
        let r = tracklet_result(seq, poses.clone())?;
        Ok(ResultFile {
            schema_version: RESULT_SCHEMA_VERSION,
            method: "kf".into(),
            tracklet_seed: seq.meta.seed,
            size: seq.size,
            first_frame_points: seq.meta.first_frame_points,
            mean_distance: seq.meta.mean_distance,
            gt_poses: seq.gt_poses(),
            poses,
            code_checksums: Vec::new(),
            final_code: None,
            diagnostics: Vec::new(),
            metrics: SequenceMetrics::of(&r),
            shape: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ResultFile = serde_json::from_str(text)?;
        if f.schema_version != RESULT_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported result schema {}", f.schema_version)));
        }
        if f.poses.len() != f.gt_poses.len() || f.poses.is_empty() {
            return Err(Error::Format("result poses do not match ground truth".into()));
        }
        Ok(f)
    }

    pub fn tracklet_result(&self) -> Result<TrackletResult> {
        let mut r = TrackletResult::new(
            format!("{:06}", self.tracklet_seed),
            self.poses.clone(),
            self.gt_poses.clone(),
            self.size,
            self.first_frame_points,
            self.mean_distance,
        )?;
        if let Some(s) = self.shape {
            r.acd = Some(s.acd);
            r.recall = Some(s.recall);
        }
        Ok(r)
    }
}

/// Reads every `result_*.json` file in `dir` (sorted by name) and aggregates them.
pub fn report_from_dir(dir: &Path, th: &DifficultyThresholds, bin: f64) -> Result<Report> {
    if !dir.is_dir() {
        return Err(Error::Empty(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("result_"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no result files in {}", dir.display())));
    }
    let results = paths
        .iter()
        .map(|p| ResultFile::from_json(&std::fs::read_to_string(p)?)?.tracklet_result())
        .collect::<Result<Vec<_>>>()?;
    aggregate_report(&results, th, bin)
}

// ---- ablation matrix ----

/// Named tracker variants of the ablation matrix on the plain suite.
pub fn ablation_variants(base: &TrackConfig) -> Vec<(&'static str, TrackConfig)> {
    let with = |f: &dyn Fn(&mut TrackConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", base.clone()),
        ("adapt-0", with(&|c| c.adapt_frames = Some(0))),
        ("adapt-5", with(&|c| c.adapt_frames = Some(5))),
        ("adapt-20", with(&|c| c.adapt_frames = Some(20))),
        ("no-regularizer", with(&|c| c.use_regularizer = false)),
        ("no-cd-loss", with(&|c| c.use_cd_loss = false)),
        ("no-shape-loss", with(&|c| c.use_shape_loss = false)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub suite: String,
    pub success: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub robustness: f64,
    pub mean_iou: f64,
    pub mean_center_error: f64,
    pub descent_violations: usize,
    pub seconds: f64,
}

fn summarize(name: &str, suite: &str, results: &[TrackletResult], violations: usize, seconds: f64) -> AblationRow {
    let m: Vec<SequenceMetrics> = results.iter().map(SequenceMetrics::of).collect();
    let avg = |f: fn(&SequenceMetrics) -> f64| m.iter().map(f).sum::<f64>() / m.len() as f64;
    AblationRow {
        name: name.into(),
        suite: suite.into(),
        success: avg(|x| x.success),
        precision: avg(|x| x.precision),
        accuracy: avg(|x| x.accuracy),
        robustness: avg(|x| x.robustness),
        mean_iou: avg(|x| x.mean_iou),
        mean_center_error: avg(|x| x.mean_center_error),
        descent_violations: violations,
        seconds,
    }
}

/// Per-tracklet shape quality of the full model: first-frame code versus final code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRow {
    pub tracklet_seed: u64,
    pub init: ShapeMetrics,
    pub adapted: ShapeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub rows: Vec<AblationRow>,
    pub shapes: Vec<ShapeRow>,
    /// Full-model report with difficulty and distance breakdowns.
    pub full_report: Report,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "# ablation v1\nname,suite,success,precision,accuracy,robustness,mean_iou,mean_center_error,descent_violations,seconds\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.name,
                r.suite,
                r.success,
                r.precision,
                r.accuracy,
                r.robustness,
                r.mean_iou,
                r.mean_center_error,
                r.descent_violations,
                r.seconds
            ));
        }
        s
    }
}

/// Runs the whole ablation matrix: tracker variants on the plain suite,
/// detection-loss and Kalman filter runs on the noisy-detection suite, and
/// shape metrics of the full model. `progress` receives each finished row.
pub fn run_ablation_suite(config: &ExperimentConfig, prior: &ShapePrior, mut progress: impl FnMut(&AblationRow)) -> Result<AblationReport> {
    config.validate()?;
    let plain = gen_suite(&config.tracklet, config.base_seed, config.n_tracklets)?;
    let noisy = gen_suite(&config.detection_tracklets(), config.base_seed, config.n_tracklets)?;
    let mut rows = Vec::new();
    let mut full_runs = None;
    for (name, variant) in ablation_variants(&config.track) {
        let start = std::time::Instant::now();
        let runs = track_suite(&plain, prior, &variant)?;
        let results: Vec<TrackletResult> = runs.iter().map(|r| r.result.clone()).collect();
        let violations = runs.iter().map(|r| r.output.descent_violations()).sum();
        let row = summarize(name, "plain", &results, violations, start.elapsed().as_secs_f64());
        progress(&row);
        rows.push(row);
        if name == "full" {
            full_runs = Some(runs);
        }
    }
    let full_runs = full_runs.expect("full variant runs first");

    // scans match the plain suite, so the detection-free model on the noisy
    // suite is the plain full run; only the detector-assisted run is new
    let det_free: Vec<TrackletResult> = full_runs.iter().map(|r| r.result.clone()).collect();
    let viol_free = full_runs.iter().map(|r| r.output.descent_violations()).sum();
    let row = summarize("no-detection-loss", "noisy-detections", &det_free, viol_free, 0.0);
    progress(&row);
    rows.push(row);

    let start = std::time::Instant::now();
    let det_config = TrackConfig {
        use_detections: true,
        ..config.track.clone()
    };
    let det_runs = track_suite(&noisy, prior, &det_config)?;
    let results: Vec<TrackletResult> = det_runs.iter().map(|r| r.result.clone()).collect();
    let violations = det_runs.iter().map(|r| r.output.descent_violations()).sum();
    let row = summarize("full-with-detections", "noisy-detections", &results, violations, start.elapsed().as_secs_f64());
    progress(&row);
    rows.push(row);

    let start = std::time::Instant::now();
    let kf = kf_suite(&noisy)?;
    let row = summarize("kalman-filter", "noisy-detections", &kf, 0, start.elapsed().as_secs_f64());
    progress(&row);
    rows.push(row);

    let shapes = plain
        .par_iter()
        .zip(&full_runs)
        .map(|(seq, run)| {
            Ok(ShapeRow {
                tracklet_seed: seq.meta.seed,
                init: shape_metrics(seq, prior, &run.output.codes[0])?,
                adapted: shape_metrics(seq, prior, run.output.final_code())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut full_results: Vec<TrackletResult> = full_runs.into_iter().map(|r| r.result).collect();
    for (r, s) in full_results.iter_mut().zip(&shapes) {
        r.acd = Some(s.adapted.acd);
        r.recall = Some(s.adapted.recall);
    }
    let full_report = aggregate_report(&full_results, &config.difficulty, config.distance_bin)?;
    Ok(AblationReport {
        schema_version: RESULT_SCHEMA_VERSION,
        rows,
        shapes,
        full_report,
    })
}
