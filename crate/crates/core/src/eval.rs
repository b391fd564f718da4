//! Tracking metrics, difficulty splits, distance bins and report rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou_3d, BoxSize, Pose};

/// Center error at which the precision curve reaches zero, meters.
pub const PRECISION_MAX_ERROR_M: f64 = 2.0;
/// IoU below which a frame counts as lost.
pub const DRIFT_IOU: f64 = 0.1;
/// Consecutive lost frames that mark a drift.
pub const DRIFT_RUN: usize = 5;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackletResult {
    pub id: String,
    pub pred: Vec<Pose>,
    pub gt: Vec<Pose>,
    pub size: BoxSize,
    pub first_frame_points: usize,
    pub mean_distance: f64,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    /// Shape metrics, when a reconstruction was evaluated.
    pub acd: Option<f64>,
    pub recall: Option<f64>,
}

impl TrackletResult {
    pub fn new(
        id: impl Into<String>,
        pred: Vec<Pose>,
        gt: Vec<Pose>,
        size: BoxSize,
        first_frame_points: usize,
        mean_distance: f64,
    ) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension {
                expected: gt.len(),
                got: pred.len(),
            });
        }
        if pred.is_empty() {
            return Err(Error::Empty("tracklet result has no frames".into()));
        }
        let ious = pred.iter().zip(&gt).map(|(p, g)| box_iou_3d(p, &size, g, &size)).collect();
        let center_errors = pred.iter().zip(&gt).map(|(p, g)| p.center_distance(g)).collect();
        Ok(TrackletResult {
            id: id.into(),
            pred,
            gt,
            size,
            first_frame_points,
            mean_distance,
            ious,
            center_errors,
            acd: None,
            recall: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ious.is_empty()
    }

    pub fn mean_iou(&self) -> f64 {
        mean(&self.ious)
    }

    pub fn mean_center_error(&self) -> f64 {
        mean(&self.center_errors)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Success and Precision in [0, 100]: areas under the overlap and
/// center-error curves, computed in closed form.
pub fn success_precision(r: &TrackletResult) -> (f64, f64) {
    let success = 100.0 * r.mean_iou();
    let precision = 100.0
        * mean(
            &r.center_errors
                .iter()
                .map(|e| (1.0 - e / PRECISION_MAX_ERROR_M).clamp(0.0, 1.0))
                .collect::<Vec<_>>(),
        );
    (success, precision)
}

/// First frame of the first run of `DRIFT_RUN` frames with IoU below
/// `DRIFT_IOU`, or the sequence length when there is none.
pub fn drift_frame(ious: &[f64]) -> usize {
    let mut run = 0;
    for (t, &iou) in ious.iter().enumerate() {
        if iou < DRIFT_IOU {
            run += 1;
            if run == DRIFT_RUN {
                return t + 1 - DRIFT_RUN;
            }
        } else {
            run = 0;
        }
    }
    ious.len()
}

/// Accuracy (mean IoU before drift) and Robustness (fraction of frames
/// before drift), both in [0, 100].
pub fn accuracy_robustness(r: &TrackletResult) -> (f64, f64) {
    let t = drift_frame(&r.ious);
    if t == 0 {
        return (0.0, 0.0);
    }
    (100.0 * mean(&r.ious[..t]), 100.0 * t as f64 / r.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyThresholds {
    /// Easy when strictly more first-frame points than this.
    pub easy_above: usize,
    /// Hard when strictly fewer first-frame points than this.
    pub hard_below: usize,
}

impl Default for DifficultyThresholds {
    fn default() -> Self {
        DifficultyThresholds {
            easy_above: 100,
            hard_below: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn of(first_frame_points: usize, th: &DifficultyThresholds) -> Self {
        if first_frame_points > th.easy_above {
            Difficulty::Easy
        } else if first_frame_points < th.hard_below {
            Difficulty::Hard
        } else {
            Difficulty::Medium
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

/// Indices of results per difficulty, in input order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub easy: Vec<usize>,
    pub medium: Vec<usize>,
    pub hard: Vec<usize>,
}

impl Splits {
    pub fn get(&self, d: Difficulty) -> &[usize] {
        match d {
            Difficulty::Easy => &self.easy,
            Difficulty::Medium => &self.medium,
            Difficulty::Hard => &self.hard,
        }
    }
}

pub fn difficulty_split(results: &[TrackletResult], th: &DifficultyThresholds) -> Splits {
    let mut s = Splits::default();
    for (i, r) in results.iter().enumerate() {
        match Difficulty::of(r.first_frame_points, th) {
            Difficulty::Easy => s.easy.push(i),
            Difficulty::Medium => s.medium.push(i),
            Difficulty::Hard => s.hard.push(i),
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    /// Half-open range [lo, hi) of mean object distance, meters.
    pub lo: f64,
    pub hi: f64,
    pub members: Vec<usize>,
    pub success: f64,
    pub precision: f64,
}

/// Groups results by mean object distance into `[k * bin, (k + 1) * bin)`
/// and averages Success/Precision per non-empty bin.
pub fn distance_bins(results: &[TrackletResult], bin: f64) -> Result<Vec<DistanceBin>> {
    if !(bin > 0.0) {
        return Err(Error::Config("distance bin width must be positive".into()));
    }
    let mut keyed: Vec<(usize, usize)> = Vec::new();
    for (i, r) in results.iter().enumerate() {
        if !(r.mean_distance >= 0.0) {
            return Err(Error::Format(format!("result {} has invalid distance", r.id)));
        }
        keyed.push(((r.mean_distance / bin).floor() as usize, i));
    }
    keyed.sort();
    let mut bins: Vec<DistanceBin> = Vec::new();
    for (k, i) in keyed {
        match bins.last_mut() {
            Some(b) if b.lo == k as f64 * bin => b.members.push(i),
            _ => bins.push(DistanceBin {
                lo: k as f64 * bin,
                hi: (k + 1) as f64 * bin,
                members: vec![i],
                success: 0.0,
                precision: 0.0,
            }),
        }
    }
    for b in &mut bins {
        let sp: Vec<(f64, f64)> = b.members.iter().map(|&i| success_precision(&results[i])).collect();
        b.success = mean(&sp.iter().map(|x| x.0).collect::<Vec<_>>());
        b.precision = mean(&sp.iter().map(|x| x.1).collect::<Vec<_>>());
    }
    Ok(bins)
}

/// One scope of a report; metrics are per-tracklet means, absent for empty scopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scope: String,
    pub n_tracklets: usize,
    pub success: Option<f64>,
    pub precision: Option<f64>,
    pub accuracy: Option<f64>,
    pub robustness: Option<f64>,
    pub acd: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub notes: Vec<String>,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "scope",
    "n_tracklets",
    "success",
    "precision",
    "accuracy",
    "robustness",
    "acd",
    "recall",
];

fn scope_row(scope: String, results: &[TrackletResult], members: &[usize]) -> ReportRow {
    let pick = |f: &dyn Fn(&TrackletResult) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = members.iter().filter_map(|&i| f(&results[i])).collect();
        (!vals.is_empty() && vals.len() == members.len()).then(|| mean(&vals))
    };
    ReportRow {
        scope,
        n_tracklets: members.len(),
        success: pick(&|r| Some(success_precision(r).0)),
        precision: pick(&|r| Some(success_precision(r).1)),
        accuracy: pick(&|r| Some(accuracy_robustness(r).0)),
        robustness: pick(&|r| Some(accuracy_robustness(r).1)),
        acd: pick(&|r| r.acd),
        recall: pick(&|r| r.recall),
    }
}

/// Overall, per-difficulty and per-distance-bin rows.
pub fn aggregate_report(results: &[TrackletResult], th: &DifficultyThresholds, bin: f64) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::Empty("no tracklet results to aggregate".into()));
    }
    let all: Vec<usize> = (0..results.len()).collect();
    let mut rows = vec![scope_row("overall".into(), results, &all)];
    let splits = difficulty_split(results, th);
    for d in Difficulty::ALL {
        rows.push(scope_row(d.name().into(), results, splits.get(d)));
    }
    for b in distance_bins(results, bin)? {
        rows.push(scope_row(format!("dist_{}_{}", b.lo, b.hi), results, &b.members));
    }
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        notes: vec![format!(
            "accuracy/robustness: local definition, drift at the first of {DRIFT_RUN} consecutive frames with IoU < {DRIFT_IOU}"
        )],
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# report v{}\n{}\n", self.schema_version, REPORT_COLUMNS.join(","));
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.scope,
                r.n_tracklets,
                opt(r.success),
                opt(r.precision),
                opt(r.accuracy),
                opt(r.robustness),
                opt(r.acd),
                opt(r.recall)
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("# report v"))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Format("missing report version line".into()))?;
        if lines.next() != Some(REPORT_COLUMNS.join(",").as_str()) {
            return Err(Error::Format("unexpected report columns".into()));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Format(format!("bad number {s:?}")))
            }
        };
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != REPORT_COLUMNS.len() {
                return Err(Error::Format(format!("bad report row {line:?}")));
            }
            rows.push(ReportRow {
                scope: f[0].to_string(),
                n_tracklets: f[1].parse().map_err(|_| Error::Format("bad tracklet count".into()))?,
                success: num(f[2])?,
                precision: num(f[3])?,
                accuracy: num(f[4])?,
                robustness: num(f[5])?,
                acd: num(f[6])?,
                recall: num(f[7])?,
            });
        }
        Ok(Report {
            schema_version: version,
            notes: Vec::new(),
            rows,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn row(&self, scope: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scope == scope)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn size() -> BoxSize {
        BoxSize::new(1.5, 1.8, 4.5).unwrap()
    }

    fn result_with(ious_from_shift: &[f64], ffp: usize, dist: f64) -> TrackletResult {
        let gt: Vec<Pose> = (0..ious_from_shift.len()).map(|i| Pose::new(i as f64, 0.0, 0.0, 0.0)).collect();
        let pred = gt.iter().zip(ious_from_shift).map(|(g, dx)| Pose::new(g.tx + dx, g.ty, g.tz, g.yaw)).collect();
        TrackletResult::new("t", pred, gt, size(), ffp, dist).unwrap()
    }

    #[test]
    fn perfect_and_lost_tracking() {
        let r = result_with(&[0.0; 10], 50, 5.0);
        let (s, p) = success_precision(&r);
        assert!((s - 100.0).abs() < 1e-9 && p == 100.0);
        let (a, rob) = accuracy_robustness(&r);
        assert!((a - 100.0).abs() < 1e-9 && rob == 100.0);
        let lost = result_with(&[10.0; 10], 50, 5.0);
        assert_eq!(success_precision(&lost), (0.0, 0.0));
        assert_eq!(accuracy_robustness(&lost), (0.0, 0.0));
    }

    #[test]
    fn closed_form_half_values() {
        // shift of l/3 along x gives IoU 0.5 and error 1.5 m; set l = 3 for 1 m
        let s = BoxSize::new(1.0, 1.0, 3.0).unwrap();
        let gt = vec![Pose::identity(); 4];
        let pred = vec![Pose::new(1.0, 0.0, 0.0, 0.0); 4];
        let r = TrackletResult::new("h", pred, gt, s, 10, 1.0).unwrap();
        let (succ, prec) = success_precision(&r);
        assert!((succ - 50.0).abs() < 1e-9);
        assert!((prec - 50.0).abs() < 1e-12);
    }

    #[test]
    fn drift_at_midpoint() {
        let mut shifts = vec![0.0; 10];
        shifts.extend(vec![10.0; 10]);
        let r = result_with(&shifts, 50, 5.0);
        assert_eq!(drift_frame(&r.ious), 10);
        let (acc, rob) = accuracy_robustness(&r);
        assert_eq!(rob, 50.0);
        assert!((acc - 100.0).abs() < 1e-9);
        // four lost frames are not a drift
        let mut blip = vec![0.0; 10];
        blip[3..7].copy_from_slice(&[10.0; 4]);
        assert_eq!(drift_frame(&result_with(&blip, 1, 1.0).ious), 10);
    }

    #[test]
    fn difficulty_boundaries_partition() {
        let th = DifficultyThresholds::default();
        assert_eq!(Difficulty::of(101, &th), Difficulty::Easy);
        assert_eq!(Difficulty::of(100, &th), Difficulty::Medium);
        assert_eq!(Difficulty::of(30, &th), Difficulty::Medium);
        assert_eq!(Difficulty::of(29, &th), Difficulty::Hard);
        assert_eq!(difficulty_split(&[], &th), Splits::default());
        let results: Vec<_> = [5, 30, 99, 100, 101, 400].iter().map(|&n| result_with(&[0.0; 3], n, 1.0)).collect();
        let s = difficulty_split(&results, &th);
        let mut all: Vec<usize> = s.easy.iter().chain(&s.medium).chain(&s.hard).copied().collect();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert_eq!(s.easy, vec![4, 5]);
        assert_eq!(s.hard, vec![0]);
    }

    #[test]
    fn distance_bins_half_open() {
        let results: Vec<_> = [5.0, 9.999, 10.0, 25.0].iter().map(|&d| result_with(&[0.0, 0.5], 50, d)).collect();
        let bins = distance_bins(&results, 10.0).unwrap();
        assert_eq!(bins.len(), 3);
        assert_eq!(bins[0].members, vec![0, 1]);
        assert_eq!(bins[1].members, vec![2]);
        assert_eq!((bins[2].lo, bins[2].hi), (20.0, 30.0));
        let brute = (success_precision(&results[0]).0 + success_precision(&results[1]).0) / 2.0;
        assert_eq!(bins[0].success, brute);
        let single: Vec<_> = (0..3).map(|_| result_with(&[0.0], 50, 5.0)).collect();
        assert_eq!(distance_bins(&single, 10.0).unwrap().len(), 1);
    }

    #[test]
    fn report_rows_and_csv_round_trip() {
        let results: Vec<_> = [(5, 5.0), (50, 15.0), (200, 17.0)]
            .iter()
            .map(|&(n, d)| result_with(&[0.0, 0.3, 0.7], n, d))
            .collect();
        let report = aggregate_report(&results, &DifficultyThresholds::default(), 10.0).unwrap();
        assert_eq!(report.rows.len(), 1 + 3 + 2);
        let back = Report::from_csv(&report.to_csv()).unwrap();
        assert_eq!(back.rows, report.rows);
        assert_eq!(report.to_csv(), aggregate_report(&results, &DifficultyThresholds::default(), 10.0).unwrap().to_csv());
        let one = aggregate_report(&results[..1], &DifficultyThresholds::default(), 10.0).unwrap();
        let (s, p) = success_precision(&results[0]);
        assert_eq!(one.rows[0].success, Some(s));
        assert_eq!(one.rows[0].precision, Some(p));
        assert_eq!(one.row("easy").unwrap().n_tracklets, 0);
        assert_eq!(one.row("easy").unwrap().success, None);
        assert!(aggregate_report(&[], &DifficultyThresholds::default(), 10.0).is_err());
    }
}
