//! Trajectory integration, the KITTI 100-800 m relative error benchmark and
//! per-frame loss traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, SequenceRecord};
use crate::error::{Error, Result};
use crate::nn::model::stack_pairs;
use crate::nn::{LstmState, VoNet};
use crate::objective::{self, CovarianceMatrix};
use crate::se3::{self, Pose, Twist};

/// Start frames are taken every this many frames.
pub const START_STRIDE: usize = 10;

/// Segment lengths in metres.
pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::InvalidArgument("a trajectory needs at least one pose".into()));
        }
        Ok(Trajectory { poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Frame-to-frame twists.
    pub fn relative_twists(&self) -> Result<Vec<Twist>> {
        self.poses
            .windows(2)
            .map(|w| se3::log_map(&se3::relative(&w[0], &w[1])))
            .collect()
    }

    /// Cumulative distance travelled up to each frame.
    pub fn path_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in self.poses.windows(2) {
            acc += (w[1].translation() - w[0].translation()).norm();
            out.push(acc);
        }
        out
    }

    /// Every pose left-multiplied by `frame`.
    pub fn transformed(&self, frame: &Pose) -> Self {
        Trajectory {
            poses: self.poses.iter().map(|p| frame.compose(p)).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        dataset::write_pose_file(path, &self.poses)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Trajectory::new(dataset::parse_pose_file(path)?)
    }
}

/// Chains frame-to-frame motions starting from the identity.
pub fn integrate(twists: &[Twist]) -> Result<Trajectory> {
    let mut poses = Vec::with_capacity(twists.len() + 1);
    let mut current = Pose::identity();
    poses.push(current);
    for (k, xi) in twists.iter().enumerate() {
        if !xi.is_finite() {
            return Err(Error::InvalidArgument(format!("twist {k} is not finite")));
        }
        current = current.compose(&se3::exp_map(xi)?);
        poses.push(current);
    }
    Ok(Trajectory { poses })
}

/// One evaluated `(start frame, segment length)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentError {
    pub start_frame: usize,
    pub length_m: f64,
    /// Percent of segment length.
    pub t_err: f64,
    /// Degrees per metre.
    pub r_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceErrors {
    pub detail: Vec<SegmentError>,
    /// Mean translation error in percent; `None` when no segment fits.
    pub t_rel: Option<f64>,
    /// Mean rotation error in degrees per metre.
    pub r_rel: Option<f64>,
}

impl SequenceErrors {
    /// True when the ground truth is shorter than the shortest segment.
    pub fn too_short(&self) -> bool {
        self.detail.is_empty()
    }
}

/// Rotation angle in radians with the cosine clamped to `[-1, 1]`.
pub fn clamped_angle(pose: &Pose) -> f64 {
    let r = pose.rotation();
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn kitti_relative_errors(estimate: &Trajectory, ground_truth: &Trajectory) -> Result<SequenceErrors> {
    if estimate.len() != ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "estimate has {} poses, ground truth {}",
            estimate.len(),
            ground_truth.len()
        )));
    }
    if ground_truth.len() < 2 {
        return Err(Error::InvalidArgument("need at least two poses".into()));
    }
    let dist = ground_truth.path_lengths();
    let mut detail = Vec::new();
    for first in (0..ground_truth.len()).step_by(START_STRIDE) {
        for &length in &SEGMENT_LENGTHS {
            let target = dist[first] + length;
            let Some(last) = (first..dist.len()).find(|&i| dist[i] >= target) else {
                continue;
            };
            let gt = se3::relative(&ground_truth.poses[first], &ground_truth.poses[last]);
            let est = se3::relative(&estimate.poses[first], &estimate.poses[last]);
            let error = se3::relative(&gt, &est);
            detail.push(SegmentError {
                start_frame: first,
                length_m: length,
                t_err: error.translation().norm() / length * 100.0,
                r_err: clamped_angle(&error).to_degrees() / length,
            });
        }
    }
    let n = detail.len() as f64;
    let mean = |f: fn(&SegmentError) -> f64| (!detail.is_empty()).then(|| detail.iter().map(f).sum::<f64>() / n);
    Ok(SequenceErrors {
        t_rel: mean(|e| e.t_err),
        r_rel: mean(|e| e.r_err),
        detail,
    })
}

/// Benchmark results over several sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub per_sequence: BTreeMap<String, SequenceErrors>,
}

impl MetricReport {
    pub fn insert(&mut self, sequence_id: impl Into<String>, errors: SequenceErrors) {
        self.per_sequence.insert(sequence_id.into(), errors);
    }

    /// Arithmetic mean over sequences that had at least one segment.
    pub fn average(&self) -> Option<(f64, f64)> {
        let rows: Vec<(f64, f64)> = self
            .per_sequence
            .values()
            .filter_map(|e| Some((e.t_rel?, e.r_rel?)))
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((rows.iter().map(|r| r.0).sum::<f64>() / n, rows.iter().map(|r| r.1).sum::<f64>() / n))
    }

    /// `seq,t_rel,r_rel` with a final `average` row; `nan` marks sequences
    /// too short to evaluate.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        let mut s = String::from("seq,t_rel,r_rel\n");
        for (id, e) in &self.per_sequence {
            let _ = writeln!(s, "{id},{},{}", fmt(e.t_rel), fmt(e.r_rel));
        }
        let avg = self.average();
        let _ = writeln!(s, "average,{},{}", fmt(avg.map(|a| a.0)), fmt(avg.map(|a| a.1)));
        s
    }

    pub fn detail_csv(&self) -> String {
        let mut s = String::from("seq,start_frame,length_m,t_err,r_err\n");
        for (id, e) in &self.per_sequence {
            for d in &e.detail {
                let _ = writeln!(s, "{id},{},{},{},{}", d.start_frame, d.length_m, d.t_err, d.r_err);
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>, p: usize| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.p$}"));
        let mut s = format!("{:<10} {:>10} {:>12}\n", "sequence", "t_rel(%)", "r_rel(deg/m)");
        for (id, e) in &self.per_sequence {
            let note = if e.too_short() { "  (shorter than 100 m)" } else { "" };
            let _ = writeln!(s, "{id:<10} {:>10} {:>12}{note}", fmt(e.t_rel, 3), fmt(e.r_rel, 5));
        }
        let avg = self.average();
        let _ = writeln!(s, "{:<10} {:>10} {:>12}", "average", fmt(avg.map(|a| a.0), 3), fmt(avg.map(|a| a.1), 5));
        s
    }
}

/// Parses the summary CSV back into `(seq, t_rel, r_rel)` rows, the average
/// row included.
pub fn parse_report_csv(text: &str) -> Result<Vec<(String, Option<f64>, Option<f64>)>> {
    let path = Path::new("<report>");
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "seq,t_rel,r_rel")) => {}
        _ => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: "expected header seq,t_rel,r_rel".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let err = |m: &str| Error::Parse {
                path: path.into(),
                line: i + 1,
                message: m.into(),
            };
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 3 {
                return Err(err("expected 3 columns"));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s == "nan" {
                    return Ok(None);
                }
                s.parse().map(Some).map_err(|_| err("bad number"))
            };
            Ok((cols[0].to_string(), num(cols[1])?, num(cols[2])?))
        })
        .collect()
}

/// Anything that turns a stream of frames into frame-to-frame motions.
pub trait MotionEstimator {
    type State;

    fn initial_state(&self) -> Self::State;

    /// Motion from `previous` to `current`, advancing the state.
    fn step(&self, previous: &ndarray::Array3<f32>, current: &ndarray::Array3<f32>, state: &mut Self::State) -> Result<Twist>;
}

impl MotionEstimator for VoNet<f32> {
    type State = LstmState<f32>;

    fn initial_state(&self) -> Self::State {
        self.zero_state(1)
    }

    fn step(&self, previous: &Array3<f32>, current: &Array3<f32>, state: &mut Self::State) -> Result<Twist> {
        let pairs = stack_pairs::<f32>(&[previous.clone(), current.clone()])?;
        let out = self.forward(&pairs, 1, Some(state), false)?;
        *state = out.state.clone();
        Ok(out.twists_for(0)[0])
    }
}

/// Replays known motions regardless of the images.
#[derive(Clone, Debug)]
pub struct ReplayEstimator {
    pub twists: Vec<Twist>,
}

impl MotionEstimator for ReplayEstimator {
    type State = usize;

    fn initial_state(&self) -> usize {
        0
    }

    fn step(&self, _: &Array3<f32>, _: &Array3<f32>, state: &mut usize) -> Result<Twist> {
        let xi = self
            .twists
            .get(*state)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no motion recorded for pair {}", *state)))?;
        *state += 1;
        Ok(xi)
    }
}

/// Streams a sequence through an estimator, decoding one image at a time.
pub fn estimate_sequence<E: MotionEstimator>(
    estimator: &E,
    record: &SequenceRecord,
    image_size: (usize, usize),
) -> Result<Vec<Twist>> {
    let mut state = estimator.initial_state();
    let mut out = Vec::with_capacity(record.len().saturating_sub(1));
    let mut previous: Option<Array3<f32>> = None;
    for path in &record.image_paths {
        let current = dataset::preprocess(path, image_size)?;
        if let Some(prev) = &previous {
            out.push(estimator.step(prev, &current, &mut state)?);
        }
        previous = Some(current);
    }
    Ok(out)
}

/// Loss of each predicted motion against the ground truth between
/// frames `i` and `i + 1`, reported as `(i + 1, loss)`.
pub fn pair_losses(predicted: &[Twist], ground_truth: &[Pose], cov: &CovarianceMatrix) -> Result<Vec<(usize, f64)>> {
    if predicted.len() + 1 != ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} motions for {} poses",
            predicted.len(),
            ground_truth.len()
        )));
    }
    predicted
        .iter()
        .enumerate()
        .map(|(i, xi)| {
            let target = se3::relative(&ground_truth[i], &ground_truth[i + 1]);
            Ok((i + 1, objective::loss(xi, &target, cov)?.value))
        })
        .collect()
}

pub fn per_frame_loss<E: MotionEstimator>(
    estimator: &E,
    record: &SequenceRecord,
    cov: &CovarianceMatrix,
    image_size: (usize, usize),
) -> Result<Vec<(usize, f64)>> {
    let predicted = estimate_sequence(estimator, record, image_size)?;
    pair_losses(&predicted, &record.global_poses, cov)
}

pub fn loss_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("frame_index,loss\n");
    for (i, l) in rows {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

/// Estimated trajectory and benchmark errors of one sequence.
#[derive(Clone, Debug)]
pub struct SequenceEvaluation {
    pub estimate: Trajectory,
    pub ground_truth: Trajectory,
    pub errors: SequenceErrors,
    pub losses: Vec<(usize, f64)>,
}

pub fn evaluate_sequence<E: MotionEstimator>(
    estimator: &E,
    record: &SequenceRecord,
    cov: &CovarianceMatrix,
    image_size: (usize, usize),
) -> Result<SequenceEvaluation> {
    let predicted = estimate_sequence(estimator, record, image_size)?;
    let estimate = integrate(&predicted)?;
    let ground_truth = Trajectory::new(record.global_poses.clone())?;
    let errors = kitti_relative_errors(&estimate, &ground_truth)?;
    if errors.too_short() {
        log::warn!("sequence {} is shorter than 100 m, no segments evaluated", record.sequence_id);
    }
    let losses = pair_losses(&predicted, &record.global_poses, cov)?;
    Ok(SequenceEvaluation {
        estimate,
        ground_truth,
        errors,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn zero_twists_give_identity() {
        let t = integrate(&[Twist::zero(); 4]).unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.poses.iter().all(|p| *p == Pose::identity()));
    }

    #[test]
    fn unit_steps_along_x() {
        let xi = Twist::new(Vector3::x(), Vector3::zeros());
        let t = integrate(&[xi; 5]).unwrap();
        for (k, p) in t.poses.iter().enumerate() {
            assert_eq!(p.translation(), Vector3::new(k as f64, 0.0, 0.0));
        }
    }

    #[test]
    fn non_finite_twist_rejected() {
        let xi = Twist::new(Vector3::new(f64::NAN, 0.0, 0.0), Vector3::zeros());
        assert!(integrate(&[xi]).is_err());
    }

    fn straight(n: usize, step: f64) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|k| Pose::from_translation(Vector3::new(0.0, 0.0, k as f64 * step)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = straight(300, 1.0);
        let e = kitti_relative_errors(&gt, &gt).unwrap();
        assert_eq!((e.t_rel, e.r_rel), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn short_sequence_is_flagged() {
        let gt = straight(50, 1.0);
        let e = kitti_relative_errors(&gt, &gt).unwrap();
        assert!(e.too_short());
        assert_eq!(e.t_rel, None);
        let mut r = MetricReport::default();
        r.insert("00", e);
        assert_eq!(r.average(), None);
        assert!(r.to_csv().contains("00,nan,nan"));
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(kitti_relative_errors(&straight(10, 1.0), &straight(11, 1.0)).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let mut r = MetricReport::default();
        r.insert(
            "03",
            SequenceErrors {
                detail: vec![],
                t_rel: Some(1.0 / 3.0),
                r_rel: Some(0.0123456789),
            },
        );
        r.insert(
            "05",
            SequenceErrors {
                detail: vec![],
                t_rel: Some(2.5),
                r_rel: Some(1e-7),
            },
        );
        let rows = parse_report_csv(&r.to_csv()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], ("03".to_string(), Some(1.0 / 3.0), Some(0.0123456789)));
        let avg = r.average().unwrap();
        assert_eq!(rows[2], ("average".to_string(), Some(avg.0), Some(avg.1)));
    }

    #[test]
    fn replay_estimator_gives_zero_losses() {
        let gt: Vec<Pose> = straight(6, 0.7).poses;
        let twists = Trajectory::new(gt.clone()).unwrap().relative_twists().unwrap();
        let rows = pair_losses(&twists, &gt, &CovarianceMatrix::identity()).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|(_, l)| *l < 1e-20));
    }
}
