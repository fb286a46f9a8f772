//! KITTI odometry ingestion: pose files, images, window sampling and the
//! train/validation split.
//!
//! Directory layout under a dataset root:
//!
//! ```text
//! poses/<seq>.txt                  12 values per line, row-major 3x4
//! sequences/<seq>/image_2/*.png    left colour camera
//! ```

use std::collections::{hash_map::Entry, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{self, Pose, Twist, POSE_TOLERANCE};

/// Network input size `(height, width)`.
pub const DEFAULT_IMAGE_SIZE: (usize, usize) = (218, 720);

/// Rotation blocks further than this from orthonormal are reported.
pub const REORTHONORMALIZE_WARN: f64 = 1e-3;

pub const TRAIN_SEQUENCES: [&str; 5] = ["00", "01", "02", "08", "09"];
pub const TEST_SEQUENCES: [&str; 6] = ["03", "04", "05", "06", "07", "10"];

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub sequence_id: String,
    pub image_paths: Vec<PathBuf>,
    pub global_poses: Vec<Pose>,
}

impl SequenceRecord {
    pub fn new(sequence_id: impl Into<String>, image_paths: Vec<PathBuf>, global_poses: Vec<Pose>) -> Result<Self> {
        let sequence_id = sequence_id.into();
        if image_paths.len() != global_poses.len() {
            return Err(Error::InvalidArgument(format!(
                "sequence {sequence_id}: {} images but {} poses",
                image_paths.len(),
                global_poses.len()
            )));
        }
        Ok(SequenceRecord {
            sequence_id,
            image_paths,
            global_poses,
        })
    }

    pub fn len(&self) -> usize {
        self.global_poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global_poses.is_empty()
    }

    /// Ground-truth motion between frames `i` and `i + 1`.
    pub fn relative_pose(&self, i: usize) -> Pose {
        se3::relative(&self.global_poses[i], &self.global_poses[i + 1])
    }

    pub fn relative_twists(&self) -> Result<Vec<Twist>> {
        (0..self.len().saturating_sub(1))
            .map(|i| se3::log_map(&self.relative_pose(i)))
            .collect()
    }
}

/// A run of consecutive preprocessed frames with ground-truth motions.
#[derive(Clone, Debug)]
pub struct FrameWindow {
    pub sequence_id: String,
    pub start_index: usize,
    /// `N + 1` frames, each `(3, H, W)`.
    pub frames: Vec<Array3<f32>>,
    /// `N` relative poses between consecutive frames.
    pub relative_poses: Vec<Pose>,
    /// `log` of each relative pose.
    pub relative_twists: Vec<Twist>,
}

impl FrameWindow {
    pub fn num_pairs(&self) -> usize {
        self.relative_poses.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub validation_fraction: f64,
    /// Inclusive range of frames per window.
    pub window_length_range: (usize, usize),
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_ids: TRAIN_SEQUENCES.iter().map(|s| s.to_string()).collect(),
            test_ids: TEST_SEQUENCES.iter().map(|s| s.to_string()).collect(),
            validation_fraction: 0.05,
            window_length_range: (5, 10),
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(id) = self.train_ids.iter().find(|id| self.test_ids.contains(id)) {
            return Err(Error::InvalidArgument(format!("sequence {id} is in both train and test sets")));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidArgument("validation fraction must be in (0, 1)".into()));
        }
        let (lo, hi) = self.window_length_range;
        if lo < 2 || hi < lo {
            return Err(Error::InvalidArgument(format!(
                "window length range [{lo}, {hi}] must satisfy 2 <= min <= max"
            )));
        }
        Ok(())
    }
}

/// Parses KITTI ground truth: one row-major 3x4 matrix per line.
pub fn parse_pose_file(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text, path)
}

pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(format!("`{t}` is not a number"))))
            .collect::<Result<_>>()?;
        if values.len() != 12 {
            return Err(parse_err(format!("expected 12 values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = values[r * 4 + c];
            }
        }
        let pose = match Pose::from_matrix(m) {
            Ok(p) => p,
            Err(_) => {
                let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
                let deviation = (r.transpose() * r - Matrix3::identity()).norm();
                if deviation > REORTHONORMALIZE_WARN {
                    log::warn!(
                        "{}:{}: rotation off orthonormal by {deviation:.2e}, projecting",
                        path.display(),
                        i + 1
                    );
                }
                let projected = nearest_rotation(&r).ok_or_else(|| parse_err("degenerate rotation block".into()))?;
                Pose::from_parts(projected, m.fixed_view::<3, 1>(0, 3).into())
                    .map_err(|e| parse_err(e.to_string()))?
            }
        };
        poses.push(pose);
    }
    Ok(poses)
}

/// Closest rotation in the Frobenius sense, via SVD.
pub fn nearest_rotation(r: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = r.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let out = u * d * v_t;
    ((out.transpose() * out - Matrix3::identity()).norm() <= POSE_TOLERANCE).then_some(out)
}

/// One KITTI line (12 tokens) for a pose. Values round-trip exactly.
pub fn format_pose_line(pose: &Pose) -> String {
    let m = pose.matrix();
    let mut s = String::new();
    for r in 0..3 {
        for c in 0..4 {
            if !s.is_empty() {
                s.push(' ');
            }
            let _ = write!(s, "{:e}", m[(r, c)]);
        }
    }
    s
}

pub fn write_pose_file(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        text.push_str(&format_pose_line(p));
        text.push('\n');
    }
    crate::util::atomic_write(path, text.as_bytes())
}

/// Decodes an image file and resizes/normalizes it, see [`preprocess_rgb`].
pub fn preprocess(path: &Path, size: (usize, usize)) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(preprocess_rgb(&img.to_rgb8(), size))
}

/// Bilinear resize to `(height, width)` (half-pixel centres) followed by
/// `x / 255 - 0.5` per channel. Output is `(3, height, width)`.
pub fn preprocess_rgb(img: &image::RgbImage, (height, width): (usize, usize)) -> Array3<f32> {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let scale_y = sh as f32 / height as f32;
    let scale_x = sw as f32 / width as f32;
    let taps = |dst: usize, scale: f32, len: usize| {
        let src = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f32)
    };
    let xs: Vec<_> = (0..width).map(|x| taps(x, scale_x, sw)).collect();
    let mut out = Array3::zeros((3, height, width));
    let raw = img.as_raw();
    let px = |x: usize, y: usize, c: usize| raw[(y * sw + x) * 3 + c] as f32 / 255.0;
    for y in 0..height {
        let (y0, y1, fy) = taps(y, scale_y, sh);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                let bottom = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                out[[c, y, x]] = top * (1.0 - fy) + bottom * fy - 0.5;
            }
        }
    }
    out
}

/// Reads `poses/<id>.txt` and the sorted images of `sequences/<id>/image_2`.
pub fn load_sequence(root: &Path, sequence_id: &str) -> Result<SequenceRecord> {
    let poses = parse_pose_file(&root.join("poses").join(format!("{sequence_id}.txt")))?;
    let dir = root.join("sequences").join(sequence_id).join("image_2");
    let mut images: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    images.sort();
    SequenceRecord::new(sequence_id, images, poses)
}

fn sequence_rng(seed: u64, sequence_id: &str, salt: u64) -> ChaCha8Rng {
    let mut h = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in sequence_id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Start indices and frame counts of `count` random windows.
pub fn sample_window_spans(record: &SequenceRecord, cfg: &SplitConfig, count: usize) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    let (lo, hi) = cfg.window_length_range;
    if record.len() <= hi {
        return Err(Error::InvalidArgument(format!(
            "sequence {} has {} frames, needs more than {hi}",
            record.sequence_id,
            record.len()
        )));
    }
    let mut rng = sequence_rng(cfg.seed, &record.sequence_id, 1);
    Ok((0..count)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            let start = rng.random_range(0..=record.len() - len);
            (start, len)
        })
        .collect())
}

/// Samples windows and loads their frames; images shared between windows
/// are decoded once.
pub fn sample_windows(
    record: &SequenceRecord,
    cfg: &SplitConfig,
    count: usize,
    image_size: (usize, usize),
) -> Result<Vec<FrameWindow>> {
    let spans = sample_window_spans(record, cfg, count)?;
    let mut cache: HashMap<usize, Array3<f32>> = HashMap::new();
    spans
        .into_iter()
        .map(|(start, len)| {
            let mut frames = Vec::with_capacity(len);
            for i in start..start + len {
                if let Entry::Vacant(e) = cache.entry(i) {
                    e.insert(preprocess(&record.image_paths[i], image_size)?);
                }
                frames.push(cache[&i].clone());
            }
            window_from_frames(record, start, frames)
        })
        .collect()
}

/// Builds a window from already preprocessed frames starting at `start`.
pub fn window_from_frames(record: &SequenceRecord, start: usize, frames: Vec<Array3<f32>>) -> Result<FrameWindow> {
    let n = frames.len();
    if n < 2 || start + n > record.len() {
        return Err(Error::InvalidArgument(format!(
            "window [{start}, {}) does not fit sequence of {} frames",
            start + n,
            record.len()
        )));
    }
    let relative_poses: Vec<Pose> = (start..start + n - 1).map(|i| record.relative_pose(i)).collect();
    let relative_twists = relative_poses.iter().map(se3::log_map).collect::<Result<_>>()?;
    Ok(FrameWindow {
        sequence_id: record.sequence_id.clone(),
        start_index: start,
        frames,
        relative_poses,
        relative_twists,
    })
}

/// Number of validation items for `n` items: `fraction * n` rounded half up.
pub fn validation_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 0.5 + 1e-9).floor() as usize
}

/// Seeded partition into (train, validation). Both parts keep input order.
pub fn split_validation<T>(items: Vec<T>, cfg: &SplitConfig) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("nothing to split".into()));
    }
    let n = items.len();
    let k = validation_count(n, cfg.validation_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_5a11));
    let mut is_val = vec![false; n];
    for &i in &order[..k] {
        is_val[i] = true;
    }
    let mut train = Vec::with_capacity(n - k);
    let mut val = Vec::with_capacity(k);
    for (item, v) in items.into_iter().zip(is_val) {
        if v {
            val.push(item);
        } else {
            train.push(item);
        }
    }
    Ok((train, val))
}

/// Visiting order of `n` training items in a given epoch: reproducible for a
/// seed, different from epoch to epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    order.shuffle(&mut rng);
    order
}
