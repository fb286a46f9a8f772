//! Integrated-gradients saliency, red overlays and per-category attribution
//! mass computed against segmentation label maps.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Array4, Axis};

use crate::dataset::{self, SequenceRecord};
use crate::error::{Error, Result};
use crate::labels::{self, LabelMap, Vocabulary};
use crate::nn::{model::stack_pairs, Scalar, VoNet};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_PEAK_ALPHA: f64 = 0.8;

/// Scalar summary of a predicted motion that attributions explain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Euclidean norm of the translation part.
    TranslationNorm,
    /// One twist component, `0..6` (translation x, y, z, rotation x, y, z).
    Axis(usize),
}

impl Target {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "translation_norm" | "norm" => Ok(Target::TranslationNorm),
            _ => {
                let axis = match s {
                    "tx" => 0,
                    "ty" => 1,
                    "tz" => 2,
                    "rx" => 3,
                    "ry" => 4,
                    "rz" => 5,
                    _ => s.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("unknown attribution target `{s}`")))?,
                };
                if axis >= 6 {
                    return Err(Error::InvalidArgument(format!("twist axis {axis} out of range")));
                }
                Ok(Target::Axis(axis))
            }
        }
    }

    /// Value and gradient with respect to the 6 twist components.
    pub fn evaluate(&self, twist: &[f64; 6]) -> (f64, [f64; 6]) {
        match *self {
            Target::TranslationNorm => {
                let n = (twist[0] * twist[0] + twist[1] * twist[1] + twist[2] * twist[2]).sqrt();
                let mut g = [0.0; 6];
                if n > 0.0 {
                    for i in 0..3 {
                        g[i] = twist[i] / n;
                    }
                }
                (n, g)
            }
            Target::Axis(i) => {
                let mut g = [0.0; 6];
                g[i] = 1.0;
                (twist[i], g)
            }
        }
    }
}

/// A differentiable scalar function of a `(C, H, W)` input, evaluated on
/// batches `(B, C, H, W)`.
pub trait ScalarField {
    fn evaluate(&self, inputs: &Array4<f64>) -> Result<(Vec<f64>, Array4<f64>)>;
}

/// The network applied to one stacked frame pair from a zero recurrent
/// state, reduced by a [`Target`].
pub struct ModelField<'a, F> {
    pub model: &'a VoNet<F>,
    pub target: Target,
}

impl<F: Scalar> ScalarField for ModelField<'_, F> {
    fn evaluate(&self, inputs: &Array4<f64>) -> Result<(Vec<f64>, Array4<f64>)> {
        let batch = inputs.dim().0;
        let x = inputs.mapv(F::of);
        let out = self.model.forward(&x, batch, None, true)?;
        let mut values = Vec::with_capacity(batch);
        let mut d = Array3::<F>::zeros((1, batch, 6));
        for b in 0..batch {
            let twist: [f64; 6] = std::array::from_fn(|k| out.twists[[0, b, k]].to_f64().unwrap_or(f64::NAN));
            let (v, g) = self.target.evaluate(&twist);
            values.push(v);
            for k in 0..6 {
                d[[0, b, k]] = F::of(g[k]);
            }
        }
        let mut grads = self.model.params().zeros_like();
        let dx = self
            .model
            .backward(out.cache.as_ref().expect("kept"), &d, &mut grads, true)?
            .expect("input gradient requested");
        Ok((values, dx.mapv(|v| v.to_f64().unwrap_or(f64::NAN))))
    }
}

#[derive(Clone, Debug)]
pub struct AttributionMap {
    /// Per input element, `(C, H, W)`.
    pub values: Array3<f64>,
    /// Sum of absolute values over channels, `(H, W)`.
    pub collapsed: Array2<f64>,
    pub output: f64,
    pub baseline_output: f64,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    /// `|sum IG - (F(x) - F(x'))| / |F(x) - F(x')|`.
    pub fn completeness_gap(&self) -> f64 {
        let delta = self.output - self.baseline_output;
        (self.total() - delta).abs() / delta.abs()
    }
}

pub fn collapse(values: &Array3<f64>) -> Array2<f64> {
    values.map_axis(Axis(0), |c| c.iter().map(|v| v.abs()).sum())
}

/// Right-Riemann integrated gradients with `steps` points, evaluated
/// `chunk` interpolation points at a time.
pub fn integrated_gradients<S: ScalarField>(
    field: &S,
    input: &Array3<f64>,
    baseline: &Array3<f64>,
    steps: usize,
    chunk: usize,
) -> Result<AttributionMap> {
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients need at least one step".into()));
    }
    if input.dim() != baseline.dim() {
        return Err(Error::Shape(format!(
            "baseline {:?} does not match input {:?}",
            baseline.dim(),
            input.dim()
        )));
    }
    let (c, h, w) = input.dim();
    let diff = input - baseline;
    let mut grad_sum = Array3::<f64>::zeros((c, h, w));
    let chunk = chunk.max(1);
    let mut output = f64::NAN;
    let mut k = 1;
    while k <= steps {
        let n = chunk.min(steps + 1 - k);
        let mut batch = Array4::zeros((n, c, h, w));
        for j in 0..n {
            let alpha = (k + j) as f64 / steps as f64;
            batch.index_axis_mut(Axis(0), j).assign(&(baseline + &(&diff * alpha)));
        }
        let (values, grads) = field.evaluate(&batch)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("attribution", "non-finite input gradient"));
        }
        grad_sum += &grads.sum_axis(Axis(0));
        if k + n > steps {
            output = values[n - 1];
        }
        k += n;
    }
    let mut base = Array4::zeros((1, c, h, w));
    base.index_axis_mut(Axis(0), 0).assign(baseline);
    let baseline_output = field.evaluate(&base)?.0[0];
    let values = diff * grad_sum / steps as f64;
    let collapsed = collapse(&values);
    Ok(AttributionMap {
        values,
        collapsed,
        output,
        baseline_output,
    })
}

/// Attribution of the motion between two preprocessed frames against the
/// all-zero (mid-gray) baseline.
pub fn attribute_pair<F: Scalar>(
    model: &VoNet<F>,
    previous: &Array3<f32>,
    current: &Array3<f32>,
    target: Target,
    steps: usize,
) -> Result<AttributionMap> {
    let pair = stack_pairs::<f64>(&[previous.clone(), current.clone()])?.index_axis_move(Axis(0), 0);
    let baseline = Array3::zeros(pair.raw_dim());
    let field = ModelField { model, target };
    integrated_gradients(&field, &pair, &baseline, steps, 8)
}

/// Converts a preprocessed frame back to 8-bit RGB.
pub fn frame_to_image(frame: &Array3<f32>) -> RgbImage {
    let (_, h, w) = frame.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| {
            ((frame[[c, y as usize, x as usize]] + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    })
}

/// Encodes an RGB image as PNG and writes it atomically.
pub fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    image
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    crate::util::atomic_write(path, &bytes)
}

/// Blends red onto `image` with alpha proportional to the map, scaled so
/// the largest value gets `peak_alpha`. An all-zero map returns the image.
pub fn render_overlay(image: &RgbImage, map: &Array2<f64>, peak_alpha: f64) -> Result<RgbImage> {
    let (h, w) = map.dim();
    if (image.width() as usize, image.height() as usize) != (w, h) {
        return Err(Error::Shape(format!(
            "map is {w}x{h} but image is {}x{}",
            image.width(),
            image.height()
        )));
    }
    let max = map.iter().fold(0.0f64, |a, &b| a.max(b));
    if max <= 0.0 || !max.is_finite() {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let alpha = peak_alpha * map[[y as usize, x as usize]].max(0.0) / max;
        if alpha == 0.0 {
            continue;
        }
        let red = [255.0, 0.0, 0.0];
        *px = Rgb(std::array::from_fn(|c| {
            ((1.0 - alpha) * px[c] as f64 + alpha * red[c]).round().clamp(0.0, 255.0) as u8
        }));
    }
    Ok(out)
}

/// Attribution mass per category for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryRow {
    pub frame_index: usize,
    /// `None` when the frame had no label map.
    pub top_category: Option<u8>,
    /// Mass per vocabulary entry, in vocabulary order.
    pub masses: Vec<f64>,
    pub all_zero: bool,
}

impl CategoryRow {
    pub fn missing(frame_index: usize, categories: usize) -> Self {
        CategoryRow {
            frame_index,
            top_category: None,
            masses: vec![0.0; categories],
            all_zero: false,
        }
    }

    pub fn missing_labels(&self) -> bool {
        self.top_category.is_none()
    }
}

/// Sums the collapsed map over the pixels of each category. The winner is
/// the largest mass, ties going to the smallest id. Pixels whose id is not
/// in the vocabulary are rejected.
pub fn top_salient_category(map: &Array2<f64>, labels: &LabelMap, vocabulary: &Vocabulary, frame_index: usize) -> Result<CategoryRow> {
    if map.dim() != labels.dim() {
        return Err(Error::InvalidArgument(format!(
            "label map {:?} does not match attribution map {:?}",
            labels.dim(),
            map.dim()
        )));
    }
    if vocabulary.is_empty() {
        return Err(Error::InvalidArgument("empty category vocabulary".into()));
    }
    let mut slot = [usize::MAX; 256];
    for (i, (id, _)) in vocabulary.iter().enumerate() {
        slot[*id as usize] = i;
    }
    let mut masses = vec![0.0; vocabulary.len()];
    for (&m, &l) in map.iter().zip(labels.iter()) {
        let i = slot[l as usize];
        if i == usize::MAX {
            return Err(Error::InvalidArgument(format!("label id {l} is not in the vocabulary")));
        }
        masses[i] += m;
    }
    let mut best = 0;
    for i in 1..masses.len() {
        let better = masses[i] > masses[best] || (masses[i] == masses[best] && vocabulary[i].0 < vocabulary[best].0);
        if better {
            best = i;
        }
    }
    Ok(CategoryRow {
        frame_index,
        top_category: Some(vocabulary[best].0),
        all_zero: masses.iter().all(|&m| m == 0.0),
        masses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryReport {
    pub vocabulary: Vocabulary,
    pub rows: Vec<CategoryRow>,
}

impl CategoryReport {
    /// One row per frame: index, winning id and name, mass per category and
    /// a status column (`ok`, `all_zero` or `missing_labels`).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_index,top_category_id,top_category");
        for (_, name) in &self.vocabulary {
            let _ = write!(s, ",mass_{}", name.replace([',', ' '], "_"));
        }
        s.push_str(",status\n");
        for r in &self.rows {
            let (id, name) = match r.top_category {
                Some(id) => {
                    let name = self.vocabulary.iter().find(|v| v.0 == id).map(|v| v.1.as_str()).unwrap_or("");
                    (id.to_string(), name.to_string())
                }
                None => (String::new(), String::new()),
            };
            let _ = write!(s, "{},{id},{name}", r.frame_index);
            for m in &r.masses {
                let _ = write!(s, ",{m}");
            }
            let status = if r.missing_labels() {
                "missing_labels"
            } else if r.all_zero {
                "all_zero"
            } else {
                "ok"
            };
            let _ = writeln!(s, ",{status}");
        }
        s
    }
}

/// Settings shared by the attribution commands.
#[derive(Clone, Copy, Debug)]
pub struct AttributionSettings {
    pub target: Target,
    pub steps: usize,
    pub image_size: (usize, usize),
}

/// Top salient category for the motion into each of `frame_count` frames
/// starting at `first_frame + 1`, using that frame's label map. Frames
/// without a label map yield an explicit gap row.
pub fn consistency_series<F: Scalar>(
    model: &VoNet<F>,
    record: &SequenceRecord,
    labels_root: &Path,
    first_frame: usize,
    frame_count: usize,
    settings: &AttributionSettings,
) -> Result<CategoryReport> {
    if first_frame + frame_count >= record.len() {
        return Err(Error::InvalidArgument(format!(
            "{frame_count} frames after frame {first_frame} exceed sequence {} of {} frames",
            record.sequence_id,
            record.len()
        )));
    }
    let vocabulary = labels::read_vocabulary(&labels_root.join("labels").join("vocab.txt"))?;
    let mut rows = Vec::with_capacity(frame_count);
    let mut previous = dataset::preprocess(&record.image_paths[first_frame], settings.image_size)?;
    for k in first_frame + 1..=first_frame + frame_count {
        let current = dataset::preprocess(&record.image_paths[k], settings.image_size)?;
        let label_path = labels::label_path(labels_root, &record.sequence_id, k);
        if label_path.exists() {
            let label_map = labels::read_label_map(&label_path)?;
            let map = attribute_pair(model, &previous, &current, settings.target, settings.steps)?;
            let aligned = labels::resample_nearest(&label_map, map.collapsed.dim());
            rows.push(top_salient_category(&map.collapsed, &aligned, &vocabulary, k)?);
        } else {
            log::warn!("{}: no label map, leaving a gap", label_path.display());
            rows.push(CategoryRow::missing(k, vocabulary.len()));
        }
        previous = current;
    }
    Ok(CategoryReport { vocabulary, rows })
}
