//! Optimization loop: Adam updates on windows of frames, early stopping on
//! validation loss, atomic checkpoints and the training curve.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, FrameWindow, SplitConfig};
use crate::error::{Error, Result};
use crate::nn::{archive, HeadKind, ModelConfig, ParamStore, VoNet};
use crate::objective::{self, CovarianceMatrix};
use crate::util::atomic_write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelScale {
    /// Full-width network.
    Full,
    /// Channel widths divided by 16, for CPU runs.
    Desk,
}

/// Every knob of a training run. Mirrored one-to-one by the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub attention: bool,
    /// One affine layer instead of two for the pose head.
    pub single_layer_head: bool,
    pub grad_clip_norm: f64,
    pub model: ModelScale,
    pub image_height: usize,
    pub image_width: usize,
    pub train_sequences: Vec<String>,
    pub test_sequences: Vec<String>,
    pub windows_per_sequence: usize,
    pub window_min: usize,
    pub window_max: usize,
    pub validation_fraction: f64,
    pub dataset_root: Option<PathBuf>,
    pub encoder_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let split = SplitConfig::default();
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_epochs: 300,
            patience: 20,
            batch_size: 4,
            seed: 0,
            attention: true,
            single_layer_head: false,
            grad_clip_norm: 10.0,
            model: ModelScale::Full,
            image_height: dataset::DEFAULT_IMAGE_SIZE.0,
            image_width: dataset::DEFAULT_IMAGE_SIZE.1,
            train_sequences: split.train_ids,
            test_sequences: split.test_ids,
            windows_per_sequence: 200,
            window_min: split.window_length_range.0,
            window_max: split.window_length_range.1,
            validation_fraction: split.validation_fraction,
            dataset_root: None,
            encoder_weights: None,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in file order.
pub const CONFIG_KEYS: [&str; 22] = [
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "max_epochs",
    "patience",
    "batch_size",
    "seed",
    "attention",
    "single_layer_head",
    "grad_clip_norm",
    "model",
    "image_height",
    "image_width",
    "train_sequences",
    "test_sequences",
    "windows_per_sequence",
    "window_min",
    "window_max",
    "validation_fraction",
    "dataset_root",
    "encoder_weights",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        message: format!("cannot parse `{value}`"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config {
            key: key.to_string(),
            message: format!("expected true or false, got `{value}`"),
        }),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl TrainConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "attention" => self.attention = parse_bool(key, value)?,
            "single_layer_head" => self.single_layer_head = parse_bool(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse_value(key, value)?,
            "model" => {
                self.model = match value {
                    "full" => ModelScale::Full,
                    "desk" => ModelScale::Desk,
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            message: format!("expected full or desk, got `{value}`"),
                        })
                    }
                }
            }
            "image_height" => self.image_height = parse_value(key, value)?,
            "image_width" => self.image_width = parse_value(key, value)?,
            "train_sequences" => self.train_sequences = parse_list(value),
            "test_sequences" => self.test_sequences = parse_list(value),
            "windows_per_sequence" => self.windows_per_sequence = parse_value(key, value)?,
            "window_min" => self.window_min = parse_value(key, value)?,
            "window_max" => self.window_max = parse_value(key, value)?,
            "validation_fraction" => self.validation_fraction = parse_value(key, value)?,
            "dataset_root" => self.dataset_root = optional_path(value),
            "encoder_weights" => self.encoder_weights = optional_path(value),
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                message: format!("line {}: expected `key = value`", i + 1),
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("learning_rate", format!("{:e}", self.learning_rate));
        line("adam_beta1", self.adam_beta1.to_string());
        line("adam_beta2", self.adam_beta2.to_string());
        line("adam_epsilon", format!("{:e}", self.adam_epsilon));
        line("max_epochs", self.max_epochs.to_string());
        line("patience", self.patience.to_string());
        line("batch_size", self.batch_size.to_string());
        line("seed", self.seed.to_string());
        line("attention", self.attention.to_string());
        line("single_layer_head", self.single_layer_head.to_string());
        line("grad_clip_norm", self.grad_clip_norm.to_string());
        line(
            "model",
            match self.model {
                ModelScale::Full => "full",
                ModelScale::Desk => "desk",
            }
            .into(),
        );
        line("image_height", self.image_height.to_string());
        line("image_width", self.image_width.to_string());
        line("train_sequences", self.train_sequences.join(","));
        line("test_sequences", self.test_sequences.join(","));
        line("windows_per_sequence", self.windows_per_sequence.to_string());
        line("window_min", self.window_min.to_string());
        line("window_max", self.window_max.to_string());
        line("validation_fraction", self.validation_fraction.to_string());
        line("dataset_root", path(&self.dataset_root));
        line("encoder_weights", path(&self.encoder_weights));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta1", "moment decay rates must be in [0, 1)");
        }
        if self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon", "must be positive");
        }
        if self.patience < 1 {
            return bad("patience", "must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.grad_clip_norm <= 0.0 {
            return bad("grad_clip_norm", "must be positive");
        }
        if self.windows_per_sequence < 1 {
            return bad("windows_per_sequence", "must be at least 1");
        }
        if self.image_height < crate::nn::model::MIN_IMAGE_SIDE || self.image_width < crate::nn::model::MIN_IMAGE_SIDE {
            return bad("image_height", "images must be at least 64 pixels on each side");
        }
        self.split_config().validate().map_err(|e| Error::Config {
            key: "train_sequences".into(),
            message: e.to_string(),
        })?;
        Ok(())
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            train_ids: self.train_sequences.clone(),
            test_ids: self.test_sequences.clone(),
            validation_fraction: self.validation_fraction,
            window_length_range: (self.window_min, self.window_max),
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = match self.model {
            ModelScale::Full => ModelConfig::default(),
            ModelScale::Desk => ModelConfig::desk(),
        };
        m.attention_enabled = self.attention;
        if self.single_layer_head {
            m.head = HeadKind::Single;
        }
        m
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: ParamStore<f32>,
    v: ParamStore<f32>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        Adam {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            epsilon: cfg.adam_epsilon,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step = (self.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (self.epsilon * c2.sqrt()) as f32;
        let moments = self.m.tensors_mut().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().zip(grads.iter().map(|(_, g)| g)).zip(moments) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            });
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = ParamStore::new();
        for (name, t) in self.m.iter() {
            store.add(format!("m.{name}"), t.clone());
        }
        for (name, t) in self.v.iter() {
            store.add(format!("v.{name}"), t.clone());
        }
        let meta = BTreeMap::from([
            ("step".to_string(), self.step.to_string()),
            ("learning_rate".to_string(), format!("{:e}", self.learning_rate)),
            ("beta1".to_string(), self.beta1.to_string()),
            ("beta2".to_string(), self.beta2.to_string()),
            ("epsilon".to_string(), format!("{:e}", self.epsilon)),
        ]);
        archive::write(path, &store, &meta)
    }

    /// Restores moments saved for a model with the parameters `params`.
    pub fn load(path: &Path, params: &ParamStore<f32>) -> Result<Self> {
        let (store, meta) = archive::read_with_metadata::<f32>(path)?;
        let get = |k: &str| -> Result<f64> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config {
                    key: k.into(),
                    message: format!("{}: missing optimizer field", path.display()),
                })
        };
        let mut m = params.zeros_like();
        let mut v = params.zeros_like();
        for name in params.names() {
            for (prefix, dst) in [("m", &mut m), ("v", &mut v)] {
                let t = store.by_name(&format!("{prefix}.{name}")).ok_or_else(|| {
                    Error::InvalidArgument(format!("{}: no optimizer moment for {name}", path.display()))
                })?;
                dst.assign(name, t.clone())?;
            }
        }
        Ok(Adam {
            learning_rate: get("learning_rate")?,
            beta1: get("beta1")?,
            beta2: get("beta2")?,
            epsilon: get("epsilon")?,
            step: get("step")? as u64,
            m,
            v,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops once validation loss has not improved for `patience` epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience: patience.max(1),
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, validation_loss: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if validation_loss >= best => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::NoImprovement
                }
            }
            _ => {
                self.best = Some((epoch, validation_loss));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    /// `(epoch, loss)` of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Everything needed to resume training or evaluate a model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub validation_loss: f64,
    pub config: TrainConfig,
    pub model: VoNet<f32>,
    pub optimizer: Adam,
    pub covariance: CovarianceMatrix,
}

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const COVARIANCE_FILE: &str = "covariance.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_META_FILE: &str = "checkpoint.json";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    validation_loss: f64,
    model: ModelConfig,
}

impl Checkpoint {
    /// Writes every file atomically; the metadata file goes last so a
    /// directory with metadata is always complete.
    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::util::create_dir(dir)?;
        let model_json = serde_json::to_string(self.model.config()).expect("plain struct");
        let meta = BTreeMap::from([("model".to_string(), model_json)]);
        archive::write(&dir.join(WEIGHTS_FILE), self.model.params(), &meta)?;
        self.optimizer.save(&dir.join(OPTIMIZER_FILE))?;
        self.covariance.save(&dir.join(COVARIANCE_FILE))?;
        atomic_write(&dir.join(CONFIG_FILE), self.config.to_text().as_bytes())?;
        let meta = CheckpointMeta {
            epoch: self.epoch,
            validation_loss: self.validation_loss,
            model: self.model.config().clone(),
        };
        let json = serde_json::to_string_pretty(&meta).expect("plain struct");
        atomic_write(&dir.join(CHECKPOINT_META_FILE), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(CHECKPOINT_META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: meta_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let config = TrainConfig::load(&dir.join(CONFIG_FILE))?;
        let mut model = VoNet::<f32>::new(meta.model, config.seed)?;
        model.load_params(&archive::read(&dir.join(WEIGHTS_FILE))?)?;
        let optimizer = Adam::load(&dir.join(OPTIMIZER_FILE), model.params())?;
        let covariance = CovarianceMatrix::load(&dir.join(COVARIANCE_FILE))?;
        Ok(Checkpoint {
            epoch: meta.epoch,
            validation_loss: meta.validation_loss,
            config,
            model,
            optimizer,
            covariance,
        })
    }
}

/// Windows for one run plus the frozen loss covariance.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub train: Vec<FrameWindow>,
    pub validation: Vec<FrameWindow>,
    pub covariance: CovarianceMatrix,
}

/// Loads the training sequences, samples windows, splits off validation
/// windows and fits the covariance on every consecutive-frame twist.
pub fn prepare_data(root: &Path, cfg: &TrainConfig) -> Result<TrainingData> {
    let split = cfg.split_config();
    let mut windows = Vec::new();
    let mut twists = Vec::new();
    for id in &cfg.train_sequences {
        let record = dataset::load_sequence(root, id)?;
        twists.extend(record.relative_twists()?);
        windows.extend(dataset::sample_windows(&record, &split, cfg.windows_per_sequence, cfg.image_size())?);
    }
    let covariance = objective::fit_covariance_default(&twists)?;
    let (train, validation) = dataset::split_validation(windows, &split)?;
    if validation.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} windows leave no validation windows at fraction {}",
            train.len(),
            cfg.validation_fraction
        )));
    }
    Ok(TrainingData {
        train,
        validation,
        covariance,
    })
}

/// Mean loss over the pairs of one window; with `grads`, also accumulates
/// `scale` times its parameter gradient.
pub fn window_loss(
    model: &VoNet<f32>,
    window: &FrameWindow,
    cov: &CovarianceMatrix,
    grads: Option<&mut ParamStore<f32>>,
    scale: f64,
) -> Result<f64> {
    let pairs = crate::nn::model::stack_pairs::<f32>(&window.frames)?;
    let out = model.forward(&pairs, 1, None, grads.is_some())?;
    let n = window.num_pairs();
    let predicted = out.twists_for(0);
    let mut total = 0.0;
    let mut d_twists = Array3::<f32>::zeros((n, 1, 6));
    for (t, (xi, target)) in predicted.iter().zip(&window.relative_poses).enumerate() {
        let (value, grad) = objective::loss_with_gradient(xi, target, cov)?;
        total += value.value;
        for k in 0..6 {
            d_twists[[t, 0, k]] = (grad[k] * scale / n as f64) as f32;
        }
    }
    let mean = total / n as f64;
    if !mean.is_finite() {
        return Err(Error::numeric("loss", format!("non-finite loss {mean}")));
    }
    if let Some(grads) = grads {
        model.backward(out.cache.as_ref().expect("kept"), &d_twists, grads, false)?;
    }
    Ok(mean)
}

fn window_tag(w: &FrameWindow) -> String {
    format!("{}@{}", w.sequence_id, w.start_index)
}

/// Mean of per-window losses without gradients.
pub fn dataset_loss(model: &VoNet<f32>, windows: &[FrameWindow], cov: &CovarianceMatrix) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("no windows to evaluate".into()));
    }
    let losses: Vec<f64> = windows
        .par_iter()
        .map(|w| {
            window_loss(model, w, cov, None, 1.0)
                .map_err(|e| Error::numeric("loss", format!("window {}: {e}", window_tag(w))))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / windows.len() as f64)
}

/// Gradient of the batch loss (mean over windows). Returns the loss.
pub fn batch_gradient(
    model: &VoNet<f32>,
    batch: &[&FrameWindow],
    cov: &CovarianceMatrix,
) -> Result<(f64, ParamStore<f32>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, ParamStore<f32>)> = batch
        .par_iter()
        .map(|w| {
            let mut g = model.params().zeros_like();
            let loss = window_loss(model, w, cov, Some(&mut g), scale)
                .map_err(|e| Error::numeric("loss", format!("window {}: {e}", window_tag(w))))?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut parts = parts.into_iter();
    let (first_loss, mut grads) = parts.next().expect("nonempty");
    let mut loss = first_loss;
    for (l, g) in parts {
        loss += l;
        grads.add_scaled(&g, 1.0);
    }
    Ok((loss * scale, grads))
}

/// Clips by global norm. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}

/// One optimizer update on a batch. Returns the batch loss before the update.
pub fn train_step(
    model: &mut VoNet<f32>,
    optimizer: &mut Adam,
    batch: &[&FrameWindow],
    cov: &CovarianceMatrix,
    grad_clip_norm: f64,
) -> Result<f64> {
    let (loss, mut grads) = batch_gradient(model, batch, cov)?;
    if !grads.all_finite() {
        return Err(Error::numeric("gradient", "non-finite gradient"));
    }
    clip_gradients(&mut grads, grad_clip_norm);
    optimizer.update(model.params_mut(), &grads);
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in curve {
        let _ = writeln!(s, "{},{:e},{:e}", r.epoch, r.train_loss, r.val_loss);
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub curve: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Runs epochs until `max_epochs` or early stopping. With `out_dir`, the
/// best checkpoint is kept in `out_dir/best` and the curve in
/// `out_dir/training_curve.csv` after every epoch.
pub fn train(cfg: &TrainConfig, data: &TrainingData, mut model: VoNet<f32>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let mut optimizer = Adam::new(model.params(), cfg);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut curve = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let order = dataset::epoch_order(data.train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FrameWindow> = chunk.iter().map(|&i| &data.train[i]).collect();
            let loss = train_step(&mut model, &mut optimizer, &batch, &data.covariance, cfg.grad_clip_norm)
                .map_err(|e| Error::numeric("training", format!("epoch {epoch}: {e}")))?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / data.train.len() as f64;
        let val_loss = dataset_loss(&model, &data.validation, &data.covariance)
            .map_err(|e| Error::numeric("validation", format!("epoch {epoch}: {e}")))?;
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if let Some(dir) = out_dir {
            atomic_write(&dir.join("training_curve.csv"), curve_csv(&curve).as_bytes())?;
        }
        let decision = stopper.observe(epoch, val_loss);
        if decision == StopDecision::Improved {
            let ckpt = Checkpoint {
                epoch,
                validation_loss: val_loss,
                config: cfg.clone(),
                model: model.clone(),
                optimizer: optimizer.clone(),
                covariance: data.covariance.clone(),
            };
            if let Some(dir) = out_dir {
                ckpt.save(&dir.join("best"))?;
            }
            best = Some(ckpt);
        }
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.expect("first epoch always improves"),
        curve,
        stopped_early,
    })
}
