//! Full pose-regression network: convolutional encoder, optional
//! self-attention block, global average pooling, stacked LSTM and pose head.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::attention::{AttentionConfig, AttentionInternals, SelfAttention};
use super::conv::{same_output_size, Conv2d, ConvCache};
use super::linear::Linear;
use super::lstm::{Lstm, LstmCache, LstmState};
use super::pool::{global_average_pool, global_average_pool_backward, FeatureMap};
use super::{check_finite, leaky, leaky_grad, ParamStore, Scalar};
use crate::error::{Error, Result};
use crate::se3::Twist;

/// Smallest image side the encoder accepts.
pub const MIN_IMAGE_SIDE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kernel_sizes: vec![7, 5, 5, 3, 3, 3, 3, 3, 3, 3],
            strides: vec![2, 2, 2, 1, 2, 1, 2, 1, 2, 1],
            channels: vec![64, 128, 256, 256, 512, 512, 512, 512, 1024, 1024],
            input_channels: 6,
        }
    }
}

impl EncoderConfig {
    /// Same topology with every channel count divided by `divisor`.
    pub fn narrowed(divisor: usize) -> Self {
        let mut cfg = EncoderConfig::default();
        for c in &mut cfg.channels {
            *c = (*c / divisor).max(1);
        }
        cfg
    }

    pub fn output_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kernel_sizes.len();
        if n != 10 || self.strides.len() != 10 || self.channels.len() != 10 {
            return Err(Error::InvalidArgument(
                "encoder needs exactly 10 kernel sizes, strides and channel counts".into(),
            ));
        }
        if self.kernel_sizes[..3] != [7, 5, 5] || self.strides[..3] != [2, 2, 2] {
            return Err(Error::InvalidArgument(
                "first three encoder stages must be 7x7, 5x5, 5x5 with stride 2".into(),
            ));
        }
        for (i, &s) in self.strides.iter().enumerate().skip(3) {
            let expected = if i % 2 == 1 { 1 } else { 2 };
            if s != expected {
                return Err(Error::InvalidArgument(format!(
                    "encoder stage {} must have stride {expected}",
                    i + 1
                )));
            }
        }
        if self.kernel_sizes.iter().any(|k| k % 2 == 0) || self.channels.contains(&0) || self.input_channels == 0 {
            return Err(Error::InvalidArgument(
                "kernels must be odd and channel counts positive".into(),
            ));
        }
        Ok(())
    }

    /// Analytic output shape `(channels, height, width)` for an input image.
    pub fn output_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        let (h, w) = self
            .strides
            .iter()
            .fold((height, width), |(h, w), &s| (same_output_size(h, s), same_output_size(w, s)));
        (self.output_channels(), h, w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Hidden affine layer with a leaky rectifier, then the 6-output layer.
    TwoLayer { hidden: usize },
    /// One affine layer straight to the 6 outputs.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub attention_enabled: bool,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        ModelConfig {
            attention: AttentionConfig::with_input(encoder.output_channels()),
            encoder,
            attention_enabled: true,
            lstm_hidden: 1024,
            lstm_layers: 2,
            head: HeadKind::TwoLayer { hidden: 128 },
        }
    }
}

impl ModelConfig {
    /// Reduced widths for CPU experiments; same depth and topology.
    pub fn desk() -> Self {
        let encoder = EncoderConfig::narrowed(16);
        ModelConfig {
            attention: AttentionConfig {
                d_in: encoder.output_channels(),
                d_k: 16,
                d_v: 16,
                heads: 1,
                gamma_init: 0.0,
            },
            encoder,
            attention_enabled: true,
            lstm_hidden: 64,
            lstm_layers: 2,
            head: HeadKind::TwoLayer { hidden: 32 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attention.validate()?;
        if self.attention.d_in != self.encoder.output_channels() {
            return Err(Error::InvalidArgument(format!(
                "attention d_in {} does not match encoder output channels {}",
                self.attention.d_in,
                self.encoder.output_channels()
            )));
        }
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::InvalidArgument("recurrent model needs layers and units".into()));
        }
        if let HeadKind::TwoLayer { hidden: 0 } = self.head {
            return Err(Error::InvalidArgument("head hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Head {
    TwoLayer { fc1: Linear, fc2: Linear },
    Single { fc: Linear },
}

/// The network plus its weights.
#[derive(Clone, Debug)]
pub struct VoNet<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    convs: Vec<Conv2d>,
    attention: Option<SelfAttention>,
    lstm: Lstm,
    head: Head,
}

struct EncoderStage<F> {
    conv: ConvCache<F>,
    activated: Array4<F>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ModelCache<F> {
    encoder: Vec<EncoderStage<F>>,
    feature_hw: (usize, usize),
    attention_inputs: Vec<Array2<F>>,
    attention: Vec<AttentionInternals<F>>,
    lstm: LstmCache<F>,
    head_input: Array2<F>,
    head_hidden: Option<Array2<F>>,
    steps: usize,
    batch: usize,
}

pub struct ForwardOutput<F> {
    /// `(time, batch, 6)`.
    pub twists: Array3<F>,
    pub state: LstmState<F>,
    pub cache: Option<ModelCache<F>>,
}

impl<F: Scalar> ForwardOutput<F> {
    /// Twists of one sequence in the batch, converted to `f64`.
    pub fn twists_for(&self, batch_index: usize) -> Vec<Twist> {
        self.twists
            .index_axis(Axis(1), batch_index)
            .axis_iter(Axis(0))
            .map(|row| Twist::from_array(std::array::from_fn(|k| row[k].to_f64().unwrap_or(f64::NAN))))
            .collect()
    }

    /// Attention internals per input pair, in time-major order. Empty when
    /// the block is disabled or no cache was kept.
    pub fn attention_internals(&self) -> &[AttentionInternals<F>] {
        self.cache.as_ref().map_or(&[], |c| c.attention.as_slice())
    }
}

impl<F: Scalar> VoNet<F> {
    /// Builds the network with weights drawn from `seed`. Each tensor's
    /// initialization depends only on `seed` and its name.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let enc = &config.encoder;
        let mut in_ch = enc.input_channels;
        let mut convs = Vec::with_capacity(10);
        for i in 0..10 {
            convs.push(Conv2d::new(
                &mut params,
                &format!("encoder.conv{}", i + 1),
                seed,
                in_ch,
                enc.channels[i],
                enc.kernel_sizes[i],
                enc.strides[i],
            ));
            in_ch = enc.channels[i];
        }
        let attention = if config.attention_enabled {
            Some(SelfAttention::new(&mut params, "attention", seed, config.attention.clone())?)
        } else {
            None
        };
        let lstm = Lstm::new(&mut params, "lstm", seed, in_ch, config.lstm_hidden, config.lstm_layers);
        let head = match config.head {
            HeadKind::TwoLayer { hidden } => Head::TwoLayer {
                fc1: Linear::new(&mut params, "head.fc1", seed, config.lstm_hidden, hidden),
                fc2: Linear::new(&mut params, "head.fc2", seed, hidden, 6),
            },
            HeadKind::Single => Head::Single {
                fc: Linear::new(&mut params, "head.fc", seed, config.lstm_hidden, 6),
            },
        };
        Ok(VoNet {
            config,
            params,
            convs,
            attention,
            lstm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn attention_block(&self) -> Option<&SelfAttention> {
        self.attention.as_ref()
    }

    pub fn zero_state(&self, batch: usize) -> LstmState<F> {
        LstmState::zeros(self.lstm.num_layers(), batch, self.lstm.hidden)
    }

    /// Same architecture in another precision.
    pub fn cast<G: Scalar>(&self) -> VoNet<G> {
        VoNet {
            config: self.config.clone(),
            params: self.params.cast(),
            convs: self.convs.clone(),
            attention: self.attention.clone(),
            lstm: self.lstm.clone(),
            head: self.head.clone(),
        }
    }

    /// Replaces every weight from a store with the same names and shapes.
    pub fn load_params(&mut self, store: &ParamStore<F>) -> Result<()> {
        if store.names() != self.params.names() {
            return Err(Error::InvalidArgument(
                "parameter set does not match the model architecture".into(),
            ));
        }
        for (name, t) in store.iter() {
            self.params.assign(name, t.clone())?;
        }
        Ok(())
    }

    /// Copies `encoder.*` tensors from a weight archive. Returns how many
    /// tensors were loaded; a missing file leaves the random initialization.
    pub fn import_encoder_weights(&mut self, path: &Path) -> Result<usize> {
        if !path.exists() {
            log::warn!("{}: no pretrained encoder weights, keeping random init", path.display());
            return Ok(0);
        }
        let archive = super::archive::read::<F>(path)?;
        let mut loaded = 0;
        for (name, t) in archive.iter() {
            if name.starts_with("encoder.") {
                self.params.assign(name, t.clone())?;
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Encoder feature map for a single stacked image pair `(6, H, W)`.
    pub fn encode(&self, pair: ArrayView3<F>) -> Result<FeatureMap<F>> {
        let x = pair.to_owned().insert_axis(Axis(0));
        let (y, _) = self.run_encoder(&x, false)?;
        Ok(FeatureMap(y.index_axis_move(Axis(0), 0)))
    }

    /// Runs the recurrent model and pose head on a sequence of pooled motion
    /// vectors (batch of one).
    pub fn temporal_forward(
        &self,
        motions: &[Array1<F>],
        state: Option<&LstmState<F>>,
    ) -> Result<(Vec<Twist>, LstmState<F>)> {
        if motions.is_empty() {
            return Err(Error::InvalidArgument("empty motion sequence".into()));
        }
        let c = motions[0].len();
        let mut x = Array3::zeros((motions.len(), 1, c));
        for (t, m) in motions.iter().enumerate() {
            if m.len() != c {
                return Err(Error::Shape("motion vectors differ in length".into()));
            }
            x.slice_mut(s![t, 0, ..]).assign(m);
        }
        let (hidden, state, _) = self.lstm.forward(&self.params, &x, state, false)?;
        let (twists, _, _) = self.run_head(hidden.into_shape_with_order((motions.len(), self.lstm.hidden)).expect("contiguous"));
        let out = ForwardOutput {
            twists: twists.into_shape_with_order((motions.len(), 1, 6)).expect("sizes"),
            state,
            cache: None,
        };
        Ok((out.twists_for(0), out.state))
    }

    /// Forward pass over `pairs` of shape `(time * batch, 6, H, W)` stored
    /// time-major: entry `t * batch + b` is step `t` of sequence `b`.
    pub fn forward(
        &self,
        pairs: &Array4<F>,
        batch: usize,
        state: Option<&LstmState<F>>,
        keep_cache: bool,
    ) -> Result<ForwardOutput<F>> {
        let (total, _, _, _) = pairs.dim();
        if batch == 0 || total == 0 || total % batch != 0 {
            return Err(Error::Shape(format!(
                "{total} pairs cannot be split into sequences of batch {batch}"
            )));
        }
        let steps = total / batch;
        let (features, stages) = self.run_encoder(pairs, keep_cache)?;
        let (_, c, fh, fw) = features.dim();
        let n = fh * fw;

        let mut motions = Array2::zeros((total, c));
        let mut attention_inputs = Vec::new();
        let mut attention_cache = Vec::new();
        for p in 0..total {
            let x = features
                .index_axis(Axis(0), p)
                .to_owned()
                .into_shape_with_order((c, n))
                .expect("contiguous");
            let y = match &self.attention {
                Some(block) => {
                    let (y, internals) = block.forward(&self.params, x.view())?;
                    if keep_cache {
                        attention_inputs.push(x);
                        attention_cache.push(internals);
                    }
                    y
                }
                None => x,
            };
            motions.row_mut(p).assign(&global_average_pool(y.view())?);
        }

        let motions = motions.into_shape_with_order((steps, batch, c)).expect("sizes");
        let (hidden, state, lstm_cache) = self.lstm.forward(&self.params, &motions, state, keep_cache)?;
        check_finite("lstm", hidden.iter())?;
        let head_input = hidden.into_shape_with_order((total, self.lstm.hidden)).expect("contiguous");
        let (twists, head_hidden, head_input) = self.run_head(head_input);
        check_finite("head", twists.iter())?;
        let twists = twists.into_shape_with_order((steps, batch, 6)).expect("sizes");

        let cache = keep_cache.then(|| ModelCache {
            encoder: stages.expect("kept"),
            feature_hw: (fh, fw),
            attention_inputs,
            attention: attention_cache,
            lstm: lstm_cache.expect("kept"),
            head_input,
            head_hidden,
            steps,
            batch,
        });
        Ok(ForwardOutput { twists, state, cache })
    }

    /// Twists for a window of consecutive frames `(3, H, W)`.
    pub fn forward_frames(
        &self,
        frames: &[ndarray::Array3<f32>],
        state: Option<&LstmState<F>>,
    ) -> Result<(Vec<Twist>, LstmState<F>)> {
        let pairs = stack_pairs::<F>(frames)?;
        let out = self.forward(&pairs, 1, state, false)?;
        Ok((out.twists_for(0), out.state))
    }

    /// Accumulates parameter gradients for `d_twists` (same shape as the
    /// forward output) and optionally returns the gradient w.r.t. the input.
    pub fn backward(
        &self,
        cache: &ModelCache<F>,
        d_twists: &Array3<F>,
        grads: &mut ParamStore<F>,
        input_grad: bool,
    ) -> Result<Option<Array4<F>>> {
        let total = cache.steps * cache.batch;
        if d_twists.dim() != (cache.steps, cache.batch, 6) {
            return Err(Error::Shape("twist gradient does not match forward output".into()));
        }
        let dy = d_twists.to_owned().into_shape_with_order((total, 6)).expect("contiguous");
        let params = &self.params;
        let dh = match &self.head {
            Head::TwoLayer { fc1, fc2 } => {
                let hidden = cache.head_hidden.as_ref().expect("two-layer cache");
                let mut d_hidden = fc2.backward(params, hidden.view(), dy.view(), grads);
                d_hidden.zip_mut_with(hidden, |d, &y| *d *= leaky_grad(y));
                fc1.backward(params, cache.head_input.view(), d_hidden.view(), grads)
            }
            Head::Single { fc } => fc.backward(params, cache.head_input.view(), dy.view(), grads),
        };
        let dh = dh.into_shape_with_order((cache.steps, cache.batch, self.lstm.hidden)).expect("sizes");
        let dm = self.lstm.backward(params, &cache.lstm, &dh, grads);
        let c = dm.dim().2;
        let dm = dm.into_shape_with_order((total, c)).expect("contiguous");

        let (fh, fw) = cache.feature_hw;
        let n = fh * fw;
        let mut dfeat = Array4::zeros((total, c, fh, fw));
        for p in 0..total {
            let mut dx = global_average_pool_backward(&dm.row(p).to_owned(), n);
            if let Some(block) = &self.attention {
                dx = block.backward(
                    params,
                    cache.attention_inputs[p].view(),
                    &cache.attention[p],
                    dx.view(),
                    grads,
                );
            }
            dfeat
                .index_axis_mut(Axis(0), p)
                .assign(&dx.into_shape_with_order((c, fh, fw)).expect("sizes"));
        }

        let mut d = dfeat;
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let stage = &cache.encoder[i];
            d.zip_mut_with(&stage.activated, |g, &y| *g *= leaky_grad(y));
            let need = i > 0 || input_grad;
            match conv.backward(params, &stage.conv, &d, grads, need) {
                Some(next) => d = next,
                None => return Ok(None),
            }
        }
        Ok(Some(d))
    }

    fn run_encoder(&self, x: &Array4<F>, keep_cache: bool) -> Result<(Array4<F>, Option<Vec<EncoderStage<F>>>)> {
        let (_, c, h, w) = x.dim();
        if c != self.config.encoder.input_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} input channels, got {c}",
                self.config.encoder.input_channels
            )));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "images must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {h}x{w}"
            )));
        }
        let mut stages = keep_cache.then(Vec::new);
        let mut current: Option<Array4<F>> = None;
        for (i, conv) in self.convs.iter().enumerate() {
            let input = current.as_ref().unwrap_or(x);
            let (mut y, cache) = conv.forward(&self.params, input, keep_cache)?;
            y.mapv_inplace(leaky);
            check_finite(&format!("encoder.conv{}", i + 1), y.iter())?;
            if let Some(stages) = stages.as_mut() {
                stages.push(EncoderStage {
                    conv: cache.expect("kept"),
                    activated: y.clone(),
                });
            }
            current = Some(y);
        }
        Ok((current.expect("ten stages"), stages))
    }

    // Returns (twists, hidden activations of a two-layer head, head input).
    fn run_head(&self, input: Array2<F>) -> (Array2<F>, Option<Array2<F>>, Array2<F>) {
        match &self.head {
            Head::TwoLayer { fc1, fc2 } => {
                let hidden = fc1.forward(&self.params, input.view()).mapv(leaky);
                let out = fc2.forward(&self.params, hidden.view());
                (out, Some(hidden), input)
            }
            Head::Single { fc } => (fc.forward(&self.params, input.view()), None, input),
        }
    }
}

/// Stacks consecutive frames channel-wise into `(N, 6, H, W)` pairs.
pub fn stack_pairs<F: Scalar>(frames: &[ndarray::Array3<f32>]) -> Result<Array4<F>> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a window needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let (c, h, w) = frames[0].dim();
    if frames.iter().any(|f| f.dim() != (c, h, w)) {
        return Err(Error::Shape("frames in a window differ in shape".into()));
    }
    let mut out = Array4::zeros((frames.len() - 1, 2 * c, h, w));
    for (i, pair) in frames.windows(2).enumerate() {
        out.slice_mut(s![i, 0..c, .., ..]).assign(&pair[0].mapv(|v| F::of(v as f64)));
        out.slice_mut(s![i, c..2 * c, .., ..]).assign(&pair[1].mapv(|v| F::of(v as f64)));
    }
    Ok(out)
}
