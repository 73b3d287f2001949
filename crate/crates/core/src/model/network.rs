use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ArchitectureConfig;
use super::layers::{build_layer_specs, LayerKind, LayerSpec};
use super::ModelError;
use crate::ctc::LogProbLattice;
use crate::tensor::{Element, NormKind, NormStats, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Per-channel running estimates kept by batch-norm layers.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch statistics observed by one batch-norm layer during a training
/// forward pass, to be folded into its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStatUpdate<T> {
    layer: usize,
    mean: Vec<T>,
    unbiased_var: Vec<T>,
}

pub struct ForwardPass<T> {
    /// Tape handles of the parameters, aligned with [`Model::params`].
    pub params: Vec<Var>,
    /// Output of every layer, aligned with [`Model::layers`].
    pub layer_outputs: Vec<Var>,
    /// Pre-softmax scores `[B, classes, 1, frames]`.
    pub logits: Var,
    /// Log-softmax of `logits`.
    pub log_probs: Var,
    pub batch_stats: Vec<BatchStatUpdate<T>>,
    _marker: std::marker::PhantomData<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ArchitectureConfig,
    layers: Vec<LayerSpec>,
    params: Vec<Param<T>>,
    /// Indices into `params` owned by each layer.
    layer_params: Vec<Vec<usize>>,
    /// Effective normalization per layer (group fallback applied).
    norm_kinds: Vec<Option<NormKind>>,
    running: Vec<Option<RunningStats<T>>>,
    training: bool,
}

impl<T: Element> Model<T> {
    /// Builds the layer list and draws He-uniform weights scaled by
    /// `init_gain` from `seed`. Biases start at zero, normalization scales at one.
    pub fn build(config: &ArchitectureConfig, seed: u64) -> Result<Self, ModelError> {
        let layers = build_layer_specs(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut layer_params = Vec::with_capacity(layers.len());
        let mut norm_kinds = Vec::with_capacity(layers.len());
        let mut running = Vec::with_capacity(layers.len());
        for layer in &layers {
            let mut owned = Vec::new();
            for (suffix, shape) in layer.param_shapes() {
                let value = init_param(suffix, &shape, config.init_gain, &mut rng);
                owned.push(params.len());
                params.push(Param { name: format!("{}.{suffix}", layer.name), value });
            }
            layer_params.push(owned);
            let (kind, stats) = match layer.kind {
                LayerKind::Norm { kind, .. } => {
                    let kind = effective_norm(kind, layer.in_channels, config.group_norm_fallback, &layer.name)?;
                    let stats = (kind == NormKind::Batch).then(|| RunningStats {
                        mean: vec![T::zero(); layer.in_channels],
                        var: vec![T::one(); layer.in_channels],
                    });
                    (Some(kind), stats)
                }
                _ => (None, None),
            };
            norm_kinds.push(kind);
            running.push(stats);
        }
        Ok(Self { config: config.clone(), layers, params, layer_params, norm_kinds, running, training: false })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[Option<RunningStats<T>>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [Option<RunningStats<T>>] {
        &mut self.running
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records a forward pass of `input` (`[B, 1, H, W]`) on `tape` in the
    /// model's current mode.
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        rng: &mut R,
    ) -> Result<ForwardPass<T>, ModelError> {
        self.forward_with_mode(tape, input, rng, self.training)
    }

    fn forward_with_mode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        rng: &mut R,
        training: bool,
    ) -> Result<ForwardPass<T>, ModelError> {
        let [_, c, h, w] = tape.value(input).dims4()?;
        if c != 1 || h != self.config.input_height {
            return Err(ModelError::InputShape {
                expected_height: self.config.input_height,
                shape: tape.value(input).shape().to_vec(),
            });
        }
        if ArchitectureConfig::frames(w) == 0 {
            return Err(ModelError::TooNarrow { width: w });
        }
        let eps = T::from_f64_lossy(NORM_EPS);
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
        let mut x = input;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::new();
        let mut logits = None;
        for (li, layer) in self.layers.iter().enumerate() {
            let pv: Vec<Var> = self.layer_params[li].iter().map(|&i| params[i]).collect();
            x = match &layer.kind {
                LayerKind::Noise { std } => tape.gaussian_noise(x, *std, training, rng)?,
                LayerKind::Conv { geom, bias, .. } => {
                    let b = bias.then(|| pv[1]);
                    let y = tape.conv2d(x, pv[0], b, *geom)?;
                    if layer.name == "output.conv" {
                        logits = Some(y);
                    }
                    y
                }
                LayerKind::Dsc { geom, depthwise_bias, pointwise_bias, .. } => {
                    let mut it = pv.iter().copied();
                    let dw = it.next().unwrap();
                    let db = depthwise_bias.then(|| it.next().unwrap());
                    let pw = it.next().unwrap();
                    let pb = pointwise_bias.then(|| it.next().unwrap());
                    tape.depthwise_separable_conv(x, (dw, db), (pw, pb), *geom)?
                }
                LayerKind::Activation(kind) => tape.activation(x, *kind),
                LayerKind::Norm { affine, .. } => {
                    let kind = self.norm_kinds[li].expect("norm layer has a kind");
                    let affine = affine.then(|| (pv[0], pv[1]));
                    match (&self.running[li], training) {
                        (Some(stats), false) => tape.normalize(
                            x,
                            kind,
                            affine,
                            eps,
                            NormStats::Running { mean: &stats.mean, var: &stats.var },
                        )?,
                        (running, _) => {
                            let y = tape.normalize(x, kind, affine, eps, NormStats::Input)?;
                            if running.is_some() {
                                let (mean, var, n) = tape.norm_statistics(y).expect("norm node");
                                let scale = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                                batch_stats.push(BatchStatUpdate {
                                    layer: li,
                                    mean: mean.to_vec(),
                                    unbiased_var: var.iter().map(|&v| v * T::from_f64_lossy(scale)).collect(),
                                });
                            }
                            y
                        }
                    }
                }
                LayerKind::MaxPool { kernel } => tape.maxpool2d(x, *kernel)?,
                LayerKind::Gate => tape.gate(x, eps)?,
                LayerKind::Dropout { p } => tape.dropout(x, *p, training, rng)?,
                LayerKind::Softmax => tape.softmax_over_channels(x)?,
            };
            layer_outputs.push(x);
        }
        let logits = logits.ok_or_else(|| ModelError::Internal("no output convolution".into()))?;
        let log_probs = tape.log_softmax_over_channels(logits)?;
        Ok(ForwardPass { params, layer_outputs, logits, log_probs, batch_stats, _marker: Default::default() })
    }

    /// Folds batch statistics from a training pass into running estimates.
    pub fn apply_batch_stats(&mut self, updates: &[BatchStatUpdate<T>]) {
        let m = T::from_f64_lossy(BATCH_NORM_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            if let Some(stats) = self.running[u.layer].as_mut() {
                for (r, &b) in stats.mean.iter_mut().zip(&u.mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in stats.var.iter_mut().zip(&u.unbiased_var) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }

    /// Probability output `[B, classes, 1, frames]` for a batch, using the
    /// current mode (evaluation mode is deterministic).
    pub fn probabilities<R: Rng + ?Sized>(&self, batch: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let pass = self.forward_on_tape(&mut tape, x, rng)?;
        Ok(tape.value(*pass.layer_outputs.last().unwrap()).clone())
    }

    /// Evaluation-mode lattices, one per sample, truncated to `frames[b]`
    /// columns (all columns when `frames` is `None`).
    pub fn predict(&self, batch: &Tensor<T>, frames: Option<&[usize]>) -> Result<Vec<LogProbLattice>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward_with_mode(&mut tape, x, &mut rng, false)?;
        lattices_from_log_probs(tape.value(pass.log_probs), frames, self.config.charset_size)
    }
}

/// Splits `[B, classes, 1, W]` log-probabilities into per-sample lattices,
/// renormalizing each frame in double precision. The blank is the last class.
pub fn lattices_from_log_probs<T: Element>(
    log_probs: &Tensor<T>,
    frames: Option<&[usize]>,
    charset_size: usize,
) -> Result<Vec<LogProbLattice>, ModelError> {
    let [b, c, h, w] = log_probs.dims4()?;
    if h != 1 || c != charset_size + 1 {
        return Err(ModelError::Internal(format!("unexpected lattice shape {:?}", log_probs.shape())));
    }
    let data = log_probs.data();
    (0..b)
        .map(|bi| {
            let t_len = frames.map_or(w, |f| f[bi].min(w));
            let mut values = Vec::with_capacity(t_len * c);
            for t in 0..t_len {
                let col: Vec<f64> = (0..c).map(|k| data[(bi * c + k) * w + t].as_f64()).collect();
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                values.extend(col.iter().map(|v| v - lse));
            }
            LogProbLattice::new(t_len, c, values, charset_size).map_err(|e| ModelError::Internal(e.to_string()))
        })
        .collect()
}

fn effective_norm(kind: NormKind, channels: usize, fallback: bool, layer: &str) -> Result<NormKind, ModelError> {
    match kind {
        NormKind::Group(g) if channels % g != 0 => {
            if fallback {
                let g = (1..=g.min(channels)).rev().find(|d| channels % d == 0).unwrap_or(1);
                Ok(NormKind::Group(g))
            } else {
                Err(ModelError::Config {
                    field: "norm_kind",
                    reason: format!("{layer}: {channels} channels not divisible into {g} groups"),
                })
            }
        }
        k => Ok(k),
    }
}

fn init_param<T: Element>(suffix: &str, shape: &[usize], gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    if suffix.ends_with("bias") || suffix == "beta" {
        return Tensor::zeros(shape.to_vec());
    }
    if suffix == "gamma" {
        return Tensor::full(shape.to_vec(), T::one());
    }
    // weights are [out, in, kh, kw]; depthwise weights have in = 1
    let fan_in: usize = shape[1..].iter().product();
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}
