//! U-Net and the multi-resolution variants built from the tape ops.
//!
//! All kinds share one decoder. A multi-resolution model runs `J`
//! structurally identical encoders, one per pyramid level, and aligns each
//! lower-resolution encoder's feature maps with the central high-resolution
//! region by cropping the center `1/gamma` and scaling it back up
//! (`gamma = 2^j` for encoder `j`, counting from zero). A 1x1 convolution with
//! identity activation fuses the aligned maps so the decoder sees the same
//! channel widths as a plain U-Net.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId};
use crate::ops::BatchMoments;
use crate::optim::Objective;
use crate::params::{ParamKind, ParamStore, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Unet,
    MrnBilinear,
    MrnTransposed,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Unet => "unet",
            ModelKind::MrnBilinear => "mrn-bilinear",
            ModelKind::MrnTransposed => "mrn-transposed",
        }
    }

    pub fn is_mrn(self) -> bool {
        !matches!(self, ModelKind::Unet)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(ModelKind::Unet),
            "mrn-bilinear" => Ok(ModelKind::MrnBilinear),
            "mrn-transposed" => Ok(ModelKind::MrnTransposed),
            other => Err(Error::Config(format!(
                "unknown model kind '{other}' (expected unet, mrn-bilinear or mrn-transposed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Number of pyramid levels fed to the network (J); 1 for U-Net.
    pub resolutions: usize,
    /// Encoder levels with pooling (L); a bridge level sits below them.
    pub depth: usize,
    pub base_channels: usize,
    /// Patch height and width.
    pub input_size: usize,
    pub in_channels: usize,
    /// Pyramid level of the highest-resolution input. Non-zero only for
    /// single-resolution baselines trained at a coarser magnification.
    pub input_level: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::MrnBilinear,
            resolutions: 3,
            depth: 3,
            base_channels: 16,
            input_size: 128,
            in_channels: 3,
            input_level: 0,
        }
    }
}

impl ModelConfig {
    pub fn unet(depth: usize, base_channels: usize, input_size: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Unet,
            resolutions: 1,
            depth,
            base_channels,
            input_size,
            in_channels: 3,
            input_level: 0,
        }
    }

    pub fn mrn(
        kind: ModelKind,
        resolutions: usize,
        depth: usize,
        base_channels: usize,
        input_size: usize,
    ) -> Self {
        ModelConfig {
            kind,
            resolutions,
            depth,
            base_channels,
            input_size,
            in_channels: 3,
            input_level: 0,
        }
    }

    /// Channel width at encoder level `k` (the bridge is level `depth`).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extent of feature maps at encoder level `k`.
    pub fn extent(&self, level: usize) -> usize {
        self.input_size >> level
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_inner(false)
    }

    fn validate_inner(&self, allow_single_mrn: bool) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return fail(format!(
                "depth, base_channels and in_channels must be positive: {self:?}"
            ));
        }
        if self.resolutions == 0 {
            return fail("at least one resolution is required".into());
        }
        match self.kind {
            ModelKind::Unet if self.resolutions != 1 => {
                return fail(format!(
                    "unet takes exactly one resolution, got {}",
                    self.resolutions
                ))
            }
            ModelKind::MrnBilinear | ModelKind::MrnTransposed
                if self.resolutions < 2 && !allow_single_mrn =>
            {
                return fail(format!(
                    "{} needs at least two resolutions, got {}",
                    self.kind, self.resolutions
                ))
            }
            _ => {}
        }
        if self.input_level > 0 && self.kind.is_mrn() {
            return fail("multi-resolution models read from pyramid level 0".into());
        }
        // pooling needs 2^L; cropping the bridge by 2^(J-1) needs the rest
        let shift = self.depth + self.resolutions - 1;
        if shift >= usize::BITS as usize || !self.input_size.is_multiple_of(1usize << shift) {
            return fail(format!(
                "input size {} must be divisible by 2^(depth + resolutions - 1) = 2^{shift}",
                self.input_size
            ));
        }
        if self.input_size >> shift == 0 {
            return fail(format!("input size {} is too small", self.input_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    kernel: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

/// Convolution (or transposed convolution) followed by batch norm and ReLU.
#[derive(Debug, Clone, Copy)]
struct Block {
    conv: Conv,
    norm: Norm,
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    first: Block,
    second: Block,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: Block,
    first: Block,
    second: Block,
}

#[derive(Debug, Clone)]
struct Layout {
    /// `encoders[j][k]`, levels `0..=depth` (last is the bridge).
    encoders: Vec<Vec<EncoderLevel>>,
    /// `upscale[j][k]`: transposed-conv chain for encoder `j >= 1`, level `k`.
    upscale: Vec<Vec<Vec<Block>>>,
    /// One 1x1 fusion per level when `J >= 2`.
    fusion: Vec<Conv>,
    /// Indexed by level `0..depth`.
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

struct Builder<'a, T> {
    params: ParamStore<T>,
    stats: Vec<RunningStats<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, kh: usize, cin: usize, cout: usize) -> Conv {
        let std = (2.0 / (kh * kh * cin) as f64).sqrt();
        let k = Tensor::normal(Shape::new(kh, kh, cin, cout), std, self.rng);
        Conv {
            kernel: self
                .params
                .push(format!("{name}.kernel"), ParamKind::Kernel, k),
            bias: self.params.push(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(Shape::vector(cout)),
            ),
        }
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        // each output pixel receives exactly cin products
        let std = (2.0 / cin as f64).sqrt();
        let k = Tensor::normal(Shape::new(2, 2, cout, cin), std, self.rng);
        Conv {
            kernel: self
                .params
                .push(format!("{name}.kernel"), ParamKind::Kernel, k),
            bias: self.params.push(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(Shape::vector(cout)),
            ),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.params.push(
            format!("{name}.gamma"),
            ParamKind::BnScale,
            Tensor::ones(Shape::vector(c)),
        );
        let beta = self.params.push(
            format!("{name}.beta"),
            ParamKind::BnShift,
            Tensor::zeros(Shape::vector(c)),
        );
        self.stats.push(RunningStats::new(name.to_owned(), c));
        Norm {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            conv: self.conv(&format!("{name}.conv"), 3, cin, cout),
            norm: self.norm(&format!("{name}.bn"), cout),
        }
    }

    fn up_block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            conv: self.conv_t(&format!("{name}.convt"), cin, cout),
            norm: self.norm(&format!("{name}.bn"), cout),
        }
    }
}

/// A built network: configuration, parameters W and batch-norm buffers.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    pub params: ParamStore<T>,
    pub stats: Vec<RunningStats<T>>,
}

/// Nodes of interest recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: NodeId,
    /// Bound parameter leaves, aligned with the model's [`ParamStore`].
    pub params: Vec<NodeId>,
    /// Skip tensors handed to the decoder per level, bridge last.
    pub skips: Vec<NodeId>,
    moments: Vec<(usize, BatchMoments<f64>)>,
}

/// Loss, objective and parameter gradients of one minibatch.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// Mean per-pixel binary cross entropy.
    pub data_loss: T,
    /// `data_loss + lambda * ||W||^2`.
    pub objective: T,
    pub grads: Vec<Tensor<T>>,
}

/// Network inputs: `J` tensors of shape `(n, size, size, 3)`, ordered from the
/// highest resolution down, plus an optional `(n, size, size, 1)` mask.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub inputs: Vec<Tensor<T>>,
    pub target: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds the architecture named by `config.kind` with seeded He init.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self::build_unchecked(config, seed))
    }

    pub fn build_unet(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.kind != ModelKind::Unet {
            return Err(Error::Config(format!("build_unet called with {}", config.kind)));
        }
        Self::build(config, seed)
    }

    pub fn build_mrn(config: ModelConfig, seed: u64) -> Result<Self> {
        if !config.kind.is_mrn() {
            return Err(Error::Config(format!("build_mrn called with {}", config.kind)));
        }
        Self::build(config, seed)
    }

    /// A multi-resolution architecture with a single encoder, which
    /// degenerates to the U-Net. Exists to check construction consistency.
    pub fn build_collapsed_mrn(mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.resolutions = 1;
        config.validate_inner(true)?;
        Ok(Self::build_unchecked(config, seed))
    }

    fn build_unchecked(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            stats: Vec::new(),
            rng: &mut rng,
        };
        let depth = config.depth;
        let j_count = config.resolutions;

        let mut encoders = Vec::with_capacity(j_count);
        for j in 0..j_count {
            let mut levels = Vec::with_capacity(depth + 1);
            for k in 0..=depth {
                let cin = if k == 0 {
                    config.in_channels
                } else {
                    config.width(k - 1)
                };
                let c = config.width(k);
                levels.push(EncoderLevel {
                    first: b.block(&format!("enc{j}.l{k}.b1"), cin, c),
                    second: b.block(&format!("enc{j}.l{k}.b2"), c, c),
                });
            }
            encoders.push(levels);
        }

        let mut upscale = vec![Vec::new()];
        for j in 1..j_count {
            let mut per_level = Vec::with_capacity(depth + 1);
            for k in 0..=depth {
                let stages = if config.kind == ModelKind::MrnTransposed {
                    j
                } else {
                    0
                };
                let c = config.width(k);
                per_level.push(
                    (0..stages)
                        .map(|s| b.up_block(&format!("up{j}.l{k}.s{s}"), c, c))
                        .collect(),
                );
            }
            upscale.push(per_level);
        }

        let fusion = if j_count >= 2 {
            (0..=depth)
                .map(|k| {
                    let c = config.width(k);
                    b.conv(&format!("fuse.l{k}"), 1, j_count * c, c)
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut decoder: Vec<Option<DecoderLevel>> = vec![None; depth];
        for k in (0..depth).rev() {
            let c = config.width(k);
            decoder[k] = Some(DecoderLevel {
                up: b.up_block(&format!("dec.l{k}.up"), config.width(k + 1), c),
                first: b.block(&format!("dec.l{k}.b1"), 2 * c, c),
                second: b.block(&format!("dec.l{k}.b2"), c, c),
            });
        }
        let head = b.conv("dec.head", 1, config.width(0), 1);

        let Builder { params, stats, .. } = b;
        Model {
            config,
            layout: Layout {
                encoders,
                upscale,
                fusion,
                decoder: decoder.into_iter().map(|d| d.expect("level")).collect(),
                head,
            },
            params,
            stats,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(name, shape)` of every parameter in construction order.
    pub fn layer_shapes(&self) -> Vec<(String, Shape)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape()))
            .collect()
    }

    /// Scalar count of the decoder and output head, which must not depend on J.
    pub fn decoder_param_count(&self) -> usize {
        self.params.count_prefix("dec.")
    }

    pub fn stats_ready(&self) -> bool {
        self.stats.iter().all(|s| s.initialized)
    }

    /// Records the network on `g`. In train mode batch statistics are used and
    /// returned in the trace; call [`Model::apply_moments`] to fold them into
    /// the running averages.
    pub fn forward(&self, g: &mut Graph<T>, inputs: &[Tensor<T>], mode: Mode) -> Result<ForwardTrace> {
        self.check_inputs(inputs)?;
        if mode == Mode::Infer {
            for s in &self.stats {
                s.ensure_ready()?;
            }
        }
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| g.parameter(&p.name, p.value.clone()))
            .collect::<Result<_>>()?;
        let mut run = Run {
            g,
            params: &params,
            model: self,
            mode,
            moments: Vec::new(),
        };
        let cfg = &self.config;
        let depth = cfg.depth;

        // per encoder: feature maps at levels 0..=depth
        let mut features: Vec<Vec<NodeId>> = Vec::with_capacity(cfg.resolutions);
        for (j, x) in inputs.iter().enumerate() {
            let mut h = run.g.constant(x.clone());
            let mut taps = Vec::with_capacity(depth + 1);
            for (k, level) in self.layout.encoders[j].iter().enumerate() {
                h = run.block(h, &level.first)?;
                h = run.block(h, &level.second)?;
                taps.push(h);
                if k < depth {
                    h = run.g.maxpool2d(h)?;
                }
            }
            features.push(taps);
        }

        let mut skips = Vec::with_capacity(depth + 1);
        for k in 0..=depth {
            if cfg.resolutions == 1 {
                skips.push(features[0][k]);
                continue;
            }
            let mut aligned = vec![features[0][k]];
            for (j, taps) in features.iter().enumerate().skip(1) {
                let gamma = 1usize << j;
                let mut h = run.g.center_crop(taps[k], gamma)?;
                match cfg.kind {
                    ModelKind::MrnBilinear => h = run.g.bilinear_upsample(h, gamma)?,
                    ModelKind::MrnTransposed => {
                        for stage in &self.layout.upscale[j][k] {
                            h = run.up_block(h, stage)?;
                        }
                    }
                    ModelKind::Unet => unreachable!("validated"),
                }
                aligned.push(h);
            }
            let cat = run.g.concat_channels(&aligned)?;
            skips.push(run.conv(cat, &self.layout.fusion[k])?);
        }

        let mut h = skips[depth];
        for k in (0..depth).rev() {
            let level = &self.layout.decoder[k];
            h = run.up_block(h, &level.up)?;
            h = run.g.concat_channels(&[skips[k], h])?;
            h = run.block(h, &level.first)?;
            h = run.block(h, &level.second)?;
        }
        let logits = run.conv(h, &self.layout.head)?;
        let moments = run.moments;
        Ok(ForwardTrace {
            logits,
            params,
            skips,
            moments,
        })
    }

    fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<()> {
        let cfg = &self.config;
        if inputs.len() != cfg.resolutions {
            return Err(Error::shape(
                "forward",
                format!(
                    "model takes {} resolutions, got {}",
                    cfg.resolutions,
                    inputs.len()
                ),
            ));
        }
        let n = inputs[0].shape().n();
        let want = Shape::new(n, cfg.input_size, cfg.input_size, cfg.in_channels);
        for x in inputs {
            if x.shape() != want {
                return Err(Error::shape(
                    "forward",
                    format!("input {} does not match {want}", x.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_moments(&mut self, trace: &ForwardTrace) {
        let momentum = T::lit(BN_MOMENTUM);
        for (idx, m) in &trace.moments {
            let mean: Vec<T> = m.mean.iter().map(|&v| T::lit(v)).collect();
            let var: Vec<T> = m.var.iter().map(|&v| T::lit(v)).collect();
            self.stats[*idx].update(&mean, &var, m.count, momentum);
        }
    }

    /// Infer-mode logits `(n, size, size, 1)`.
    pub fn predict(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let trace = self.forward(&mut g, inputs, Mode::Infer)?;
        Ok(g.value(trace.logits).clone())
    }

    /// Objective value and gradients for one minibatch. In train mode the
    /// running statistics are updated as a side effect.
    pub fn step(&mut self, batch: &Batch<T>, objective: &Objective, mode: Mode) -> Result<StepOutput<T>> {
        if batch.target.shape().n() == 0 || batch.inputs.is_empty() {
            return Err(Error::invalid("objective", "empty batch"));
        }
        let mut g = Graph::new();
        let trace = self.forward(&mut g, &batch.inputs, mode)?;
        let target = g.constant(batch.target.clone());
        let loss = g.bce_loss(trace.logits, target)?;
        let data_loss = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let mut out: Vec<Tensor<T>> = trace
            .params
            .iter()
            .zip(self.params.iter())
            .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        objective.fold_penalty_grads(&self.params, &mut out);
        if mode == Mode::Train {
            self.apply_moments(&trace);
        }
        Ok(StepOutput {
            data_loss,
            objective: objective.value(data_loss, &self.params),
            grads: out,
        })
    }

    /// Mean per-pixel loss in infer mode, without gradients.
    pub fn eval_loss(&self, batch: &Batch<T>) -> Result<T> {
        let logits = self.predict(&batch.inputs)?;
        crate::ops::bce_loss(&logits, &batch.target)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.cast(),
            stats: self.stats.iter().map(RunningStats::cast).collect(),
        }
    }
}

struct Run<'a, T> {
    g: &'a mut Graph<T>,
    params: &'a [NodeId],
    model: &'a Model<T>,
    mode: Mode,
    moments: Vec<(usize, BatchMoments<f64>)>,
}

impl<T: Scalar> Run<'_, T> {
    fn conv(&mut self, x: NodeId, c: &Conv) -> Result<NodeId> {
        self.g.conv2d(x, self.params[c.kernel], self.params[c.bias], 1)
    }

    fn norm_relu(&mut self, x: NodeId, n: &Norm) -> Result<NodeId> {
        let (gamma, beta) = (self.params[n.gamma], self.params[n.beta]);
        let eps = T::lit(BN_EPS);
        let y = match self.mode {
            Mode::Train => {
                let (y, m) = self.g.batchnorm_train(x, gamma, beta, eps)?;
                let to64 = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap()).collect();
                self.moments.push((
                    n.stats,
                    BatchMoments {
                        mean: to64(&m.mean),
                        var: to64(&m.var),
                        count: m.count,
                    },
                ));
                y
            }
            Mode::Infer => {
                let s = &self.model.stats[n.stats];
                self.g.batchnorm_infer(x, gamma, beta, &s.mean, &s.var, eps)?
            }
        };
        Ok(self.g.relu(y))
    }

    fn block(&mut self, x: NodeId, b: &Block) -> Result<NodeId> {
        let y = self.conv(x, &b.conv)?;
        self.norm_relu(y, &b.norm)
    }

    fn up_block(&mut self, x: NodeId, b: &Block) -> Result<NodeId> {
        let y = self
            .g
            .conv_transpose2d(x, self.params[b.conv.kernel], self.params[b.conv.bias])?;
        self.norm_relu(y, &b.norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent closed-form parameter count.
    fn expected_count(kind: ModelKind, j: usize, depth: usize, c0: usize, cin: usize) -> usize {
        let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
        let bn = |c: usize| 2 * c;
        let w = |k: usize| c0 << k;
        let mut encoder = 0;
        for k in 0..=depth {
            let i = if k == 0 { cin } else { w(k - 1) };
            encoder += conv(3, i, w(k)) + bn(w(k)) + conv(3, w(k), w(k)) + bn(w(k));
        }
        let mut decoder = conv(1, w(0), 1);
        for k in 0..depth {
            decoder += 4 * w(k + 1) * w(k) + w(k) + bn(w(k));
            decoder += conv(3, 2 * w(k), w(k)) + bn(w(k)) + conv(3, w(k), w(k)) + bn(w(k));
        }
        let mut extra = 0;
        if j >= 2 {
            for k in 0..=depth {
                extra += conv(1, j * w(k), w(k));
                if kind == ModelKind::MrnTransposed {
                    let stages: usize = (1..j).sum();
                    extra += stages * (4 * w(k) * w(k) + w(k) + bn(w(k)));
                }
            }
        }
        j * encoder + decoder + extra
    }

    #[test]
    fn unet_parameter_count_matches_closed_form() {
        let m = Model::<f32>::build(ModelConfig::unet(2, 8, 16), 0).unwrap();
        assert_eq!(m.params.count(), expected_count(ModelKind::Unet, 1, 2, 8, 3));
        // hand evaluation of the same formula for L=2, c0=8, cin=3
        assert_eq!(m.params.count(), 29_833);
    }

    #[test]
    fn mrn_parameter_counts_match_closed_form() {
        for kind in [ModelKind::MrnBilinear, ModelKind::MrnTransposed] {
            for j in 2..=4 {
                let m = Model::<f32>::build(ModelConfig::mrn(kind, j, 2, 4, 32), 0).unwrap();
                assert_eq!(m.params.count(), expected_count(kind, j, 2, 4, 3), "{kind} J={j}");
            }
        }
    }

    #[test]
    fn tiny_unet_runs() {
        let mut m = Model::<f64>::build(ModelConfig::unet(1, 4, 8), 1).unwrap();
        let x = Tensor::uniform(Shape::new(1, 8, 8, 3), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let trace = m.forward(&mut g, std::slice::from_ref(&x), Mode::Train).unwrap();
        assert_eq!(g.shape(trace.logits), Shape::new(1, 8, 8, 1));
        m.apply_moments(&trace);
        assert_eq!(m.predict(&[x]).unwrap().shape(), Shape::new(1, 8, 8, 1));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::unet(3, 8, 100).validate().is_err());
        assert!(ModelConfig::unet(0, 8, 64).validate().is_err());
        let mut c = ModelConfig::unet(2, 8, 64);
        c.resolutions = 2;
        assert!(c.validate().is_err());
        assert!(ModelConfig::mrn(ModelKind::MrnBilinear, 1, 2, 8, 64)
            .validate()
            .is_err());
        // bridge extent 8 cannot be cropped by 16
        assert!(ModelConfig::mrn(ModelKind::MrnBilinear, 5, 3, 8, 64)
            .validate()
            .is_err());
        assert!(ModelConfig::mrn(ModelKind::MrnBilinear, 4, 3, 8, 64)
            .validate()
            .is_ok());
        assert!(Model::<f32>::build_unet(ModelConfig::default(), 0).is_err());
        assert!(Model::<f32>::build_mrn(ModelConfig::unet(2, 4, 16), 0).is_err());
        assert!("segnet".parse::<ModelKind>().is_err());
    }

    #[test]
    fn infer_before_training_is_an_error() {
        let m = Model::<f32>::build(ModelConfig::unet(1, 2, 8), 0).unwrap();
        let x = Tensor::zeros(Shape::new(1, 8, 8, 3));
        assert!(matches!(m.predict(&[x]), Err(Error::MissingRunningStats(_))));
    }

    #[test]
    fn wrong_resolution_count_is_rejected() {
        let m = Model::<f32>::build(ModelConfig::mrn(ModelKind::MrnBilinear, 2, 1, 2, 8), 0).unwrap();
        let x = Tensor::zeros(Shape::new(1, 8, 8, 3));
        let mut g = Graph::new();
        assert!(m.forward(&mut g, &[x], Mode::Train).is_err());
    }
}
