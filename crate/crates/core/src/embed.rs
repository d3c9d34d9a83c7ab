//! Convolutional embedding network.
//!
//! Each block is a 3×3 convolution, batch normalization, an activation and
//! 2×2 max-pooling. [`BlockOrder::Standard`] runs
//! `conv → BN → act → pool`; [`BlockOrder::Reordered`] runs
//! `conv → act → pool → BN`, so the final embedding comes straight out of a
//! batch-norm layer and is centred on the origin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Bindings, BnBatchStats, BnMode, Graph, Padding, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply<'g>(&self, x: Var<'g>) -> Var<'g> {
        match *self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu(alpha) => x.leaky_relu(alpha),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockOrder {
    Standard,
    Reordered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)` for conv weights; zero biases.
    HeUniform,
    /// Every conv weight and bias zero, so all inputs embed identically.
    Zero,
}

/// Batch-norm behaviour during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    /// Batch statistics; running statistics should be updated afterwards.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics without touching the running statistics.
    Transductive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderConfig {
    pub blocks: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub padding: Padding,
    pub activation: Activation,
    pub order: BlockOrder,
    pub input_hw: (usize, usize),
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init: Init,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            in_channels: 1,
            channels: 64,
            kernel: 3,
            padding: Padding::Same,
            activation: Activation::Relu,
            order: BlockOrder::Standard,
            input_hw: (28, 28),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init: Init::HeUniform,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    /// Spatial size after every block, validating the whole stack.
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        if self.blocks == 0 {
            return Err(Error::config("blocks", "must be at least 1"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be at least 1"));
        }
        if self.kernel == 0 || (self.padding == Padding::Same && self.kernel % 2 == 0) {
            return Err(Error::config(
                "kernel",
                "must be positive, and odd with same padding",
            ));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("bn_eps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum", "must lie in [0, 1]"));
        }
        if let Activation::LeakyRelu(a) = self.activation {
            if !a.is_finite() || a <= 0.0 {
                return Err(Error::config("leaky_alpha", "must be positive"));
            }
        }
        let (mut h, mut w) = self.input_hw;
        let mut sizes = Vec::with_capacity(self.blocks);
        for block in 0..self.blocks {
            if self.padding == Padding::Valid {
                if h < self.kernel || w < self.kernel {
                    return Err(Error::config(
                        "image_size",
                        format!("{:?} too small for block {block}", self.input_hw),
                    ));
                }
                h = h - self.kernel + 1;
                w = w - self.kernel + 1;
            }
            if h < 2 || w < 2 {
                return Err(Error::config(
                    "image_size",
                    format!(
                        "{:?} shrinks below 1x1 before block {block} of {}",
                        self.input_hw, self.blocks
                    ),
                ));
            }
            h /= 2;
            w /= 2;
            sizes.push((h, w));
        }
        Ok(sizes)
    }

    pub fn output_dim(&self) -> Result<usize> {
        let (h, w) = *self.spatial_sizes()?.last().expect("at least one block");
        Ok(self.channels * h * w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: String,
    pub beta: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn update(&mut self, stats: &BnBatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: String,
    pub bias: String,
    pub bn: BatchNorm,
    pub activation: Activation,
    pub order: BlockOrder,
}

/// Batch-norm statistics gathered by one training forward pass, one entry
/// per block.
#[derive(Clone, Debug, Default)]
pub struct BnUpdates(Vec<Option<BnBatchStats>>);

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    cfg: EmbedderConfig,
    blocks: Vec<ConvBlock>,
    output_dim: usize,
}

impl Embedder {
    /// Validates `cfg` and registers freshly initialized parameters under
    /// `embed.block{i}.*` in `params`.
    pub fn build(cfg: &EmbedderConfig, params: &mut ParamSet) -> Result<Self> {
        let output_dim = cfg.output_dim()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(crate::episodes::STREAM_INIT);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let k = cfg.kernel;
        for i in 0..cfg.blocks {
            let cin = if i == 0 { cfg.in_channels } else { cfg.channels };
            let cout = cfg.channels;
            let fan_in = (cin * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let n = cout * cin * k * k;
            let weights = match cfg.init {
                Init::HeUniform => (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
                Init::Zero => vec![0.0; n],
            };
            let prefix = format!("embed.block{i}");
            let block = ConvBlock {
                weight: format!("{prefix}.conv.weight"),
                bias: format!("{prefix}.conv.bias"),
                bn: BatchNorm {
                    gamma: format!("{prefix}.bn.gamma"),
                    beta: format!("{prefix}.bn.beta"),
                    running_mean: vec![0.0; cout],
                    running_var: vec![1.0; cout],
                    momentum: cfg.bn_momentum,
                    eps: cfg.bn_eps,
                },
                activation: cfg.activation,
                order: cfg.order,
            };
            params.insert(&block.weight, Tensor::new(vec![cout, cin, k, k], weights)?)?;
            params.insert(&block.bias, Tensor::zeros(&[cout]))?;
            params.insert(&block.bn.gamma, Tensor::full(&[cout], 1.0))?;
            params.insert(&block.bn.beta, Tensor::zeros(&[cout]))?;
            blocks.push(block);
        }
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            output_dim,
        })
    }

    /// Convenience constructor returning the embedder with its own
    /// parameter set.
    pub fn new(cfg: &EmbedderConfig) -> Result<(Self, ParamSet)> {
        let mut params = ParamSet::new();
        let e = Self::build(cfg, &mut params)?;
        Ok((e, params))
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Expected per-example input shape `(C, H, W)`.
    pub fn input_geometry(&self) -> (usize, usize, usize) {
        (self.cfg.in_channels, self.cfg.input_hw.0, self.cfg.input_hw.1)
    }

    /// Maps `[B, C, H, W]` to `[B, D]`.
    pub fn embed<'g>(
        &self,
        graph: &'g Graph,
        params: &Bindings<'g>,
        x: Var<'g>,
        mode: EmbedMode,
    ) -> Result<(Var<'g>, BnUpdates)> {
        let shape = x.shape();
        let (c, h, w) = self.input_geometry();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::Shape {
                op: "embed",
                lhs: vec![0, c, h, w],
                rhs: shape,
            });
        }
        let batch = shape[0];
        let mut updates = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            let conv = graph.conv2d(
                h,
                params.get(&block.weight)?,
                Some(params.get(&block.bias)?),
                self.cfg.padding,
            )?;
            let bn_mode = match mode {
                EmbedMode::Train | EmbedMode::Transductive => BnMode::Batch { eps: block.bn.eps },
                EmbedMode::Eval => BnMode::Fixed {
                    mean: &block.bn.running_mean,
                    var: &block.bn.running_var,
                    eps: block.bn.eps,
                },
            };
            let gamma = params.get(&block.bn.gamma)?;
            let beta = params.get(&block.bn.beta)?;
            let (out, stats) = match block.order {
                BlockOrder::Standard => {
                    let (n, stats) = graph.batch_norm(conv, gamma, beta, bn_mode)?;
                    (graph.max_pool2d(block.activation.apply(n))?, stats)
                }
                BlockOrder::Reordered => {
                    let pooled = graph.max_pool2d(block.activation.apply(conv))?;
                    graph.batch_norm(pooled, gamma, beta, bn_mode)?
                }
            };
            updates.push(if mode == EmbedMode::Train { stats } else { None });
            h = out;
        }
        Ok((h.reshape(&[batch, self.output_dim])?, BnUpdates(updates)))
    }

    /// Forward pass without gradient tracking.
    pub fn embed_tensor(&self, params: &ParamSet, x: &Tensor, mode: EmbedMode) -> Result<(Tensor, BnUpdates)> {
        let graph = Graph::new();
        let bound = Bindings::constants(&graph, params);
        let xv = graph.constant(x.clone());
        let (e, updates) = self.embed(&graph, &bound, xv, mode)?;
        let out = (*e.value()).clone();
        Ok((out, updates))
    }

    pub fn apply_bn_updates(&mut self, updates: &BnUpdates) {
        for (block, stats) in self.blocks.iter_mut().zip(&updates.0) {
            if let Some(stats) = stats {
                block.bn.update(stats);
            }
        }
    }

    /// Running statistics as named tensors, for checkpointing.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        self.blocks
            .iter()
            .flat_map(|b| {
                let prefix = b.bn.gamma.trim_end_matches(".gamma");
                [
                    (
                        format!("{prefix}.running_mean"),
                        Tensor::vector(b.bn.running_mean.clone()),
                    ),
                    (
                        format!("{prefix}.running_var"),
                        Tensor::vector(b.bn.running_var.clone()),
                    ),
                ]
            })
            .collect()
    }

    pub fn set_buffer(&mut self, name: &str, value: &Tensor) -> Result<()> {
        for b in &mut self.blocks {
            let prefix = b.bn.gamma.trim_end_matches(".gamma").to_string();
            let slot = if name == format!("{prefix}.running_mean") {
                &mut b.bn.running_mean
            } else if name == format!("{prefix}.running_var") {
                &mut b.bn.running_var
            } else {
                continue;
            };
            if value.numel() != slot.len() {
                return Err(Error::invalid(
                    "set_buffer",
                    format!("`{name}` expects {} values, got {}", slot.len(), value.numel()),
                ));
            }
            slot.copy_from_slice(value.data());
            return Ok(());
        }
        Err(Error::invalid("set_buffer", format!("unknown buffer `{name}`")))
    }
}
