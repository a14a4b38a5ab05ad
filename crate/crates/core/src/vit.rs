//! A small configurable vision-transformer-style classifier.
//!
//! Pre-norm encoder blocks (multi-head self-attention, then a GELU MLP),
//! a learned additive position embedding, and a head that normalizes,
//! mean-pools over tokens and projects to class logits.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Module, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// Sequences of `tokens` continuous vectors of width `input_dim`.
    Tokens { tokens: usize, input_dim: usize },
    /// Square images cut into non-overlapping square patches.
    Patches {
        patch_size: usize,
        channels: usize,
        image_size: usize,
    },
}

impl InputSpec {
    pub fn num_tokens(&self) -> usize {
        match *self {
            InputSpec::Tokens { tokens, .. } => tokens,
            InputSpec::Patches {
                patch_size,
                image_size,
                ..
            } => (image_size / patch_size).pow(2),
        }
    }

    /// Width of one token before embedding.
    pub fn token_dim(&self) -> usize {
        match *self {
            InputSpec::Tokens { input_dim, .. } => input_dim,
            InputSpec::Patches {
                patch_size, channels, ..
            } => patch_size * patch_size * channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub depth: usize,
    pub input: InputSpec,
    pub num_classes: usize,
    /// Learned additive position embedding; without it positions carry no parameters.
    #[serde(default = "default_true")]
    pub learned_positions: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Laptop-scale default: 12 layers of width 64 over 16-token inputs.
    pub fn desk_default() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 4,
            depth: 12,
            input: InputSpec::Tokens {
                tokens: 16,
                input_dim: 16,
            },
            num_classes: 8,
            learned_positions: true,
        }
    }

    /// DeiT-Base dimensions with a 100-way head, used for parameter accounting.
    ///
    /// Position parameters are left out, matching the published per-depth
    /// parameter counts for these models.
    pub fn deit_b_reference() -> Self {
        Self {
            embed_dim: 768,
            num_heads: 12,
            mlp_ratio: 4,
            depth: 12,
            input: InputSpec::Patches {
                patch_size: 16,
                channels: 3,
                image_size: 224,
            },
            num_classes: 100,
            learned_positions: false,
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.embed_dim == 0 {
            out.push("embed_dim must be positive".to_string());
        }
        if self.num_heads == 0 {
            out.push("num_heads must be positive".to_string());
        } else if self.embed_dim % self.num_heads != 0 {
            out.push(format!(
                "num_heads ({}) must divide embed_dim ({})",
                self.num_heads, self.embed_dim
            ));
        }
        if self.mlp_ratio == 0 {
            out.push("mlp_ratio must be positive".to_string());
        }
        if self.depth == 0 {
            out.push("depth must be at least 1".to_string());
        }
        if self.num_classes == 0 {
            out.push("num_classes must be positive".to_string());
        }
        match self.input {
            InputSpec::Tokens { tokens, input_dim } => {
                if tokens == 0 || input_dim == 0 {
                    out.push("input tokens and input_dim must be positive".to_string());
                }
            }
            InputSpec::Patches {
                patch_size,
                channels,
                image_size,
            } => {
                if patch_size == 0 || channels == 0 || image_size == 0 || image_size % patch_size != 0 {
                    out.push("image_size must be a positive multiple of patch_size".to_string());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountScope {
    Block,
    FullModel,
}

/// Exact parameter count from the closed-form layer shapes.
pub fn count_parameters(config: &ModelConfig, scope: CountScope) -> u64 {
    let d = config.embed_dim as u64;
    let r = config.mlp_ratio as u64;
    let block = 3 * d * d + 3 * d // qkv
        + d * d + d // output projection
        + 2 * r * d * d + (r + 1) * d // ffn up + down
        + 4 * d; // two layer norms
    match scope {
        CountScope::Block => block,
        CountScope::FullModel => {
            let t = config.input.num_tokens() as u64;
            let k = config.input.token_dim() as u64;
            let c = config.num_classes as u64;
            let positions = if config.learned_positions { t * d } else { 0 };
            let embedding = k * d + d + positions;
            let head = 2 * d + d * c + c;
            embedding + config.depth as u64 * block + head
        }
    }
}

fn xavier<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

fn trainable(t: Tensor) -> Parameter {
    Parameter::new(t, true)
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1_scale: Parameter,
    pub ln1_shift: Parameter,
    pub qkv_weight: Parameter,
    pub qkv_bias: Parameter,
    pub proj_weight: Parameter,
    pub proj_bias: Parameter,
    pub ln2_scale: Parameter,
    pub ln2_shift: Parameter,
    pub ffn_up_weight: Parameter,
    pub ffn_up_bias: Parameter,
    pub ffn_down_weight: Parameter,
    pub ffn_down_bias: Parameter,
    num_heads: usize,
}

impl EncoderBlock {
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.embed_dim;
        let h = config.hidden_dim();
        Self {
            ln1_scale: trainable(Tensor::filled(&[d], 1.0)),
            ln1_shift: trainable(Tensor::zeros(&[d])),
            qkv_weight: trainable(xavier(d, 3 * d, rng)),
            qkv_bias: trainable(Tensor::zeros(&[3 * d])),
            proj_weight: trainable(xavier(d, d, rng)),
            proj_bias: trainable(Tensor::zeros(&[d])),
            ln2_scale: trainable(Tensor::filled(&[d], 1.0)),
            ln2_shift: trainable(Tensor::zeros(&[d])),
            ffn_up_weight: trainable(xavier(d, h, rng)),
            ffn_up_bias: trainable(Tensor::zeros(&[h])),
            ffn_down_weight: trainable(xavier(h, d, rng)),
            ffn_down_bias: trainable(Tensor::zeros(&[d])),
            num_heads: config.num_heads,
        }
    }

    /// Builds a block from parameter values in [`Module::parameters`] order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let template = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0));
        let mut block = template;
        let params = block.parameters_mut();
        if params.len() != tensors.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "encoder block has {} tensors, got {}",
                params.len(),
                tensors.len()
            )));
        }
        for (p, t) in params.into_iter().zip(tensors) {
            p.set_value(t)?;
        }
        Ok(block)
    }

    pub fn embed_dim(&self) -> usize {
        self.ln1_scale.numel()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    /// `x` is `[batch * tokens, D]`; returns the same shape.
    pub fn forward(&self, tape: &mut Tape, x: Var, tokens: usize) -> Result<Var> {
        let d = self.embed_dim();
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != d || tokens == 0 || shape[0] % tokens != 0 {
            return Err(Error::shape(
                "encoder_block_forward",
                format!("[n * {tokens}, {d}]"),
                format!("{shape:?}"),
            ));
        }
        let heads = self.num_heads;
        let dh = d / heads;

        let g1 = tape.param(&self.ln1_scale);
        let b1 = tape.param(&self.ln1_shift);
        let h = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
        let wqkv = tape.param(&self.qkv_weight);
        let bqkv = tape.param(&self.qkv_bias);
        let qkv = tape.linear(h, wqkv, bqkv)?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;
        let q = tape.to_heads(q, tokens, heads)?;
        let k = tape.to_heads(k, tokens, heads)?;
        let v = tape.to_heads(v, tokens, heads)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = tape.softmax(scores)?;
        let ctx = tape.batch_matmul(attn, v, false)?;
        let ctx = tape.from_heads(ctx, heads)?;
        let wo = tape.param(&self.proj_weight);
        let bo = tape.param(&self.proj_bias);
        let attn_out = tape.linear(ctx, wo, bo)?;
        let x = tape.add(x, attn_out)?;

        let g2 = tape.param(&self.ln2_scale);
        let b2 = tape.param(&self.ln2_shift);
        let h = tape.layer_norm(x, g2, b2, LAYER_NORM_EPS)?;
        let wu = tape.param(&self.ffn_up_weight);
        let bu = tape.param(&self.ffn_up_bias);
        let h = tape.linear(h, wu, bu)?;
        let h = tape.gelu(h)?;
        let wd = tape.param(&self.ffn_down_weight);
        let bd = tape.param(&self.ffn_down_bias);
        let ffn_out = tape.linear(h, wd, bd)?;
        tape.add(x, ffn_out)
    }

    /// Zeroes both residual-branch output projections (weights and biases),
    /// turning the block into the identity map.
    pub fn zero_residual_branches(&mut self) {
        for p in [
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.ffn_down_weight,
            &mut self.ffn_down_bias,
        ] {
            p.value_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl Module for EncoderBlock {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![
            &self.ln1_scale,
            &self.ln1_shift,
            &self.qkv_weight,
            &self.qkv_bias,
            &self.proj_weight,
            &self.proj_bias,
            &self.ln2_scale,
            &self.ln2_shift,
            &self.ffn_up_weight,
            &self.ffn_up_bias,
            &self.ffn_down_weight,
            &self.ffn_down_bias,
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.ln1_scale,
            &mut self.ln1_shift,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.ln2_scale,
            &mut self.ln2_shift,
            &mut self.ffn_up_weight,
            &mut self.ffn_up_bias,
            &mut self.ffn_down_weight,
            &mut self.ffn_down_bias,
        ]
    }
}

/// Runs one block over a single sequence `[tokens, D]` or a batch `[B, tokens, D]`.
pub fn encoder_block_forward(block: &EncoderBlock, x: &Tensor) -> Result<Tensor> {
    let (rows, tokens) = match *x.shape() {
        [t, _] => (t, t),
        [b, t, _] => (b * t, t),
        ref s => return Err(Error::shape("encoder_block_forward", "[tokens, D] or [B, tokens, D]", format!("{s:?}"))),
    };
    let flat = x.reshape(&[rows, x.last_dim()])?;
    let mut tape = Tape::new();
    let xv = tape.constant(flat);
    let y = block.forward(&mut tape, xv, tokens)?;
    tape.value(y).reshape(x.shape())
}

/// Token projection plus learned position embedding.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub weight: Parameter,
    pub bias: Parameter,
    pub position: Option<Parameter>,
}

impl Embedding {
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.embed_dim;
        let k = config.input.token_dim();
        let t = config.input.num_tokens();
        Self {
            weight: trainable(xavier(k, d, rng)),
            bias: trainable(Tensor::zeros(&[d])),
            position: config
                .learned_positions
                .then(|| trainable(Tensor::randn(&[t, d], 0.02, rng))),
        }
    }

    /// `inputs` is `[B, tokens, input_dim]`; returns `[B * tokens, D]`.
    pub fn forward(&self, tape: &mut Tape, inputs: &Tensor, config: &ModelConfig) -> Result<Var> {
        let InputSpec::Tokens { tokens, input_dim } = config.input else {
            return Err(Error::InputSpec("patch inputs are only supported for parameter accounting".into()));
        };
        let batch = match *inputs.shape() {
            [b, t, k] if t == tokens && k == input_dim => b,
            ref s => {
                return Err(Error::InputSpec(format!(
                    "expected [batch, {tokens}, {input_dim}], got {s:?}"
                )))
            }
        };
        let x = tape.constant(inputs.reshape(&[batch * tokens, input_dim])?);
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let h = tape.linear(x, w, b)?;
        let Some(position) = &self.position else {
            return Ok(h);
        };
        let pos = tape.param(position);
        let rows: Vec<usize> = (0..batch).flat_map(|_| 0..tokens).collect();
        let pos = tape.gather_rows(pos, &rows)?;
        tape.add(h, pos)
    }
}

impl Module for Embedding {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.weight, &self.bias];
        out.extend(self.position.as_ref());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.weight, &mut self.bias];
        out.extend(self.position.as_mut());
        out
    }
}

/// Final layer norm, token mean-pooling and linear classifier.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub norm_scale: Parameter,
    pub norm_shift: Parameter,
    pub weight: Parameter,
    pub bias: Parameter,
}

impl ClassifierHead {
    pub fn new<R: Rng>(embed_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            norm_scale: trainable(Tensor::filled(&[embed_dim], 1.0)),
            norm_shift: trainable(Tensor::zeros(&[embed_dim])),
            weight: trainable(xavier(embed_dim, num_classes, rng)),
            bias: trainable(Tensor::zeros(&[num_classes])),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, tokens: usize) -> Result<Var> {
        let g = tape.param(&self.norm_scale);
        let b = tape.param(&self.norm_shift);
        let h = tape.layer_norm(x, g, b, LAYER_NORM_EPS)?;
        let pooled = tape.mean_tokens(h, tokens)?;
        let w = tape.param(&self.weight);
        let bias = tape.param(&self.bias);
        tape.linear(pooled, w, bias)
    }
}

impl Module for ClassifierHead {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.norm_scale, &self.norm_shift, &self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.norm_scale,
            &mut self.norm_shift,
            &mut self.weight,
            &mut self.bias,
        ]
    }
}

/// A plain (un-routed) transformer classifier. Both the ancestry network and
/// descendant networks built from learngene layers are instances of this.
#[derive(Debug, Clone)]
pub struct VitModel {
    pub config: ModelConfig,
    pub embedding: Embedding,
    pub blocks: Vec<EncoderBlock>,
    pub head: ClassifierHead,
}

pub type AnsNet = VitModel;
pub type DesNet = VitModel;

impl VitModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Embedding::new(&config, &mut rng);
        let blocks = (0..config.depth).map(|_| EncoderBlock::new(&config, &mut rng)).collect();
        let head = ClassifierHead::new(config.embed_dim, config.num_classes, &mut rng);
        Ok(Self {
            config,
            embedding,
            blocks,
            head,
        })
    }

    pub fn tokens(&self) -> usize {
        self.config.input.num_tokens()
    }

    /// Records the full forward pass and returns the `[B, C]` logits node.
    pub fn forward(&self, tape: &mut Tape, inputs: &Tensor) -> Result<Var> {
        let tokens = self.tokens();
        let mut x = self.embedding.forward(tape, inputs, &self.config)?;
        for block in &self.blocks {
            x = block.forward(tape, x, tokens)?;
        }
        self.head.forward(tape, x, tokens)
    }
}

impl Module for VitModel {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.embedding.parameters();
        for b in &self.blocks {
            out.extend(b.parameters());
        }
        out.extend(self.head.parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.embedding.parameters_mut();
        for b in &mut self.blocks {
            out.extend(b.parameters_mut());
        }
        out.extend(self.head.parameters_mut());
        out
    }
}

/// Inference-only forward pass returning `[B, C]` logits.
pub fn model_forward(net: &VitModel, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let logits = net.forward(&mut tape, batch)?;
    Ok(tape.value(logits).clone())
}
