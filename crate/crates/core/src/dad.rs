//! Dataset adapter: a two-way router between a layer's dataset-specific
//! block and its frozen base block.
//!
//! Probabilities are `softmax(x W1 + softplus(x W2))` over two columns:
//! column 0 is the dataset-specific block, column 1 the base block.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Module, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Init scale of the adapter weights.
pub const DAD_INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTag {
    DatasetSpecific,
    Base,
}

impl BlockTag {
    /// Column of this block in the adapter output.
    pub fn column(self) -> usize {
        match self {
            BlockTag::DatasetSpecific => 0,
            BlockTag::Base => 1,
        }
    }

    pub fn from_column(col: usize) -> Self {
        if col == 0 {
            BlockTag::DatasetSpecific
        } else {
            BlockTag::Base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// The whole batch follows the block most samples prefer.
    #[default]
    Batch,
    /// Every sample follows its own preferred block.
    Img,
}

impl std::str::FromStr for RoutingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "batch" => Ok(RoutingMode::Batch),
            "img" => Ok(RoutingMode::Img),
            other => Err(format!("unknown routing mode {other:?} (expected batch or img)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DadWeights {
    pub w1: Parameter,
    /// Noise-branch weights, passed through softplus.
    pub w2: Parameter,
}

impl DadWeights {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> Self {
        Self {
            w1: Parameter::new(Tensor::randn(&[embed_dim, 2], DAD_INIT_STD, rng), true),
            w2: Parameter::new(Tensor::randn(&[embed_dim, 2], DAD_INIT_STD, rng), true),
        }
    }

    pub fn zeros(embed_dim: usize) -> Self {
        Self {
            w1: Parameter::new(Tensor::zeros(&[embed_dim, 2]), true),
            w2: Parameter::new(Tensor::zeros(&[embed_dim, 2]), true),
        }
    }

    pub fn from_tensors(w1: Tensor, w2: Tensor) -> Result<Self> {
        for w in [&w1, &w2] {
            if w.shape().len() != 2 || w.shape()[1] != 2 || w.shape()[0] != w1.shape()[0] {
                return Err(Error::shape("DadWeights", "[D, 2]", format!("{:?}", w.shape())));
            }
        }
        Ok(Self {
            w1: Parameter::new(w1, true),
            w2: Parameter::new(w2, true),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    /// Records the adapter on a tape. `x` is `[N, D]`.
    ///
    /// With `noise`, the softplus term is multiplied elementwise by standard
    /// normal draws (used only during training when enabled).
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, noise: Option<&mut R>) -> Result<Var> {
        let d = self.embed_dim();
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::shape("route_probabilities", format!("[N, {d}]"), format!("{shape:?}")));
        }
        let w1 = tape.param(&self.w1);
        let w2 = tape.param(&self.w2);
        let clean = tape.matmul(x, w1)?;
        let gate = tape.matmul(x, w2)?;
        let mut smooth = tape.softplus(gate)?;
        if let Some(rng) = noise {
            let eps = Tensor::from_fn(&[shape[0], 2], |_| StandardNormal.sample(rng));
            let eps = tape.constant(eps);
            smooth = tape.mul(smooth, eps)?;
        }
        let logits = tape.add(clean, smooth)?;
        tape.softmax(logits)
    }
}

impl Module for DadWeights {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.w1, &self.w2]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w1, &mut self.w2]
    }
}

/// Per-sample block probabilities `[N, 2]` for pooled inputs `x: [N, D]`.
///
/// Noise is only drawn when `training` is set and an rng is supplied.
pub fn route_probabilities<R: Rng + ?Sized>(
    dad: &DadWeights,
    x: &Tensor,
    training: bool,
    noise: Option<&mut R>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = dad.forward(&mut tape, xv, noise.filter(|_| training))?;
    Ok(tape.value(p).clone())
}

/// A sample votes for the base block iff `P(base) >= P(dataset-specific)`.
fn prefers_base(row: &[f32]) -> bool {
    row[BlockTag::Base.column()] >= row[BlockTag::DatasetSpecific.column()]
}

fn check_probs(probs: &Tensor) -> Result<usize> {
    match *probs.shape() {
        [n, 2] if n >= 1 => Ok(n),
        ref s => Err(Error::shape("routing", "[N >= 1, 2]", format!("{s:?}"))),
    }
}

/// Batch-majority rule: base is selected iff at least half the samples vote for it.
pub fn select_batch_majority(probs: &Tensor) -> Result<(BlockTag, f64)> {
    let n = check_probs(probs)?;
    let votes = (0..n).filter(|&i| prefers_base(probs.row(i))).count();
    let fraction = votes as f64 / n as f64;
    Ok((majority_tag(fraction), fraction))
}

/// Ties (exactly half) resolve to the base block.
pub fn majority_tag(base_vote_fraction: f64) -> BlockTag {
    if base_vote_fraction >= 0.5 {
        BlockTag::Base
    } else {
        BlockTag::DatasetSpecific
    }
}

pub fn route_per_sample(probs: &Tensor) -> Result<Vec<BlockTag>> {
    let n = check_probs(probs)?;
    Ok((0..n)
        .map(|i| {
            if prefers_base(probs.row(i)) {
                BlockTag::Base
            } else {
                BlockTag::DatasetSpecific
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "tags", rename_all = "snake_case")]
pub enum Selection {
    Batch(BlockTag),
    Img(Vec<BlockTag>),
}

#[derive(Debug, Clone)]
pub struct RoutingDecision {
    pub per_sample_probs: Tensor,
    pub mode: RoutingMode,
    pub selected: Selection,
    pub base_vote_fraction: f64,
}

impl RoutingDecision {
    pub fn from_probs(probs: Tensor, mode: RoutingMode) -> Result<Self> {
        let tags = route_per_sample(&probs)?;
        let fraction = tags.iter().filter(|&&t| t == BlockTag::Base).count() as f64 / tags.len() as f64;
        let selected = match mode {
            RoutingMode::Batch => Selection::Batch(majority_tag(fraction)),
            RoutingMode::Img => Selection::Img(tags),
        };
        Ok(Self {
            per_sample_probs: probs,
            mode,
            selected,
            base_vote_fraction: fraction,
        })
    }

    /// The block each sample is actually sent through.
    pub fn sample_tags(&self) -> Vec<BlockTag> {
        match &self.selected {
            Selection::Batch(tag) => vec![*tag; self.per_sample_probs.shape()[0]],
            Selection::Img(tags) => tags.clone(),
        }
    }

    /// Fraction of samples sent through the base block.
    pub fn base_routed_fraction(&self) -> f64 {
        let tags = self.sample_tags();
        tags.iter().filter(|&&t| t == BlockTag::Base).count() as f64 / tags.len() as f64
    }
}
