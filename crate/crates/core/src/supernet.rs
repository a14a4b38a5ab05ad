//! The searchable super-network built from a trained ancestry network.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Module, Parameter, Tape, Var};
use crate::dad::{BlockTag, DadWeights, RoutingDecision, RoutingMode, Selection};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{AnsNet, ClassifierHead, EncoderBlock, Embedding, ModelConfig};

#[derive(Debug, Clone)]
pub struct SuperLayer {
    /// Frozen copy of the ancestry block.
    pub base: EncoderBlock,
    /// Trainable block, initialized as an exact copy of `base`.
    pub dataset_specific: EncoderBlock,
    pub dad: DadWeights,
}

impl SuperLayer {
    pub fn block(&self, tag: BlockTag) -> &EncoderBlock {
        match tag {
            BlockTag::Base => &self.base,
            BlockTag::DatasetSpecific => &self.dataset_specific,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuperAnsNet {
    pub config: ModelConfig,
    pub embedding: Embedding,
    pub layers: Vec<SuperLayer>,
    /// One classifier per dataset; dataset ids are 1-based.
    pub heads: Vec<ClassifierHead>,
    /// Multiply the adapter's softplus term by N(0, 1) noise while training.
    pub gaussian_noise: bool,
}

/// Expands a trained network into a super-network serving `m` datasets.
///
/// Every layer gets a trainable copy of its block and a fresh adapter drawn
/// from N(0, 0.02^2); the embedding and original blocks are frozen. Each
/// dataset head starts as a copy of the ancestry head.
pub fn expand_to_supernet(ans: &AnsNet, m: usize, seed: u64) -> Result<SuperAnsNet> {
    if m == 0 {
        return Err(Error::InvalidConfig("a super-network needs at least one dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embedding = ans.embedding.clone();
    embedding.set_trainable(false);
    let layers = ans
        .blocks
        .iter()
        .map(|block| {
            let mut base = block.clone();
            base.set_trainable(false);
            let mut dataset_specific = block.clone();
            dataset_specific.set_trainable(true);
            SuperLayer {
                base,
                dataset_specific,
                dad: DadWeights::new(ans.config.embed_dim, &mut rng),
            }
        })
        .collect();
    let heads = (0..m)
        .map(|_| {
            let mut h = ans.head.clone();
            h.set_trainable(true);
            h
        })
        .collect();
    Ok(SuperAnsNet {
        config: ans.config,
        embedding,
        layers,
        heads,
        gaussian_noise: false,
    })
}

/// How a routed forward pass picks blocks.
#[derive(Debug, Clone, Default)]
pub struct RouteOptions {
    pub mode: RoutingMode,
    /// Enables adapter gradients (and adapter noise, if configured).
    pub training: bool,
    /// Overrides the adapters' choice layer by layer for the whole batch.
    pub forced: Option<Vec<BlockTag>>,
}

impl RouteOptions {
    pub fn eval(mode: RoutingMode) -> Self {
        Self {
            mode,
            training: false,
            forced: None,
        }
    }

    pub fn train(mode: RoutingMode) -> Self {
        Self {
            mode,
            training: true,
            forced: None,
        }
    }
}

impl SuperAnsNet {
    pub fn num_datasets(&self) -> usize {
        self.heads.len()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn tokens(&self) -> usize {
        self.config.input.num_tokens()
    }

    pub fn head(&self, dataset_id: usize) -> Result<&ClassifierHead> {
        self.check_dataset(dataset_id)?;
        Ok(&self.heads[dataset_id - 1])
    }

    fn check_dataset(&self, dataset_id: usize) -> Result<()> {
        if dataset_id == 0 || dataset_id > self.heads.len() {
            return Err(Error::UnknownDataset {
                id: dataset_id,
                max: self.heads.len(),
            });
        }
        Ok(())
    }

    /// Records a routed forward pass; returns logits and one decision per layer.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        inputs: &Tensor,
        dataset_id: usize,
        opts: &RouteOptions,
        mut noise: Option<&mut R>,
    ) -> Result<(Var, Vec<RoutingDecision>)> {
        self.check_dataset(dataset_id)?;
        if let Some(forced) = &opts.forced {
            if forced.len() != self.depth() {
                return Err(Error::shape("supernet_forward", format!("{} forced choices", self.depth()), format!("{}", forced.len())));
            }
        }
        let tokens = self.tokens();
        let mut x = self.embedding.forward(tape, inputs, &self.config)?;
        let batch = inputs.shape()[0];
        let mut decisions = Vec::with_capacity(self.depth());

        for (i, layer) in self.layers.iter().enumerate() {
            let pooled = tape.mean_tokens(x, tokens)?;
            let layer_noise = if opts.training && self.gaussian_noise {
                noise.as_deref_mut()
            } else {
                None
            };
            let probs = layer.dad.forward(tape, pooled, layer_noise)?;
            let mut decision = RoutingDecision::from_probs(tape.value(probs).clone(), opts.mode)?;
            if let Some(forced) = &opts.forced {
                decision.selected = Selection::Batch(forced[i]);
            }
            let assignment: Vec<u8> = decision.sample_tags().iter().map(|t| t.column() as u8).collect();

            let mut parts = [None, None];
            let mut alternates = [None, None];
            for col in 0..2 {
                let tag = BlockTag::from_column(col);
                let block = layer.block(tag);
                let (mine, others): (Vec<usize>, Vec<usize>) = (0..batch).partition(|&s| assignment[s] as usize == col);
                if !mine.is_empty() {
                    let xi = if mine.len() == batch {
                        x
                    } else {
                        tape.gather_rows(x, &token_rows(&mine, tokens))?
                    };
                    parts[col] = Some(block.forward(tape, xi, tokens)?);
                }
                if opts.training && !others.is_empty() {
                    alternates[col] = Some(detached_block(block, tape.value(x), &others, tokens)?);
                }
            }
            x = tape.route_merge(probs, parts, alternates, &assignment, tokens)?;
            decisions.push(decision);
        }
        let logits = self.heads[dataset_id - 1].forward(tape, x, tokens)?;
        Ok((logits, decisions))
    }

    /// Bytes of everything that must stay frozen: embedding, then every base block.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        let mut out = self.embedding.parameter_bytes();
        for layer in &self.layers {
            out.extend(layer.base.parameter_bytes());
        }
        out
    }
}

fn token_rows(samples: &[usize], tokens: usize) -> Vec<usize> {
    samples.iter().flat_map(|&s| s * tokens..(s + 1) * tokens).collect()
}

/// Runs a block on a subset of samples without recording gradients.
fn detached_block(block: &EncoderBlock, x: &Tensor, samples: &[usize], tokens: usize) -> Result<Tensor> {
    let mut scratch = Tape::new();
    let xv = scratch.constant(x.clone());
    let rows = scratch.gather_rows(xv, &token_rows(samples, tokens))?;
    let y = block.forward(&mut scratch, rows, tokens)?;
    Ok(scratch.value(y).clone())
}

impl Module for SuperAnsNet {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.embedding.parameters();
        for layer in &self.layers {
            out.extend(layer.base.parameters());
            out.extend(layer.dataset_specific.parameters());
            out.extend(layer.dad.parameters());
        }
        for head in &self.heads {
            out.extend(head.parameters());
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.embedding.parameters_mut();
        for layer in &mut self.layers {
            out.extend(layer.base.parameters_mut());
            out.extend(layer.dataset_specific.parameters_mut());
            out.extend(layer.dad.parameters_mut());
        }
        for head in &mut self.heads {
            out.extend(head.parameters_mut());
        }
        out
    }
}

/// Inference-mode routed forward pass (no noise, no adapter gradients).
pub fn supernet_forward(
    net: &SuperAnsNet,
    batch: &Tensor,
    dataset_id: usize,
    mode: RoutingMode,
) -> Result<(Tensor, Vec<RoutingDecision>)> {
    let mut tape = Tape::new();
    let (logits, decisions) = net.forward::<ChaCha8Rng>(&mut tape, batch, dataset_id, &RouteOptions::eval(mode), None)?;
    Ok((tape.value(logits).clone(), decisions))
}

/// True iff the embedding and every base block are bit-identical.
pub fn verify_frozen_base(before: &SuperAnsNet, after: &SuperAnsNet) -> Result<bool> {
    if before.config != after.config || before.depth() != after.depth() {
        return Err(Error::ArchitectureMismatch(format!(
            "{:?} x {} layers vs {:?} x {} layers",
            before.config,
            before.depth(),
            after.config,
            after.depth()
        )));
    }
    Ok(before.frozen_bytes() == after.frozen_bytes())
}
