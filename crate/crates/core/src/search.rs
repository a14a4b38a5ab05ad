//! Turning a trained super-network into per-dataset paths, a usage tally and
//! the extracted learngene layers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Module, Tape};
use crate::dad::{majority_tag, BlockTag, RoutingMode};
use crate::error::{Error, Result};
use crate::supernet::{RouteOptions, SuperAnsNet};
use crate::tensor::Tensor;
use crate::vit::{EncoderBlock, Embedding, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub dataset_id: usize,
    pub mode: RoutingMode,
    pub choices: Vec<BlockTag>,
    pub base_vote_fractions: Vec<f64>,
}

impl PathRecord {
    /// 1-based indices of the layers routed to the base block.
    pub fn base_indices(&self) -> BTreeSet<usize> {
        self.choices
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == BlockTag::Base)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Runs the held-out batches through the network (no noise, no gradients) and
/// picks, per layer, the block the average batch voted for.
pub fn infer_dataset_path(
    net: &SuperAnsNet,
    dataset_id: usize,
    eval_batches: &[Tensor],
    mode: RoutingMode,
) -> Result<PathRecord> {
    if eval_batches.is_empty() {
        return Err(Error::Empty("evaluation batches"));
    }
    let opts = RouteOptions::eval(mode);
    let mut sums = vec![0.0f64; net.depth()];
    for batch in eval_batches {
        let mut tape = Tape::new();
        let (_, decisions) = net.forward::<rand_chacha::ChaCha8Rng>(&mut tape, batch, dataset_id, &opts, None)?;
        for (s, d) in sums.iter_mut().zip(&decisions) {
            *s += d.base_vote_fraction;
        }
    }
    let base_vote_fractions: Vec<f64> = sums.iter().map(|s| s / eval_batches.len() as f64).collect();
    Ok(PathRecord {
        dataset_id,
        mode,
        choices: base_vote_fractions.iter().map(|&f| majority_tag(f)).collect(),
        base_vote_fractions,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTally {
    /// `g[t][i]` is 1 when dataset `t + 1` uses the base block of layer `i + 1`.
    pub g: Vec<Vec<u8>>,
    /// Column sums of `g`.
    pub totals: Vec<usize>,
}

impl UsageTally {
    pub fn num_datasets(&self) -> usize {
        self.g.len()
    }

    pub fn depth(&self) -> usize {
        self.totals.len()
    }
}

/// Counts base-block usage over one path per dataset (in any order).
pub fn tally_usage(paths: &[PathRecord]) -> Result<UsageTally> {
    let first = paths.first().ok_or(Error::Empty("path records"))?;
    let depth = first.choices.len();
    let m = paths.len();
    let mut ordered: Vec<&PathRecord> = paths.iter().collect();
    ordered.sort_by_key(|p| p.dataset_id);
    for (t, p) in ordered.iter().enumerate() {
        if p.dataset_id != t + 1 {
            return Err(Error::InvalidConfig(format!(
                "expected one path for each dataset 1..={m}, found dataset ids {:?}",
                paths.iter().map(|p| p.dataset_id).collect::<Vec<_>>()
            )));
        }
        if p.choices.len() != depth {
            return Err(Error::shape("tally_usage", format!("{depth} layer choices"), format!("{}", p.choices.len())));
        }
    }
    let g: Vec<Vec<u8>> = ordered
        .iter()
        .map(|p| p.choices.iter().map(|&c| u8::from(c == BlockTag::Base)).collect())
        .collect();
    let totals = (0..depth).map(|i| g.iter().map(|row| row[i] as usize).sum()).collect();
    Ok(UsageTally { g, totals })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    /// A layer is extracted when more than `tau` datasets use its base block.
    pub tau: usize,
}

impl ExtractionConfig {
    pub fn for_datasets(m: usize) -> Self {
        Self { tau: m / 2 }
    }
}

/// 1-based indices with usage strictly above `tau`.
pub fn heavy_indices(totals: &[usize], tau: usize) -> Vec<usize> {
    totals
        .iter()
        .enumerate()
        .filter(|(_, &g)| g > tau)
        .map(|(i, _)| i + 1)
        .collect()
}

#[derive(Debug, Clone)]
pub struct LearngeneLayers {
    /// Strictly increasing, 1-based layer indices in the source network.
    pub indices: Vec<usize>,
    pub blocks: Vec<EncoderBlock>,
    /// The source network's input embedding, inherited by descendants.
    /// Without it descendants start from a fresh embedding.
    pub embedding: Option<Embedding>,
    pub source_config: ModelConfig,
    pub num_datasets: usize,
    pub tau: usize,
    pub usage: Vec<usize>,
}

impl LearngeneLayers {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The block extracted from source layer `index`.
    pub fn block(&self, index: usize) -> Option<&EncoderBlock> {
        self.indices.iter().position(|&i| i == index).map(|k| &self.blocks[k])
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::Empty("learngene indices"));
        }
        if self.indices.len() != self.blocks.len() {
            return Err(Error::Format(format!(
                "{} indices but {} blocks",
                self.indices.len(),
                self.blocks.len()
            )));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) || self.indices[0] == 0 {
            return Err(Error::Format(format!(
                "learngene indices must be strictly increasing and 1-based, got {:?}",
                self.indices
            )));
        }
        if let Some(&last) = self.indices.last() {
            if last > self.source_config.depth {
                return Err(Error::Format(format!(
                    "index {last} exceeds source depth {}",
                    self.source_config.depth
                )));
            }
        }
        Ok(())
    }
}

/// Copies the frozen base blocks of every heavily used layer, plus the
/// frozen embedding that fed them.
pub fn extract_learngene(net: &SuperAnsNet, tally: &UsageTally, cfg: ExtractionConfig) -> Result<LearngeneLayers> {
    if tally.depth() != net.depth() || tally.num_datasets() != net.num_datasets() {
        return Err(Error::shape(
            "extract_learngene",
            format!("{} datasets x {} layers", net.num_datasets(), net.depth()),
            format!("{} x {}", tally.num_datasets(), tally.depth()),
        ));
    }
    let indices = heavy_indices(&tally.totals, cfg.tau);
    if indices.is_empty() {
        return Err(Error::EmptyExtraction { tau: cfg.tau });
    }
    let blocks = indices
        .iter()
        .map(|&i| {
            let mut b = net.layers[i - 1].base.clone();
            b.set_trainable(true);
            b
        })
        .collect();
    let mut embedding = net.embedding.clone();
    embedding.set_trainable(true);
    Ok(LearngeneLayers {
        indices,
        blocks,
        embedding: Some(embedding),
        source_config: net.config,
        num_datasets: net.num_datasets(),
        tau: cfg.tau,
        usage: tally.totals.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRecord {
    pub dataset_id: usize,
    pub set_batch: Vec<usize>,
    pub set_img: Vec<usize>,
    pub intersection: Vec<usize>,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub records: Vec<OverlapRecord>,
    pub mean_jaccard: f64,
}

/// `|A ∩ B| / |A ∪ B|`, taken as 1 when both sets are empty.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Compares the base-block sets chosen under the two routing modes.
pub fn selection_overlap_report(paths_batch: &[PathRecord], paths_img: &[PathRecord]) -> Result<OverlapReport> {
    if paths_batch.len() != paths_img.len() {
        return Err(Error::shape(
            "selection_overlap_report",
            format!("{} paths", paths_batch.len()),
            format!("{}", paths_img.len()),
        ));
    }
    if paths_batch.is_empty() {
        return Err(Error::Empty("path records"));
    }
    let mut records = Vec::with_capacity(paths_batch.len());
    for pb in paths_batch {
        let pi = paths_img
            .iter()
            .find(|p| p.dataset_id == pb.dataset_id)
            .ok_or(Error::UnknownDataset {
                id: pb.dataset_id,
                max: paths_img.len(),
            })?;
        if pb.choices.len() != pi.choices.len() {
            return Err(Error::shape(
                "selection_overlap_report",
                format!("{} layers", pb.choices.len()),
                format!("{}", pi.choices.len()),
            ));
        }
        let a = pb.base_indices();
        let b = pi.base_indices();
        records.push(OverlapRecord {
            dataset_id: pb.dataset_id,
            intersection: a.intersection(&b).copied().collect(),
            jaccard: jaccard(&a, &b),
            set_batch: a.into_iter().collect(),
            set_img: b.into_iter().collect(),
        });
    }
    let mean_jaccard = records.iter().map(|r| r.jaccard).sum::<f64>() / records.len() as f64;
    Ok(OverlapReport { records, mean_jaccard })
}
