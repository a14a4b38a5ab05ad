//! Learngene-initialized descendants against their scratch twins.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expansion::{instantiate_desnet, random_desnet, ExpansionPlan};
use crate::search::LearngeneLayers;
use crate::training::{finetune_desnet, Metrics, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    /// Test accuracy after each epoch.
    pub learngene_curve: Vec<f64>,
    pub scratch_curve: Vec<f64>,
    pub learngene_final: f64,
    pub scratch_final: f64,
    /// First epoch (1-based) at which the learngene network reaches the
    /// scratch network's final accuracy.
    pub epochs_to_match: Option<usize>,
}

impl SeedComparison {
    pub fn from_metrics(seed: u64, learngene: &Metrics, scratch: &Metrics) -> Self {
        let learngene_curve: Vec<f64> = learngene.test_curve().into_iter().map(|(_, a)| a).collect();
        let scratch_curve: Vec<f64> = scratch.test_curve().into_iter().map(|(_, a)| a).collect();
        let learngene_final = learngene.mean_final_accuracy();
        let scratch_final = scratch.mean_final_accuracy();
        let epochs_to_match = learngene_curve.iter().position(|&a| a >= scratch_final).map(|i| i + 1);
        Self {
            seed,
            learngene_curve,
            scratch_curve,
            learngene_final,
            scratch_final,
            epochs_to_match,
        }
    }

    /// Whether the learngene network matched the scratch result within
    /// `fraction` of the epoch budget.
    pub fn matched_within(&self, fraction: f64) -> bool {
        let budget = self.learngene_curve.len() as f64 * fraction;
        self.epochs_to_match.is_some_and(|e| e as f64 <= budget + 1e-9)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub depth: usize,
    pub epochs: usize,
    pub dataset_id: u32,
    pub seeds: Vec<SeedComparison>,
    pub learngene_mean: f64,
    pub scratch_mean: f64,
}

impl ComparisonReport {
    /// `seed,epoch,init,accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,epoch,init,accuracy\n");
        for s in &self.seeds {
            for (name, curve) in [("learngene", &s.learngene_curve), ("scratch", &s.scratch_curve)] {
                for (e, a) in curve.iter().enumerate() {
                    out.push_str(&format!("{},{},{},{:.6}\n", s.seed, e + 1, name, a));
                }
            }
        }
        out
    }
}

/// Fine-tunes a learngene descendant and its scratch twin once per seed.
/// Both networks in a pair share the head initialization; the scratch twin's
/// blocks and embedding are random.
pub fn compare_with_scratch(
    lg: &LearngeneLayers,
    plan: &ExpansionPlan,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<ComparisonReport> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let cfg = TrainConfig {
        eval_every: 1,
        ..cfg.clone()
    };
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let mut learngene = instantiate_desnet(lg, plan, dataset.num_classes, seed)?;
        let lg_metrics = finetune_desnet(&mut learngene, dataset, &run_cfg)?;
        let mut scratch = random_desnet(lg, plan.target_depth, dataset.num_classes, seed)?;
        let scratch_metrics = finetune_desnet(&mut scratch, dataset, &run_cfg)?;
        rows.push(SeedComparison::from_metrics(seed, &lg_metrics, &scratch_metrics));
    }
    let n = rows.len() as f64;
    Ok(ComparisonReport {
        depth: plan.target_depth,
        epochs: cfg.epochs,
        dataset_id: dataset.id,
        learngene_mean: rows.iter().map(|r| r.learngene_final).sum::<f64>() / n,
        scratch_mean: rows.iter().map(|r| r.scratch_final).sum::<f64>() / n,
        seeds: rows,
    })
}
