//! Pipeline configuration read from TOML.

use std::path::{Path, PathBuf};

use learngene::data::FamilySpec;
use learngene::expansion::{Priority, Strategy};
use learngene::training::{TrainConfig, REFERENCE_LR_PATTERN};
use learngene::vit::{InputSpec, ModelConfig};
use learngene::{OptimizerConfig, RoutingMode};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub family: FamilySpec,
    pub held_out: HeldOutSection,
    pub corpus: CorpusSection,
    pub pretrain: PhaseSection,
    pub search: PhaseSection,
    pub routing: RoutingSection,
    pub extract: ExtractSection,
    pub build: BuildSection,
    pub finetune: PhaseSection,
    pub compare: CompareSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub depth: usize,
    pub learned_positions: bool,
}

/// The task fine-tuned downstream; its id should lie past `family.num_tasks`
/// so it continues the family's shift schedule without being searched on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeldOutSection {
    pub task_id: u32,
    /// Overrides `family.train_size` for this task.
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
}

/// The Ans-Net's pretraining corpus: the family's tasks with a larger
/// training split. Search and fine-tuning keep `family.train_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub train_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseSection {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f32,
    /// `sgd` or `adamw`.
    pub optimizer: String,
    /// SGD only.
    pub momentum: f32,
    pub weight_decay: f32,
    /// Per-dataset multipliers on `lr`, by dataset id; empty for none.
    pub lr_multipliers: Vec<f32>,
    /// Test-set evaluation interval in epochs; 0 evaluates only at the end.
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingSection {
    /// Routing used while training the super-network, and the path set the
    /// learngene is extracted from.
    pub mode: RoutingMode,
    pub gaussian_noise: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractSection {
    /// Extract layers used by more than `tau` datasets; unset means half the
    /// number of datasets.
    pub tau: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildSection {
    pub strategy: String,
    pub priority: String,
    pub target_depths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareSection {
    /// Depth of the compared descendants; unset means one more layer than the
    /// learngene has.
    pub depth: Option<usize>,
    pub seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/desk"),
            model: ModelSection::default(),
            family: FamilySpec {
                tokens: 8,
                input_dim: 16,
                train_size: 256,
                test_size: 256,
                ..FamilySpec::default()
            },
            held_out: HeldOutSection::default(),
            corpus: CorpusSection::default(),
            pretrain: PhaseSection {
                epochs: 5,
                ..PhaseSection::default()
            },
            search: PhaseSection {
                epochs: 3,
                lr_multipliers: REFERENCE_LR_PATTERN.to_vec(),
                ..PhaseSection::default()
            },
            routing: RoutingSection::default(),
            extract: ExtractSection::default(),
            build: BuildSection::default(),
            finetune: PhaseSection {
                eval_every: 1,
                ..PhaseSection::default()
            },
            compare: CompareSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            num_heads: 4,
            mlp_ratio: 2,
            depth: 12,
            learned_positions: true,
        }
    }
}

impl Default for HeldOutSection {
    fn default() -> Self {
        Self {
            task_id: 13,
            train_size: None,
            test_size: Some(512),
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { train_size: 1024 }
    }
}

impl Default for PhaseSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 10,
            batch_size: 32,
            poly_power: 0.9,
            optimizer: "adamw".into(),
            momentum: 0.9,
            weight_decay: 0.0,
            lr_multipliers: Vec::new(),
            eval_every: 0,
        }
    }
}

impl Default for RoutingSection {
    fn default() -> Self {
        Self {
            mode: RoutingMode::Batch,
            gaussian_noise: false,
        }
    }
}

impl Default for BuildSection {
    fn default() -> Self {
        Self {
            strategy: "neighbor".into(),
            priority: "reverse".into(),
            target_depths: vec![12],
        }
    }
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            depth: None,
            seeds: vec![0, 1, 2],
        }
    }
}

impl PhaseSection {
    fn optimizer_config(&self) -> Result<OptimizerConfig, String> {
        match self.optimizer.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerConfig::Sgd {
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            }),
            "adamw" => Ok(match OptimizerConfig::adamw() {
                OptimizerConfig::AdamW { beta1, beta2, eps, .. } => OptimizerConfig::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay: self.weight_decay,
                },
                other => other,
            }),
            other => Err(format!("optimizer must be \"sgd\" or \"adamw\", got {other:?}")),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            poly_power: self.poly_power,
            seed,
            optimizer: self.optimizer_config().unwrap_or_default(),
            lr_multipliers: self.lr_multipliers.clone(),
            dataset_order: Vec::new(),
            eval_every: self.eval_every,
        }
    }

    fn problems(&self, section: &str, out: &mut Vec<String>) {
        if let Err(e) = self.optimizer_config() {
            out.push(format!("{section}.{e}"));
        }
        for p in self.train_config(0).problems() {
            out.push(format!("{section}.{p}"));
        }
    }
}

impl PipelineConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.model.embed_dim,
            num_heads: self.model.num_heads,
            mlp_ratio: self.model.mlp_ratio,
            depth: self.model.depth,
            input: InputSpec::Tokens {
                tokens: self.family.tokens,
                input_dim: self.family.input_dim,
            },
            num_classes: self.family.num_classes,
            learned_positions: self.model.learned_positions,
        }
    }

    pub fn num_datasets(&self) -> usize {
        self.family.num_tasks
    }

    pub fn tau(&self) -> usize {
        self.extract.tau.unwrap_or(self.num_datasets() / 2)
    }

    pub fn strategy(&self) -> Result<Strategy, String> {
        self.build.strategy.parse::<Strategy>().map_err(|e| e.to_string())
    }

    pub fn priority(&self) -> Result<Priority, String> {
        self.build.priority.parse::<Priority>().map_err(|e| e.to_string())
    }

    pub fn compare_depth(&self, learngene_len: usize) -> usize {
        self.compare.depth.unwrap_or(learngene_len + 1)
    }

    /// The family spec with the pretraining corpus's training split size.
    pub fn corpus_family(&self) -> FamilySpec {
        FamilySpec {
            train_size: self.corpus.train_size,
            ..self.family.clone()
        }
    }

    /// Every violation, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in self.model_config().problems() {
            out.push(format!("model: {p}"));
        }
        for p in self.family.problems() {
            out.push(format!("family.{p}"));
        }
        if (self.held_out.task_id as usize) <= self.family.num_tasks {
            out.push(format!(
                "held_out.task_id must exceed family.num_tasks ({}), got {}",
                self.family.num_tasks, self.held_out.task_id
            ));
        }
        if self.held_out.train_size == Some(0) || self.held_out.test_size == Some(0) {
            out.push("held_out split sizes must be positive".into());
        }
        if self.corpus.train_size == 0 {
            out.push("corpus.train_size must be positive".into());
        }
        self.pretrain.problems("pretrain", &mut out);
        self.search.problems("search", &mut out);
        self.finetune.problems("finetune", &mut out);
        if let Err(e) = self.strategy() {
            out.push(format!("build.strategy: {e}"));
        }
        if let Err(e) = self.priority() {
            out.push(format!("build.priority: {e}"));
        }
        if self.build.target_depths.is_empty() {
            out.push("build.target_depths must list at least one depth".into());
        }
        if self.build.target_depths.contains(&0) {
            out.push("build.target_depths entries must be at least 1".into());
        }
        if self.compare.depth == Some(0) {
            out.push("compare.depth must be at least 1".into());
        }
        if self.compare.seeds.is_empty() {
            out.push("compare.seeds must list at least one seed".into());
        }
        out
    }

    /// Conditions worth flagging that do not stop a run.
    pub fn warnings(&self) -> Vec<String> {
        let m = self.num_datasets();
        let tau = self.tau();
        let mut out = Vec::new();
        if tau < 1 || tau > m {
            out.push(format!("extract.tau = {tau} lies outside [1, {m}]"));
        }
        out
    }

    /// Parses TOML, collecting unknown keys and every validation problem.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::new(text);
        let cfg: PipelineConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| CliError::Config(vec![e.to_string().trim().replace('\n', " ")]))?;
        let mut problems: Vec<String> = unknown.into_iter().map(|k| format!("unknown key `{k}`")).collect();
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(problems))
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }
}
