//! Growing learngene layers into descendant networks of a chosen depth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Module;
use crate::error::{Error, Result};
use crate::search::LearngeneLayers;
use crate::vit::{DesNet, VitModel};

/// Maximal runs of consecutive learngene indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Vec<usize>>,
}

impl StagePlan {
    pub fn num_layers(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.stages.concat()
    }
}

pub fn split_into_stages(indices: &[usize]) -> Result<StagePlan> {
    if indices.is_empty() {
        return Err(Error::Empty("learngene indices"));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!(
            "learngene indices must be strictly increasing, got {indices:?}"
        )));
    }
    let mut stages: Vec<Vec<usize>> = Vec::new();
    for &i in indices {
        match stages.last_mut() {
            Some(stage) if stage.last() == Some(&(i - 1)) => stage.push(i),
            _ => stages.push(vec![i]),
        }
    }
    Ok(StagePlan { stages })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Repeat the stage's last layer.
    #[default]
    Neighbor,
    /// Replay the stage's layers in order.
    Cyclic,
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "neighbor" => Ok(Strategy::Neighbor),
            "cyclic" => Ok(Strategy::Cyclic),
            other => Err(format!("unknown expansion strategy {other:?} (expected neighbor or cyclic)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StagePosition {
    First,
    Middle,
    Last,
}

/// Order in which stages receive extra layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    /// Every stage, from the last to the first.
    #[default]
    Reverse,
    /// Named positions, e.g. last then middle. With three stages these are the
    /// stages themselves; `Middle` is stage `(n - 1) / 2` in general.
    Positions(Vec<StagePosition>),
    /// Explicit 0-based stage numbers.
    Stages(Vec<usize>),
}

impl Priority {
    /// Resolves to distinct 0-based stage numbers in visiting order.
    pub fn resolve(&self, num_stages: usize) -> Result<Vec<usize>> {
        let raw: Vec<usize> = match self {
            Priority::Reverse => (0..num_stages).rev().collect(),
            Priority::Positions(ps) => ps
                .iter()
                .map(|p| match p {
                    StagePosition::First => 0,
                    StagePosition::Middle => (num_stages - 1) / 2,
                    StagePosition::Last => num_stages - 1,
                })
                .collect(),
            Priority::Stages(s) => s.clone(),
        };
        let mut order = Vec::with_capacity(raw.len());
        for s in raw {
            if s >= num_stages {
                return Err(Error::InvalidConfig(format!(
                    "priority names stage {s} but there are only {num_stages} stages"
                )));
            }
            if !order.contains(&s) {
                order.push(s);
            }
        }
        Ok(order)
    }
}

impl FromStr for Priority {
    type Err = String;

    /// Accepts `reverse`, `last-middle-first`-style position lists, or
    /// comma-separated 0-based stage numbers.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        if s == "reverse" {
            return Ok(Priority::Reverse);
        }
        if s.chars().all(|c| c.is_ascii_digit() || c == ',' || c == ' ') {
            return s
                .split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad stage number {p:?}: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Priority::Stages);
        }
        s.trim_end_matches("-priority")
            .split('-')
            .map(|p| match p {
                "first" => Ok(StagePosition::First),
                "middle" => Ok(StagePosition::Middle),
                "last" => Ok(StagePosition::Last),
                other => Err(format!("unknown stage position {other:?}")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Priority::Positions)
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Priority::Reverse => write!(f, "reverse"),
            Priority::Positions(ps) => {
                let names: Vec<&str> = ps
                    .iter()
                    .map(|p| match p {
                        StagePosition::First => "first",
                        StagePosition::Middle => "middle",
                        StagePosition::Last => "last",
                    })
                    .collect();
                write!(f, "{}", names.join("-"))
            }
            Priority::Stages(s) => {
                let parts: Vec<String> = s.iter().map(usize::to_string).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub stages: Vec<Vec<usize>>,
    pub strategy: Strategy,
    pub priority: Priority,
    /// Resolved 0-based stage visiting order.
    pub stage_order: Vec<usize>,
    pub extras_per_stage: Vec<usize>,
    pub target_depth: usize,
    /// Learngene index for every block of the descendant network.
    pub sequence: Vec<usize>,
}

/// Hands extra layers to stages round-robin in priority order and lays out
/// the resulting block sequence.
pub fn plan_expansion(plan: &StagePlan, target_depth: usize, strategy: Strategy, priority: Priority) -> Result<ExpansionPlan> {
    let count = plan.num_layers();
    if count == 0 {
        return Err(Error::Empty("stage plan"));
    }
    if target_depth < count {
        return Err(Error::DepthTooSmall {
            target: target_depth,
            count,
        });
    }
    let order = priority.resolve(plan.stages.len())?;
    let extras = target_depth - count;
    if extras > 0 && order.is_empty() {
        return Err(Error::InvalidConfig("priority selects no stage to expand".into()));
    }
    let mut extras_per_stage = vec![0; plan.stages.len()];
    for k in 0..extras {
        extras_per_stage[order[k % order.len()]] += 1;
    }
    let mut sequence = Vec::with_capacity(target_depth);
    for (stage, &extra) in plan.stages.iter().zip(&extras_per_stage) {
        sequence.extend_from_slice(stage);
        for k in 0..extra {
            sequence.push(match strategy {
                Strategy::Neighbor => *stage.last().expect("stages are non-empty"),
                Strategy::Cyclic => stage[k % stage.len()],
            });
        }
    }
    Ok(ExpansionPlan {
        stages: plan.stages.clone(),
        strategy,
        priority,
        stage_order: order,
        extras_per_stage,
        target_depth,
        sequence,
    })
}

/// Builds a trainable descendant network: blocks are independent copies of
/// the learngene layers named by the plan, the embedding is the learngene's
/// (fresh from `seed` if it has none) and the head is fresh from `seed`.
pub fn instantiate_desnet(lg: &LearngeneLayers, plan: &ExpansionPlan, num_classes: usize, seed: u64) -> Result<DesNet> {
    lg.validate()?;
    let config = lg.source_config.with_depth(plan.target_depth).with_classes(num_classes);
    let mut net = VitModel::new(config, seed)?;
    let blocks = plan
        .sequence
        .iter()
        .map(|&i| lg.block(i).cloned().ok_or(Error::MissingLearngeneLayer(i)))
        .collect::<Result<Vec<_>>>()?;
    net.blocks = blocks;
    if let Some(embedding) = &lg.embedding {
        net.embedding = embedding.clone();
    }
    net.set_trainable(true);
    Ok(net)
}

/// The scratch baseline: same shape as [`instantiate_desnet`] would build,
/// every parameter random. The head matches the learngene twin's.
pub fn random_desnet(lg: &LearngeneLayers, target_depth: usize, num_classes: usize, seed: u64) -> Result<DesNet> {
    VitModel::new(lg.source_config.with_depth(target_depth).with_classes(num_classes), seed)
}
