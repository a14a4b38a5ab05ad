//! Learngene search across multiple datasets.
//!
//! A trained transformer is expanded into a super-network in which every
//! layer holds a frozen base block, a trainable dataset-specific copy and a
//! two-way dataset adapter. Training the super-network on several datasets
//! yields one routing path per dataset; base blocks used by most paths are
//! extracted as learngene layers and expanded into descendant networks of
//! any depth.

pub mod autodiff;
mod codec;
pub mod compare;
pub mod dad;
pub mod data;
pub mod error;
pub mod expansion;
pub mod optim;
pub mod persistence;
pub mod search;
pub mod supernet;
pub mod tensor;
pub mod training;
pub mod vit;

pub use autodiff::{backward_gradients, Gradients, Module, ParamId, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use optim::{optimizer_step, OptimizerConfig};
pub use tensor::{softmax_rows, softplus_apply, Tensor};
pub use vit::{count_parameters, model_forward, AnsNet, CountScope, DesNet, InputSpec, ModelConfig, VitModel};
pub use dad::{route_per_sample, route_probabilities, select_batch_majority, BlockTag, DadWeights, RoutingDecision, RoutingMode};
pub use supernet::{expand_to_supernet, supernet_forward, verify_frozen_base, RouteOptions, SuperAnsNet, SuperLayer};
pub use search::{
    extract_learngene, infer_dataset_path, selection_overlap_report, tally_usage, ExtractionConfig, LearngeneLayers, OverlapReport,
    PathRecord, UsageTally,
};
pub use expansion::{
    instantiate_desnet, plan_expansion, random_desnet, split_into_stages, ExpansionPlan, Priority, StagePlan, StagePosition, Strategy,
};
pub use data::{generate_task_family, load_dataset, Batch, Dataset, FamilySpec, ShiftSchedule, SplitKind, SyntheticTaskSpec};
pub use training::{
    evaluate, evaluate_supernet, finetune_desnet, poly_lr, pretrain_ans, train_supernet, EpochRecord, Metrics, TrainConfig,
};
pub use persistence::{
    load_learngene, load_model, load_supernet, save_learngene, save_model, save_supernet, storage_report, StorageReport,
};
pub use compare::{compare_with_scratch, ComparisonReport, SeedComparison};
