//! End-to-end desk run: pretrain, search, extract, expand, and compare a
//! learngene-initialized descendant against a scratch twin.
//!
//! `cargo run --release -p learngene --example desk_pipeline`

use std::time::Instant;

use learngene::data::FamilySpec;
use learngene::dad::RoutingMode;
use learngene::expansion::{plan_expansion, split_into_stages, Priority, Strategy};
use learngene::search::{extract_learngene, infer_dataset_path, selection_overlap_report, tally_usage, ExtractionConfig};
use learngene::training::{pretrain_ans, train_supernet, TrainConfig, REFERENCE_LR_PATTERN};
use learngene::vit::{InputSpec, ModelConfig, VitModel};
use learngene::{compare_with_scratch, expand_to_supernet, generate_task_family, OptimizerConfig};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> learngene::Result<()> {
    let family = FamilySpec {
        tokens: env("TOKENS", 8),
        input_dim: env("INPUT_DIM", 16),
        train_size: env("TRAIN", 256),
        test_size: env("TEST", 256),
        signal_scale: env("SIGNAL", 0.35),
        ..FamilySpec::default()
    };
    let config = ModelConfig {
        embed_dim: env("DIM", 32),
        num_heads: 4,
        mlp_ratio: 2,
        depth: 12,
        input: InputSpec::Tokens {
            tokens: family.tokens,
            input_dim: family.input_dim,
        },
        num_classes: family.num_classes,
        learned_positions: true,
    };
    let opt = if env("ADAM", 1) == 1 { OptimizerConfig::adamw() } else { OptimizerConfig::default() };
    let cache = std::path::PathBuf::from(std::env::var("LG_CACHE").unwrap_or_else(|_| "/tmp/desk.lgne".into()));
    let lg = if cache.exists() {
        learngene::load_learngene(&cache)?
    } else {
        let lg = search_learngene(&family, config, opt)?;
        learngene::save_learngene(&lg, &cache)?;
        lg
    };
    println!("learngene {:?}", lg.indices);
    let depth = env("DES_DEPTH", lg.len() + 1);
    let plan = plan_expansion(&split_into_stages(&lg.indices)?, depth, Strategy::Neighbor, Priority::Reverse)?;
    let mut held_spec = family.task(env("HELD_OUT", 13));
    held_spec.train_size = env("HELD_TRAIN", held_spec.train_size);
    held_spec.test_size = 512;
    let held_out = held_spec.generate()?;
    let ft = TrainConfig {
        lr: env("LR_FT", 1e-3),
        epochs: env("E_FT", 10),
        optimizer: opt,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let report = compare_with_scratch(&lg, &plan, &held_out, &ft, &[0, 1, 2])?;
    let fmt = |c: &[f64]| c.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    for s in &report.seeds {
        println!("seed {} lg      {}", s.seed, fmt(&s.learngene_curve));
        println!("seed {} scratch {}  match {:?}", s.seed, fmt(&s.scratch_curve), s.epochs_to_match);
    }
    let fast = report.seeds.iter().filter(|s| s.matched_within(0.7)).count();
    println!(
        "depth {depth}: mean {:.4} vs {:.4}, fast in {fast}/3 ({:?})",
        report.learngene_mean,
        report.scratch_mean,
        t.elapsed()
    );
    Ok(())
}

fn search_learngene(family: &FamilySpec, config: ModelConfig, opt: OptimizerConfig) -> learngene::Result<learngene::LearngeneLayers> {
    let t = Instant::now();
    let datasets = generate_task_family(&family)?;
    let corpus = generate_task_family(&FamilySpec {
        train_size: env("PRE_TRAIN", 1024),
        ..family.clone()
    })?;
    let mut ans = VitModel::new(config, env("ANS_SEED", 1))?;
    let pre = TrainConfig {
        lr: env("LR_PRE", 1e-3),
        epochs: env("E_PRE", 5),
        optimizer: opt,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let m = pretrain_ans(&mut ans, &corpus, &pre)?;
    println!("pretrain {:?} loss {:?} acc {:.3} in {:?}", pre.epochs, m.train_losses(), m.mean_final_accuracy(), t.elapsed());

    let t = Instant::now();
    let mut sup = expand_to_supernet(&ans, datasets.len(), env("SUP_SEED", 2))?;
    sup.gaussian_noise = env("NOISE", 0) == 1;
    let search = TrainConfig {
        lr: env("LR_SEARCH", 1e-3),
        epochs: env("E_SEARCH", 3),
        optimizer: opt,
        eval_every: 0,
        lr_multipliers: if env("LR_PATTERN", 1) == 1 { REFERENCE_LR_PATTERN.to_vec() } else { Vec::new() },
        ..TrainConfig::default()
    };
    let m = train_supernet(&mut sup, &datasets, &search, RoutingMode::Batch)?;
    println!("search loss {:?} acc {:.3} in {:?}", m.train_losses(), m.mean_final_accuracy(), t.elapsed());

    let mut paths_b = Vec::new();
    let mut paths_i = Vec::new();
    for ds in &datasets {
        let batches: Vec<_> = ds.test_batches(32).into_iter().map(|b| b.inputs).collect();
        paths_b.push(infer_dataset_path(&sup, ds.id as usize, &batches, RoutingMode::Batch)?);
        paths_i.push(infer_dataset_path(&sup, ds.id as usize, &batches, RoutingMode::Img)?);
    }
    for p in &paths_b {
        let f: Vec<String> = p.base_vote_fractions.iter().map(|f| format!("{f:.2}")).collect();
        println!("path {:2} {}", p.dataset_id, f.join(" "));
    }
    let overlap = selection_overlap_report(&paths_b, &paths_i)?;
    println!("mean jaccard {:.3}", overlap.mean_jaccard);
    let tally = tally_usage(&paths_b)?;
    println!("G = {:?}", tally.totals);
    extract_learngene(&sup, &tally, ExtractionConfig { tau: env("TAU", 6) })

}
