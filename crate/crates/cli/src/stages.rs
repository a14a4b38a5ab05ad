//! Pipeline stages. Each reads its inputs from the output directory, writes
//! its artifacts there, and prints one `wrote <path> sha256=<hex>` line per
//! artifact. Metrics logs under `logs/` carry wall-clock times and are the
//! only non-deterministic outputs.

use std::fs;
use std::path::{Path, PathBuf};

use learngene::compare::compare_with_scratch;
use learngene::data::{load_dataset, Dataset, SplitKind};
use learngene::expansion::{instantiate_desnet, plan_expansion, split_into_stages, ExpansionPlan};
use learngene::persistence::{load_learngene, load_model, load_supernet, save_learngene, save_model, save_supernet, storage_report};
use learngene::search::{
    extract_learngene, infer_dataset_path, selection_overlap_report, tally_usage, ExtractionConfig, PathRecord,
};
use learngene::training::{evaluate_full, finetune_desnet, pretrain_ans, train_supernet, Metrics};
use learngene::vit::{ModelConfig, VitModel};
use learngene::{expand_to_supernet, generate_task_family, verify_frozen_base, RoutingMode};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

/// Batch size for path inference; each batch votes once per layer.
const PATH_BATCH: usize = 32;

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn task(&self, id: usize) -> PathBuf {
        self.path(&format!("data/task_{id:02}.lgds"))
    }

    pub fn corpus(&self, id: usize) -> PathBuf {
        self.path(&format!("data/corpus_{id:02}.lgds"))
    }

    pub fn held_out(&self) -> PathBuf {
        self.path("data/held_out.lgds")
    }

    pub fn ans(&self) -> PathBuf {
        self.path("ans.lgck")
    }

    pub fn supernet_init(&self) -> PathBuf {
        self.path("supernet_init.lgck")
    }

    pub fn supernet(&self) -> PathBuf {
        self.path("supernet.lgck")
    }

    pub fn paths(&self, mode: RoutingMode) -> PathBuf {
        match mode {
            RoutingMode::Batch => self.path("paths_batch.json"),
            RoutingMode::Img => self.path("paths_img.json"),
        }
    }

    pub fn tally(&self) -> PathBuf {
        self.path("tally.json")
    }

    pub fn learngene(&self) -> PathBuf {
        self.path("learngene.lgne")
    }

    pub fn plan(&self, depth: usize) -> PathBuf {
        self.path(&format!("plan_d{depth}.json"))
    }

    pub fn desnet(&self, depth: usize) -> PathBuf {
        self.path(&format!("desnet_d{depth}.lgck"))
    }

    pub fn finetuned(&self, depth: usize) -> PathBuf {
        self.path(&format!("finetuned_d{depth}.lgck"))
    }

    pub fn eval(&self) -> PathBuf {
        self.path("eval.json")
    }

    pub fn compare(&self) -> PathBuf {
        self.path("compare.json")
    }

    pub fn compare_csv(&self) -> PathBuf {
        self.path("compare_curves.csv")
    }

    pub fn overlap(&self) -> PathBuf {
        self.path("overlap.json")
    }

    pub fn storage(&self) -> PathBuf {
        self.path("storage.json")
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.path(&format!("logs/{name}.jsonl"))
    }
}

fn require(path: &Path, stage: &'static str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        })
    }
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn announce(path: &Path) -> CliResult<()> {
    let bytes = fs::read(path)?;
    println!("wrote {} sha256={}", path.display(), hex(&Sha256::digest(&bytes)));
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    ensure_parent(path)?;
    fs::write(path, bytes)?;
    announce(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn write_log(path: &Path, metrics: &Metrics) -> CliResult<()> {
    ensure_parent(path)?;
    fs::write(path, metrics.to_jsonl()?)?;
    println!("log {}", path.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_tasks(cfg: &PipelineConfig, path_of: impl Fn(usize) -> PathBuf) -> CliResult<Vec<Dataset>> {
    (1..=cfg.num_datasets())
        .map(|id| {
            let path = path_of(id);
            require(&path, "synth-data")?;
            Ok(load_dataset(&path)?)
        })
        .collect()
}

fn load_held_out(layout: &Layout) -> CliResult<Dataset> {
    let path = layout.held_out();
    require(&path, "synth-data")?;
    Ok(load_dataset(&path)?)
}

fn held_out_classes(cfg: &PipelineConfig) -> usize {
    cfg.family.task(cfg.held_out.task_id).classes()
}

pub fn synth_data(cfg: &PipelineConfig, layout: &Layout) -> CliResult<()> {
    for ds in generate_task_family(&cfg.family)? {
        let path = layout.task(ds.id as usize);
        write_bytes(&path, &ds.to_bytes()?)?;
    }
    for ds in generate_task_family(&cfg.corpus_family())? {
        write_bytes(&layout.corpus(ds.id as usize), &ds.to_bytes()?)?;
    }
    let mut spec = cfg.family.task(cfg.held_out.task_id);
    spec.train_size = cfg.held_out.train_size.unwrap_or(spec.train_size);
    spec.test_size = cfg.held_out.test_size.unwrap_or(spec.test_size);
    write_bytes(&layout.held_out(), &spec.generate()?.to_bytes()?)
}

pub fn pretrain(cfg: &PipelineConfig, layout: &Layout) -> CliResult<()> {
    let datasets = load_tasks(cfg, |id| layout.corpus(id))?;
    let mut ans = VitModel::new(cfg.model_config(), cfg.seed)?;
    let metrics = pretrain_ans(&mut ans, &datasets, &cfg.pretrain.train_config(cfg.seed))?;
    println!("pretrain mean test accuracy {:.4}", metrics.mean_final_accuracy());
    write_log(&layout.log("pretrain"), &metrics)?;
    save_model(&ans, &layout.ans())?;
    announce(&layout.ans())
}

pub fn expand(cfg: &PipelineConfig, layout: &Layout) -> CliResult<()> {
    require(&layout.ans(), "pretrain-ans")?;
    let ans = load_model(&layout.ans())?;
    let mut net = expand_to_supernet(&ans, cfg.num_datasets(), cfg.seed)?;
    net.gaussian_noise = cfg.routing.gaussian_noise;
    save_supernet(&net, &layout.supernet_init())?;
    announce(&layout.supernet_init())
}

pub fn train_search(cfg: &PipelineConfig, layout: &Layout) -> CliResult<()> {
    require(&layout.supernet_init(), "expand")?;
    let datasets = load_tasks(cfg, |id| layout.task(id))?;
    let before = load_supernet(&layout.supernet_init())?;
    let mut net = before.clone();
    let metrics = train_supernet(&mut net, &datasets, &cfg.search.train_config(cfg.seed), cfg.routing.mode)?;
    if !verify_frozen_base(&before, &net)? {
        return Err(CliError::Runtime("base blocks changed during super-network training".into()));
    }
    println!("search mean test accuracy {:.4}", metrics.mean_final_accuracy());
    write_log(&layout.log("search"), &metrics)?;
    save_supernet(&net, &layout.supernet())?;
    announce(&layout.supernet())?;
    for mode in [RoutingMode::Batch, RoutingMode::Img] {
        let paths = datasets
            .iter()
            .map(|ds| {
                let batches: Vec<_> = ds.ordered_batches(SplitKind::Test, PATH_BATCH).into_iter().map(|b| b.inputs).collect();
                infer_dataset_path(&net, ds.id as usize, &batches, mode)
            })
            .collect::<learngene::Result<Vec<_>>>()?;
        write_json(&layout.paths(mode), &paths)?;
    }
    Ok(())
}

pub fn extract(cfg: &PipelineConfig, layout: &Layout) -> CliResult<()> {
    let paths_file = layout.paths(cfg.routing.mode);
    require(&layout.supernet(), "train-search")?;
    require(&paths_file, "train-search")?;
    let net = load_supernet(&layout.supernet())?;
    let paths: Vec<PathRecord> = read_json(&paths_file)?;
    let tally = tally_usage(&paths)?;
    println!("usage G = {:?}", tally.totals);
    write_json(&layout.tally(), &tally)?;
    let lg = extract_learngene(&net, &tally, ExtractionConfig { tau: cfg.tau() })?;
    println!("learngene layers {:?} (tau {})", lg.indices, lg.tau);
    save_learngene(&lg, &layout.learngene())?;
    announce(&layout.learngene())
}

fn plan_for(cfg: &PipelineConfig, indices: &[usize], depth: usize) -> CliResult<ExpansionPlan> {
    let strategy = cfg.strategy().map_err(|e| CliError::Config(vec![e]))?;
    let priority = cfg.priority().map_err(|e| CliError::Config(vec![e]))?;
    Ok(plan_expansion(&split_into_stages(indices)?, depth, strategy, priority)?)
}

fn selected_depths(cfg: &PipelineConfig, depth: Option<usize>) -> Vec<usize> {
    depth.map_or_else(|| cfg.build.target_depths.clone(), |d| vec![d])
}

pub fn build(cfg: &PipelineConfig, layout: &Layout, depth: Option<usize>) -> CliResult<()> {
    require(&layout.learngene(), "extract")?;
    let lg = load_learngene(&layout.learngene())?;
    for depth in selected_depths(cfg, depth) {
        let plan = plan_for(cfg, &lg.indices, depth)?;
        println!("depth {depth}: {:?}", plan.sequence);
        write_json(&layout.plan(depth), &plan)?;
        let net = instantiate_desnet(&lg, &plan, held_out_classes(cfg), cfg.seed)?;
        save_model(&net, &layout.desnet(depth))?;
        announce(&layout.desnet(depth))?;
    }
    Ok(())
}

pub fn finetune(cfg: &PipelineConfig, layout: &Layout, depth: Option<usize>) -> CliResult<()> {
    let depths = selected_depths(cfg, depth);
    for &d in &depths {
        require(&layout.desnet(d), "build")?;
    }
    let held_out = load_held_out(layout)?;
    for depth in depths {
        let mut net = load_model(&layout.desnet(depth))?;
        let metrics = finetune_desnet(&mut net, &held_out, &cfg.finetune.train_config(cfg.seed))?;
        println!("depth {depth}: test accuracy {:.4}", metrics.mean_final_accuracy());
        write_log(&layout.log(&format!("finetune_d{depth}")), &metrics)?;
        save_model(&net, &layout.finetuned(depth))?;
        announce(&layout.finetuned(depth))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    model: String,
    dataset: String,
    loss: f64,
    accuracy: f64,
}

pub fn eval(cfg: &PipelineConfig, layout: &Layout, model: Option<&Path>, dataset: Option<&Path>) -> CliResult<()> {
    let models: Vec<PathBuf> = match model {
        Some(p) => vec![p.to_path_buf()],
        None => cfg.build.target_depths.iter().map(|&d| layout.finetuned(d)).collect(),
    };
    let dataset_path = dataset.map_or_else(|| layout.held_out(), Path::to_path_buf);
    for m in &models {
        require(m, "finetune")?;
    }
    require(&dataset_path, "synth-data")?;
    let ds = load_dataset(&dataset_path)?;
    let mut rows = Vec::new();
    for m in &models {
        let net = load_model(m)?;
        let (loss, accuracy) = evaluate_full(&net, &ds)?;
        println!("{}: loss {loss:.4} accuracy {accuracy:.4}", m.display());
        rows.push(EvalRow {
            model: m.display().to_string(),
            dataset: dataset_path.display().to_string(),
            loss,
            accuracy,
        });
    }
    write_json(&layout.eval(), &rows)
}

pub fn compare(cfg: &PipelineConfig, layout: &Layout, depth: Option<usize>) -> CliResult<()> {
    require(&layout.learngene(), "extract")?;
    let lg = load_learngene(&layout.learngene())?;
    let held_out = load_held_out(layout)?;
    let depth = depth.unwrap_or_else(|| cfg.compare_depth(lg.len()));
    let plan = plan_for(cfg, &lg.indices, depth)?;
    let report = compare_with_scratch(&lg, &plan, &held_out, &cfg.finetune.train_config(cfg.seed), &cfg.compare.seeds)?;
    println!("{:>6}  {:>10}  {:>10}  {:>14}", "seed", "learngene", "scratch", "epochs-to-match");
    for s in &report.seeds {
        let m = s.epochs_to_match.map_or_else(|| "-".to_string(), |e| e.to_string());
        println!("{:>6}  {:>10.4}  {:>10.4}  {:>14}", s.seed, s.learngene_final, s.scratch_final, m);
    }
    println!("{:>6}  {:>10.4}  {:>10.4}", "mean", report.learngene_mean, report.scratch_mean);
    write_json(&layout.compare(), &report)?;
    write_bytes(&layout.compare_csv(), report.to_csv().as_bytes())
}

pub fn report_overlap(layout: &Layout) -> CliResult<()> {
    let batch_file = layout.paths(RoutingMode::Batch);
    let img_file = layout.paths(RoutingMode::Img);
    require(&batch_file, "train-search")?;
    require(&img_file, "train-search")?;
    let batch: Vec<PathRecord> = read_json(&batch_file)?;
    let img: Vec<PathRecord> = read_json(&img_file)?;
    let report = selection_overlap_report(&batch, &img)?;
    println!("{:>7}  {:>7}  {:>30}  {:>30}", "dataset", "jaccard", "batch", "img");
    for r in &report.records {
        println!(
            "{:>7}  {:>7.3}  {:>30}  {:>30}",
            r.dataset_id,
            r.jaccard,
            format!("{:?}", r.set_batch),
            format!("{:?}", r.set_img)
        );
    }
    println!("mean jaccard {:.3}", report.mean_jaccard);
    write_json(&layout.overlap(), &report)
}

/// Accepts `a..b` (inclusive) or a comma-separated list.
pub fn parse_depths(text: &str) -> Result<Vec<usize>, String> {
    let bad = || format!("depths must look like 5..15 or 6,9,12, got {text:?}");
    if let Some((a, b)) = text.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

pub fn report_storage(
    cfg: &PipelineConfig,
    layout: &Layout,
    reference: Option<ModelConfig>,
    learngene_layers: Option<usize>,
    depths: Option<Vec<usize>>,
) -> CliResult<()> {
    let report = match reference {
        Some(config) => {
            let depths = depths.unwrap_or_else(|| (5..=15).collect());
            storage_report(&config, learngene_layers.unwrap_or(5), &depths)?
        }
        None => {
            require(&layout.learngene(), "extract")?;
            let lg = load_learngene(&layout.learngene())?;
            let depths = depths.unwrap_or_else(|| cfg.build.target_depths.clone());
            let config = lg.source_config.with_classes(held_out_classes(cfg));
            storage_report(&config, learngene_layers.unwrap_or(lg.len()), &depths)?
        }
    };
    println!("{report}");
    if reference.is_none() {
        write_json(&layout.storage(), &report)?;
    }
    Ok(())
}
