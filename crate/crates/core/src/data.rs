//! Synthetic token-sequence classification tasks and their on-disk format.
//!
//! Every task in a family draws from one shared bank of class prototypes
//! (one `[tokens, input_dim]` pattern per class). A task rotates the
//! prototypes by its own angle in each coordinate pair, adds Gaussian noise
//! of its own scale, and may use only the first few classes. Tasks in the
//! same rotation group therefore share class means exactly, while different
//! groups see shifted versions of the same structure.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "LGDS"
//!      4     4  version (u32, currently 1)
//!      8     4  task id (u32)
//!     12     4  number of classes (u32)
//!     16     4  tokens per sample (u32)
//!     20     4  input width (u32)
//!     24     4  train samples N (u32)
//!     28     4  test samples K (u32)
//!     32     8  shuffle seed (u64)
//!     40        N*tokens*width f32 train inputs, then N i32 train labels,
//!               then K*tokens*width f32 test inputs, then K i32 test labels
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{check_magic, put_f32s, put_u32, put_u64, put_usize32, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"LGDS";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 40;

/// How tasks in a family differ from one another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSchedule {
    /// Rotation added per group, in radians.
    pub rotation_step: f64,
    /// Consecutive tasks sharing one rotation angle.
    pub group_size: usize,
    /// Noise standard deviation of the first task in each group.
    pub noise_base: f32,
    /// Extra noise per position within a group.
    pub noise_step: f32,
    /// Per-task class counts, cycled over task ids; empty means all classes.
    pub class_counts: Vec<usize>,
}

impl Default for ShiftSchedule {
    fn default() -> Self {
        Self {
            rotation_step: 0.35,
            group_size: 3,
            noise_base: 1.0,
            noise_step: 0.25,
            class_counts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilySpec {
    pub num_tasks: usize,
    pub base_seed: u64,
    pub num_classes: usize,
    pub tokens: usize,
    pub input_dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Scale of the class prototypes relative to unit noise.
    pub signal_scale: f32,
    pub schedule: ShiftSchedule,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self {
            num_tasks: 12,
            base_seed: 7,
            num_classes: 8,
            tokens: 16,
            input_dim: 16,
            train_size: 512,
            test_size: 256,
            signal_scale: 0.35,
            schedule: ShiftSchedule::default(),
        }
    }
}

impl FamilySpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_tasks < 2 {
            out.push(format!("num_tasks must be at least 2, got {}", self.num_tasks));
        }
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("tokens", self.tokens),
            ("input_dim", self.input_dim),
            ("train_size", self.train_size),
            ("test_size", self.test_size),
            ("schedule.group_size", self.schedule.group_size),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if self.num_classes < 2 {
            out.push("num_classes must be at least 2".into());
        }
        if let Some(&c) = self.schedule.class_counts.iter().find(|&&c| c < 2 || c > self.num_classes) {
            out.push(format!(
                "schedule.class_counts entry {c} must lie in 2..={}",
                self.num_classes
            ));
        }
        if !(self.signal_scale.is_finite() && self.signal_scale > 0.0) {
            out.push("signal_scale must be positive".into());
        }
        if !(self.schedule.noise_base >= 0.0 && self.schedule.noise_step.is_finite()) {
            out.push("schedule.noise_base must be non-negative".into());
        }
        if !self.schedule.rotation_step.is_finite() {
            out.push("schedule.rotation_step must be finite".into());
        }
        out
    }

    /// Parameters of task `task_id` (1-based). Ids past `num_tasks` continue
    /// the schedule, which gives held-out tasks from the same family.
    pub fn task(&self, task_id: u32) -> SyntheticTaskSpec {
        let t = task_id.saturating_sub(1) as usize;
        let s = &self.schedule;
        let group_size = s.group_size.max(1);
        let class_override = (!s.class_counts.is_empty()).then(|| s.class_counts[t % s.class_counts.len()]);
        SyntheticTaskSpec {
            task_id,
            seed: self.base_seed,
            num_classes: self.num_classes,
            tokens_per_sample: self.tokens,
            input_dim: self.input_dim,
            rotation_angle: s.rotation_step * (t / group_size) as f64,
            noise_scale: s.noise_base + s.noise_step * (t % group_size) as f32,
            class_count_override: class_override,
            signal_scale: self.signal_scale,
            train_size: self.train_size,
            test_size: self.test_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_id: u32,
    /// Family seed; fixes the shared prototype bank.
    pub seed: u64,
    pub num_classes: usize,
    pub tokens_per_sample: usize,
    pub input_dim: usize,
    pub rotation_angle: f64,
    pub noise_scale: f32,
    pub class_count_override: Option<usize>,
    pub signal_scale: f32,
    pub train_size: usize,
    pub test_size: usize,
}

impl SyntheticTaskSpec {
    pub fn classes(&self) -> usize {
        self.class_count_override.unwrap_or(self.num_classes)
    }

    /// Class means after rotation, `[classes, tokens * input_dim]`.
    pub fn class_means(&self) -> Vec<Vec<f32>> {
        let width = self.tokens_per_sample * self.input_dim;
        let mut bank_rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (sin, cos) = self.rotation_angle.sin_cos();
        (0..self.num_classes)
            .map(|_| {
                let raw: Vec<f64> = (0..width)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut bank_rng);
                        v * self.signal_scale as f64
                    })
                    .collect();
                let mut out = raw.clone();
                for tok in 0..self.tokens_per_sample {
                    let base = tok * self.input_dim;
                    for pair in 0..self.input_dim / 2 {
                        let (i, j) = (base + 2 * pair, base + 2 * pair + 1);
                        out[i] = cos * raw[i] - sin * raw[j];
                        out[j] = sin * raw[i] + cos * raw[j];
                    }
                }
                out.into_iter().map(|v| v as f32).collect()
            })
            .take(self.classes())
            .collect()
    }

    pub fn generate(&self) -> Result<Dataset> {
        let classes = self.classes();
        if classes < 2 || classes > self.num_classes || self.train_size == 0 || self.test_size == 0 {
            return Err(Error::InvalidConfig(format!("degenerate task spec {self:?}")));
        }
        let means = self.class_means();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (self.task_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let shuffle_seed = rng.random();
        let train = self.split(&means, self.train_size, &mut rng);
        let test = self.split(&means, self.test_size, &mut rng);
        Dataset::new(self.task_id, classes, self.tokens_per_sample, self.input_dim, train, test, shuffle_seed)
    }

    fn split(&self, means: &[Vec<f32>], n: usize, rng: &mut ChaCha8Rng) -> Split {
        let mut labels: Vec<u32> = (0..n).map(|i| (i % means.len()) as u32).collect();
        labels.shuffle(rng);
        let mut inputs = Vec::with_capacity(n * means[0].len());
        for &y in &labels {
            for &m in &means[y as usize] {
                let e: f32 = StandardNormal.sample(rng);
                inputs.push(m + self.noise_scale * e);
            }
        }
        Split { inputs, labels }
    }
}

/// Generates tasks `1..=num_tasks` of the family.
pub fn generate_task_family(spec: &FamilySpec) -> Result<Vec<Dataset>> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems.join("; ")));
    }
    (1..=spec.num_tasks as u32).map(|t| spec.task(t).generate()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Row-major `[n, tokens, input_dim]`.
    pub inputs: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, tokens, input_dim]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub dataset_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: u32,
    pub num_classes: usize,
    pub tokens: usize,
    pub input_dim: usize,
    pub train: Split,
    pub test: Split,
    pub shuffle_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

impl Dataset {
    pub fn new(
        id: u32,
        num_classes: usize,
        tokens: usize,
        input_dim: usize,
        train: Split,
        test: Split,
        shuffle_seed: u64,
    ) -> Result<Self> {
        let ds = Self {
            id,
            num_classes,
            tokens,
            input_dim,
            train,
            test,
            shuffle_seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn sample_width(&self) -> usize {
        self.tokens * self.input_dim
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.tokens == 0 || self.input_dim == 0 {
            return Err(Error::Format("dataset dimensions must be positive".into()));
        }
        for kind in [SplitKind::Train, SplitKind::Test] {
            let s = self.split(kind);
            if s.is_empty() {
                return Err(Error::Format(format!("{} split is empty", kind.name())));
            }
            if s.inputs.len() != s.len() * self.sample_width() {
                return Err(Error::Format(format!(
                    "{} split has {} input values for {} samples of width {}",
                    kind.name(),
                    s.inputs.len(),
                    s.len(),
                    self.sample_width()
                )));
            }
            if let Some((index, &label)) = s.labels.iter().enumerate().find(|(_, &l)| l as usize >= self.num_classes) {
                return Err(Error::LabelRange {
                    split: kind.name(),
                    index,
                    label: label as i64,
                    num_classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    fn batch_from(&self, split: &Split, order: &[usize]) -> Batch {
        let w = self.sample_width();
        let mut inputs = Vec::with_capacity(order.len() * w);
        for &i in order {
            inputs.extend_from_slice(&split.inputs[i * w..(i + 1) * w]);
        }
        Batch {
            inputs: Tensor::from_parts(vec![order.len(), self.tokens, self.input_dim], inputs),
            labels: order.iter().map(|&i| split.labels[i] as usize).collect(),
            dataset_id: self.id as usize,
        }
    }

    /// Shuffled training batches for `epoch`; the order depends only on the
    /// dataset's shuffle seed and the epoch number.
    pub fn train_batches(&self, epoch: usize, batch_size: usize) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        order
            .chunks(batch_size.max(1))
            .map(|c| self.batch_from(&self.train, c))
            .collect()
    }

    /// Batches of `kind` in stored order.
    pub fn ordered_batches(&self, kind: SplitKind, batch_size: usize) -> Vec<Batch> {
        let split = self.split(kind);
        let order: Vec<usize> = (0..split.len()).collect();
        order
            .chunks(batch_size.max(1))
            .map(|c| self.batch_from(split, c))
            .collect()
    }

    pub fn test_batches(&self, batch_size: usize) -> Vec<Batch> {
        self.ordered_batches(SplitKind::Test, batch_size)
    }

    /// Same inputs, labels relabelled with `map`.
    pub fn relabel(&self, num_classes: usize, mut map: impl FnMut(SplitKind, usize, u32) -> u32) -> Result<Self> {
        let mut out = self.clone();
        out.num_classes = num_classes;
        for (i, l) in out.train.labels.iter_mut().enumerate() {
            *l = map(SplitKind::Train, i, *l);
        }
        for (i, l) in out.test.labels.iter_mut().enumerate() {
            *l = map(SplitKind::Test, i, *l);
        }
        out.validate()?;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.train.inputs.len() + self.test.inputs.len()));
        out.extend_from_slice(&DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION);
        put_u32(&mut out, self.id);
        for v in [self.num_classes, self.tokens, self.input_dim, self.train.len(), self.test.len()] {
            put_usize32(&mut out, v)?;
        }
        put_u64(&mut out, self.shuffle_seed);
        for split in [&self.train, &self.test] {
            put_f32s(&mut out, &split.inputs);
            for &l in &split.labels {
                out.extend_from_slice(&(l as i32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                needed: HEADER_LEN,
                found: bytes.len(),
            });
        }
        check_magic(r.bytes(4)?, DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                supported: DATASET_VERSION,
            });
        }
        let id = r.u32()?;
        let num_classes = r.usize32()?;
        let tokens = r.usize32()?;
        let input_dim = r.usize32()?;
        let n_train = r.usize32()?;
        let n_test = r.usize32()?;
        let shuffle_seed = r.u64()?;
        if num_classes == 0 || tokens == 0 || input_dim == 0 || n_train == 0 || n_test == 0 {
            return Err(Error::Format("dataset header has a zero dimension or count".into()));
        }
        let width = tokens * input_dim;
        let needed = [n_train, n_test]
            .iter()
            .try_fold(HEADER_LEN, |acc, &n| acc.checked_add(n.checked_mul(width + 1)?.checked_mul(4)?))
            .ok_or_else(|| Error::Format("dataset header sizes overflow".into()))?;
        if bytes.len() < needed {
            return Err(Error::Truncated {
                needed,
                found: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(Error::Format(format!("{} trailing bytes after dataset", bytes.len() - needed)));
        }
        let mut read_split = |n: usize, kind: SplitKind| -> Result<Split> {
            let inputs = r.f32s(n * width)?;
            let raw = r.i32s(n)?;
            let mut labels = Vec::with_capacity(n);
            for (index, &l) in raw.iter().enumerate() {
                if l < 0 || l as usize >= num_classes {
                    return Err(Error::LabelRange {
                        split: kind.name(),
                        index,
                        label: l as i64,
                        num_classes,
                    });
                }
                labels.push(l as u32);
            }
            Ok(Split { inputs, labels })
        };
        let train = read_split(n_train, SplitKind::Train)?;
        let test = read_split(n_test, SplitKind::Test)?;
        Dataset::new(id, num_classes, tokens, input_dim, train, test, shuffle_seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&read_file(path)?)
}
