//! Learngene files, model checkpoints and storage accounting.
//!
//! Both binary formats share one frame (integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic: "LGNE" (learngene) or "LGCK" (checkpoint)
//!      4     4  format version (u32, currently 1)
//!      8     8  payload length P (u64)
//!     16     P  payload
//!   16+P     4  CRC-32 (IEEE) of the payload
//! ```
//!
//! Every payload starts with the model configuration as ten u32 values:
//! embed_dim, num_heads, mlp_ratio, depth, input kind (0 tokens, 1 patches),
//! three input fields (tokens, input_dim, 0 or patch_size, channels,
//! image_size), num_classes, learned_positions (0 or 1).
//!
//! Learngene payload after the configuration:
//!
//! ```text
//! u32 M (datasets searched)   u32 tau
//! u32 L, then L x u32 usage totals G
//! u32 K, then K x u32 layer indices (1-based, increasing)
//! K blocks, each as 12 f32 tensors in this order:
//!   ln1 scale [D], ln1 shift [D], qkv weight [D, 3D], qkv bias [3D],
//!   proj weight [D, D], proj bias [D], ln2 scale [D], ln2 shift [D],
//!   ffn up weight [D, H], ffn up bias [H], ffn down weight [H, D], ffn down bias [D]
//! u32 embedding flag (0 or 1), then if 1:
//!   token weight [input_dim, D], token bias [D], positions [tokens, D] if learned
//! ```
//!
//! Checkpoint payload after the configuration:
//!
//! ```text
//! u32 kind (1 plain model, 2 super-network)
//! kind 2 only: u32 dataset count, u32 adapter noise flag
//! u32 N parameters, then per parameter: u8 trainable, u32 element count, f32 values
//! ```
//!
//! Parameters appear in the model's fixed parameter order. Optimizer state is
//! not stored.

use std::fmt;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Module;
use crate::codec::{check_magic, put_f32s, put_u32, put_u64, put_usize32, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::search::LearngeneLayers;
use crate::supernet::{expand_to_supernet, SuperAnsNet};
use crate::tensor::Tensor;
use crate::vit::{count_parameters, CountScope, Embedding, EncoderBlock, InputSpec, ModelConfig, VitModel};

pub const LEARNGENE_MAGIC: [u8; 4] = *b"LGNE";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LGCK";
pub const FORMAT_VERSION: u32 = 1;
const FRAME_HEADER: usize = 16;

fn frame(magic: [u8; 4], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER + payload.len() + 4);
    out.extend_from_slice(&magic);
    put_u32(&mut out, FORMAT_VERSION);
    put_u64(&mut out, payload.len() as u64);
    out.extend_from_slice(payload);
    put_u32(&mut out, crc32fast::hash(payload));
    out
}

/// Checks the frame and returns the payload. Errors are reported in file
/// order: magic, version, length, checksum.
fn unframe(magic: [u8; 4], bytes: &[u8]) -> Result<&[u8]> {
    let mut r = Reader::new(bytes);
    check_magic(r.bytes(4)?, magic)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("payload length overflows".into()))?;
    let needed = FRAME_HEADER
        .checked_add(len)
        .and_then(|n| n.checked_add(4))
        .ok_or_else(|| Error::Format("payload length overflows".into()))?;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::Format(format!("{} trailing bytes after checksum", bytes.len() - needed)));
    }
    let payload = r.bytes(len)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(payload)
}

fn put_config(out: &mut Vec<u8>, c: &ModelConfig) -> Result<()> {
    let (kind, a, b, d) = match c.input {
        InputSpec::Tokens { tokens, input_dim } => (0, tokens, input_dim, 0),
        InputSpec::Patches {
            patch_size,
            channels,
            image_size,
        } => (1, patch_size, channels, image_size),
    };
    for v in [c.embed_dim, c.num_heads, c.mlp_ratio, c.depth, kind, a, b, d, c.num_classes] {
        put_usize32(out, v)?;
    }
    put_u32(out, u32::from(c.learned_positions));
    Ok(())
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let mut v = [0usize; 9];
    for slot in &mut v {
        *slot = r.usize32()?;
    }
    let input = match v[4] {
        0 => InputSpec::Tokens {
            tokens: v[5],
            input_dim: v[6],
        },
        1 => InputSpec::Patches {
            patch_size: v[5],
            channels: v[6],
            image_size: v[7],
        },
        k => return Err(Error::Format(format!("unknown input kind {k}"))),
    };
    let learned_positions = match r.u32()? {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad position flag {f}"))),
    };
    let config = ModelConfig {
        embed_dim: v[0],
        num_heads: v[1],
        mlp_ratio: v[2],
        depth: v[3],
        input,
        num_classes: v[8],
        learned_positions,
    };
    config.validate().map_err(|e| Error::Format(format!("stored configuration is invalid: {e}")))?;
    Ok(config)
}

fn read_tensor(r: &mut Reader, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), r.f32s(n)?)
}

fn finish(r: &Reader) -> Result<()> {
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} unread payload bytes", r.remaining())));
    }
    Ok(())
}

pub fn learngene_to_bytes(lg: &LearngeneLayers) -> Result<Vec<u8>> {
    lg.validate()?;
    let mut p = Vec::new();
    put_config(&mut p, &lg.source_config)?;
    put_usize32(&mut p, lg.num_datasets)?;
    put_usize32(&mut p, lg.tau)?;
    put_usize32(&mut p, lg.usage.len())?;
    for &g in &lg.usage {
        put_usize32(&mut p, g)?;
    }
    put_usize32(&mut p, lg.indices.len())?;
    for &i in &lg.indices {
        put_usize32(&mut p, i)?;
    }
    for block in &lg.blocks {
        if block.embed_dim() != lg.source_config.embed_dim {
            return Err(Error::ArchitectureMismatch(format!(
                "block width {} vs configured {}",
                block.embed_dim(),
                lg.source_config.embed_dim
            )));
        }
        for param in block.parameters() {
            put_f32s(&mut p, param.value().data());
        }
    }
    put_u32(&mut p, u32::from(lg.embedding.is_some()));
    if let Some(embedding) = &lg.embedding {
        let template = Embedding::new(&lg.source_config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let shapes: Vec<&[usize]> = template.parameters().iter().map(|p| p.shape()).collect::<Vec<_>>();
        let params = embedding.parameters();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != *s) {
            return Err(Error::ArchitectureMismatch("embedding does not match the source configuration".into()));
        }
        for param in params {
            put_f32s(&mut p, param.value().data());
        }
    }
    Ok(frame(LEARNGENE_MAGIC, &p))
}

/// A checksummed payload that runs short is malformed, not truncated.
fn payload_error(e: Error) -> Error {
    match e {
        Error::Truncated { needed, found } => Error::Format(format!("payload needs {needed} bytes, has {found}")),
        other => other,
    }
}

pub fn learngene_from_bytes(bytes: &[u8]) -> Result<LearngeneLayers> {
    let payload = unframe(LEARNGENE_MAGIC, bytes)?;
    learngene_from_payload(payload).map_err(payload_error)
}

fn learngene_from_payload(payload: &[u8]) -> Result<LearngeneLayers> {
    let mut r = Reader::new(payload);
    let source_config = read_config(&mut r)?;
    let num_datasets = r.usize32()?;
    let tau = r.usize32()?;
    let l = r.usize32()?;
    let usage = (0..l).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
    let k = r.usize32()?;
    if k.saturating_mul(4) > r.remaining() {
        return Err(Error::Format(format!("index count {k} exceeds payload")));
    }
    let indices = (0..k).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
    let template = EncoderBlock::new(&source_config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
    let shapes: Vec<Vec<usize>> = template.parameters().iter().map(|p| p.shape().to_vec()).collect();
    let mut blocks = Vec::with_capacity(k);
    for _ in 0..k {
        let tensors = shapes.iter().map(|s| read_tensor(&mut r, s)).collect::<Result<Vec<_>>>()?;
        blocks.push(EncoderBlock::from_tensors(&source_config, tensors)?);
    }
    let embedding = match r.u32()? {
        0 => None,
        1 => {
            let mut embedding = Embedding::new(&source_config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
            for param in embedding.parameters_mut() {
                let shape = param.shape().to_vec();
                param.set_value(read_tensor(&mut r, &shape)?)?;
            }
            Some(embedding)
        }
        f => return Err(Error::Format(format!("bad embedding flag {f}"))),
    };
    finish(&r)?;
    let lg = LearngeneLayers {
        indices,
        blocks,
        embedding,
        source_config,
        num_datasets,
        tau,
        usage,
    };
    lg.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(lg)
}

pub fn save_learngene(lg: &LearngeneLayers, path: &Path) -> Result<()> {
    write_file(path, &learngene_to_bytes(lg)?)
}

pub fn load_learngene(path: &Path) -> Result<LearngeneLayers> {
    learngene_from_bytes(&read_file(path)?)
}

const KIND_MODEL: u32 = 1;
const KIND_SUPERNET: u32 = 2;

fn put_params<M: Module>(out: &mut Vec<u8>, m: &M) -> Result<()> {
    let params = m.parameters();
    put_usize32(out, params.len())?;
    for p in params {
        out.push(u8::from(p.trainable()));
        put_usize32(out, p.numel())?;
        put_f32s(out, p.value().data());
    }
    Ok(())
}

fn read_params<M: Module>(r: &mut Reader, m: &mut M) -> Result<()> {
    let n = r.usize32()?;
    let mut params = m.parameters_mut();
    if n != params.len() {
        return Err(Error::Format(format!("{n} stored parameters, model has {}", params.len())));
    }
    for p in params.iter_mut() {
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("bad trainable flag {f}"))),
        };
        let numel = r.usize32()?;
        if numel != p.numel() {
            return Err(Error::Format(format!("parameter of {} values stored with {numel}", p.numel())));
        }
        let shape = p.shape().to_vec();
        p.set_value(read_tensor(r, &shape)?)?;
        p.set_trainable(trainable);
    }
    Ok(())
}

pub fn model_to_bytes(net: &VitModel) -> Result<Vec<u8>> {
    let mut p = Vec::new();
    put_config(&mut p, &net.config)?;
    put_u32(&mut p, KIND_MODEL);
    put_params(&mut p, net)?;
    Ok(frame(CHECKPOINT_MAGIC, &p))
}

pub fn supernet_to_bytes(net: &SuperAnsNet) -> Result<Vec<u8>> {
    let mut p = Vec::new();
    put_config(&mut p, &net.config)?;
    put_u32(&mut p, KIND_SUPERNET);
    put_usize32(&mut p, net.num_datasets())?;
    put_u32(&mut p, u32::from(net.gaussian_noise));
    put_params(&mut p, net)?;
    Ok(frame(CHECKPOINT_MAGIC, &p))
}

fn checkpoint_reader(payload: &[u8], want: u32) -> Result<(Reader<'_>, ModelConfig)> {
    let mut r = Reader::new(payload);
    let config = read_config(&mut r)?;
    let kind = r.u32()?;
    if kind != want {
        return Err(Error::Format(format!("checkpoint holds kind {kind}, expected {want}")));
    }
    Ok((r, config))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<VitModel> {
    let payload = unframe(CHECKPOINT_MAGIC, bytes)?;
    model_from_payload(payload).map_err(payload_error)
}

fn model_from_payload(payload: &[u8]) -> Result<VitModel> {
    let (mut r, config) = checkpoint_reader(payload, KIND_MODEL)?;
    let mut net = VitModel::new(config, 0)?;
    read_params(&mut r, &mut net)?;
    finish(&r)?;
    Ok(net)
}

pub fn supernet_from_bytes(bytes: &[u8]) -> Result<SuperAnsNet> {
    let payload = unframe(CHECKPOINT_MAGIC, bytes)?;
    supernet_from_payload(payload).map_err(payload_error)
}

fn supernet_from_payload(payload: &[u8]) -> Result<SuperAnsNet> {
    let (mut r, config) = checkpoint_reader(payload, KIND_SUPERNET)?;
    let m = r.usize32()?;
    let noise = r.u32()? != 0;
    let mut net = expand_to_supernet(&VitModel::new(config, 0)?, m, 0)?;
    net.gaussian_noise = noise;
    read_params(&mut r, &mut net)?;
    finish(&r)?;
    Ok(net)
}

pub fn save_model(net: &VitModel, path: &Path) -> Result<()> {
    write_file(path, &model_to_bytes(net)?)
}

pub fn load_model(path: &Path) -> Result<VitModel> {
    model_from_bytes(&read_file(path)?)
}

pub fn save_supernet(net: &SuperAnsNet, path: &Path) -> Result<()> {
    write_file(path, &supernet_to_bytes(net)?)
}

pub fn load_supernet(path: &Path) -> Result<SuperAnsNet> {
    supernet_from_bytes(&read_file(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesNetRow {
    pub depth: usize,
    pub params: u64,
}

/// Parameter accounting for storing learngene layers instead of one
/// pretrained descendant per depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub config: ModelConfig,
    pub block_params: u64,
    pub learngene_layers: usize,
    /// Extracted blocks only.
    pub learngene_params: u64,
    pub learngene_bytes: u64,
    /// A complete model at learngene depth: the blocks plus embedding and head.
    pub learngene_model_params: u64,
    pub desnets: Vec<DesNetRow>,
    pub total_desnet_params: u64,
    /// `1 - learngene_params / total`.
    pub saving_blocks_only: f64,
    /// `1 - learngene_model_params / total`.
    pub saving: f64,
}

pub fn storage_report(config: &ModelConfig, learngene_layers: usize, depths: &[usize]) -> Result<StorageReport> {
    if depths.is_empty() {
        return Err(Error::Empty("descendant depth list"));
    }
    if learngene_layers == 0 {
        return Err(Error::Empty("learngene layers"));
    }
    config.validate()?;
    let block_params = count_parameters(config, CountScope::Block);
    let learngene_params = learngene_layers as u64 * block_params;
    let learngene_model_params = count_parameters(&config.with_depth(learngene_layers), CountScope::FullModel);
    let desnets: Vec<DesNetRow> = depths
        .iter()
        .map(|&depth| {
            if depth == 0 {
                return Err(Error::InvalidConfig("descendant depth must be at least 1".into()));
            }
            Ok(DesNetRow {
                depth,
                params: count_parameters(&config.with_depth(depth), CountScope::FullModel),
            })
        })
        .collect::<Result<_>>()?;
    let total: u64 = desnets.iter().map(|r| r.params).sum();
    Ok(StorageReport {
        config: *config,
        block_params,
        learngene_layers,
        learngene_params,
        learngene_bytes: learngene_params * 4,
        learngene_model_params,
        desnets,
        total_desnet_params: total,
        saving_blocks_only: 1.0 - learngene_params as f64 / total as f64,
        saving: 1.0 - learngene_model_params as f64 / total as f64,
    })
}

fn millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

impl fmt::Display for StorageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6}  {:>10}  {:>8}", "layers", "params", "delta")?;
        let mut prev: Option<u64> = None;
        for row in &self.desnets {
            let delta = prev.map_or_else(|| "-".to_string(), |p| millions(row.params.saturating_sub(p)));
            writeln!(f, "{:>6}  {:>10}  {:>8}", row.depth, millions(row.params), delta)?;
            prev = Some(row.params);
        }
        writeln!(f, "per-layer params: {}", millions(self.block_params))?;
        writeln!(
            f,
            "learngene: {} layers, {} in blocks, {} as a model",
            self.learngene_layers,
            millions(self.learngene_params),
            millions(self.learngene_model_params)
        )?;
        writeln!(f, "descendants total: {}", millions(self.total_desnet_params))?;
        writeln!(f, "saving (blocks only): {:.2}%", 100.0 * self.saving_blocks_only)?;
        write!(f, "saving {:.2}%", 100.0 * self.saving)
    }
}
