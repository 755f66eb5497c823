//! Model bundle: architecture config + all learnable parameters + class
//! labels, with a versioned binary serialization and the graph assembly
//! used by training, prediction and benchmarking.
//!
//! Serialized layout (all integers little-endian):
//!
//! ```text
//! magic    "DAMB" (4 bytes)
//! version  u32 (currently 1)
//! backbone u32×9: input_height, input_width, input_channels,
//!          stage_kernel_counts[4], kernel_size, attention_hidden
//!          u8: attention_mlp_bias
//! recurrent u32×4: layers, hidden, input_size, sequence_length
//!          u8: bidirectional, u8: cell_bias
//! labels   u32 count, then per label u32 byte length + UTF-8 bytes
//! tensors  u32 count, then per tensor u32 rank, rank×u32 dims,
//!          numel×f32 values — in fixed declaration order (conv kernels,
//!          attention blocks, GRU cells layer-major fwd-then-bwd,
//!          classifier)
//! ```

use crate::backbone::{
    backbone_forward, build_backbone, insert_backbone_params, BackboneConfig, BackboneNodes,
    BackboneParams,
};
use crate::data::temp_sibling;
use crate::error::{Error, Result};
use crate::recurrent::{
    classify, insert_stack_params, stack_forward, RecurrentConfig, StackNodes, StackParams,
};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};
use std::io::{Read, Write};
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 4] = b"DAMB";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub recurrent: RecurrentConfig,
    pub labels: Vec<String>,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, recurrent: RecurrentConfig, labels: Vec<String>) -> Self {
        ModelConfig {
            backbone,
            recurrent,
            labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.recurrent.validate()?;
        if self.recurrent.input_size != self.backbone.feature_len() {
            return Err(Error::config(format!(
                "recurrent input_size {} must equal the backbone feature length {}",
                self.recurrent.input_size,
                self.backbone.feature_len()
            )));
        }
        if self.labels.len() < 2 {
            return Err(Error::config("a model needs at least 2 class labels"));
        }
        let mut sorted = self.labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.labels.len() {
            return Err(Error::config("class labels must be unique"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }
}

/// All learnable tensors of the network.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub backbone: BackboneParams<T>,
    pub stack: StackParams<T>,
}

impl<T: Real> ModelParams<T> {
    /// Every tensor in canonical declaration order (the serialization and
    /// optimizer-state order).
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.backbone.tensors();
        v.extend(self.stack.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.backbone.tensors_mut();
        v.extend(self.stack.tensors_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            backbone: self.backbone.cast(),
            stack: self.stack.cast(),
        }
    }
}

/// Config + parameters + labels; the unit of serialization. Training math
/// runs in f32.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
}

/// Build a freshly initialized model, deterministically from the seed.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let backbone = build_backbone::<f32>(&config.backbone, seed)?;
    // separate stream so backbone init is independent of the stack shape
    let mut stack_rng = Rng::new(seed ^ 0x5eed_0f_57ac4);
    let stack = StackParams::init(&config.recurrent, config.num_classes(), &mut stack_rng);
    Ok(ModelBundle {
        config,
        params: ModelParams { backbone, stack },
    })
}

fn zeroed_params(config: &ModelConfig) -> Result<ModelParams<f32>> {
    let mut bundle = build_model(config.clone(), 0)?;
    for t in bundle.params.tensors_mut() {
        t.fill(0.0);
    }
    Ok(bundle.params)
}

// ── serialization ────────────────────────────────────────────────────

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize to bytes in the documented layout.
pub fn model_to_bytes(bundle: &ModelBundle) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    push_u32(&mut buf, MODEL_VERSION);

    let b = &bundle.config.backbone;
    for v in [
        b.input_height,
        b.input_width,
        b.input_channels,
        b.stage_kernel_counts[0],
        b.stage_kernel_counts[1],
        b.stage_kernel_counts[2],
        b.stage_kernel_counts[3],
        b.kernel_size,
        b.attention_hidden,
    ] {
        push_u32(&mut buf, v as u32);
    }
    buf.push(b.attention_mlp_bias as u8);

    let r = &bundle.config.recurrent;
    for v in [r.layers, r.hidden, r.input_size, r.sequence_length] {
        push_u32(&mut buf, v as u32);
    }
    buf.push(r.bidirectional as u8);
    buf.push(r.cell_bias as u8);

    push_u32(&mut buf, bundle.config.labels.len() as u32);
    for label in &bundle.config.labels {
        push_u32(&mut buf, label.len() as u32);
        buf.extend_from_slice(label.as_bytes());
    }

    let tensors = bundle.params.tensors();
    push_u32(&mut buf, tensors.len() as u32);
    for t in tensors {
        push_u32(&mut buf, t.rank() as u32);
        for &d in t.shape() {
            push_u32(&mut buf, d as u32);
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Write atomically (temp file + rename).
pub fn save_model(bundle: &ModelBundle, path: &Path) -> Result<()> {
    bundle.config.validate()?;
    let bytes = model_to_bytes(bundle);
    let tmp = temp_sibling(path);
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

const CONTEXT: &str = "model file";

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                context: CONTEXT,
                detail: format!("{what}: needed {n} bytes at offset {}", self.pos),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn byte_flag(&mut self, what: &str) -> Result<bool> {
        Ok(self.take(1, what)?[0] != 0)
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::BadMagic {
            context: CONTEXT,
            expected: "DAMB",
        });
    }
    let version = cur.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            context: CONTEXT,
            found: version,
            supported: MODEL_VERSION,
        });
    }

    let backbone = BackboneConfig {
        input_height: cur.usize("input_height")?,
        input_width: cur.usize("input_width")?,
        input_channels: cur.usize("input_channels")?,
        stage_kernel_counts: [
            cur.usize("stage counts")?,
            cur.usize("stage counts")?,
            cur.usize("stage counts")?,
            cur.usize("stage counts")?,
        ],
        kernel_size: cur.usize("kernel_size")?,
        attention_hidden: cur.usize("attention_hidden")?,
        attention_mlp_bias: cur.byte_flag("attention_mlp_bias")?,
    };
    let recurrent = RecurrentConfig {
        layers: cur.usize("layers")?,
        hidden: cur.usize("hidden")?,
        input_size: cur.usize("input_size")?,
        sequence_length: cur.usize("sequence_length")?,
        bidirectional: cur.byte_flag("bidirectional")?,
        cell_bias: cur.byte_flag("cell_bias")?,
    };
    let label_count = cur.usize("label count")?;
    let mut labels = Vec::with_capacity(label_count);
    for _ in 0..label_count {
        let len = cur.usize("label length")?;
        let raw = cur.take(len, "label bytes")?;
        labels.push(String::from_utf8(raw.to_vec()).map_err(|_| Error::Corrupt {
            context: CONTEXT,
            detail: "label is not valid UTF-8".into(),
        })?);
    }
    let config = ModelConfig {
        backbone,
        recurrent,
        labels,
    };
    config.validate().map_err(|e| Error::Corrupt {
        context: CONTEXT,
        detail: format!("invalid embedded config: {e}"),
    })?;

    let mut params = zeroed_params(&config)?;
    let mut slots = params.tensors_mut();
    let tensor_count = cur.usize("tensor count")?;
    if tensor_count != slots.len() {
        return Err(Error::Corrupt {
            context: CONTEXT,
            detail: format!(
                "tensor count {tensor_count} does not match the {} the config implies",
                slots.len()
            ),
        });
    }
    for slot in &mut slots {
        let rank = cur.usize("tensor rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.usize("tensor dim")?);
        }
        if shape != slot.shape() {
            return Err(Error::Corrupt {
                context: CONTEXT,
                detail: format!(
                    "tensor shape {shape:?} does not match expected {:?}",
                    slot.shape()
                ),
            });
        }
        let raw = cur.take(4 * slot.numel(), "tensor values")?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt {
            context: CONTEXT,
            detail: format!("{} trailing bytes after parameters", bytes.len() - cur.pos),
        });
    }
    Ok(ModelBundle { config, params })
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

// ── graph assembly ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub backbone: BackboneNodes,
    pub stack: StackNodes,
}

impl ModelNodes {
    /// Leaf ids in the same order as `ModelParams::tensors`.
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        ids.extend(&self.backbone.conv_kernels);
        for block in &self.backbone.attention_blocks {
            ids.push(block.fc1);
            ids.extend(block.fc1_bias);
            ids.push(block.fc2);
            ids.extend(block.fc2_bias);
            ids.push(block.spatial_kernel);
        }
        for layer in &self.stack.cells {
            for cell in layer {
                ids.push(cell.w_r);
                ids.push(cell.u_r);
                ids.extend(cell.b_r);
                ids.push(cell.w_mu);
                ids.push(cell.u_mu);
                ids.extend(cell.b_mu);
                ids.push(cell.w_cand);
                ids.push(cell.u_cand);
                ids.extend(cell.b_cand);
            }
        }
        ids.push(self.stack.classifier);
        ids
    }
}

pub fn insert_model_params<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>) -> ModelNodes {
    ModelNodes {
        backbone: insert_backbone_params(tape, &params.backbone),
        stack: insert_stack_params(tape, &params.stack),
    }
}

/// Forward one window (`sequence_length` frames) to class probabilities.
pub fn window_forward<T: Real>(
    tape: &mut Tape<T>,
    frames: &[Tensor<T>],
    nodes: &ModelNodes,
    config: &ModelConfig,
) -> Result<NodeId> {
    let mut features = Vec::with_capacity(frames.len());
    for frame in frames {
        let leaf = tape.leaf(frame.clone());
        let fwd = backbone_forward(tape, leaf, &nodes.backbone, &config.backbone)?;
        features.push(fwd.feature);
    }
    let representation = stack_forward(tape, &features, &nodes.stack, &config.recurrent)?;
    classify(tape, representation, nodes.stack.classifier)
}

/// Probabilities for one window on a private tape.
pub fn predict_window<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    frames: &[Tensor<T>],
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let nodes = insert_model_params(&mut tape, params);
    let probs = window_forward(&mut tape, frames, &nodes, config)?;
    Ok(tape.value(probs).data().to_vec())
}

/// Whole-clip probabilities: the mean of the per-window distributions.
pub fn predict_clip<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    windows: &[Vec<Tensor<T>>],
) -> Result<Vec<T>> {
    if windows.is_empty() {
        return Err(Error::data("predict_clip: clip has no windows"));
    }
    let k = config.num_classes();
    let mut mean = vec![T::zero(); k];
    for window in windows {
        let probs = predict_window(params, config, window)?;
        for (m, p) in mean.iter_mut().zip(&probs) {
            *m = *m + *p;
        }
    }
    let n = T::from_f64(windows.len() as f64);
    for m in &mut mean {
        *m = *m / n;
    }
    Ok(mean)
}

/// First index of the largest entry (deterministic tie-break).
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
