//! Frame feature extractor: four (conv, conv, maxpool, dual-attention)
//! stages followed by global average pooling, flattening each frame to a
//! 64-value vector.

use crate::attention::{
    dual_attention, insert_attention_params, AttentionBlockParams, AttentionParamNodes,
    DualAttentionNodes,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{ActivationKind, NodeId, PoolMode, Tape};
use crate::tensor::{glorot_uniform, Real, Tensor};

pub const STAGES: usize = 4;
pub const CONV_LAYERS: usize = 8;

/// Architecture constants of the backbone. `stage_kernel_counts` is carried
/// explicitly but pinned to 16/32/32/64; input extents must survive four 2×
/// pools, so both must be divisible by 16.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub stage_kernel_counts: [usize; STAGES],
    pub kernel_size: usize,
    pub attention_hidden: usize,
    pub attention_mlp_bias: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_height: 64,
            input_width: 64,
            input_channels: 3,
            stage_kernel_counts: [16, 32, 32, 64],
            kernel_size: 3,
            attention_hidden: 128,
            attention_mlp_bias: false,
        }
    }
}

impl BackboneConfig {
    pub fn with_input(height: usize, width: usize) -> Self {
        BackboneConfig {
            input_height: height,
            input_width: width,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 3 {
            return Err(Error::config(format!(
                "input_channels must be 3, got {}",
                self.input_channels
            )));
        }
        if self.kernel_size != 3 {
            return Err(Error::config(format!(
                "kernel_size must be 3, got {}",
                self.kernel_size
            )));
        }
        if self.stage_kernel_counts != [16, 32, 32, 64] {
            return Err(Error::config(format!(
                "stage kernel counts must be [16, 32, 32, 64], got {:?}",
                self.stage_kernel_counts
            )));
        }
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % 16 != 0
            || self.input_width % 16 != 0
        {
            return Err(Error::config(format!(
                "input {}×{} must be divisible by 16 (four 2× pools)",
                self.input_height, self.input_width
            )));
        }
        if self.attention_hidden == 0 {
            return Err(Error::config("attention_hidden must be positive"));
        }
        Ok(())
    }

    /// (Cin, Cout) for the eight conv layers; each stage runs two convs at
    /// its kernel count, with Cin derived from the previous layer's output.
    pub fn conv_channel_chain(&self) -> [(usize, usize); CONV_LAYERS] {
        let mut chain = [(0, 0); CONV_LAYERS];
        let mut cin = self.input_channels;
        for (s, &count) in self.stage_kernel_counts.iter().enumerate() {
            chain[2 * s] = (cin, count);
            chain[2 * s + 1] = (count, count);
            cin = count;
        }
        chain
    }

    /// Length of the per-frame feature vector (the last stage's channels).
    pub fn feature_len(&self) -> usize {
        self.stage_kernel_counts[STAGES - 1]
    }
}

/// Learnable backbone weights: eight 3×3 conv kernel tensors and four
/// attention blocks.
#[derive(Clone, Debug)]
pub struct BackboneParams<T> {
    pub conv_kernels: Vec<Tensor<T>>,
    pub attention_blocks: Vec<AttentionBlockParams<T>>,
}

impl<T: Real> BackboneParams<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.conv_kernels.iter().collect();
        for block in &self.attention_blocks {
            v.extend(block.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.conv_kernels.iter_mut().collect();
        for block in &mut self.attention_blocks {
            v.extend(block.tensors_mut());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> BackboneParams<U> {
        BackboneParams {
            conv_kernels: self.conv_kernels.iter().map(|t| t.cast()).collect(),
            attention_blocks: self.attention_blocks.iter().map(|b| b.cast()).collect(),
        }
    }
}

/// Allocate and initialize backbone weights (fan-scaled uniform),
/// deterministically from the seed.
pub fn build_backbone<T: Real>(config: &BackboneConfig, seed: u64) -> Result<BackboneParams<T>> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let conv_kernels = config
        .conv_channel_chain()
        .iter()
        .map(|&(cin, cout)| glorot_uniform(vec![3, 3, cin, cout], 9 * cin, 9 * cout, &mut rng))
        .collect();
    let attention_blocks = config
        .stage_kernel_counts
        .iter()
        .map(|&c| {
            AttentionBlockParams::init(
                c,
                config.attention_hidden,
                config.attention_mlp_bias,
                &mut rng,
            )
        })
        .collect();
    Ok(BackboneParams {
        conv_kernels,
        attention_blocks,
    })
}

#[derive(Clone, Debug)]
pub struct BackboneNodes {
    pub conv_kernels: Vec<NodeId>,
    pub attention_blocks: Vec<AttentionParamNodes>,
}

pub fn insert_backbone_params<T: Real>(
    tape: &mut Tape<T>,
    params: &BackboneParams<T>,
) -> BackboneNodes {
    BackboneNodes {
        conv_kernels: params
            .conv_kernels
            .iter()
            .map(|k| tape.leaf(k.clone()))
            .collect(),
        attention_blocks: params
            .attention_blocks
            .iter()
            .map(|b| insert_attention_params(tape, b))
            .collect(),
    }
}

/// Per-frame forward trace: the flattened feature plus each stage's
/// post-attention map and attention intermediates (for saliency export).
#[derive(Clone, Debug)]
pub struct BackboneFwd {
    pub feature: NodeId,
    pub stage_outputs: Vec<NodeId>,
    pub attention: Vec<DualAttentionNodes>,
}

/// Run one frame through the backbone: per stage conv→relu, conv→relu,
/// 2×2 maxpool, dual attention; then global average pool and flatten.
pub fn backbone_forward<T: Real>(
    tape: &mut Tape<T>,
    frame: NodeId,
    nodes: &BackboneNodes,
    config: &BackboneConfig,
) -> Result<BackboneFwd> {
    let shape = tape.value(frame).shape();
    if shape
        != [
            config.input_height,
            config.input_width,
            config.input_channels,
        ]
    {
        return Err(Error::shape(format!(
            "backbone expects {}×{}×{} frames, got {:?}",
            config.input_height, config.input_width, config.input_channels, shape
        )));
    }
    let mut x = frame;
    let mut stage_outputs = Vec::with_capacity(STAGES);
    let mut attention = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        let c1 = tape.conv2d(x, nodes.conv_kernels[2 * s])?;
        let r1 = tape.activation(c1, ActivationKind::Relu)?;
        let c2 = tape.conv2d(r1, nodes.conv_kernels[2 * s + 1])?;
        let r2 = tape.activation(c2, ActivationKind::Relu)?;
        let pooled = tape.maxpool2d(r2)?;
        let att = dual_attention(tape, pooled, &nodes.attention_blocks[s])?;
        x = att.f_rm;
        stage_outputs.push(x);
        attention.push(att);
    }
    let gap = tape.global_pool(x, PoolMode::Avg)?;
    let feature = tape.reshape(gap, vec![config.feature_len()])?;
    Ok(BackboneFwd {
        feature,
        stage_outputs,
        attention,
    })
}

/// Forward a single frame on a private tape and return the feature vector.
pub fn frame_feature<T: Real>(
    params: &BackboneParams<T>,
    config: &BackboneConfig,
    frame: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let f = tape.leaf(frame.clone());
    let nodes = insert_backbone_params(&mut tape, params);
    let fwd = backbone_forward(&mut tape, f, &nodes, config)?;
    Ok(tape.value(fwd.feature).clone())
}

/// The spatial attention gate of each of the four blocks, at 1/2, 1/4, 1/8
/// and 1/16 of the input resolution. Values lie in (0,1).
pub fn saliency_maps<T: Real>(
    params: &BackboneParams<T>,
    config: &BackboneConfig,
    frame: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let f = tape.leaf(frame.clone());
    let nodes = insert_backbone_params(&mut tape, params);
    let fwd = backbone_forward(&mut tape, f, &nodes, config)?;
    Ok(fwd
        .attention
        .iter()
        .map(|att| tape.value(att.a_s).clone())
        .collect())
}
