//! Dual attention block: a per-channel gate computed from globally pooled
//! statistics through a shared two-layer MLP, followed by a per-position
//! gate computed from channel-pooled maps through a 3×3 convolution, fused
//! with the block input by a residual elementwise add.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{ActivationKind, BinaryKind, NodeId, PoolMode, Tape};
use crate::tensor::{glorot_uniform, Real, Tensor};

/// Learnable weights of one dual attention block.
///
/// The MLP is shared between the max-pooled and avg-pooled branches; its
/// second layer is forced to the block's channel count so the gate can
/// broadcast over H×W. Biases are optional and off by default.
#[derive(Clone, Debug)]
pub struct AttentionBlockParams<T> {
    pub fc1: Tensor<T>,
    pub fc1_bias: Option<Tensor<T>>,
    pub fc2: Tensor<T>,
    pub fc2_bias: Option<Tensor<T>>,
    pub spatial_kernel: Tensor<T>,
}

impl<T: Real> AttentionBlockParams<T> {
    pub fn init(channels: usize, hidden: usize, with_bias: bool, rng: &mut Rng) -> Self {
        AttentionBlockParams {
            fc1: glorot_uniform(vec![channels, hidden], channels, hidden, rng),
            fc1_bias: with_bias.then(|| Tensor::zeros(vec![hidden])),
            fc2: glorot_uniform(vec![hidden, channels], hidden, channels, rng),
            fc2_bias: with_bias.then(|| Tensor::zeros(vec![channels])),
            spatial_kernel: glorot_uniform(vec![3, 3, 2, 1], 9 * 2, 9, rng),
        }
    }

    pub fn zeros(channels: usize, hidden: usize, with_bias: bool) -> Self {
        AttentionBlockParams {
            fc1: Tensor::zeros(vec![channels, hidden]),
            fc1_bias: with_bias.then(|| Tensor::zeros(vec![hidden])),
            fc2: Tensor::zeros(vec![hidden, channels]),
            fc2_bias: with_bias.then(|| Tensor::zeros(vec![channels])),
            spatial_kernel: Tensor::zeros(vec![3, 3, 2, 1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.fc1.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h) = (self.channels(), self.hidden());
        if self.fc2.shape() != [h, c] {
            return Err(Error::config(format!(
                "attention fc2 must be {h}×{c} to gate {c} channels, got {:?}",
                self.fc2.shape()
            )));
        }
        if self.spatial_kernel.shape() != [3, 3, 2, 1] {
            return Err(Error::config(format!(
                "attention spatial kernel must be 3×3×2×1, got {:?}",
                self.spatial_kernel.shape()
            )));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.fc1];
        v.extend(self.fc1_bias.as_ref());
        v.push(&self.fc2);
        v.extend(self.fc2_bias.as_ref());
        v.push(&self.spatial_kernel);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.fc1];
        v.extend(self.fc1_bias.as_mut());
        v.push(&mut self.fc2);
        v.extend(self.fc2_bias.as_mut());
        v.push(&mut self.spatial_kernel);
        v
    }

    pub fn cast<U: Real>(&self) -> AttentionBlockParams<U> {
        AttentionBlockParams {
            fc1: self.fc1.cast(),
            fc1_bias: self.fc1_bias.as_ref().map(|t| t.cast()),
            fc2: self.fc2.cast(),
            fc2_bias: self.fc2_bias.as_ref().map(|t| t.cast()),
            spatial_kernel: self.spatial_kernel.cast(),
        }
    }
}

/// Tape leaves for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParamNodes {
    pub fc1: NodeId,
    pub fc1_bias: Option<NodeId>,
    pub fc2: NodeId,
    pub fc2_bias: Option<NodeId>,
    pub spatial_kernel: NodeId,
}

pub fn insert_attention_params<T: Real>(
    tape: &mut Tape<T>,
    params: &AttentionBlockParams<T>,
) -> AttentionParamNodes {
    AttentionParamNodes {
        fc1: tape.leaf(params.fc1.clone()),
        fc1_bias: params.fc1_bias.as_ref().map(|b| tape.leaf(b.clone())),
        fc2: tape.leaf(params.fc2.clone()),
        fc2_bias: params.fc2_bias.as_ref().map(|b| tape.leaf(b.clone())),
        spatial_kernel: tape.leaf(params.spatial_kernel.clone()),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionNodes {
    pub v_c_max: NodeId,
    pub v_c_avg: NodeId,
    /// 1×1×C gate, entries in (0,1).
    pub a_c: NodeId,
    pub att_c: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialAttentionNodes {
    pub att_c_max: NodeId,
    pub att_c_avg: NodeId,
    /// H×W×1 gate, entries in (0,1).
    pub a_s: NodeId,
    pub att_s: NodeId,
}

/// All intermediates of one dual attention block, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct DualAttentionNodes {
    pub v_c_max: NodeId,
    pub v_c_avg: NodeId,
    pub a_c: NodeId,
    pub att_c: NodeId,
    pub att_c_max: NodeId,
    pub att_c_avg: NodeId,
    pub a_s: NodeId,
    pub att_s: NodeId,
    pub f_rm: NodeId,
}

fn mlp_branch<T: Real>(
    tape: &mut Tape<T>,
    f_m: NodeId,
    mode: PoolMode,
    p: &AttentionParamNodes,
) -> Result<NodeId> {
    let c = tape.value(f_m).shape()[2];
    let pooled = tape.global_pool(f_m, mode)?;
    let flat = tape.reshape(pooled, vec![c])?;
    let h1 = tape.dense(flat, p.fc1, p.fc1_bias)?;
    let h1 = tape.activation(h1, ActivationKind::Relu)?;
    tape.dense(h1, p.fc2, p.fc2_bias)
}

/// Channel gate: `a_c = σ(fc2(relu(fc1(gmp))) ⊕ fc2(relu(fc1(gap))))`,
/// then `att_c = a_c ⊗ f_m` broadcast over positions.
pub fn channel_attention<T: Real>(
    tape: &mut Tape<T>,
    f_m: NodeId,
    p: &AttentionParamNodes,
) -> Result<ChannelAttentionNodes> {
    let c = tape.value(f_m).shape()[2];
    let expect = tape.value(p.fc1).shape()[0];
    if c != expect {
        return Err(Error::shape(format!(
            "channel_attention: input has {c} channels, block expects {expect}"
        )));
    }
    let v_c_max = mlp_branch(tape, f_m, PoolMode::Max, p)?;
    let v_c_avg = mlp_branch(tape, f_m, PoolMode::Avg, p)?;
    let sum = tape.elementwise(v_c_max, v_c_avg, BinaryKind::Add)?;
    let gate = tape.activation(sum, ActivationKind::Sigmoid)?;
    let a_c = tape.reshape(gate, vec![1, 1, c])?;
    let att_c = tape.elementwise(f_m, a_c, BinaryKind::Mul)?;
    Ok(ChannelAttentionNodes {
        v_c_max,
        v_c_avg,
        a_c,
        att_c,
    })
}

/// Spatial gate: `a_s = σ(conv3×3(concat(chmax, chavg)))`, then
/// `att_s = a_s ⊗ att_c` broadcast over channels.
pub fn spatial_attention<T: Real>(
    tape: &mut Tape<T>,
    att_c: NodeId,
    p: &AttentionParamNodes,
) -> Result<SpatialAttentionNodes> {
    let att_c_max = tape.channel_pool(att_c, PoolMode::Max)?;
    let att_c_avg = tape.channel_pool(att_c, PoolMode::Avg)?;
    let stacked = tape.concat_channels(att_c_max, att_c_avg)?;
    let conv = tape.conv2d(stacked, p.spatial_kernel)?;
    let a_s = tape.activation(conv, ActivationKind::Sigmoid)?;
    let att_s = tape.elementwise(att_c, a_s, BinaryKind::Mul)?;
    Ok(SpatialAttentionNodes {
        att_c_max,
        att_c_avg,
        a_s,
        att_s,
    })
}

/// Full block: channel gate, spatial gate, residual fuse `f_rm = att_s ⊕ f_m`.
/// Output shape equals input shape.
pub fn dual_attention<T: Real>(
    tape: &mut Tape<T>,
    f_m: NodeId,
    p: &AttentionParamNodes,
) -> Result<DualAttentionNodes> {
    let ch = channel_attention(tape, f_m, p)?;
    let sp = spatial_attention(tape, ch.att_c, p)?;
    let f_rm = tape.elementwise(sp.att_s, f_m, BinaryKind::Add)?;
    Ok(DualAttentionNodes {
        v_c_max: ch.v_c_max,
        v_c_avg: ch.v_c_avg,
        a_c: ch.a_c,
        att_c: ch.att_c,
        att_c_max: sp.att_c_max,
        att_c_avg: sp.att_c_avg,
        a_s: sp.a_s,
        att_s: sp.att_s,
        f_rm,
    })
}

/// Snapshot of the block intermediates, used by saliency export and tests.
#[derive(Clone, Debug)]
pub struct AttentionTrace<T> {
    pub v_c_max: Tensor<T>,
    pub v_c_avg: Tensor<T>,
    pub a_c: Tensor<T>,
    pub att_c: Tensor<T>,
    pub att_c_max: Tensor<T>,
    pub att_c_avg: Tensor<T>,
    pub a_s: Tensor<T>,
    pub att_s: Tensor<T>,
    pub f_rm: Tensor<T>,
}

impl<T: Real> AttentionTrace<T> {
    pub fn capture(tape: &Tape<T>, nodes: &DualAttentionNodes) -> Self {
        let c = tape.value(nodes.a_c).numel();
        let as_1x1xc = |t: &Tensor<T>| {
            Tensor::new(vec![1, 1, c], t.data().to_vec()).expect("vector reshapes to 1×1×C")
        };
        AttentionTrace {
            v_c_max: as_1x1xc(tape.value(nodes.v_c_max)),
            v_c_avg: as_1x1xc(tape.value(nodes.v_c_avg)),
            a_c: tape.value(nodes.a_c).clone(),
            att_c: tape.value(nodes.att_c).clone(),
            att_c_max: tape.value(nodes.att_c_max).clone(),
            att_c_avg: tape.value(nodes.att_c_avg).clone(),
            a_s: tape.value(nodes.a_s).clone(),
            att_s: tape.value(nodes.att_s).clone(),
            f_rm: tape.value(nodes.f_rm).clone(),
        }
    }
}
