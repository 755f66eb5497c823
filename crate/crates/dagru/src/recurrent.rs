//! Gated recurrent unit cell, bidirectional layers, the stacked sequence
//! encoder and the softmax classification head.
//!
//! Gate recurrences per step:
//!   r_t  = σ(w_r·x_t + u_r·h_{t-1})
//!   μ_t  = σ(w_μ·x_t + u_μ·h_{t-1})
//!   h̃_t = tanh(w·x_t + r_t ⊙ (u·h_{t-1}))
//!   h_t  = (1-μ_t) ⊙ h_{t-1} + μ_t ⊙ h̃_t
//!
//! Cells carry no bias terms unless `cell_bias` is enabled.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{ActivationKind, BinaryKind, NodeId, Tape};
use crate::tensor::{glorot_uniform, Real, Tensor};

/// Six weight matrices of one GRU direction: the three input projections
/// (`w_*`, input×hidden) and three recurrent projections (`u_*`,
/// hidden×hidden), plus optional per-gate biases.
#[derive(Clone, Debug)]
pub struct GruCellParams<T> {
    pub w_r: Tensor<T>,
    pub u_r: Tensor<T>,
    pub w_mu: Tensor<T>,
    pub u_mu: Tensor<T>,
    pub w_cand: Tensor<T>,
    pub u_cand: Tensor<T>,
    pub b_r: Option<Tensor<T>>,
    pub b_mu: Option<Tensor<T>>,
    pub b_cand: Option<Tensor<T>>,
}

impl<T: Real> GruCellParams<T> {
    pub fn init(input_size: usize, hidden_size: usize, with_bias: bool, rng: &mut Rng) -> Self {
        let w = |rng: &mut Rng| {
            glorot_uniform(vec![input_size, hidden_size], input_size, hidden_size, rng)
        };
        let u = |rng: &mut Rng| {
            glorot_uniform(vec![hidden_size, hidden_size], hidden_size, hidden_size, rng)
        };
        GruCellParams {
            w_r: w(rng),
            u_r: u(rng),
            w_mu: w(rng),
            u_mu: u(rng),
            w_cand: w(rng),
            u_cand: u(rng),
            b_r: with_bias.then(|| Tensor::zeros(vec![hidden_size])),
            b_mu: with_bias.then(|| Tensor::zeros(vec![hidden_size])),
            b_cand: with_bias.then(|| Tensor::zeros(vec![hidden_size])),
        }
    }

    pub fn zeros(input_size: usize, hidden_size: usize, with_bias: bool) -> Self {
        GruCellParams {
            w_r: Tensor::zeros(vec![input_size, hidden_size]),
            u_r: Tensor::zeros(vec![hidden_size, hidden_size]),
            w_mu: Tensor::zeros(vec![input_size, hidden_size]),
            u_mu: Tensor::zeros(vec![hidden_size, hidden_size]),
            w_cand: Tensor::zeros(vec![input_size, hidden_size]),
            u_cand: Tensor::zeros(vec![hidden_size, hidden_size]),
            b_r: with_bias.then(|| Tensor::zeros(vec![hidden_size])),
            b_mu: with_bias.then(|| Tensor::zeros(vec![hidden_size])),
            b_cand: with_bias.then(|| Tensor::zeros(vec![hidden_size])),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_r.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_r.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.input_size(), self.hidden_size());
        for (name, t, shape) in [
            ("w_r", &self.w_r, [m, n]),
            ("u_r", &self.u_r, [n, n]),
            ("w_mu", &self.w_mu, [m, n]),
            ("u_mu", &self.u_mu, [n, n]),
            ("w_cand", &self.w_cand, [m, n]),
            ("u_cand", &self.u_cand, [n, n]),
        ] {
            if t.shape() != shape {
                return Err(Error::config(format!(
                    "gru {name} must be {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.w_r, &self.u_r];
        v.extend(self.b_r.as_ref());
        v.push(&self.w_mu);
        v.push(&self.u_mu);
        v.extend(self.b_mu.as_ref());
        v.push(&self.w_cand);
        v.push(&self.u_cand);
        v.extend(self.b_cand.as_ref());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.w_r, &mut self.u_r];
        v.extend(self.b_r.as_mut());
        v.push(&mut self.w_mu);
        v.push(&mut self.u_mu);
        v.extend(self.b_mu.as_mut());
        v.push(&mut self.w_cand);
        v.push(&mut self.u_cand);
        v.extend(self.b_cand.as_mut());
        v
    }

    pub fn cast<U: Real>(&self) -> GruCellParams<U> {
        GruCellParams {
            w_r: self.w_r.cast(),
            u_r: self.u_r.cast(),
            w_mu: self.w_mu.cast(),
            u_mu: self.u_mu.cast(),
            w_cand: self.w_cand.cast(),
            u_cand: self.u_cand.cast(),
            b_r: self.b_r.as_ref().map(|t| t.cast()),
            b_mu: self.b_mu.as_ref().map(|t| t.cast()),
            b_cand: self.b_cand.as_ref().map(|t| t.cast()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruCellNodes {
    pub w_r: NodeId,
    pub u_r: NodeId,
    pub w_mu: NodeId,
    pub u_mu: NodeId,
    pub w_cand: NodeId,
    pub u_cand: NodeId,
    pub b_r: Option<NodeId>,
    pub b_mu: Option<NodeId>,
    pub b_cand: Option<NodeId>,
}

pub fn insert_cell_params<T: Real>(
    tape: &mut Tape<T>,
    params: &GruCellParams<T>,
) -> GruCellNodes {
    GruCellNodes {
        w_r: tape.leaf(params.w_r.clone()),
        u_r: tape.leaf(params.u_r.clone()),
        w_mu: tape.leaf(params.w_mu.clone()),
        u_mu: tape.leaf(params.u_mu.clone()),
        w_cand: tape.leaf(params.w_cand.clone()),
        u_cand: tape.leaf(params.u_cand.clone()),
        b_r: params.b_r.as_ref().map(|b| tape.leaf(b.clone())),
        b_mu: params.b_mu.as_ref().map(|b| tape.leaf(b.clone())),
        b_cand: params.b_cand.as_ref().map(|b| tape.leaf(b.clone())),
    }
}

/// Gate values and new state of one step.
#[derive(Clone, Copy, Debug)]
pub struct GruStepNodes {
    pub r: NodeId,
    pub mu: NodeId,
    pub h_tilde: NodeId,
    pub h: NodeId,
}

pub fn gru_step<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    h_prev: NodeId,
    cell: &GruCellNodes,
) -> Result<GruStepNodes> {
    let hidden = tape.value(cell.u_r).shape()[0];
    if tape.value(h_prev).numel() != hidden {
        return Err(Error::shape(format!(
            "gru_step: h_prev has {} entries, cell expects {hidden}",
            tape.value(h_prev).numel()
        )));
    }
    let gate = |tape: &mut Tape<T>, w, b, u| -> Result<NodeId> {
        let xi = tape.dense(x, w, b)?;
        let hi = tape.dense(h_prev, u, None)?;
        let pre = tape.elementwise(xi, hi, BinaryKind::Add)?;
        tape.activation(pre, ActivationKind::Sigmoid)
    };
    let r = gate(tape, cell.w_r, cell.b_r, cell.u_r)?;
    let mu = gate(tape, cell.w_mu, cell.b_mu, cell.u_mu)?;

    let xc = tape.dense(x, cell.w_cand, cell.b_cand)?;
    let uh = tape.dense(h_prev, cell.u_cand, None)?;
    let gated = tape.elementwise(r, uh, BinaryKind::Mul)?;
    let pre = tape.elementwise(xc, gated, BinaryKind::Add)?;
    let h_tilde = tape.activation(pre, ActivationKind::Tanh)?;

    let ones = tape.leaf(Tensor::filled(vec![hidden], T::one()));
    let one_minus_mu = tape.elementwise(ones, mu, BinaryKind::Sub)?;
    let keep = tape.elementwise(one_minus_mu, h_prev, BinaryKind::Mul)?;
    let update = tape.elementwise(mu, h_tilde, BinaryKind::Mul)?;
    let h = tape.elementwise(keep, update, BinaryKind::Add)?;
    Ok(GruStepNodes { r, mu, h_tilde, h })
}

/// Output of one (bi)directional layer over a sequence.
#[derive(Clone, Debug)]
pub struct LayerOut {
    /// Per-position outputs: `concat(h_fwd_t, h_bwd_t)` when bidirectional,
    /// `h_fwd_t` otherwise.
    pub outputs: Vec<NodeId>,
    /// Forward state after the last step.
    pub fwd_last: NodeId,
    /// Backward state after its last step (at original position 1).
    pub bwd_final: Option<NodeId>,
}

fn run_direction<T: Real>(
    tape: &mut Tape<T>,
    seq: &[NodeId],
    cell: &GruCellNodes,
    reversed: bool,
) -> Result<Vec<NodeId>> {
    let hidden = tape.value(cell.u_r).shape()[0];
    let mut h = tape.leaf(Tensor::zeros(vec![hidden]));
    let mut states = vec![h; seq.len()];
    let order: Vec<usize> = if reversed {
        (0..seq.len()).rev().collect()
    } else {
        (0..seq.len()).collect()
    };
    for t in order {
        let step = gru_step(tape, seq[t], h, cell)?;
        h = step.h;
        states[t] = h;
    }
    Ok(states)
}

/// Bidirectional layer: the forward direction reads positions 1..n, the
/// backward direction reads n..1 from a fresh zero state; per-position
/// outputs concatenate the two states computed at that position.
pub fn bigru_layer<T: Real>(
    tape: &mut Tape<T>,
    seq: &[NodeId],
    fwd: &GruCellNodes,
    bwd: &GruCellNodes,
) -> Result<LayerOut> {
    if seq.is_empty() {
        return Err(Error::data("bigru_layer: empty sequence"));
    }
    let f_states = run_direction(tape, seq, fwd, false)?;
    let b_states = run_direction(tape, seq, bwd, true)?;
    let outputs = f_states
        .iter()
        .zip(&b_states)
        .map(|(&f, &b)| tape.concat_channels(f, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerOut {
        outputs,
        fwd_last: f_states[seq.len() - 1],
        bwd_final: Some(b_states[0]),
    })
}

/// Unidirectional layer (ablation path).
pub fn gru_layer<T: Real>(
    tape: &mut Tape<T>,
    seq: &[NodeId],
    cell: &GruCellNodes,
) -> Result<LayerOut> {
    if seq.is_empty() {
        return Err(Error::data("gru_layer: empty sequence"));
    }
    let states = run_direction(tape, seq, cell, false)?;
    Ok(LayerOut {
        fwd_last: states[seq.len() - 1],
        outputs: states,
        bwd_final: None,
    })
}

/// Recurrent stack architecture. The first layer consumes backbone features
/// (`input_size`); later layers consume the previous layer's per-position
/// outputs (hidden × directions).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecurrentConfig {
    pub layers: usize,
    pub hidden: usize,
    pub input_size: usize,
    pub sequence_length: usize,
    pub bidirectional: bool,
    pub cell_bias: bool,
}

impl Default for RecurrentConfig {
    fn default() -> Self {
        RecurrentConfig {
            layers: 3,
            hidden: 32,
            input_size: 64,
            sequence_length: 16,
            bidirectional: true,
            cell_bias: false,
        }
    }
}

impl RecurrentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.input_size == 0 {
            return Err(Error::config(
                "recurrent layers, hidden and input_size must be positive",
            ));
        }
        if self.sequence_length == 0 {
            return Err(Error::config("sequence_length must be positive"));
        }
        Ok(())
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn layer_input_size(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_size
        } else {
            self.hidden * self.directions()
        }
    }

    /// Length of the sequence representation fed to the classifier.
    pub fn representation_len(&self) -> usize {
        self.hidden * self.directions()
    }
}

/// All cells of the stack (`cells[layer][direction]`) plus the classifier
/// weight matrix `w_o` (representation × classes).
#[derive(Clone, Debug)]
pub struct StackParams<T> {
    pub cells: Vec<Vec<GruCellParams<T>>>,
    pub classifier: Tensor<T>,
}

impl<T: Real> StackParams<T> {
    pub fn init(config: &RecurrentConfig, num_classes: usize, rng: &mut Rng) -> Self {
        let cells = (0..config.layers)
            .map(|layer| {
                (0..config.directions())
                    .map(|_| {
                        GruCellParams::init(
                            config.layer_input_size(layer),
                            config.hidden,
                            config.cell_bias,
                            rng,
                        )
                    })
                    .collect()
            })
            .collect();
        let repr = config.representation_len();
        StackParams {
            cells,
            classifier: glorot_uniform(vec![repr, num_classes], repr, num_classes, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.shape()[1]
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for layer in &self.cells {
            for cell in layer {
                v.extend(cell.tensors());
            }
        }
        v.push(&self.classifier);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for layer in &mut self.cells {
            for cell in layer {
                v.extend(cell.tensors_mut());
            }
        }
        v.push(&mut self.classifier);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> StackParams<U> {
        StackParams {
            cells: self
                .cells
                .iter()
                .map(|layer| layer.iter().map(|c| c.cast()).collect())
                .collect(),
            classifier: self.classifier.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StackNodes {
    pub cells: Vec<Vec<GruCellNodes>>,
    pub classifier: NodeId,
}

pub fn insert_stack_params<T: Real>(tape: &mut Tape<T>, params: &StackParams<T>) -> StackNodes {
    StackNodes {
        cells: params
            .cells
            .iter()
            .map(|layer| layer.iter().map(|c| insert_cell_params(tape, c)).collect())
            .collect(),
        classifier: tape.leaf(params.classifier.clone()),
    }
}

/// Chain the configured layers over the feature sequence and reduce to a
/// fixed-length representation: `concat(h_fwd at t=n, h_bwd at t=1)` of the
/// last layer (forward last state only when unidirectional).
pub fn stack_forward<T: Real>(
    tape: &mut Tape<T>,
    features: &[NodeId],
    nodes: &StackNodes,
    config: &RecurrentConfig,
) -> Result<NodeId> {
    if features.len() != config.sequence_length {
        return Err(Error::data(format!(
            "stack_forward: expected {} feature vectors, got {}",
            config.sequence_length,
            features.len()
        )));
    }
    let mut seq: Vec<NodeId> = features.to_vec();
    let mut representation = None;
    for (layer, dir_cells) in nodes.cells.iter().enumerate() {
        let out = if config.bidirectional {
            bigru_layer(tape, &seq, &dir_cells[0], &dir_cells[1])?
        } else {
            gru_layer(tape, &seq, &dir_cells[0])?
        };
        if layer + 1 == nodes.cells.len() {
            representation = Some(match out.bwd_final {
                Some(b) => tape.concat_channels(out.fwd_last, b)?,
                None => out.fwd_last,
            });
        }
        seq = out.outputs;
    }
    Ok(representation.expect("at least one layer"))
}

/// Softmax head over `w_o · representation`.
pub fn classify<T: Real>(
    tape: &mut Tape<T>,
    representation: NodeId,
    classifier: NodeId,
) -> Result<NodeId> {
    let logits = tape.dense(representation, classifier, None)?;
    tape.activation(logits, ActivationKind::Softmax)
}
