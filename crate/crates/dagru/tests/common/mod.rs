//! Independent naive oracles shared by the integration and acceptance tests.
//!
//! Everything here is written straight from the mathematical definitions
//! (plain nested loops, scalar recurrences) and deliberately shares no code
//! with the engine, so an agreement check is a genuine dual-route test.

#![allow(dead_code)]

use dagru::rng::Rng;

// ── naive convolution: 6 nested loops, zero padding 1, stride 1 ─────

pub fn conv2d_oracle(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernels: &[f64],
    cout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        for ci in 0..cin {
                            let yy = y as isize + ky as isize - 1;
                            let xx = x as isize + kx as isize - 1;
                            if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let iv = input[((yy as usize) * w + xx as usize) * cin + ci];
                            let kv = kernels[((ky * 3 + kx) * cin + ci) * cout + co];
                            acc += iv * kv;
                        }
                    }
                }
                out[(y * w + x) * cout + co] = acc;
            }
        }
    }
    out
}

// ── naive 2×2/stride-2 max pooling, clipped windows at the border ────

pub fn maxpool2d_oracle(input: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let y = oy * 2 + dy;
                        let x = ox * 2 + dx;
                        if y < h && x < w {
                            best = best.max(input[(y * w + x) * c + ch]);
                        }
                    }
                }
                out[(oy * ow + ox) * c + ch] = best;
            }
        }
    }
    out
}

// ── naive global and cross-channel pooling ───────────────────────────

pub fn global_pool_oracle(input: &[f64], h: usize, w: usize, c: usize, max: bool) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for ch in 0..c {
        if max {
            let mut best = f64::NEG_INFINITY;
            for p in 0..h * w {
                best = best.max(input[p * c + ch]);
            }
            out[ch] = best;
        } else {
            let mut acc = 0.0;
            for p in 0..h * w {
                acc += input[p * c + ch];
            }
            out[ch] = acc / (h * w) as f64;
        }
    }
    out
}

pub fn channel_pool_oracle(input: &[f64], h: usize, w: usize, c: usize, max: bool) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for p in 0..h * w {
        if max {
            let mut best = f64::NEG_INFINITY;
            for ch in 0..c {
                best = best.max(input[p * c + ch]);
            }
            out[p] = best;
        } else {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += input[p * c + ch];
            }
            out[p] = acc / c as f64;
        }
    }
    out
}

// ── naive broadcast elementwise over rank-3 shapes ───────────────────

#[derive(Clone, Copy)]
pub enum BinOp {
    Add,
    Mul,
}

/// Elementwise with the extent-1 broadcast rule, via per-axis index clamping.
pub fn broadcast_oracle(
    a: &[f64],
    a_shape: &[usize; 3],
    b: &[f64],
    b_shape: &[usize; 3],
    op: BinOp,
) -> Vec<f64> {
    let out_shape = [
        a_shape[0].max(b_shape[0]),
        a_shape[1].max(b_shape[1]),
        a_shape[2].max(b_shape[2]),
    ];
    let mut out = vec![0.0; out_shape.iter().product()];
    let idx = |shape: &[usize; 3], y: usize, x: usize, c: usize| {
        let yy = if shape[0] == 1 { 0 } else { y };
        let xx = if shape[1] == 1 { 0 } else { x };
        let cc = if shape[2] == 1 { 0 } else { c };
        (yy * shape[1] + xx) * shape[2] + cc
    };
    let mut o = 0;
    for y in 0..out_shape[0] {
        for x in 0..out_shape[1] {
            for c in 0..out_shape[2] {
                let av = a[idx(a_shape, y, x, c)];
                let bv = b[idx(b_shape, y, x, c)];
                out[o] = match op {
                    BinOp::Add => av + bv,
                    BinOp::Mul => av * bv,
                };
                o += 1;
            }
        }
    }
    out
}

// ── naive bilinear resize (half-pixel centers, clamped edges) ────────

pub fn bilinear_oracle(
    src: &[f64],
    sh: usize,
    sw: usize,
    c: usize,
    th: usize,
    tw: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; th * tw * c];
    for ty in 0..th {
        for tx in 0..tw {
            let sy = ((ty as f64 + 0.5) * sh as f64 / th as f64 - 0.5).clamp(0.0, sh as f64 - 1.0);
            let sx = ((tx as f64 + 0.5) * sw as f64 / tw as f64 - 0.5).clamp(0.0, sw as f64 - 1.0);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let v00 = src[(y0 * sw + x0) * c + ch];
                let v01 = src[(y0 * sw + x1) * c + ch];
                let v10 = src[(y1 * sw + x0) * c + ch];
                let v11 = src[(y1 * sw + x1) * c + ch];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out[(ty * tw + tx) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

// ── scalar GRU hand trace ────────────────────────────────────────────

/// One GRU step with scalar sizes, straight from the gate recurrences.
pub fn gru_scalar_oracle(
    x: f64,
    h_prev: f64,
    w_r: f64,
    u_r: f64,
    w_mu: f64,
    u_mu: f64,
    w: f64,
    u: f64,
) -> (f64, f64, f64, f64) {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let r = sig(w_r * x + u_r * h_prev);
    let mu = sig(w_mu * x + u_mu * h_prev);
    let h_tilde = (w * x + r * (u * h_prev)).tanh();
    let h = (1.0 - mu) * h_prev + mu * h_tilde;
    (r, mu, h_tilde, h)
}

/// Frozen expectation for x=1, h_prev=0.5, all six weights 0.1, computed
/// with 30-digit arithmetic ahead of the build.
pub const GRU_SCALAR_R: f64 = 0.53742984534374955;
pub const GRU_SCALAR_MU: f64 = 0.53742984534374955;
pub const GRU_SCALAR_HTILDE: f64 = 0.1261951230421416;
pub const GRU_SCALAR_H: f64 = 0.29910610278779883;

// ── scalar Adam oracle ───────────────────────────────────────────────

pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: u64,
}

impl ScalarAdam {
    pub fn new() -> Self {
        ScalarAdam { m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, x: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powi(self.t as i32));
        let v_hat = self.v / (1.0 - b2.powi(self.t as i32));
        x - lr * m_hat / (v_hat.sqrt() + eps)
    }
}

/// Frozen trajectory of the oracle itself on f(x) = (x-3)^2 from x0 = 0
/// with lr = 0.1 and canonical betas, computed ahead of the build.
pub const ADAM_QUADRATIC_TRAJECTORY: [f64; 5] = [
    0.099999999833333334,
    0.19989729258521171,
    0.29961847654925339,
    0.39908646894421574,
    0.49822054377271429,
];

// ── finite differences ───────────────────────────────────────────────

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

/// Central finite difference through a "set coordinate, evaluate loss" probe.
pub fn central_diff(mut eval_at: impl FnMut(f64) -> f64, x0: f64, step: f64) -> f64 {
    (eval_at(x0 + step) - eval_at(x0 - step)) / (2.0 * step)
}

/// Relative-error gradient agreement with a guard band for gradients at the
/// finite-difference noise floor.
pub fn grad_close(analytic: f64, numeric: f64, rel_tol: f64) -> bool {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        (analytic - numeric).abs() < 1e-9
    } else {
        (analytic - numeric).abs() / denom < rel_tol
    }
}

// ── parameter counting (closed form, no engine tensors involved) ─────

/// Closed-form learnable-parameter count for the default architecture at a
/// given class count. Mirrors the documented layer table only.
pub fn param_count_oracle(num_classes: usize, bidirectional: bool) -> usize {
    let conv_chain: [(usize, usize); 8] = [
        (3, 16),
        (16, 16),
        (16, 32),
        (32, 32),
        (32, 32),
        (32, 32),
        (32, 64),
        (64, 64),
    ];
    let conv: usize = conv_chain.iter().map(|&(ci, co)| 9 * ci * co).sum();
    let hidden = 128;
    let attention: usize = [16usize, 32, 32, 64]
        .iter()
        .map(|&c| c * hidden + hidden * c + 9 * 2)
        .sum();
    let gru_hidden = 32;
    let dirs = if bidirectional { 2 } else { 1 };
    let cell = |input: usize| 3 * input * gru_hidden + 3 * gru_hidden * gru_hidden;
    let layer_input = |layer: usize| if layer == 0 { 64 } else { gru_hidden * dirs };
    let gru: usize = (0..3).map(|l| dirs * cell(layer_input(l))).sum();
    let classifier = gru_hidden * dirs * num_classes;
    conv + attention + gru + classifier
}

// ── misc helpers ─────────────────────────────────────────────────────

pub fn random_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range_f64(lo, hi)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ── finite-difference probes over tape graphs ────────────────────────

use dagru::tape::{NodeId, Tape};
use dagru::tensor::Tensor;

/// Reduce any node to a scalar through a fixed random weighting so every
/// output coordinate influences the probe loss.
pub fn weighted_scalar(tape: &mut Tape<f64>, node: NodeId, weights: &[f64]) -> NodeId {
    let n = tape.value(node).numel();
    assert_eq!(n, weights.len());
    let flat = tape.reshape(node, vec![n]).unwrap();
    let w = tape.leaf(Tensor::new(vec![n, 1], weights.to_vec()).unwrap());
    tape.dense(flat, w, None).unwrap()
}

/// Central finite difference of `eval` w.r.t. one coordinate of one tensor.
pub fn fd_grad(
    tensors: &mut [Tensor<f64>],
    which: usize,
    idx: usize,
    eval: impl Fn(&[Tensor<f64>]) -> f64,
) -> f64 {
    let x0 = tensors[which].data()[idx];
    tensors[which].data_mut()[idx] = x0 + FD_STEP;
    let plus = eval(tensors);
    tensors[which].data_mut()[idx] = x0 - FD_STEP;
    let minus = eval(tensors);
    tensors[which].data_mut()[idx] = x0;
    (plus - minus) / (2.0 * FD_STEP)
}

pub fn assert_grad_close(analytic: f64, numeric: f64, what: &str) {
    assert!(
        grad_close(analytic, numeric, GRAD_REL_TOL),
        "{what}: analytic {analytic} vs finite-difference {numeric}"
    );
}
