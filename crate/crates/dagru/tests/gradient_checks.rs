//! Analytic gradients vs central finite differences (step 1e-5, f64) for
//! every differentiable op, through the attention block, through 16 steps
//! of the bidirectional stack, and through a small end-to-end model.

mod common;

use common::*;
use dagru::attention::{dual_attention, insert_attention_params, AttentionBlockParams};
use dagru::backbone::{backbone_forward, build_backbone, insert_backbone_params, BackboneConfig};
use dagru::data::ClipSample;
use dagru::model::{
    build_model, insert_model_params, window_forward, ModelConfig, ModelParams,
};
use dagru::recurrent::{
    gru_step, insert_cell_params, insert_stack_params, stack_forward, GruCellParams,
    RecurrentConfig, StackParams,
};
use dagru::rng::Rng;
use dagru::tape::{ActivationKind, BinaryKind, NodeId, PoolMode, Tape};
use dagru::tensor::Tensor;
use dagru::training::sample_gradients;

fn t3(h: usize, w: usize, c: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![h, w, c], data).unwrap()
}

/// Check analytic vs finite-difference gradients of a weighted-sum loss for
/// a graph of `tensors`, probing `probes` random coordinates per tensor.
fn check_graph(
    name: &str,
    tensors: Vec<Tensor<f64>>,
    probes: usize,
    seed: u64,
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
) {
    let mut rng = Rng::new(seed);
    let out_len = {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &leaves);
        tape.value(out).numel()
    };
    let weights = random_vec(&mut rng, out_len, -1.0, 1.0);

    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &leaves);
        let loss = weighted_scalar(&mut tape, out, &weights);
        tape.value(loss).data()[0]
    };

    // analytic pass
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &leaves);
    let loss = weighted_scalar(&mut tape, out, &weights);
    tape.backward(loss).unwrap();

    let mut tensors = tensors;
    for which in 0..tensors.len() {
        let numel = tensors[which].numel();
        for _ in 0..probes.min(numel) {
            let idx = rng.below(numel);
            let analytic = tape
                .grad(leaves[which])
                .map_or(0.0, |g| g[idx]);
            let numeric = fd_grad(&mut tensors, which, idx, eval);
            assert_grad_close(
                analytic,
                numeric,
                &format!("{name}: tensor {which} coord {idx}"),
            );
        }
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = Rng::new(1);
    let input = t3(5, 4, 3, random_vec(&mut rng, 60, -1.0, 1.0));
    let kernels = Tensor::new(vec![3, 3, 3, 2], random_vec(&mut rng, 54, -1.0, 1.0)).unwrap();
    check_graph("conv2d", vec![input, kernels], 8, 11, |tape, ids| {
        tape.conv2d(ids[0], ids[1]).unwrap()
    });
}

#[test]
fn maxpool_gradient_routes_to_argmax() {
    let mut rng = Rng::new(2);
    let input = t3(6, 6, 2, random_vec(&mut rng, 72, -1.0, 1.0));
    check_graph("maxpool2d", vec![input], 12, 12, |tape, ids| {
        tape.maxpool2d(ids[0]).unwrap()
    });
}

#[test]
fn global_pool_avg_gradient_is_uniform_share() {
    let mut rng = Rng::new(3);
    let input = t3(3, 4, 2, random_vec(&mut rng, 24, -1.0, 1.0));
    // analytic identity: d(mean)/dx = 1/(H·W) per position
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let pooled = tape.global_pool(x, PoolMode::Avg).unwrap();
    let flat = tape.reshape(pooled, vec![2]).unwrap();
    let w = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    let loss = tape.dense(flat, w, None).unwrap();
    tape.backward(loss).unwrap();
    for &g in tape.grad(x).unwrap() {
        assert!((g - 1.0 / 12.0).abs() < 1e-12);
    }

    check_graph("global_pool avg", vec![input.clone()], 8, 13, |tape, ids| {
        tape.global_pool(ids[0], PoolMode::Avg).unwrap()
    });
    check_graph("global_pool max", vec![input], 8, 14, |tape, ids| {
        tape.global_pool(ids[0], PoolMode::Max).unwrap()
    });
}

#[test]
fn channel_pool_gradients() {
    let mut rng = Rng::new(4);
    let input = t3(3, 3, 4, random_vec(&mut rng, 36, -1.0, 1.0));
    check_graph("channel_pool avg", vec![input.clone()], 8, 15, |tape, ids| {
        tape.channel_pool(ids[0], PoolMode::Avg).unwrap()
    });
    check_graph("channel_pool max", vec![input], 8, 16, |tape, ids| {
        tape.channel_pool(ids[0], PoolMode::Max).unwrap()
    });
}

#[test]
fn dense_8_to_5_gradients() {
    let mut rng = Rng::new(5);
    let input = Tensor::new(vec![8], random_vec(&mut rng, 8, -1.0, 1.0)).unwrap();
    let weights = Tensor::new(vec![8, 5], random_vec(&mut rng, 40, -1.0, 1.0)).unwrap();
    let bias = Tensor::new(vec![5], random_vec(&mut rng, 5, -0.5, 0.5)).unwrap();
    check_graph("dense", vec![input, weights, bias], 10, 17, |tape, ids| {
        tape.dense(ids[0], ids[1], Some(ids[2])).unwrap()
    });
}

#[test]
fn activation_gradients() {
    let mut rng = Rng::new(6);
    // keep relu probes away from the kink at 0
    let data: Vec<f64> = random_vec(&mut rng, 12, -2.0, 2.0)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    let input = Tensor::new(vec![12], data).unwrap();
    for kind in [
        ActivationKind::Relu,
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Softmax,
    ] {
        check_graph(
            &format!("activation {kind:?}"),
            vec![input.clone()],
            8,
            18,
            move |tape, ids| tape.activation(ids[0], kind).unwrap(),
        );
    }
}

#[test]
fn elementwise_broadcast_gradients() {
    let mut rng = Rng::new(7);
    let a = t3(3, 2, 4, random_vec(&mut rng, 24, -1.0, 1.0));
    for (bshape, blen) in [([1usize, 1, 4], 4usize), ([3, 2, 1], 6), ([3, 2, 4], 24)] {
        let b = Tensor::new(bshape.to_vec(), random_vec(&mut rng, blen, 0.5, 1.5)).unwrap();
        for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul] {
            check_graph(
                &format!("elementwise {kind:?} vs {bshape:?}"),
                vec![a.clone(), b.clone()],
                6,
                19,
                move |tape, ids| tape.elementwise(ids[0], ids[1], kind).unwrap(),
            );
        }
    }
}

#[test]
fn concat_gradient_splits_back_to_inputs() {
    let mut rng = Rng::new(8);
    let a = t3(2, 3, 2, random_vec(&mut rng, 12, -1.0, 1.0));
    let b = t3(2, 3, 3, random_vec(&mut rng, 18, -1.0, 1.0));
    check_graph("concat_channels", vec![a, b], 8, 20, |tape, ids| {
        tape.concat_channels(ids[0], ids[1]).unwrap()
    });
}

#[test]
fn cross_entropy_gradient_is_probs_minus_onehot() {
    let mut rng = Rng::new(9);
    let logits = Tensor::new(vec![5], random_vec(&mut rng, 5, -2.0, 2.0)).unwrap();
    let label = 2usize;

    // analytic identity through softmax + cross-entropy
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let probs = tape.activation(z, ActivationKind::Softmax).unwrap();
    let loss = tape.cross_entropy(probs, label).unwrap();
    tape.backward(loss).unwrap();
    let p = tape.value(probs).data().to_vec();
    let g = tape.grad(z).unwrap();
    for i in 0..5 {
        let expected = p[i] - if i == label { 1.0 } else { 0.0 };
        assert!(
            (g[i] - expected).abs() < 1e-10,
            "dL/dz[{i}] = {} but probs - onehot gives {expected}",
            g[i]
        );
    }

    // finite differences on the same composition
    let eval = |tensors: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let z = tape.leaf(tensors[0].clone());
        let probs = tape.activation(z, ActivationKind::Softmax).unwrap();
        let loss = tape.cross_entropy(probs, label).unwrap();
        tape.value(loss).data()[0]
    };
    let mut tensors = vec![logits];
    for i in 0..5 {
        let numeric = fd_grad(&mut tensors, 0, i, eval);
        assert_grad_close(g[i], numeric, &format!("cross_entropy logit {i}"));
    }
}

#[test]
fn fanout_accumulates_both_paths() {
    let mut rng = Rng::new(10);
    let x = Tensor::new(vec![6], random_vec(&mut rng, 6, 0.1, 1.0)).unwrap();
    // x feeds two consumers whose results are added
    check_graph("fanout", vec![x], 6, 21, |tape, ids| {
        let a = tape.activation(ids[0], ActivationKind::Sigmoid).unwrap();
        let b = tape.elementwise(ids[0], ids[0], BinaryKind::Mul).unwrap();
        tape.elementwise(a, b, BinaryKind::Add).unwrap()
    });
}

#[test]
fn gru_step_gradients() {
    let mut rng = Rng::new(11);
    let params = GruCellParams::<f64>::init(3, 4, false, &mut rng);
    let tensors = vec![
        Tensor::new(vec![3], random_vec(&mut rng, 3, -1.0, 1.0)).unwrap(),
        Tensor::new(vec![4], random_vec(&mut rng, 4, -0.8, 0.8)).unwrap(),
        params.w_r.clone(),
        params.u_r.clone(),
        params.w_mu.clone(),
        params.u_mu.clone(),
        params.w_cand.clone(),
        params.u_cand.clone(),
    ];
    check_graph("gru_step", tensors, 5, 22, |tape, ids| {
        let cell = dagru::recurrent::GruCellNodes {
            w_r: ids[2],
            u_r: ids[3],
            w_mu: ids[4],
            u_mu: ids[5],
            w_cand: ids[6],
            u_cand: ids[7],
            b_r: None,
            b_mu: None,
            b_cand: None,
        };
        gru_step(tape, ids[0], ids[1], &cell).unwrap().h
    });
}

#[test]
fn dual_attention_block_gradients() {
    let mut rng = Rng::new(12);
    let params = AttentionBlockParams::<f64>::init(4, 6, false, &mut rng);
    let tensors = vec![
        t3(4, 4, 4, random_vec(&mut rng, 64, -1.0, 1.0)),
        params.fc1.clone(),
        params.fc2.clone(),
        params.spatial_kernel.clone(),
    ];
    check_graph("dual_attention", tensors, 6, 23, |tape, ids| {
        let nodes = dagru::attention::AttentionParamNodes {
            fc1: ids[1],
            fc1_bias: None,
            fc2: ids[2],
            fc2_bias: None,
            spatial_kernel: ids[3],
        };
        dual_attention(tape, ids[0], &nodes).unwrap().f_rm
    });
}

#[test]
fn bptt_16_steps_through_three_layers() {
    let config = RecurrentConfig {
        layers: 3,
        hidden: 3,
        input_size: 4,
        sequence_length: 16,
        bidirectional: true,
        cell_bias: false,
    };
    let mut rng = Rng::new(13);
    let params = StackParams::<f64>::init(&config, 3, &mut rng);
    let features: Vec<Vec<f64>> = (0..16)
        .map(|_| random_vec(&mut rng, 4, -1.0, 1.0))
        .collect();
    let label = 1usize;

    let eval = |p: &StackParams<f64>| -> f64 {
        let mut tape = Tape::new();
        let nodes = insert_stack_params(&mut tape, p);
        let feats: Vec<NodeId> = features
            .iter()
            .map(|f| tape.leaf(Tensor::new(vec![4], f.clone()).unwrap()))
            .collect();
        let repr = stack_forward(&mut tape, &feats, &nodes, &config).unwrap();
        let probs = dagru::recurrent::classify(&mut tape, repr, nodes.classifier).unwrap();
        let loss = tape.cross_entropy(probs, label).unwrap();
        tape.value(loss).data()[0]
    };

    // analytic gradients once
    let mut tape = Tape::new();
    let nodes = insert_stack_params(&mut tape, &params);
    let feats: Vec<NodeId> = features
        .iter()
        .map(|f| tape.leaf(Tensor::new(vec![4], f.clone()).unwrap()))
        .collect();
    let repr = stack_forward(&mut tape, &feats, &nodes, &config).unwrap();
    let probs = dagru::recurrent::classify(&mut tape, repr, nodes.classifier).unwrap();
    let loss = tape.cross_entropy(probs, label).unwrap();
    tape.backward(loss).unwrap();

    // leaf ids aligned with tensors() order
    let mut leaf_ids = Vec::new();
    for layer in &nodes.cells {
        for cell in layer {
            leaf_ids.extend([cell.w_r, cell.u_r, cell.w_mu, cell.u_mu, cell.w_cand, cell.u_cand]);
        }
    }
    leaf_ids.push(nodes.classifier);

    let mut probe = params.clone();
    let mut rng = Rng::new(14);
    for _ in 0..20 {
        let which = rng.below(leaf_ids.len());
        let numel = tape.value(leaf_ids[which]).numel();
        let idx = rng.below(numel);
        let analytic = tape.grad(leaf_ids[which]).map_or(0.0, |g| g[idx]);

        let x0 = probe.tensors()[which].data()[idx];
        probe.tensors_mut()[which].data_mut()[idx] = x0 + FD_STEP;
        let plus = eval(&probe);
        probe.tensors_mut()[which].data_mut()[idx] = x0 - FD_STEP;
        let minus = eval(&probe);
        probe.tensors_mut()[which].data_mut()[idx] = x0;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        assert_grad_close(analytic, numeric, &format!("bptt tensor {which} coord {idx}"));
    }
}

#[test]
fn backbone_gradients_on_sampled_params() {
    let config = BackboneConfig::with_input(16, 16);
    let params = build_backbone::<f64>(&config, 88).unwrap();
    let mut rng = Rng::new(89);
    let frame = Tensor::from_fn(vec![16, 16, 3], |_| rng.next_f64());
    let weights = random_vec(&mut rng, 64, -1.0, 1.0);

    let eval = |p: &dagru::backbone::BackboneParams<f64>| -> f64 {
        let mut tape = Tape::new();
        let f = tape.leaf(frame.clone());
        let nodes = insert_backbone_params(&mut tape, p);
        let fwd = backbone_forward(&mut tape, f, &nodes, &config).unwrap();
        let loss = weighted_scalar(&mut tape, fwd.feature, &weights);
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let f = tape.leaf(frame.clone());
    let nodes = insert_backbone_params(&mut tape, &params);
    let fwd = backbone_forward(&mut tape, f, &nodes, &config).unwrap();
    let loss = weighted_scalar(&mut tape, fwd.feature, &weights);
    tape.backward(loss).unwrap();

    let mut leaf_ids: Vec<NodeId> = nodes.conv_kernels.clone();
    for block in &nodes.attention_blocks {
        leaf_ids.extend([block.fc1, block.fc2, block.spatial_kernel]);
    }

    let mut probe = params.clone();
    for _ in 0..20 {
        let which = rng.below(leaf_ids.len());
        let numel = tape.value(leaf_ids[which]).numel();
        let idx = rng.below(numel);
        let analytic = tape.grad(leaf_ids[which]).map_or(0.0, |g| g[idx]);

        let x0 = probe.tensors()[which].data()[idx];
        probe.tensors_mut()[which].data_mut()[idx] = x0 + FD_STEP;
        let plus = eval(&probe);
        probe.tensors_mut()[which].data_mut()[idx] = x0 - FD_STEP;
        let minus = eval(&probe);
        probe.tensors_mut()[which].data_mut()[idx] = x0;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        assert_grad_close(
            analytic,
            numeric,
            &format!("backbone tensor {which} coord {idx}"),
        );
    }
}

#[test]
fn small_full_model_gradients() {
    let config = ModelConfig {
        backbone: BackboneConfig::with_input(16, 16),
        recurrent: RecurrentConfig {
            sequence_length: 4,
            ..Default::default()
        },
        labels: vec!["a".into(), "b".into(), "c".into()],
    };
    let params: ModelParams<f64> = build_model(config.clone(), 90).unwrap().params.cast();
    let mut rng = Rng::new(91);
    let sample = ClipSample {
        frames: (0..4)
            .map(|_| Tensor::from_fn(vec![16, 16, 3], |_| rng.next_f64()))
            .collect(),
        label: 2,
    };

    let (_, _, grads) = sample_gradients(&params, &config, &sample).unwrap();

    let eval = |p: &ModelParams<f64>| -> f64 {
        let mut tape = Tape::new();
        let nodes = insert_model_params(&mut tape, p);
        let probs = window_forward(&mut tape, &sample.frames, &nodes, &config).unwrap();
        let loss = tape.cross_entropy(probs, sample.label).unwrap();
        tape.value(loss).data()[0]
    };

    let mut probe = params.clone();
    let n_tensors = grads.len();
    for _ in 0..15 {
        let which = rng.below(n_tensors);
        let numel = grads[which].numel();
        let idx = rng.below(numel);
        let analytic = grads[which].data()[idx];

        let x0 = probe.tensors()[which].data()[idx];
        probe.tensors_mut()[which].data_mut()[idx] = x0 + FD_STEP;
        let plus = eval(&probe);
        probe.tensors_mut()[which].data_mut()[idx] = x0 - FD_STEP;
        let minus = eval(&probe);
        probe.tensors_mut()[which].data_mut()[idx] = x0;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        assert_grad_close(
            analytic,
            numeric,
            &format!("full model tensor {which} coord {idx}"),
        );
    }
}
