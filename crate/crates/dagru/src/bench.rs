//! Inference throughput harness: seconds-per-frame / frames-per-second
//! over the backbone forward pass plus the amortized per-frame share of
//! the recurrent stack (one stack pass per sequence of frames).
//!
//! Timing is wall clock over the timed frames only; warmup frames and all
//! I/O and preprocessing are excluded.

use crate::backbone::{backbone_forward, insert_backbone_params};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::recurrent::{classify, insert_stack_params, stack_forward};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub spf: f64,
    pub fps: f64,
    pub warmup_frames: usize,
    pub timed_frames: usize,
    pub threads: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub note: String,
}

impl BenchReport {
    /// Machine-readable single-line record.
    pub fn record_line(&self) -> String {
        format!(
            "spf={} fps={} warmup={} timed={} threads={}",
            self.spf, self.fps, self.warmup_frames, self.timed_frames, self.threads
        )
    }

    pub fn human(&self) -> String {
        format!(
            "threads: {}\n  input: {}x{}\n  timed frames: {} (after {} warmup)\n  \
             SPF: {:.6} s/frame\n  FPS: {:.1}\n  note: {}",
            self.threads,
            self.input_width,
            self.input_height,
            self.timed_frames,
            self.warmup_frames,
            self.spf,
            self.fps,
            self.note
        )
    }
}

/// Feature vectors for a block of frames; parallelized over frames when a
/// multi-thread pool is active.
fn block_features(bundle: &ModelBundle, frames: &[Tensor<f32>], parallel: bool) -> Vec<Tensor<f32>> {
    let per_frame = |frame: &Tensor<f32>| {
        let mut tape = Tape::new();
        let leaf = tape.leaf(frame.clone());
        let nodes = insert_backbone_params(&mut tape, &bundle.params.backbone);
        let fwd = backbone_forward(&mut tape, leaf, &nodes, &bundle.config.backbone)
            .expect("bench frames match the model config");
        tape.value(fwd.feature).clone()
    };
    if parallel {
        frames.par_iter().map(per_frame).collect()
    } else {
        frames.iter().map(per_frame).collect()
    }
}

fn stack_pass(bundle: &ModelBundle, features: &[Tensor<f32>]) {
    let mut tape = Tape::new();
    let nodes = insert_stack_params(&mut tape, &bundle.params.stack);
    let feature_nodes: Vec<_> = features.iter().map(|f| tape.leaf(f.clone())).collect();
    let repr = stack_forward(&mut tape, &feature_nodes, &nodes, &bundle.config.recurrent)
        .expect("bench sequence length matches the model config");
    classify(&mut tape, repr, nodes.classifier).expect("classifier matches");
}

fn run_frames(bundle: &ModelBundle, frames: &[Tensor<f32>], count: usize, parallel: bool) {
    let seq = bundle.config.recurrent.sequence_length;
    let mut done = 0;
    while done < count {
        let block = (count - done).min(seq);
        let features = block_features(bundle, &frames[..block], parallel);
        // one recurrent pass per full sequence: the amortized per-frame share
        if block == seq {
            stack_pass(bundle, &features);
        }
        done += block;
    }
}

/// Measure single-model inference throughput with `threads` worker threads
/// (1 = strictly serial). Shapes and frame counts are deterministic; only
/// the timings vary between runs.
pub fn bench(
    bundle: &ModelBundle,
    warmup_frames: usize,
    timed_frames: usize,
    threads: usize,
    seed: u64,
) -> Result<BenchReport> {
    if timed_frames == 0 {
        return Err(Error::config("bench needs at least 1 timed frame"));
    }
    if threads == 0 {
        return Err(Error::config("bench needs at least 1 thread"));
    }
    bundle.config.validate()?;
    let (h, w) = (
        bundle.config.backbone.input_height,
        bundle.config.backbone.input_width,
    );
    let seq = bundle.config.recurrent.sequence_length;
    let mut rng = Rng::new(seed);
    let frames: Vec<Tensor<f32>> = (0..seq)
        .map(|_| Tensor::from_fn(vec![h, w, 3], |_| rng.next_f64() as f32))
        .collect();

    let time_it = |parallel: bool| {
        run_frames(bundle, &frames, warmup_frames, parallel);
        let start = Instant::now();
        run_frames(bundle, &frames, timed_frames, parallel);
        start.elapsed().as_secs_f64()
    };
    let elapsed = if threads == 1 {
        time_it(false)
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::data(format!("failed to build bench thread pool: {e}")))?;
        pool.install(|| time_it(true))
    };

    Ok(BenchReport {
        spf: elapsed / timed_frames as f64,
        fps: timed_frames as f64 / elapsed,
        warmup_frames,
        timed_frames,
        threads,
        input_height: h,
        input_width: w,
        note: "backbone forward + amortized recurrent stack; excludes I/O and preprocessing. \
               Reference CPU figures for this architecture class: 0.0049 SPF / 250 FPS."
            .to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::{build_model, ModelConfig};
    use crate::recurrent::RecurrentConfig;

    fn tiny_bundle() -> ModelBundle {
        build_model(
            ModelConfig {
                backbone: BackboneConfig::with_input(16, 16),
                recurrent: RecurrentConfig {
                    sequence_length: 4,
                    ..Default::default()
                },
                labels: vec!["a".into(), "b".into()],
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn report_reciprocal_and_record_shape() {
        let bundle = tiny_bundle();
        let report = bench(&bundle, 2, 8, 1, 3).unwrap();
        assert!((report.spf * report.fps - 1.0).abs() < 1e-9);
        assert!(report.spf > 0.0);
        let line = report.record_line();
        assert!(line.starts_with("spf="));
        assert!(line.contains(" fps="));
        assert!(line.ends_with("threads=1"));
    }

    #[test]
    fn multi_threaded_mode_runs() {
        let bundle = tiny_bundle();
        let report = bench(&bundle, 0, 4, 2, 3).unwrap();
        assert_eq!(report.threads, 2);
        assert!(report.fps > 0.0);
    }

    #[test]
    fn zero_timed_frames_rejected() {
        let bundle = tiny_bundle();
        assert!(bench(&bundle, 0, 0, 1, 3).is_err());
    }
}
