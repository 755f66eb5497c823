//! Command-line surface of the activity recognition engine: synthetic data
//! generation, frame import, training, evaluation, prediction, saliency
//! export and the throughput benchmark.

mod config_file;

use clap::{Parser, Subcommand};
use config_file::FileConfig;
use dagru::backbone::BackboneConfig;
use dagru::bench::bench;
use dagru::data::{
    class_labels, import_frames, load_clip, load_manifest, make_sequences, preprocess,
    synth_dataset, Split, SynthSpec,
};
use dagru::model::{argmax, build_model, load_model, predict_clip, save_model, ModelConfig};
use dagru::pnm::write_pgm;
use dagru::recurrent::RecurrentConfig;
use dagru::training::{evaluate, train, EarlyStop, TrainConfig};
use dagru::{Error, Result, Tensor};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dagru",
    about = "Dual-attention CNN + bidirectional GRU video activity recognition",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic motion dataset (classes differ only in frame order)
    SynthData {
        /// Output directory for clips and manifest.csv
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        clips_per_class: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Square clip resolution (multiple of 16)
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// key = value config file (CLI flags win)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pack a directory of binary PPM (P6) frames into a clip file
    ImportFrames {
        /// Directory containing .ppm frames (packed in sorted name order)
        #[arg(long)]
        frames_dir: PathBuf,
        /// Output .dacl clip path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a manifest and save the best-validation checkpoint
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Output model path
        #[arg(long)]
        out: PathBuf,
        /// Square model input resolution (multiple of 16)
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        beta1: Option<f64>,
        #[arg(long)]
        beta2: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sequence_length: Option<usize>,
        /// Stop early once both --target-train-acc and --target-val-acc hold
        #[arg(long)]
        target_train_acc: Option<f64>,
        #[arg(long)]
        target_val_acc: Option<f64>,
        /// Use forward-only GRU layers (ablation)
        #[arg(long)]
        unidirectional: bool,
        /// Write per-epoch history CSV here
        #[arg(long)]
        history: Option<PathBuf>,
        /// Worker threads (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a model on one split of a manifest
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// train, val or test
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Classify a clip and print per-class probabilities
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clip: PathBuf,
    },
    /// Export the four spatial attention maps of one frame as PGM images
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        /// Frame index within the clip
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Output directory for map_1.pgm .. map_4.pgm
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure inference throughput (SPF / FPS)
    Bench {
        /// Model to benchmark (a fresh seeded model is built if omitted)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Input resolution for the fresh model (multiple of 16)
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        timed: Option<usize>,
        /// Thread count for the multi-threaded pass (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            out,
            classes,
            clips_per_class,
            frames,
            size,
            train_fraction,
            seed,
            config,
        } => {
            let file = FileConfig::load(config.as_deref())?;
            let spec = SynthSpec {
                num_classes: file.resolve(classes, "classes", 3)?,
                clips_per_class: file.resolve(clips_per_class, "clips_per_class", 20)?,
                frames: file.resolve(frames, "frames", 16)?,
                size: file.resolve(size, "size", 32)?,
                train_fraction: file.resolve(train_fraction, "train_fraction", 0.7)?,
            };
            let seed = file.resolve(seed, "seed", 7)?;
            let rows = synth_dataset(&spec, seed, &out)?;
            println!(
                "wrote {} clips and {} (classes: {})",
                rows.len(),
                out.join("manifest.csv").display(),
                class_labels(&rows).join(", ")
            );
            Ok(())
        }

        Command::ImportFrames { frames_dir, out } => {
            let clip = import_frames(&frames_dir, &out)?;
            println!(
                "packed {} frames of {}x{} into {}",
                clip.frame_count,
                clip.width,
                clip.height,
                out.display()
            );
            Ok(())
        }

        Command::Train {
            manifest,
            out,
            input_size,
            epochs,
            batch_size,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            seed,
            sequence_length,
            target_train_acc,
            target_val_acc,
            unidirectional,
            history,
            threads,
            config,
        } => {
            let file = FileConfig::load(config.as_deref())?;
            let input = file.resolve(input_size, "input_size", 64)?;
            let sequence_length = file.resolve(sequence_length, "sequence_length", 16)?;
            let train_config = TrainConfig {
                learning_rate: file.resolve(learning_rate, "learning_rate", 1e-4)?,
                batch_size: file.resolve(batch_size, "batch_size", 16)?,
                epochs: file.resolve(epochs, "epochs", 200)?,
                adam_beta1: file.resolve(beta1, "beta1", 0.9)?,
                adam_beta2: file.resolve(beta2, "beta2", 0.999)?,
                adam_epsilon: file.resolve(epsilon, "epsilon", 1e-8)?,
                seed: file.resolve(seed, "seed", 7)?,
                sequence_length,
                early_stop: match (target_train_acc, target_val_acc) {
                    (None, None) => None,
                    (t, v) => Some(EarlyStop {
                        train_acc: t.unwrap_or(1.0),
                        val_acc: v.unwrap_or(1.0),
                    }),
                },
            };

            let rows = load_manifest(&manifest)?;
            let labels = class_labels(&rows);
            let model_config = ModelConfig {
                backbone: BackboneConfig::with_input(input, input),
                recurrent: RecurrentConfig {
                    bidirectional: !unidirectional,
                    sequence_length,
                    ..Default::default()
                },
                labels,
            };
            let bundle = build_model(model_config, train_config.seed)?;
            println!(
                "training {} parameters on {} ({} classes), up to {} epochs",
                bundle.params.param_count(),
                manifest.display(),
                bundle.config.num_classes(),
                train_config.epochs
            );

            let (best, history_data) = with_threads(threads, || {
                train(&bundle, &manifest, &train_config)
            })?;
            for r in &history_data.records {
                println!(
                    "epoch {:4}  loss {:.6}  train_acc {:.4}  val_acc {:.4}",
                    r.epoch, r.train_loss, r.train_acc, r.val_acc
                );
            }
            save_model(&best, &out)?;
            let best_val = history_data
                .records
                .iter()
                .map(|r| r.val_acc)
                .fold(f64::NEG_INFINITY, f64::max);
            println!(
                "saved best-validation model (val_acc {:.4}) to {}",
                best_val,
                out.display()
            );
            if let Some(path) = history {
                history_data.write_csv(&path)?;
                println!("wrote history to {}", path.display());
            }
            Ok(())
        }

        Command::Eval {
            model,
            manifest,
            split,
        } => {
            let bundle = load_model(&model)?;
            let split = Split::parse(&split)?;
            let report = evaluate(&bundle, &manifest, split)?;
            println!(
                "accuracy: {:.4} ({} clips, split {})",
                report.accuracy,
                report.total,
                split.as_str()
            );
            println!("confusion (rows = true class):");
            let width = bundle
                .config
                .labels
                .iter()
                .map(|l| l.len())
                .max()
                .unwrap_or(8);
            for (label, row) in bundle.config.labels.iter().zip(&report.confusion) {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:5}")).collect();
                println!("  {label:width$} {}", cells.join(" "));
            }
            Ok(())
        }

        Command::Predict { model, clip } => {
            let bundle = load_model(&model)?;
            let windows = clip_windows(&bundle, &clip)?;
            let probs = predict_clip(&bundle.params, &bundle.config, &windows)?;
            let best = argmax(&probs);
            let width = bundle
                .config
                .labels
                .iter()
                .map(|l| l.len())
                .max()
                .unwrap_or(8);
            for (label, p) in bundle.config.labels.iter().zip(&probs) {
                println!("{label:width$}  {p:.4}");
            }
            println!(
                "predicted: {} (confidence {:.4}, {} window(s))",
                bundle.config.labels[best],
                probs[best],
                windows.len()
            );
            Ok(())
        }

        Command::Saliency {
            model,
            clip,
            frame,
            out,
        } => {
            let bundle = load_model(&model)?;
            let raw = load_clip(&clip)?;
            if frame >= raw.frame_count {
                return Err(Error::data(format!(
                    "frame {frame} out of range: clip has {} frames",
                    raw.frame_count
                )));
            }
            let frames = preprocess::<f32>(
                &raw,
                bundle.config.backbone.input_height,
                bundle.config.backbone.input_width,
            )?;
            let maps = dagru::backbone::saliency_maps(
                &bundle.params.backbone,
                &bundle.config.backbone,
                &frames[frame],
            )?;
            std::fs::create_dir_all(&out)?;
            for (i, map) in maps.iter().enumerate() {
                let (h, w) = (map.shape()[0], map.shape()[1]);
                let pixels: Vec<u8> = map
                    .data()
                    .iter()
                    .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                    .collect();
                let path = out.join(format!("map_{}.pgm", i + 1));
                write_pgm(&path, h, w, &pixels)?;
                println!("wrote {} ({h}x{w})", path.display());
            }
            Ok(())
        }

        Command::Bench {
            model,
            input_size,
            warmup,
            timed,
            threads,
            seed,
            config,
        } => {
            let file = FileConfig::load(config.as_deref())?;
            let warmup = file.resolve(warmup, "warmup", 50)?;
            let timed = file.resolve(timed, "timed", 500)?;
            let seed = file.resolve(seed, "seed", 7)?;
            let multi = file.resolve(threads, "threads", default_threads())?;
            let bundle = match model {
                Some(path) => load_model(&path)?,
                None => {
                    let input = file.resolve(input_size, "input_size", 64)?;
                    build_model(
                        ModelConfig {
                            backbone: BackboneConfig::with_input(input, input),
                            recurrent: RecurrentConfig::default(),
                            labels: vec!["class0".into(), "class1".into(), "class2".into()],
                        },
                        seed,
                    )?
                }
            };
            println!(
                "benchmarking {} parameters at {}x{}",
                bundle.params.param_count(),
                bundle.config.backbone.input_width,
                bundle.config.backbone.input_height
            );
            let single = bench(&bundle, warmup, timed, 1, seed)?;
            println!("{}", single.human());
            println!("{}", single.record_line());
            if multi > 1 {
                let parallel = bench(&bundle, warmup, timed, multi, seed)?;
                println!("{}", parallel.human());
                println!("{}", parallel.record_line());
            }
            Ok(())
        }
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::data(format!("failed to build thread pool: {e}")))?;
            pool.install(f)
        }
    }
}

/// Load a clip and cut it into model-sized windows.
fn clip_windows(
    bundle: &dagru::model::ModelBundle,
    clip: &Path,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    let raw = load_clip(clip)?;
    let frames = preprocess::<f32>(
        &raw,
        bundle.config.backbone.input_height,
        bundle.config.backbone.input_width,
    )?;
    let seq = bundle.config.recurrent.sequence_length;
    let starts = make_sequences(raw.frame_count, seq)?;
    Ok(starts
        .iter()
        .map(|&s| frames[s..s + seq].to_vec())
        .collect())
}
