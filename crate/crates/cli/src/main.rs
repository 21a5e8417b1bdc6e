//! `reshade`: object reshading by per-image optimization.
//!
//! Exit codes: 0 success, 1 usage error, 2 stage failure, 3 validation
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use reshade_core::dip::NormalsBackendSpec;
use reshade_core::imaging::Placement;
use reshade_core::normals::{AnalyticEstimator, NormalEstimator, PretrainedEstimator};
use reshade_core::pipeline::{self, PipelineConfig};
use reshade_core::{decomposition, discriminator, features, pngio, synth};

#[derive(Parser)]
#[command(
    name = "reshade",
    about = "Regenerate an inserted object's shading so it matches the target scene",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Decomposition,
    Distortion,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalsBackend {
    Pretrained,
    Synthetic,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic training corpus.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        n_patches: usize,
        #[arg(long, default_value_t = 2)]
        perlin_freq: usize,
    },
    /// Train the albedo/shading decomposition network.
    TrainDecomposition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the normal/shading agreement discriminator.
    TrainDiscriminator {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the pretrained classifier and fine-tune it for
    /// illumination-robust features.
    FinetuneFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Generate the synthetic multi-light corpus into --data first if it
        /// does not exist.
        #[arg(long)]
        synthesize: bool,
    },
    /// Estimate surface normals for one image.
    EstimateNormals {
        #[arg(long, value_enum)]
        backend: NormalsBackend,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scene geometry for the synthetic backend.
        #[arg(long, default_value = "sphere")]
        scene: String,
        /// Checkpoint for the pretrained backend.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Reshade one object/scene pair.
    Reshade {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 0)]
        dx: i32,
        #[arg(long, default_value_t = 0)]
        dy: i32,
        #[arg(long, default_value_t = 1.0)]
        scale: f32,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Analytic geometry assumed for the source when no pretrained
        /// normals checkpoint is configured.
        #[arg(long, default_value = "sphere")]
        source_scene: String,
        /// Analytic geometry assumed for the target when no pretrained
        /// normals checkpoint is configured.
        #[arg(long, default_value = "plane")]
        target_scene: String,
    },
    /// Measure batched-noise throughput and optimization progress.
    BenchmarkDip {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 20.0)]
        budget_secs: f64,
        /// Comma-separated batch sizes.
        #[arg(long, default_value = "1,4")]
        batches: String,
    },
    /// Load and smoke-test every configured artifact.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the bundled synthetic demo end to end.
    Demo {
        #[arg(long, default_value = "demo_out")]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fail instead of training missing checkpoints.
        #[arg(long)]
        no_train: bool,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig, reshade_core::Error> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// Stage outcomes map onto the documented exit codes.
enum Outcome {
    Success,
    ValidationFailure,
}

fn run(cli: Cli) -> Result<Outcome, reshade_core::Error> {
    match cli.command {
        Command::GenData {
            kind,
            count,
            out_dir,
            seed,
            height,
            width,
            n_patches,
            perlin_freq,
        } => {
            match kind {
                DataKind::Decomposition => {
                    synth::write_decomposition_dataset(
                        &out_dir, count, height, width, n_patches, perlin_freq, seed,
                    )?;
                }
                DataKind::Distortion => {
                    synth::write_distortion_dataset(&out_dir, count, height, width, seed)?;
                }
            }
            log::info!("wrote {count} samples under {}", out_dir.display());
            Ok(Outcome::Success)
        }

        Command::TrainDecomposition { config, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let resolved = pipeline::resolve(&cfg);
            let train = resolved.decomposition_train_config();
            let widths = cfg
                .decomposition
                .widths
                .clone()
                .unwrap_or_else(decomposition::default_widths);
            let mut trained = decomposition::train_decomposition(&train, widths)?;
            trained.model.save(&out)?;
            log::info!(
                "trained decomposition: held-out reconstruction MSE {:.5}",
                trained.held_out_reconstruction_mse
            );
            println!(
                "final train loss {:.6e}, val loss {:.6e}, held-out reconstruction MSE {:.6e}",
                trained.history.train.last().unwrap_or(&f64::NAN),
                trained.history.val.last().unwrap_or(&f64::NAN),
                trained.held_out_reconstruction_mse
            );
            Ok(Outcome::Success)
        }

        Command::TrainDiscriminator { data, config, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let resolved = pipeline::resolve(&cfg);
            let mut train = resolved.discriminator_train_config();
            train.dataset_dir = data;
            let widths = cfg
                .discriminator
                .train
                .widths
                .clone()
                .unwrap_or_else(discriminator::default_widths);
            let options = discriminator::DiscOptions {
                zero_normals: cfg.discriminator.zero_normals,
                cutmix_prob: cfg.discriminator.cutmix_prob,
            };
            let mut trained = discriminator::train_discriminator(&train, widths, &options)?;
            trained.model.save(&out)?;
            println!(
                "held-out AUC {:.4}, localization IoU {:.4}",
                trained.held_out_auc, trained.held_out_iou
            );
            Ok(Outcome::Success)
        }

        Command::FinetuneFeatures {
            data,
            config,
            out,
            synthesize,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let resolved = pipeline::resolve(&cfg);
            if synthesize && !data.is_dir() {
                features::write_multilight_corpus(
                    &data,
                    cfg.data.feature_classes,
                    cfg.data.feature_scenes,
                    cfg.data.feature_lightings,
                    cfg.data.height,
                    cfg.data.width,
                    resolved.stage_seed(13),
                )?;
                log::info!("synthesized multi-light corpus at {}", data.display());
            }
            let mut train = resolved.features_train_config();
            train.dataset_dir = data;
            let options = features::FeatureOptions {
                lambda_c: cfg.features.lambda_c,
                pretrain_epochs: cfg.features.pretrain_epochs,
                groups_per_batch: cfg.features.groups_per_batch,
            };
            let widths = cfg
                .features
                .train
                .widths
                .clone()
                .unwrap_or_else(features::default_widths);
            let mut trained = features::finetune_features(&train, &options, widths)?;
            trained.model.save(&out)?;
            let (d_pre, d_post) = trained.held_out_distance;
            let (a_pre, a_post) = trained.held_out_accuracy;
            println!(
                "held-out group distance {d_pre:.5} -> {d_post:.5}; accuracy {a_pre:.3} -> {a_post:.3}"
            );
            Ok(Outcome::Success)
        }

        Command::EstimateNormals {
            backend,
            image,
            out,
            scene,
            ckpt,
        } => {
            let img = pngio::load_image(&image)?;
            let normals = match backend {
                NormalsBackend::Synthetic => {
                    let kind = scene.parse()?;
                    AnalyticEstimator { kind }.estimate(&img)?
                }
                NormalsBackend::Pretrained => {
                    let path = ckpt.ok_or_else(|| {
                        reshade_core::Error::Config(
                            "--ckpt is required with the pretrained backend".into(),
                        )
                    })?;
                    PretrainedEstimator::load(path)?.estimate(&img)?
                }
            };
            pngio::save_normals(&normals, &out)?;
            Ok(Outcome::Success)
        }

        Command::Reshade {
            source,
            mask,
            target,
            dx,
            dy,
            scale,
            config,
            out_dir,
            source_scene,
            target_scene,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let resolved = pipeline::resolve(&cfg);
            let normals = match &resolved.normals_ckpt {
                Some(p) => NormalsBackendSpec::Pretrained {
                    checkpoint: p.clone(),
                },
                None => NormalsBackendSpec::Synthetic {
                    source_scene,
                    target_scene,
                },
            };
            let job = reshade_core::dip::ReshadeJob {
                source: pngio::load_image(&source)?,
                source_mask: pngio::load_mask(&mask)?,
                target: pngio::load_image(&target)?,
                placement: Placement::new(dx, dy, scale)?,
                checkpoints: resolved.job_checkpoints(normals),
            };
            let dip = resolved.dip_config();
            let echo = cfg.to_toml_string();
            let result = pipeline::run_job_to_dir(&job, &dip, &echo, &out_dir)?;
            println!(
                "best iteration {}; outputs under {}",
                result.best_iteration,
                out_dir.display()
            );
            Ok(Outcome::Success)
        }

        Command::BenchmarkDip {
            config,
            out,
            budget_secs,
            batches,
        } => {
            let cfg = load_config(&config)?;
            let resolved = pipeline::resolve(&cfg);
            let b_values: Vec<usize> = batches
                .split(',')
                .map(|t| t.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| {
                    reshade_core::Error::Config(format!("bad --batches list: {batches}"))
                })?;
            let rows = pipeline::run_benchmark(&resolved, &b_values, budget_secs)?;
            let csv = pipeline::bench_rows_csv(&rows);
            print!("{csv}");
            if let (Some(base), Some(b4)) = (
                rows.iter().find(|r| r.batch == 1),
                rows.iter().find(|r| r.batch == 4),
            ) {
                let ratio = b4.decrease_rate / base.decrease_rate;
                println!(
                    "loss-decrease rate ratio (batch 4 vs 1): {ratio:.2}x; reference speedup for batched noise on accelerator hardware: >= 4x"
                );
            }
            if let Some(p) = out {
                std::fs::write(&p, csv)?;
                log::info!("wrote benchmark rows to {}", p.display());
            }
            Ok(Outcome::Success)
        }

        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            let resolved = pipeline::resolve(&cfg);
            let report = pipeline::validate_artifacts(&resolved);
            print!("{}", report.render());
            if report.all_ok() {
                Ok(Outcome::Success)
            } else {
                Ok(Outcome::ValidationFailure)
            }
        }

        Command::Demo {
            out_dir,
            config,
            no_train,
        } => {
            let cfg = load_config(&config)?;
            let resolved = pipeline::resolve(&cfg);
            let artifacts = pipeline::run_end_to_end(&resolved, &out_dir, !no_train)?;
            println!(
                "demo finished; report at {}",
                artifacts.out_dir.join("report.md").display()
            );
            println!(
                "surroundings untouched: {}; deterministic re-run: {:?}; albedo invariance MSE: {:?}",
                artifacts.checks.surroundings_exact,
                artifacts.checks.determinism_bit_exact,
                artifacts.checks.albedo_invariance_mse
            );
            Ok(Outcome::Success)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not usage errors
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::ValidationFailure) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
