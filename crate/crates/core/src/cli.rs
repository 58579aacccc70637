//! Command-line interface: `gen`, `train`, `eval`, `infer`, `render`.
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::gen::GenConfig;
use crate::io::{load_checkpoint, IoError};
use crate::nn::ModelConfig;
use crate::pipeline::{self, EvalOptions, PipelineError, Selection};
use crate::train::{AugmentConfig, StepRecord, TrainConfig};

/// Optional TOML config file with `[model]`, `[train]`, and `[gen]` sections;
/// missing fields take the built-in defaults. Command-line flags override it.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
}

#[derive(Parser)]
#[command(
    name = "boxpose",
    version,
    about = "6DoF object pose estimation from bounding-box corner heatmaps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum SelectionArg {
    /// Farthest point sampling over reference camera centers.
    Fps,
    /// Top-k cosine similarity of pooled image features.
    Neighbors,
    /// Every stored reference.
    All,
}

impl From<SelectionArg> for Selection {
    fn from(s: SelectionArg) -> Selection {
        match s {
            SelectionArg::Fps => Selection::Fps,
            SelectionArg::Neighbors => Selection::Neighbors,
            SelectionArg::All => Selection::All,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cuboid dataset.
    Gen {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes to generate.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML config file (the `[gen]` section applies).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a generated dataset.
    Train {
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// TOML config file (`[model]` and `[train]` sections apply).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Peak learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Fine-loss weight (default 2.0).
        #[arg(long)]
        lambda: Option<f64>,
        /// Target/conditioning heatmap sigma as a fraction of object size
        /// (default 0.25).
        #[arg(long)]
        sigma_scale: Option<f64>,
        /// Scenes per optimizer step.
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Disable all data augmentation.
        #[arg(long)]
        no_augment: bool,
        /// Also write per-step loss lines to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or the geometry-only bypass) on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; required unless --gt-bypass is set.
        #[arg(long, required_unless_present = "gt_bypass")]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        n_refs: usize,
        #[arg(long, value_enum, default_value_t = SelectionArg::Fps)]
        selection: SelectionArg,
        /// Skip the network and decode encoded ground-truth heatmaps.
        #[arg(long)]
        gt_bypass: bool,
        /// Occluder budget as a fraction of the query mask area (0 = off).
        #[arg(long, default_value_t = 0.0)]
        occlusion: f64,
        /// Minimum decoded-corner confidence fed to PnP.
        #[arg(long, default_value_t = 0.3)]
        min_conf: f64,
        /// Reference-conditioning heatmap spread; must match training.
        #[arg(long, default_value_t = 0.25)]
        sigma_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate and print the pose for one scene directory.
    Infer {
        /// Scene directory (one of a dataset's scene_NNNNN dirs).
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        n_refs: usize,
        #[arg(long, value_enum, default_value_t = SelectionArg::Fps)]
        selection: SelectionArg,
        #[arg(long, default_value_t = 0.3)]
        min_conf: f64,
        /// Reference-conditioning heatmap spread; must match training.
        #[arg(long, default_value_t = 0.25)]
        sigma_scale: f64,
    },
    /// Render ground-truth (green) and predicted (blue) box wireframes.
    Render {
        #[arg(long)]
        scene: PathBuf,
        /// Checkpoint; omit to render the ground-truth-bypass prediction.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output image (portable pixmap).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        n_refs: usize,
        #[arg(long, value_enum, default_value_t = SelectionArg::Fps)]
        selection: SelectionArg,
        #[arg(long, default_value_t = 0.3)]
        min_conf: f64,
        /// Reference-conditioning heatmap spread; must match training.
        #[arg(long, default_value_t = 0.25)]
        sigma_scale: f64,
    },
}

fn read_config(path: Option<&PathBuf>) -> Result<FileConfig, PipelineError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|source| {
        PipelineError::Io(IoError::File {
            path: path.clone(),
            source,
        })
    })?;
    toml::from_str(&text)
        .map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))
}

fn step_line(record: &StepRecord) -> String {
    format!(
        "step {} lr {} coarse {} fine {} total {}",
        record.step, record.lr, record.loss.coarse, record.loss.fine, record.loss.total
    )
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Gen {
            out,
            count,
            seed,
            config,
        } => {
            let cfg = read_config(config.as_ref())?;
            pipeline::cmd_gen(&out, count, seed, &cfg.gen)?;
            println!("generated {count} scenes in {}", out.display());
            Ok(())
        }
        Command::Train {
            data,
            out,
            config,
            steps,
            lr,
            lambda,
            sigma_scale,
            batch_size,
            seed,
            no_augment,
            log,
        } => {
            let cfg = read_config(config.as_ref())?;
            let mut tcfg = cfg.train;
            if let Some(v) = steps {
                tcfg.steps = v;
            }
            if let Some(v) = lr {
                tcfg.lr = v;
            }
            if let Some(v) = lambda {
                tcfg.lambda = v;
            }
            if let Some(v) = sigma_scale {
                tcfg.sigma_scale = v;
            }
            if let Some(v) = batch_size {
                tcfg.batch_size = v;
            }
            if let Some(v) = seed {
                tcfg.seed = v;
            }
            if no_augment {
                tcfg.augment = AugmentConfig::none();
            }
            let mut log_file = log
                .as_ref()
                .map(|p| {
                    fs::File::create(p).map_err(|source| {
                        PipelineError::Io(IoError::File {
                            path: p.clone(),
                            source,
                        })
                    })
                })
                .transpose()?
                .map(std::io::BufWriter::new);
            let mut emit = |record: &StepRecord| {
                let line = step_line(record);
                println!("{line}");
                if let Some(f) = log_file.as_mut() {
                    // I/O errors on the side log are not worth aborting a run.
                    let _ = writeln!(f, "{line}");
                }
            };
            pipeline::cmd_train(&data, &out, &cfg.model, &tcfg, &mut emit)?;
            println!("saved {}", out.display());
            Ok(())
        }
        Command::Eval {
            data,
            model,
            n_refs,
            selection,
            gt_bypass,
            occlusion,
            min_conf,
            sigma_scale,
            seed,
            out,
        } => {
            let loaded = model.as_deref().map(load_checkpoint).transpose()?;
            let opts = EvalOptions {
                n_refs,
                selection: selection.into(),
                gt_bypass,
                occlusion,
                min_conf,
                sigma_scale,
                seed,
            };
            let outcome = pipeline::cmd_eval(&data, loaded.as_ref(), &opts)?;
            let text = outcome.to_text();
            print!("{text}");
            if let Some(path) = out {
                fs::write(&path, &text).map_err(|source| {
                    PipelineError::Io(IoError::File { path, source })
                })?;
            }
            Ok(())
        }
        Command::Infer {
            scene,
            model,
            n_refs,
            selection,
            min_conf,
            sigma_scale,
        } => {
            let opts = EvalOptions {
                n_refs,
                selection: selection.into(),
                min_conf,
                sigma_scale,
                ..EvalOptions::default()
            };
            let result = pipeline::cmd_infer(&scene, &model, &opts)?;
            let r = &result.pose.rotation;
            let t = &result.pose.translation;
            for i in 0..3 {
                println!("pose {} {} {} {}", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
            }
            for i in 0..8 {
                println!(
                    "corner {i} {} {} conf {}",
                    result.corners.points[i].x, result.corners.points[i].y, result.confidence[i]
                );
            }
            println!("rms {}", result.rms);
            Ok(())
        }
        Command::Render {
            scene,
            model,
            out,
            n_refs,
            selection,
            min_conf,
            sigma_scale,
        } => {
            let opts = EvalOptions {
                n_refs,
                selection: selection.into(),
                min_conf,
                sigma_scale,
                ..EvalOptions::default()
            };
            pipeline::cmd_render(&scene, model.as_deref(), &opts, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

/// Parse arguments from the process environment and run. Returns the process
/// exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if help { 0 } else { 1 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
