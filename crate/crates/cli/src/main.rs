use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dirmask_core::checks::format_report;
use dirmask_core::config::{Mode, PipelineConfig};
use dirmask_core::pipeline::{self, AblationAxis};

#[derive(Parser)]
#[command(name = "dirmask", version, about = "Direction-pooled instance mask heads on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON). Defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Oracle,
    Backbone,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train on a dataset and save parameters, loss log and config.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate on a dataset with ground-truth boxes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Saved parameters; oracle mode uses untrained heads without it.
        #[arg(long, value_name = "DIR")]
        params: Option<PathBuf>,
        /// Also write the metrics as eval.json here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable kernel.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model per value of an ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// features, distance_bins, num_directions, refinement, deformable or crop_size
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the axis defaults when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Write visualization panels for one scene.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(m) = c.mode {
        cfg.mode = match m {
            ModeArg::Oracle => Mode::Oracle,
            ModeArg::Backbone => Mode::Backbone,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

/// Runs a command; `Ok(false)` reports a failed check.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { common, scenes, out } => {
            let cfg = load_config(&common)?;
            let m = pipeline::cmd_gen(&cfg, scenes, &out)?;
            println!("wrote {} scenes to {} (content hash {})", m.count, out.display(), m.content_hash);
        }
        Command::Train { common, data, out } => {
            let cfg = load_config(&common)?;
            let model = pipeline::cmd_train(&cfg, &data, &out)?;
            let last = model.loss_curve.last().copied().unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {:.5}; params in {}", model.loss_curve.len(), last, out.display());
        }
        Command::Eval { common, data, params, out } => {
            let cfg = load_config(&common)?;
            let e = pipeline::cmd_eval(&cfg, &data, params.as_deref())?;
            print!("{}", e.to_table());
            if let Some(dir) = out {
                write_json(&dir, "eval.json", &e)?;
            }
        }
        Command::Gradcheck { common, out } => {
            let cfg = load_config(&common)?;
            let checks = pipeline::cmd_gradcheck(&cfg)?;
            print!("{}", format_report(&checks));
            if let Some(dir) = out {
                write_json(&dir, "gradcheck.json", &checks)?;
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::Ablate {
            common,
            axis,
            values,
            out,
        } => {
            let cfg = load_config(&common)?;
            let axis: AblationAxis = axis.parse()?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            let table = pipeline::cmd_ablate(&cfg, axis, &values)?;
            print!("{}", table.to_table());
            if let Some(dir) = out {
                write_json(&dir, "ablation.json", &table)?;
            }
        }
        Command::Viz {
            common,
            data,
            params,
            index,
            out,
        } => {
            let cfg = load_config(&common)?;
            let files = pipeline::cmd_viz(&cfg, &data, params.as_deref(), index, &out)?;
            if files.is_empty() {
                bail!("no panels written");
            }
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(2)
        }
    }
}
