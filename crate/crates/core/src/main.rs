use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crd_core::flow::SamplerConfig;
use crd_core::io::{self, line_chart_svg, read_params, read_table, write_params, PlotLayout, RunConfig, RunDir};
use crd_core::reward::bon_curve;
use crd_core::tensor::ParamSet;
use crd_core::tilt::run_oracle_suite;
use crd_core::trainer::{self, evaluate, MetricsRow};
use crd_core::Error;

#[derive(Parser)]
#[command(name = "crd", version, about = "Centered reward distillation on toy flow-matching tasks")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Defaults to the built-in desk task.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default: $CRD_RUN_ROOT/run-seed<seed>, else runs/...).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the frozen base model only.
    Pretrain(Common),
    /// Pretrain, then fine-tune.
    Train {
        #[command(flatten)]
        common: Common,
        /// Step checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the trainable and rollout copies of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Step checkpoint directory (default: latest in the run).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Best-of-N curve of a checkpoint (or of the base model).
    Bon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        n_max: usize,
        #[arg(long, default_value_t = 200)]
        repeats: usize,
        /// Use the base model instead of a fine-tuned checkpoint.
        #[arg(long)]
        base: bool,
    },
    /// Run the closed-form tilting checks and print a pass/fail table.
    TiltCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render metric columns of a run to SVG line charts.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Comma-separated columns (default: all but `step`).
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        /// Draw the selected columns in one chart.
        #[arg(long)]
        combined: bool,
    },
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => io::load_config(path)?,
        None => {
            log::info!("no --config given; using the built-in desk configuration");
            RunConfig::desk_default(0)
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, seed: u64) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| RunDir::default_path(&format!("run-seed{seed}")))
}

/// Config snapshot of an existing run, unless `--config` overrides it.
fn run_config(common: &Common) -> anyhow::Result<(RunDir, RunConfig)> {
    let Some(out) = &common.out else {
        bail!("--out <run dir> is required");
    };
    let dir = RunDir::open(out)?;
    let cfg = match &common.config {
        Some(_) => load(common)?,
        None => {
            let mut cfg = io::load_config(&dir.config_path())?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            cfg
        }
    };
    Ok((dir, cfg))
}

fn checkpoint(dir: &RunDir, resume: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    match resume {
        Some(p) => Ok(p.clone()),
        None => dir
            .latest_checkpoint()?
            .with_context(|| format!("{} has no step checkpoints", dir.root().display())),
    }
}

fn cmd_pretrain(common: &Common) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let out = out_dir(common, cfg.seed);
    let dir = RunDir::create(&out, &cfg)?;
    let p = trainer::pretrain(&cfg)?;
    write_params(&dir.phi_stem(), &p.phi)?;
    let mut w = io::MetricsWriter::create(&dir.root().join("pretrain_loss.csv"), &["step", "loss"])?;
    for (i, l) in p.losses.iter().enumerate() {
        w.append(&[(i + 1).to_string(), io::metrics::format_value(*l)])?;
    }
    println!(
        "pretrained {} steps; held-out loss {:.5} -> {:.5}; saved {}",
        p.losses.len(),
        p.held_out_initial,
        p.held_out_final,
        dir.phi_stem().display()
    );
    Ok(())
}

fn cmd_train(common: &Common, resume: &Option<PathBuf>) -> anyhow::Result<()> {
    let (cfg, out) = match resume {
        None => {
            let cfg = load(common)?;
            let out = out_dir(common, cfg.seed);
            (cfg, out)
        }
        Some(ckpt) => {
            let out = match &common.out {
                Some(o) => o.clone(),
                None => ckpt
                    .parent()
                    .and_then(Path::parent)
                    .context("cannot infer the run directory from --resume; pass --out")?
                    .to_path_buf(),
            };
            let snapshot = io::load_config(&RunDir::open(&out)?.config_path())?;
            let cfg = match &common.config {
                Some(_) => {
                    let cfg = load(common)?;
                    if cfg != snapshot {
                        log::warn!("--config differs from the run's snapshot; the given config is used");
                    }
                    cfg
                }
                None => snapshot,
            };
            (cfg, out)
        }
    };
    let summary = trainer::run(&cfg, &out, resume.as_deref())?;
    let last = summary.rows.last();
    println!(
        "run {}: {} steps; eval reward {:.4} (base {:.4}); kl_to_phi {:.4e}",
        summary.dir.root().display(),
        summary.state.step,
        last.map_or(summary.baseline.reward, |r| r.eval_reward),
        summary.baseline.reward,
        last.map_or(summary.baseline.kl_to_phi, |r| r.kl_to_phi),
    );
    Ok(())
}

fn cmd_eval(common: &Common, resume: &Option<PathBuf>) -> anyhow::Result<()> {
    let (dir, cfg) = run_config(common)?;
    let ckpt = checkpoint(&dir, resume)?;
    let phi = read_params(&dir.phi_stem())?;
    let mut report = serde_json::Map::new();
    report.insert("checkpoint".into(), ckpt.display().to_string().into());
    for name in ["theta", "theta_samp", "theta_old", "theta_eval"] {
        let stem = ckpt.join(name);
        if !io::checkpoint::manifest_path(&stem).exists() {
            continue;
        }
        let stats = evaluate(&read_params(&stem)?, &phi, &cfg)?;
        report.insert(name.into(), serde_json::to_value(stats)?);
    }
    report.insert("phi".into(), serde_json::to_value(evaluate(&phi, &phi, &cfg)?)?);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_bon(common: &Common, resume: &Option<PathBuf>, n_max: usize, repeats: usize, base: bool) -> anyhow::Result<()> {
    let (dir, cfg) = run_config(common)?;
    let params: ParamSet = if base {
        read_params(&dir.phi_stem())?
    } else {
        read_params(&checkpoint(&dir, resume)?.join("theta"))?
    };
    let sampler = SamplerConfig {
        num_steps: cfg.eval.sampler_steps,
        cfg_scale: cfg.eval.cfg_scale,
        seed: cfg.seed,
    };
    let curve = bon_curve(&params, &cfg.task, &cfg.reward, n_max, repeats, &sampler)?;
    let path = dir.root().join(if base { "bon_base.csv" } else { "bon.csv" });
    let mut w = io::MetricsWriter::create(&path, &["n", "mean_best", "mean_reward"])?;
    println!("{:>4}  {:>10}  {:>11}", "N", "best-of-N", "mean reward");
    for p in &curve {
        w.append(&[
            p.n.to_string(),
            io::metrics::format_value(p.mean_best),
            io::metrics::format_value(p.mean_reward),
        ])?;
        println!("{:>4}  {:>10.4}  {:>11.4}", p.n, p.mean_best, p.mean_reward);
    }
    let x: Vec<f64> = curve.iter().map(|p| p.n as f64).collect();
    let series = vec![
        ("best-of-N".to_string(), curve.iter().map(|p| p.mean_best).collect()),
        ("mean reward".to_string(), curve.iter().map(|p| p.mean_reward).collect()),
    ];
    let svg = line_chart_svg("Best-of-N", "N", &x, &series, &PlotLayout::default());
    let svg_path = dir.plots().join(if base { "bon_base.svg" } else { "bon.svg" });
    fs::create_dir_all(dir.plots())?;
    fs::write(&svg_path, svg).with_context(|| svg_path.display().to_string())?;
    Ok(())
}

fn cmd_tilt_check(seed: u64) -> anyhow::Result<bool> {
    let checks = run_oracle_suite(seed)?;
    println!("{:<44} {:>7} {:>12} {:>9}  result", "check", "cases", "max dev", "tol");
    for c in &checks {
        println!(
            "{:<44} {:>7} {:>12.3e} {:>9.1e}  {}",
            c.name,
            c.cases,
            c.max_deviation,
            c.tolerance,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(checks.iter().all(|c| c.passed))
}

/// A named column of values.
type Series = (String, Vec<f64>);

fn cmd_plot(common: &Common, columns: &[String], combined: bool) -> anyhow::Result<()> {
    let Some(out) = &common.out else {
        bail!("--out <run dir> is required");
    };
    let dir = RunDir::open(out)?;
    let table = read_table(&dir.metrics_path())?;
    let x = table.column("step").context("metrics file has no `step` column")?;
    let selected: Vec<String> = if columns.is_empty() {
        MetricsRow::HEADER[1..].iter().map(|s| s.to_string()).collect()
    } else {
        columns.to_vec()
    };
    let mut series = Vec::new();
    for name in &selected {
        let ys = table
            .column(name)
            .with_context(|| format!("no column `{name}` in {}", dir.metrics_path().display()))?;
        series.push((name.clone(), ys));
    }
    fs::create_dir_all(dir.plots())?;
    let layout = PlotLayout::default();
    let charts: Vec<(String, Vec<Series>)> = if combined {
        vec![(selected.join("+"), series)]
    } else {
        series.into_iter().map(|s| (s.0.clone(), vec![s])).collect()
    };
    for (name, group) in charts {
        let path = dir.plots().join(format!("{name}.svg"));
        fs::write(&path, line_chart_svg(&name, "step", &x, &group, &layout))
            .with_context(|| path.display().to_string())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(e) if e.is_numeric() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Pretrain(common) => cmd_pretrain(common).map(|_| true),
        Command::Train { common, resume } => cmd_train(common, resume).map(|_| true),
        Command::Eval { common, resume } => cmd_eval(common, resume).map(|_| true),
        Command::Bon {
            common,
            resume,
            n_max,
            repeats,
            base,
        } => cmd_bon(common, resume, *n_max, *repeats, *base).map(|_| true),
        Command::TiltCheck { seed } => cmd_tilt_check(*seed),
        Command::Plot {
            common,
            columns,
            combined,
        } => cmd_plot(common, columns, *combined).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
