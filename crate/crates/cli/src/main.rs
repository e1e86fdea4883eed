//! `wzsr`: train, evaluate and inspect successive-refinement Wyner-Ziv coders.
//!
//! Settings are resolved in this order, later sources winning: built-in scenario
//! defaults, the `--config` file, `--desk-scale`, then individual flags. The output
//! directory falls back to `$WZSR_OUT_DIR` when neither the config file nor
//! `--out-dir` names one.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use wzsr_core::bounds;
use wzsr_core::checkpoint::TOOL_VERSION;
use wzsr_core::config::{RunConfig, Scenario};
use wzsr_core::evaluator::{self, SweepCache};
use wzsr_core::trainer::{self, fit_prior, LogRow, PriorFitConfig};
use wzsr_core::{Checkpoint, Error, PriorKind};

const OUT_DIR_ENV: &str = "WZSR_OUT_DIR";

#[derive(Parser)]
#[command(name = "wzsr", version, about = "Learned successive-refinement Wyner-Ziv coding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on fresh samples.
    Eval(EvalArgs),
    /// Train or load one model per lambda and write rate-distortion rows.
    Sweep(SweepArgs),
    /// Export the encoder's bins over an x grid.
    ExportBinning(BinningArgs),
    /// Export decoder reconstructions over a y grid for fixed message prefixes.
    ExportRecon(ReconArgs),
    /// Write the analytic rate-distortion curves.
    Bounds(BoundsArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// `222`, `44` or `mono-N`.
    #[arg(long)]
    scenario: Option<String>,
    /// `marginal` or `conditional`.
    #[arg(long)]
    prior: Option<String>,
    /// Variance of `x - y`.
    #[arg(long = "noise-var")]
    noise_var: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "samples-per-epoch")]
    samples_per_epoch: Option<usize>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Reduced epochs and samples for desk-side runs.
    #[arg(long = "desk-scale")]
    desk_scale: bool,
    #[arg(long = "eval-samples")]
    eval_samples: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// After training, also fit a prior of the other kind to the frozen encoder so
    /// that evaluation reports both rate estimates.
    #[arg(long = "aux-prior")]
    aux_prior: bool,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Defaults to the sample count stored in the checkpoint's config.
    #[arg(long = "eval-samples")]
    eval_samples: Option<usize>,
    /// Evaluation seed; defaults to the checkpoint's config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// CSV destination; defaults to `eval.csv` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',', default_values_t = vec![5.0, 15.0, 50.0, 150.0, 500.0])]
    lambdas: Vec<f64>,
    /// Fail instead of training when a checkpoint is missing.
    #[arg(long = "no-train")]
    no_train: bool,
}

#[derive(Args)]
struct BinningArgs {
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    resolution: usize,
    /// Scan bounds; default `±4` standard deviations of `x`.
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f64>,
    /// Output path stem; `.csv`, `_message.csv` and `_transitions.csv` are appended.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconArgs {
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 2001)]
    resolution: usize,
    #[arg(long, default_value_t = -evaluator::RECON_SPAN, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = evaluator::RECON_SPAN, allow_hyphen_values = true)]
    hi: f64,
    /// Message prefix as comma-separated symbols, e.g. `0` or `1,0`; repeatable.
    /// Defaults to every prefix of every length.
    #[arg(long = "prefix")]
    prefixes: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long = "noise-var")]
    noise_var: f64,
    /// Comma-separated distortion grid; default 41 points spanning 0 to 4 bits of
    /// Wyner-Ziv rate.
    #[arg(long, value_delimiter = ',')]
    distortions: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config { .. }) => 2,
        Some(Error::Diverged { .. } | Error::NonFiniteGradient { .. } | Error::NonFinite(_)) => 3,
        Some(Error::Version { .. }) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::ExportBinning(a) => cmd_export_binning(a),
        Command::ExportRecon(a) => cmd_export_recon(a),
        Command::Bounds(a) => cmd_bounds(a),
    }
}

/// Builds the run configuration from a config file and flags.
fn resolve_config(a: &RunArgs) -> Result<RunConfig, Error> {
    let (mut cfg, file_sets_out_dir) = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let has_out = text.parse::<toml::Table>().map(|t| t.contains_key("out_dir")).unwrap_or(false);
            (RunConfig::from_toml_str(&text)?, has_out)
        }
        None => {
            let scenario = Scenario::parse(a.scenario.as_deref().unwrap_or("222"))?;
            let prior: PriorKind = a.prior.as_deref().unwrap_or("conditional").parse()?;
            let lambda = a
                .lambda
                .ok_or_else(|| config_error("lambda", "required without --config"))?;
            let nv = a
                .noise_var
                .ok_or_else(|| config_error("noise_variance", "required without --config"))?;
            (RunConfig::for_scenario(scenario, prior, lambda, nv, a.seed.unwrap_or(0)), false)
        }
    };
    if a.config.is_some() {
        if let Some(s) = &a.scenario {
            let (stages, alphabet) = Scenario::parse(s)?.stages_alphabet();
            cfg.scenario = s.clone();
            cfg.model.stages = stages;
            cfg.model.alphabet = alphabet;
        }
        if let Some(p) = &a.prior {
            cfg.model.prior_kind = p.parse()?;
        }
        if let Some(l) = a.lambda {
            cfg.train.lambda = l;
        }
        if let Some(v) = a.noise_var {
            cfg.train.noise_variance = v;
        }
        if let Some(s) = a.seed {
            cfg.train.seed = s;
        }
    }
    if a.desk_scale {
        cfg = cfg.desk_scale();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.samples_per_epoch {
        cfg.train.samples_per_epoch = s;
    }
    if let Some(n) = a.eval_samples {
        cfg.eval.samples = n;
    }
    match (&a.out_dir, file_sets_out_dir, std::env::var(OUT_DIR_ENV)) {
        (Some(d), _, _) => cfg.out_dir = d.display().to_string(),
        (None, false, Ok(env)) if !env.is_empty() => cfg.out_dir = env,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_error(key: &str, reason: &str) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

fn run_name(cfg: &RunConfig) -> String {
    format!(
        "{}-{}-lambda{}-seed{}",
        cfg.scenario,
        cfg.model.prior_kind,
        evaluator::lambda_label(cfg.train.lambda),
        cfg.train.seed
    )
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&a.run)?;
    let dir = Path::new(&cfg.out_dir).join(run_name(&cfg));
    fs::create_dir_all(&dir)?;
    let epochs = cfg.train.epochs;
    let mut progress = |rows: &[LogRow]| {
        let r = &rows[0];
        let rates: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.rate_term_bits)).collect();
        let mses: Vec<String> = rows.iter().map(|r| format!("{:.5}", r.mse)).collect();
        eprintln!(
            "epoch {:>3}/{epochs} tau {:.3} lr {:.1e} loss {:.4} rate [{}] mse [{}]",
            r.epoch + 1,
            r.tau,
            r.lr,
            r.total_loss,
            rates.join(" "),
            mses.join(" ")
        );
    };
    let out = match trainer::train_run_with(&cfg, &mut progress) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, last_good }) => {
            if let Some(ck) = last_good {
                let path = dir.join("last_good.wzsr");
                ck.save(&path)?;
                eprintln!("saved last good checkpoint to {}", path.display());
            }
            return Err(Error::Diverged { epoch, last_good: None }).context("training aborted");
        }
        Err(e) => return Err(e.into()),
    };
    if out.clipped_batches > 0 {
        eprintln!("gradient norm clipped on {} batches", out.clipped_batches);
    }
    let mut checkpoint = out.checkpoint;
    if a.aux_prior {
        let mut model = out.model;
        let kind = cfg.model.prior_kind.other();
        let ce = fit_prior(&mut model, kind, &PriorFitConfig::new(cfg.train.noise_variance, cfg.train.seed))?;
        eprintln!("auxiliary {kind} prior cross-entropy per stage: {ce:?}");
        checkpoint = trainer::make_checkpoint(&cfg, &model, checkpoint.meta.epochs_completed, checkpoint.meta.final_tau);
    }
    let ck_path = dir.join("checkpoint.wzsr");
    checkpoint.save(&ck_path)?;
    let log_path = dir.join("train_log.csv");
    let log = format!(
        "{}{}",
        evaluator::artifact_header(&checkpoint.hash(), cfg.train.seed),
        trainer::log_csv(&out.log)
    );
    write(&log_path, &log)?;
    write(&dir.join("config.toml"), &cfg.to_toml_string())?;
    println!("{}", ck_path.display());
    println!("{}", log_path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = evaluator::model_from_checkpoint(&ck)?;
    let mut eval = ck.meta.config.eval.clone();
    if let Some(n) = a.eval_samples {
        eval.samples = n;
    }
    if let Some(s) = a.seed {
        eval.seed = s;
    }
    let reports = evaluator::evaluate_parallel(&model, ck.meta.config.train.noise_variance, &eval, a.threads)?;
    let csv = format!(
        "{}{}",
        evaluator::artifact_header(&ck.hash(), eval.seed),
        evaluator::report_csv(&reports)
    );
    let out = a
        .out
        .unwrap_or_else(|| a.checkpoint.with_file_name("eval.csv"));
    write(&out, &csv)?;
    print!("{}", evaluator::report_table(&reports));
    println!("{}", out.display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let mut args = a.run.clone();
    if args.config.is_none() && args.lambda.is_none() {
        args.lambda = a.lambdas.first().copied();
    }
    let cfg = resolve_config(&args)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let cache = SweepCache {
        dir: out_dir.join("checkpoints"),
        allow_training: !a.no_train,
    };
    let result = evaluator::rd_sweep(&cfg, &a.lambdas, &cache)?;
    let header = format!(
        "# checkpoint_sha256={} seed={} tool={TOOL_VERSION} lambdas={}\n",
        result.checkpoint_hashes.join(";"),
        cfg.train.seed,
        a.lambdas.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";")
    );
    let path = out_dir.join(format!("rd-{}-{}.csv", cfg.scenario, cfg.model.prior_kind));
    write(&path, &format!("{header}{}", evaluator::rd_csv(&result.rows)))?;
    println!("{}", path.display());
    Ok(())
}

fn stem_or(checkpoint: &Path, out: Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| checkpoint.with_file_name(name))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_export_binning(a: BinningArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = evaluator::model_from_checkpoint(&ck)?;
    let (dlo, dhi) = evaluator::default_binning_range(ck.meta.config.train.noise_variance);
    let (lo, hi) = (a.lo.unwrap_or(dlo), a.hi.unwrap_or(dhi));
    let map = evaluator::export_binning(&model, lo, hi, a.resolution)?;
    let header = evaluator::artifact_header(&ck.hash(), ck.meta.seed);
    let stem = stem_or(&a.checkpoint, a.out, "binning");
    write(&with_suffix(&stem, ".csv"), &format!("{header}{}", map.csv()))?;
    write(&with_suffix(&stem, "_message.csv"), &format!("{header}{}", map.message_csv()))?;
    write(&with_suffix(&stem, "_transitions.csv"), &format!("{header}{}", map.transitions_csv()))?;
    println!("transitions per stage: {:?} (scan [{lo:.4}, {hi:.4}])", map.transition_counts());
    println!("{}", with_suffix(&stem, ".csv").display());
    Ok(())
}

fn parse_prefix(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad prefix symbol `{t}`")))
        .collect()
}

fn cmd_export_recon(a: ReconArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = evaluator::model_from_checkpoint(&ck)?;
    let (k, m) = (model.stages(), model.alphabet());
    let prefixes = if a.prefixes.is_empty() {
        (1..=k).flat_map(|len| evaluator::all_prefixes(len, m)).collect()
    } else {
        a.prefixes.iter().map(|p| parse_prefix(p)).collect::<anyhow::Result<Vec<_>>>()?
    };
    let maps = evaluator::export_reconstruction(&model, a.lo, a.hi, a.resolution, &prefixes)?;
    let path = stem_or(&a.checkpoint, a.out, "reconstruction.csv");
    let csv = format!(
        "{}{}",
        evaluator::artifact_header(&ck.hash(), ck.meta.seed),
        evaluator::reconstruction_csv(&maps, k, m)
    );
    write(&path, &csv)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_bounds(a: BoundsArgs) -> anyhow::Result<()> {
    let ds = if a.distortions.is_empty() {
        (0..41)
            .map(|i| bounds::wz_distortion(4.0 * i as f64 / 40.0, a.noise_var))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        a.distortions.clone()
    };
    if ds.is_empty() {
        bail!("empty distortion grid");
    }
    let pts = bounds::analytic_curves(a.noise_var, &ds)?;
    let text = format!(
        "# checkpoint_sha256=none seed=none tool={TOOL_VERSION} noise_variance={}\n{}",
        a.noise_var,
        bounds::bounds_csv(&pts)
    );
    match a.out {
        Some(p) => {
            write(&p, &text)?;
            println!("{}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
