//! Command-line front end: training, evaluation, ablation sweeps, routing
//! traces, and parameter accounting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moelora::adapters::{lora_trainable_params, moelora_trainable_params};
use moelora::harness::{
    evaluate, load_run, run_ablation, run_training, save_run, task_for, write_ablation_csv,
    write_reports, AblationSpec, HarnessError, ToyModel, TrainConfig, TrainingRun,
};
use moelora::tracer::{export, token_frequency_table, ExportFormat};

const PRECEDENCE_NOTE: &str =
    "Precedence: command-line flags override config-file values, which override built-in \
     defaults (8 experts of rank 4, top-2 routing, tau 0.07, alpha = beta = 0.01).";

#[derive(Parser)]
#[command(
    name = "moelora",
    about = "Mixture-of-experts LoRA training and routing analysis",
    after_help = PRECEDENCE_NOTE
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic clustered task; writes checkpoint, step
    /// reports, and a routing trace
    Train(TrainArgs),
    /// Evaluate a checkpoint on fresh batches of its training task
    Eval(EvalArgs),
    /// Sweep top_k and/or contrastive-weight axes over several seeds
    Ablate(AblateArgs),
    /// Export routing statistics for a checkpoint
    Trace(TraceArgs),
    /// Print trainable-parameter counts for LoRA and MoELoRA side by side
    Params(ParamsArgs),
}

/// Config-file overrides valid for both train and ablate.
#[derive(Args)]
struct CommonOverrides {
    /// Training steps (overrides the config file)
    #[arg(long)]
    steps: Option<usize>,
    /// Tokens per batch (overrides the config file)
    #[arg(long)]
    batch_size: Option<usize>,
    /// SGD/Adam learning rate (overrides the config file)
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Experts per layer (overrides the config file)
    #[arg(long)]
    n_experts: Option<usize>,
    /// Rank of each expert's adapter (overrides the config file)
    #[arg(long)]
    lora_rank: Option<usize>,
    /// Load-balance loss weight (overrides the config file)
    #[arg(long)]
    alpha: Option<f64>,
    /// Contrastive temperature (overrides the config file)
    #[arg(long)]
    tau: Option<f64>,
    /// Renormalize retained top-k weights to sum to 1 (overrides the
    /// config file)
    #[arg(long)]
    renormalize_topk: Option<bool>,
    /// L2-normalize contrastive anchors (overrides the config file)
    #[arg(long)]
    normalize_embeddings: Option<bool>,
    /// Count top-k occupancy instead of argmax in the balance loss
    /// (overrides the config file)
    #[arg(long)]
    balance_count_topk: Option<bool>,
}

impl CommonOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.n_experts {
            cfg.n_experts = v;
        }
        if let Some(v) = self.lora_rank {
            cfg.lora_rank = v;
        }
        if let Some(v) = self.alpha {
            cfg.aux.alpha = v;
        }
        if let Some(v) = self.tau {
            cfg.aux.tau = v;
        }
        if let Some(v) = self.renormalize_topk {
            cfg.renormalize_topk = v;
        }
        if let Some(v) = self.normalize_embeddings {
            cfg.normalize_embeddings = v;
        }
        if let Some(v) = self.balance_count_topk {
            cfg.balance_count_topk = v;
        }
    }
}

/// Single-run overrides that collide with ablation axes, so only `train`
/// takes them.
#[derive(Args)]
struct RunOverrides {
    /// RNG seed (overrides the config file)
    #[arg(long)]
    seed: Option<u64>,
    /// Experts each token is routed to (overrides the config file)
    #[arg(long)]
    top_k: Option<usize>,
    /// Contrastive loss weight (overrides the config file)
    #[arg(long)]
    beta: Option<f64>,
}

impl RunOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.top_k {
            cfg.top_k = v;
        }
        if let Some(v) = self.beta {
            cfg.aux.beta = v;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; unspecified fields take built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (checkpoint/, reports.jsonl, trace.csv)
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    #[command(flatten)]
    overrides: CommonOverrides,
    #[command(flatten)]
    run_overrides: RunOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of evaluation batches
    #[arg(long, default_value_t = 8)]
    batches: usize,
    /// Tokens per evaluation batch
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Seed for the evaluation data stream
    #[arg(long, default_value_t = 1234)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON ablation spec ({"base": {...}, "top_k": [...], "beta": [...],
    /// "seeds": [...]}); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path
    #[arg(long, default_value = "runs/ablation.csv")]
    out: PathBuf,
    /// Comma-separated top_k axis (overrides the spec)
    #[arg(long, value_delimiter = ',')]
    top_k: Option<Vec<usize>>,
    /// Comma-separated contrastive-weight axis (overrides the spec)
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    /// Comma-separated seeds (overrides the spec)
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    overrides: CommonOverrides,
}

#[derive(Args)]
struct TraceArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output path (CSV gains a .metrics.json companion)
    #[arg(long, default_value = "runs/trace.csv")]
    out: PathBuf,
    /// Output format
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
    /// Number of traced batches
    #[arg(long, default_value_t = 8)]
    batches: usize,
    /// Tokens per traced batch
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Seed for the traced data stream
    #[arg(long, default_value_t = 1234)]
    seed: u64,
}

#[derive(Args)]
struct ParamsArgs {
    /// Width of each adapted matrix
    #[arg(long, default_value_t = 4096)]
    d: usize,
    /// Number of adapted matrices
    #[arg(long, default_value_t = 64)]
    matrices: usize,
    /// Rank of the single LoRA adapter
    #[arg(long, default_value_t = 36)]
    lora_rank: usize,
    /// Experts per mixture layer
    #[arg(long, default_value_t = 8)]
    n_experts: usize,
    /// Rank of each mixture expert
    #[arg(long, default_value_t = 4)]
    expert_rank: usize,
}

enum CliError {
    /// Bad invocation or config: exit 2.
    Usage(String),
    /// Failure while doing the work: exit 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Errors surfaced while loading or validating configuration.
fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Errors surfaced while running or writing results.
fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Trace(args) => cmd_trace(args),
        Command::Params(args) => cmd_params(args),
    }
}

fn load_base_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        Some(p) => TrainConfig::load(p).map_err(usage),
        None => Ok(TrainConfig::default()),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_base_config(args.config.as_deref())?;
    args.overrides.apply(&mut cfg);
    args.run_overrides.apply(&mut cfg);
    cfg.validate().map_err(usage)?;
    fs::create_dir_all(&args.out).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;

    let run: TrainingRun<f64> = run_training(&cfg).map_err(runtime)?;

    let ckpt = args.out.join("checkpoint");
    save_run(&ckpt, &run.config, &run.model).map_err(runtime)?;
    let reports = args.out.join("reports.jsonl");
    write_reports(&reports, &run.reports).map_err(runtime)?;
    let trace = args.out.join("trace.csv");
    export(&run.final_eval.summary, &trace, ExportFormat::Csv).map_err(runtime)?;

    let last = run.reports.last().expect("at least one step report");
    println!(
        "trained {} steps: task loss {:.6} -> {:.6}, eval loss {:.6}, routing nmi {:.4}",
        cfg.steps,
        run.reports[0].task_loss,
        last.task_loss,
        run.final_eval.mean_task_loss,
        run.final_eval.summary.nmi
    );
    println!("checkpoint: {}", ckpt.display());
    println!("reports:    {}", reports.display());
    println!("trace:      {}", trace.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (cfg, model): (TrainConfig, ToyModel<f64>) = load_run(&args.checkpoint).map_err(usage)?;
    let task = task_for::<f64>(&cfg).map_err(runtime)?;
    let report =
        evaluate(&model, &task, args.batches, args.batch_size, args.seed).map_err(runtime)?;
    let entropy_mean = report.summary.layers.iter().map(|l| l.entropy).sum::<f64>()
        / report.summary.layers.len() as f64;
    let line = serde_json::json!({
        "mean_task_loss": report.mean_task_loss,
        "nmi": report.summary.nmi,
        "entropy_mean": entropy_mean,
        "separation": report.summary.separation.map(|s| {
            serde_json::json!({ "intra": s.intra, "inter": s.inter })
        }),
    });
    println!("{line}");
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut spec = match args.config.as_deref() {
        Some(p) => {
            let body = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<AblationSpec>(&body)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => AblationSpec::default(),
    };
    args.overrides.apply(&mut spec.base);
    if let Some(ks) = args.top_k {
        spec.top_k = ks;
    }
    if let Some(bs) = args.beta {
        spec.beta = bs;
    }
    if let Some(ss) = args.seeds {
        spec.seeds = ss;
    }

    let rows = run_ablation::<f64>(&spec).map_err(|e| match e {
        HarnessError::Config { .. } => usage(e),
        other => runtime(other),
    })?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        }
    }
    write_ablation_csv(&args.out, &rows).map_err(runtime)?;
    println!("{} grid cells -> {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<(), CliError> {
    let (cfg, model): (TrainConfig, ToyModel<f64>) = load_run(&args.checkpoint).map_err(usage)?;
    let task = task_for::<f64>(&cfg).map_err(runtime)?;
    let report =
        evaluate(&model, &task, args.batches, args.batch_size, args.seed).map_err(runtime)?;

    let format = match args.format.as_str() {
        "json" => ExportFormat::Json,
        _ => ExportFormat::Csv,
    };
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        }
    }
    export(&report.summary, &args.out, format).map_err(runtime)?;

    println!("routing trace -> {}", args.out.display());
    println!("token type frequencies:");
    for (tag, count) in token_frequency_table(&report.records).map_err(runtime)? {
        println!("  {tag}: {count}");
    }
    Ok(())
}

fn cmd_params(args: ParamsArgs) -> Result<(), CliError> {
    if args.d == 0
        || args.matrices == 0
        || args.lora_rank == 0
        || args.n_experts == 0
        || args.expert_rank == 0
    {
        return Err(CliError::Usage(
            "params: every dimension must be >= 1".to_string(),
        ));
    }
    let lora = lora_trainable_params(args.matrices as u64, args.d as u64, args.lora_rank as u64);
    let moe = moelora_trainable_params(
        args.matrices as u64,
        args.d as u64,
        args.n_experts as u64,
        args.expert_rank as u64,
    );
    println!("d={} adapted_matrices={}", args.d, args.matrices);
    println!("lora    R={:<3}      trainable: {lora}", args.lora_rank);
    println!(
        "moelora n={} r={:<3}  trainable: {moe} (gate included)",
        args.n_experts, args.expert_rank
    );
    Ok(())
}
