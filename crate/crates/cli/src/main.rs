//! `logkv`: run compression sweeps, generate and validate traces, and
//! summarize metrics CSVs.
//!
//! Exit codes: 0 ok, 1 usage or config error, 2 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use logkv::harness::{
    format_summary, rows_from_csv, run_experiment, summarize, SyntheticSource, CONFIG_ECHO_FILE, METRICS_FILE,
};
use logkv::trace::{generate_synthetic_trace, validate_trace};
use logkv::{Error, ExperimentConfig, Mode, PolicyKind, SpikeModel, SyntheticSpec};

#[derive(Parser)]
#[command(
    name = "logkv",
    version,
    about = "Trace-driven KV-cache compression experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay traces through compressed caches and write metrics.csv.
    Run(RunArgs),
    /// Write a synthetic KVTR trace.
    GenTrace(GenArgs),
    /// Check a KVTR trace file and print its header.
    Validate { path: PathBuf },
    /// Average the mean rows of one or more metrics CSVs into a table.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace files; added to any listed in the config.
    #[arg(long = "trace")]
    traces: Vec<PathBuf>,
    /// Number of synthetic traces to generate.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Comma-separated: logquant, kivi, streaming_llm, h2o.
    #[arg(long, value_delimiter = ',')]
    policy: Vec<String>,
    /// Comma-separated: 2, 4 or 16.
    #[arg(long, value_delimiter = ',')]
    bits: Vec<u8>,
    /// Comma-separated full-precision budgets R.
    #[arg(long, value_delimiter = ',')]
    budget: Vec<usize>,
    /// Comma-separated: quantize_rest, evict_rest.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// Generator parameters (TOML); flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    /// log_uniform_spikes, uniform or recency_decay.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    decode_steps: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output trace file.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::GenTrace(args) => gen_trace(args),
        Command::Validate { path } => validate(path),
        Command::Report { csv, out } => report(csv, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.traces.extend(args.traces);
    if let Some(count) = args.synthetic {
        let spec = cfg.synthetic.take().map(|s| s.spec).unwrap_or_default();
        cfg.synthetic = Some(SyntheticSource { count, spec });
    }
    if !args.policy.is_empty() {
        cfg.policies = args
            .policy
            .iter()
            .map(|p| PolicyKind::parse(p))
            .collect::<logkv::Result<_>>()?;
    }
    if !args.bits.is_empty() {
        cfg.bits = args.bits;
    }
    if !args.budget.is_empty() {
        cfg.budgets = args.budget;
    }
    if !args.mode.is_empty() {
        cfg.modes = args
            .mode
            .iter()
            .map(|m| Mode::parse(m))
            .collect::<logkv::Result<_>>()?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    let out = run_experiment(&cfg)?;
    let path = out
        .write_to(&cfg.out_dir, &cfg)
        .map_err(|e| Failure::Usage(format!("writing {}: {e}", cfg.out_dir.display())))?;
    println!(
        "{} rows from {} streams -> {} (config echo in {})",
        out.rows.len(),
        out.reports.len(),
        path.display(),
        cfg.out_dir.join(CONFIG_ECHO_FILE).display()
    );
    print!("{}", format_summary(&summarize(&out.rows)));
    Ok(())
}

fn gen_trace(args: GenArgs) -> Result<(), Failure> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str::<SyntheticSpec>(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(m) = &args.model {
        spec.model =
            SpikeModel::parse(m).ok_or_else(|| Failure::Usage(format!("unknown spike model `{m}`")))?;
    }
    let overrides = [
        (&mut spec.prompt_len, args.prompt_len),
        (&mut spec.decode_steps, args.decode_steps),
        (&mut spec.head_dim, args.head_dim),
        (&mut spec.layers, args.layers),
        (&mut spec.heads, args.heads),
        (&mut spec.kv_heads, args.kv_heads),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let trace = generate_synthetic_trace(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    trace
        .write_file(&args.out)
        .map_err(|e| Failure::Usage(format!("writing {}: {e}", args.out.display())))?;
    println!("wrote {} ({} bytes)", args.out.display(), trace.header.file_len());
    Ok(())
}

fn validate(path: PathBuf) -> Result<(), Failure> {
    let summary = validate_trace(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    println!("{}: ok", path.display());
    println!("{summary}");
    Ok(())
}

fn report(csvs: Vec<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for path in &csvs {
        let path = if path.is_dir() {
            path.join(METRICS_FILE)
        } else {
            path.clone()
        };
        let text =
            std::fs::read_to_string(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        rows.extend(rows_from_csv(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?);
    }
    let table = format_summary(&summarize(&rows));
    match out {
        Some(p) => {
            std::fs::write(&p, table).map_err(|e| Failure::Usage(format!("writing {}: {e}", p.display())))?
        }
        None => print!("{table}"),
    }
    Ok(())
}
