use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kvplace::experiment::{load_config, run_experiment, write_outputs, RunOptions};
use kvplace::trace::{read_scores, scores_to_trace, synthesize_trace, write_trace};
use kvplace::{DecodeTrace, SynthTraceSpec, TraceHeader};

#[derive(Parser)]
#[command(
    name = "kvplace",
    version,
    about = "KV-cache placement simulator for HBM + off-package DRAM"
)]
struct Cli {
    /// Worker threads for independent simulations (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write one CSV per run with per-step traffic and latencies.
    #[arg(long, global = true)]
    per_step: bool,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run { config: PathBuf },
    /// Write a synthetic trace.
    GenTrace(GenTraceArgs),
    /// Turn an attention-score stream into a trace.
    ConvertScores(ConvertArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// churn 0.05
    Low,
    /// churn 0.8
    High,
}

#[derive(Args)]
struct Shape {
    #[arg(long, default_value_t = 4)]
    layers: u32,
    #[arg(long, default_value_t = 2048)]
    prompt_len: u32,
    #[arg(long, default_value_t = 512)]
    decode_len: u32,
    #[arg(long, default_value_t = 4096)]
    entry_bytes: u64,
    #[arg(long, default_value_t = 0)]
    weight_bytes: u64,
}

impl Shape {
    fn header(&self) -> TraceHeader {
        TraceHeader {
            num_layers: self.layers,
            prompt_len: self.prompt_len,
            decode_len: self.decode_len,
            entry_bytes: self.entry_bytes,
            weight_bytes_per_layer: self.weight_bytes,
        }
    }
}

#[derive(Args)]
struct GenTraceArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    shape: Shape,
    #[arg(long, default_value_t = 0.6)]
    sparsity: f64,
    /// Sets churn unless --churn is given.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    churn: Option<f64>,
    /// Evolve each layer's important set separately.
    #[arg(long)]
    per_layer: bool,
}

#[derive(Args)]
struct ConvertArgs {
    /// Score file, one `<n> <l> <s1>,<s2>,...` line per step.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    sparsity: f64,
    #[command(flatten)]
    shape: Shape,
}

const USAGE: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => cmd_run(&cli, config),
        Command::GenTrace(args) => cmd_gen_trace(&cli, args),
        Command::ConvertScores(args) => cmd_convert_scores(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = Result<(), (u8, String)>;

fn cmd_run(cli: &Cli, config: &Path) -> CmdResult {
    let fail = |e: kvplace::experiment::ExperimentError| (e.exit_code() as u8, e.to_string());
    let cfg = load_config(config).map_err(fail)?;
    let opts = RunOptions {
        jobs: cli.jobs,
        seed: cli.seed,
        per_step: cli.per_step,
    };
    let outcome = run_experiment(&cfg, &opts).map_err(fail)?;
    let written = write_outputs(&outcome, &cfg.output_dir).map_err(fail)?;
    if !cli.quiet {
        println!(
            "{:<16} {:<28} {:>14} {:>10} {:>10} {:>10}",
            "point", "policy", "tokens/s", "hit", "vs_static", "vs_unlim"
        );
        for row in outcome.comparison_rows() {
            let hit = outcome
                .points
                .iter()
                .filter(|p| p.label == row.point)
                .flat_map(|p| &p.reports)
                .find(|r| r.policy == row.policy)
                .map_or(f64::NAN, |r| r.hbm_hit_rate);
            println!(
                "{:<16} {:<28} {:>14.1} {:>10.4} {:>10.4} {:>10.4}",
                row.point, row.policy, row.tokens_per_sec, hit, row.vs_static, row.vs_unlimited_hbm
            );
        }
        for path in written {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_gen_trace(cli: &Cli, args: &GenTraceArgs) -> CmdResult {
    let churn = args.churn.unwrap_or(match args.preset {
        Some(Preset::High) => 0.8,
        Some(Preset::Low) | None => 0.05,
    });
    let spec = SynthTraceSpec {
        header: args.shape.header(),
        sparsity: args.sparsity,
        churn,
        per_layer_independent: args.per_layer,
        seed: cli.seed.unwrap_or(0),
    };
    let trace = synthesize_trace(&spec).map_err(|e| (USAGE, e.to_string()))?;
    save(&trace, &args.out)?;
    summary(cli, &trace, &args.out);
    Ok(())
}

fn cmd_convert_scores(cli: &Cli, args: &ConvertArgs) -> CmdResult {
    let file = File::open(&args.scores).map_err(|e| (USAGE, format!("{}: {e}", args.scores.display())))?;
    let rows = read_scores(BufReader::new(file));
    let trace = scores_to_trace(rows, args.sparsity, args.shape.header())
        .map_err(|e| (USAGE, format!("{}: {e}", args.scores.display())))?;
    save(&trace, &args.out)?;
    summary(cli, &trace, &args.out);
    Ok(())
}

fn save(trace: &DecodeTrace, path: &Path) -> CmdResult {
    let io = |e: std::io::Error| (1, format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_trace(trace, &mut w).and_then(|_| w.flush()).map_err(io)
}

fn summary(cli: &Cli, trace: &DecodeTrace, path: &Path) {
    if cli.quiet {
        return;
    }
    let h = trace.header();
    println!("wrote {}", path.display());
    println!("steps={}", h.num_steps());
    println!("footprint_bytes={}", h.final_kv_bytes());
    println!("mean_set_size={:.3}", trace.mean_set_size());
}
