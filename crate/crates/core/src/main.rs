use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dnat::checkpoint::{Checkpoint, CheckpointError};
use dnat::config::RunConfig;
use dnat::data::DataError;
use dnat::graph::{to_dot, GraphError};
use dnat::harness::{enumerate_discrete, run_experiment, ExperimentSpec};
use dnat::mixed::{theta_csv, RowKey};
use dnat::trainer::{continue_run, metrics_csv, TrainState, TransformMode};
use dnat::Error;

/// Exit codes. Stable; scripts may rely on them.
mod code {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DIVERGED: u8 = 3;
    pub const DISCONNECTED: u8 = 4;
    pub const IO: u8 = 5;
    pub const CHECKPOINT: u8 = 6;
    pub const ALL_RUNS_FAILED: u8 = 7;
}

#[derive(Parser)]
#[command(name = "dnat", version, about = "Differentiable architecture transformation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (TOML key = value file).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `workers`.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Json,
    Dot,
    ThetaCsv,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage transformation of the configured network.
    Transform(RunArgs),
    /// Plain training of the original network (transform with mode = off).
    TrainBaseline(RunArgs),
    /// Every configured method over every configured seed.
    Bench(RunArgs),
    /// Exhaustive short-train ranking of all discrete architectures.
    Oracle(RunArgs),
    /// Architecture JSON, DOT diff or θ CSV from a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Refuse the checkpoint unless it was produced by this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Graph(GraphError::InvalidConfig(_) | GraphError::UnknownTemplate(_)) => code::CONFIG,
            Error::Data(DataError::InvalidSpec(_)) => code::CONFIG,
            Error::Diverged { .. } => code::DIVERGED,
            Error::Repair(_) => code::DISCONNECTED,
            Error::Io { .. } | Error::Data(_) => code::IO,
            Error::Checkpoint(CheckpointError::Io { .. }) => code::IO,
            Error::Checkpoint(_) => code::CHECKPOINT,
            _ => code::OTHER,
        };
        Failure { code, message: e.to_string() }
    }
}

fn fail<E: Into<Error>>(e: E) -> Failure {
    e.into().into()
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure { code: code::IO, message: format!("{}: {e}", path.display()) })
}

fn load_config(args: &RunArgs) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = RunConfig::load(&args.config).map_err(fail)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    cfg.check().map_err(fail)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Failure { code: code::IO, message: format!("{}: {e}", out.display()) })?;
    Ok((cfg, out))
}

fn cmd_transform(args: &RunArgs, mode: Option<TransformMode>) -> Result<(), Failure> {
    let (mut cfg, out) = load_config(args)?;
    if let Some(m) = mode {
        cfg.transform_mode = m;
    }
    let hash = cfg.hash();
    let data = cfg.dataset().map_err(fail)?;
    let net = cfg.network().map_err(fail)?;
    let state = TrainState::new(cfg.train_config(cfg.transform_mode, cfg.seed), net).map_err(fail)?;
    let ckpt_path = out.join("checkpoint.dnat");
    let (trained, last) =
        continue_run(state, &data, |s| Checkpoint { config_hash: hash.clone(), state: s.clone() }.save(&ckpt_path).map_err(Error::from))
            .map_err(fail)?;
    Checkpoint { config_hash: hash.clone(), state: last }.save(&ckpt_path).map_err(fail)?;

    write(&out.join("architecture.json"), trained.network().to_json(Some(&hash)))?;
    write(&out.join("decisions.json"), trained.decisions.to_json(&hash))?;
    write(&out.join("metrics.csv"), format!("# config_hash: {hash}\n{}", metrics_csv(&trained.metrics)))?;
    write(&out.join("diff.dot"), to_dot(&trained.original, trained.network(), Some(&hash)).map_err(fail)?)?;

    for w in &trained.warnings {
        eprintln!("warning: {w}");
    }
    println!("config_hash {hash}");
    println!("test_accuracy {:.2}%", 100.0 * trained.test_accuracy);
    println!("changed_edges {}", trained.diff.changed_count());
    println!("params {} -> {}", trained.original_cost.params, trained.cost.params);
    println!("flops {} -> {}", trained.original_cost.flops, trained.cost.flops);
    println!("wall_seconds {:.3}", trained.wall_seconds);
    Ok(())
}

fn cmd_bench(args: &RunArgs) -> Result<(), Failure> {
    let (cfg, out) = load_config(args)?;
    let hash = cfg.hash();
    let data = cfg.dataset().map_err(fail)?;
    let spec = ExperimentSpec {
        model: cfg.model.to_string(),
        network: cfg.network().map_err(fail)?,
        train: cfg.train_config(cfg.transform_mode, cfg.seed),
        methods: cfg.methods.clone(),
        seeds: args.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]),
        workers: cfg.workers,
        config_hash: hash,
    };
    let report = run_experiment(&spec, &data).map_err(fail)?;
    write(&out.join("report.csv"), report.to_csv())?;
    let md = report.to_markdown();
    write(&out.join("report.md"), &md)?;
    report.write_dot_bundle(&out.join("dot")).map_err(fail)?;
    print!("{md}");
    for r in report.records.iter().filter(|r| r.outcome.is_err()) {
        eprintln!("run {} seed {} failed: {}", r.method, r.seed, r.outcome.as_ref().unwrap_err());
    }
    if report.all_failed() {
        return Err(Failure { code: code::ALL_RUNS_FAILED, message: "every run failed".into() });
    }
    Ok(())
}

fn cmd_oracle(args: &RunArgs) -> Result<(), Failure> {
    let (cfg, out) = load_config(args)?;
    let data = cfg.dataset().map_err(fail)?;
    let net = cfg.network().map_err(fail)?;
    let seeds = args.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let mut in_top_half = 0;
    for &seed in &seeds {
        let train = cfg.train_config(cfg.transform_mode, seed);
        let report = enumerate_discrete(&net, &data, train, cfg.oracle_epochs, cfg.workers).map_err(fail)?;
        write(&out.join(format!("oracle_seed{seed}.csv")), format!("# config_hash: {}\n{}", cfg.hash(), report.to_csv()))?;
        let all_same = vec![dnat::graph::Choice::Same; report.edges.len()];
        let picked: Vec<&str> = report.selected.iter().map(|c| c.as_str()).collect();
        println!(
            "seed {seed}: {} candidates, selected [{}] rank {} (accuracy {:.2}%), all-same rank {}",
            report.candidates(),
            picked.join(","),
            report.selected_rank,
            100.0 * report.selected_accuracy,
            report.rank_of(&all_same).unwrap_or(0),
        );
        in_top_half += report.selected_in_top_half() as usize;
    }
    println!("selected architecture in top half for {in_top_half} of {} seeds", seeds.len());
    Ok(())
}

fn cmd_export(checkpoint: &Path, format: ExportFormat, out: Option<&Path>, config: Option<&Path>) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint).map_err(fail)?;
    if let Some(path) = config {
        let expected = RunConfig::load(path).map_err(fail)?.hash();
        if expected != ck.config_hash {
            return Err(Failure {
                code: code::CHECKPOINT,
                message: format!("config hash mismatch: checkpoint has {}, {} hashes to {expected}", ck.config_hash, path.display()),
            });
        }
    }
    let s = &ck.state;
    let hash = &ck.config_hash;
    let text = match format {
        ExportFormat::Json => s.model.network.to_json(Some(hash)),
        ExportFormat::Dot => to_dot(&s.original, &s.model.network, Some(hash)).map_err(fail)?,
        ExportFormat::ThetaCsv => {
            let theta = s.theta.as_ref().ok_or_else(|| Failure {
                code: code::CONFIG,
                message: "checkpoint carries no θ (it was trained with transform_mode = off)".into(),
            })?;
            let rows: Vec<_> = theta.per_edge_rows(&s.model.params).into_iter().map(|(at, r)| (RowKey::Edge(at), r)).collect();
            format!("# config_hash: {hash}\n{}", theta_csv(&rows))
        }
    };
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Transform(a) => cmd_transform(a, None),
        Command::TrainBaseline(a) => cmd_transform(a, Some(TransformMode::Off)),
        Command::Bench(a) => cmd_bench(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Export { checkpoint, format, out, config } => cmd_export(checkpoint, *format, out.as_deref(), config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
