use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedgmm::experiment::{
    self, load_checkpoint, run_experiment, run_grid, OptimizerName, RunConfig, Summary,
};
use fedgmm::scenario::{self, DatasetMeta};
use fedgmm::{Error, ResponseKind};

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "fedgmm", version, about = "Federated deep GMM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario's splits and client shards.
    Gen(Common),
    /// Run an experiment (all seeds) and write traces and a summary.
    Run(Common),
    /// Diagnose a saved checkpoint on saved client shards.
    Diagnose(DiagnoseArgs),
    /// Rebuild summary.json from the traces in a directory.
    Summarize {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_response)]
    scenario: Option<ResponseKind>,
    #[arg(long)]
    optimizer: Option<OptimizerName>,
    #[arg(long, value_name = "B")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "N")]
    clients: Option<usize>,
    #[arg(long, value_name = "F")]
    alpha: Option<f64>,
    #[arg(long, value_name = "T")]
    rounds: Option<usize>,
    #[arg(long = "local-steps", value_name = "R")]
    local_steps: Option<usize>,
    #[arg(long, value_name = "K")]
    seeds: Option<usize>,
    #[arg(long, value_name = "N")]
    samples: Option<usize>,
    /// Sweep the fixed learning-rate x gamma grid.
    #[arg(long)]
    grid: bool,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Directory written by `gen`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Dataset name inside `--data` (defaults to the scenario name).
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long = "local-steps", default_value_t = 5)]
    local_steps: usize,
    #[arg(long)]
    tol: Option<f64>,
    /// Write the JSON here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn parse_response(s: &str) -> Result<ResponseKind, String> {
    s.parse()
}

fn resolve(args: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match (&args.config, args.scenario) {
        (Some(path), _) => RunConfig::from_path(path)?,
        (None, Some(response)) => RunConfig::with_response(response),
        (None, None) => {
            return Err(Error::Config {
                path: "scenario.response".into(),
                message: "pass --config or --scenario".into(),
            })
        }
    };
    if let Some(r) = args.scenario {
        cfg.scenario.response = r;
    }
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.run.output_dir = o.clone();
    }
    if let Some(o) = args.optimizer {
        cfg.optimizer.kind = o;
    }
    if let Some(b) = args.batch_size {
        cfg.optimizer.batch_size = Some(b);
    }
    if let Some(n) = args.clients {
        cfg.data.n_clients = n;
    }
    if let Some(a) = args.alpha {
        cfg.data.alpha = a;
    }
    if let Some(t) = args.rounds {
        cfg.fed.rounds = t;
    }
    if let Some(r) = args.local_steps {
        cfg.fed.local_steps = r;
    }
    if let Some(k) = args.seeds {
        cfg.run.n_seeds = k;
    }
    if let Some(n) = args.samples {
        cfg.scenario.n_train = n;
        cfg.scenario.n_val = n;
        cfg.scenario.n_test = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } | Error::NonFinite { .. } => EXIT_DIVERGENCE,
        _ => EXIT_CONFIG,
    }
}

fn summary_exit(s: &Summary) -> u8 {
    if s.failures.is_empty() {
        0
    } else if s.n_completed == 0 && s.failures.iter().all(|f| f.divergence) {
        EXIT_DIVERGENCE
    } else {
        EXIT_PARTIAL
    }
}

fn gen(args: &Common) -> Result<u8, Error> {
    let cfg = resolve(args)?;
    let seed = cfg.run.seed;
    let data = experiment::prepare_data(&cfg, seed)?;
    let (tr, va, te) = (&data.train, &data.val, &data.test);
    let dir = &cfg.run.output_dir;
    let name = cfg.scenario.response.as_str();
    let meta = DatasetMeta {
        scenario: cfg.scenario_spec(experiment::RunSeeds::derive(seed).data),
        y_mean: tr.y_mean,
        y_std: tr.y_std,
        n_clients: Some(cfg.data.n_clients),
        alpha: Some(cfg.data.alpha),
        partition_seed: Some(experiment::RunSeeds::derive(seed).partition),
    };
    scenario::save_splits(dir, name, (tr, va, te), &meta)?;
    scenario::save_shards(dir, name, &data.shards)?;
    scenario::save_shards(dir, &format!("{name}.val"), &data.val_shards)?;
    scenario::save_shards(dir, &format!("{name}.test"), &data.test_shards)?;
    eprintln!(
        "wrote {name} splits and {} shards per split to {}",
        data.shards.len(),
        dir.display()
    );
    Ok(0)
}

fn run(args: &Common) -> Result<u8, Error> {
    let cfg = resolve(args)?;
    if args.grid {
        let report = run_grid(&cfg)?;
        for p in &report.points {
            eprintln!(
                "lr_tau={:e} gamma={} mean_test_mse={:?} failures={}",
                p.lr_tau,
                p.gamma,
                p.summary.mean_test_mse,
                p.summary.failures.len()
            );
        }
        let worst = report.points.iter().map(|p| summary_exit(&p.summary)).max();
        return Ok(worst.unwrap_or(0));
    }
    let summary = run_experiment(&cfg)?;
    print_summary(&summary, &cfg.run.output_dir);
    Ok(summary_exit(&summary))
}

fn print_summary(s: &Summary, dir: &Path) {
    for f in &s.failures {
        eprintln!("run {} (seed {}) failed: {}", f.run_id, f.seed, f.error);
    }
    match (s.mean_test_mse, s.std_test_mse) {
        (Some(m), Some(sd)) => eprintln!(
            "{} runs, test MSE at best validation: {m:.4} +/- {sd:.4} ({})",
            s.n_completed,
            dir.display()
        ),
        _ => eprintln!("no completed runs ({})", dir.display()),
    }
}

fn diagnose(args: &DiagnoseArgs) -> Result<u8, Error> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let name = match &args.name {
        Some(n) => n.clone(),
        None => find_dataset_name(&args.data)?,
    };
    let shards = scenario::load_shards(&args.data, &name)?;
    let out = experiment::diagnose(&ckpt, &shards, args.gamma, args.local_steps, args.tol)?;
    let json = serde_json::to_string_pretty(&out)?;
    match &args.out {
        Some(p) => std::fs::write(p, json + "\n").map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?,
        None => println!("{json}"),
    }
    Ok(0)
}

fn find_dataset_name(dir: &Path) -> Result<String, Error> {
    let io = |e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        if let Some(n) = entry
            .file_name()
            .to_str()
            .and_then(|n| n.strip_suffix(".meta.json"))
        {
            names.push(n.to_string());
        }
    }
    match names.as_slice() {
        [one] => Ok(one.clone()),
        _ => Err(Error::Config {
            path: "--name".into(),
            message: format!("{} datasets in {}; pass --name", names.len(), dir.display()),
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Summarize { out } => experiment::summarize(out).map(|s| {
            print_summary(&s, out);
            summary_exit(&s)
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
