//! `simvae`: generate a phantom corpus, train, sweep and analyze.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use simvae::config::{default_config_toml, RunConfig};
use simvae::pipeline::{self, AnalyzeRequest, MaskSpec, Task, CONFIG_FILE};
use simvae::sweep::GridKind;
use simvae::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "simvae", version, about = "Similarity-regularized 3D beta-VAE pipeline")]
struct Cli {
    /// Worker threads for training, sweeps and voxelwise analyses.
    #[arg(long, global = true, env = "SIMVAE_THREADS")]
    threads: Option<usize>,

    /// Root for run directories when --out is not given [default: output.root].
    #[arg(long, global = true, env = "SIMVAE_OUT")]
    out_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom corpus (volumes + manifest.csv).
    GenData {
        /// Run configuration; only the [corpus] section is used.
        #[arg(long, alias = "config")]
        spec: Option<PathBuf>,
        /// Output directory [default: a run directory under the output root].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Global seed; replaces every seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides corpus.subjects.
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Train a model; writes checkpoint.svae, metrics.csv and split.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory or manifest CSV.
        #[arg(long)]
        data: PathBuf,
        /// Output directory [default: a run directory under the output root].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Global seed; replaces every seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in --out if there is one.
        #[arg(long)]
        resume: bool,
    },
    /// Train every cell of a hyper-parameter grid and label its regime.
    Sweep {
        #[arg(long, value_enum)]
        grid: Grid,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory or manifest; synthesized from [corpus] if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory [default: a run directory under the output root].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Global seed; replaces every seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run post-training analyses on a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory or manifest CSV.
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the config.toml saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "glm,classify,traverse,correlate")]
        tasks: Vec<String>,
        /// Extra ROI masks as name=path (.vol), comma separated.
        #[arg(long, value_delimiter = ',')]
        masks: Vec<String>,
        /// Output directory [default: a run directory under the output root].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Global seed; replaces every seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    DimBeta,
    BetaAlpha,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let config = pipeline::with_global_seed(config, seed);
    config.validate()?;
    Ok(config)
}

fn out_dir(explicit: Option<PathBuf>, root: Option<&Path>, command: &str, config: &RunConfig) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = root.map(Path::to_path_buf).unwrap_or_else(|| config.output.root.clone());
        pipeline::run_dir(&root, command, config)
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let root = cli.out_root.as_deref();
    match cli.command {
        Command::GenData { spec, out, seed, subjects } => {
            let mut config = load_config(spec.as_deref(), seed)?;
            if let Some(n) = subjects {
                config.corpus.subjects = n;
            }
            let out = out_dir(out, root, "gen-data", &config);
            let records = pipeline::gen_data(&config, &out)?;
            print!("{}", pipeline::corpus_summary(&records, config.corpus.score_max, 10));
            println!("corpus written to {}", out.display());
        }
        Command::Train { config, data, out, seed, resume } => {
            let config = load_config(config.as_deref(), seed)?;
            let out = out_dir(out, root, "train", &config);
            let s = pipeline::train(&config, &data, &out, resume)?;
            println!(
                "epochs {} val_mse {:.6} val_r {:.4} val_dispersion {:.6} -> {}",
                s.epochs,
                s.val_mse,
                s.val_r,
                s.val_dispersion,
                out.display()
            );
        }
        Command::Sweep { grid, config, data, out, seed } => {
            let config = load_config(config.as_deref(), seed)?;
            let kind = match grid {
                Grid::DimBeta => GridKind::DimBeta,
                Grid::BetaAlpha => GridKind::BetaAlpha,
            };
            let out = out_dir(out, root, "sweep", &config);
            let g = pipeline::sweep(&config, kind, data.as_deref(), &out)?;
            print!("{}", g.to_csv());
            let failed = g.cells.iter().filter(|c| c.outcome.is_err()).count();
            println!("{} cells, {failed} failed -> {}", g.cells.len(), out.display());
        }
        Command::Analyze { checkpoint, data, config, tasks, masks, out, seed } => {
            let saved = checkpoint.with_file_name(CONFIG_FILE);
            let path = config.or_else(|| saved.is_file().then_some(saved));
            let config = load_config(path.as_deref(), seed)?;
            let tasks = tasks.iter().map(|t| t.trim().parse()).collect::<Result<Vec<Task>>>()?;
            let masks = masks
                .iter()
                .filter(|m| !m.is_empty())
                .map(|m| m.parse())
                .collect::<Result<Vec<MaskSpec>>>()?;
            let out = out_dir(out, root, "analyze", &config);
            let req = AnalyzeRequest {
                checkpoint: &checkpoint,
                data: &data,
                out: &out,
                tasks: &tasks,
                masks: &masks,
            };
            let written = pipeline::analyze(&config, &req)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = format!("Configuration keys and defaults (TOML):\n\n{}", default_config_toml());
    let mut cmd = Cli::command().after_long_help(help.clone());
    for name in ["gen-data", "train", "sweep", "analyze"] {
        let h = help.clone();
        cmd = cmd.mut_subcommand(name, move |c| c.after_long_help(h));
    }
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
