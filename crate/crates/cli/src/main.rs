use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ttadapt::experiment::dataset::write_dataset;
use ttadapt::experiment::evaluate::{checkpoint_path, eval_dir};
use ttadapt::experiment::{run_adapt_eval, run_report, run_train, Cell, ExperimentConfig};
use ttadapt::ssl::Task;
use ttadapt::ttt::Scheme;
use ttadapt::{Error, Result};

/// Test-time training experiments for volumetric frame interpolation.
#[derive(Debug, Parser)]
#[command(name = "ttadapt", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic train/test sequences and held-out labels.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
        /// Override the number of test sequences.
        #[arg(long)]
        n_test: Option<usize>,
        /// Override the number of training sequences.
        #[arg(long)]
        n_train: Option<usize>,
    },
    /// Train all partitions on the generated train split.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Adapt on the test split and score every (scheme, task) cell.
    AdaptEval {
        #[command(flatten)]
        run: RunArgs,
        /// Only this scheme.
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
        /// Only this task.
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
        /// Only the unadapted model.
        #[arg(long)]
        no_ttt: bool,
        /// Checkpoint to adapt (default: `<out>/checkpoint.bin`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate every run below a directory into mean ± std.
    Report {
        /// Directory searched recursively for metrics.csv files.
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// 32^3 grids, 90/10 sequences, 200 training epochs.
    Default,
    /// 16^3 grids and a short training run.
    Small,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON experiment config; a run's own config.json reproduces it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config used when --config is absent.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Global seed (also seeds test-time draws).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => match self.preset {
                Preset::Default => ExperimentConfig::default(),
                Preset::Small => ExperimentConfig::small(0),
            },
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.ttt.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            run,
            force,
            n_test,
            n_train,
        } => {
            let mut cfg = run.resolve()?;
            if let Some(n) = n_test {
                cfg.data.n_test = n;
            }
            if let Some(n) = n_train {
                cfg.data.n_train = n;
            }
            let root = &cfg.out_dir;
            write_dataset(&cfg, root, force)?;
            std::fs::create_dir_all(root).map_err(|e| Error::Data(format!("{}: {e}", root.display())))?;
            cfg.save(&root.join("config.json"))?;
            println!(
                "wrote {} train and {} test sequences to {}",
                cfg.data.n_train,
                cfg.data.n_test,
                root.join("dataset").display()
            );
        }
        Command::Train { run } => {
            let cfg = run.resolve()?;
            let (_, log) = run_train(&cfg, &cfg.out_dir)?;
            match (log.first(), log.last()) {
                (Some(a), Some(b)) => println!("trained {} epochs: loss {:.6} -> {:.6}", log.len(), a.loss, b.loss),
                _ => println!("no training epochs; wrote the initialization"),
            }
            println!("checkpoint: {}", checkpoint_path(&cfg.out_dir).display());
        }
        Command::AdaptEval {
            run,
            scheme,
            task,
            no_ttt,
            checkpoint,
        } => {
            let cfg = run.resolve()?;
            let ck = checkpoint.unwrap_or_else(|| checkpoint_path(&cfg.out_dir));
            let cells = Cell::select(scheme, task, no_ttt);
            let eval = run_adapt_eval(&cfg, &cfg.out_dir, &ck, &cells)?;
            println!("{:<10} {:<9} {:>16} {:>12}", "scheme", "task", "psnr", "s/sample");
            let blend = eval.blend.summary("psnr");
            println!("{:<10} {:<9} {:>16} {:>12}", "blend", "-", blend.to_string(), "-");
            for (c, t) in eval.cells.iter().zip(eval.timing()) {
                println!(
                    "{:<10} {:<9} {:>16} {:>12.4}{}",
                    c.cell.scheme_name(),
                    c.cell.task_name(),
                    c.summary("psnr").to_string(),
                    t.per_sample_seconds,
                    if c.fell_back {
                        "  (diverged; initial parameters used)"
                    } else {
                        ""
                    }
                );
            }
            println!("results: {}", eval_dir(&cfg.out_dir).display());
        }
        Command::Report { dir } => {
            let (_, table) = run_report(&dir)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
