use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radar_depth::dataio::Split;
use radar_depth_cli::ablation::{ablate, AblateOptions, SweepMode};
use radar_depth_cli::commands::{self, parse_size, report_lines, DirMode, SynthArgs};
use radar_depth_cli::config::RunConfig;
use radar_depth_cli::CliResult;

#[derive(Parser)]
#[command(name = "radar-depth", version, about = "Dense depth from RGB and radar")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Continue from existing output.
    #[arg(long)]
    resume: bool,
    /// Delete existing output first.
    #[arg(long)]
    force: bool,
}

impl OutputArgs {
    fn mode(&self) -> CliResult<DirMode> {
        DirMode::from_flags(self.resume, self.force)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        outlier_rate: f64,
        /// Image size as HxW.
        #[arg(long, default_value = "96x160")]
        size: String,
        /// Every n-th scene goes to validation (0 for none).
        #[arg(long, default_value_t = 10)]
        val_every: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Train one model into a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `eval.split`.
        #[arg(long)]
        split: Option<Split>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the variant table or the input-pattern table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Compare input patterns instead of model variants.
        #[arg(long)]
        patterns: bool,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Concurrent training runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Only these rows (method labels or input names), comma separated.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Render per-sample figures from a checkpoint.
    Visualize {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample ids, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::SynthGen {
            out,
            count,
            seed,
            outlier_rate,
            size,
            val_every,
            output,
        } => {
            let (height, width) = parse_size(&size)?;
            let args = SynthArgs {
                count,
                seed,
                outlier_rate,
                height,
                width,
                val_every,
            };
            let n = commands::synth_gen(&out, &args, output.mode()?)?;
            println!("samples={n} out={}", out.display());
        }
        Command::Train { config, run_dir, output } => {
            let cfg = config.load()?;
            let s = commands::train(&cfg, &run_dir, output.mode()?, true)?;
            if let Some(v) = &s.val {
                for l in report_lines(Split::Val, v) {
                    println!("{l}");
                }
            }
            println!("run_dir={}", run_dir.display());
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => {
            let cfg = config.load()?;
            let split = split.unwrap_or(cfg.eval.split);
            let r = commands::eval(&cfg, &checkpoint, split)?;
            for l in report_lines(split, &r) {
                println!("{l}");
            }
            if let Some(p) = out {
                let text = serde_json::to_string_pretty(&r).map_err(radar_depth::Error::from)?;
                std::fs::write(&p, text).map_err(|e| radar_depth_cli::error::io_err(&p, e))?;
            }
        }
        Command::Ablate {
            config,
            out,
            patterns,
            seeds,
            jobs,
            rows,
            output,
        } => {
            let cfg = config.load()?;
            let opts = AblateOptions {
                mode: if patterns { SweepMode::Patterns } else { SweepMode::Variants },
                seeds,
                jobs,
                rows,
                echo: false,
            };
            let t = ablate(&cfg, &out, &opts, output.mode()?)?;
            print!("{}", t.to_markdown());
        }
        Command::Visualize {
            config,
            checkpoint,
            samples,
            out,
            output,
        } => {
            let cfg = config.load()?;
            for p in commands::visualize(&cfg, &checkpoint, &samples, &out, output.mode()?)? {
                println!("figure={}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

