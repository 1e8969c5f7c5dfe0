use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use timellm_cli::config::{parse_assignment, Overrides};
use timellm_cli::{CliResult, RunConfig, SynthSpec};

#[derive(Parser)]
#[command(name = "timellm", version, about = "Train and evaluate reprogrammed time-series forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit trainable parameters and write a checkpoint.
    Train(RunArgs),
    /// Score a checkpoint on the test region.
    Evaluate(RunArgs),
    /// Train on `source`, score on `target`.
    ZeroShot(RunArgs),
    /// Train and score one ablation variant (B.1, B.2, C.1, C.2, C.3).
    Ablate {
        variant: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a predictions CSV.
    Metrics {
        predictions: PathBuf,
        #[arg(long, default_value_t = 1)]
        periodicity: usize,
    },
    /// Generate a synthetic sine dataset and register it in a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 24.0)]
        period: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// standard, few10, few5 or zero_shot.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    target: Option<String>,
    /// Ablation variant id.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    loss: Option<String>,
    /// Any other configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut o = Overrides::new();
        for s in &self.set {
            let (k, v) = parse_assignment(s)?;
            o.insert(k, v);
        }
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                o.insert(k.to_owned(), v);
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned()));
        put("manifest", path(&self.manifest));
        put("dataset", self.dataset.clone().map(Value::from));
        put("horizon", self.horizon.map(Value::from));
        put("lookback", self.lookback.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("protocol", self.protocol.clone().map(Value::from));
        put("source", self.source.clone().map(Value::from));
        put("target", self.target.clone().map(Value::from));
        put("ablation", self.ablate.clone().map(Value::from));
        put("out", path(&self.out));
        put("checkpoint", path(&self.checkpoint));
        put("epochs", self.epochs.map(Value::from));
        put("batch_size", self.batch_size.map(Value::from));
        put("lr", self.lr.map(Value::from));
        put("loss", self.loss.clone().map(Value::from));
        RunConfig::resolve(self.config.as_deref(), &o)
    }
}

/// A closed stdout (e.g. piped into `head`) is not an error.
fn print_json<T: serde::Serialize>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let s = timellm_cli::cmd_train(&cfg)?;
            println!(
                "trained {} epochs ({} steps), best epoch {}, checkpoint {}",
                s.epochs.len(),
                s.steps,
                s.best_epoch,
                cfg.checkpoint_dir().display()
            );
        }
        Command::Evaluate(args) => print_json(&timellm_cli::cmd_evaluate(&args.resolve()?)?.metrics),
        Command::ZeroShot(args) => {
            let mut cfg = args.resolve()?;
            if cfg.protocol == "standard" {
                cfg.protocol = "zero_shot".into();
            }
            cfg.validate()?;
            print_json(&timellm_cli::cmd_zero_shot(&cfg)?.metrics);
        }
        Command::Ablate { variant, run } => {
            let cfg = run.resolve()?;
            print_json(&timellm_cli::cmd_ablate(&cfg, &variant)?.metrics);
        }
        Command::Metrics {
            predictions,
            periodicity,
        } => print_json(&timellm_cli::cmd_metrics(&predictions, periodicity)?),
        Command::Synth {
            out,
            name,
            channels,
            steps,
            period,
            noise,
            seed,
        } => {
            let spec = SynthSpec {
                name,
                channels,
                steps,
                period,
                noise,
                seed,
            };
            let manifest = timellm_cli::cmd_synth(&out, &spec)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
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

