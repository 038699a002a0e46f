use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tepose::checkpoint;
use tepose::commands::{cmd_eval, cmd_gradcheck, cmd_infer, cmd_synth, cmd_train, InferInput, CHECKPOINT_FILE};
use tepose::config::RunConfig;
use tepose::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Small dims that train on one CPU core.
    Desk,
    /// Full-size reference hyperparameters.
    Reference,
}

#[derive(Debug, Parser)]
#[command(
    name = "tepose",
    version,
    about = "Streaming 3D pose-and-shape estimation with parameter feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    /// Run seed (`synth`: dataset seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (`infer`: output file, stdout when absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to evaluate, stream from, or resume training from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory; the synthetic dataset is regenerated when absent.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// `key.path=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    Train,
    Eval {
        /// Name written in the `run` column.
        #[arg(long)]
        run: Option<String>,
    },
    /// Streams per-frame predictions as JSON lines.
    Infer {
        /// Video sidecar (`.json`) or feature record (`-` for stdin).
        #[arg(long)]
        input: PathBuf,
        /// `T x 85` warm-start record for feature input.
        #[arg(long)]
        warm: Option<PathBuf>,
    },
    Gradcheck,
    Synth,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 2,
        _ => 1,
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let base = match (&cli.checkpoint, &cli.command) {
        // a checkpoint carries the config it was trained with
        (Some(p), Command::Eval { .. } | Command::Infer { .. } | Command::Train) => checkpoint::load(p)?.0,
        _ => match cli.preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Reference => RunConfig::default(),
        },
    };
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        let key = if matches!(cli.command, Command::Synth) {
            "synth.seed"
        } else {
            "seed"
        };
        overrides.push(format!("{key}={s}"));
    }
    if let Some(d) = &cli.data {
        overrides.push(format!("data.dir={}", toml::Value::String(d.display().to_string())));
    }
    overrides.extend(cli.overrides.iter().cloned());
    RunConfig::load(&base, cli.config.as_deref(), &overrides)
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf, Error> {
    p.as_ref().ok_or_else(|| Error::Config(format!("--{what} is required")))
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let config = resolve_config(cli)?;
    match &cli.command {
        Command::Synth => {
            let out = need(&cli.out, "out")?;
            let data = cmd_synth(&config, out)?;
            println!("{} videos written to {}", data.videos.len(), out.display());
        }
        Command::Train => {
            let out = need(&cli.out, "out")?;
            let s = cmd_train(&config, out, cli.checkpoint.as_deref())?;
            let show = |r: &Option<tepose::eval::EvalReport>| {
                r.as_ref().map_or("n/a".to_string(), |r| format!("{:.2}", r.mpjpe))
            };
            println!(
                "{} iterations in {:.1}s; test mpjpe {} -> {} mm; checkpoint {}",
                s.iterations,
                s.seconds,
                show(&s.untrained),
                show(&s.trained),
                out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval { run } => {
            let ck = need(&cli.checkpoint, "checkpoint")?;
            let out = need(&cli.out, "out")?;
            let name = run.clone().unwrap_or_else(|| ck.display().to_string());
            let r = cmd_eval(&config, ck, out, &name)?;
            println!("mpjpe {:.3} pa_mpjpe {:.3} accel {:.3}", r.mpjpe, r.pa_mpjpe, r.accel);
        }
        Command::Infer { input, warm } => {
            let ck = need(&cli.checkpoint, "checkpoint")?;
            let src = if input.extension().is_some_and(|e| e == "json") {
                InferInput::Video(input.clone())
            } else {
                InferInput::Features {
                    path: input.clone(),
                    warm: warm.clone(),
                }
            };
            match &cli.out {
                Some(p) => {
                    let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
                    cmd_infer(&config, ck, &src, &mut f)?;
                    f.flush()?;
                }
                None => {
                    cmd_infer(&config, ck, &src, &mut std::io::stdout().lock())?;
                }
            }
        }
        Command::Gradcheck => {
            let report = cmd_gradcheck(&config, cli.out.as_deref())?;
            for r in &report.results {
                println!(
                    "{:<20} {} max rel err {:.3e} (tol {:.0e}, {} instances, {} redrawn)",
                    r.name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_rel_error,
                    r.tolerance,
                    r.instances,
                    r.rejected
                );
            }
            if !report.passed() {
                return Ok(2);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
