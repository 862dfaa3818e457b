use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dccrn::data::{read_wav, write_wav, AudioClip, WavFormat};
use dccrn::kv::KvMap;
use dccrn::{latency, verify, Dccrn, Error, ModelConfig, RunConfig, Trainer};

/// Environment variable holding the log filter (`error` .. `trace`).
const LOG_ENV: &str = "DCCRN_LOG";

#[derive(Parser)]
#[command(name = "dccrn", version, about = "Complex-valued speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train { config: PathBuf },
    /// Enhance a 16 kHz mono WAV file.
    Enhance {
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
        /// Process frame by frame as a live stream would.
        #[arg(long)]
        streaming: bool,
    },
    /// Time the streaming path per frame.
    Bench {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
    },
    /// Run the built-in numerical self-checks.
    Verify,
    /// Print the parameter count of a model or run config.
    ParamCount { config: PathBuf },
}

enum Failure {
    Usage(String),
    Data(Error),
    Verify(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Wav { .. } => "wav",
        Error::Checkpoint(_) | Error::CheckpointVersion { .. } => "checkpoint",
        _ => "data",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error[usage]: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error[{}]: {}", kind(&e), e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
        Err(Failure::Verify(n)) => {
            eprintln!("error[verify]: {n} checks failed");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train { config } => train(&config),
        Command::Enhance {
            checkpoint,
            input,
            output,
            streaming,
        } => enhance(&checkpoint, &input, &output, streaming),
        Command::Bench { checkpoint, seconds } => {
            if !(seconds > 0.0 && seconds.is_finite()) {
                return Err(Failure::Usage(format!("--seconds must be positive, got {seconds}")));
            }
            let model = Dccrn::<f32>::load(&checkpoint)?;
            println!("model             {} ({} parameters)", model.variant(), model.num_params());
            println!("{}", latency::measure(&model, seconds)?);
            Ok(())
        }
        Command::Verify => {
            let report = verify::run_all(|c| println!("{c}"));
            let failed = report.iter().filter(|c| !c.passed()).count();
            println!("{} of {} checks passed", report.len() - failed, report.len());
            if failed > 0 {
                Err(Failure::Verify(failed))
            } else {
                Ok(())
            }
        }
        Command::ParamCount { config } => {
            let model = Dccrn::<f32>::build(&model_config(&config)?, 0)?;
            let c = model.config();
            println!("variant     {}", c.variant);
            let mut groups: Vec<(String, usize)> = Vec::new();
            for (_, p) in model.params().iter() {
                let head = p.name.split('.').next().unwrap_or("").to_string();
                match groups.iter_mut().find(|(g, _)| *g == head) {
                    Some((_, n)) => *n += p.value.len(),
                    None => groups.push((head, p.value.len())),
                }
            }
            for (g, n) in groups {
                println!("{g:<11} {n}");
            }
            let total = model.num_params();
            println!("total       {total} ({:.3} M)", total as f64 / 1e6);
            Ok(())
        }
    }
}

/// The model section of a run config, or a file holding only model keys.
fn model_config(path: &Path) -> Result<ModelConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kv = KvMap::parse(&text)?;
    if ["data.synthetic", "data.train", "data.val"].iter().any(|k| kv.contains(k)) {
        return Ok(RunConfig::load(path)?.model);
    }
    let model = ModelConfig::from_kv(&mut kv)?;
    kv.finish()?;
    Ok(model)
}

fn train(config: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    log::info!("writing to {}", cfg.out_dir.display());
    let mut trainer = Trainer::new(cfg)?;
    log::info!("{} parameters", trainer.model.num_params());
    let s = trainer.run(|r| println!("{r}"))?;
    println!(
        "best epoch={} val_sisnr={:.4} stop={:?} checkpoint={}",
        s.best_epoch,
        s.best_val_sisnr,
        s.stop,
        s.best_checkpoint.display()
    );
    Ok(())
}

fn enhance(checkpoint: &Path, input: &Path, output: &Path, streaming: bool) -> Result<(), Failure> {
    let model = Dccrn::<f32>::load(checkpoint)?;
    let clip = read_wav(input)?;
    let wave = if streaming {
        model.enhance_streaming(&clip.samples)?
    } else {
        model.enhance(&clip.samples)?.wave
    };
    let peak = wave.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        log::warn!("output peaks at {peak:.3}; the float WAV keeps it unclipped");
    }
    write_wav(output, &AudioClip::new(wave), WavFormat::Float32)?;
    Ok(())
}
