//! `ddsp-voxkit`: analysis, fitting, rendering and evaluation from the shell.
//!
//! Exit codes: 0 success, 2 input error, 3 contract violation, 4 internal
//! check failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use voxkit::audio::{read_wav, write_wav};
use voxkit::featfile::FeatureMatrix;
use voxkit::fit::{eval_report, fit_analysis, loss_csv, loss_dsp, render, write_text, Analysis, Precision};
use voxkit::net::Checkpoint;
use voxkit::Error;

use config::RunConfig;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Write mel.feat and f0.feat for INPUT.wav
    Analyze,
    /// Fit the synthesizer to INPUT.wav; writes weights.ckpt, loss.csv, y_dsp.wav
    Fit,
    /// Render CHECKPOINT on INPUT.wav's features into OUTPUT.wav
    Synth,
    /// Compare REF.wav and HYP.wav; writes metrics.txt
    Eval,
}

#[derive(Debug, Parser)]
#[command(name = "ddsp-voxkit", version, about = "Harmonic-plus-noise analysis-synthesis toolkit")]
struct Cli {
    command: Command,
    /// INI-style config with [fit] and [paths] sections
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    paths: Vec<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Contract(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Contract(_) => 3,
            Failure::Internal(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Contract(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Contract(_) | Error::Shape { .. } => Failure::Contract(msg),
            Error::NonFinite { .. } => Failure::Internal(msg),
            _ => Failure::Input(msg),
        }
    }
}

type Outcome = Result<(), Failure>;

fn positional<'a>(cli: &'a Cli, names: &[&str]) -> Result<Vec<&'a Path>, Failure> {
    if cli.paths.len() != names.len() {
        return Err(Failure::Input(format!(
            "{:?} expects {} path(s): {}",
            cli.command,
            names.len(),
            names.join(" ")
        )));
    }
    Ok(cli.paths.iter().map(PathBuf::as_path).collect())
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Input(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.fit.seed = seed;
    }
    if let Some(steps) = cli.steps {
        cfg.fit.steps = steps;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    if std::env::var("DDSP_TEST_F64").is_ok_and(|v| v == "1") {
        cfg.fit.precision = Precision::F64;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Input(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn analyze(cli: &Cli, cfg: &RunConfig) -> Outcome {
    let [input] = positional(cli, &["INPUT.wav"])?[..] else { unreachable!() };
    let audio = read_wav(input)?;
    let analysis = Analysis::new(&audio)?;
    let dir = out_dir(cfg)?;
    let mel = &analysis.mel;
    FeatureMatrix::from_f64(mel.frames, mel.mels, &mel.values).write(dir.join("mel.feat"))?;
    let f0: Vec<f64> = analysis
        .contour
        .f0_hz
        .iter()
        .zip(&analysis.contour.voiced)
        .flat_map(|(&f, &v)| [f, if v { 1.0 } else { 0.0 }])
        .collect();
    FeatureMatrix::from_f64(analysis.contour.frames(), 2, &f0).write(dir.join("f0.feat"))?;
    println!("frames {}", mel.frames);
    Ok(())
}

fn fit(cli: &Cli, cfg: &RunConfig) -> Outcome {
    let [input] = positional(cli, &["INPUT.wav"])?[..] else { unreachable!() };
    cfg.fit.validate()?;
    let audio = read_wav(input)?;
    if audio.duration_secs() < voxkit::fit::MIN_DURATION {
        return Err(Failure::Input(format!(
            "{} lasts {:.3} s, need at least {} s",
            input.display(),
            audio.duration_secs(),
            voxkit::fit::MIN_DURATION
        )));
    }
    let analysis = Analysis::new(&audio)?;
    let dir = out_dir(cfg)?;
    let result = fit_analysis(&analysis, &cfg.fit)?;
    if !result.weights.all_finite() {
        return Err(Failure::Internal("fitted weights are not finite".into()));
    }
    let ckpt = Checkpoint {
        weights: result.weights,
        phase_seed: result.phase_seed,
    };
    ckpt.save(dir.join("weights.ckpt"))?;
    write_text(dir.join("loss.csv"), &loss_csv(&result.history))?;
    let y = render(&ckpt.weights, &analysis, ckpt.phase_seed, cfg.fit.seed)?;
    let final_loss = loss_dsp(&analysis.mel, &y)?;
    write_wav(dir.join("y_dsp.wav"), &y)?;
    write_text(
        dir.join("fit.txt"),
        &format!("steps={}\nfinal_mel_l1={final_loss}\n", cfg.fit.steps),
    )?;
    println!("final_mel_l1 {final_loss}");
    Ok(())
}

fn synth(cli: &Cli, cfg: &RunConfig) -> Outcome {
    let [checkpoint, input, output] = positional(cli, &["CHECKPOINT", "INPUT.wav", "OUTPUT.wav"])?[..] else {
        unreachable!()
    };
    let ckpt = Checkpoint::load(checkpoint)?;
    let audio = read_wav(input)?;
    let analysis = Analysis::new(&audio)?;
    let y = render(&ckpt.weights, &analysis, ckpt.phase_seed, cfg.fit.seed)?;
    if !y.is_finite() {
        return Err(Failure::Internal("render is not finite".into()));
    }
    write_wav(output, &y)?;
    Ok(())
}

fn eval(cli: &Cli, cfg: &RunConfig) -> Outcome {
    let [reference, hypothesis] = positional(cli, &["REF.wav", "HYP.wav"])?[..] else { unreachable!() };
    let report = eval_report(&read_wav(reference)?, &read_wav(hypothesis)?)?;
    let text = report.to_kv();
    write_text(out_dir(cfg)?.join("metrics.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Analyze => analyze(cli, &cfg),
        Command::Fit => fit(cli, &cfg),
        Command::Synth => synth(cli, &cfg),
        Command::Eval => eval(cli, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ddsp-voxkit: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
