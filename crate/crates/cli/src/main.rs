//! `solis`: synthetic data, cross-validated training, evaluation,
//! buffered inference and error galleries.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use solis_core::classifier::{cache_dir_from_env, load_checkpoint};
use solis_core::dataset::{generate_synthetic, load_manifest, BackgroundMode, SynthConfig};
use solis_core::screening::{screen_buffered, BufferPolicy, Screener};
use solis_core::trainer::{
    evaluate_run, load_run_config, run_cross_validation, RunOptions, TrainConfig,
};
use solis_core::{Error, ImageRgb};

#[derive(Parser)]
#[command(
    name = "solis",
    version,
    about = "Vial detection and solubility classification"
)]
struct Cli {
    /// Never fetch pretrained weights; only the SOLIS_CACHE directory is read.
    #[arg(long, global = true)]
    no_download: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled synthetic dataset.
    GenSynth(GenSynth),
    /// Run k-fold cross-validation and write checkpoints plus cv_report.json.
    Train(Train),
    /// Recompute pooled metrics from a run's checkpoints.
    Eval(Eval),
    /// Classify one or more frames of the same vial and print the decision.
    Infer(Infer),
    /// Write the worst-k gallery of a run as markdown and HTML.
    Report(Report),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Background modes, cycled over samples.
    #[arg(long, value_delimiter = ',', default_value = "plain")]
    background: Vec<BackgroundMode>,
    #[arg(long, default_value_t = 128)]
    size: u32,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON training config; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args)]
struct Infer {
    #[arg(long, num_args = 1.., required = true)]
    image: Vec<PathBuf>,
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Buffer size; defaults to 5.
    #[arg(long)]
    buffer: Option<usize>,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| {
                    c.downcast_ref::<Error>()
                        .map(Error::exit_code)
                        .or_else(|| c.downcast_ref::<std::io::Error>().map(|_| 4))
                })
                .unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.no_download {
        log::debug!("network access disabled; pretrained weights come from SOLIS_CACHE only");
    }
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Report(a) => report::write(&a.run, &a.out),
    }
}

fn gen_synth(a: GenSynth) -> anyhow::Result<()> {
    let config = SynthConfig {
        n_samples: a.n,
        image_size: a.size,
        background_modes: a.background,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let manifest = generate_synthetic(&config, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn train(a: Train) -> anyhow::Result<()> {
    let (config, base) = match &a.config {
        Some(p) => (
            TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            config_dir(p),
        ),
        None => (TrainConfig::default(), PathBuf::from(".")),
    };
    let manifest = load_manifest(&a.manifest, true)?;
    let detector = config.detector.build(&base, None)?;
    let options = RunOptions {
        run_dir: Some(a.out.clone()),
        weights_dir: cache_dir_from_env(),
    };
    let report = run_cross_validation(&manifest, &config, detector.as_ref(), &options)?;
    println!(
        "{}",
        serde_json::json!({
            "pooled_accuracy": report.pooled_accuracy,
            "ce_mean": report.ce_mean,
            "ce_std": report.ce_std,
            "report": a.out.join(solis_core::trainer::REPORT_FILE),
        })
    );
    Ok(())
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let config = load_run_config(&a.run)?;
    let manifest = load_manifest(&a.manifest, true)?;
    let detector = config.detector.build(&a.run, None)?;
    let result = evaluate_run(&manifest, &a.run, detector.as_ref(), a.fold)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn infer(a: Infer) -> anyhow::Result<()> {
    let config = load_run_config(&a.run)?;
    let (model, _) = load_checkpoint(&a.run.join(format!("fold{}", a.fold)))?;
    let detector = config.detector.build(&a.run, None)?;
    let mut screener = Screener::new(
        &model,
        detector.as_ref(),
        config.transform.resolve(model.spec()),
    );
    screener.padding = config.crop_padding;
    let policy = BufferPolicy::with_size(a.buffer.unwrap_or(BufferPolicy::default().size));
    if a.image.len() > policy.size {
        bail!(Error::Config(format!(
            "{} images exceed the buffer size {}",
            a.image.len(),
            policy.size
        )));
    }
    let frames = a
        .image
        .iter()
        .map(|p| Ok((p.display().to_string(), ImageRgb::load_png(p)?)))
        .collect::<solis_core::Result<Vec<_>>>()?;
    let decision = screen_buffered(&frames, &screener, &policy)?;
    println!("{}", serde_json::to_string_pretty(&decision)?);
    if decision.per_frame.iter().all(|p| p.detection_failed) {
        return Err(anyhow::Error::new(Error::VialNotFound {
            frame: String::new(),
        })
        .context(format!("no vial in any of {} frames", frames.len())));
    }
    Ok(())
}
