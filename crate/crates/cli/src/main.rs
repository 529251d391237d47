use std::path::PathBuf;
use std::process::ExitCode;

use animkit::pipeline::{load_config, run_pipeline, PipelineConfig};
use animkit::Error;
use clap::Parser;

/// Animate a single character image along a pose sequence.
#[derive(Debug, Parser)]
#[command(name = "animate", version)]
struct Args {
    /// Source character image (PNG or PGM).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Pose sequence JSON. Its first frame is the source pose unless
    /// --source-pose is given.
    #[arg(long)]
    pose: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    /// Pose JSON whose first frame describes the source image.
    #[arg(long)]
    source_pose: Option<PathBuf>,
    /// Body mask of the source image; nonzero pixels mark the character.
    #[arg(long)]
    source_mask: Option<PathBuf>,
    /// Comma-separated prompt words naming the character.
    #[arg(long, value_delimiter = ',')]
    subject_tokens: Option<Vec<String>>,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Frames optimized in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    /// Backend seed.
    #[arg(long)]
    seed: Option<u64>,
    /// On failure, record completed stages in partial.json.
    #[arg(long)]
    keep_partial: bool,
    /// Reuse or create an embedding cache file.
    #[arg(long)]
    embedding_cache: Option<PathBuf>,
    /// Any configuration key, e.g. `--set schedule.inference_steps=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn build_config(args: &Args) -> animkit::Result<PipelineConfig> {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    for item in &args.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
        config.set(key.trim(), value)?;
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let flags = [
        ("image", path(&args.image)),
        ("pose", path(&args.pose)),
        ("prompt", args.prompt.clone()),
        ("source_pose", path(&args.source_pose)),
        ("source_mask", path(&args.source_mask)),
        ("subject_tokens", args.subject_tokens.as_ref().map(|t| t.join(","))),
        ("out_dir", path(&args.out)),
        ("jobs", args.jobs.map(|j| j.to_string())),
        ("backend.seed", args.seed.map(|s| s.to_string())),
        ("embedding_cache", path(&args.embedding_cache)),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config.set(key, &v)?;
        }
    }
    if args.keep_partial {
        config.keep_partial = true;
    }
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let result = build_config(&args).and_then(|config| {
        let out = run_pipeline(&config)?;
        log::info!(
            "wrote {} files to {}",
            out.manifest.outputs.len() + 2,
            config.out_dir.display()
        );
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
