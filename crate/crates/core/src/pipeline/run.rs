use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::imageops::FilterType;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cache::EmbeddingCache;
use super::config::{BackendKind, PipelineConfig};
use super::export::export_frames;
use super::generate::{generate_frames, AttentionSetup, GenerationInputs, MaskGuidance};
use crate::attention::{frame_generation_attention_schedule, BodyMask, MgdmSettings};
use crate::backend::{DenoiserBackend, LatentCodec, OrthonormalCodec, ToyDenoiser, ToyTextEmbedder};
use crate::diffusion::{hex, GuidanceConfig, LatentCode, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optimize::{
    optimize_pose_aware_embeddings, pose_aware_inversion, EmbeddingSchedule, FrameTarget, OptimizationReport,
    PacmContext,
};
use crate::pose::{
    build_target_sequence, parse_pose_file, rasterize_pose, AlignOptions, ConditioningImage, PoseSequence,
    RasterStyle, TransitionOptions,
};

/// The codec is seeded independently of the denoiser.
const CODEC_SEED: u64 = 0;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const PARTIAL_FILE: &str = "partial.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingOrigin {
    Optimized,
    Cache,
}

/// Everything needed to reproduce a run, without wall-clock data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub schedule_hash: String,
    pub backend_seed: u64,
    /// SHA-256 of each input file, by config key.
    pub inputs: BTreeMap<String, String>,
    pub frames: usize,
    pub transition_frames: usize,
    pub embeddings: EmbeddingOrigin,
    pub source_report: OptimizationReport,
    pub frame_reports: Vec<OptimizationReport>,
    /// Written files, relative to the output directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub timings: Vec<StageTiming>,
    /// Final latent per frame.
    pub latents: Vec<LatentCode>,
    /// Decoded frames in `[0, 1]` before quantization.
    pub images: Vec<Array2<f64>>,
}

/// Loaded and preprocessed inputs of a run.
pub struct PreparedInputs {
    /// `[source, transition.., desired..]`
    pub poses: PoseSequence,
    pub conditions: Vec<ConditioningImage>,
    pub image: Array2<f64>,
    pub source_mask: Option<BodyMask>,
    pub prompt_embedding: Array2<f64>,
    pub null_embedding: Array2<f64>,
    pub subject_tokens: Vec<usize>,
    pub input_hashes: BTreeMap<String, String>,
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is required")))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// Grayscale in `[0, 1]`, resampled to `(height, width)`.
pub fn load_image(path: &Path, size: (usize, usize)) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (h, w) = size;
    let img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
    Ok(Array2::from_shape_fn((h, w), |(r, c)| img.get_pixel(c as u32, r as u32)[0] as f64 / 255.0))
}

pub fn make_backend(config: &PipelineConfig) -> Result<Box<dyn DenoiserBackend>> {
    match config.backend {
        BackendKind::Toy => Ok(Box::new(ToyDenoiser::with_cond_scale(config.backend_seed, config.cond_scale))),
        BackendKind::Adapter => Err(Error::Config(
            "`backend.kind = adapter` needs pretrained weights, which this build does not include".into(),
        )),
    }
}

pub fn make_codec() -> OrthonormalCodec {
    OrthonormalCodec::toy(CODEC_SEED)
}

/// Reads poses, image, mask and prompt, and builds the target pose sequence.
pub fn prepare_inputs(config: &PipelineConfig, backend: &dyn DenoiserBackend) -> Result<PreparedInputs> {
    let image_path = required(&config.image, "image")?;
    let pose_path = required(&config.pose, "pose")?;
    let mut input_hashes = BTreeMap::new();
    input_hashes.insert("image".to_string(), file_hash(image_path)?);
    input_hashes.insert("pose".to_string(), file_hash(pose_path)?);

    let clip = parse_pose_file(pose_path)?;
    let (source, available) = match &config.source_pose {
        Some(p) => {
            input_hashes.insert("source_pose".to_string(), file_hash(p)?);
            let s = parse_pose_file(p)?;
            (s.poses[0].clone(), clip.poses)
        }
        None => {
            let mut poses = clip.poses;
            let source = poses.remove(0);
            (source, poses)
        }
    };
    let wanted = config.frames.saturating_sub(1 + config.transition_frames);
    if available.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no desired poses after the source pose",
            pose_path.display()
        )));
    }
    if available.len() < wanted {
        log::warn!(
            "pose clip has {} desired frames, {} requested; producing {} frames",
            available.len(),
            wanted,
            available.len() + config.transition_frames + 1
        );
    }
    let desired = PoseSequence::new(available.into_iter().take(wanted).collect());
    let options = TransitionOptions {
        easing: config.easing,
        align: AlignOptions {
            allow_rotation: config.allow_rotation,
        },
        per_frame_alignment: config.per_frame_alignment,
    };
    let poses = build_target_sequence(&source, &desired, config.transition_frames, options)?;
    let (cw, ch) = backend.condition_size();
    let conditions = poses
        .poses
        .iter()
        .map(|p| rasterize_pose(p, cw, ch, RasterStyle::default()))
        .collect();

    let codec = make_codec();
    let image = load_image(image_path, codec.image_size())?;
    let source_mask = match &config.source_mask {
        Some(p) => {
            input_hashes.insert("source_mask".to_string(), file_hash(p)?);
            Some(BodyMask::load(p)?)
        }
        None => None,
    };

    let embedder = ToyTextEmbedder;
    let needs_tokens = config.dcam_enabled && config.mgdm_enabled;
    let subject_tokens = if needs_tokens {
        if config.subject_tokens.is_empty() {
            return Err(Error::Config(
                "mask guidance needs `subject_tokens` (--subject-tokens); set mgdm.enabled = false to run without it"
                    .into(),
            ));
        }
        embedder
            .token_indices(&config.prompt, &config.subject_tokens)
            .map_err(|e| Error::Config(e.to_string()))?
    } else {
        Vec::new()
    };
    Ok(PreparedInputs {
        poses,
        conditions,
        image,
        source_mask,
        prompt_embedding: embedder.embed(&config.prompt),
        null_embedding: embedder.embed(""),
        subject_tokens,
        input_hashes,
    })
}

/// Digest of everything the embedding optimization reads.
fn cache_key(config: &PipelineConfig, z0: &LatentCode, inputs: &PreparedInputs) -> String {
    let mut h = Sha256::new();
    let mut floats = |xs: &mut dyn Iterator<Item = f64>| xs.for_each(|v| h.update(v.to_le_bytes()));
    floats(&mut z0.data.iter().copied());
    floats(&mut inputs.prompt_embedding.iter().copied());
    floats(&mut inputs.null_embedding.iter().copied());
    floats(&mut [config.cond_scale, config.guidance_optimization].into_iter());
    for c in &inputs.conditions {
        h.update(c.width.to_le_bytes());
        h.update(c.height.to_le_bytes());
        h.update(&c.data);
    }
    h.update(serde_json::to_vec(&config.optimizer).expect("serializes"));
    hex(&h.finalize())
}

struct Stages {
    timings: Vec<StageTiming>,
}

impl Stages {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        log::info!("stage: {stage}");
        let start = Instant::now();
        let out = f();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

fn wrap(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e if e.is_config_error() => e,
        e => e.in_stage(stage, None),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Runs every stage and writes frames, overlay, manifest and timings into
/// `config.out_dir`. On failure with `keep_partial`, writes `partial.json`
/// naming the completed stages and the error.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunOutput> {
    let mut stages = Stages { timings: Vec::new() };
    let result = run_stages(config, &mut stages);
    if let Err(e) = &result {
        if config.keep_partial {
            #[derive(Serialize)]
            struct Partial<'a> {
                completed: Vec<&'a str>,
                error: String,
            }
            let done = stages.timings.len().saturating_sub(1);
            let partial = Partial {
                completed: stages.timings[..done].iter().map(|s| s.stage.as_str()).collect(),
                error: e.to_string(),
            };
            if std::fs::create_dir_all(&config.out_dir).is_ok() {
                if let Err(w) = write_json(&config.out_dir.join(PARTIAL_FILE), &partial) {
                    log::warn!("could not record partial results: {w}");
                }
            }
        }
    }
    result
}

fn run_stages(config: &PipelineConfig, stages: &mut Stages) -> Result<RunOutput> {
    config.validate()?;
    let schedule = NoiseSchedule::new(config.schedule)?;
    let backend = make_backend(config)?;
    let backend = backend.as_ref();
    let codec = make_codec();

    let inputs = stages.run("load", || prepare_inputs(config, backend))?;
    let n = inputs.conditions.len();
    let z0 = stages
        .run("encode", || codec.encode(&inputs.image).map(LatentCode::clean))
        .map_err(wrap("encode"))?;

    let ctx = PacmContext {
        backend,
        schedule: &schedule,
        null_embedding: &inputs.null_embedding,
        guidance: GuidanceConfig::new(config.guidance_optimization)?,
        optimizer: config.optimizer,
    };
    let key = cache_key(config, &z0, &inputs);
    let schedule_hash = schedule.hash();
    let cached = match &config.embedding_cache {
        Some(path) if path.is_file() => match EmbeddingCache::load(path) {
            Ok(c) if c.matches(config.backend_seed, &schedule_hash, &key) && c.schedules.len() == n => Some(c),
            Ok(_) => {
                log::warn!("embedding cache {} was made for other inputs; recomputing", path.display());
                None
            }
            Err(e) => {
                log::warn!("ignoring unreadable embedding cache: {e}");
                None
            }
        },
        _ => None,
    };

    let (trajectory, schedules, reports, origin) = match cached {
        Some(c) => {
            let trajectory = stages
                .run("inversion", || {
                    crate::diffusion::ddim_invert(&z0, backend, &inputs.prompt_embedding, &inputs.conditions[0], &schedule)
                })
                .map_err(wrap("inversion"))?;
            log::info!("embeddings loaded from cache");
            (trajectory, c.schedules, c.reports, EmbeddingOrigin::Cache)
        }
        None => {
            let inversion = stages
                .run("inversion", || {
                    pose_aware_inversion(&ctx, &z0, &inputs.conditions[0], &inputs.prompt_embedding)
                })
                .map_err(wrap("inversion"))?;
            let targets: Vec<FrameTarget> = (1..n)
                .map(|i| FrameTarget {
                    frame_index: i,
                    pose: inputs.conditions[i].clone(),
                })
                .collect();
            let per_frame = stages
                .run("pose-aware optimization", || {
                    optimize_pose_aware_embeddings(&ctx, &inversion.embeddings, &inversion.trajectory, &targets, config.jobs)
                })
                .map_err(wrap("pose-aware optimization"))?;
            let mut schedules = vec![inversion.embeddings];
            let mut reports = vec![inversion.report];
            for r in per_frame {
                schedules.push(r.embeddings);
                reports.push(r.report);
            }
            if let Some(path) = &config.embedding_cache {
                let cache = EmbeddingCache {
                    seed: config.backend_seed,
                    schedule_hash: schedule_hash.clone(),
                    key,
                    schedules,
                    reports,
                };
                cache.save(path)?;
                log::info!("embeddings cached at {}", path.display());
                (inversion.trajectory, cache.schedules, cache.reports, EmbeddingOrigin::Optimized)
            } else {
                (inversion.trajectory, schedules, reports, EmbeddingOrigin::Optimized)
            }
        }
    };

    let attention = config.dcam_enabled.then(|| {
        let plan = frame_generation_attention_schedule(1, &backend.list_attention_sites());
        AttentionSetup {
            filter: plan.filter(),
            weights: config.fusion,
            mask: config.mgdm_enabled.then(|| MaskGuidance {
                settings: MgdmSettings {
                    drop_masked_tokens: config.drop_masked_tokens,
                },
                options: config.mask.clone(),
                subject_tokens: inputs.subject_tokens.clone(),
                head_mean: config.head_mean,
                source_mask: inputs.source_mask.clone(),
            }),
        }
    });
    let schedule_refs: Vec<&EmbeddingSchedule> = schedules.iter().collect();
    let latents = stages
        .run("generation", || {
            generate_frames(&GenerationInputs {
                backend,
                schedule: &schedule,
                trajectory: &trajectory,
                poses: &inputs.conditions,
                embeddings: &schedule_refs,
                prompt_embedding: &inputs.prompt_embedding,
                null_embedding: &inputs.null_embedding,
                role: config.role,
                guidance: GuidanceConfig::new(config.guidance_generation)?,
                attention,
            })
        })
        .map_err(wrap("generation"))?;

    let images: Vec<Array2<f64>> = latents.iter().map(|z| codec.decode(&z.data)).collect();
    let written = stages
        .run("export", || {
            export_frames(&images, &config.out_dir, config.overlay.then_some(inputs.conditions.as_slice()))
        })
        .map_err(wrap("export"))?;

    let mut reports = reports.into_iter();
    let manifest = RunManifest {
        config_hash: config.hash(),
        schedule_hash,
        backend_seed: config.backend_seed,
        inputs: inputs.input_hashes,
        frames: n,
        transition_frames: config.transition_frames,
        embeddings: origin,
        source_report: reports.next().expect("source report"),
        frame_reports: reports.collect(),
        outputs: written
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
    };
    write_json(&config.out_dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&config.out_dir.join(TIMINGS_FILE), &stages.timings)?;
    Ok(RunOutput {
        manifest,
        timings: stages.timings.clone(),
        latents,
        images,
    })
}
