use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attention::{FusionWeights, MaskOptions, MaskSites};
use crate::backend::BlockKind;
use crate::diffusion::{hex, BetaSchedule, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::optimize::OptimizerConfig;
use crate::pose::Easing;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    /// Pretrained weights behind the same contract; not part of this build.
    Adapter,
}

/// Which guidance branch receives the pose-aware embedding at generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PacmRole {
    /// Pose-aware embedding as the conditional branch, empty prompt as the
    /// unconditional one: the setting the embeddings were optimized in.
    Conditional,
    /// Pose-aware embedding as the unconditional branch, prompt embedding as
    /// the conditional one.
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub prompt: String,
    pub image: Option<PathBuf>,
    /// Pose JSON. Without `source_pose`, its first frame is the source pose
    /// and the remaining frames are the desired poses.
    pub pose: Option<PathBuf>,
    pub source_pose: Option<PathBuf>,
    pub source_mask: Option<PathBuf>,
    pub subject_tokens: Vec<String>,
    /// Output frames including the source-identical first frame.
    pub frames: usize,
    pub transition_frames: usize,
    pub easing: Easing,
    pub allow_rotation: bool,
    pub per_frame_alignment: bool,
    pub schedule: ScheduleParams,
    pub guidance_optimization: f64,
    pub guidance_generation: f64,
    pub dcam_enabled: bool,
    pub fusion: FusionWeights,
    pub mgdm_enabled: bool,
    pub mask: MaskOptions,
    pub drop_masked_tokens: bool,
    pub head_mean: bool,
    pub optimizer: OptimizerConfig,
    pub role: PacmRole,
    pub backend: BackendKind,
    pub backend_seed: u64,
    pub cond_scale: f64,
    pub overlay: bool,
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub embedding_cache: Option<PathBuf>,
    #[serde(skip)]
    pub jobs: usize,
    #[serde(skip)]
    pub keep_partial: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            image: None,
            pose: None,
            source_pose: None,
            source_mask: None,
            subject_tokens: Vec::new(),
            frames: 16,
            transition_frames: 4,
            easing: Easing::Linear,
            allow_rotation: false,
            per_frame_alignment: false,
            schedule: ScheduleParams::default(),
            guidance_optimization: 7.5,
            guidance_generation: 7.5,
            dcam_enabled: true,
            fusion: FusionWeights::default(),
            mgdm_enabled: true,
            mask: MaskOptions::default(),
            drop_masked_tokens: false,
            head_mean: true,
            optimizer: OptimizerConfig::default(),
            role: PacmRole::Conditional,
            backend: BackendKind::Toy,
            backend_seed: 0,
            cond_scale: 1.0,
            overlay: true,
            out_dir: PathBuf::from("out"),
            embedding_cache: None,
            jobs: 1,
            keep_partial: false,
        }
    }
}

/// Every accepted key, in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "prompt",
    "image",
    "pose",
    "source_pose",
    "source_mask",
    "subject_tokens",
    "out_dir",
    "embedding_cache",
    "jobs",
    "keep_partial",
    "frames",
    "transition.frames",
    "transition.easing",
    "align.allow_rotation",
    "align.per_frame",
    "schedule.kind",
    "schedule.beta_start",
    "schedule.beta_end",
    "schedule.train_steps",
    "schedule.inference_steps",
    "guidance.optimization",
    "guidance.generation",
    "dcam.enabled",
    "dcam.lambda1",
    "dcam.lambda2",
    "dcam.lambda3",
    "mgdm.enabled",
    "mgdm.threshold",
    "mgdm.sites",
    "mgdm.min_resolution",
    "mgdm.drop_masked_tokens",
    "maps.head_mean",
    "pacm.role",
    "pacm.eta",
    "pacm.inner_iterations",
    "pacm.early_stop_loss",
    "pose.cond_scale",
    "backend.kind",
    "backend.seed",
    "export.overlay",
];

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("`{key}`: cannot parse `{value}` as {expected}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, expected))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(key, value, "a boolean")),
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// `up.0,up.1` style slot list, or `auto`.
fn mask_sites(key: &str, value: &str) -> Result<MaskSites> {
    if value == "auto" {
        return Ok(MaskSites::Auto);
    }
    list(value)
        .iter()
        .map(|item| {
            let (block, layer) = item.split_once('.').ok_or_else(|| bad(key, item, "`block.layer`"))?;
            let block = match block {
                "down" => BlockKind::Down,
                "mid" => BlockKind::Mid,
                "up" => BlockKind::Up,
                _ => return Err(bad(key, item, "a block of down, mid or up")),
            };
            Ok((block, num(key, layer, "a layer index")?))
        })
        .collect::<Result<_>>()
        .map(MaskSites::Listed)
}

impl PipelineConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "prompt" => self.prompt = v.to_string(),
            "image" => self.image = path(v),
            "pose" => self.pose = path(v),
            "source_pose" => self.source_pose = path(v),
            "source_mask" => self.source_mask = path(v),
            "subject_tokens" => self.subject_tokens = list(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "embedding_cache" => self.embedding_cache = path(v),
            "jobs" => self.jobs = num(key, v, "a count")?,
            "keep_partial" => self.keep_partial = flag(key, v)?,
            "frames" => self.frames = num(key, v, "a count")?,
            "transition.frames" => self.transition_frames = num(key, v, "a count")?,
            "transition.easing" => {
                self.easing = match v {
                    "linear" => Easing::Linear,
                    "smoothstep" => Easing::Smoothstep,
                    _ => return Err(bad(key, v, "linear or smoothstep")),
                }
            }
            "align.allow_rotation" => self.allow_rotation = flag(key, v)?,
            "align.per_frame" => self.per_frame_alignment = flag(key, v)?,
            "schedule.kind" => {
                self.schedule.kind = match v {
                    "linear" => BetaSchedule::Linear,
                    "scaled_linear" => BetaSchedule::ScaledLinear,
                    _ => return Err(bad(key, v, "linear or scaled_linear")),
                }
            }
            "schedule.beta_start" => self.schedule.beta_start = num(key, v, "a number")?,
            "schedule.beta_end" => self.schedule.beta_end = num(key, v, "a number")?,
            "schedule.train_steps" => self.schedule.train_steps = num(key, v, "a count")?,
            "schedule.inference_steps" => self.schedule.inference_steps = num(key, v, "a count")?,
            "guidance.optimization" => self.guidance_optimization = num(key, v, "a number")?,
            "guidance.generation" => self.guidance_generation = num(key, v, "a number")?,
            "dcam.enabled" => self.dcam_enabled = flag(key, v)?,
            "dcam.lambda1" => self.fusion.lambda1 = num(key, v, "a number")?,
            "dcam.lambda2" => self.fusion.lambda2 = num(key, v, "a number")?,
            "dcam.lambda3" => self.fusion.lambda3 = num(key, v, "a number")?,
            "mgdm.enabled" => self.mgdm_enabled = flag(key, v)?,
            "mgdm.threshold" => self.mask.threshold = num(key, v, "a number")?,
            "mgdm.sites" => self.mask.sites = mask_sites(key, v)?,
            "mgdm.min_resolution" => self.mask.min_resolution = num(key, v, "a count")?,
            "mgdm.drop_masked_tokens" => self.drop_masked_tokens = flag(key, v)?,
            "maps.head_mean" => self.head_mean = flag(key, v)?,
            "pacm.role" => {
                self.role = match v {
                    "conditional" => PacmRole::Conditional,
                    "unconditional" => PacmRole::Unconditional,
                    _ => return Err(bad(key, v, "conditional or unconditional")),
                }
            }
            "pacm.eta" => self.optimizer.eta = num(key, v, "a number")?,
            "pacm.inner_iterations" => self.optimizer.inner_iterations = num(key, v, "a count")?,
            "pacm.early_stop_loss" => self.optimizer.early_stop_loss = num(key, v, "a number")?,
            "pose.cond_scale" => self.cond_scale = num(key, v, "a number")?,
            "backend.kind" => {
                self.backend = match v {
                    "toy" => BackendKind::Toy,
                    "adapter" => BackendKind::Adapter,
                    _ => return Err(bad(key, v, "toy or adapter")),
                }
            }
            "backend.seed" => self.backend_seed = num(key, v, "an integer")?,
            "export.overlay" => self.overlay = flag(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Range checks and path existence. Inputs that are absent are allowed
    /// here and reported when a run needs them.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        if self.frames < self.transition_frames + 2 {
            return Err(Error::Config(format!(
                "`frames` = {} leaves no desired pose after the source and {} transition frames",
                self.frames, self.transition_frames
            )));
        }
        NoiseSchedule::new(self.schedule).map_err(cfg)?;
        for (key, w) in [
            ("guidance.optimization", self.guidance_optimization),
            ("guidance.generation", self.guidance_generation),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("`{key}` must be >= 0, got {w}")));
            }
        }
        FusionWeights::new(self.fusion.lambda1, self.fusion.lambda2, self.fusion.lambda3).map_err(cfg)?;
        if !(0.0..=1.0).contains(&self.mask.threshold) {
            return Err(Error::Config(format!(
                "`mgdm.threshold` must lie in [0, 1], got {}",
                self.mask.threshold
            )));
        }
        if let MaskSites::Listed(slots) = &self.mask.sites {
            if slots.is_empty() {
                return Err(Error::Config("`mgdm.sites` lists no sites".into()));
            }
        }
        self.optimizer.validate().map_err(cfg)?;
        if !(self.cond_scale >= 0.0 && self.cond_scale.is_finite()) {
            return Err(Error::Config(format!("`pose.cond_scale` must be >= 0, got {}", self.cond_scale)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("`jobs` must be >= 1".into()));
        }
        for (key, p) in [
            ("image", &self.image),
            ("pose", &self.pose),
            ("source_pose", &self.source_pose),
            ("source_mask", &self.source_mask),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("`{key}`: no such file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over every setting that influences the frames. Output
    /// location, cache location, parallelism and partial-output retention
    /// are excluded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule)
    }
}

/// Reads `key = value` lines. `#` starts a comment; values may be wrapped in
/// double quotes. Unknown and repeated keys are errors.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    let mut seen = HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) if !raw[..i].contains('"') => &raw[..i],
            _ => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim();
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {}: key `{key}` given twice", n + 1)));
        }
        config
            .set(key, value)
            .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
    }
    Ok(config)
}

/// Parses, defaults and range-checks a configuration file's text.
pub fn validate_config(text: &str) -> Result<PipelineConfig> {
    let config = parse_config(text)?;
    config.validate()?;
    Ok(config)
}

/// Reads and parses a configuration file without validating it, so command
/// line overrides can be applied first.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = validate_config("").unwrap();
        assert_eq!(c.fusion.terms(), [0.7, 0.15, 0.15]);
        assert_eq!(c.schedule.inference_steps, 50);
        assert_eq!(c.guidance_generation, 7.5);
        assert_eq!(c.frames, 16);
        assert_eq!(c.transition_frames, 4);
        assert_eq!(c.optimizer.inner_iterations, 5);
    }

    #[test]
    fn fusion_weights_must_sum_to_one() {
        let e = validate_config("dcam.lambda1 = 0.9").unwrap_err();
        assert!(e.to_string().contains("lambda"), "{e}");
    }

    #[test]
    fn unknown_key_is_named() {
        let e = validate_config("dcam.lamda1 = 0.7").unwrap_err();
        assert!(e.to_string().contains("dcam.lamda1"), "{e}");
        assert!(e.is_config_error());
    }

    #[test]
    fn every_key_is_accepted() {
        let mut c = PipelineConfig::default();
        for key in CONFIG_KEYS {
            let e = c.set(key, "definitely not valid @@");
            if let Err(e) = e {
                assert!(!e.to_string().contains("unknown key"), "{key}");
            }
        }
    }

    #[test]
    fn comments_quotes_and_overrides() {
        let text = "# run\nprompt = \"a dancer # twirling\"\nschedule.inference_steps = 8 # fast\nmgdm.sites = up.0, up.1\n";
        let mut c = parse_config(text).unwrap();
        assert_eq!(c.prompt, "a dancer # twirling");
        assert_eq!(c.schedule.inference_steps, 8);
        assert_eq!(c.mask.sites, MaskSites::Listed(vec![(BlockKind::Up, 0), (BlockKind::Up, 1)]));
        c.set("schedule.inference_steps", "4").unwrap();
        assert_eq!(c.schedule.inference_steps, 4);
        assert!(parse_config("frames = 2\nframes = 3").is_err());
        assert!(parse_config("frames").is_err());
    }

    #[test]
    fn hash_ignores_run_plumbing() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.jobs = 8;
        assert_eq!(a.hash(), b.hash());
        b.backend_seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn missing_paths_rejected() {
        assert!(validate_config("image = /nonexistent/image.png").is_err());
    }
}
