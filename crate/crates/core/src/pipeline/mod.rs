//! End-to-end runs: configuration, input preparation, embedding
//! optimization, lockstep frame generation, caching and export.

mod cache;
mod config;
mod export;
mod generate;
mod run;

pub use cache::EmbeddingCache;
pub use config::{load_config, parse_config, validate_config, BackendKind, PacmRole, PipelineConfig, CONFIG_KEYS};
pub use export::{export_frames, frame_file_name, OVERLAY_FILE};
pub use generate::{generate_frames, AttentionSetup, GenerationInputs, MaskGuidance};
pub use run::{
    load_image, make_backend, make_codec, prepare_inputs, run_pipeline, EmbeddingOrigin, PreparedInputs,
    RunManifest, RunOutput, StageTiming, MANIFEST_FILE, PARTIAL_FILE, TIMINGS_FILE,
};
