//! Image-guided creative text generation, split into the stages
//! extract → compile prompt → generate → score.
//!
//! * [`svi`] holds the structured scene representation and its canonical JSON form.
//! * [`extractor`] produces scene documents (remote model, fixtures, captions).
//! * [`prompt`] compiles a scene and an instruction into a sectioned prompt.
//! * [`backend`] turns prompts into text (remote, template, replay).
//! * [`metrics`] scores generations (VisuGen-auto).
//! * [`harness`] runs manifests across ablation arms and granularity levels.

pub mod backend;
pub mod extractor;
pub mod harness;
pub mod http;
pub mod metrics;
pub mod prompt;
pub mod svi;
pub mod text;

pub use backend::{Backend, BackendConfig, BackendMode, GenerationResult};
pub use extractor::{caption_to_svi, ExtractorConfig, ExtractorMode, ImageRef};
pub use metrics::{ConstraintSet, MetricScores};
pub use prompt::{compile, simple_concat, OptimizedPrompt, TaskType, UserInstruction};
pub use svi::{GranularityLevel, SceneObject, SpatialRelation, SviDocument, SviSource};
