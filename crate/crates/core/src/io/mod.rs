//! File formats, dataset adapters and the synthetic data generator.

pub mod annotations;
pub mod checkpoint;
pub mod config;
pub mod features;
pub mod synth;
pub mod text;

pub use annotations::{load_annotations, save_annotations, AnnotationFormat, AnnotationRecord};
pub use checkpoint::Checkpoint;
pub use config::{config_text, load_config, parse_config, save_config};
pub use features::{FeatureMatrix, FeatureStore};
pub use synth::{synth_generate, SynthDataset, SynthSpec};
pub use text::{tokenize, Vocabulary};
