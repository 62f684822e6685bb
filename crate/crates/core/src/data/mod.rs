//! Synthetic corpus, label noise, training targets, augmentation, stain
//! normalization and dataset files.

pub mod augment;
pub mod corpus;
pub mod generate;
pub mod noise;
pub mod stain;
pub mod targets;

pub use augment::{augment, Annotated, AugmentConfig};
pub use corpus::{Corpus, CorpusConfig, CorpusManifest, ManifestEntry, Split};
pub use generate::{generate_sample, GeneratorConfig, SampleRecord};
pub use noise::{inject_label_noise, NoiseConfig};
pub use stain::{macenko_normalize, MacenkoParams, StainReference};
pub use targets::{extract_targets, TargetPair};
