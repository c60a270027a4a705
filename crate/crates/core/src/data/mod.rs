//! Dataset ingestion: manifests, image decoding and augmentation, protocol
//! splits, batching, and the synthetic iris generator.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod manifest;
pub mod split;
pub mod synth;

pub use augment::{augment, warp, Affine, AugmentConfig};
pub use dataset::{Batch, Dataset, Target};
pub use image::{decode_and_resize, resize, DEFAULT_SIZE};
pub use manifest::{format_manifest, load_manifest, parse_manifest, Label, LensClass, RelabelPolicy, SampleRecord, Split};
pub use split::{holdout, make_protocol_splits, subsample, validation_split, ProtocolKind, ProtocolSpec, Splits};
pub use synth::{parse_counts, render, sample_seed, synth_generate, ClassCounts, SensorProfile, SynthConfig, SynthOutput};
