//! Synthetic annotated skeletal motion, the sequence file format, and
//! dataset manifests with label-visibility flags.

mod dataset;
mod format;
mod motion;

pub use dataset::{
    build_dataset, labeled_count, DatasetManifest, GeneratedDataset, GeneratorConfig, LoadedDataset, ManifestEntry,
    Split,
};
pub use format::{decode_sequence, encode_sequence, read_sequence, write_sequence, HEADER_LEN, SEQUENCE_MAGIC};
pub use motion::{
    generate_action_clip, synthesize_sequence, validate_segments, ActionSegment, AnnotatedSequence, MotionSequence,
    DEFAULT_FRAME_RATE, DEFAULT_JOINTS, NOISE_STD, NUM_GENERATORS,
};
