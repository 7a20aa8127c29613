//! Feature records, manifests, the fixed token budget and synthetic data.

pub mod manifest;
pub mod record;
pub mod sequence;
pub mod synth;

pub use manifest::{load_manifest, ExplanationState, Manifest, RecordEntry, Split, Splits};
pub use record::{read_feature_file, write_feature_file, FeatureDims, FeatureRecord, LabelScale};
pub use sequence::{attach_agg_token, normalize_length, CONTENT_TOKENS, MODEL_TOKENS};
pub use synth::{synth_dataset, PlantedFactors, PlantedSignal, SynthDataset, SynthSpec};
