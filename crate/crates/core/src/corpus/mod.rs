//! Archive format, synthetic corpora and the frozen embedding pool.

mod archive;
mod kmeans;
mod pool;
mod synth;

pub use archive::{read_f32, write_f32, Archive, Manifest, SimiPair, Split, UtteranceRecord, ARCHIVE_VERSION};
pub(crate) use archive::write_json;
pub use kmeans::{kmeans_fit, KMeans};
pub use pool::EmbeddingPool;
pub use synth::{gen_synthetic, generate, GenConfig, SynthTruth};
