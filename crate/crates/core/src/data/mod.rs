//! Datasets: the seeded synthetic-shapes generator, the on-disk dataset
//! layout, the raw-tensor file format and the k-means codebook trainer.

pub mod kmeans;
pub mod raw_tensor;
pub mod store;
pub mod synth;

pub use kmeans::{train_codebook, KMeansResult};
pub use raw_tensor::{read_raw_tensor, write_raw_tensor, RawData, RawTensor};
pub use store::{load_dataset, save_dataset, DatasetIndex};
pub use synth::{generate_synthetic, LabeledImage, ShapeKind, SynthConfig};
