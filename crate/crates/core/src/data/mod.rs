//! Dataset ingestion, augmentation and checkpoint files.

mod augment;
mod checkpoint;
mod dataset;
mod loaders;

pub use augment::{augment, hflip_image, pad_crop_image, AugmentDraw};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{Dataset, Normalization, Split};
pub use loaders::{
    load_cifar_binary, load_cifar_dir, load_cifar_files, load_idx, load_mnist_dir, DatasetFormat, CIFAR_RECORD_BYTES,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from the single run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    DataOrder = 1,
    Augment = 2,
    HeadInit = 3,
    ParamInit = 4,
    Calibration = 5,
    Probe = 6,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
