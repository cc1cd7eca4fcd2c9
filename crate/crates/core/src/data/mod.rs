//! Synthetic clip generation, the tensor container, dataset files and
//! augmentation.

mod container;
mod store;
mod synth;

pub use container::{byte_to_unit, read_tensor, write_grid, write_tensor, DType, RawTensor, TENSOR_MAGIC, TENSOR_VERSION};
pub use store::{
    read_alphabet, read_clip, read_dataset, read_partition, write_clip, write_dataset, ALPHABET_FILE, CLIP_DIR,
};
pub use synth::{
    glyph_set, horizontal_flip, normalize, synthesize, DatasetSplit, FrameStack, GenConfig, Handedness,
    SyntheticClip, CHANNELS, NORM_MEAN, NORM_STD,
};
