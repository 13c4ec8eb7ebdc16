//! Corpus indexing, splitting, decoding and the synthetic stand-in corpus.

mod image;
mod index;
mod source;
mod split;
mod synthetic;

pub use self::image::{
    decode_rgb, encode_labels, load_and_resize, normalize, resize_bilinear, rgb_to_array, DEFAULT_SIDE,
};
pub use index::{scan_dataset, DatasetIndex, Sample, IMAGE_EXTENSIONS};
pub use source::{DiskSource, ImageBatch, ImageSource, Subset};
pub use split::{allocate, check_ratios, split_dataset, split_labels, SplitAssignment, SplitFile, DEFAULT_RATIOS};
pub use synthetic::{band, class_names, generate_synthetic, SyntheticDataset};
