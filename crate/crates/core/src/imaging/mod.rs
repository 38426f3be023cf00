//! Image I/O, dataset layouts, centerline derivation, and checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod raster;
pub mod skeleton;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{dataset_id, load_dataset, CachePolicy, DatasetSplit, LabeledImage, Layout, SplitName};
pub use raster::{decode_image, encode_image, load_mask, load_real_map, save_labels, save_mask, save_real_map};
pub use skeleton::{count_components, skeletonize};
