//! Dataset ingestion, image decoding and normalisation, texture sources and
//! checkpoint persistence.

mod checkpoint;
mod dataset;
mod image_io;
mod source;
mod texture;

pub(crate) use checkpoint::read_safetensors;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use dataset::{list_images, scan_dataset, DatasetIndex, DatasetItem, Label, Split};
pub use image_io::{load_image, load_mask, save_gray_png, Image};
pub use source::{DiskImages, ImageSource};
pub use texture::{procedural_texture, TextureFamily, TextureMode, TextureSource};
