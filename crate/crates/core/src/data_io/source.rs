use std::path::PathBuf;

use super::image_io::{load_image, Image};
use crate::error::Result;

/// Indexed access to a set of images, in memory or on disk.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;

    fn load(&self, index: usize) -> Result<Image>;

    /// Human-readable identifier of item `index`.
    fn id(&self, index: usize) -> String {
        format!("#{index}")
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageSource for [Image] {
    fn len(&self) -> usize {
        <[Image]>::len(self)
    }

    fn load(&self, index: usize) -> Result<Image> {
        Ok(self[index].clone())
    }
}

impl ImageSource for Vec<Image> {
    fn len(&self) -> usize {
        <[Image]>::len(self)
    }

    fn load(&self, index: usize) -> Result<Image> {
        Ok(self[index].clone())
    }
}

/// Image files decoded and resized on every access.
#[derive(Clone, Debug)]
pub struct DiskImages {
    pub paths: Vec<PathBuf>,
    pub size: usize,
}

impl ImageSource for DiskImages {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn load(&self, index: usize) -> Result<Image> {
        load_image(&self.paths[index], self.size)
    }

    fn id(&self, index: usize) -> String {
        self.paths[index].display().to_string()
    }
}
