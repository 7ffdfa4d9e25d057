//! Samples, the synthetic shapes dataset, augmentation, labeled/unlabeled
//! splits and on-disk layout.

mod augment;
pub mod netpbm;
mod shapes;
mod split;

use std::path::Path;

pub use augment::{augment, augment_with, AugmentParams, DEFAULT_CROP, SCALES};
pub use shapes::{class_color, disk_pixels, gen_shapes_dataset, ShapeKind};
pub use split::{fraction_label, make_split, parse_fraction, SplitSpec};

use crate::error::{Error, Result};
use crate::tape::IGNORE_INDEX;
use crate::tensor::Tensor;

pub const IGNORE: u8 = IGNORE_INDEX as u8;

/// One image with its label map. `image` is `[3,H,W]` in `[0,1]`; `mask`
/// holds `H·W` class indices, 255 for ignored pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Vec<u8>) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("Sample", format!("image must be [3,H,W], got {shape:?}")));
        }
        if mask.len() != shape[1] * shape[2] {
            return Err(Error::shape(
                "Sample",
                format!("mask has {} values for a {}x{} image", mask.len(), shape[1], shape[2]),
            ));
        }
        Ok(Sample { id: id.into(), image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Every mask value is a class below `num_classes` or the ignore value.
    pub fn check_mask(&self, num_classes: usize) -> Result<()> {
        match self.mask.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
            Some(v) => Err(Error::InvalidArgument(format!(
                "sample {}: mask value {v} outside [0, {num_classes})",
                self.id
            ))),
            None => Ok(()),
        }
    }
}

/// `[B,3,H,W]` from samples of equal size.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    let Some(first) = samples.first() else {
        return Ok(Tensor::zeros(&[0, 3, 0, 0]));
    };
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape(
                "stack_images",
                format!("sample {} is {}x{}, batch is {h}x{w}", s.id, s.height(), s.width()),
            ));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(&[samples.len(), 3, h, w], data)
}

/// Concatenated masks as loss targets.
pub fn stack_masks(samples: &[&Sample]) -> Vec<usize> {
    samples.iter().flat_map(|s| s.mask.iter().map(|&v| v as usize)).collect()
}

/// Write `images/<id>.ppm` and `masks/<id>.pgm` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        netpbm::write_ppm(dir.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        netpbm::write_pgm(dir.join("masks").join(format!("{}.pgm", s.id)), s.width(), s.height(), &s.mask)?;
    }
    Ok(())
}

pub fn read_sample(dir: &Path, id: &str) -> Result<Sample> {
    let image = netpbm::read_ppm(dir.join("images").join(format!("{id}.ppm")))?;
    let (w, h, mask) = netpbm::read_pgm(dir.join("masks").join(format!("{id}.pgm")))?;
    if (h, w) != (image.shape()[1], image.shape()[2]) {
        return Err(Error::shape(
            "read_sample",
            format!("{id}: mask {h}x{w} vs image {}x{}", image.shape()[1], image.shape()[2]),
        ));
    }
    Sample::new(id, image, mask)
}

pub fn read_samples(dir: &Path, ids: &[String]) -> Result<Vec<Sample>> {
    ids.iter().map(|id| read_sample(dir, id)).collect()
}

/// Ids of every `images/*.ppm` under `dir`, sorted.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir.join("images"))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
