//! Domain types shared by every module.
//!
//! Array layouts are fixed so that checkpoints and exports stay portable:
//! images are `batch x height x width x 3`, masks `batch x num_masks x
//! mask_height x mask_width`, appearance features `batch x num_masks x
//! appearance_dim`.

use ndarray::{Array1, Array3, Array4, Array5};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// A batch of RGB images with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch(pub Array4<f32>);

impl ImageBatch {
    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Stacks per-image `H x W x 3` arrays into a batch.
    pub fn from_images(images: &[Array3<f32>]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Shape("cannot build an empty image batch".into()));
        }
        let views: Vec<_> = images.iter().map(|a| a.view()).collect();
        let stacked = ndarray::stack(ndarray::Axis(0), &views)
            .map_err(|e| Error::Shape(format!("stacking images: {e}")))?;
        Ok(Self(stacked))
    }
}

/// Per-image spatial attention masks, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet(pub Array4<f32>);

impl MaskSet {
    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn num_masks(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }
}

/// One appearance feature vector per mask: `batch x num_masks x appearance_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceFeatureSet(pub Array3<f32>);

impl AppearanceFeatureSet {
    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn num_masks(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[2]
    }

    /// All-zero features, used for mask visualization.
    pub fn zeros(batch: usize, num_masks: usize, dim: usize) -> Self {
        Self(Array3::zeros((batch, num_masks, dim)))
    }
}

/// Mask-filtered copies of an image batch: `batch x num_masks x H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredImageSet(pub Array5<f32>);

/// One unbounded least-squares classifier score per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierScore(pub Array1<f32>);

/// Checks all `ImageBatch` invariants against the configuration.
pub fn validate_batch(images: &ImageBatch, cfg: &ModelConfig) -> Result<()> {
    let shape = images.0.shape();
    if shape[1] != cfg.image_height || shape[2] != cfg.image_width {
        return Err(Error::Shape(format!(
            "image batch is {}x{}, config wants {}x{}",
            shape[1], shape[2], cfg.image_height, cfg.image_width
        )));
    }
    if shape[3] != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", shape[3])));
    }
    for &v in images.0.iter() {
        if !v.is_finite() {
            return Err(Error::Shape(format!("image batch contains non-finite value {v}")));
        }
        if !(-1.0..=1.0).contains(&v) {
            return Err(Error::Shape(format!("image value {v} outside [-1, 1]")));
        }
    }
    Ok(())
}
