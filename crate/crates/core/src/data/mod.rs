//! Shadow/mask/ground-truth triples: synthetic generation, image files,
//! augmentation and cropping.

mod augment;
mod io;
mod synth;

use std::path::Path;

use rasm_tensor::Tensor;

use crate::error::{Error, Result};

pub use augment::{augment, random_crop, AugmentConfig};
pub use io::{list_samples, load_image, load_mask, load_sample, save_image, save_sample};
pub use synth::{generate_sample, luminance, SynthConfig, Texture};

/// One training or evaluation example. Images are `[3, H, W]` sRGB in
/// `[0, 1]`, the mask is `[1, H, W]` with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowSample {
    pub name: String,
    pub shadow: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub gt: Tensor<f32>,
}

impl ShadowSample {
    pub fn height(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[2]
    }

    /// Checks shapes, the binary mask and the `[0, 1]` value range.
    pub fn validate(&self) -> Result<()> {
        let s = self.mask.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Dimension(format!("{}: mask must be [1, H, W], got {s:?}", self.name)));
        }
        let img = [3, s[1], s[2]];
        if self.shadow.shape() != img || self.gt.shape() != img {
            return Err(Error::Dimension(format!(
                "{}: shadow {:?} / gt {:?} do not match mask {s:?}",
                self.name,
                self.shadow.shape(),
                self.gt.shape()
            )));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config(format!("{}: mask is not binary", self.name)));
        }
        let in_range = |t: &Tensor<f32>| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&self.shadow) || !in_range(&self.gt) {
            return Err(Error::Config(format!("{}: image values outside [0, 1]", self.name)));
        }
        Ok(())
    }
}

/// An in-memory list of samples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<ShadowSample>,
}

impl Dataset {
    /// Samples `0..count` of the synthetic generator.
    pub fn synthetic(config: &SynthConfig, count: usize) -> Result<Self> {
        config.validate()?;
        let samples = (0..count as u64).map(|i| generate_sample(config, i)).collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    /// Every triple of a `root/{shadow,mask,gt}/NAME` directory, sorted by name.
    pub fn load_dir(root: &Path) -> Result<Self> {
        let samples = list_samples(root)?.iter().map(|n| load_sample(root, n)).collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes every sample as PNG triples under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        self.samples.iter().try_for_each(|s| save_sample(root, s))
    }
}
