use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ExtendedColorType, ImageError, ImageFormat};
use rasm_tensor::{Element, Tensor};

use super::ShadowSample;
use crate::error::{Error, Result};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn sniff(path: &Path, bytes: &[u8]) -> Result<ImageFormat> {
    if bytes.starts_with(PNG_MAGIC) {
        Ok(ImageFormat::Png)
    } else if bytes.len() >= 2 && bytes[0] == b'P' && (b'1'..=b'7').contains(&bytes[1]) {
        Ok(ImageFormat::Pnm)
    } else {
        Err(format_error(path, "unrecognized magic bytes (expected PNG or PPM/PGM)"))
    }
}

/// Reads an 8-bit PNG or PPM/PGM file into a `[C, H, W]` tensor in `[0, 1]`
/// (`C` = 1 for grayscale, 3 otherwise; alpha is dropped).
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = sniff(path, &bytes)?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| match e {
        ImageError::Unsupported(u) => Error::UnsupportedBitDepth { path: path.to_path_buf(), detail: u.to_string() },
        other => format_error(path, other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageLumaA8(_) => (1, img.to_luma8().into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(_) => (3, img.to_rgb8().into_raw()),
        other => {
            return Err(Error::UnsupportedBitDepth {
                path: path.to_path_buf(),
                detail: format!("{:?}; only 8-bit samples are supported", other.color()),
            })
        }
    };
    // interleaved HWC bytes -> planar CHW
    let n = h * w;
    let mut data = vec![0.0f32; channels * n];
    for p in 0..n {
        for c in 0..channels {
            data[c * n + p] = raw[p * channels + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![channels, h, w], data)?)
}

/// Loads a mask image and binarizes it at 0.5; colour masks use their mean.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = load_image(path)?;
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let n = h * w;
    let d = img.data();
    let data = (0..n)
        .map(|p| {
            let v = (0..c).map(|k| d[k * n + p]).sum::<f32>() / c as f32;
            (v > 0.5) as u8 as f32
        })
        .collect();
    Ok(Tensor::new(vec![1, h, w], data)?)
}

/// Writes a `[1 | 3, H, W]` tensor as 8-bit PNG, or binary PGM/PPM when the
/// extension is `.pgm`/`.ppm`. Values are clipped to `[0, 1]` and quantized
/// with round-half-up.
pub fn save_image<T: Element>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let (c, h, w) = match *img.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        ref s => return Err(Error::Dimension(format!("cannot save image of shape {s:?}"))),
    };
    let n = h * w;
    let d = img.data();
    let mut raw = vec![0u8; c * n];
    for p in 0..n {
        for k in 0..c {
            raw[p * c + k] = (d[k * n + p].as_f64().clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8;
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm" | "pgm") => {
            let magic = if c == 1 { "P5" } else { "P6" };
            let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&raw);
            fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
        _ => {
            let color = if c == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
            image::save_buffer_with_format(path, &raw, w as u32, h as u32, color, ImageFormat::Png).map_err(|e| match e {
                ImageError::IoError(io) => Error::io(path, io),
                other => format_error(path, other.to_string()),
            })
        }
    }
}

/// File names present in `root/shadow`, sorted.
pub fn list_samples(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("shadow");
    let mut names = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Loads `root/{shadow,mask,gt}/<file_name>`. The sample is named after the
/// file stem.
pub fn load_sample(root: &Path, file_name: &str) -> Result<ShadowSample> {
    let part = |d: &str| -> PathBuf { root.join(d).join(file_name) };
    let stem = Path::new(file_name).file_stem().map_or(file_name.into(), |s| s.to_string_lossy().into_owned());
    let sample = ShadowSample {
        name: stem,
        shadow: load_image(&part("shadow"))?,
        mask: load_mask(&part("mask"))?,
        gt: load_image(&part("gt"))?,
    };
    if sample.shadow.shape()[0] != 3 || sample.gt.shape()[0] != 3 {
        return Err(Error::Dimension(format!("{file_name}: shadow and gt images must be colour")));
    }
    sample.validate()?;
    Ok(sample)
}

/// Writes `root/{shadow,mask,gt}/<name>.png`.
pub fn save_sample(root: &Path, sample: &ShadowSample) -> Result<()> {
    let file = format!("{}.png", sample.name);
    save_image(&sample.shadow, &root.join("shadow").join(&file))?;
    save_image(&sample.mask, &root.join("mask").join(&file))?;
    save_image(&sample.gt, &root.join("gt").join(&file))
}
