//! Image files on disk. Colour images are 8-bit; single-channel maps may be
//! 8- or 16-bit.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, SaliencyMask};

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn write_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

/// Any decodable image as RGB in `[0, 1]`. Alpha is dropped.
pub fn load_rgb(path: &Path) -> Result<ImageTensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    ImageTensor::from_fn(h as usize, w as usize, 3, |y, x, c| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
}

/// Rounds to 8 bits after clamping to `[0, 1]`.
pub fn save_rgb(img: &ImageTensor, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", img.channels())));
    }
    let buf = ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        Rgb(std::array::from_fn(|c| to_u8(img.get(y as usize, x as usize, c))))
    });
    buf.save(path).map_err(write_err(path))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A single-channel map of raw sample values plus the full-scale value of
/// its bit depth.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub full_scale: f64,
}

pub fn load_gray(path: &Path) -> Result<GrayMap> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (data, full_scale): (Vec<f64>, f64) = match img {
        DynamicImage::ImageLuma8(b) => (b.into_raw().into_iter().map(f64::from).collect(), 255.0),
        DynamicImage::ImageLuma16(b) => (b.into_raw().into_iter().map(f64::from).collect(), 65535.0),
        other => {
            return Err(Error::Data(format!(
                "{} has {} channels; depth maps must be single-channel grayscale",
                path.display(),
                other.color().channel_count()
            )))
        }
    };
    Ok(GrayMap { height: h, width: w, data, full_scale })
}

pub fn save_gray16(mask: &SaliencyMask, path: &Path) -> Result<()> {
    let m = mask.clone().foreground_high();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([(m.get(y as usize, x as usize).clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path).map_err(write_err(path))
}
