//! PNG persistence for images, probability maps, binary masks and label maps.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use miml_core::image::{BinaryMask, ImageTensor, ProbabilityMask};

use crate::error::{Error, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.into(), source })
}

fn save<P: image::PixelWithColorType>(path: &Path, img: &ImageBuffer<P, Vec<P::Subpixel>>) -> Result<()>
where
    [P::Subpixel]: image::EncodableLayout,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(ImageTensor::from_rgb8(w as usize, h as usize, rgb.as_raw()))
}

pub fn save_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w) = image.size();
    let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, image.to_rgb8()).expect("buffer size");
    save(path, &buf)
}

/// 8-bit single channel, value `round(255·p)`.
pub fn save_probability(path: &Path, mask: &ProbabilityMask) -> Result<()> {
    let (h, w) = mask.size();
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, mask.to_u8()).expect("buffer size");
    save(path, &buf)
}

pub fn load_probability(path: &Path) -> Result<ProbabilityMask> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    Ok(ProbabilityMask::from_u8(w as usize, h as usize, g.as_raw()))
}

/// Set pixels are stored as 255.
pub fn save_binary(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.size();
    let data = mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    save(path, &ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, data).expect("buffer size"))
}

/// Pixels above 127 are set.
pub fn load_binary(path: &Path) -> Result<BinaryMask> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    Ok(BinaryMask::from_vec(w as usize, h as usize, g.as_raw().iter().map(|&v| (v > 127) as u8).collect()))
}

/// Label images hold one object id per pixel (0 = background, at most 255 ids).
pub fn save_labels(path: &Path, width: usize, height: usize, labels: &[u32]) -> Result<()> {
    let data = labels.iter().map(|&l| l.min(255) as u8).collect();
    save(path, &ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, data).expect("buffer size"))
}

pub fn load_labels(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    Ok((w as usize, h as usize, g.as_raw().iter().map(|&v| v as u32).collect()))
}
