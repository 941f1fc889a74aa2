//! Baseline JPEG through the `image` crate.

use std::io::Cursor;

use image::codecs::jpeg::{JpegDecoder, JpegEncoder};
use image::{ExtendedColorType, ImageDecoder};
use miml_core::image::ImageTensor;
use miml_core::jpeg::JpegCodec;

#[derive(Clone, Copy, Debug, Default)]
pub struct ImageJpeg;

impl ImageJpeg {
    pub fn encode(&self, image: &ImageTensor, quality: u8) -> Vec<u8> {
        let (h, w) = image.size();
        let mut out = Vec::new();
        JpegEncoder::new_with_quality(&mut out, quality.clamp(1, 100))
            .encode(&image.to_rgb8(), w as u32, h as u32, ExtendedColorType::Rgb8)
            .expect("in-memory JPEG encoding of an RGB8 buffer");
        out
    }

    pub fn decode(&self, bytes: &[u8]) -> image::ImageResult<ImageTensor> {
        let dec = JpegDecoder::new(Cursor::new(bytes))?;
        let (w, h) = dec.dimensions();
        let mut buf = vec![0u8; dec.total_bytes() as usize];
        dec.read_image(&mut buf)?;
        Ok(ImageTensor::from_rgb8(w as usize, h as usize, &buf))
    }
}

impl JpegCodec for ImageJpeg {
    fn roundtrip(&self, image: &ImageTensor, quality: u8) -> ImageTensor {
        self.decode(&self.encode(image, quality)).expect("decoding freshly encoded JPEG")
    }
}
