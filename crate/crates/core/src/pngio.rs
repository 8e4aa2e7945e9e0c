//! PNG encoding of images (8-bit RGB) and semantic masks (8-bit indexed,
//! pixel value = class index).

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{ImageTensor, SemanticMask};

/// Display palette for mask PNGs, indexed by class.
const MASK_PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [135, 180, 235],
    [90, 90, 90],
    [40, 200, 60],
    [230, 120, 30],
    [160, 100, 70],
    [30, 110, 40],
    [40, 70, 220],
    [240, 240, 240],
    [200, 60, 160],
    [120, 200, 200],
    [200, 200, 80],
    [100, 40, 120],
    [60, 140, 140],
    [180, 180, 120],
    [250, 180, 180],
];

fn png_err(path: &str, e: impl std::fmt::Display) -> Error {
    Error::Png { path: path.into(), message: e.to_string() }
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Quantizes an image the way a PNG round trip does.
pub fn quantize(image: &ImageTensor) -> ImageTensor {
    let pixels = image.pixels().iter().map(|&v| from_u8(to_u8(v))).collect();
    ImageTensor::new(image.height(), image.width(), pixels).expect("quantized values stay in range")
}

pub fn encode_image(image: &ImageTensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| png_err("<memory>", e))?;
        let bytes: Vec<u8> = image.pixels().iter().map(|&v| to_u8(v)).collect();
        w.write_image_data(&bytes).map_err(|e| png_err("<memory>", e))?;
    }
    Ok(out)
}

/// Decodes any 8-bit PNG as RGB; alpha is dropped, grayscale is replicated.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| png_err("<memory>", e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err("<memory>", "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err("<memory>", e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(png_err("<memory>", "unexpanded palette image")),
    };
    let mut pixels = Vec::with_capacity(w * h * 3);
    for px in buf[..w * h * channels].chunks(channels) {
        match channels {
            1 | 2 => pixels.extend([from_u8(px[0]); 3]),
            _ => pixels.extend(px[..3].iter().map(|&v| from_u8(v))),
        }
    }
    ImageTensor::new(h, w, pixels)
}

pub fn encode_mask(mask: &SemanticMask) -> Result<Vec<u8>> {
    let n = mask.num_classes();
    let palette: Vec<u8> = (0..=n).flat_map(|i| MASK_PALETTE[i % MASK_PALETTE.len()]).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, mask.width() as u32, mask.height() as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette);
        let mut w = enc.write_header().map_err(|e| png_err("<memory>", e))?;
        w.write_image_data(mask.labels()).map_err(|e| png_err("<memory>", e))?;
    }
    Ok(out)
}

/// Decodes raw 8-bit indexed or grayscale values as class labels.
pub fn decode_mask(bytes: &[u8], num_classes: usize) -> Result<SemanticMask> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err("<memory>", e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err("<memory>", "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err("<memory>", e))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(Error::InvalidMask(format!(
            "mask must be 8-bit indexed or grayscale, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(w * h);
    SemanticMask::new(h, w, num_classes, buf)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Png { message, .. } => Error::Png { path: path.to_path_buf(), message },
        other => other,
    })
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    with_path(path, decode_image(&read(path)?))
}

pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    write(path, &with_path(path, encode_image(image))?)
}

pub fn read_mask(path: &Path, num_classes: usize) -> Result<SemanticMask> {
    with_path(path, decode_mask(&read(path)?, num_classes))
}

pub fn write_mask(path: &Path, mask: &SemanticMask) -> Result<()> {
    write(path, &with_path(path, encode_mask(mask))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn mask_png_round_trip(
            (h, w, n, labels) in (1usize..12, 1usize..12, 1usize..20).prop_flat_map(|(h, w, n)| {
                (Just(h), Just(w), Just(n), prop::collection::vec(1..=n as u8, h * w))
            })
        ) {
            let mask = SemanticMask::new(h, w, n, labels).unwrap();
            let back = decode_mask(&encode_mask(&mask).unwrap(), n).unwrap();
            prop_assert_eq!(back, mask);
        }

        #[test]
        fn image_png_round_trip_is_quantization(bytes in prop::collection::vec(any::<u8>(), 3 * 5 * 4)) {
            let pixels = bytes.iter().map(|&b| from_u8(b)).collect();
            let img = ImageTensor::new(5, 4, pixels).unwrap();
            let back = decode_image(&encode_image(&img).unwrap()).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(quantize(&img), img);
        }
    }

    #[test]
    fn mask_with_label_outside_profile_is_rejected() {
        let mask = SemanticMask::new(2, 2, 5, vec![1, 2, 5, 5]).unwrap();
        let bytes = encode_mask(&mask).unwrap();
        assert!(matches!(decode_mask(&bytes, 4), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn rgb_image_is_not_a_mask() {
        let img = ImageTensor::filled(2, 2, [0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(decode_mask(&encode_image(&img).unwrap(), 4), Err(Error::InvalidMask(_))));
    }
}
