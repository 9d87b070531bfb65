//! 8-bit PNG images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::Image;

/// Quantizes to 8 bits per channel (round to nearest, clamped).
pub fn encode(img: &Image) -> Result<Vec<u8>> {
    let plane = img.width * img.height;
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((img.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(encode_err)?;
        w.write_image_data(&rgb).map_err(encode_err)?;
    }
    Ok(out)
}

fn encode_err(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::Format { offset: 0, message: other.to_string() },
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Format { offset: 0, message: e.to_string() })?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format { offset: 0, message: e.to_string() })?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format { offset: 0, message: "unexpanded palette image".into() }),
    };
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        let px = &buf[i * stride..(i + 1) * stride];
        for c in 0..3 {
            let v = if stride < 3 { px[0] } else { px[c] };
            data[c * plane + i] = v as f32 / 255.0;
        }
    }
    Image::new(w, h, data)
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    super::write_file(path, &encode(img)?)
}

pub fn read(path: &Path) -> Result<Image> {
    decode(&std::fs::read(path)?)
}
