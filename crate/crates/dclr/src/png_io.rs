//! Slides as 8-bit RGB PNG, masks as 8-bit grayscale PNG (0 or 255).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use dclr_core::{Mask, Tensor};
use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};

fn decode(path: &Path) -> Result<(Vec<u8>, png::OutputInfo)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::normalize_to_color8());
    let png_err = |source| Error::PngDecode {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    Ok((buf, info))
}

fn encode(path: &Path, width: usize, height: usize, color: ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let dim = |d: usize| u32::try_from(d).map_err(|_| Error::format(path, format!("extent {d} exceeds u32")));
    let mut encoder = png::Encoder::new(BufWriter::new(file), dim(width)?, dim(height)?);
    encoder.set_color(color);
    encoder.set_depth(BitDepth::Eight);
    let png_err = |source| Error::PngEncode {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// RGB or RGBA image as a `[3, H, W]` tensor in `[0, 1]`; alpha is dropped.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let (buf, info) = decode(path)?;
    let stride = match info.color_type {
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        other => return Err(Error::format(path, format!("expected an RGB image, found {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in buf.chunks_exact(stride).enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = f32::from(px[ch]) / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Writes a `[3, H, W]` tensor, rounding to the nearest 8-bit level.
pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let [c, h, w] = image.dims3()?;
    if c != 3 {
        return Err(Error::format(path, format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = image.data();
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            buf.push((d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    encode(path, w, h, ColorType::Rgb, &buf)
}

/// Grayscale mask; 0 is non-tumour and 255 tumour, any other level is an error.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let (buf, info) = decode(path)?;
    if info.color_type != ColorType::Grayscale {
        return Err(Error::format(path, format!("expected a grayscale mask, found {:?}", info.color_type)));
    }
    let data = buf
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(Error::format(path, format!("mask level {other} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Mask::new(info.height as usize, info.width as usize, data)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf: Vec<u8> = mask.data().iter().map(|&t| if t { 255 } else { 0 }).collect();
    encode(path, mask.width(), mask.height(), ColorType::Grayscale, &buf)
}
