//! PNG encoding for RGB images and palette-indexed label maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

fn png_err(path: &Path, e: impl ToString) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Interleaved 8-bit RGB.
pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut enc = png::Encoder::new(create(path)?, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(rgb).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// One byte per pixel, interpreted through `palette` (at most 256 entries).
pub fn write_indexed(path: &Path, width: usize, height: usize, indices: &[u8], palette: &[[u8; 3]]) -> Result<()> {
    assert_eq!(indices.len(), width * height);
    assert!(!palette.is_empty() && palette.len() <= 256);
    let mut enc = png::Encoder::new(create(path)?, width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette.iter().flatten().copied().collect::<Vec<u8>>());
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(indices).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub struct Decoded {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
    };
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf,
    })
}

/// Reads an image as interleaved RGB, expanding grayscale and dropping alpha.
pub fn read_rgb(path: &Path) -> Result<Decoded> {
    let d = decode(path)?;
    let data = match d.channels {
        3 => d.data,
        4 => d.data.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        1 => d.data.iter().flat_map(|&v| [v, v, v]).collect(),
        2 => d.data.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        _ => unreachable!(),
    };
    Ok(Decoded { channels: 3, data, ..d })
}

/// Reads raw label indices from an indexed or 8-bit grayscale PNG.
pub fn read_indices(path: &Path) -> Result<Decoded> {
    let d = decode(path)?;
    if d.channels != 1 {
        return Err(png_err(path, "label maps must be indexed or 8-bit grayscale"));
    }
    Ok(d)
}
