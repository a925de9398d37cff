//! PNG reading and writing for images (8-bit gray) and semantic maps (8-bit indexed).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{Image, SemanticMap};

/// Decoded PNG content.
pub enum PngContent {
    Gray {
        height: usize,
        width: usize,
        pixels: Vec<u8>,
    },
    /// `palette_len` is the class count of maps written by this crate.
    Indexed {
        height: usize,
        width: usize,
        indices: Vec<u8>,
        palette_len: usize,
    },
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(create(path)?, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(pixels).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_gray_png(path, img.width(), img.height(), &img.to_u8())
}

/// Gray-ramp palette so indexed maps stay viewable.
fn palette_rgb(num_classes: u8) -> Vec<u8> {
    let denom = (num_classes.max(2) - 1) as f32;
    (0..num_classes)
        .flat_map(|k| {
            let v = (k as f32 / denom * 255.0).round() as u8;
            [v, v, v]
        })
        .collect()
}

pub fn write_semantic_map(path: &Path, map: &SemanticMap) -> Result<()> {
    let mut enc = png::Encoder::new(create(path)?, map.width() as u32, map.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette_rgb(map.num_classes()));
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(map.labels()).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

pub fn read_png(path: &Path) -> Result<PngContent> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, "only 8-bit PNGs are supported"));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let luma = |stride: usize| -> Vec<u8> {
        buf.chunks(stride)
            .map(|p| {
                if stride >= 3 {
                    (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32).round() as u8
                } else {
                    p[0]
                }
            })
            .collect()
    };
    Ok(match info.color_type {
        png::ColorType::Indexed => {
            let palette_len = reader.info().palette.as_ref().map_or(0, |p| p.len() / 3);
            PngContent::Indexed { height, width, indices: buf, palette_len }
        }
        png::ColorType::Grayscale => PngContent::Gray { height, width, pixels: buf },
        png::ColorType::GrayscaleAlpha => PngContent::Gray { height, width, pixels: luma(2) },
        png::ColorType::Rgb => PngContent::Gray { height, width, pixels: luma(3) },
        png::ColorType::Rgba => PngContent::Gray { height, width, pixels: luma(4) },
    })
}

pub fn read_image(path: &Path) -> Result<Image> {
    match read_png(path)? {
        PngContent::Gray { height, width, pixels } => Image::from_u8(height, width, &pixels),
        PngContent::Indexed { .. } => Err(png_err(path, "expected a grayscale image, found an indexed map")),
    }
}

/// A grayscale image as is, or an indexed map in the network label encoding.
pub fn read_network_input(path: &Path) -> Result<Image> {
    match read_png(path)? {
        PngContent::Gray { height, width, pixels } => Image::from_u8(height, width, &pixels),
        PngContent::Indexed { height, width, indices, palette_len } => {
            let classes = u8::try_from(palette_len).map_err(|_| png_err(path, "palette too large"))?;
            SemanticMap::new(height, width, classes, indices)?.to_image()
        }
    }
}

pub fn read_semantic_map(path: &Path, num_classes: u8) -> Result<SemanticMap> {
    match read_png(path)? {
        PngContent::Indexed { height, width, indices, .. } => SemanticMap::new(height, width, num_classes, indices),
        PngContent::Gray { .. } => Err(png_err(path, "expected an indexed semantic map")),
    }
}

/// Sorted `*.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
