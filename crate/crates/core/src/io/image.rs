//! 8-bit PNG images and label masks.
//!
//! Images load as grids with intensities `value / 255`, one channel per
//! colour channel (alpha dropped). Masks are written as indexed PNGs whose
//! palette index is the class label; greyscale masks are read as raw labels.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{invalid, Error, Result};
use crate::grid::{CellGrid, GridShape, LabelGrid};

/// Palette colours for the first labels; higher labels reuse them cyclically.
const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::Unreadable {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    pixels: Vec<u8>,
}

fn decode(path: &Path, transformations: Transformations) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| unreadable(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(transformations);
    let mut reader = decoder.read_info().map_err(|e| unreadable(path, e))?;
    let mut pixels = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut pixels).map_err(|e| unreadable(path, e))?;
    if frame.bit_depth != BitDepth::Eight {
        return Err(unreadable(path, format!("unsupported bit depth {:?}", frame.bit_depth)));
    }
    pixels.truncate(frame.buffer_size());
    Ok(Decoded {
        width: frame.width as usize,
        height: frame.height as usize,
        color: frame.color_type,
        pixels,
    })
}

pub fn load_image_png(path: impl AsRef<Path>) -> Result<CellGrid> {
    let path = path.as_ref();
    let d = decode(path, Transformations::normalize_to_color8())?;
    let (stride, keep) = match d.color {
        ColorType::Grayscale => (1, 1),
        ColorType::GrayscaleAlpha => (2, 1),
        ColorType::Rgb => (3, 3),
        ColorType::Rgba => (4, 3),
        ColorType::Indexed => return Err(unreadable(path, "palette was not expanded")),
    };
    let data: Vec<f32> = d
        .pixels
        .chunks_exact(stride)
        .flat_map(|px| px[..keep].iter().map(|&v| f32::from(v) / 255.0))
        .collect();
    CellGrid::new(GridShape::new(vec![d.height, d.width], keep)?, data, keep)
}

/// Writes the first one or three channels of a 2D grid, clamped to `[0, 1]`.
pub fn save_image_png(grid: &CellGrid, path: impl AsRef<Path>) -> Result<()> {
    let dims = grid.dims();
    if dims.len() != 2 {
        return Err(invalid(format!("PNG images must be 2D, got extents {dims:?}")));
    }
    let (color, keep) = if grid.channels() >= 3 { (ColorType::Rgb, 3) } else { (ColorType::Grayscale, 1) };
    let bytes: Vec<u8> = (0..grid.cells())
        .flat_map(|i| grid.cell(i)[..keep].iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect::<Vec<_>>())
        .collect();
    write_png(path.as_ref(), dims[1], dims[0], color, None, &bytes)
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<LabelGrid> {
    let path = path.as_ref();
    let d = decode(path, Transformations::IDENTITY)?;
    let labels = match d.color {
        ColorType::Indexed | ColorType::Grayscale => d.pixels,
        ColorType::GrayscaleAlpha => d.pixels.chunks_exact(2).map(|p| p[0]).collect(),
        other => return Err(unreadable(path, format!("masks must be indexed or greyscale, found {other:?}"))),
    };
    LabelGrid::new(vec![d.height, d.width], labels)
}

pub fn save_mask_png(mask: &LabelGrid, path: impl AsRef<Path>) -> Result<()> {
    let dims = mask.dims();
    if dims.len() != 2 {
        return Err(invalid(format!("PNG masks must be 2D, got extents {dims:?}")));
    }
    let entries = usize::from(mask.max_label()) + 1;
    let palette: Vec<u8> = (0..entries).flat_map(|i| PALETTE[i % PALETTE.len()]).collect();
    write_png(path.as_ref(), dims[1], dims[0], ColorType::Indexed, Some(palette), mask.labels())
}

fn write_png(path: &Path, width: usize, height: usize, color: ColorType, palette: Option<Vec<u8>>, data: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer.write_image_data(data).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}
