//! PNG reading/writing and sample-grid assembly.

use std::path::Path;

use crate::data::dequantize_for_display;
use crate::error::{Error, Result};
use crate::tensor::Arr;

/// Decode an 8-bit PNG to interleaved rows; returns (width, height,
/// channels, data). Grayscale and RGB only.
pub fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::data(format!(
            "{}: only 8-bit PNGs are supported",
            path.display()
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::data(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// Encode interleaved 8-bit rows as a PNG (grayscale or RGB).
pub fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    data: &[u8],
) -> Result<()> {
    if data.len() != width * height * channels {
        return Err(Error::shape(format!(
            "png payload {} bytes for {width}x{height} c{channels}",
            data.len()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(Error::config(format!(
                "png writer supports 1 or 3 channels, got {c}"
            )))
        }
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Stack `[N_i, C, H, W]` batches along the batch axis.
pub fn stack_batches(parts: &[Arr]) -> Result<Arr> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| Error::shape(format!("stacking batches: {e}")))
}

/// Tile `[N, C, H, W]` integer levels into a `rows x cols` grid image,
/// dequantizing to 8-bit for display. The grid is exactly
/// `(rows*H) x (cols*W)` pixels, row-major over images.
pub fn tile_grid(
    images: &Arr,
    num_bits: u8,
    rows: usize,
    cols: usize,
) -> Result<(usize, usize, usize, Vec<u8>)> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::shape("grid input must be [N, C, H, W]".to_string()));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if rows * cols < n {
        return Err(Error::config(format!(
            "{rows}x{cols} grid cannot hold {n} images"
        )));
    }
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![0u8; gh * gw * c];
    for i in 0..n {
        let (r, col) = (i / cols, i % cols);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let level = images[[i, ci, y, x]] as u8;
                    let v = if num_bits == 1 {
                        level * 255
                    } else {
                        dequantize_for_display(level, num_bits)
                    };
                    out[((r * h + y) * gw + (col * w + x)) * c + ci] = v;
                }
            }
        }
    }
    Ok((gw, gh, c, out))
}
