//! Binary PGM/PPM files, image grids, and the crop/downsample used for
//! face-style datasets.

use std::fs;
use std::path::Path;

use super::{read_file, DataError, Dataset, Split};
use crate::tensor::Tensor;

/// White separator between grid cells, in pixels.
pub const GUTTER: usize = 2;

/// Centre `crop × crop` window, then box-averaged down to `target × target`.
pub fn center_crop_resize(img: &Tensor<f32>, crop: usize, target: usize) -> Result<Tensor<f32>, DataError> {
    let [c, h, w] = img.shape()[..] else {
        return Err(DataError::Shape(format!("expected (c, h, w), got {:?}", img.shape())));
    };
    if h < crop || w < crop {
        return Err(DataError::TooSmall { h, w, crop });
    }
    if target == 0 || !crop.is_multiple_of(target) {
        return Err(DataError::Shape(format!("crop {crop} is not a multiple of target {target}")));
    }
    let (top, left) = ((h - crop) / 2, (w - crop) / 2);
    let k = crop / target;
    let norm = (k * k) as f32;
    let src = img.data();
    let mut out = Vec::with_capacity(c * target * target);
    for ch in 0..c {
        for ty in 0..target {
            for tx in 0..target {
                let mut acc = 0.0f32;
                for dy in 0..k {
                    let row = (ch * h + top + ty * k + dy) * w + left + tx * k;
                    acc += src[row..row + k].iter().sum::<f32>();
                }
                out.push(acc / norm);
            }
        }
    }
    Ok(Tensor::new(vec![c, target, target], out))
}

/// Canvas `(height, width)` for a grid of `h × w` cells.
pub fn grid_canvas(rows: usize, cols: usize, h: usize, w: usize) -> (usize, usize) {
    (rows * h + rows.saturating_sub(1) * GUTTER, cols * w + cols.saturating_sub(1) * GUTTER)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// PGM (one channel) or PPM (three channels) bytes tiling `images` row-major.
pub fn encode_grid(images: &[Tensor<f32>], rows: usize, cols: usize) -> Result<Vec<u8>, DataError> {
    let Some(first) = images.first() else {
        return Err(DataError::Shape("no images to tile".into()));
    };
    if rows * cols < images.len() {
        return Err(DataError::Shape(format!("{} images do not fit a {rows}x{cols} grid", images.len())));
    }
    let [c, h, w] = first.shape()[..] else {
        return Err(DataError::Shape(format!("expected (c, h, w) images, got {:?}", first.shape())));
    };
    if c != 1 && c != 3 {
        return Err(DataError::Shape(format!("{c} channels; only 1 or 3 can be written")));
    }
    if let Some(bad) = images.iter().find(|im| im.shape() != first.shape()) {
        return Err(DataError::Shape(format!("mixed image shapes {:?} and {:?}", first.shape(), bad.shape())));
    }
    let (ch, cw) = grid_canvas(rows, cols, h, w);
    let mut pixels = vec![255u8; ch * cw * c];
    for (k, im) in images.iter().enumerate() {
        let (r, col) = (k / cols, k % cols);
        let (y0, x0) = (r * (h + GUTTER), col * (w + GUTTER));
        for y in 0..h {
            for x in 0..w {
                for p in 0..c {
                    pixels[((y0 + y) * cw + x0 + x) * c + p] = quantize(im.data()[(p * h + y) * w + x]);
                }
            }
        }
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{cw} {ch}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_image_grid(images: &[Tensor<f32>], rows: usize, cols: usize, path: &Path) -> Result<(), DataError> {
    let bytes = encode_grid(images, rows, cols)?;
    fs::write(path, bytes).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn parse_pnm(bytes: &[u8]) -> Result<Tensor<f32>, DataError> {
    let mut pos = 0;
    let mut token = || -> Result<String, DataError> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Format("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let c = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(DataError::Format(format!("unsupported image type {other:?}"))),
    };
    let mut num = || -> Result<usize, DataError> {
        let t = token()?;
        t.parse().map_err(|_| DataError::Format(format!("bad header field {t:?}")))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(DataError::Format(format!("max value {max}; only 255 is supported")));
    }
    // a single whitespace byte separates header and raster
    let start = pos + 1;
    let need = c * h * w;
    let raster = bytes.get(start..).unwrap_or_default();
    if raster.len() != need {
        return Err(DataError::Truncated { what: "image".into(), expected: (start + need) as u64, actual: bytes.len() as u64 });
    }
    let mut data = vec![0.0f32; need];
    for y in 0..h {
        for x in 0..w {
            for p in 0..c {
                data[(p * h + y) * w + x] = f32::from(raster[(y * w + x) * c + p]) / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], data))
}

/// Reads a binary PGM/PPM as `(c, h, w)` in [0, 1].
pub fn read_pnm(path: &Path) -> Result<Tensor<f32>, DataError> {
    parse_pnm(&read_file(path)?).map_err(|e| e.at(path))
}

/// Every `.ppm`/`.pgm` in `dir`, sorted by name, centre-cropped and
/// downsampled. Images are unlabelled.
pub fn load_ppm_dir(dir: &Path, crop: usize, target: usize, limit: Option<usize>) -> Result<Dataset, DataError> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    if let Some(n) = limit {
        paths.truncate(n);
    }
    if paths.is_empty() {
        return Err(DataError::Format(format!("no .ppm/.pgm files in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut channels = None;
    for p in &paths {
        let img = center_crop_resize(&read_pnm(p)?, crop, target).map_err(|e| e.at(p))?;
        let c = img.shape()[0];
        if *channels.get_or_insert(c) != c {
            return Err(DataError::Shape(format!("{} has {c} channels, others differ", p.display())));
        }
        data.extend(img.into_data());
    }
    let images = Tensor::new(vec![paths.len(), channels.unwrap_or(1), target, target], data);
    Dataset::new(images, None, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_grid_header() {
        let img = Tensor::full(&[1, 28, 28], 0.5f32);
        let bytes = encode_grid(&[img], 1, 1).unwrap();
        assert!(bytes.starts_with(b"P5\n28 28\n255\n"));
        assert_eq!(bytes.len(), 13 + 28 * 28);
        assert_eq!(bytes[13], 128);
    }

    #[test]
    fn grid_geometry() {
        assert_eq!(grid_canvas(2, 3, 28, 28), (58, 88));
        let imgs = vec![Tensor::zeros(&[1, 28, 28]); 5];
        let bytes = encode_grid(&imgs, 2, 3).unwrap();
        assert!(bytes.starts_with(b"P5\n88 58\n255\n"));
        let raster = &bytes[13..];
        // gutter column and the empty sixth cell stay white
        assert_eq!(raster[28], 255);
        assert_eq!(raster[40 * 88 + 87], 255);
        assert_eq!(raster[0], 0);
    }
}
