//! IDX containers: big-endian `u32` magic, one `u32` per extent, then raw
//! `u8` payload.

use std::path::Path;

use super::{read_file, DataError, Dataset, Split};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Label values a loaded dataset may carry.
pub const MAX_CLASSES: usize = 10;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses the header and checks the file is exactly header + payload long.
fn parse<'a>(bytes: &'a [u8], magic: u32, ndims: usize, what: &str) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(DataError::Truncated { what: what.into(), expected: header as u64, actual: bytes.len() as u64 });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic { what: what.into(), expected: magic, found });
    }
    let dims: Vec<usize> = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let payload = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    let expected = payload.and_then(|p| p.checked_add(header as u64)).unwrap_or(u64::MAX);
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(DataError::Truncated { what: what.into(), expected, actual });
    }
    if actual > expected {
        return Err(DataError::TrailingBytes { what: what.into(), expected, actual });
    }
    Ok((dims, &bytes[header..]))
}

/// Images as `(count, 1, rows, cols)` scaled to [0, 1].
pub fn parse_images(bytes: &[u8]) -> Result<Tensor<f32>, DataError> {
    let (dims, payload) = parse(bytes, IMAGES_MAGIC, 3, "images")?;
    if dims[1] == 0 || dims[2] == 0 {
        return Err(DataError::Format(format!("images have empty extent {}x{}", dims[1], dims[2])));
    }
    let data = payload.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let (_, payload) = parse(bytes, LABELS_MAGIC, 1, "labels")?;
    if let Some(index) = payload.iter().position(|&b| b as usize >= MAX_CLASSES) {
        return Err(DataError::LabelOutOfRange { index, label: payload[index] as usize, classes: MAX_CLASSES });
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn parse_idx(images: &[u8], labels: Option<&[u8]>, split: Split) -> Result<Dataset, DataError> {
    let x = parse_images(images)?;
    let y = labels.map(parse_labels).transpose()?;
    if let Some(y) = &y {
        if y.len() != x.shape()[0] {
            return Err(DataError::CountMismatch { images: x.shape()[0], labels: y.len() });
        }
    }
    Dataset::new(x, y, split)
}

pub fn load_idx(images: &Path, labels: Option<&Path>, split: Split) -> Result<Dataset, DataError> {
    let x = read_file(images)?;
    let y = labels.map(read_file).transpose()?;
    parse_idx(&x, y.as_deref(), split).map_err(|e| e.at(images))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn images_file(count: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..count * rows * cols).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn parses_scaled_pixels() {
        let t = parse_images(&images_file(2, 2, 3)).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 3]);
        assert_eq!(t.data()[1], 1.0 / 255.0);
    }

    #[test]
    fn truncation_names_both_sizes() {
        let mut b = images_file(2, 2, 3);
        b.pop();
        let err = parse_images(&b).unwrap_err();
        assert!(matches!(err, DataError::Truncated { expected: 28, actual: 27, .. }), "{err}");
        assert!(err.to_string().contains("28") && err.to_string().contains("27"));
    }

    #[test]
    fn labels_count_must_match() {
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2, 3]);
        let err = parse_idx(&images_file(2, 2, 2), Some(&labels), Split::Train).unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { images: 2, labels: 3 }));
    }
}
