//! IDX binary ingestion (the MNIST file format).
//!
//! Images use magic `0x00000803` followed by big-endian `count`, `rows`,
//! `cols` and `count·rows·cols` unsigned bytes; labels use magic
//! `0x00000801` followed by `count` and `count` label bytes. Pixels are
//! scaled to `[0, 1]` and flattened row-major.

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{DataError, Dataset};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

fn read_u32_be(buf: &[u8], offset: usize, path: &Path) -> Result<u32, IdxError> {
    let end = offset + 4;
    if buf.len() < end {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: end,
            found: buf.len(),
        });
    }
    Ok(u32::from_be_bytes([
        buf[offset],
        buf[offset + 1],
        buf[offset + 2],
        buf[offset + 3],
    ]))
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct IdxImages {
    count: usize,
    pixels_per_image: usize,
    pixels: Vec<u8>,
}

fn parse_images(path: &Path) -> Result<IdxImages, IdxError> {
    let buf = read_file(path)?;
    let magic = read_u32_be(&buf, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(&buf, 4, path)? as usize;
    let rows = read_u32_be(&buf, 8, path)? as usize;
    let cols = read_u32_be(&buf, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if buf.len() < expected {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: buf.len(),
        });
    }
    Ok(IdxImages {
        count,
        pixels_per_image: rows * cols,
        pixels: buf[16..expected].to_vec(),
    })
}

fn parse_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    let buf = read_file(path)?;
    let magic = read_u32_be(&buf, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(&buf, 4, path)? as usize;
    let expected = 8 + count;
    if buf.len() < expected {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: buf.len(),
        });
    }
    Ok(buf[8..expected].to_vec())
}

/// Loads an IDX image/label file pair into a [`Dataset`] with pixel
/// features in `[0, 1]`. The class count is `max(label) + 1`, floored
/// at 2 so degenerate single-class files still form a valid task.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = parse_images(images_path)?;
    let labels = parse_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        }
        .into());
    }
    let features: Vec<f64> = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(features, images.pixels_per_image, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_images(path: &Path, magic: u32, images: &[Vec<u8>], rows: u32, cols: u32) {
        let mut f = std::fs::File::create(path).unwrap();
        f.write_all(&magic.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
    }

    fn write_labels(path: &Path, magic: u32, labels: &[u8]) {
        let mut f = std::fs::File::create(path).unwrap();
        f.write_all(&magic.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn handcrafted_fixture_roundtrips_exact_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        let images = vec![
            vec![0u8, 51, 102, 153, 204, 255],
            vec![10, 20, 30, 40, 50, 60],
        ];
        write_images(&img_path, IMAGES_MAGIC, &images, 2, 3);
        write_labels(&lbl_path, LABELS_MAGIC, &[7, 2]);

        let ds = load_idx(&img_path, &lbl_path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 6);
        assert_eq!(ds.labels(), &[7, 2]);
        assert_eq!(ds.num_classes(), 8);
        for (i, img) in images.iter().enumerate() {
            let expected: Vec<f64> = img.iter().map(|&p| p as f64 / 255.0).collect();
            assert_eq!(ds.feature_row(i), expected.as_slice());
        }
    }

    #[test]
    fn wrong_magic_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        write_images(&img_path, IMAGES_MAGIC, &[vec![0; 4]], 2, 2);
        write_labels(&lbl_path, 0xdead_beef, &[0]);
        match load_idx(&img_path, &lbl_path) {
            Err(DataError::Idx(IdxError::BadMagic {
                expected, found, ..
            })) => {
                assert_eq!(expected, LABELS_MAGIC);
                assert_eq!(found, 0xdead_beef);
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        std::fs::File::create(&img_path).unwrap();
        write_labels(&lbl_path, LABELS_MAGIC, &[0]);
        assert!(matches!(
            load_idx(&img_path, &lbl_path),
            Err(DataError::Idx(IdxError::Truncated { .. }))
        ));
    }

    #[test]
    fn short_pixel_payload_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        // header promises 2 images of 2x2 but carries only 5 pixels
        let mut f = std::fs::File::create(&img_path).unwrap();
        f.write_all(&IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&[1, 2, 3, 4, 5]).unwrap();
        drop(f);
        write_labels(&lbl_path, LABELS_MAGIC, &[0, 1]);
        assert!(matches!(
            load_idx(&img_path, &lbl_path),
            Err(DataError::Idx(IdxError::Truncated { .. }))
        ));
    }

    #[test]
    fn count_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        write_images(&img_path, IMAGES_MAGIC, &[vec![0; 4], vec![1; 4]], 2, 2);
        write_labels(&lbl_path, LABELS_MAGIC, &[0]);
        assert!(matches!(
            load_idx(&img_path, &lbl_path),
            Err(DataError::Idx(IdxError::CountMismatch {
                images: 2,
                labels: 1
            }))
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.idx");
        let lbl_path = dir.path().join("labels.idx");
        write_labels(&lbl_path, LABELS_MAGIC, &[0]);
        assert!(matches!(
            load_idx(&missing, &lbl_path),
            Err(DataError::Idx(IdxError::Io { .. }))
        ));
    }
}
