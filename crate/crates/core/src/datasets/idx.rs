//! IDX containers as distributed with MNIST, KMNIST and EMNIST.
//!
//! Big-endian; images use magic `0x00000803` followed by count, rows and
//! columns, labels use `0x00000801` followed by count. Payloads are unsigned bytes.

use std::path::Path;

use super::{Dataset, Label, LabeledImage, Provenance};
use crate::error::{Error, Result};
use crate::raster::{quantize, Image, Resolution};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn idx_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(path, offset, format!("truncated header while reading {what}")))
}

/// Returns `(rows, cols, pixels)` with one byte per pixel, images concatenated.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(idx_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x} (ubyte, 3 dims)"),
        ));
    }
    let count = be_u32(&bytes, 4, path, "image count")? as usize;
    let rows = be_u32(&bytes, 8, path, "rows")? as usize;
    let cols = be_u32(&bytes, 12, path, "cols")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(idx_err(
            path,
            16 + payload.len(),
            format!(
                "truncated pixel data: {count} images of {rows}x{cols} need {need} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > need {
        return Err(idx_err(path, 16 + need, "trailing bytes after pixel data"));
    }
    Ok((rows, cols, payload.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(idx_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x} (ubyte, 1 dim)"),
        ));
    }
    let count = be_u32(&bytes, 4, path, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(idx_err(
            path,
            8 + payload.len(),
            format!("truncated labels: header declares {count}, found {}", payload.len()),
        ));
    }
    if payload.len() > count {
        return Err(idx_err(path, 8 + count, "trailing bytes after labels"));
    }
    Ok(payload.to_vec())
}

/// Loads an image/label pair; pixel bytes are scaled to `[0, 1]` and classes are
/// named by their decimal index (`0..=max label`).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (rows, cols, pixels) = read_idx_images(images)?;
    let labels_raw = read_idx_labels(labels)?;
    let plane = rows * cols;
    let count = if plane == 0 { 0 } else { pixels.len() / plane };
    if count != labels_raw.len() {
        return Err(idx_err(
            labels,
            4,
            format!("{count} images but {} labels", labels_raw.len()),
        ));
    }
    let res = Resolution::new(1, rows, cols);
    let num_classes = labels_raw.iter().copied().max().map_or(0, |m| m as usize + 1);
    let source = images.display().to_string();
    let items = labels_raw
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let image = Image::from_bytes_interleaved(res, &pixels[i * plane..(i + 1) * plane])?;
            Ok(LabeledImage {
                image,
                label: Label::Class(l as usize),
                provenance: Provenance {
                    source: source.clone(),
                    source_index: i,
                    transforms: vec![],
                    source_labels: vec![l.to_string()],
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let names = (0..num_classes).map(|c| c.to_string()).collect();
    Dataset::new(res, names, false, items)
}

/// Writes a single-channel dataset with at most 256 classes; pixels are quantized to bytes.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let res = dataset.resolution();
    if res.channels != 1 {
        return Err(Error::invalid("IDX images must be single-channel"));
    }
    let count = dataset.len() as u32;
    let mut img_bytes = Vec::with_capacity(16 + dataset.len() * res.height * res.width);
    img_bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img_bytes.extend_from_slice(&count.to_be_bytes());
    img_bytes.extend_from_slice(&(res.height as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(res.width as u32).to_be_bytes());
    let mut lbl_bytes = Vec::with_capacity(8 + dataset.len());
    lbl_bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbl_bytes.extend_from_slice(&count.to_be_bytes());
    for (i, it) in dataset.items().iter().enumerate() {
        let Label::Class(c) = it.label else {
            return Err(Error::invalid(format!("item {i}: background labels have no IDX encoding")));
        };
        let c = u8::try_from(c).map_err(|_| Error::invalid(format!("item {i}: label {c} exceeds 255")))?;
        lbl_bytes.push(c);
        img_bytes.extend(it.image.data().iter().map(|&v| quantize(v)));
    }
    std::fs::write(images, img_bytes).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, lbl_bytes).map_err(|e| Error::io(labels, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, bytes: &[u8]) {
        std::fs::write(path, bytes).unwrap();
    }

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn two_images_28x28() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let mut img = header(IMAGES_MAGIC, &[2, 28, 28]);
        img.extend((0..2 * 784).map(|i| (i % 256) as u8));
        write(&ip, &img);
        let mut lbl = header(LABELS_MAGIC, &[2]);
        lbl.extend([3, 7]);
        write(&lp, &lbl);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.resolution(), Resolution::new(1, 28, 28));
        assert_eq!(d.items()[1].label, Label::Class(7));
        assert_eq!(d.num_classes(), 8);
        assert_eq!(d.items()[0].image.get(0, 0, 1), 1.0 / 255.0);
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let mut img = header(IMAGES_MAGIC, &[2, 2, 2]);
        img.extend([0u8; 8]);
        write(&ip, &img);
        let mut lbl = header(LABELS_MAGIC, &[3]);
        lbl.extend([0, 1, 2]);
        write(&lp, &lbl);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("2 images but 3 labels"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i");
        write(&p, &header(0x0000_0802, &[1, 2, 2]));
        let err = read_idx_images(&p).unwrap_err();
        assert!(matches!(err, Error::Idx { offset: 0, .. }), "{err}");

        let mut img = header(IMAGES_MAGIC, &[2, 2, 2]);
        img.extend([0u8; 5]);
        write(&p, &img);
        let err = read_idx_images(&p).unwrap_err();
        assert!(matches!(err, Error::Idx { offset: 21, .. }), "{err}");

        write(&p, &IMAGES_MAGIC.to_be_bytes()[..3]);
        assert!(matches!(read_idx_images(&p).unwrap_err(), Error::Idx { offset: 0, .. }));
    }
}
