//! MNIST IDX files (optionally gzip-compressed, detected by a `.gz` suffix).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use super::{ModelError, Result};
use crate::linalg::Vector;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// A flattened image (pixels in `[0, 1]`) with its class label.
pub type Sample = (Vector, u8);

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

struct IdxReader {
    inner: Box<dyn Read>,
    path: String,
}

impl IdxReader {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| ModelError::Idx {
            path: self.path.clone(),
            message: if e.kind() == std::io::ErrorKind::UnexpectedEof {
                format!("truncated file while reading {what}")
            } else {
                format!("read error while reading {what}: {e}")
            },
        })
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_be_bytes(b))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("magic number")?;
        if found != expected {
            return Err(ModelError::BadMagic { path: self.path.clone(), expected, found });
        }
        Ok(())
    }
}

/// Loads up to `limit` images and labels, scaling pixels by 1/255.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: usize,
) -> Result<Vec<Sample>> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let mut images = IdxReader { inner: open(images_path)?, path: images_path.display().to_string() };
    let mut labels = IdxReader { inner: open(labels_path)?, path: labels_path.display().to_string() };

    images.magic(IMAGES_MAGIC)?;
    let count = images.u32("image count")? as usize;
    let rows = images.u32("row count")? as usize;
    let cols = images.u32("column count")? as usize;
    labels.magic(LABELS_MAGIC)?;
    let label_count = labels.u32("label count")? as usize;
    if label_count != count {
        return Err(ModelError::Idx {
            path: labels.path.clone(),
            message: format!("{label_count} labels for {count} images"),
        });
    }

    let n = count.min(limit);
    let mut label_bytes = vec![0u8; n];
    labels.read_exact(&mut label_bytes, "labels")?;
    let mut pixels = vec![0u8; rows * cols];
    let mut out = Vec::with_capacity(n);
    for (i, &label) in label_bytes.iter().enumerate() {
        images.read_exact(&mut pixels, &format!("image {i}"))?;
        let x = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        out.push((Vector::from_vec_unchecked(x), label));
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.display().to_string(), source }
}

/// Writes an uncompressed IDX image file.
pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let mut header = Vec::with_capacity(16);
    for v in [IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        header.extend_from_slice(&v.to_be_bytes());
    }
    w.write_all(&header).map_err(io_err(path))?;
    for img in images {
        if img.len() != rows * cols {
            return Err(ModelError::Idx { path: path.display().to_string(), message: "image size mismatch".into() });
        }
        w.write_all(img).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes an uncompressed IDX label file.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    w.write_all(&LABELS_MAGIC.to_be_bytes()).map_err(io_err(path))?;
    w.write_all(&(labels.len() as u32).to_be_bytes()).map_err(io_err(path))?;
    w.write_all(labels).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Reduces a 28×28 image to 9×9: keep the leading 27×27 window (28 − 27 = 1
/// leaves no symmetric crop, the offset rounds down to 0), then 3×3 max
/// pooling with stride 3.
pub fn pool_input_9x9(x: &[f64]) -> Result<Vector> {
    if x.len() != 784 {
        return Err(ModelError::InputLength { expected: 784, got: x.len() });
    }
    let mut out = Vec::with_capacity(81);
    for r in 0..9 {
        for c in 0..9 {
            let mut m = f64::NEG_INFINITY;
            for dr in 0..3 {
                for dc in 0..3 {
                    m = m.max(x[(r * 3 + dr) * 28 + c * 3 + dc]);
                }
            }
            out.push(m);
        }
    }
    Ok(Vector::from_vec_unchecked(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_pair(dir: &Path, images: &[Vec<u8>], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (ip, lp) = (dir.join("img"), dir.join("lbl"));
        write_idx_images(&ip, 28, 28, images).unwrap();
        write_idx_labels(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn reads_valid_files_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = vec![0u8; 784];
        img[0] = 255;
        img[1] = 51;
        let (ip, lp) = write_pair(dir.path(), &[img.clone(), img], &[3, 7]);
        let data = load_mnist_idx(&ip, &lp, 100).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0].0[0], 1.0);
        assert_eq!(data[0].0[1], 0.2);
        assert_eq!((data[0].1, data[1].1), (3, 7));
        assert_eq!(load_mnist_idx(&ip, &lp, 1).unwrap().len(), 1);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[vec![0; 784]], &[1]);
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x04; // 2052
        std::fs::write(&ip, bytes).unwrap();
        let err = load_mnist_idx(&ip, &lp, 10).unwrap_err();
        assert!(matches!(err, ModelError::BadMagic { found: 2052, expected: 2051, .. }), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[vec![0; 784], vec![0; 784]], &[1, 2]);
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_mnist_idx(&ip, &lp, 10).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn gzip_files_are_decoded() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[vec![128; 784]], &[5]);
        for p in [&ip, &lp] {
            let raw = std::fs::read(p).unwrap();
            let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::fast());
            enc.write_all(&raw).unwrap();
            std::fs::write(p.with_extension("gz"), enc.finish().unwrap()).unwrap();
        }
        let data = load_mnist_idx(ip.with_extension("gz"), lp.with_extension("gz"), 10).unwrap();
        assert_eq!(data[0].1, 5);
        assert_eq!(data[0].0[10], 128.0 / 255.0);
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(&*pool_input_9x9(&[0.0; 784]).unwrap(), &[0.0; 81]);
        assert_eq!(&*pool_input_9x9(&[1.0; 784]).unwrap(), &[1.0; 81]);
        let mut x = vec![0.0; 784];
        x[14 * 28 + 14] = 0.7;
        let p = pool_input_9x9(&x).unwrap();
        // (14, 14) lies in crop cell (14 / 3, 14 / 3) = (4, 4).
        assert_eq!(p.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(p[4 * 9 + 4], 0.7);
        assert!(pool_input_9x9(&[0.0; 783]).is_err());
    }

    #[test]
    fn last_row_and_column_are_cropped() {
        let mut x = vec![0.0; 784];
        for i in 0..28 {
            x[27 * 28 + i] = 1.0;
            x[i * 28 + 27] = 1.0;
        }
        assert_eq!(&*pool_input_9x9(&x).unwrap(), &[0.0; 81]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn idx_round_trip(pixels in proptest::collection::vec(any::<u8>(), 784 * 3), labels in proptest::array::uniform3(0u8..10)) {
            let dir = tempfile::tempdir().unwrap();
            let images: Vec<Vec<u8>> = pixels.chunks(784).map(<[u8]>::to_vec).collect();
            let (ip, lp) = write_pair(dir.path(), &images, &labels);
            let data = load_mnist_idx(&ip, &lp, usize::MAX).unwrap();
            prop_assert_eq!(data.len(), 3);
            for ((x, l), (img, want)) in data.iter().zip(images.iter().zip(labels)) {
                prop_assert_eq!(*l, want);
                let back: Vec<u8> = x.iter().map(|v| (v * 255.0).round() as u8).collect();
                prop_assert_eq!(&back, img);
            }
        }
    }
}
