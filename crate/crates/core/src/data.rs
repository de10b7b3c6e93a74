//! MNIST (IDX) and CIFAR-10 (binary batch) datasets.
//!
//! Pixels are divided by 255, nothing else. Gzip-compressed files are
//! detected by their magic bytes and decompressed transparently.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::Matrix2D;
use crate::error::{Error, Result};
use crate::network::{Batch, Shape3};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images stored as rows of a `[n, c*h*w]` matrix (channel-planar, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: Shape3,
    pixels: Array2<f64>,
    labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(shape: Shape3, pixels: Array2<f64>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if pixels.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: pixels.nrows(),
                actual: labels.len(),
            });
        }
        if pixels.ncols() != shape.len() {
            return Err(Error::DimensionMismatch {
                expected: shape.len(),
                actual: pixels.ncols(),
            });
        }
        Ok(Self {
            shape,
            pixels: pixels.as_standard_layout().into_owned(),
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.pixels
    }

    /// Sample `i` as one matrix per channel.
    pub fn image(&self, i: usize) -> Vec<Matrix2D> {
        let row = self.pixels.row(i);
        let plane = self.shape.rows * self.shape.cols;
        (0..self.shape.channels)
            .map(|c| {
                let data = row.iter().skip(c * plane).take(plane).copied().collect();
                Matrix2D::from_vec(self.shape.rows, self.shape.cols, data).expect("valid geometry")
            })
            .collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.pixels.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Whole dataset as one batch.
    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.pixels.clone(),
            labels: self.labels.clone(),
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            shape: self.shape,
            pixels: self.pixels.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    /// Per-channel zero-mean, unit-variance standardization using this
    /// dataset's own statistics. Returns the `(mean, std)` used per channel.
    pub fn standardize_per_channel(&mut self) -> Vec<(f64, f64)> {
        let stats = self.channel_stats();
        self.apply_standardization(&stats);
        stats
    }

    /// Standardizes with externally supplied statistics (e.g. the train split's).
    pub fn apply_standardization(&mut self, stats: &[(f64, f64)]) {
        let plane = self.shape.rows * self.shape.cols;
        for mut row in self.pixels.rows_mut() {
            for (c, &(mean, std)) in stats.iter().enumerate() {
                let std = if std > 0.0 { std } else { 1.0 };
                row.iter_mut()
                    .skip(c * plane)
                    .take(plane)
                    .for_each(|x| *x = (*x - mean) / std);
            }
        }
    }

    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let plane = self.shape.rows * self.shape.cols;
        (0..self.shape.channels)
            .map(|c| {
                let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
                for row in self.pixels.rows() {
                    for &x in row.iter().skip(c * plane).take(plane) {
                        sum += x;
                        sq += x * x;
                        n += 1.0;
                    }
                }
                let mean = sum / n;
                (mean, (sq / n - mean * mean).max(0.0).sqrt())
            })
            .collect()
    }
}

/// Deterministic shuffled batches of indices for `(seed, epoch)`; the final
/// batch may be short.
pub fn minibatches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 0x5348_5546));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Per-epoch generator derived from the master seed and a purpose tag.
pub fn epoch_rng(seed: u64, epoch: usize, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64);
    rng
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Writes `bytes`, gzip-compressed when the path ends in `.gz`.
fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut f = file;
        f.write_all(bytes)
    };
    res.map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

struct Idx {
    dims: Vec<usize>,
    body: Vec<u8>,
}

fn parse_idx(path: &Path, expected_magic: u32, ndims: usize) -> Result<Idx> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != expected_magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            observed: magic,
            expected: expected_magic,
        });
    }
    let dims = (0..ndims)
        .map(|d| be_u32(&bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("{} trailing bytes after IDX payload", bytes.len() - expected),
        });
    }
    Ok(Idx {
        dims,
        body: bytes[header..].to_vec(),
    })
}

/// Reads an IDX image file (magic 2051) and label file (magic 2049).
pub fn load_mnist(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = parse_idx(images_path, IDX_IMAGES_MAGIC, 3)?;
    let labels = parse_idx(labels_path, IDX_LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            msg: format!("{} labels for {n} images", labels.dims[0]),
        });
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            msg: format!("degenerate image size {rows}x{cols}"),
        });
    }
    let labels = check_labels(labels.body, labels_path)?;
    let pixels = Array2::from_shape_vec((n, rows * cols), images.body.iter().map(|&b| f64::from(b) / 255.0).collect())
        .expect("length checked");
    Dataset::new(Shape3::new(1, rows, cols), pixels, labels, split)
}

fn check_labels(raw: Vec<u8>, path: &Path) -> Result<Vec<usize>> {
    if let Some(&bad) = raw.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("label {bad} outside 0..{NUM_CLASSES}"),
        });
    }
    Ok(raw.into_iter().map(usize::from).collect())
}

fn quantize(x: f64) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a single-channel dataset as an IDX pair (gzip when the path ends in `.gz`).
pub fn write_mnist(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if ds.shape.channels != 1 {
        return Err(Error::Shape(format!("IDX images are single-channel, got {}", ds.shape)));
    }
    let mut img = Vec::with_capacity(16 + ds.pixels.len());
    img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), ds.shape.rows, ds.shape.cols] {
        img.extend((d as u32).to_be_bytes());
    }
    img.extend(ds.pixels.iter().map(|&x| quantize(x)));
    write_maybe_gz(images_path, &img)?;

    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend((ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    write_maybe_gz(labels_path, &lab)
}

/// Reads and concatenates CIFAR-10 binary batch files (3073-byte records:
/// label byte, then 1024 red, 1024 green, 1024 blue bytes).
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in paths {
        let path = p.as_ref();
        let bytes = read_maybe_gz(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0]);
            pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let labels = check_labels(labels, paths.first().map_or(Path::new(""), |p| p.as_ref()))?;
    let shape = Shape3::new(3, CIFAR_SIDE, CIFAR_SIDE);
    let pixels = Array2::from_shape_vec((labels.len(), shape.len()), pixels).expect("record size checked");
    Dataset::new(shape, pixels, labels, split)
}

pub fn write_cifar10(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.shape != Shape3::new(3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::Shape(format!("CIFAR-10 records are 3x32x32, got {}", ds.shape)));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (row, &label) in ds.pixels.rows().into_iter().zip(&ds.labels) {
        out.push(label as u8);
        out.extend(row.iter().map(|&x| quantize(x)));
    }
    write_maybe_gz(path, &out)
}

/// Paths of the standard MNIST files under `dir` (gzipped names preferred when present).
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let pick = |name: String| {
        let gz = dir.join(format!("{name}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(name)
        }
    };
    (
        pick(format!("{stem}-images-idx3-ubyte")),
        pick(format!("{stem}-labels-idx1-ubyte")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v.extend(body);
        v
    }

    #[test]
    fn single_zero_mnist_image() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let img = idx_bytes(2051, &[1, 28, 28], &[0; 784]);
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, idx_bytes(2049, &[1], &[3])).unwrap();
        let ds = load_mnist(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.shape(), Shape3::new(1, 28, 28));
        assert!(ds.inputs().iter().all(|&x| x == 0.0));
        assert_eq!(ds.labels(), &[3]);
    }

    #[test]
    fn mnist_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_bytes(2051, &[2, 2, 2], &[255; 8])).unwrap();

        std::fs::write(&lp, idx_bytes(2049, &[3], &[0, 1, 2])).unwrap();
        assert!(matches!(load_mnist(&ip, &lp, Split::Train), Err(Error::Format { .. })));

        std::fs::write(&lp, idx_bytes(2051, &[2], &[0, 1])).unwrap();
        assert!(matches!(
            load_mnist(&ip, &lp, Split::Train),
            Err(Error::BadMagic { observed: 2051, expected: 2049, .. })
        ));

        std::fs::write(&lp, idx_bytes(2049, &[2], &[0, 1])).unwrap();
        std::fs::write(&ip, idx_bytes(2051, &[2, 2, 2], &[255; 7])).unwrap();
        assert!(matches!(
            load_mnist(&ip, &lp, Split::Train),
            Err(Error::Truncated { expected: 24, actual: 23, .. })
        ));

        std::fs::write(&ip, idx_bytes(2051, &[2, 2, 2], &[255; 8])).unwrap();
        let ds = load_mnist(&ip, &lp, Split::Train).unwrap();
        assert!(ds.inputs().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.gz"), dir.path().join("l.gz"));
        write_maybe_gz(&ip, &idx_bytes(2051, &[1, 2, 2], &[0, 51, 102, 255])).unwrap();
        write_maybe_gz(&lp, &idx_bytes(2049, &[1], &[9])).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap()[..2], [0x1f, 0x8b]);
        let ds = load_mnist(&ip, &lp, Split::Test).unwrap();
        assert_eq!(ds.inputs().as_slice().unwrap(), &[0.0, 0.2, 0.4, 1.0]);
    }

    #[test]
    fn cifar_record_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(0u8, 3072));
        std::fs::write(&p, &rec).unwrap();
        let ds = load_cifar10(&[&p], Split::Train).unwrap();
        assert_eq!((ds.len(), ds.labels()[0]), (1, 7));
        assert!(ds.inputs().iter().all(|&x| x == 0.0));

        // Distinct constant per channel plane.
        let mut rec = vec![2u8];
        for v in [10u8, 20, 30] {
            rec.extend(std::iter::repeat_n(v, 1024));
        }
        std::fs::write(&p, rec.repeat(10)).unwrap();
        let ds = load_cifar10(&[&p], Split::Train).unwrap();
        assert_eq!(ds.len(), 10);
        let img = ds.image(3);
        assert!(img[0].as_slice().iter().all(|&x| x == 10.0 / 255.0));
        assert!(img[2].as_slice().iter().all(|&x| x == 30.0 / 255.0));

        std::fs::write(&p, &rec[..3000]).unwrap();
        assert!(matches!(load_cifar10(&[&p], Split::Train), Err(Error::Format { .. })));
    }

    #[test]
    fn batches_cover_each_index_once() {
        let b = minibatches(10, 10, 1, 0).unwrap();
        assert_eq!(b.len(), 1);
        let mut all: Vec<usize> = minibatches(103, 10, 5, 2).unwrap().concat();
        assert_eq!(minibatches(103, 10, 5, 2).unwrap().last().unwrap().len(), 3);
        all.sort();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(minibatches(50, 7, 9, 4).unwrap(), minibatches(50, 7, 9, 4).unwrap());
        assert_ne!(minibatches(50, 7, 9, 4).unwrap(), minibatches(50, 7, 9, 5).unwrap());
        assert!(minibatches(5, 0, 0, 0).is_err());
    }

    #[test]
    fn standardization() {
        let px = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut ds = Dataset::new(Shape3::new(1, 1, 2), px, vec![0, 1], Split::Train).unwrap();
        let stats = ds.standardize_per_channel();
        assert_eq!(stats, vec![(0.5, 0.5)]);
        assert_eq!(ds.inputs().as_slice().unwrap(), &[-1.0, 1.0, 1.0, -1.0]);
    }
}
