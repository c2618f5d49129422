//! MNIST IDX files, synthetic Gaussian blobs and seeded minibatch streams.
//!
//! IDX layout: big-endian `u32` magic (2051 for images, 2049 for labels),
//! big-endian `u32` dimensions, then the `u8` payload in row-major order.
//! Files whose name ends in `.gz` are decompressed transparently.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const MNIST_CLASSES: usize = 10;

/// Images `[N×c×h×w]` with pixel values in `[0, 1]` and one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape(
                "dataset",
                format!("images must be N×c×h×w, got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single sample, `[c, h, w]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Samples `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            images: self.images.slice_rows(start, end)?,
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        })
    }

    pub fn select(&self, indices: &[usize]) -> Result<Batch<T>> {
        Ok(Batch {
            images: self.images.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Split at `at`: samples `0..at` and `at..N`.
    pub fn split_at(&self, at: usize) -> Result<(Self, Self)> {
        Ok((self.slice(0, at)?, self.slice(at, self.len())?))
    }
}

/// One minibatch of images and labels.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("gz"));
    if gz {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header at byte {offset}")))
}

/// Parse an IDX image file into `[N×1×rows×cols]`, scaled by 1/255.
pub fn load_idx_images<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    parse_idx_images(&bytes, path)
}

pub fn parse_idx_images<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("image magic {magic}, expected {IDX_IMAGES_MAGIC}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or_else(|| Error::format(path, "image dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "{count} images of {rows}x{cols} need {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if expected == 0 {
        return Err(Error::format(path, "image file holds no pixels"));
    }
    let data = payload.iter().map(|&b| T::of(f64::from(b) / 255.0)).collect();
    Tensor::new(vec![count, 1, rows, cols], data)
}

/// Parse an IDX label file. With `max_classes` set, labels at or above it are errors.
pub fn load_idx_labels(path: impl AsRef<Path>, max_classes: Option<usize>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    parse_idx_labels(&bytes, path, max_classes)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path, max_classes: Option<usize>) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("label magic {magic}, expected {IDX_LABELS_MAGIC}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::format(
            path,
            format!("header declares {count} labels, found {}", payload.len()),
        ));
    }
    if let Some(k) = max_classes {
        if let Some(pos) = payload.iter().position(|&y| usize::from(y) >= k) {
            return Err(Error::format(
                path,
                format!("label {} at index {pos} is not below {k}", payload[pos]),
            ));
        }
    }
    Ok(payload.iter().map(|&y| usize::from(y)).collect())
}

/// Write images (single channel, values in `[0,1]`) as an IDX file.
/// Pixels are stored as `round(255·v)`.
pub fn write_idx_images<T: Scalar>(path: impl AsRef<Path>, images: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("write_idx_images", format!("expected N×1×h×w, got {s:?}")));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for &d in [s[0], s[2], s[3]].iter() {
        out.extend_from_slice(
            &u32::try_from(d)
                .map_err(|_| Error::shape("write_idx_images", "dimension exceeds u32"))?
                .to_be_bytes(),
        );
    }
    for &v in images.data() {
        let v = v.as_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    write_bytes(path, &out)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &y in labels {
        out.push(u8::try_from(y).map_err(|_| Error::InvalidArgument(format!("label {y} exceeds u8")))?);
    }
    write_bytes(path, &out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Locations of the four standard MNIST files inside a directory.
#[derive(Clone, Debug)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    /// Resolve the standard file names, preferring uncompressed files and
    /// falling back to `.gz` variants.
    pub fn in_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let find = |stem: &str| -> Result<PathBuf> {
            let plain = dir.join(stem);
            if plain.is_file() {
                return Ok(plain);
            }
            let gz = dir.join(format!("{stem}.gz"));
            if gz.is_file() {
                return Ok(gz);
            }
            Err(Error::io(
                plain,
                std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            ))
        };
        Ok(Self {
            train_images: find("train-images-idx3-ubyte")?,
            train_labels: find("train-labels-idx1-ubyte")?,
            test_images: find("t10k-images-idx3-ubyte")?,
            test_labels: find("t10k-labels-idx1-ubyte")?,
        })
    }

    pub fn load_train<T: Scalar>(&self) -> Result<Dataset<T>> {
        load_pair(&self.train_images, &self.train_labels)
    }

    pub fn load_test<T: Scalar>(&self) -> Result<Dataset<T>> {
        load_pair(&self.test_images, &self.test_labels)
    }
}

/// Load a matching pair of image and label files as a 10-class dataset.
pub fn load_pair<T: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let images = load_idx_images(images)?;
    let labels_vec = load_idx_labels(labels, Some(MNIST_CLASSES))?;
    if images.shape()[0] != labels_vec.len() {
        return Err(Error::format(
            labels,
            format!("{} labels for {} images", labels_vec.len(), images.shape()[0]),
        ));
    }
    Dataset::new(images, labels_vec, MNIST_CLASSES)
}

/// Parameters of the synthetic blob generator.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub n_per_class: usize,
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

/// Fixed, distinct cluster center for class `k` of `classes`.
///
/// In two or more dimensions the centers sit on a circle of radius 0.35
/// around 0.5 in the first two coordinates; remaining coordinates follow
/// higher harmonics. In one dimension they are evenly spaced in `[0.15, 0.85]`.
pub fn blob_center(k: usize, classes: usize, dim: usize) -> Vec<f64> {
    if dim == 1 {
        let t = if classes > 1 {
            k as f64 / (classes - 1) as f64
        } else {
            0.5
        };
        return vec![0.15 + 0.7 * t];
    }
    let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
    (0..dim)
        .map(|j| {
            let harmonic = (j / 2 + 1) as f64;
            let phase = if j % 2 == 0 { 0.0 } else { std::f64::consts::FRAC_PI_2 };
            0.5 + 0.35 * (harmonic * angle + phase).cos() / harmonic
        })
        .collect()
}

/// `classes` isotropic Gaussian clusters of `n_per_class` points each,
/// shaped `[N×1×1×dim]`, clamped into `[0,1]`. Samples are interleaved by
/// class (`0,1,..,K-1,0,1,..`).
pub fn make_synthetic_blobs<T: Scalar>(spec: &BlobSpec) -> Result<Dataset<T>> {
    if spec.n_per_class == 0 || spec.classes == 0 || spec.dim == 0 || spec.spread < 0.0 {
        return Err(Error::InvalidArgument(format!("invalid blob spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|k| blob_center(k, spec.classes, spec.dim))
        .collect();
    let n = spec.n_per_class * spec.classes;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.n_per_class {
        for (k, center) in centers.iter().enumerate() {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(T::of((c + spec.spread * z).clamp(0.0, 1.0)));
            }
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 1, spec.dim], data)?, labels, spec.classes)
}

/// Minibatch schedule: `N_b = floor(N/b)` batches per epoch, remainder dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    batch_size: usize,
    batches_per_epoch: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(dataset_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > dataset_len {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} must be in 1..={dataset_len}"
            )));
        }
        Ok(Self {
            batch_size,
            batches_per_epoch: dataset_len / batch_size,
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    /// Sample indices for each batch of `epoch`, from a permutation seeded
    /// by `seed + epoch`.
    pub fn epoch_indices(&self, dataset_len: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..dataset_len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        order
            .chunks_exact(self.batch_size)
            .take(self.batches_per_epoch)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn epoch<'a, T: Scalar>(
        &self,
        dataset: &'a Dataset<T>,
        epoch: usize,
    ) -> impl Iterator<Item = Result<Batch<T>>> + 'a {
        self.epoch_indices(dataset.len(), epoch)
            .into_iter()
            .map(move |idx| dataset.select(&idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn idx_header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_constructed_image_fixture() {
        let mut bytes = idx_header(2051, &[2, 2, 2]);
        bytes.extend_from_slice(&[0, 255, 0, 255, 0, 255, 0, 255]);
        let t: Tensor<f64> = parse_idx_images(&bytes, Path::new("fixture")).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn image_loader_rejects_label_magic() {
        let mut bytes = idx_header(2049, &[1, 1, 1]);
        bytes.push(0);
        let r: Result<Tensor<f64>> = parse_idx_images(&bytes, Path::new("fixture"));
        assert!(matches!(r, Err(Error::Format { .. })));
    }

    #[test]
    fn image_loader_rejects_truncated_payload() {
        let mut bytes = idx_header(2051, &[2, 2, 2]);
        bytes.extend_from_slice(&[0, 1, 2]);
        let r: Result<Tensor<f64>> = parse_idx_images(&bytes, Path::new("fixture"));
        assert!(matches!(r, Err(Error::Format { .. })));
        let r: Result<Tensor<f64>> = parse_idx_images(&bytes[..10], Path::new("fixture"));
        assert!(matches!(r, Err(Error::Format { .. })));
    }

    #[test]
    fn parses_label_fixtures() {
        let mut bytes = idx_header(2049, &[3]);
        bytes.extend_from_slice(&[3, 1, 4]);
        assert_eq!(
            parse_idx_labels(&bytes, Path::new("l"), Some(10)).unwrap(),
            vec![3, 1, 4]
        );

        let empty = idx_header(2049, &[0]);
        assert!(parse_idx_labels(&empty, Path::new("l"), Some(10)).unwrap().is_empty());

        let mut bad = idx_header(2049, &[1]);
        bad.push(12);
        assert!(parse_idx_labels(&bad, Path::new("l"), Some(10)).is_err());
        assert_eq!(parse_idx_labels(&bad, Path::new("l"), None).unwrap(), vec![12]);

        let mut count_mismatch = idx_header(2049, &[4]);
        count_mismatch.extend_from_slice(&[1, 2]);
        assert!(parse_idx_labels(&count_mismatch, Path::new("l"), None).is_err());
    }

    #[test]
    fn gzip_files_are_decompressed() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = idx_header(2049, &[3]);
        bytes.extend_from_slice(&[7, 0, 9]);
        let path = dir.path().join("labels-idx1-ubyte.gz");
        let mut enc = GzEncoder::new(File::create(&path).unwrap(), Compression::default());
        enc.write_all(&bytes).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_idx_labels(&path, Some(10)).unwrap(), vec![7, 0, 9]);
    }

    #[test]
    fn blobs_are_deterministic_and_counted() {
        let spec = BlobSpec {
            n_per_class: 50,
            classes: 3,
            dim: 4,
            spread: 0.05,
            seed: 9,
        };
        let a: Dataset<f64> = make_synthetic_blobs(&spec).unwrap();
        let b: Dataset<f64> = make_synthetic_blobs(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 150);
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_spread_blobs_are_separable_by_nearest_center() {
        let spec = BlobSpec {
            n_per_class: 10,
            classes: 5,
            dim: 3,
            spread: 0.0,
            seed: 1,
        };
        let ds: Dataset<f64> = make_synthetic_blobs(&spec).unwrap();
        let centers: Vec<Vec<f64>> = (0..5).map(|k| blob_center(k, 5, 3)).collect();
        for (i, &y) in ds.labels().iter().enumerate() {
            let x = &ds.images().data()[i * 3..(i + 1) * 3];
            let nearest = (0..5)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(&centers[a]).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = x.iter().zip(&centers[b]).map(|(p, q)| (p - q).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, y);
        }
    }

    #[test]
    fn batch_plan_counts() {
        assert_eq!(BatchPlan::new(120, 60, 0).unwrap().batches_per_epoch(), 2);
        assert_eq!(BatchPlan::new(60_000, 60, 0).unwrap().batches_per_epoch(), 1000);
        assert_eq!(BatchPlan::new(130, 60, 0).unwrap().batches_per_epoch(), 2);
        assert!(BatchPlan::new(10, 11, 0).is_err());
        assert!(BatchPlan::new(10, 0, 0).is_err());
    }

    #[test]
    fn epoch_batches_have_no_duplicates_and_are_seeded() {
        let plan = BatchPlan::new(103, 10, 5).unwrap();
        let e0 = plan.epoch_indices(103, 0);
        assert_eq!(e0.len(), 10);
        let seen: HashSet<usize> = e0.iter().flatten().copied().collect();
        assert_eq!(seen.len(), 100);
        assert_eq!(e0, plan.epoch_indices(103, 0));
        assert_ne!(e0, plan.epoch_indices(103, 1));
    }
}
