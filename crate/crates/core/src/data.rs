//! Dataset loading (IDX, CIFAR binary), splits, augmentation and batching.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable consulted when no data directory is given.
pub const DATA_DIR_ENV: &str = "DST_DATA_DIR";

/// Images stored as raw bytes `[n, C, H, W]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    image_shape: [usize; 3],
    class_count: usize,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, image_shape: [usize; 3], class_count: usize) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::input(format!(
                "{} image bytes do not hold {} images of shape {image_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::input(format!("label {bad} not below class count {class_count}")));
        }
        Ok(Self {
            images,
            labels,
            image_shape,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            image_shape: self.image_shape,
            class_count: self.class_count,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| format_error(path, 0, format!("gzip stream: {e}")))?;
        return Ok(out);
    }
    Ok(raw)
}

fn format_error(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// A parsed IDX file of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Reads an IDX file (optionally gzipped). Only the unsigned-byte element
/// type (0x08) is accepted.
pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.len() < 4 {
        return Err(format_error(path, bytes.len(), "file ends inside the magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_error(path, 0, "magic number must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(format_error(path, 2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(format_error(path, 3, "rank must be at least 1"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_error(path, bytes.len(), "file ends inside the dimension header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let b = &bytes[4 + 4 * i..8 + 4 * i];
            u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize
        })
        .collect();
    let expected = dims.iter().product::<usize>();
    let body = bytes.len() - header;
    if body < expected {
        return Err(format_error(
            path,
            bytes.len(),
            format!("truncated: header promises {expected} bytes of data, found {body}"),
        ));
    }
    if body > expected {
        return Err(format_error(path, header + expected, format!("{} trailing bytes", body - expected)));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Loads an IDX image file `[n, H, W]` and its label file `[n]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let img = read_idx(ipath)?;
    let lab = read_idx(lpath)?;
    if img.dims.len() != 3 {
        return Err(format_error(ipath, 3, format!("image file has rank {}, expected 3", img.dims.len())));
    }
    if lab.dims.len() != 1 {
        return Err(format_error(lpath, 3, format!("label file has rank {}, expected 1", lab.dims.len())));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(Error::input(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    if let Some(pos) = lab.data.iter().position(|&l| l > 9) {
        return Err(format_error(lpath, 8 + pos, format!("label {} out of range", lab.data[pos])));
    }
    Dataset::new(img.data, lab.data, [1, img.dims[1], img.dims[2]], 10)
}

/// Which label a CIFAR binary record carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    /// 1 label byte + 3072 pixel bytes.
    Cifar10,
    /// 1 coarse + 1 fine label byte + 3072 pixel bytes; fine labels used.
    Cifar100,
    /// CIFAR-100 records using the 20 coarse labels.
    Cifar100Coarse,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 3073,
            _ => 3074,
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
            CifarVariant::Cifar100Coarse => 20,
        }
    }
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Loads one CIFAR binary batch file.
pub fn load_cifar_binary(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(format_error(path, 0, "empty file"));
    }
    if bytes.len() % rec != 0 {
        let whole = bytes.len() / rec;
        return Err(format_error(
            path,
            whole * rec,
            format!("truncated record {whole}: {} of {rec} bytes", bytes.len() - whole * rec),
        ));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let classes = variant.class_count();
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let (label_at, pixels) = match variant {
            CifarVariant::Cifar10 => (0, &r[1..]),
            CifarVariant::Cifar100 => (1, &r[2..]),
            CifarVariant::Cifar100Coarse => (0, &r[2..]),
        };
        let label = r[label_at];
        if label as usize >= classes {
            return Err(format_error(path, i * rec + label_at, format!("label {label} out of range")));
        }
        labels.push(label);
        images.extend_from_slice(pixels);
    }
    Dataset::new(images, labels, [3, 32, 32], classes)
}

/// Concatenates datasets with identical image shape and class count.
pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::input("nothing to concatenate"))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.image_shape != first.image_shape || p.class_count != first.class_count {
            return Err(Error::input("datasets differ in image shape or class count"));
        }
        images.extend_from_slice(&p.images);
        labels.extend_from_slice(&p.labels);
    }
    Dataset::new(images, labels, first.image_shape, first.class_count)
}

/// Resolves the data directory from an explicit flag or [`DATA_DIR_ENV`].
pub fn resolve_data_dir(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

fn first_existing(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names
        .iter()
        .flat_map(|n| [dir.join(n), dir.join(format!("{n}.gz"))])
        .find(|p| p.is_file())
}

/// Loads MNIST-style IDX data from `dir`. Accepts the standard train/t10k
/// file names (concatenated, train first) or a single `images-idx3-ubyte` /
/// `labels-idx1-ubyte` pair.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let pair = |img: &str, lab: &str| -> Option<(PathBuf, PathBuf)> {
        Some((first_existing(dir, &[img])?, first_existing(dir, &[lab])?))
    };
    if let Some((i, l)) = pair("images-idx3-ubyte", "labels-idx1-ubyte") {
        return load_idx(i, l);
    }
    let train = pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte");
    let test = pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
    let parts: Vec<Dataset> = [train, test]
        .into_iter()
        .flatten()
        .map(|(i, l)| load_idx(i, l))
        .collect::<Result<_>>()?;
    if parts.is_empty() {
        return Err(Error::input(format!("no IDX files found in {}", dir.display())));
    }
    concat(&parts)
}

/// Loads the CIFAR-10 binary batches (`data_batch_1..5.bin`, `test_batch.bin`)
/// found in `dir`, in that order.
pub fn load_cifar10_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    names.push("test_batch.bin".into());
    let parts: Vec<Dataset> = names
        .iter()
        .map(|n| dir.join(n))
        .filter(|p| p.is_file())
        .map(|p| load_cifar_binary(p, CifarVariant::Cifar10))
        .collect::<Result<_>>()?;
    if parts.is_empty() {
        return Err(Error::input(format!("no CIFAR-10 batches found in {}", dir.display())));
    }
    concat(&parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// Shuffled index lists for train, val and test.
    pub fn indices(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let total = self.train + self.val + self.test;
        if total != n {
            return Err(Error::input(format!(
                "split sizes {}+{}+{} = {total} do not match dataset size {n}",
                self.train, self.val, self.test
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let test = idx.split_off(self.train + self.val);
        let val = idx.split_off(self.train);
        Ok((idx, val, test))
    }
}

/// Disjoint, seed-deterministic train/val/test subsets.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, va, te) = spec.indices(dataset.len())?;
    Ok((dataset.subset(&tr), dataset.subset(&va), dataset.subset(&te)))
}

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics of `dataset` itself (population std).
    pub fn fit(dataset: &Dataset) -> Self {
        let [c, h, w] = dataset.image_shape;
        let plane = h * w;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..dataset.len() {
            for (ch, px) in dataset.image(i).chunks(plane).enumerate() {
                for &p in px {
                    let v = p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (dataset.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn apply(&self, channel: usize, pixel: u8) -> f64 {
        (pixel as f64 / 255.0 - self.mean[channel]) / self.std[channel]
    }
}

/// Random crop after zero padding, plus horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub flip_probability: f64,
    pub padding: usize,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            padding: 4,
        }
    }
}

/// Horizontally mirrors a `[C, H, W]` image in place.
pub fn flip_horizontal(image: &mut [f64], shape: [usize; 3]) {
    let w = shape[2];
    for row in image.chunks_mut(w) {
        row.reverse();
    }
}

/// Crops an `H×W` window at offset `(dy, dx)` out of the image zero-padded by
/// `pad` on every side. Offsets range over `0..=2·pad`.
pub fn pad_crop(image: &[f64], shape: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

impl Augmentation {
    /// Draws crop offsets and a flip decision, then transforms `image`.
    pub fn apply<R: Rng + ?Sized>(&self, image: &[f64], shape: [usize; 3], rng: &mut R) -> Vec<f64> {
        let dy = rng.random_range(0..=2 * self.padding);
        let dx = rng.random_range(0..=2 * self.padding);
        let flip = rng.random::<f64>() < self.flip_probability;
        let mut out = pad_crop(image, shape, self.padding, dy, dx);
        if flip {
            flip_horizontal(&mut out, shape);
        }
        out
    }
}

/// Inputs `[B, C, H, W]` and labels for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Normalizes (and optionally augments) the images at `indices`.
pub fn make_batch(
    dataset: &Dataset,
    indices: &[usize],
    norm: &Normalization,
    augment: Option<(&Augmentation, &mut ChaCha8Rng)>,
) -> Result<Batch> {
    let shape = dataset.image_shape;
    let plane = shape[1] * shape[2];
    let n = dataset.image_len();
    let mut values = Vec::with_capacity(indices.len() * n);
    let mut aug = augment;
    for &i in indices {
        if i >= dataset.len() {
            return Err(Error::input(format!("index {i} outside dataset of {}", dataset.len())));
        }
        let img: Vec<f64> = dataset
            .image(i)
            .iter()
            .enumerate()
            .map(|(j, &p)| norm.apply(j / plane, p))
            .collect();
        match aug.as_mut() {
            Some((a, rng)) => values.extend(a.apply(&img, shape, *rng)),
            None => values.extend(img),
        }
    }
    let inputs = Tensor::from_vec(&[indices.len(), shape[0], shape[1], shape[2]], values)?;
    Ok(Batch {
        inputs,
        labels: indices.iter().map(|&i| dataset.labels[i] as usize).collect(),
    })
}

/// Visiting order for one epoch: a permutation of `0..n` from its own stream.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut epoch_rng(seed, epoch, 0));
    idx
}

/// Independent stream for `(seed, epoch, purpose)`.
pub fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | purpose);
    rng
}

/// Consecutive chunks of `order`; the last may be short.
pub fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size.max(1))
}
