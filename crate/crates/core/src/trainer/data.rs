//! Image datasets: CIFAR-10 binary batches, IDX files and a generated
//! Gaussian-blob set, plus random shift/flip augmentation.

use std::path::Path;

use super::config::{DataConfig, DataFormat, SyntheticSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const MAX_SHIFT: i64 = 4;

/// Images in `[0, 1]` with integer labels, before mean subtraction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImages {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl RawImages {
    fn concat(parts: Vec<RawImages>) -> Result<RawImages> {
        let mut iter = parts.into_iter();
        let first = iter.next().ok_or_else(|| Error::Config("no data files given".into()))?;
        let mut shape = first.images.shape().to_vec();
        let mut data = first.images.into_data();
        let mut labels = first.labels;
        for part in iter {
            if part.images.shape()[1..] != shape[1..] {
                return Err(Error::Shape(format!(
                    "data files disagree on image shape: {:?} vs {:?}",
                    &shape[1..],
                    &part.images.shape()[1..]
                )));
            }
            shape[0] += part.images.shape()[0];
            data.extend_from_slice(part.images.data());
            labels.extend(part.labels);
        }
        Ok(RawImages {
            images: Tensor::new(&shape, data)?,
            labels,
        })
    }

    fn subset(&self, indices: &[usize]) -> Result<RawImages> {
        Ok(RawImages {
            images: self.images.gather_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// A split with the training split's per-pixel mean already subtracted.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `C x H x W` mean of the training images in `[0, 1]` units.
    pub per_pixel_mean: Tensor<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Batch of images converted to the training element type.
    pub fn batch<E: Element>(&self, indices: &[usize]) -> Result<(Tensor<E>, Vec<usize>)> {
        let x = self.images.gather_batch(indices)?.cast::<E>();
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Per-pixel mean over the batch axis, accumulated in 64-bit.
pub fn per_pixel_mean(images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, per) = images.batch_split();
    let mut acc = vec![0.0f64; per];
    for img in images.data().chunks_exact(per) {
        for (a, &v) in acc.iter_mut().zip(img) {
            *a += v as f64;
        }
    }
    Tensor::new(&images.shape()[1..], acc.into_iter().map(|a| (a / n as f64) as f32).collect())
}

fn subtract_mean(images: &Tensor<f32>, mean: &Tensor<f32>) -> Result<Tensor<f32>> {
    let per = mean.len();
    let data = images
        .data()
        .chunks_exact(per)
        .flat_map(|img| img.iter().zip(mean.data()).map(|(&v, &m)| v - m))
        .collect();
    Tensor::new(images.shape(), data)
}

/// Subtracts the training mean from both splits.
pub fn center_splits(train: RawImages, test: RawImages, num_classes: usize) -> Result<DataSplits> {
    if train.images.shape()[1..] != test.images.shape()[1..] {
        return Err(Error::Shape(format!(
            "train images {:?} and test images {:?} differ in shape",
            &train.images.shape()[1..],
            &test.images.shape()[1..]
        )));
    }
    if let Some(&bad) = train.labels.iter().chain(&test.labels).find(|&&l| l >= num_classes) {
        return Err(Error::Config(format!("label {bad} out of range for num_classes = {num_classes}")));
    }
    let mean = per_pixel_mean(&train.images)?;
    let make = |raw: RawImages| -> Result<Dataset> {
        Ok(Dataset {
            images: subtract_mean(&raw.images, &mean)?,
            labels: raw.labels,
            num_classes,
            per_pixel_mean: mean.clone(),
        })
    };
    Ok(DataSplits {
        train: make(train)?,
        test: make(test)?,
    })
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// CIFAR-10 binary batch: records of one label byte followed by 3072 bytes
/// of R, G and B planes.
pub fn read_cifar10_binary(path: &Path) -> Result<RawImages> {
    let bytes = std::fs::read(path)?;
    cifar10_from_bytes(&bytes, path)
}

pub fn cifar10_from_bytes(bytes: &[u8], path: &Path) -> Result<RawImages> {
    if bytes.is_empty() {
        return Err(format_err(path, 0, "empty file"));
    }
    let n = bytes.len() / CIFAR_RECORD;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(format_err(
            path,
            n * CIFAR_RECORD,
            format!("truncated record ({} trailing bytes)", bytes.len() % CIFAR_RECORD),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(format_err(path, i * CIFAR_RECORD, format!("label byte {} is not in 0..10", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(RawImages {
        images: Tensor::new(&[n, 3, 32, 32], data)?,
        labels,
    })
}

fn idx_header(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(format_err(path, 0, "file shorter than the 4-byte IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, 0, "IDX magic must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(format_err(path, 2, format!("unsupported IDX element type 0x{:02x} (only unsigned byte)", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(path, bytes.len(), "truncated IDX dimension list"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = dims.iter().product::<usize>();
    if bytes.len() - header != expected {
        return Err(format_err(
            path,
            header,
            format!("payload has {} bytes, dimensions {dims:?} need {expected}", bytes.len() - header),
        ));
    }
    Ok((dims, header))
}

/// IDX image file: `N x H x W` (one channel) or `N x C x H x W`, unsigned bytes.
pub fn read_idx_images(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    let (dims, header) = idx_header(&bytes, path)?;
    let shape = match dims.as_slice() {
        [n, h, w] => vec![*n, 1, *h, *w],
        [_, _, _, _] => dims.clone(),
        _ => return Err(format_err(path, 3, format!("image file needs 3 or 4 dimensions, got {}", dims.len()))),
    };
    if shape.contains(&0) {
        return Err(format_err(path, 4, "zero-sized dimension"));
    }
    Tensor::new(&shape, bytes[header..].iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    let (dims, header) = idx_header(&bytes, path)?;
    if dims.len() != 1 {
        return Err(format_err(path, 3, format!("label file needs 1 dimension, got {}", dims.len())));
    }
    Ok(bytes[header..].iter().map(|&b| b as usize).collect())
}

fn read_idx_pair(images: &Path, labels: &Path) -> Result<RawImages> {
    let images_t = read_idx_images(images)?;
    let labels_v = read_idx_labels(labels)?;
    if images_t.shape()[0] != labels_v.len() {
        return Err(Error::Config(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            images_t.shape()[0],
            labels.display(),
            labels_v.len()
        )));
    }
    Ok(RawImages {
        images: images_t,
        labels: labels_v,
    })
}

/// Seeded class-balanced sample of `size` indices, returned in ascending order.
pub fn stratified_subset(labels: &[usize], size: usize, num_classes: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if size > labels.len() {
        return Err(Error::Config(format!("subset of {size} requested from {} images", labels.len())));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Config(format!("label {l} out of range for num_classes = {num_classes}")));
        }
        by_class[l].push(i);
    }
    for members in &mut by_class {
        rng.shuffle(members);
    }
    // Round-robin over shuffled classes gives per-class counts differing by at most one.
    let mut chosen = Vec::with_capacity(size);
    let mut depth = 0;
    while chosen.len() < size {
        for members in &by_class {
            if chosen.len() == size {
                break;
            }
            if let Some(&i) = members.get(depth) {
                chosen.push(i);
            }
        }
        depth += 1;
    }
    chosen.sort_unstable();
    Ok(chosen)
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: Vec<f64>,
}

/// Seeded class-structured images: every class is a fixed set of coloured
/// Gaussian blobs; samples jitter the blob positions and amplitudes and add
/// pixel noise, then clip to `[0, 1]`.
pub fn synthetic_images(spec: &SyntheticSpec, num_classes: usize, seed: u64) -> Result<(RawImages, RawImages)> {
    const BLOBS: usize = 3;
    let root = Rng::new(seed);
    let mut proto_rng = root.child(0);
    let s = spec.image_size as f64;
    let classes: Vec<Vec<Blob>> = (0..num_classes)
        .map(|_| {
            (0..BLOBS)
                .map(|_| Blob {
                    cy: proto_rng.uniform_range(0.15, 0.85) * s,
                    cx: proto_rng.uniform_range(0.15, 0.85) * s,
                    sigma: proto_rng.uniform_range(0.06, 0.2) * s,
                    color: (0..spec.channels).map(|_| proto_rng.uniform()).collect(),
                })
                .collect()
        })
        .collect();
    let render = |count: usize, rng: &mut Rng| -> Result<RawImages> {
        let (c, h) = (spec.channels, spec.image_size);
        let mut data = Vec::with_capacity(count * c * h * h);
        let mut labels = Vec::with_capacity(count);
        let mut img = vec![0.0f64; c * h * h];
        for i in 0..count {
            let label = i % num_classes;
            img.fill(0.1);
            for blob in &classes[label] {
                let cy = blob.cy + 0.05 * s * rng.normal();
                let cx = blob.cx + 0.05 * s * rng.normal();
                let amp = rng.uniform_range(0.6, 1.0);
                let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
                for y in 0..h {
                    for x in 0..h {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        let v = amp * (-d2 * inv).exp();
                        for (ch, col) in blob.color.iter().enumerate() {
                            img[(ch * h + y) * h + x] += v * col;
                        }
                    }
                }
            }
            for v in &img {
                data.push((v + spec.noise * rng.normal()).clamp(0.0, 1.0) as f32);
            }
            labels.push(label);
        }
        Ok(RawImages {
            images: Tensor::new(&[count, c, h, h], data)?,
            labels,
        })
    };
    let train = render(spec.train_size, &mut root.child(1))?;
    let test = render(spec.test_size, &mut root.child(2))?;
    Ok((train, test))
}

/// Loads, subsets and centres the configured data.
pub fn load_dataset(cfg: &DataConfig, num_classes: usize, seed: u64) -> Result<DataSplits> {
    let (mut train, mut test) = match cfg.format {
        DataFormat::Synthetic => synthetic_images(&cfg.synthetic, num_classes, seed)?,
        DataFormat::Cifar10Binary => {
            let read = |paths: &[std::path::PathBuf]| -> Result<RawImages> {
                RawImages::concat(paths.iter().map(|p| read_cifar10_binary(p)).collect::<Result<_>>()?)
            };
            (read(&cfg.train_paths)?, read(&cfg.test_paths)?)
        }
        DataFormat::Idx => {
            let read = |imgs: &[std::path::PathBuf], labels: &[std::path::PathBuf]| -> Result<RawImages> {
                RawImages::concat(
                    imgs.iter()
                        .zip(labels)
                        .map(|(i, l)| read_idx_pair(i, l))
                        .collect::<Result<_>>()?,
                )
            };
            (read(&cfg.train_paths, &cfg.train_labels)?, read(&cfg.test_paths, &cfg.test_labels)?)
        }
    };
    let picker = Rng::new(seed).child(3);
    if let Some(size) = cfg.subset_size {
        let idx = stratified_subset(&train.labels, size, num_classes, &mut picker.child(0))?;
        train = train.subset(&idx)?;
    }
    if let Some(size) = cfg.test_subset_size {
        let idx = stratified_subset(&test.labels, size, num_classes, &mut picker.child(1))?;
        test = test.subset(&idx)?;
    }
    center_splits(train, test, num_classes)
}

/// One augmentation draw: content moves by `(dx, dy)` pixels, then the image
/// is mirrored left-right when `flip` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dx: i64,
    pub dy: i64,
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { dx: 0, dy: 0, flip: false };

    pub fn sample(rng: &mut Rng) -> Self {
        let dx = rng.int_inclusive(-MAX_SHIFT, MAX_SHIFT);
        let dy = rng.int_inclusive(-MAX_SHIFT, MAX_SHIFT);
        let flip = rng.bernoulli(0.5);
        Self { dx, dy, flip }
    }
}

/// Applies a draw to one `C x H x W` image; vacated pixels become zero.
pub fn shift_flip<E: Element>(image: &[E], (c, h, w): (usize, usize, usize), draw: AugmentDraw, out: &mut [E]) {
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 - draw.dy;
            for x in 0..w {
                let xs = if draw.flip { w - 1 - x } else { x };
                let sx = xs as i64 - draw.dx;
                out[(ch * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    image[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    E::zero()
                };
            }
        }
    }
}

/// Random shift in `[-4, 4]` along each axis with zero fill, then a
/// horizontal flip with probability 1/2, independently per image.
pub fn augment<E: Element>(batch: &Tensor<E>, rng: &mut Rng) -> Result<Tensor<E>> {
    let s = batch.shape();
    if s.len() != 4 || s[2] < 8 || s[3] < 8 {
        return Err(Error::Shape(format!("augment needs N x C x H x W with H, W >= 8, got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    let mut out = vec![E::zero(); batch.len()];
    for (img, dst) in batch.data().chunks_exact(per).zip(out.chunks_exact_mut(per)) {
        shift_flip(img, (c, h, w), AugmentDraw::sample(rng), dst);
    }
    Tensor::new(s, out)
}
