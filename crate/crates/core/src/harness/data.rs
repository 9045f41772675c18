//! Image datasets: MNIST (IDX), CIFAR-10 (binary batches) and synthetic blobs.
//!
//! Pixels are kept as f32 in memory and widened to f64 per batch. Resizing,
//! when requested, is also applied per batch so the stored set stays small.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, RngState};

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const CIFAR_TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_BATCH: &str = "test_batch.bin";
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Channel-major images with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<f32>,
    labels: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    resize_to: Option<usize>,
}

impl Dataset {
    pub fn new(
        pixels: Vec<f32>,
        labels: Vec<usize>,
        (channels, height, width): (usize, usize, usize),
        classes: usize,
    ) -> Result<Self> {
        let item = channels * height * width;
        if item == 0 || pixels.len() != labels.len() * item {
            return Err(Error::Shape(format!(
                "{} pixels for {} items of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            pixels,
            labels,
            channels,
            height,
            width,
            classes,
            resize_to: None,
        })
    }

    /// Square bilinear resize applied whenever a batch is drawn.
    pub fn with_resize(mut self, side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidArgument("resize side must be positive".into()));
        }
        self.resize_to = Some(side);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(channels, height, width)` as stored.
    pub fn native_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// `(channels, height, width)` of the rows returned by [`Dataset::batch`].
    pub fn shape(&self) -> (usize, usize, usize) {
        match self.resize_to {
            Some(s) => (self.channels, s, s),
            None => self.native_shape(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        let (c, h, w) = self.shape();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let item = self.channels * self.height * self.width;
        &self.pixels[i * item..(i + 1) * item]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Keeps the first `n` items.
    pub fn truncate(&mut self, n: usize) {
        let item = self.channels * self.height * self.width;
        self.labels.truncate(n);
        self.pixels.truncate(n * item);
    }

    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let dim = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            match self.resize_to {
                Some(s) if s != self.height || s != self.width => data.extend(bilinear_resize(
                    self.image(i),
                    self.channels,
                    self.height,
                    self.width,
                    s,
                    s,
                )),
                _ => data.extend(self.image(i).iter().map(|&v| v as f64)),
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Matrix::new(indices.len(), dim, data).expect("batch rows have the feature width"),
            labels,
        )
    }
}

/// Half-pixel-centred bilinear interpolation of a channel-major image.
pub fn bilinear_resize(
    image: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    let sy = height as f64 / out_h as f64;
    let sx = width as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, len: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    for c in 0..channels {
        let plane = &image[c * height * width..(c + 1) * height * width];
        for oy in 0..out_h {
            let (y0, y1, fy) = coord(oy, sy, height);
            for ox in 0..out_w {
                let (x0, x1, fx) = coord(ox, sx, width);
                let p = |y: usize, x: usize| plane[y * width + x] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated IDX header"));
    }
    let magic = be_u32(&bytes, 0);
    if magic != 0x0000_0803 {
        return Err(Error::format(path, format!("bad IDX image magic {magic:#010x}")));
    }
    let (n, rows, cols) = (
        be_u32(&bytes, 4) as usize,
        be_u32(&bytes, 8) as usize,
        be_u32(&bytes, 12) as usize,
    );
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!("truncated: {} bytes, header promises {need}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..need].to_vec()))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated IDX header"));
    }
    let magic = be_u32(&bytes, 0);
    if magic != 0x0000_0801 {
        return Err(Error::format(path, format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() < 8 + n {
        return Err(Error::format(
            path,
            format!("truncated: {} bytes, header promises {}", bytes.len(), 8 + n),
        ));
    }
    Ok(bytes[8..8 + n].to_vec())
}

pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let n = pixels.len() / (rows * cols);
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    for v in [0x0803u32, n as u32, rows as u32, cols as u32] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&0x0801u32.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads one MNIST split, scaled to [0, 1].
///
/// With `pad_to_32` the native 28×28 digits are centred in a 32×32 zero
/// border; otherwise they keep their native size.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split, pad_to_32: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (img_name, lbl_name) = match split {
        Split::Train => (MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS),
        Split::Test => (MNIST_TEST_IMAGES, MNIST_TEST_LABELS),
    };
    let img_path = dir.join(img_name);
    let (n, rows, cols, raw) = read_idx_images(&img_path)?;
    let labels = read_idx_labels(dir.join(lbl_name))?;
    if labels.len() != n {
        return Err(Error::format(
            &img_path,
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    let (out_h, out_w, off_y, off_x) = if pad_to_32 {
        if rows > 32 || cols > 32 {
            return Err(Error::format(&img_path, format!("{rows}x{cols} images do not fit 32x32")));
        }
        (32, 32, (32 - rows) / 2, (32 - cols) / 2)
    } else {
        (rows, cols, 0, 0)
    };
    let mut pixels = vec![0f32; n * out_h * out_w];
    for i in 0..n {
        let src = &raw[i * rows * cols..(i + 1) * rows * cols];
        let dst = &mut pixels[i * out_h * out_w..(i + 1) * out_h * out_w];
        for y in 0..rows {
            for x in 0..cols {
                dst[(y + off_y) * out_w + x + off_x] = src[y * cols + x] as f32 / 255.0;
            }
        }
    }
    Dataset::new(
        pixels,
        labels.into_iter().map(usize::from).collect(),
        (1, out_h, out_w),
        10,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CifarOptions {
    /// Per-channel standardization with [`CIFAR_MEAN`] and [`CIFAR_STD`].
    pub normalize: bool,
    pub max_items: Option<usize>,
    pub resize: Option<usize>,
}

impl Default for CifarOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            max_items: None,
            resize: None,
        }
    }
}

/// Loads the five training batches or the test batch.
pub fn load_cifar10(dir: impl AsRef<Path>, split: Split, options: &CifarOptions) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<PathBuf> = match split {
        Split::Train => CIFAR_TRAIN_BATCHES.iter().map(|f| dir.join(f)).collect(),
        Split::Test => vec![dir.join(CIFAR_TEST_BATCH)],
    };
    for f in &files {
        if !f.is_file() {
            return Err(Error::format(f, "missing CIFAR-10 batch file"));
        }
    }
    let limit = options.max_items.unwrap_or(usize::MAX);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    'files: for f in &files {
        let bytes = read_file(f)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                f,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            if labels.len() >= limit {
                break 'files;
            }
            let label = record[0] as usize;
            if label >= 10 {
                return Err(Error::format(f, format!("label {label} outside 10 classes")));
            }
            labels.push(label);
            for (c, plane) in record[1..].chunks_exact(1024).enumerate() {
                let (mean, std) = if options.normalize {
                    (CIFAR_MEAN[c], CIFAR_STD[c])
                } else {
                    (0.0, 1.0)
                };
                pixels.extend(plane.iter().map(|&p| (p as f32 / 255.0 - mean) / std));
            }
        }
    }
    let ds = Dataset::new(pixels, labels, (3, 32, 32), 10)?;
    match options.resize {
        Some(side) => ds.with_resize(side),
        None => Ok(ds),
    }
}

pub fn write_cifar_batch(path: impl AsRef<Path>, labels: &[u8], pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != labels.len() * 3072 {
        return Err(Error::Shape(format!(
            "{} pixel bytes for {} records",
            pixels.len(),
            labels.len()
        )));
    }
    let mut bytes = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (i, &l) in labels.iter().enumerate() {
        bytes.push(l);
        bytes.extend_from_slice(&pixels[i * 3072..(i + 1) * 3072]);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Class-conditional Gaussian blobs in `d` dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Distance of every class mean from the origin, in noise standard deviations.
    pub margin: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 1000,
            dim: 16,
            classes: 10,
            margin: 4.0,
        }
    }
}

/// Same seed, same bytes. Labels cycle through the classes.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n == 0 || spec.dim == 0 || spec.classes == 0 {
        return Err(Error::InvalidArgument("n, dim and classes must be at least 1".into()));
    }
    let mut rng = RngState::new(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.gaussian()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm * spec.margin).collect()
        })
        .collect();
    let mut pixels = Vec::with_capacity(spec.n * spec.dim);
    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    for &l in &labels {
        pixels.extend(means[l].iter().map(|m| (m + rng.gaussian()) as f32));
    }
    Dataset::new(pixels, labels, (1, 1, spec.dim), spec.classes)
}

/// Digit-like class templates: a few bright Gaussian strokes per class,
/// jittered by up to two pixels and corrupted with noise.
fn template_images(
    rng: &mut RngState,
    classes: usize,
    channels: usize,
    side: usize,
    count: usize,
) -> (Vec<u8>, Vec<u8>) {
    let bumps: Vec<Vec<(f64, f64, f64, Vec<f64>)>> = (0..classes)
        .map(|_| {
            (0..4)
                .map(|_| {
                    let cy = side as f64 * (0.25 + 0.5 * rng.uniform());
                    let cx = side as f64 * (0.25 + 0.5 * rng.uniform());
                    let r = side as f64 * (0.06 + 0.08 * rng.uniform());
                    let colour: Vec<f64> = (0..channels).map(|_| 0.3 + 0.7 * rng.uniform()).collect();
                    (cy, cx, r, colour)
                })
                .collect()
        })
        .collect();
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * channels * side * side);
    for i in 0..count {
        let label = (rng.below(classes) + i) % classes;
        labels.push(label as u8);
        let dy = rng.below(5) as f64 - 2.0;
        let dx = rng.below(5) as f64 - 2.0;
        let gain = 0.7 + 0.3 * rng.uniform();
        for c in 0..channels {
            for y in 0..side {
                for x in 0..side {
                    let mut v = 0.0;
                    for (cy, cx, r, colour) in &bumps[label] {
                        let d2 = (y as f64 - cy - dy).powi(2) + (x as f64 - cx - dx).powi(2);
                        v += colour[c] * (-d2 / (2.0 * r * r)).exp();
                    }
                    let noisy = gain * v + 0.15 * rng.gaussian();
                    pixels.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }
    (labels, pixels)
}

/// Writes MNIST-format files filled with synthetic 28×28 digits.
pub fn write_mnist_standin(dir: impl AsRef<Path>, seed: u64, train: usize, test: usize) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = RngState::new(seed);
    // Same templates for both splits: draw them once, then split the items.
    let (labels, pixels) = template_images(&mut rng, 10, 1, 28, train + test);
    let cut = train * 28 * 28;
    write_idx_images(dir.join(MNIST_TRAIN_IMAGES), 28, 28, &pixels[..cut])?;
    write_idx_labels(dir.join(MNIST_TRAIN_LABELS), &labels[..train])?;
    write_idx_images(dir.join(MNIST_TEST_IMAGES), 28, 28, &pixels[cut..])?;
    write_idx_labels(dir.join(MNIST_TEST_LABELS), &labels[train..])
}

/// Writes CIFAR-10-format batches of synthetic 32×32 colour images.
/// `train` items are spread over the five training batches.
pub fn write_cifar_standin(dir: impl AsRef<Path>, seed: u64, train: usize, test: usize) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = RngState::new(seed);
    let (labels, pixels) = template_images(&mut rng, 10, 3, 32, train + test);
    let per = train.div_ceil(5);
    for (b, name) in CIFAR_TRAIN_BATCHES.iter().enumerate() {
        let lo = (b * per).min(train);
        let hi = ((b + 1) * per).min(train);
        write_cifar_batch(dir.join(name), &labels[lo..hi], &pixels[lo * 3072..hi * 3072])?;
    }
    write_cifar_batch(dir.join(CIFAR_TEST_BATCH), &labels[train..], &pixels[train * 3072..])
}
