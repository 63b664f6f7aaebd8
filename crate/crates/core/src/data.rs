//! Labeled image datasets: a seeded synthetic generator and the CIFAR-10
//! binary format.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` with their class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A train/test pair plus per-channel normalization statistics computed on
/// the training images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Samples,
    pub test: Samples,
    pub classes: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(train: Samples, test: Samples, classes: usize) -> Result<Self> {
        for (name, s) in [("train", &train), ("test", &test)] {
            if s.images.rank() != 4 || s.images.shape()[0] != s.labels.len() {
                return Err(Error::Data(format!(
                    "{name} split: {} labels for images {:?}",
                    s.labels.len(),
                    s.images.shape()
                )));
            }
            if let Some(&l) = s.labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Data(format!("{name} split: label {l} >= {classes} classes")));
            }
            if !s.images.all_finite() {
                return Err(Error::Data(format!("{name} split: non-finite pixels")));
            }
        }
        if train.images.shape()[1..] != test.images.shape()[1..] {
            return Err(Error::Data("train and test image shapes differ".into()));
        }
        let (mean, std) = channel_stats(&train.images);
        Ok(Self {
            train,
            test,
            classes,
            mean,
            std,
        })
    }

    pub fn split(&self, split: Split) -> &Samples {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Per-example `[C, H, W]` shape.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.train.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Normalized images and labels for the given example indices.
    pub fn batch(&self, split: Split, index: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.split(split);
        let mut x = s.images.select_rows(index);
        self.normalize(&mut x);
        (x, index.iter().map(|&i| s.labels[i]).collect())
    }

    /// Like [`Dataset::batch`] with random horizontal flips and/or
    /// zero-padded random crops applied before normalization.
    pub fn augmented_batch<R: Rng + ?Sized>(
        &self,
        split: Split,
        index: &[usize],
        aug: Augment,
        rng: &mut R,
    ) -> (Tensor, Vec<usize>) {
        let s = self.split(split);
        let mut x = s.images.select_rows(index);
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        for img in x.data_mut().chunks_exact_mut(c * plane) {
            if aug.hflip && rng.random_bool(0.5) {
                for row in img.chunks_exact_mut(w) {
                    row.reverse();
                }
            }
            if aug.crop_pad > 0 {
                let p = aug.crop_pad as i64;
                let dy = rng.random_range(-p..=p) as isize;
                let dx = rng.random_range(-p..=p) as isize;
                let src = img.to_vec();
                for ch in 0..c {
                    for y in 0..h as isize {
                        for xx in 0..w as isize {
                            let (sy, sx) = (y + dy, xx + dx);
                            img[ch * plane + (y as usize) * w + xx as usize] =
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    0.0
                                } else {
                                    src[ch * plane + (sy as usize) * w + sx as usize]
                                };
                        }
                    }
                }
            }
        }
        self.normalize(&mut x);
        (x, index.iter().map(|&i| s.labels[i]).collect())
    }

    fn normalize(&self, x: &mut Tensor) {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        for (i, chunk) in x.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    /// Keeps the first `train` / `test` examples of each split.
    pub fn truncated(&self, train: Option<usize>, test: Option<usize>) -> Result<Self> {
        let cut = |s: &Samples, n: Option<usize>| -> Samples {
            let n = n.unwrap_or(s.len()).min(s.len());
            let idx: Vec<usize> = (0..n).collect();
            Samples {
                images: s.images.select_rows(&idx),
                labels: s.labels[..n].to_vec(),
            }
        };
        Dataset::new(cut(&self.train, train), cut(&self.test, test), self.classes)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub hflip: bool,
    pub crop_pad: usize,
}

fn channel_stats(images: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = images.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (i, chunk) in images.data().chunks_exact(plane).enumerate() {
        sum[i % c] += chunk.iter().sum::<f64>();
        sq[i % c] += chunk.iter().map(|v| v * v).sum::<f64>();
    }
    let n = (s[0] * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    (mean, std)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            train_per_class: 400,
            test_per_class: 100,
            image_size: 12,
            noise: 0.15,
            seed: 0,
        }
    }
}

/// Class-conditional appearance: an oriented grating and a colored blob.
#[derive(Clone, Debug)]
struct Prototype {
    angle: f64,
    freq: f64,
    grating_color: [f64; 3],
    blob_center: (f64, f64),
    blob_color: [f64; 3],
}

fn unit_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.3 {
            return c.map(|v| v / n);
        }
    }
}

/// `synth_dataset(classes, per_class, image_size, seed)`: `per_class`
/// examples per class, 80% train / 20% test.
pub fn synth_dataset(classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    let test = (per_class / 5).max(1);
    synth(&SynthConfig {
        classes,
        train_per_class: per_class.saturating_sub(test),
        test_per_class: test,
        image_size,
        seed,
        ..SynthConfig::default()
    })
}

pub fn synth(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::Data(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.image_size < 4 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::Data(format!(
            "degenerate synthetic sizes: image {}, train/class {}, test/class {}",
            cfg.image_size, cfg.train_per_class, cfg.test_per_class
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Data(format!("invalid noise level {}", cfg.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base_angle = rng.random_range(0.0..PI);
    let protos: Vec<Prototype> = (0..cfg.classes)
        .map(|c| Prototype {
            angle: base_angle + PI * c as f64 / cfg.classes as f64,
            freq: rng.random_range(1.0..3.0),
            grating_color: unit_color(&mut rng),
            blob_center: (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)),
            blob_color: unit_color(&mut rng),
        })
        .collect();
    let train = sample_split(&protos, cfg, cfg.train_per_class, &mut rng);
    let test = sample_split(&protos, cfg, cfg.test_per_class, &mut rng);
    Dataset::new(train, test, cfg.classes)
}

fn sample_split(protos: &[Prototype], cfg: &SynthConfig, per_class: usize, rng: &mut ChaCha8Rng) -> Samples {
    let mut labels: Vec<usize> = (0..protos.len())
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect();
    labels.shuffle(rng);
    let s = cfg.image_size;
    let mut data = Vec::with_capacity(labels.len() * 3 * s * s);
    for &label in &labels {
        data.extend(render(&protos[label], s, cfg.noise, rng));
    }
    Samples {
        images: Tensor::new([labels.len(), 3, s, s], data).expect("synthetic shape"),
        labels,
    }
}

fn render(p: &Prototype, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.5..1.0);
    let angle = p.angle + rng.random_range(-0.15..0.15);
    let (cx, cy) = (
        p.blob_center.0 + rng.random_range(-0.12..0.12),
        p.blob_center.1 + rng.random_range(-0.12..0.12),
    );
    let blob_amp = rng.random_range(0.4..1.0);
    let radius = 0.18;
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let grating = (2.0 * PI * p.freq * (u * cos + v * sin) + phase).sin() * amp;
            let d2 = (u - cx).powi(2) + (v - cy).powi(2);
            let blob = (-d2 / (2.0 * radius * radius)).exp() * blob_amp;
            for ch in 0..3 {
                let n: f64 = StandardNormal.sample(rng);
                let val = 0.5 + 0.2 * grating * p.grating_color[ch] + 0.3 * blob * p.blob_color[ch] + noise * n;
                out[(ch * size + y) * size + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format
// ---------------------------------------------------------------------------

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Parses raw CIFAR-10 records (one label byte, then 1024 R, 1024 G and
/// 1024 B bytes) into `[0, 1]` images.
pub fn parse_cifar_records(bytes: &[u8], cap: Option<usize>) -> Result<Samples> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "CIFAR batch size {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = (bytes.len() / CIFAR_RECORD).min(cap.unwrap_or(usize::MAX));
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).take(n).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("record {i}: label byte {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Samples {
        images: Tensor::new([n, 3, 32, 32], data)?,
        labels,
    })
}

fn read_cifar_file(path: &Path, cap: Option<usize>) -> Result<Samples> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes, cap).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads the standard CIFAR-10 binary batches from `dir`, keeping at most
/// `train_cap` / `test_cap` examples. Missing training batches after the
/// first are tolerated when the cap is already reached.
pub fn load_cifar10(dir: impl AsRef<Path>, train_cap: Option<usize>, test_cap: Option<usize>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut train: Option<Samples> = None;
    for name in CIFAR_TRAIN_FILES {
        let have = train.as_ref().map_or(0, |s| s.len());
        if train_cap.is_some_and(|c| have >= c) {
            break;
        }
        let remaining = train_cap.map(|c| c - have);
        let part = read_cifar_file(&dir.join(name), remaining)?;
        train = Some(match train {
            None => part,
            Some(acc) => concat(acc, part)?,
        });
    }
    let train = train.ok_or_else(|| Error::Data("no training batches".into()))?;
    let test = read_cifar_file(&dir.join(CIFAR_TEST_FILE), test_cap)?;
    Dataset::new(train, test, 10)
}

fn concat(a: Samples, b: Samples) -> Result<Samples> {
    let mut shape = a.images.shape().to_vec();
    shape[0] += b.images.shape()[0];
    let mut data = a.images.into_data();
    data.extend_from_slice(b.images.data());
    let mut labels = a.labels;
    labels.extend(b.labels);
    Ok(Samples {
        images: Tensor::new(shape, data)?,
        labels,
    })
}
