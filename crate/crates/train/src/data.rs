//! Image classification datasets.
//!
//! On-disk format is the CIFAR-10 binary record layout: each record is one
//! label byte followed by `3 × 32 × 32` pixel bytes stored channel-major
//! (1024 red, 1024 green, 1024 blue, each row-major). A dataset directory
//! holds either `train.bin` + `test.bin`, or the stock CIFAR-10 files
//! `data_batch_1.bin` … `data_batch_5.bin` + `test_batch.bin` (optionally
//! inside a `cifar-10-batches-bin/` subdirectory).
//!
//! When no real data is available, [`synthetic`] generates a deterministic
//! 10-class texture task in the same format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hbnn_core::RngStream;

use crate::error::{Result, TrainError};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PIXELS: usize = CHANNELS * SIDE * SIDE;
pub const RECORD: usize = 1 + PIXELS;
pub const CLASSES: usize = 10;

pub const FETCH_HELP: &str = "expected train.bin/test.bin or the CIFAR-10 binary batches \
(data_batch_1.bin .. data_batch_5.bin, test_batch.bin). Download \
https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz and extract it into the dataset \
directory, or leave the data directory unset to use the built-in synthetic task";

/// Raw labelled images, pixels as bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSplit {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl RawSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * PIXELS);
        }
    }

    pub fn to_records(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD);
        for (i, &label) in self.labels.iter().enumerate() {
            out.push(label);
            out.extend_from_slice(&self.pixels[i * PIXELS..(i + 1) * PIXELS]);
        }
        out
    }

    pub fn from_records(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % RECORD != 0 {
            return Err(TrainError::Dataset(format!(
                "file size {} is not a multiple of the {RECORD}-byte record",
                bytes.len()
            )));
        }
        let mut labels = Vec::with_capacity(bytes.len() / RECORD);
        let mut pixels = Vec::with_capacity(bytes.len() / RECORD * PIXELS);
        for rec in bytes.chunks_exact(RECORD) {
            if rec[0] as usize >= CLASSES {
                return Err(TrainError::Dataset(format!("label {} out of range", rec[0])));
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
        Ok(Self { labels, pixels })
    }

    fn extend(&mut self, other: RawSplit) {
        self.labels.extend(other.labels);
        self.pixels.extend(other.pixels);
    }
}

/// Normalized dataset ready for training: per-channel standardized with
/// statistics from the training split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_images: Vec<f32>,
    pub train_labels: Vec<u8>,
    pub test_images: Vec<f32>,
    pub test_labels: Vec<u8>,
    /// `[channels, height, width]`
    pub dims: [usize; 3],
    pub classes: usize,
}

impl Dataset {
    pub fn from_raw(train: &RawSplit, test: &RawSplit) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(TrainError::Dataset("empty split".into()));
        }
        let plane = SIDE * SIDE;
        let mut mean = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        for img in train.pixels.chunks_exact(PIXELS) {
            for c in 0..CHANNELS {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (train.len() * plane) as f64;
        let mut std = [0.0f64; CHANNELS];
        for c in 0..CHANNELS {
            mean[c] /= count;
            std[c] = (sq[c] / count - mean[c] * mean[c]).max(1e-12).sqrt();
        }
        let normalize = |pixels: &[u8]| -> Vec<f32> {
            pixels
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let c = (i % PIXELS) / plane;
                    ((p as f64 / 255.0 - mean[c]) / std[c]) as f32
                })
                .collect()
        };
        Ok(Self {
            train_images: normalize(&train.pixels),
            train_labels: train.labels.clone(),
            test_images: normalize(&test.pixels),
            test_labels: test.labels.clone(),
            dims: [CHANNELS, SIDE, SIDE],
            classes: CLASSES,
        })
    }

    pub fn sample_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_labels.len()
    }
}

fn read_split(paths: &[PathBuf]) -> Result<RawSplit> {
    let mut out = RawSplit {
        labels: Vec::new(),
        pixels: Vec::new(),
    };
    for p in paths {
        let bytes = fs::read(p)
            .map_err(|e| TrainError::Dataset(format!("{}: {e}", p.display())))?;
        out.extend(RawSplit::from_records(&bytes)?);
    }
    Ok(out)
}

/// Loads a dataset directory, keeping the first `n_train` / `n_test` records.
pub fn load_dir(dir: &Path, n_train: usize, n_test: usize) -> Result<(RawSplit, RawSplit)> {
    let candidates = [dir.to_path_buf(), dir.join("cifar-10-batches-bin")];
    for base in &candidates {
        let (train_files, test_files) = if base.join("train.bin").is_file() {
            (vec![base.join("train.bin")], vec![base.join("test.bin")])
        } else if base.join("data_batch_1.bin").is_file() {
            (
                (1..=5)
                    .map(|i| base.join(format!("data_batch_{i}.bin")))
                    .filter(|p| p.is_file())
                    .collect(),
                vec![base.join("test_batch.bin")],
            )
        } else {
            continue;
        };
        if !test_files[0].is_file() {
            return Err(TrainError::Dataset(format!(
                "{} is missing its test split; {FETCH_HELP}",
                base.display()
            )));
        }
        let mut train = read_split(&train_files)?;
        let mut test = read_split(&test_files)?;
        train.truncate(n_train);
        test.truncate(n_test);
        return Ok((train, test));
    }
    Err(TrainError::Dataset(format!(
        "no dataset found in {}; {FETCH_HELP}",
        dir.display()
    )))
}

pub fn write_split(path: &Path, split: &RawSplit) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&split.to_records())?;
    Ok(())
}

/// Parameters of the synthetic texture task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    /// Oriented gratings per class prototype.
    pub gratings: usize,
    /// Per-pixel Gaussian noise, in grating-amplitude units.
    pub noise: f64,
    /// Amplitude of one random distractor grating added to every image.
    pub distractor: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            gratings: 2,
            noise: 0.9,
            distractor: 0.8,
        }
    }
}

struct Grating {
    freq: f64,
    angle: f64,
    color: [f64; CHANNELS],
}

fn random_grating(rng: &mut RngStream) -> Grating {
    let mut color = [0.0; CHANNELS];
    for c in color.iter_mut() {
        *c = rng.uniform_range(-1.0, 1.0);
    }
    Grating {
        freq: rng.uniform_range(1.5, 5.0),
        angle: rng.uniform_range(0.0, std::f64::consts::PI),
        color,
    }
}

fn render(g: &Grating, amp: f64, phase: f64, img: &mut [f64]) {
    let (s, c) = g.angle.sin_cos();
    let k = 2.0 * std::f64::consts::PI * g.freq / SIDE as f64;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let v = amp * (k * (x as f64 * c + y as f64 * s) + phase).cos();
            for ch in 0..CHANNELS {
                img[ch * SIDE * SIDE + y * SIDE + x] += v * g.color[ch];
            }
        }
    }
}

/// Deterministic 10-class task: each class is a fixed set of coloured,
/// oriented gratings; every image draws random phases and amplitudes for its
/// class gratings, adds one random distractor grating and pixel noise.
/// Class templates depend only on `seed`; train and test images come from
/// separate streams.
pub fn synthetic(n_train: usize, n_test: usize, seed: u64, params: SyntheticParams) -> (RawSplit, RawSplit) {
    let mut class_rng = RngStream::new(seed);
    let classes: Vec<Vec<Grating>> = (0..CLASSES)
        .map(|_| (0..params.gratings).map(|_| random_grating(&mut class_rng)).collect())
        .collect();
    let base = RngStream::new(seed);
    let make = |n: usize, salt: u64| {
        let mut rng = base.fork(salt);
        let mut labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n * PIXELS);
        let mut img = vec![0.0f64; PIXELS];
        for i in 0..n {
            let label = (i % CLASSES) as u8;
            img.iter_mut().for_each(|v| *v = 0.0);
            for g in &classes[label as usize] {
                let amp = rng.uniform_range(0.6, 1.0);
                let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
                render(g, amp, phase, &mut img);
            }
            if params.distractor > 0.0 {
                let d = random_grating(&mut rng);
                let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
                render(&d, params.distractor, phase, &mut img);
            }
            for v in img.iter_mut() {
                *v += params.noise * rng.standard_normal();
            }
            labels.push(label);
            pixels.extend(img.iter().map(|v| (128.0 + 40.0 * v).round().clamp(0.0, 255.0) as u8));
        }
        RawSplit { labels, pixels }
    };
    (make(n_train, 1), make(n_test, 2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let (train, _) = synthetic(12, 3, 5, SyntheticParams::default());
        let bytes = train.to_records();
        assert_eq!(bytes.len(), 12 * RECORD);
        assert_eq!(RawSplit::from_records(&bytes).unwrap(), train);
        assert!(RawSplit::from_records(&bytes[1..]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic(20, 10, 3, SyntheticParams::default());
        let b = synthetic(20, 10, 3, SyntheticParams::default());
        assert_eq!(a, b);
        assert_ne!(a.0.pixels, synthetic(20, 10, 4, SyntheticParams::default()).0.pixels);
    }

    #[test]
    fn normalization_is_standard() {
        let (train, test) = synthetic(50, 10, 1, SyntheticParams::default());
        let ds = Dataset::from_raw(&train, &test).unwrap();
        let n = ds.train_images.len() as f64;
        let mean: f64 = ds.train_images.iter().map(|&x| x as f64).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn missing_dir_explains_fetch() {
        let err = load_dir(Path::new("/nonexistent/hbnn"), 10, 10).unwrap_err();
        assert!(err.to_string().contains("cifar-10-binary"));
    }
}
