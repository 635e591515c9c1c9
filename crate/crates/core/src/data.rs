//! Datasets: a seeded synthetic image task and the CIFAR-10 binary format.
//!
//! Images are held internally as `(N, C, H, W)` with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::rng::{child_seed, seeded};
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

/// Labeled image set.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// Images `(N, C, H, W)` in `[0, 1]`.
    pub images: Array4<f64>,
    /// One integer label per image, in `[0, num_classes)`.
    pub labels: Vec<usize>,
    /// Number of classes.
    pub num_classes: usize,
}

impl LabeledDataset {
    /// Number of samples.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// True when the set holds no samples.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image `(H, W, C)` dimensions.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_n, c, h, w) = self.images.dim();
        (h, w, c)
    }

    /// Copy out the samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        let (_n, c, h, w) = self.images.dim();
        let mut images = Array4::<f64>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), idx));
            labels.push(self.labels[idx]);
        }
        (images, labels)
    }

    /// Copy of the first `n` samples.
    pub fn take(&self, n: usize) -> LabeledDataset {
        let indices: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&indices);
        LabeledDataset { images, labels, num_classes: self.num_classes }
    }

    /// Append another set of the same image shape.
    pub fn concat(mut self, other: LabeledDataset) -> LabeledDataset {
        let (na, c, h, w) = self.images.dim();
        let nb = other.images.dim().0;
        let mut images = Array4::<f64>::zeros((na + nb, c, h, w));
        images.slice_mut(ndarray::s![..na, .., .., ..]).assign(&self.images);
        images.slice_mut(ndarray::s![na.., .., .., ..]).assign(&other.images);
        self.labels.extend(other.labels);
        LabeledDataset {
            images,
            labels: self.labels,
            num_classes: self.num_classes.max(other.num_classes),
        }
    }
}

/// Parameters of the synthetic class-prototype task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Number of balanced classes.
    pub num_classes: usize,
    /// Square image side.
    pub image_size: usize,
    /// Training samples per class.
    pub train_per_class: usize,
    /// Test samples per class.
    pub test_per_class: usize,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            image_size: 8,
            train_per_class: 500,
            test_per_class: 125,
            noise_std: 0.1,
        }
    }
}

/// Train and test splits drawn around shared class prototypes.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Training split, classes balanced and interleaved.
    pub train: LabeledDataset,
    /// Test split from the same prototypes.
    pub test: LabeledDataset,
    /// The class prototypes `(C, H, W)`, for oracle classifiers.
    pub prototypes: Vec<Array3<f64>>,
}

/// 3x3 box blur with same padding; the divisor counts in-bounds taps.
fn box_blur(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ii, jj) = (i as i64 + di, j as i64 + dj);
                        if ii < 0 || ii >= h as i64 || jj < 0 || jj >= w as i64 {
                            continue;
                        }
                        acc += img[[ci, ii as usize, jj as usize]];
                        cnt += 1.0;
                    }
                }
                out[[ci, i, j]] = acc / cnt;
            }
        }
    }
    out
}

/// Build the synthetic task: per class, the prototype is smoothed seeded
/// noise stretched back to full contrast; each sample adds clipped Gaussian
/// pixel noise. Deterministic per seed.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> SyntheticData {
    let size = spec.image_size;
    let mut prototypes = Vec::with_capacity(spec.num_classes);
    for class in 0..spec.num_classes {
        let mut rng = seeded(child_seed(seed, class as u64));
        let raw = Array3::<f64>::from_shape_fn((3, size, size), |_| rng.random_range(0.0..1.0));
        let smooth = box_blur(&box_blur(&raw));
        let min = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (max - min).max(1e-9);
        prototypes.push(smooth.mapv(|v| (v - min) / span));
    }

    let build_split = |per_class: usize, stream: u64| {
        let n = per_class * spec.num_classes;
        let mut images = Array4::<f64>::zeros((n, 3, size, size));
        let mut labels = Vec::with_capacity(n);
        let mut rng = seeded(child_seed(seed, stream));
        // interleave classes so any prefix stays balanced
        for rep in 0..per_class {
            for (class, proto) in prototypes.iter().enumerate() {
                let row = rep * spec.num_classes + class;
                let mut img = proto.clone();
                img.mapv_inplace(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (v + z * spec.noise_std).clamp(0.0, 1.0)
                });
                images.index_axis_mut(Axis(0), row).assign(&img);
                labels.push(class);
            }
        }
        LabeledDataset { images, labels, num_classes: spec.num_classes }
    };

    let train = build_split(spec.train_per_class, u64::MAX - 1);
    let test = build_split(spec.test_per_class, u64::MAX - 2);
    SyntheticData { train, test, prototypes }
}

const CIFAR_RECORD: usize = 3073;

/// Load a CIFAR-10 binary batch file: 3073-byte records of one label byte
/// followed by three 1024-byte channel planes (row-major 32x32). Pixel 255
/// scales to exactly 1.0; record order is preserved.
pub fn load_cifar10_binary(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Dataset(format!("{}: empty file", path.display())));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::Dataset(format!(
            "{}: truncated record starting at byte offset {offset} (file size {})",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Array4::<f64>::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    for rec in 0..n {
        let base = rec * CIFAR_RECORD;
        let label = bytes[base];
        if label > 9 {
            return Err(Error::Dataset(format!(
                "{}: label byte {label} > 9 at byte offset {base}",
                path.display()
            )));
        }
        labels.push(label as usize);
        for ch in 0..3 {
            for i in 0..32 {
                for j in 0..32 {
                    let b = bytes[base + 1 + ch * 1024 + i * 32 + j];
                    images[[rec, ch, i, j]] = b as f64 / 255.0;
                }
            }
        }
    }
    Ok(LabeledDataset { images, labels, num_classes: 10 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_sizes() {
        let data = make_synthetic(&SyntheticSpec::default(), 7);
        assert_eq!(data.train.len(), 2000);
        assert_eq!(data.test.len(), 500);
        for class in 0..4 {
            assert_eq!(data.train.labels.iter().filter(|&&l| l == class).count(), 500);
            assert_eq!(data.test.labels.iter().filter(|&&l| l == class).count(), 125);
        }
        assert!(data.train.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_noise_collapses_classes() {
        let spec = SyntheticSpec { noise_std: 0.0, train_per_class: 3, ..Default::default() };
        let data = make_synthetic(&spec, 3);
        for class in 0..spec.num_classes {
            let rows: Vec<usize> = (0..data.train.len())
                .filter(|&i| data.train.labels[i] == class)
                .collect();
            let first = data.train.images.index_axis(Axis(0), rows[0]).to_owned();
            for &r in &rows[1..] {
                assert_eq!(data.train.images.index_axis(Axis(0), r), first);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_synthetic(&SyntheticSpec::default(), 11);
        let b = make_synthetic(&SyntheticSpec::default(), 11);
        assert_eq!(a.train.images, b.train.images);
        assert_eq!(a.test.labels, b.test.labels);
        let c = make_synthetic(&SyntheticSpec::default(), 12);
        assert_ne!(a.train.images, c.train.images);
    }

    #[test]
    fn nearest_prototype_oracle_classifies_test_split() {
        // independent classifier: argmin over prototype distances
        let data = make_synthetic(&SyntheticSpec::default(), 5);
        let mut correct = 0;
        for i in 0..data.test.len() {
            let img = data.test.images.index_axis(Axis(0), i);
            let mut best = (f64::INFINITY, 0usize);
            for (class, proto) in data.prototypes.iter().enumerate() {
                let d: f64 = img
                    .iter()
                    .zip(proto.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, class);
                }
            }
            if best.1 == data.test.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / data.test.len() as f64;
        assert!(acc >= 0.99, "nearest-prototype accuracy {acc}");
    }

    #[test]
    fn cifar_rejects_truncation_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 2 * CIFAR_RECORD + 100]).unwrap();
        let err = load_cifar10_binary(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("6146"), "message should name the offset: {msg}");
    }

    #[test]
    fn cifar_rejects_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("label.bin");
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 12;
        std::fs::write(&path, bytes).unwrap();
        assert!(load_cifar10_binary(&path).is_err());
    }

    #[test]
    fn cifar_scales_pixels_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255; // channel 0, pixel (0,0)
        bytes[1 + 1024] = 128; // channel 1, pixel (0,0)
        std::fs::write(&path, bytes).unwrap();
        let data = load_cifar10_binary(&path).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.labels[0], 3);
        assert_eq!(data.images[[0, 0, 0, 0]], 1.0);
        assert_eq!(data.images[[0, 1, 0, 0]], 128.0 / 255.0);
        assert_eq!(data.images[[0, 2, 0, 0]], 0.0);
    }
}
