//! Datasets, evolutionary splits, the synthetic desk dataset and
//! augmentation.
//!
//! Pixels are stored as bytes and read as `byte / 255`, so every value lies
//! in `[0, 1]` and a CIFAR-10 sized set stays small in memory.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::Shape;
use crate::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("{pixels} pixel bytes do not match {n} images of shape {shape:?}")]
    PixelCount { pixels: usize, n: usize, shape: Shape },
    #[error("label {label} at index {index} is not below {n_classes}")]
    Label { index: usize, label: u8, n_classes: usize },
    #[error("split sizes {sizes:?} exceed the {n} available samples")]
    SplitTooLarge { sizes: [usize; 3], n: usize },
    #[error("synthetic data supports 2 to 10 classes, not {0}")]
    ClassCount(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    shape: Shape,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    n_classes: usize,
}

impl Dataset {
    /// `pixels` holds `labels.len()` images, each `H x W x C` row-major.
    pub fn new(shape: Shape, pixels: Vec<u8>, labels: Vec<u8>, n_classes: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        let per: usize = shape.iter().product();
        if pixels.len() != per * labels.len() {
            return Err(DataError::PixelCount { pixels: pixels.len(), n: labels.len(), shape });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= n_classes) {
            return Err(DataError::Label { index, label, n_classes });
        }
        Ok(Dataset { shape, pixels, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let per: usize = self.shape.iter().product();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Images at `rows` as an `N x H x W x C` tensor with values in `[0, 1]`.
    pub fn images<T: Scalar>(&self, rows: &[usize]) -> Tensor<T> {
        let [h, w, c] = self.shape;
        let mut data = Vec::with_capacity(rows.len() * h * w * c);
        for &r in rows {
            data.extend(self.image_bytes(r).iter().map(|&b| T::of(b as f64 / 255.0)));
        }
        Tensor::from_vec(&[rows.len(), h, w, c], data).expect("consistent sizes")
    }

    pub fn labels_at(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.label(r)).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(rows.len() * self.image_bytes(0).len());
        for &r in rows {
            pixels.extend_from_slice(self.image_bytes(r));
        }
        Dataset { shape: self.shape, pixels, labels: self.labels_at(rows).iter().map(|&l| l as u8).collect(), n_classes: self.n_classes }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Sizes of the evolutionary training, control and fitness subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub evo_train: usize,
    pub control: usize,
    pub fitness: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// 43,000 / 3,500 / 3,500 out of the 50,000 CIFAR-10 training images.
    pub fn cifar10(seed: u64) -> Self {
        SplitSpec { evo_train: 43_000, control: 3_500, fitness: 3_500, seed }
    }
}

/// Index sets of a seeded, uniformly random, disjoint partition.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3], DataError> {
    let sizes = [spec.evo_train, spec.control, spec.fitness];
    if sizes.iter().sum::<usize>() > n {
        return Err(DataError::SplitTooLarge { sizes, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::Rng::seed_from_u64(spec.seed));
    let a = order[..sizes[0]].to_vec();
    let b = order[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let c = order[sizes[0] + sizes[1]..sizes[0] + sizes[1] + sizes[2]].to_vec();
    Ok([a, b, c])
}

/// `(evo_train, control, fitness)` subsets of `ds`.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let [a, b, c] = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&a), ds.subset(&b), ds.subset(&c)))
}

/// Class-dependent binary pattern at `(y, x)` with phase `p`.
fn pattern(class: usize, y: usize, x: usize, p: usize) -> bool {
    let (yi, xi) = (y as i64, x as i64);
    match class {
        0 => (y + p) / 2 % 2 == 0,
        1 => (x + p) / 2 % 2 == 0,
        2 => ((x + p) / 2 + y / 2) % 2 == 0,
        3 => (x + y + p) / 2 % 2 == 0,
        4 => ((xi - yi + p as i64 + 64) / 2) % 2 == 0,
        5 => (y + p) % 4 == 0,
        6 => (x + p) % 4 == 0,
        7 => (xi - 3).abs().max((yi - 3).abs()) == (p % 3) as i64 + 1,
        8 => ((x + p) % 4 < 2) != ((y + p) % 4 < 2) && (x + y) % 2 == 0,
        _ => (x * x + y * y + p) % 3 == 0,
    }
}

/// Procedural `size x size x 3` images, `n_per_class` per class. Each image
/// draws a class pattern with a random phase, contrast and tint, plus
/// Gaussian pixel noise, quantized to bytes. Same arguments, same dataset.
pub fn synth_dataset(n_per_class: usize, n_classes: usize, size: usize, seed: u64) -> Result<Dataset, DataError> {
    if !(2..=10).contains(&n_classes) {
        return Err(DataError::ClassCount(n_classes));
    }
    if n_per_class == 0 || size == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = crate::Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("valid sigma");
    let n = n_per_class * n_classes;
    let mut labels: Vec<u8> = (0..n).map(|i| (i % n_classes) as u8).collect();
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(n * size * size * 3);
    for &label in &labels {
        let phase = rng.random_range(0..4usize);
        let contrast: f64 = rng.random_range(0.25..0.5);
        let base: f64 = rng.random_range(0.35..0.65);
        let tint: [f64; 3] = [rng.random_range(0.4..1.0), rng.random_range(0.4..1.0), rng.random_range(0.4..1.0)];
        for y in 0..size {
            for x in 0..size {
                let s = if pattern(label as usize, y, x, phase) { 1.0 } else { -1.0 };
                for t in tint {
                    let v = base + s * contrast * t + noise.sample(&mut rng);
                    pixels.push(libm::round(v.clamp(0.0, 1.0) * 255.0) as u8);
                }
            }
        }
    }
    Dataset::new([size, size, 3], pixels, labels, n_classes)
}

/// Zero-padded crop at offset `(dy, dx)` inside the `pad`-padded image,
/// optionally mirrored left-right, in place on one `H x W x C` sample.
pub fn crop_flip<T: Scalar>(img: &mut [T], shape: Shape, pad: usize, dy: usize, dx: usize, flip: bool) {
    let [h, w, c] = shape;
    let src = img.to_vec();
    for y in 0..h {
        for x in 0..w {
            let sx = if flip { w - 1 - x } else { x };
            let (py, px) = ((y + dy) as i64 - pad as i64, (sx + dx) as i64 - pad as i64);
            let out = &mut img[(y * w + x) * c..(y * w + x + 1) * c];
            if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                let at = (py as usize * w + px as usize) * c;
                out.copy_from_slice(&src[at..at + c]);
            } else {
                out.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

pub const AUGMENT_PAD: usize = 4;

/// Per image: zero-pad 4 pixels, take a random crop of the original size and
/// flip horizontally with probability one half.
pub fn augment<T: Scalar, R: Rng + ?Sized>(batch: &mut Tensor<T>, rng: &mut R) {
    let s = batch.shape();
    let shape = [s[1], s[2], s[3]];
    for i in 0..batch.batch() {
        let dy = rng.random_range(0..=2 * AUGMENT_PAD);
        let dx = rng.random_range(0..=2 * AUGMENT_PAD);
        let flip = rng.random_bool(0.5);
        crop_flip(batch.sample_mut(i), shape, AUGMENT_PAD, dy, dx, flip);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synth_dataset(50, 3, 8, 7).unwrap();
        let b = synth_dataset(50, 3, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![50, 50, 50]);
        assert_ne!(a, synth_dataset(50, 3, 8, 8).unwrap());
        assert!(synth_dataset(5, 11, 8, 0).is_err());
        assert!(synth_dataset(5, 10, 8, 0).is_ok());
    }

    #[test]
    fn byte_255_reads_as_one() {
        let ds = Dataset::new([1, 1, 1], vec![255, 0], vec![0, 1], 2).unwrap();
        let t = ds.images::<f32>(&[0, 1]);
        assert_eq!(t.data(), &[1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(matches!(Dataset::new([1, 1, 1], vec![0], vec![3], 3), Err(DataError::Label { .. })));
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let spec = SplitSpec { evo_train: 60, control: 20, fitness: 20, seed: 1 };
        let [a, b, c] = split_indices(100, &spec).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, &spec).unwrap()[0], a);
        let other = split_indices(100, &SplitSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(other[0], a);
        assert!(split_indices(99, &spec).is_err());
    }

    #[test]
    fn centre_crop_without_flip_is_identity() {
        let mut img: Vec<f64> = (0..48).map(|v| v as f64 / 48.0).collect();
        let orig = img.clone();
        crop_flip(&mut img, [4, 4, 3], 4, 4, 4, false);
        assert_eq!(img, orig);
    }

    #[test]
    fn corner_crop_has_zero_band() {
        let mut img = vec![1.0f32; 8 * 8];
        crop_flip(&mut img, [8, 8, 1], 4, 0, 0, false);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(img[y * 8 + x], if y < 4 || x < 4 { 0.0 } else { 1.0 });
            }
        }
    }
}
