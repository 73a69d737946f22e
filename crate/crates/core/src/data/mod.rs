//! Datasets: CIFAR-10 binaries, the seeded mini-CIFAR-10 subset, manifest
//! driven PPM folders, normalization statistics and batch assembly.

mod batch;
mod cifar;
mod folder;
mod synthetic;

pub use batch::{batches, denormalize, Batch, BatchIter, BatchOptions};
pub use cifar::{
    load_cifar10_binary, load_cifar10_dir, make_mini_cifar10, write_cifar10_binary,
    CIFAR10_CLASSES, CIFAR_RECORD_BYTES, CIFAR_SIDE,
};
pub use folder::{load_image_folder, read_ppm, resize_nearest, write_ppm};
pub use synthetic::make_synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// 8-bit RGB images stored channel-major (`[3,H,W]` each), all the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Vec<u8>>,
    pub class_labels: Vec<usize>,
    /// Present when permutations were applied offline.
    pub perm_labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn empty(class_names: Vec<String>, split: Split, height: usize, width: usize) -> Self {
        Dataset {
            images: Vec::new(),
            class_labels: Vec::new(),
            perm_labels: None,
            class_names,
            split,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.images.len() == self.class_labels.len(), "image and label counts differ");
        if let Some(p) = &self.perm_labels {
            ensure!(p.len() == self.images.len(), "perm label count differs from image count");
        }
        let numel = 3 * self.height * self.width;
        ensure!(self.images.iter().all(|i| i.len() == numel), "images must all be 3x{}x{}", self.height, self.width);
        ensure!(
            self.class_labels.iter().all(|&l| l < self.class_names.len()),
            "class label out of range for {} classes",
            self.class_names.len()
        );
        Ok(())
    }

    /// A dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            class_labels: indices.iter().map(|&i| self.class_labels[i]).collect(),
            perm_labels: self.perm_labels.as_ref().map(|p| indices.iter().map(|&i| p[i]).collect()),
            class_names: self.class_names.clone(),
            split: self.split,
            height: self.height,
            width: self.width,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for &l in &self.class_labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per-channel mean and standard deviation of pixels scaled to `[0,1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

const STD_FLOOR: f64 = 1e-6;

impl NormalizationStats {
    pub fn identity() -> Self {
        NormalizationStats { mean: [0.0; 3], std: [1.0; 3] }
    }
}

pub fn compute_normalization(train: &Dataset) -> Result<NormalizationStats> {
    ensure!(!train.is_empty(), "cannot compute normalization of an empty dataset");
    let plane = train.height * train.width;
    let count = (train.len() * plane) as f64;
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    for image in &train.images {
        for c in 0..3 {
            for &p in &image[c * plane..(c + 1) * plane] {
                let v = p as f64 / 255.0;
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
    }
    let mut stats = NormalizationStats::identity();
    for c in 0..3 {
        let mean = sum[c] / count;
        let var = (sum_sq[c] / count - mean * mean).max(0.0);
        stats.mean[c] = mean;
        stats.std[c] = var.sqrt().max(STD_FLOOR);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(images: Vec<Vec<u8>>, h: usize, w: usize) -> Dataset {
        let n = images.len();
        Dataset {
            images,
            class_labels: vec![0; n],
            perm_labels: None,
            class_names: vec!["a".into()],
            split: Split::Train,
            height: h,
            width: w,
        }
    }

    #[test]
    fn zeros_have_floored_std() {
        let s = compute_normalization(&dataset(vec![vec![0; 12]; 3], 2, 2)).unwrap();
        assert_eq!(s.mean, [0.0; 3]);
        assert_eq!(s.std, [STD_FLOOR; 3]);
    }

    #[test]
    fn saturated_mean_is_one() {
        let s = compute_normalization(&dataset(vec![vec![255; 12]; 2], 2, 2)).unwrap();
        for c in 0..3 {
            assert!((s.mean[c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_two_pass_oracle() {
        let a: Vec<u8> = (0..12).map(|v| (v * 21) as u8).collect();
        let b: Vec<u8> = (0..12).map(|v| (250 - v * 13) as u8).collect();
        let ds = dataset(vec![a.clone(), b.clone()], 2, 2);
        let s = compute_normalization(&ds).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> =
                [&a, &b].iter().flat_map(|img| img[c * 4..c * 4 + 4].iter().map(|&p| p as f64 / 255.0)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((s.mean[c] - mean).abs() < 1e-9);
            assert!((s.std[c] - var.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_is_an_error() {
        assert!(compute_normalization(&dataset(Vec::new(), 2, 2)).is_err());
    }
}
