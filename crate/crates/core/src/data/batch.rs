use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, NormalizationStats};
use crate::augment::{draw_permutation, permute_quadrants, AugmentMode};
use crate::error::{ensure, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle: bool,
    pub shuffle_seed: u64,
    pub augmentation: AugmentMode,
    pub epoch: u64,
    /// Random 4-pixel-padded crop and horizontal flip before permutation.
    pub photometric: bool,
    pub normalization: NormalizationStats,
}

impl BatchOptions {
    /// Unshuffled, unaugmented batches for evaluation.
    pub fn eval(batch_size: usize, normalization: NormalizationStats) -> Self {
        BatchOptions {
            batch_size,
            shuffle: false,
            shuffle_seed: 0,
            augmentation: AugmentMode::IdentityOnly,
            epoch: 0,
            photometric: false,
            normalization,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B,3,H,W]`, normalized.
    pub images: Tensor,
    pub class_labels: Vec<usize>,
    pub perm_labels: Vec<usize>,
    /// Dataset index of each sample.
    pub indices: Vec<usize>,
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    opts: BatchOptions,
    order: Vec<usize>,
    pos: usize,
    augment_rng: ChaCha8Rng,
    photometric_rng: ChaCha8Rng,
}

/// Batches of one epoch. The order (when shuffled) and every random draw
/// depend only on `(shuffle_seed, epoch)`; the last batch may be short.
pub fn batches<'a>(dataset: &'a Dataset, opts: &BatchOptions) -> Result<BatchIter<'a>> {
    ensure!(opts.batch_size >= 1, "batch size must be at least 1");
    dataset.validate()?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if opts.shuffle {
        order.shuffle(&mut rng::stream(opts.shuffle_seed, Purpose::Shuffle, opts.epoch));
    }
    Ok(BatchIter {
        dataset,
        opts: opts.clone(),
        order,
        pos: 0,
        augment_rng: rng::stream(opts.shuffle_seed, Purpose::Augment, opts.epoch),
        photometric_rng: rng::stream(opts.shuffle_seed, Purpose::Photometric, opts.epoch),
    })
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.opts.batch_size)
    }

    fn prepare(&mut self, index: usize, out: &mut Vec<f64>) -> usize {
        let ds = self.dataset;
        let (h, w) = (ds.height, ds.width);
        let mut pixels = ds.images[index].clone();
        if self.opts.photometric {
            pixels = crop_and_flip(&pixels, h, w, &mut self.photometric_rng);
        }
        let perm_label = match &ds.perm_labels {
            Some(labels) => labels[index],
            None => {
                let perm = draw_permutation(&mut self.augment_rng, self.opts.augmentation);
                if perm.index() != 0 {
                    pixels = permute_quadrants(&pixels, 3, h, w, &perm).expect("dataset validated even");
                }
                perm.index()
            }
        };
        let stats = &self.opts.normalization;
        let plane = h * w;
        for c in 0..3 {
            let (m, s) = (stats.mean[c], stats.std[c]);
            out.extend(pixels[c * plane..(c + 1) * plane].iter().map(|&p| (p as f64 / 255.0 - m) / s));
        }
        perm_label
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.opts.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (h, w) = (self.dataset.height, self.dataset.width);
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut perm_labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            perm_labels.push(self.prepare(i, &mut data));
        }
        let class_labels = indices.iter().map(|&i| self.dataset.class_labels[i]).collect();
        let images = Tensor::from_vec(&[indices.len(), 3, h, w], data, false).expect("sizes agree");
        Some(Batch { images, class_labels, perm_labels, indices })
    }
}

const CROP_PAD: usize = 4;

fn crop_and_flip(pixels: &[u8], h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let dy = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let dx = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let flip = rng.random_bool(0.5);
    let mut out = vec![0u8; pixels.len()];
    for c in 0..3 {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xs = if flip { w - 1 - x } else { x } as isize + dx;
                if xs >= 0 && xs < w as isize {
                    out[(c * h + y) * w + x] = pixels[(c * h + sy as usize) * w + xs as usize];
                }
            }
        }
    }
    out
}

/// Maps normalized values back to `[0,1]` pixel scale.
pub fn denormalize(images: &Tensor, stats: &NormalizationStats) -> Vec<f64> {
    let s = images.shape();
    let plane = s[2] * s[3];
    images
        .data()
        .chunks(plane)
        .enumerate()
        .flat_map(|(i, p)| {
            let c = i % 3;
            p.iter().map(move |v| v * stats.std[c] + stats.mean[c])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn dataset(n: usize) -> Dataset {
        Dataset {
            images: (0..n).map(|i| (0..48).map(|p| ((p * 3 + i * 17) % 256) as u8).collect()).collect(),
            class_labels: (0..n).map(|i| i % 10).collect(),
            perm_labels: None,
            class_names: (0..10).map(|c| c.to_string()).collect(),
            split: Split::Train,
            height: 4,
            width: 4,
        }
    }

    fn opts(batch: usize, epoch: u64, mode: AugmentMode) -> BatchOptions {
        BatchOptions {
            batch_size: batch,
            shuffle: true,
            shuffle_seed: 42,
            augmentation: mode,
            epoch,
            photometric: false,
            normalization: NormalizationStats { mean: [0.5, 0.4, 0.3], std: [0.2, 0.25, 0.3] },
        }
    }

    #[test]
    fn batch_count_and_short_tail() {
        let ds = dataset(1000);
        let sizes: Vec<usize> =
            batches(&ds, &opts(64, 0, AugmentMode::IdentityOnly)).unwrap().map(|b| b.class_labels.len()).collect();
        assert_eq!(sizes.len(), 16);
        assert_eq!(*sizes.last().unwrap(), 40);
    }

    #[test]
    fn seeded_epoch_order() {
        let ds = dataset(100);
        let order = |epoch| {
            batches(&ds, &opts(10, epoch, AugmentMode::OnlineUniform))
                .unwrap()
                .flat_map(|b| b.indices)
                .collect::<Vec<_>>()
        };
        assert_eq!(order(0), order(0));
        assert_ne!(order(0), order(1));
        let mut cover = order(3);
        cover.sort();
        assert_eq!(cover, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn identity_mode_labels_zero() {
        let ds = dataset(30);
        for b in batches(&ds, &opts(8, 0, AugmentMode::IdentityOnly)).unwrap() {
            assert!(b.perm_labels.iter().all(|&p| p == 0));
        }
        let mixed: Vec<usize> =
            batches(&ds, &opts(8, 0, AugmentMode::OnlineUniform)).unwrap().flat_map(|b| b.perm_labels).collect();
        assert!(mixed.iter().any(|&p| p != 0));
    }

    #[test]
    fn denormalize_recovers_pixels() {
        let ds = dataset(5);
        let o = opts(5, 0, AugmentMode::IdentityOnly);
        let b = batches(&ds, &o).unwrap().next().unwrap();
        let back = denormalize(&b.images, &o.normalization);
        for (k, &i) in b.indices.iter().enumerate() {
            for (j, &p) in ds.images[i].iter().enumerate() {
                assert!((back[k * 48 + j] - p as f64 / 255.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn photometric_keeps_shapes() {
        let ds = dataset(6);
        let mut o = opts(3, 0, AugmentMode::IdentityOnly);
        o.photometric = true;
        let all: Vec<Batch> = batches(&ds, &o).unwrap().collect();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].images.shape(), &[3, 3, 4, 4]);
    }

    #[test]
    fn rejects_zero_batch() {
        assert!(batches(&dataset(3), &opts(0, 0, AugmentMode::IdentityOnly)).is_err());
    }
}
