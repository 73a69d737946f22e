use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split};
use crate::error::{ensure, Result};
use crate::rng::{self, Purpose};

/// Side of the coarse per-class colour template that is upsampled to the
/// image size.
const TEMPLATE: usize = 4;

/// A class-structured stand-in for real photographs: every class owns a
/// coarse random colour template, and each image is that template
/// upsampled, shifted in brightness and corrupted with pixel noise.
///
/// Templates depend only on `seed`, so train and test splits built with the
/// same seed share classes while their noise draws differ.
pub fn make_synthetic(
    num_classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    ensure!(num_classes >= 1, "need at least one class");
    ensure!(
        height >= TEMPLATE && width >= TEMPLATE && height % 2 == 0 && width % 2 == 0,
        "synthetic images must be even-sided and at least {TEMPLATE}x{TEMPLATE}, got {height}x{width}"
    );
    let mut template_rng = rng::stream(seed, Purpose::Synthetic, 0);
    let templates: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..3 * TEMPLATE * TEMPLATE).map(|_| template_rng.random_range(30.0..225.0)).collect())
        .collect();

    let names = (0..num_classes).map(|k| format!("class{k}")).collect();
    let mut ds = Dataset::empty(names, split, height, width);
    let mut rng = rng::stream(seed, Purpose::Synthetic, 1 + split as u64);
    let noise = Normal::new(0.0, 24.0).expect("positive std");
    for i in 0..num_classes * per_class {
        let class = i % num_classes;
        let shift = rng.random_range(-20.0..20.0);
        let t = &templates[class];
        let mut image = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                let ty = y * TEMPLATE / height;
                for x in 0..width {
                    let tx = x * TEMPLATE / width;
                    let v = t[(c * TEMPLATE + ty) * TEMPLATE + tx] + shift + noise.sample(&mut rng);
                    image.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        ds.images.push(image);
        ds.class_labels.push(class);
    }
    Ok(ds)
}
