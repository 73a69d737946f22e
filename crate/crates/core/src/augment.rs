//! Patch-permutation augmentation: cut an image into a 2×2 grid, reorder the
//! quadrants under one of the 4! orderings and keep the ordering's index as
//! an auxiliary label.
//!
//! Quadrants are numbered left to right, top to bottom: 0 top-left,
//! 1 top-right, 2 bottom-left, 3 bottom-right. A permutation's `mapping[slot]`
//! names the source quadrant placed at `slot`, and its index is the
//! lexicographic rank of `mapping`, so index 0 is the identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub const NUM_PERMUTATIONS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchPermutation {
    index: usize,
    mapping: [usize; 4],
}

impl PatchPermutation {
    pub fn identity() -> Self {
        PatchPermutation { index: 0, mapping: [0, 1, 2, 3] }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        ensure!(index < NUM_PERMUTATIONS, "permutation index {index} out of range 0..24");
        // Lehmer code: digit k picks among the quadrants not yet used.
        let mut pool = vec![0, 1, 2, 3];
        let mut rest = index;
        let mut mapping = [0; 4];
        for (slot, radix) in [6, 2, 1, 1].into_iter().enumerate() {
            mapping[slot] = pool.remove(rest / radix);
            rest %= radix;
        }
        Ok(PatchPermutation { index, mapping })
    }

    pub fn from_mapping(mapping: [usize; 4]) -> Result<Self> {
        let mut seen = [false; 4];
        for &m in &mapping {
            ensure!(m < 4 && !seen[m], "{mapping:?} is not a permutation of 0..4");
            seen[m] = true;
        }
        let index = mapping
            .iter()
            .enumerate()
            .map(|(slot, &m)| {
                let smaller_later = mapping[slot + 1..].iter().filter(|&&x| x < m).count();
                smaller_later * [6, 2, 1, 1][slot]
            })
            .sum();
        Ok(PatchPermutation { index, mapping })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn mapping(&self) -> [usize; 4] {
        self.mapping
    }

    /// The permutation equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &PatchPermutation) -> PatchPermutation {
        let mapping = next.mapping.map(|s| self.mapping[s]);
        PatchPermutation::from_mapping(mapping).expect("composition of bijections")
    }
}

/// All 24 orderings in lexicographic order of their mapping.
pub fn enumerate_permutations() -> Vec<PatchPermutation> {
    (0..NUM_PERMUTATIONS).map(|i| PatchPermutation::from_index(i).expect("index in range")).collect()
}

pub fn inverse_of(perm: &PatchPermutation) -> PatchPermutation {
    let mut inverse = [0; 4];
    for (slot, &src) in perm.mapping.iter().enumerate() {
        inverse[src] = slot;
    }
    PatchPermutation::from_mapping(inverse).expect("inverse of a bijection")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutedSample {
    pub image: Tensor,
    pub class_label: usize,
    pub perm_label: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// A fresh uniformly drawn permutation per sample per epoch.
    #[default]
    OnlineUniform,
    /// Always the identity; evaluation and augmentation-off training.
    IdentityOnly,
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    ensure!(s.len() == 3, "image must be [C,H,W], got {s:?}");
    Ok((s[0], s[1], s[2]))
}

fn check_even(height: usize, width: usize) -> Result<()> {
    ensure!(
        height % 2 == 0 && width % 2 == 0,
        "image is {height}x{width}; patch permutation needs even sides (resize upstream)"
    );
    Ok(())
}

/// Reorders the quadrants of a `[C,H,W]` buffer: output slot `s` receives
/// source quadrant `mapping[s]`.
pub fn permute_quadrants<T: Copy>(
    data: &[T],
    channels: usize,
    height: usize,
    width: usize,
    perm: &PatchPermutation,
) -> Result<Vec<T>> {
    check_even(height, width)?;
    ensure!(data.len() == channels * height * width, "buffer does not hold a {channels}x{height}x{width} image");
    let (ph, pw) = (height / 2, width / 2);
    let mut out = data.to_vec();
    for (slot, &src) in perm.mapping.iter().enumerate() {
        let (dy, dx) = ((slot / 2) * ph, (slot % 2) * pw);
        let (sy, sx) = ((src / 2) * ph, (src % 2) * pw);
        for c in 0..channels {
            for y in 0..ph {
                let from = (c * height + sy + y) * width + sx;
                let to = (c * height + dy + y) * width + dx;
                out[to..to + pw].copy_from_slice(&data[from..from + pw]);
            }
        }
    }
    Ok(out)
}

/// The four quadrants of a `[C,H,W]` image, each `[C,H/2,W/2]`.
pub fn split_into_patches(image: &Tensor) -> Result<[Tensor; 4]> {
    let (c, h, w) = image_dims(image)?;
    check_even(h, w)?;
    let (ph, pw) = (h / 2, w / 2);
    let patch = |q: usize| {
        let (oy, ox) = ((q / 2) * ph, (q % 2) * pw);
        let mut data = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            for y in 0..ph {
                let row = (ch * h + oy + y) * w + ox;
                data.extend_from_slice(&image.data()[row..row + pw]);
            }
        }
        Tensor::from_vec(&[c, ph, pw], data, false)
    };
    Ok([patch(0)?, patch(1)?, patch(2)?, patch(3)?])
}

pub fn apply_permutation(
    image: &Tensor,
    perm: &PatchPermutation,
    class_label: usize,
) -> Result<PermutedSample> {
    let (c, h, w) = image_dims(image)?;
    let data = permute_quadrants(image.data(), c, h, w, perm)?;
    Ok(PermutedSample {
        image: Tensor::from_vec(&[c, h, w], data, false)?,
        class_label,
        perm_label: perm.index,
    })
}

pub fn draw_permutation<R: Rng + ?Sized>(rng: &mut R, mode: AugmentMode) -> PatchPermutation {
    match mode {
        AugmentMode::OnlineUniform => {
            PatchPermutation::from_index(rng.random_range(0..NUM_PERMUTATIONS)).expect("index in range")
        }
        AugmentMode::IdentityOnly => PatchPermutation::identity(),
    }
}

pub fn augment_sample<R: Rng + ?Sized>(
    image: &Tensor,
    class_label: usize,
    rng: &mut R,
    mode: AugmentMode,
) -> Result<PermutedSample> {
    let perm = draw_permutation(rng, mode);
    apply_permutation(image, &perm, class_label)
}

/// Every image under all 24 permutations, grouped by source image; perm
/// labels are stored alongside the class labels.
pub fn expand_dataset_offline(dataset: &Dataset) -> Result<Dataset> {
    check_even(dataset.height, dataset.width)?;
    let perms = enumerate_permutations();
    let n = dataset.len() * NUM_PERMUTATIONS;
    let mut images = Vec::with_capacity(n);
    let mut class_labels = Vec::with_capacity(n);
    let mut perm_labels = Vec::with_capacity(n);
    for (image, &label) in dataset.images.iter().zip(&dataset.class_labels) {
        for perm in &perms {
            images.push(permute_quadrants(image, 3, dataset.height, dataset.width, perm)?);
            class_labels.push(label);
            perm_labels.push(perm.index);
        }
    }
    Ok(Dataset {
        images,
        class_labels,
        perm_labels: Some(perm_labels),
        class_names: dataset.class_names.clone(),
        split: dataset.split,
        height: dataset.height,
        width: dataset.width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Every ordering of 0..4 by brute force, sorted lexicographically.
    fn all_orderings() -> Vec<[usize; 4]> {
        let mut out = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let m = [a, b, c, d];
                        let mut s = m;
                        s.sort();
                        if s == [0, 1, 2, 3] {
                            out.push(m);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn enumeration_matches_brute_force() {
        let perms = enumerate_permutations();
        assert_eq!(perms.len(), 24);
        let want = all_orderings();
        for (i, p) in perms.iter().enumerate() {
            assert_eq!(p.index(), i);
            assert_eq!(p.mapping(), want[i]);
            assert_eq!(PatchPermutation::from_mapping(p.mapping()).unwrap(), *p);
        }
        assert_eq!(perms[0].mapping(), [0, 1, 2, 3]);
        assert_eq!(perms[23].mapping(), [3, 2, 1, 0]);
    }

    #[test]
    fn inverse_examples() {
        let id = PatchPermutation::identity();
        assert_eq!(inverse_of(&id), id);
        let t = PatchPermutation::from_mapping([1, 0, 2, 3]).unwrap();
        assert_eq!(inverse_of(&t).mapping(), [1, 0, 2, 3]);
        let r = PatchPermutation::from_mapping([1, 2, 3, 0]).unwrap();
        let inv = inverse_of(&r);
        assert_eq!(inv.mapping(), [3, 0, 1, 2]);
        for s in 0..4 {
            assert_eq!(inv.mapping()[r.mapping()[s]], s);
        }
    }

    #[test]
    fn rejects_non_bijection() {
        assert!(PatchPermutation::from_mapping([0, 0, 1, 2]).is_err());
        assert!(PatchPermutation::from_mapping([0, 1, 2, 4]).is_err());
        assert!(PatchPermutation::from_index(24).is_err());
    }

    #[test]
    fn split_quadrants() {
        let img = Tensor::new(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0], false).unwrap();
        let p = split_into_patches(&img).unwrap();
        for (q, want) in p.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert_eq!(q.data(), &[want]);
        }
        let big = Tensor::zeros(&[3, 32, 32]);
        for q in split_into_patches(&big).unwrap() {
            assert_eq!(q.shape(), &[3, 16, 16]);
        }
        assert!(split_into_patches(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn reversal_assembles_slot_by_slot() {
        let img = Tensor::new(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0], false).unwrap();
        let rev = PatchPermutation::from_mapping([3, 2, 1, 0]).unwrap();
        let out = apply_permutation(&img, &rev, 7).unwrap();
        assert_eq!(out.image.data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(out.perm_label, 23);
        assert_eq!(out.class_label, 7);
    }

    #[test]
    fn identity_is_bit_exact() {
        let data: Vec<f64> = (0..48).map(|v| v as f64 * 0.37).collect();
        let img = Tensor::new(&[3, 4, 4], &data, false).unwrap();
        let out = apply_permutation(&img, &PatchPermutation::identity(), 2).unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.perm_label, 0);
    }

    #[test]
    fn identity_only_always_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::zeros(&[3, 4, 4]);
        for _ in 0..50 {
            let s = augment_sample(&img, 1, &mut rng, AugmentMode::IdentityOnly).unwrap();
            assert_eq!(s.perm_label, 0);
        }
    }

    #[test]
    fn online_uniform_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 24];
        for _ in 0..24_000 {
            counts[draw_permutation(&mut rng, AugmentMode::OnlineUniform).index()] += 1;
        }
        for c in counts {
            assert!((850..=1150).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| draw_permutation(&mut rng, AugmentMode::OnlineUniform).index()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }
}
