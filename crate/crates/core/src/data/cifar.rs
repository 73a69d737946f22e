use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;

use super::{Dataset, Split};
use crate::error::{ensure, Error, Result};
use crate::rng::{self, Purpose};

pub const CIFAR_SIDE: usize = 32;
/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

pub const CIFAR10_CLASSES: [&str; 10] =
    ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
const TEST_FILE: &str = "test_batch.bin";

fn class_names() -> Vec<String> {
    CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect()
}

fn parse_records(path: &Path, bytes: &[u8], out: &mut Dataset) -> Result<()> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record", bytes.len()),
        });
    }
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR10_CLASSES.len() {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                reason: format!("record {i} has label {label}"),
            });
        }
        out.class_labels.push(label);
        out.images.push(record[1..].to_vec());
    }
    Ok(())
}

/// Concatenates the records of every file in `paths`.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset> {
    let mut out = Dataset::empty(class_names(), split, CIFAR_SIDE, CIFAR_SIDE);
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_records(path, &bytes, &mut out)?;
    }
    Ok(out)
}

/// The five training batches and the test batch of the binary distribution.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<PathBuf> = TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    let train = load_cifar10_binary(&train, Split::Train)?;
    let test = load_cifar10_binary(&[dir.join(TEST_FILE)], Split::Test)?;
    Ok((train, test))
}

pub fn write_cifar10_binary(path: &Path, dataset: &Dataset) -> Result<()> {
    ensure!(
        dataset.height == CIFAR_SIDE && dataset.width == CIFAR_SIDE,
        "CIFAR records hold 32x32 images, dataset is {}x{}",
        dataset.height,
        dataset.width
    );
    dataset.validate()?;
    let mut bytes = Vec::with_capacity(dataset.len() * CIFAR_RECORD_BYTES);
    for (image, &label) in dataset.images.iter().zip(&dataset.class_labels) {
        ensure!(label < 256, "label {label} does not fit a byte");
        bytes.push(label as u8);
        bytes.extend_from_slice(image);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Draws `per_class` samples of every class without replacement. Returns
/// the subset (grouped by class) and the source indices it was built from.
pub fn make_mini_cifar10(train: &Dataset, per_class: usize, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    let mut by_class = vec![Vec::new(); train.num_classes()];
    for (i, &l) in train.class_labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng::stream(seed, Purpose::Subset, 0);
    let mut chosen = Vec::with_capacity(per_class * by_class.len());
    for (class, members) in by_class.iter().enumerate() {
        ensure!(
            members.len() >= per_class,
            "class {class} has {} images, {per_class} requested",
            members.len()
        );
        chosen.extend(sample(&mut rng, members.len(), per_class).into_iter().map(|k| members[k]));
    }
    Ok((train.subset(&chosen), chosen))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize) -> Dataset {
        let mut ds = Dataset::empty(class_names(), Split::Train, 32, 32);
        for i in 0..n {
            ds.images.push((0..3072).map(|p| ((p * 7 + i * 13) % 256) as u8).collect());
            ds.class_labels.push(i % 10);
        }
        ds
    }

    #[test]
    fn two_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.bin");
        write_cifar10_binary(&path, &synthetic(2)).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 2 * 3073);
        assert_eq!(load_cifar10_binary(&[&path], Split::Train).unwrap().len(), 2);
    }

    #[test]
    fn red_plane_record() {
        // hand-assembled record in the published layout
        let mut record = vec![3u8];
        record.extend(std::iter::repeat_n(255u8, 1024));
        record.extend(std::iter::repeat_n(0u8, 2048));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        fs::write(&path, &record).unwrap();
        let ds = load_cifar10_binary(&[&path], Split::Test).unwrap();
        assert_eq!(ds.class_labels, vec![3]);
        assert!(ds.images[0][..1024].iter().all(|&p| p == 255));
        assert!(ds.images[0][1024..].iter().all(|&p| p == 0));
    }

    #[test]
    fn corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let short = dir.path().join("short.bin");
        fs::write(&short, vec![0u8; 3072]).unwrap();
        assert!(matches!(load_cifar10_binary(&[&short], Split::Train), Err(Error::CorruptFile { .. })));
        let bad = dir.path().join("bad.bin");
        let mut rec = vec![0u8; 3073];
        rec[0] = 10;
        fs::write(&bad, rec).unwrap();
        assert!(matches!(load_cifar10_binary(&[&bad], Split::Train), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn mini_subset_is_balanced_and_seeded() {
        let ds = synthetic(200);
        let (mini, idx) = make_mini_cifar10(&ds, 5, 11).unwrap();
        assert_eq!(mini.len(), 50);
        assert_eq!(mini.class_counts(), vec![5; 10]);
        let (_, again) = make_mini_cifar10(&ds, 5, 11).unwrap();
        assert_eq!(idx, again);
        let (_, other) = make_mini_cifar10(&ds, 5, 12).unwrap();
        assert_ne!(idx, other);
    }

    #[test]
    fn full_class_draw_is_a_permutation() {
        let ds = synthetic(100);
        let (_, idx) = make_mini_cifar10(&ds, 10, 3).unwrap();
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert!(make_mini_cifar10(&ds, 11, 3).is_err());
    }
}
