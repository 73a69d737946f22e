use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentMode;
use crate::data::{
    load_cifar10_binary, load_cifar10_dir, load_image_folder, make_mini_cifar10, make_synthetic, write_cifar10_binary,
    Dataset, Split,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::models::ModelConfig;

/// Where training and test images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Raw CIFAR-10 binaries; the training split is subsampled to
    /// `per_class` images per class and the full test batch is kept.
    MiniCifar10 {
        dir: PathBuf,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default)]
        subset_seed: u64,
    },
    /// Explicit CIFAR-format files, e.g. the output of `prepare-data`.
    CifarFiles { train: Vec<PathBuf>, test: Vec<PathBuf> },
    /// Manifest-driven PPM folder; test labels follow the training classes.
    Folder {
        root: PathBuf,
        train_manifest: PathBuf,
        test_manifest: PathBuf,
        #[serde(default = "default_side")]
        height: usize,
        #[serde(default = "default_side")]
        width: usize,
    },
    /// Generated class-structured images, for smoke runs without data.
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        height: usize,
        width: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_per_class() -> usize {
    100
}

fn default_side() -> usize {
    64
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::MiniCifar10 {
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            per_class: default_per_class(),
            subset_seed: 0,
        }
    }
}

impl DatasetConfig {
    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::MiniCifar10 { dir, per_class, subset_seed } => {
                let (train, test) = load_cifar10_dir(dir)?;
                let (mini, _) = make_mini_cifar10(&train, *per_class, *subset_seed)?;
                Ok((mini, test))
            }
            DatasetConfig::CifarFiles { train, test } => {
                Ok((load_cifar10_binary(train, Split::Train)?, load_cifar10_binary(test, Split::Test)?))
            }
            DatasetConfig::Folder { root, train_manifest, test_manifest, height, width } => {
                let train = load_image_folder(root, &root.join(train_manifest), (*height, *width), None, Split::Train)?;
                let test = load_image_folder(
                    root,
                    &root.join(test_manifest),
                    (*height, *width),
                    Some(&train.class_names),
                    Split::Test,
                )?;
                Ok((train, test))
            }
            DatasetConfig::Synthetic { classes, train_per_class, test_per_class, height, width, seed } => Ok((
                make_synthetic(*classes, *train_per_class, *height, *width, *seed, Split::Train)?,
                make_synthetic(*classes, *test_per_class, *height, *width, *seed, Split::Test)?,
            )),
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Epoch indices at which the learning rate is divided by 10.
    pub lr_drop_epochs: Vec<usize>,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub augmentation: AugmentMode,
    /// Random crop and horizontal flip; off by default.
    pub photometric: bool,
    /// Test accuracy is computed every this many epochs and after the last.
    pub eval_every: usize,
    /// When false the `seconds` column is left empty so metrics files are
    /// byte-reproducible.
    pub record_wall_clock: bool,
    pub save_checkpoints: bool,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub dataset: DatasetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr_initial: 0.1,
            lr_drop_epochs: vec![100, 140],
            total_epochs: 160,
            momentum: 0.9,
            weight_decay: 5e-4,
            master_seed: 0,
            output_dir: PathBuf::from("runs/default"),
            augmentation: AugmentMode::OnlineUniform,
            photometric: false,
            eval_every: 1,
            record_wall_clock: true,
            save_checkpoints: true,
            model: ModelConfig { permutation_head: true, ..ModelConfig::default() },
            loss: LossConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.total_epochs == 0 {
            return bad("total_epochs must be at least 1".into());
        }
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return bad(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_drop_epochs must be strictly increasing, got {:?}", self.lr_drop_epochs));
        }
        if self.lr_drop_epochs.last().is_some_and(|&e| e >= self.total_epochs) {
            return bad(format!("lr_drop_epochs {:?} must precede total_epochs {}", self.lr_drop_epochs, self.total_epochs));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if i64::try_from(self.master_seed).is_err() {
            return bad("master_seed must fit in a signed 64-bit integer".into());
        }
        self.model.validate()?;
        self.loss.validate()?;
        if self.loss.use_permutation_loss && self.augmentation == AugmentMode::IdentityOnly {
            return bad("the permutation loss needs permuted inputs; enable augmentation".into());
        }
        if self.loss.use_permutation_loss != self.model.permutation_head {
            return bad(format!(
                "model.permutation_head ({}) must match loss.use_permutation_loss ({})",
                self.model.permutation_head, self.loss.use_permutation_loss
            ));
        }
        Ok(())
    }

    /// Learning rate of `epoch`: `lr_initial · 10^−k`, `k` the number of
    /// drop epochs `≤ epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Contract(format!("epoch {epoch} is outside 0..{}", self.total_epochs)));
        }
        let drops = self.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count() as i32;
        Ok(self.lr_initial * 10f64.powi(-drops))
    }
}

/// Builds the mini-CIFAR-10 subset from raw binaries in `raw_dir` and writes
/// `mini_train.bin`, `test_batch.bin` and `mini_indices.json` to `out_dir`.
pub fn prepare_mini_cifar10(raw_dir: &Path, out_dir: &Path, per_class: usize, seed: u64) -> Result<(usize, usize)> {
    let (train, test) = load_cifar10_dir(raw_dir)?;
    let (mini, indices) = make_mini_cifar10(&train, per_class, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_cifar10_binary(&out_dir.join("mini_train.bin"), &mini)?;
    write_cifar10_binary(&out_dir.join("test_batch.bin"), &test)?;
    let meta = serde_json::json!({ "seed": seed, "per_class": per_class, "source_indices": indices });
    let path = out_dir.join("mini_indices.json");
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("json value")).map_err(|e| Error::io(&path, e))?;
    Ok((mini.len(), test.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at_epoch(0).unwrap(), 0.1);
        assert_eq!(c.lr_at_epoch(99).unwrap(), 0.1);
        assert!((c.lr_at_epoch(100).unwrap() - 0.01).abs() < 1e-15);
        assert!((c.lr_at_epoch(139).unwrap() - 0.01).abs() < 1e-15);
        assert!((c.lr_at_epoch(140).unwrap() - 0.001).abs() < 1e-15);
        assert!(c.lr_at_epoch(160).is_err());
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.total_epochs, c.lr_drop_epochs.clone()), (64, 160, vec![100, 140]));
        assert_eq!((c.momentum, c.weight_decay), (0.9, 5e-4));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig {
            dataset: DatasetConfig::Synthetic {
                classes: 3,
                train_per_class: 2,
                test_per_class: 1,
                height: 8,
                width: 8,
                seed: 4,
            },
            ..TrainConfig::default()
        };
        let text = c.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);

        let partial = "total_epochs = 40\nlr_drop_epochs = [25, 35]\n[model]\nvariant = \"improved\"\npermutation_head = true\n[dataset]\nkind = \"mini_cifar10\"\ndir = \"/data/cifar\"\n";
        let p = TrainConfig::from_toml_str(partial).unwrap();
        assert_eq!(p.total_epochs, 40);
        assert_eq!(p.batch_size, 64);
        assert_eq!(p.model.variant, crate::models::Variant::Improved);
        assert!(matches!(p.dataset, DatasetConfig::MiniCifar10 { per_class: 100, .. }));

        assert!(TrainConfig::from_toml_str("batch_sise = 3").is_err());
    }

    #[test]
    fn validation_rules() {
        let ok = TrainConfig::default();
        let cases = [
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { lr_drop_epochs: vec![140, 100], ..ok.clone() },
            TrainConfig { lr_drop_epochs: vec![100, 160], ..ok.clone() },
            TrainConfig { augmentation: AugmentMode::IdentityOnly, ..ok.clone() },
            TrainConfig { model: ModelConfig::default(), ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
