use std::fs;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::metrics::write_atomic;
use super::train_on;
use crate::augment::AugmentMode;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Variant;

/// One combination of model variant and training options.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub augmentation: bool,
    pub permutation_loss: bool,
    pub feature_loss: bool,
}

impl AblationCell {
    pub fn name(&self) -> String {
        let v = match self.variant {
            Variant::Baseline => "baseline",
            Variant::Improved => "improved",
        };
        let on = |b: bool| if b { "on" } else { "off" };
        format!(
            "{v}-aug_{}-perm_{}-feat_{}",
            on(self.augmentation),
            on(self.permutation_loss),
            on(self.feature_loss)
        )
    }
}

/// Every valid cell of {variant} × {augmentation} × {permutation loss} ×
/// {feature loss}. The permutation loss needs permuted inputs, so it only
/// appears with augmentation on: 6 cells per variant.
pub fn ablation_cells() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for variant in [Variant::Baseline, Variant::Improved] {
        for augmentation in [false, true] {
            for permutation_loss in [false, true] {
                if permutation_loss && !augmentation {
                    continue;
                }
                for feature_loss in [false, true] {
                    cells.push(AblationCell { variant, augmentation, permutation_loss, feature_loss });
                }
            }
        }
    }
    cells
}

/// `base` specialized to `cell`, writing under `base.output_dir/<cell name>`.
pub fn cell_config(base: &TrainConfig, cell: &AblationCell) -> TrainConfig {
    let mut c = base.clone();
    c.model.variant = cell.variant;
    c.model.permutation_head = cell.permutation_loss;
    c.augmentation = if cell.augmentation { AugmentMode::OnlineUniform } else { AugmentMode::IdentityOnly };
    c.loss.use_permutation_loss = cell.permutation_loss;
    c.loss.use_feature_loss = cell.feature_loss;
    c.output_dir = base.output_dir.join(cell.name());
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// First 16 hex digits of the SHA-256 of the cell's TOML config.
    pub config_hash: String,
    pub param_count: Option<usize>,
    pub final_test_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    /// `ok`, or the error that stopped the cell.
    pub status: String,
}

const SUMMARY_HEADER: &str =
    "cell,variant,augmentation,permutation_loss,feature_loss,config_hash,param_count,final_test_acc,best_test_acc,status";

impl AblationRow {
    fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.cell.name(),
            format!("{:?}", self.cell.variant).to_lowercase(),
            self.cell.augmentation,
            self.cell.permutation_loss,
            self.cell.feature_loss,
            self.config_hash,
            self.param_count.map(|p| p.to_string()).unwrap_or_default(),
            opt(self.final_test_acc),
            opt(self.best_test_acc),
            self.status.replace([',', '\n'], ";"),
        )
    }
}

fn config_hash(config: &TrainConfig) -> Result<String> {
    let text = config.to_toml_string()?;
    Ok(Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Runs every cell on the configured datasets; see [`run_ablation_on`].
pub fn run_ablation(base: &TrainConfig) -> Result<Vec<AblationRow>> {
    let (train, test) = base.dataset.load()?;
    run_ablation_on(base, &train, &test)
}

/// Trains every cell with the same seed and data and writes
/// `ablation_summary.csv` (rewritten after each cell) under
/// `base.output_dir`. A failing cell is recorded and the rest still run.
pub fn run_ablation_on(base: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(&base.output_dir).map_err(|e| Error::io(&base.output_dir, e))?;
    let summary = base.output_dir.join("ablation_summary.csv");
    let mut rows = Vec::new();
    for cell in ablation_cells() {
        let config = cell_config(base, &cell);
        let config_hash = config_hash(&config)?;
        let row = match train_on(&config, train, test) {
            Ok(outcome) => AblationRow {
                cell,
                config_hash,
                param_count: Some(outcome.report.param_count),
                final_test_acc: outcome.report.final_metrics.test_acc,
                best_test_acc: outcome.report.best_test_acc,
                status: "ok".into(),
            },
            Err(e) => AblationRow {
                cell,
                config_hash,
                param_count: None,
                final_test_acc: None,
                best_test_acc: None,
                status: e.to_string(),
            },
        };
        rows.push(row);
        let mut text = format!("{SUMMARY_HEADER}\n");
        for r in &rows {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        write_atomic(&summary, text.as_bytes())?;
    }
    Ok(rows)
}
