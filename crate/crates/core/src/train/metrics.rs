use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

pub const METRICS_HEADER: &str =
    "epoch,lr,l_classification,l_permutation,l_std,l_mean,l_feature,l_total,train_acc,test_acc,seconds";

/// One epoch of training. Loss terms are sample-weighted means over the
/// epoch's steps; `train_acc` is measured on the (augmented) training
/// batches as they were seen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub seconds: Option<f64>,
}

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            l.l_classification,
            field(l.l_permutation),
            field(l.l_std),
            field(l.l_mean),
            field(l.l_feature),
            l.l_total,
            self.train_acc,
            field(self.test_acc),
            field(self.seconds),
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::Contract(format!("malformed metrics row `{line}`"));
        if cols.len() != 11 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        let req = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad()) };
        Ok(MetricsRow {
            epoch: cols[0].parse().map_err(|_| bad())?,
            lr: req(cols[1])?,
            losses: LossBreakdown {
                l_classification: req(cols[2])?,
                l_permutation: opt(cols[3])?,
                l_std: opt(cols[4])?,
                l_mean: opt(cols[5])?,
                l_feature: opt(cols[6])?,
                l_total: req(cols[7])?,
            },
            train_acc: req(cols[8])?,
            test_acc: opt(cols[9])?,
            seconds: opt(cols[10])?,
        })
    }
}

pub fn render_metrics(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Contract(format!("{} lacks the metrics header", path.display())));
    }
    lines.map(MetricsRow::from_csv).collect()
}

/// Writes through a sibling temporary file and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Sample-weighted running means of the loss terms over one epoch.
#[derive(Debug, Default)]
pub(crate) struct EpochAccumulator {
    samples: usize,
    correct: usize,
    sums: [f64; 6],
    present: [bool; 4],
}

impl EpochAccumulator {
    pub fn add(&mut self, b: &LossBreakdown, batch: usize, correct: usize) {
        let w = batch as f64;
        self.samples += batch;
        self.correct += correct;
        self.sums[0] += w * b.l_classification;
        self.sums[5] += w * b.l_total;
        for (k, term) in [b.l_permutation, b.l_std, b.l_mean, b.l_feature].into_iter().enumerate() {
            if let Some(v) = term {
                self.present[k] = true;
                self.sums[k + 1] += w * v;
            }
        }
    }

    pub fn finish(&self) -> (LossBreakdown, f64) {
        let n = self.samples.max(1) as f64;
        let mean = |k: usize| self.present[k - 1].then(|| self.sums[k] / n);
        let b = LossBreakdown {
            l_classification: self.sums[0] / n,
            l_permutation: mean(1),
            l_std: mean(2),
            l_mean: mean(3),
            l_feature: mean(4),
            l_total: self.sums[5] / n,
        };
        (b, self.correct as f64 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_absent_terms() {
        let row = MetricsRow {
            epoch: 3,
            lr: 0.01,
            losses: LossBreakdown { l_classification: 1.25, l_total: 1.25, ..LossBreakdown::default() },
            train_acc: 0.5,
            test_acc: None,
            seconds: None,
        };
        let line = row.to_csv();
        assert_eq!(line, "3,0.01,1.25,,,,,1.25,0.5,,");
        assert_eq!(MetricsRow::from_csv(&line).unwrap(), row);
        assert!(MetricsRow::from_csv("1,2").is_err());
    }

    #[test]
    fn accumulator_weights_by_batch() {
        let mut acc = EpochAccumulator::default();
        let b = |v: f64| LossBreakdown {
            l_classification: v,
            l_permutation: Some(2.0 * v),
            l_total: 2.0 * v,
            ..LossBreakdown::default()
        };
        acc.add(&b(1.0), 3, 3);
        acc.add(&b(4.0), 1, 0);
        let (m, accuracy) = acc.finish();
        assert_eq!(m.l_classification, 7.0 / 4.0);
        assert_eq!(m.l_permutation, Some(3.5));
        assert_eq!(m.l_feature, None);
        assert_eq!(accuracy, 0.75);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_atomic(&p, b"a").unwrap();
        write_atomic(&p, b"b").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"b");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
