//! Feature-extraction losses on a tapped activation `X [B,C,H,W]` and the
//! combined training objective.
//!
//! Both feature terms reduce per sample, map through `e^{−·}` and then
//! average over the batch, so they are bounded in `(0, 1]` for
//! non-negative inputs.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Tape, Unary, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub use_permutation_loss: bool,
    pub use_feature_loss: bool,
    pub permutation_weight: f64,
    pub feature_weight: f64,
    /// Weight of the std term inside the feature loss; the mean term gets
    /// `1 − std_mean_mix`.
    pub std_mean_mix: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            use_permutation_loss: true,
            use_feature_loss: true,
            permutation_weight: 0.5,
            feature_weight: 1.0,
            std_mean_mix: 0.5,
        }
    }
}

impl LossConfig {
    /// Classification only.
    pub fn baseline() -> Self {
        LossConfig { use_permutation_loss: false, use_feature_loss: false, ..LossConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [("permutation_weight", self.permutation_weight), ("feature_weight", self.feature_weight)];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.std_mean_mix) {
            return Err(Error::Config(format!("std_mean_mix must lie in [0, 1], got {}", self.std_mean_mix)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_classification: f64,
    pub l_permutation: Option<f64>,
    pub l_std: Option<f64>,
    pub l_mean: Option<f64>,
    pub l_feature: Option<f64>,
    pub l_total: f64,
}

impl LossBreakdown {
    /// `l_total` rebuilt from the individual terms.
    pub fn recompute_total(&self, config: &LossConfig) -> f64 {
        self.l_classification
            + self.l_permutation.map_or(0.0, |p| config.permutation_weight * p)
            + self.l_feature.map_or(0.0, |f| config.feature_weight * f)
    }

    pub fn is_finite(&self) -> bool {
        [Some(self.l_classification), self.l_permutation, self.l_std, self.l_mean, self.l_feature, Some(self.l_total)]
            .into_iter()
            .flatten()
            .all(f64::is_finite)
    }
}

fn check_rank4(tape: &Tape, x: Var) -> Result<[usize; 4]> {
    let s = tape.shape(x);
    ensure!(s.len() == 4, "expected a [B,C,H,W] tensor, got {s:?}");
    Ok([s[0], s[1], s[2], s[3]])
}

/// Spatial average: `[B,C,H,W] → [B,C]`.
pub fn channel_means(tape: &mut Tape, x: Var) -> Result<Var> {
    let [_, _, h, w] = check_rank4(tape, x)?;
    ensure!(h * w >= 1, "channel_means needs a non-empty spatial extent");
    tape.reduce_mean(x, &[2, 3])
}

/// Batch mean of `e^{−σ_b}`, with `σ_b` the population standard deviation
/// of sample `b`'s channel means.
pub fn loss_std(tape: &mut Tape, x: Var) -> Result<Var> {
    let [b, c, _, _] = check_rank4(tape, x)?;
    ensure!(c >= 2, "loss_std needs at least two channels, got {c}");
    let y = channel_means(tape, x)?;
    let mu = tape.reduce_mean(y, &[1])?;
    let mu = tape.reshape(mu, &[b, 1])?;
    let mu = tape.broadcast_to(mu, &[b, c])?;
    let d = tape.sub(y, mu)?;
    let sq = tape.mul(d, d)?;
    let var = tape.reduce_mean(sq, &[1])?;
    let std = tape.elementwise(var, Unary::SqrtEps)?;
    let e = tape.negate(std);
    let e = tape.exp(e);
    tape.reduce_mean(e, &[0])
}

/// Batch mean of `e^{−m_b}`, with `m_b` the mean activation of sample `b`.
pub fn loss_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    check_rank4(tape, x)?;
    let m = tape.reduce_mean(x, &[1, 2, 3])?;
    let e = tape.negate(m);
    let e = tape.exp(e);
    tape.reduce_mean(e, &[0])
}

/// `0.5·(loss_std + loss_mean)`.
pub fn loss_feature(tape: &mut Tape, x: Var) -> Result<Var> {
    Ok(feature_terms(tape, x, 0.5)?.2)
}

/// Returns `(l_std, l_mean, mix·l_std + (1−mix)·l_mean)`.
fn feature_terms(tape: &mut Tape, x: Var, mix: f64) -> Result<(Var, Var, Var)> {
    let s = loss_std(tape, x)?;
    let m = loss_mean(tape, x)?;
    let ws = tape.scale(s, mix);
    let wm = tape.scale(m, 1.0 - mix);
    let f = tape.add(ws, wm)?;
    Ok((s, m, f))
}

/// Inputs to the auxiliary permutation term.
#[derive(Clone, Copy, Debug)]
pub struct PermutationTargets<'a> {
    pub logits: Var,
    pub labels: &'a [usize],
}

/// Builds the training objective on `tape` and returns its scalar node
/// together with the per-term values.
///
/// Permutation targets must be supplied exactly when the permutation loss is
/// enabled; features are required when the feature loss is enabled.
pub fn total_loss(
    tape: &mut Tape,
    class_logits: Var,
    class_labels: &[usize],
    permutation: Option<PermutationTargets>,
    tapped_features: Option<Var>,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    config.validate()?;
    ensure!(
        permutation.is_some() == config.use_permutation_loss,
        "permutation logits and labels must be given exactly when the permutation loss is enabled"
    );
    let cls = tape.softmax_cross_entropy(class_logits, class_labels)?;
    let mut breakdown = LossBreakdown { l_classification: tape.item(cls), ..LossBreakdown::default() };
    let mut total = cls;

    if let Some(p) = permutation {
        let perm = tape.softmax_cross_entropy(p.logits, p.labels)?;
        breakdown.l_permutation = Some(tape.item(perm));
        let weighted = tape.scale(perm, config.permutation_weight);
        total = tape.add(total, weighted)?;
    }
    if config.use_feature_loss {
        let Some(x) = tapped_features else {
            return Err(Error::Contract("feature loss enabled but no tapped features given".into()));
        };
        let (s, m, f) = feature_terms(tape, x, config.std_mean_mix)?;
        breakdown.l_std = Some(tape.item(s));
        breakdown.l_mean = Some(tape.item(m));
        breakdown.l_feature = Some(tape.item(f));
        let weighted = tape.scale(f, config.feature_weight);
        total = tape.add(total, weighted)?;
    }
    breakdown.l_total = tape.item(total);
    Ok((total, breakdown))
}
