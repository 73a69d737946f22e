use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{ensure, Result};
use crate::tensor::{RunningStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    /// Batch-norm affine parameters are exempt from weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatsId(pub(crate) usize);

/// Trainable tensors plus batch-norm running statistics, both addressed by
/// stable names for checkpointing.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub(crate) fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0].1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub(crate) fn add(&mut self, name: String, kind: ParamKind, tensor: Tensor) -> ParamId {
        self.params.push(Param { name, kind, tensor });
        ParamId(self.params.len() - 1)
    }

    pub(crate) fn add_stats(&mut self, name: String, channels: usize) -> StatsId {
        self.stats.push((name, RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    /// Records every parameter on `tape` as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor.clone().with_grad(requires_grad))).collect()
    }

    /// Every tensor worth persisting: parameters, then running means and
    /// variances.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.params.iter().map(|p| (p.name.clone(), p.tensor.clone().with_grad(false))).collect();
        for (name, s) in &self.stats {
            let c = s.mean.len();
            out.push((format!("{name}.running_mean"), Tensor::new(&[c], &s.mean, false).expect("1-d")));
            out.push((format!("{name}.running_var"), Tensor::new(&[c], &s.var, false).expect("1-d")));
        }
        out
    }

    /// Overwrites the tensor called `name`; its shape must match.
    pub fn assign(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        if let Some(p) = self.params.iter_mut().find(|p| p.name == name) {
            ensure!(p.tensor.shape() == tensor.shape(), "{name}: shape {:?} vs {:?}", p.tensor.shape(), tensor.shape());
            p.tensor = tensor.clone().with_grad(false);
            return Ok(());
        }
        for (base, s) in &mut self.stats {
            let slot = if name.strip_suffix(".running_mean") == Some(base.as_str()) {
                &mut s.mean
            } else if name.strip_suffix(".running_var") == Some(base.as_str()) {
                &mut s.var
            } else {
                continue;
            };
            ensure!(tensor.shape() == [slot.len()], "{name}: shape {:?} vs [{}]", tensor.shape(), slot.len());
            slot.copy_from_slice(tensor.data());
            return Ok(());
        }
        Err(crate::Error::Checkpoint(format!("unknown tensor name `{name}`")))
    }
}

/// Allocates and initializes parameters while a model is assembled.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Kaiming-normal weights scaled by fan-out (`Cout·kh·kw`).
    pub fn conv_weight(&mut self, name: &str, shape: [usize; 4]) -> ParamId {
        let fan_out = (shape[0] * shape[2] * shape[3]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("positive std");
        let data: Vec<f64> = (0..shape.iter().product()).map(|_| normal.sample(self.rng)).collect();
        let t = Tensor::from_vec(&shape, data, false).expect("sizes agree");
        self.store.add(format!("{name}.weight"), ParamKind::Weight, t)
    }

    /// Uniform in `±1/sqrt(fan_in)` for weight and bias.
    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> (ParamId, ParamId) {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid range");
        let w: Vec<f64> = (0..inputs * outputs).map(|_| dist.sample(self.rng)).collect();
        let b: Vec<f64> = (0..outputs).map(|_| dist.sample(self.rng)).collect();
        let w = self.store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::from_vec(&[outputs, inputs], w, false).expect("sizes agree"),
        );
        let b = self.store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            Tensor::from_vec(&[outputs], b, false).expect("sizes agree"),
        );
        (w, b)
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> (ParamId, ParamId, StatsId) {
        let g = self.store.add(format!("{name}.gamma"), ParamKind::BnScale, Tensor::full(&[channels], 1.0));
        let b = self.store.add(format!("{name}.beta"), ParamKind::BnShift, Tensor::zeros(&[channels]));
        let s = self.store.add_stats(name.to_string(), channels);
        (g, b, s)
    }
}
