use super::params::{Init, ParamId, ParamStore, StatsId};
use crate::error::{ensure, Result};
use crate::tensor::{PoolKind, Tape, Var};

/// What a layer needs during a forward pass: the tape, the parameter leaves
/// (indexed like the store) and the store itself for running statistics.
pub(crate) struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a [Var],
    pub store: &'a mut ParamStore,
    pub training: bool,
}

impl Ctx<'_> {
    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    weight: ParamId,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv {
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let weight = init.conv_weight(name, [cout, cin / groups, kernel, kernel]);
        Conv { weight, stride, padding: kernel / 2, groups }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        ctx.tape.conv2d(x, w, None, self.stride, self.padding, self.groups)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    stats: StatsId,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let (gamma, beta, stats) = init.batch_norm(name, channels);
        BatchNorm { gamma, beta, stats }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        let training = ctx.training;
        ctx.tape.batch_norm2d(x, g, b, ctx.store.stats_mut(self.stats), training)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, inputs: usize, outputs: usize) -> Self {
        let (weight, bias) = init.linear(name, inputs, outputs);
        Linear { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        ctx.tape.linear(x, w, b)
    }
}

/// Conv → BN, optionally followed by ReLU.
#[derive(Clone, Debug)]
pub(crate) struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        ConvBn {
            conv: Conv::new(init, &format!("{name}.conv"), cin, cout, kernel, stride, 1),
            bn: BatchNorm::new(init, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if relu { ctx.tape.relu(y) } else { y })
    }
}

/// 1×1 projection on the skip path when shape changes.
fn shortcut(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Option<ConvBn> {
    (stride != 1 || cin != cout).then(|| ConvBn::new(init, &format!("{name}.shortcut"), cin, cout, 1, stride))
}

fn residual(ctx: &mut Ctx, skip: &Option<ConvBn>, x: Var, body: Var) -> Result<Var> {
    let s = match skip {
        Some(proj) => proj.forward(ctx, x, false)?,
        None => x,
    };
    let sum = ctx.tape.add(body, s)?;
    Ok(ctx.tape.relu(sum))
}

/// Two 3×3 conv-BN layers with a residual connection.
#[derive(Clone, Debug)]
pub(crate) struct BasicBlock {
    first: ConvBn,
    second: ConvBn,
    skip: Option<ConvBn>,
}

impl BasicBlock {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        BasicBlock {
            first: ConvBn::new(init, &format!("{name}.a"), cin, cout, 3, stride),
            second: ConvBn::new(init, &format!("{name}.b"), cout, cout, 3, 1),
            skip: shortcut(init, name, cin, cout, stride),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.first.forward(ctx, x, true)?;
        let h = self.second.forward(ctx, h, false)?;
        residual(ctx, &self.skip, x, h)
    }
}

/// One receptive-field branch: average-pool by `scale`, depthwise 3×3,
/// pointwise 1×1, BN + ReLU, nearest upsample back by `scale`.
#[derive(Clone, Debug)]
struct Branch {
    scale: usize,
    depthwise: Conv,
    pointwise: Conv,
    bn: BatchNorm,
}

/// Parallel multi-scale branches, concatenated and fused by a 1×1 conv,
/// wrapped in a residual connection.
#[derive(Clone, Debug)]
pub(crate) struct MultiScaleBlock {
    branches: Vec<Branch>,
    fuse: ConvBn,
    skip: Option<ConvBn>,
    stride: usize,
}

impl MultiScaleBlock {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize, scales: &[usize]) -> Self {
        let branches = scales
            .iter()
            .map(|&scale| {
                let bname = format!("{name}.scale{scale}");
                Branch {
                    scale,
                    depthwise: Conv::new(init, &format!("{bname}.dw"), cin, cin, 3, stride, cin),
                    pointwise: Conv::new(init, &format!("{bname}.pw"), cin, cout, 1, 1, 1),
                    bn: BatchNorm::new(init, &format!("{bname}.bn"), cout),
                }
            })
            .collect::<Vec<_>>();
        MultiScaleBlock {
            fuse: ConvBn::new(init, &format!("{name}.fuse"), cout * branches.len(), cout, 1, 1),
            branches,
            skip: shortcut(init, name, cin, cout, stride),
            stride,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        let (h, w) = (s[2], s[3]);
        let mut outs = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let unit = br.scale * self.stride;
            ensure!(
                h % unit == 0 && w % unit == 0,
                "multi-scale block: scale {} with stride {} needs sides divisible by {unit}, got {h}x{w}",
                br.scale,
                self.stride
            );
            let mut y = x;
            if br.scale > 1 {
                y = ctx.tape.pool2d(y, PoolKind::Avg, br.scale, br.scale)?;
            }
            y = br.depthwise.forward(ctx, y)?;
            y = br.pointwise.forward(ctx, y)?;
            y = br.bn.forward(ctx, y)?;
            y = ctx.tape.relu(y);
            if br.scale > 1 {
                y = ctx.tape.upsample_nearest(y, br.scale)?;
            }
            outs.push(y);
        }
        let cat = if outs.len() == 1 { outs[0] } else { ctx.tape.concat_channels(&outs)? };
        let fused = self.fuse.forward(ctx, cat, false)?;
        residual(ctx, &self.skip, x, fused)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Block {
    Basic(BasicBlock),
    MultiScale(MultiScaleBlock),
}

impl Block {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Block::Basic(b) => b.forward(ctx, x),
            Block::MultiScale(b) => b.forward(ctx, x),
        }
    }
}
