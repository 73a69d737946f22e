//! ResNet18 baseline, its multi-scale variant and the optional permutation
//! recognition head.
//!
//! Both variants share the same skeleton: a stem, four stages of two blocks
//! (widths `w, 2w, 4w, 8w`, stride 2 on entry to stages 2–4), global average
//! pooling and a linear classifier. The improved variant swaps every block
//! of stages 2–4 for a [`MultiScaleBlock`](blocks::MultiScaleBlock).

mod blocks;
mod params;

pub use params::{Param, ParamKind, ParamStore};

use serde::{Deserialize, Serialize};

use crate::augment::NUM_PERMUTATIONS;
use crate::error::{ensure, Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{PoolKind, Tape, Tensor, Var};
use blocks::{BasicBlock, Block, ConvBn, Ctx, Linear, MultiScaleBlock};
use params::Init;

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Improved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stem {
    /// 3×3 stride-1 convolution, no max-pool; for 32×32 inputs.
    SmallInput,
    /// 7×7 stride-2 convolution and a 3×3 stride-2 max-pool.
    LargeInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub stem: Stem,
    pub permutation_head: bool,
    pub feature_tap_stage: usize,
    pub multiscale_scales: Vec<usize>,
    /// Channel width of stage 1; later stages double it. 64 is standard.
    pub base_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Baseline,
            num_classes: 10,
            stem: Stem::SmallInput,
            permutation_head: false,
            feature_tap_stage: 3,
            multiscale_scales: vec![1, 2, 4],
            base_width: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(1..=NUM_STAGES).contains(&self.feature_tap_stage) {
            return bad(format!("feature_tap_stage must be 1..=4, got {}", self.feature_tap_stage));
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        let mut scales = self.multiscale_scales.clone();
        scales.sort_unstable();
        scales.dedup();
        if scales.is_empty() || scales[0] == 0 || scales.len() != self.multiscale_scales.len() {
            return bad(format!("multiscale_scales must be distinct positive integers, got {:?}", self.multiscale_scales));
        }
        Ok(())
    }

    pub fn stage_widths(&self) -> [usize; NUM_STAGES] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }
}

#[derive(Clone, Debug)]
enum StemLayers {
    Small(ConvBn),
    Large(ConvBn),
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub class_logits: Var,
    pub perm_logits: Option<Var>,
    /// Post-activation output of the configured tap stage.
    pub tapped_features: Var,
    /// Post-activation output of stages 1..=4.
    pub stage_outputs: [Var; NUM_STAGES],
}

/// Materialized outputs of an evaluation forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub class_logits: Tensor,
    pub perm_logits: Option<Tensor>,
    pub tapped_features: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    stem: StemLayers,
    stages: Vec<Vec<Block>>,
    class_head: Linear,
    perm_head: Option<Linear>,
}

/// Builds whichever variant `config` names, with all weights drawn from
/// `seed`. The permutation head, when enabled, is drawn from its own stream
/// so the backbone and classifier do not depend on its presence.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let widths = config.stage_widths();
    let mut store = ParamStore::default();
    let mut rng = rng::stream(seed, Purpose::Init, 0);
    let mut init = Init { store: &mut store, rng: &mut rng };

    let stem = match config.stem {
        Stem::SmallInput => StemLayers::Small(ConvBn::new(&mut init, "stem", 3, widths[0], 3, 1)),
        Stem::LargeInput => StemLayers::Large(ConvBn::new(&mut init, "stem", 3, widths[0], 7, 2)),
    };
    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut cin = widths[0];
    for (s, &cout) in widths.iter().enumerate() {
        let mut blocks = Vec::with_capacity(2);
        for b in 0..2 {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let name = format!("stage{}.block{b}", s + 1);
            let block = if config.variant == Variant::Improved && s > 0 {
                Block::MultiScale(MultiScaleBlock::new(&mut init, &name, cin, cout, stride, &config.multiscale_scales))
            } else {
                Block::Basic(BasicBlock::new(&mut init, &name, cin, cout, stride))
            };
            blocks.push(block);
            cin = cout;
        }
        stages.push(blocks);
    }
    let class_head = Linear::new(&mut init, "class_head", cin, config.num_classes);
    let mut model = Model {
        config: ModelConfig { permutation_head: false, ..config.clone() },
        seed,
        store,
        stem,
        stages,
        class_head,
        perm_head: None,
    };
    if config.permutation_head {
        model = attach_permutation_head(model);
    }
    Ok(model)
}

pub fn build_resnet18(config: &ModelConfig, seed: u64) -> Result<Model> {
    ensure!(config.variant == Variant::Baseline, "build_resnet18 builds the baseline variant");
    build_model(config, seed)
}

pub fn build_improved_resnet18(config: &ModelConfig, seed: u64) -> Result<Model> {
    ensure!(config.variant == Variant::Improved, "build_improved_resnet18 builds the improved variant");
    build_model(config, seed)
}

/// Adds a 24-way head on the pooled final-stage features, sharing the
/// backbone with the classifier. No-op if the head already exists.
pub fn attach_permutation_head(mut model: Model) -> Model {
    if model.perm_head.is_none() {
        let features = model.config.stage_widths()[NUM_STAGES - 1];
        let mut rng = rng::stream(model.seed, Purpose::Init, 1);
        let mut init = Init { store: &mut model.store, rng: &mut rng };
        model.perm_head = Some(Linear::new(&mut init, "perm_head", features, NUM_PERMUTATIONS));
        model.config.permutation_head = true;
    }
    model
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Element count of all trainable tensors; running statistics excluded.
    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn has_permutation_head(&self) -> bool {
        self.perm_head.is_some()
    }

    /// Binds the parameters to `tape` and runs the network.
    pub fn forward(&mut self, tape: &mut Tape, input: Var, training: bool) -> Result<(Vec<Var>, ForwardVars)> {
        let vars = self.store.bind(tape, training);
        let out = self.forward_with(tape, &vars, input, training)?;
        Ok((vars, out))
    }

    /// Runs the network on caller-supplied parameter leaves, one per store
    /// entry in store order.
    pub fn forward_with(&mut self, tape: &mut Tape, vars: &[Var], input: Var, training: bool) -> Result<ForwardVars> {
        ensure!(vars.len() == self.store.len(), "{} parameter leaves for {} parameters", vars.len(), self.store.len());
        let s = tape.shape(input);
        ensure!(s.len() == 4 && s[1] == 3, "model input must be [B,3,H,W], got {s:?}");
        ensure!(s[0] >= 1, "empty batch");
        let Model { store, stem, stages, class_head, perm_head, config, .. } = self;
        let mut ctx = Ctx { tape, vars, store, training };

        let mut x = match stem {
            StemLayers::Small(c) => c.forward(&mut ctx, input, true)?,
            StemLayers::Large(c) => {
                let y = c.forward(&mut ctx, input, true)?;
                // zero padding is neutral for a max over non-negative values
                let y = ctx.tape.pad2d(y, 1)?;
                ctx.tape.pool2d(y, PoolKind::Max, 3, 2)?
            }
        };
        let mut outs = Vec::with_capacity(NUM_STAGES);
        for stage in stages.iter() {
            for block in stage {
                x = block.forward(&mut ctx, x)?;
            }
            outs.push(x);
        }
        let pooled = ctx.tape.reduce_mean(x, &[2, 3])?;
        let class_logits = class_head.forward(&mut ctx, pooled)?;
        let perm_logits = match perm_head {
            Some(head) => Some(head.forward(&mut ctx, pooled)?),
            None => None,
        };
        let stage_outputs: [Var; NUM_STAGES] = outs.try_into().expect("four stages");
        Ok(ForwardVars {
            class_logits,
            perm_logits,
            tapped_features: stage_outputs[config.feature_tap_stage - 1],
            stage_outputs,
        })
    }

    /// Evaluation-mode forward pass on a `[B,3,H,W]` batch.
    pub fn infer(&mut self, images: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let (_, out) = self.forward(&mut tape, x, false)?;
        Ok(ForwardOutput {
            class_logits: tape.tensor(out.class_logits),
            perm_logits: out.perm_logits.map(|v| tape.tensor(v)),
            tapped_features: tape.tensor(out.tapped_features),
        })
    }

    /// Post-activation output of `stage` (1..=4) in evaluation mode.
    pub fn extract_feature_maps(&mut self, image: &Tensor, stage: usize) -> Result<Tensor> {
        ensure!((1..=NUM_STAGES).contains(&stage), "stage must be 1..=4, got {stage}");
        let mut tape = Tape::new();
        let x = tape.constant(image);
        let (_, out) = self.forward(&mut tape, x, false)?;
        Ok(tape.tensor(out.stage_outputs[stage - 1]))
    }
}
