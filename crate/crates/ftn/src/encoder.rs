//! The pyramid group transformer encoder: four stages, each a patch
//! transform (4x4 embedding at stage 1, 2x2 merges after) followed by
//! pre-norm transformer blocks whose attention is grouped on a spatial
//! grid that coarsens with depth — local receptive fields early, global
//! at strides 16 and 32.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionSpec, GroupAttention};
use crate::error::{Error, Result};
use crate::nn::{scoped, Init, LayerNorm, Linear, Mlp, ParamFn, Peg};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const STAGES: usize = 4;
/// Token-reduction side per stage; fixed by the architecture.
pub const PATCH_SIDES: [usize; STAGES] = [4, 2, 2, 2];
/// Spatial stride of each stage output relative to the input image.
pub const STAGE_STRIDES: [usize; STAGES] = [4, 8, 16, 32];
/// Per-head channel width of the published variants.
pub const VARIANT_HEAD_DIM: usize = 32;
/// Group schedule of the published variants.
pub const VARIANT_GROUPS: [usize; STAGES] = [64, 16, 1, 1];
/// MLP expansion of the published variants.
pub const VARIANT_MLP_RATIO: usize = 4;

/// Per-stage hyperparameters of one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PGTConfig {
    /// Token dimension per stage; doubles stage over stage.
    pub dims: [usize; STAGES],
    /// Block count per stage.
    pub depths: [usize; STAGES],
    /// Attention group count per stage (perfect squares).
    pub groups: [usize; STAGES],
    /// Head count per stage.
    pub heads: [usize; STAGES],
    /// MLP expansion ratio per stage.
    pub mlp_ratios: [usize; STAGES],
    /// Stochastic depth rate, used only when training with an RNG. 0 by
    /// default; retained as a knob, not exercised by the toy loop.
    #[serde(default)]
    pub drop_path: f64,
}

/// Published encoder sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    T,
    S,
    B,
    L,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::T, Variant::S, Variant::B, Variant::L];

    pub fn name(self) -> &'static str {
        match self {
            Variant::T => "T",
            Variant::S => "S",
            Variant::B => "B",
            Variant::L => "L",
        }
    }

    /// Reported (encoder, GFLOPs) budgets: millions of parameters and
    /// GMACs at 224x224.
    pub fn budget(self) -> (f64, f64) {
        match self {
            Variant::T => (13e6, 2.1e9),
            Variant::S => (28e6, 4.6e9),
            Variant::B => (50e6, 9.1e9),
            Variant::L => (88e6, 15.9e9),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T" => Ok(Variant::T),
            "S" => Ok(Variant::S),
            "B" => Ok(Variant::B),
            "L" => Ok(Variant::L),
            other => Err(Error::parameter(
                "variant",
                format!("unknown variant {other:?}, expected one of T, S, B, L"),
            )),
        }
    }
}

/// Spatial extent and channel width of one stage output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl StageShape {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

impl PGTConfig {
    /// Standard-form config: channel doubling from `c1`, head dim 32,
    /// groups 64-16-1-1, MLP ratio 4.
    pub fn standard(c1: usize, depths: [usize; STAGES]) -> Result<Self> {
        if c1 % VARIANT_HEAD_DIM != 0 {
            return Err(Error::Config(format!(
                "stage-1 dim {c1} is not a multiple of the head dim {VARIANT_HEAD_DIM}"
            )));
        }
        let dims = [c1, 2 * c1, 4 * c1, 8 * c1];
        let heads = dims.map(|d| d / VARIANT_HEAD_DIM);
        let cfg = PGTConfig {
            dims,
            depths,
            groups: VARIANT_GROUPS,
            heads,
            mlp_ratios: [VARIANT_MLP_RATIO; STAGES],
            drop_path: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Arbitrary (test-scale) config; still checked against the
    /// structural invariants that are not variant-specific.
    pub fn custom(
        c1: usize,
        depths: [usize; STAGES],
        groups: [usize; STAGES],
        heads: [usize; STAGES],
    ) -> Result<Self> {
        let cfg = PGTConfig {
            dims: [c1, 2 * c1, 4 * c1, 8 * c1],
            depths,
            groups,
            heads,
            mlp_ratios: [VARIANT_MLP_RATIO; STAGES],
            drop_path: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The frozen published configuration for a variant. Depths and base
    /// widths follow sibling-backbone sizing and are pinned by the
    /// parameter-budget search in [`crate::analysis::derive_variants`].
    pub fn variant(v: Variant) -> Self {
        let (c1, depths) = match v {
            Variant::T => (64, [2, 2, 6, 2]),
            Variant::S => (96, [2, 2, 6, 2]),
            Variant::B => (96, [2, 2, 18, 2]),
            Variant::L => (128, [2, 2, 18, 2]),
        };
        Self::standard(c1, depths).expect("frozen variants satisfy all invariants")
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..STAGES {
            if self.dims[i] != self.dims[0] << i {
                return Err(Error::Config(format!(
                    "dims {:?} break channel doubling at stage {}",
                    self.dims,
                    i + 1
                )));
            }
            if self.depths[i] == 0 {
                return Err(Error::Config(format!("stage {} has zero blocks", i + 1)));
            }
            if self.heads[i] == 0 || self.dims[i] % self.heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {}: {} heads do not divide dim {}",
                    i + 1,
                    self.heads[i],
                    self.dims[i]
                )));
            }
            if crate::attention::exact_sqrt(self.groups[i]).is_none() {
                return Err(Error::Config(format!(
                    "stage {}: group count {} is not a perfect square",
                    i + 1,
                    self.groups[i]
                )));
            }
            if self.mlp_ratios[i] == 0 {
                return Err(Error::Config(format!("stage {}: zero MLP ratio", i + 1)));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!(
                "drop_path {} outside [0, 1)",
                self.drop_path
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self, stage: usize) -> usize {
        self.dims[stage] / self.heads[stage]
    }

    /// Stage output shapes for an input extent; checks that every stage's
    /// patch transform and attention grid tile exactly, naming the first
    /// offending stage otherwise.
    pub fn stage_shapes(&self, height: usize, width: usize) -> Result<[StageShape; STAGES]> {
        let mut shapes = [StageShape {
            height: 0,
            width: 0,
            dim: 0,
        }; STAGES];
        let (mut h, mut w) = (height, width);
        for i in 0..STAGES {
            let p = PATCH_SIDES[i];
            if h % p != 0 || w % p != 0 {
                return Err(Error::layout(format!(
                    "stage {}: patch side {p} does not tile {h} x {w} (input {height} x {width})",
                    i + 1
                )));
            }
            h /= p;
            w /= p;
            let side = crate::attention::exact_sqrt(self.groups[i]).expect("validated");
            if h % side != 0 || w % side != 0 {
                return Err(Error::layout(format!(
                    "stage {}: grid side {side} (G={}) does not tile {h} x {w} (input {height} x {width})",
                    i + 1,
                    self.groups[i]
                )));
            }
            shapes[i] = StageShape {
                height: h,
                width: w,
                dim: self.dims[i],
            };
        }
        Ok(shapes)
    }
}

/// Stage-1 patch transform: each non-overlapping 4x4 pixel patch is
/// flattened and linearly projected, then layer-normalized.
#[derive(Debug, Clone)]
pub struct PatchEmbed<T> {
    pub proj: Linear<T>,
    pub norm: LayerNorm<T>,
    pub patch: usize,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(init: &mut Init, patch: usize, in_chans: usize, dim: usize) -> Self {
        PatchEmbed {
            proj: Linear::new(init, patch * patch * in_chans, dim, true),
            norm: LayerNorm::new(init, dim),
            patch,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let patches = tape.space_to_depth(x, self.patch)?;
        let projected = self.proj.forward(tape, &patches)?;
        self.norm.forward(tape, &projected)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.proj.visit_params(&scoped(prefix, "proj"), f);
        self.norm.visit_params(&scoped(prefix, "norm"), f);
    }
}

/// Patch merge for stages 2-4: concatenates each 2x2 neighborhood,
/// layer-normalizes the 4C vector, and projects it to 2C.
#[derive(Debug, Clone)]
pub struct PatchMerge<T> {
    pub norm: LayerNorm<T>,
    pub proj: Linear<T>,
}

impl<T: Scalar> PatchMerge<T> {
    pub fn new(init: &mut Init, in_dim: usize) -> Self {
        PatchMerge {
            norm: LayerNorm::new(init, 4 * in_dim),
            proj: Linear::new(init, 4 * in_dim, 2 * in_dim, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cells = tape.space_to_depth(x, 2)?;
        let normed = self.norm.forward(tape, &cells)?;
        self.proj.forward(tape, &normed)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.norm.visit_params(&scoped(prefix, "norm"), f);
        self.proj.visit_params(&scoped(prefix, "proj"), f);
    }
}

/// One pre-norm transformer block: `x + Attn(LN(x))` then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct PgtBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: GroupAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub drop_path: f64,
}

impl<T: Scalar> PgtBlock<T> {
    pub fn new(
        init: &mut Init,
        dim: usize,
        heads: usize,
        groups: usize,
        mlp_ratio: usize,
        drop_path: f64,
    ) -> Result<Self> {
        let spec = AttentionSpec::new(heads, dim / heads, groups, true)?;
        Ok(PgtBlock {
            norm1: LayerNorm::new(init, dim),
            attn: GroupAttention::new(init, spec),
            norm2: LayerNorm::new(init, dim),
            mlp: Mlp::new(init, dim, mlp_ratio),
            drop_path,
        })
    }

    /// Residual branch with optional stochastic depth: dropped branches
    /// vanish, kept ones are rescaled by 1/(1-rate).
    fn residual(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        branch: Tensor<T>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>> {
        if self.drop_path > 0.0 {
            if let Some(rng) = rng.as_deref_mut() {
                if rng.gen_range(0.0..1.0) < self.drop_path {
                    return Ok(x.clone());
                }
                let kept = tape.scale(&branch, T::from_f64(1.0 / (1.0 - self.drop_path)))?;
                return tape.add(x, &kept);
            }
        }
        tape.add(x, &branch)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>> {
        let normed = self.norm1.forward(tape, x)?;
        let attended = self.attn.forward(tape, &normed)?;
        let x = self.residual(tape, x, attended, &mut rng)?;
        let normed = self.norm2.forward(tape, &x)?;
        let expanded = self.mlp.forward(tape, &normed)?;
        self.residual(tape, &x, expanded, &mut rng)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.norm1.visit_params(&scoped(prefix, "norm1"), f);
        self.attn.visit_params(&scoped(prefix, "attn"), f);
        self.norm2.visit_params(&scoped(prefix, "norm2"), f);
        self.mlp.visit_params(&scoped(prefix, "mlp"), f);
    }
}

#[derive(Debug, Clone)]
pub enum PatchTransform<T> {
    Embed(PatchEmbed<T>),
    Merge(PatchMerge<T>),
}

/// One resolution level: patch transform, blocks, and a position encoding
/// generator applied once after the first block.
#[derive(Debug, Clone)]
pub struct PgtStage<T> {
    pub transform: PatchTransform<T>,
    pub blocks: Vec<PgtBlock<T>>,
    pub peg: Peg<T>,
}

impl<T: Scalar> PgtStage<T> {
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>> {
        let mut x = match &self.transform {
            PatchTransform::Embed(e) => e.forward(tape, x)?,
            PatchTransform::Merge(m) => m.forward(tape, x)?,
        };
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, &x, rng.as_deref_mut())?;
            if i == 0 {
                x = self.peg.forward(tape, &x)?;
            }
        }
        Ok(x)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        match &mut self.transform {
            PatchTransform::Embed(e) => e.visit_params(&scoped(prefix, "embed"), f),
            PatchTransform::Merge(m) => m.visit_params(&scoped(prefix, "merge"), f),
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&format!("{}.block{i}", prefix), f);
        }
        self.peg.visit_params(&scoped(prefix, "peg"), f);
    }
}

/// The four stage outputs with strides 4, 8, 16, 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T> {
    pub stages: [Tensor<T>; STAGES],
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn strides() -> [usize; STAGES] {
        STAGE_STRIDES
    }
}

/// The full encoder.
#[derive(Debug, Clone)]
pub struct PgtEncoder<T> {
    pub config: PGTConfig,
    pub stages: Vec<PgtStage<T>>,
    pub in_chans: usize,
}

impl<T: Scalar> PgtEncoder<T> {
    pub fn new(init: &mut Init, config: &PGTConfig, in_chans: usize) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let transform = if i == 0 {
                PatchTransform::Embed(PatchEmbed::new(init, PATCH_SIDES[0], in_chans, config.dims[0]))
            } else {
                PatchTransform::Merge(PatchMerge::new(init, config.dims[i - 1]))
            };
            let blocks = (0..config.depths[i])
                .map(|_| {
                    PgtBlock::new(
                        init,
                        config.dims[i],
                        config.heads[i],
                        config.groups[i],
                        config.mlp_ratios[i],
                        config.drop_path,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(PgtStage {
                transform,
                blocks,
                peg: Peg::new(init, config.dims[i]),
            });
        }
        Ok(PgtEncoder {
            config: config.clone(),
            stages,
            in_chans,
        })
    }

    /// Runs all four stages on `[B, H, W, in_chans]`, returning every
    /// stage output. Pass an RNG only when training with stochastic depth.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        img: &Tensor<T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FeaturePyramid<T>> {
        let s = img.shape();
        if s.len() != 4 || s[3] != self.in_chans {
            return Err(Error::dimension(
                "run_encoder",
                format!("expected [B, H, W, {}], got {s:?}", self.in_chans),
            ));
        }
        // Validate the whole geometry up front so errors name the stage.
        self.config.stage_shapes(s[1], s[2])?;
        let mut x = img.clone();
        let mut outputs = Vec::with_capacity(STAGES);
        for stage in &self.stages {
            x = stage.forward(tape, &x, rng.as_deref_mut())?;
            outputs.push(x.clone());
        }
        let stages: [Tensor<T>; STAGES] = outputs.try_into().expect("four stages");
        Ok(FeaturePyramid { stages })
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit_params(&format!("{}stage{}", prefix_dot(prefix), i + 1), f);
        }
    }
}

fn prefix_dot(prefix: &str) -> String {
    if prefix.is_empty() {
        String::new()
    } else {
        format!("{prefix}.")
    }
}

/// Pretraining-style head: global average over stage-4 tokens (no class
/// token) followed by a linear classifier.
#[derive(Debug, Clone)]
pub struct ClassificationHead<T> {
    pub linear: Linear<T>,
}

impl<T: Scalar> ClassificationHead<T> {
    pub fn new(init: &mut Init, dim: usize, num_classes: usize) -> Self {
        ClassificationHead {
            linear: Linear::new(init, dim, num_classes, true),
        }
    }

    /// `[B, H, W, C] -> [B, num_classes]`.
    pub fn forward(&self, tape: &mut Tape<T>, f4: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = tape.mean_over(f4, &[1, 2])?;
        self.linear.forward(tape, &pooled)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.linear.visit_params(&scoped(prefix, "linear"), f);
    }
}

/// Zeroes every parameter reachable from `visit`, leaving norm gains at
/// zero too. Used by tests to isolate wiring.
pub fn zero_params<T: Scalar>(visit: impl FnOnce(&mut ParamFn<T>)) {
    visit(&mut |_name, t| {
        *t = Tensor::param(vec![T::zero(); t.numel()], t.shape()).unwrap();
    });
}
