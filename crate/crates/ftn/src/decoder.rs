//! The feature pyramid transformer decoder. Stage outputs are projected
//! to a common width, aggregated top-down (upsample the semantically
//! stronger map, add the spatially finer one), then each level is
//! progressively refined by spatial-reduction transformer blocks and
//! bilinear upsampling until it reaches stride 4. The four stride-4 maps
//! are fused and a linear head plus 4x upsampling produces per-pixel
//! logits.

use serde::{Deserialize, Serialize};

use crate::attention::SpatialReductionAttention;
use crate::encoder::{FeaturePyramid, PGTConfig, StageShape, STAGES, STAGE_STRIDES};
use crate::error::{Error, Result};
use crate::nn::{scoped, Init, LayerNorm, Linear, Mlp, ParamFn};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Strides at which refinement blocks run, coarsest first.
pub const REFINE_STRIDES: [usize; 3] = [32, 16, 8];
/// MLP expansion inside decoder blocks.
pub const DECODER_MLP_RATIO: usize = 4;
/// Per-head width the decoder aims for; small test dims fall back to one
/// head.
pub const DECODER_HEAD_DIM: usize = 32;
/// Weight of each auxiliary branch loss during training.
pub const AUX_LOSS_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Sum,
    Concat,
}

/// Decoder hyperparameters. The defaults are the ablation winner: depth
/// 1-1-1 over strides 32/16/8, embedding dim 512, reduction ratios 2-2-2,
/// sum fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FPTConfig {
    pub embed_dim: usize,
    /// Block depth at strides [32, 16, 8].
    pub depths: [usize; 3],
    /// Key/value spatial reduction ratio at strides [32, 16, 8].
    pub sr_ratios: [usize; 3],
    pub fusion: FusionMode,
    pub num_classes: usize,
}

impl FPTConfig {
    pub fn new(num_classes: usize) -> Self {
        FPTConfig {
            embed_dim: 512,
            depths: [1, 1, 1],
            sr_ratios: [2, 2, 2],
            fusion: FusionMode::Sum,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("decoder embed_dim must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.sr_ratios.iter().any(|&r| r < 1) {
            return Err(Error::Config("sr_ratios must be >= 1".into()));
        }
        if self.embed_dim % self.heads() != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible into {} heads",
                self.embed_dim,
                self.heads()
            )));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        (self.embed_dim / DECODER_HEAD_DIM).max(1)
    }
}

impl Default for FPTConfig {
    fn default() -> Self {
        Self::new(60)
    }
}

/// Per-stage projection into the decoder width: linear then layer norm.
#[derive(Debug, Clone)]
pub struct Lateral<T> {
    pub proj: Linear<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Scalar> Lateral<T> {
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize) -> Self {
        Lateral {
            proj: Linear::new(init, in_dim, out_dim, true),
            norm: LayerNorm::new(init, out_dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let projected = self.proj.forward(tape, x)?;
        self.norm.forward(tape, &projected)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.proj.visit_params(&scoped(prefix, "proj"), f);
        self.norm.visit_params(&scoped(prefix, "norm"), f);
    }
}

/// Upsamples the coarser map by two and adds the finer lateral.
pub fn top_down_merge<T: Scalar>(
    tape: &mut Tape<T>,
    coarser: &Tensor<T>,
    finer: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (cs, fs) = (coarser.shape(), finer.shape());
    if cs.len() != 4 || fs.len() != 4 || cs[3] != fs[3] {
        return Err(Error::dimension(
            "top_down_merge",
            format!("{cs:?} vs {fs:?}"),
        ));
    }
    if fs[1] != 2 * cs[1] || fs[2] != 2 * cs[2] {
        return Err(Error::layout(format!(
            "top-down extents not related by 2x: coarser {cs:?} vs finer {fs:?}"
        )));
    }
    let up = tape.bilinear_upsample(coarser, 2)?;
    tape.add(&up, finer)
}

/// Pre-norm transformer block with spatial-reduction attention.
#[derive(Debug, Clone)]
pub struct DecoderBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: SpatialReductionAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> DecoderBlock<T> {
    pub fn new(init: &mut Init, dim: usize, heads: usize, ratio: usize) -> Result<Self> {
        Ok(DecoderBlock {
            norm1: LayerNorm::new(init, dim),
            attn: SpatialReductionAttention::new(init, heads, dim / heads, true, ratio)?,
            norm2: LayerNorm::new(init, dim),
            mlp: Mlp::new(init, dim, DECODER_MLP_RATIO),
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let normed = self.norm1.forward(tape, x)?;
        let attended = self.attn.forward(tape, &normed)?;
        let x = tape.add(x, &attended)?;
        let normed = self.norm2.forward(tape, &x)?;
        let s = x.shape().to_vec();
        let flat = tape.reshape(&normed, &[s[0], s[1] * s[2], s[3]])?;
        let expanded = self.mlp.forward(tape, &flat)?;
        let expanded = tape.reshape(&expanded, &s)?;
        tape.add(&x, &expanded)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.norm1.visit_params(&scoped(prefix, "norm1"), f);
        self.attn.visit_params(&scoped(prefix, "attn"), f);
        self.norm2.visit_params(&scoped(prefix, "norm2"), f);
        self.mlp.visit_params(&scoped(prefix, "mlp"), f);
    }
}

/// Refinement pipeline of one pyramid level: blocks at the current
/// stride, then 2x upsampling, repeated until stride 4. The stage-1
/// branch is already at stride 4 and holds no blocks.
#[derive(Debug, Clone)]
pub struct DecoderBranch<T> {
    pub source_stage: usize,
    /// `(stride, blocks)` pairs in execution order (coarse to fine).
    pub stages: Vec<(usize, Vec<DecoderBlock<T>>)>,
}

impl<T: Scalar> DecoderBranch<T> {
    fn new(init: &mut Init, config: &FPTConfig, source_stage: usize) -> Result<Self> {
        let source_stride = STAGE_STRIDES[source_stage];
        let mut stages = Vec::new();
        for (i, &stride) in REFINE_STRIDES.iter().enumerate() {
            if stride > source_stride {
                continue;
            }
            let blocks = (0..config.depths[i])
                .map(|_| {
                    DecoderBlock::new(init, config.embed_dim, config.heads(), config.sr_ratios[i])
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push((stride, blocks));
        }
        Ok(DecoderBranch {
            source_stage,
            stages,
        })
    }

    /// Takes the merged map at this branch's source stride to stride 4.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = x.clone();
        for (_stride, blocks) in &self.stages {
            for block in blocks {
                x = block.forward(tape, &x)?;
            }
            x = tape.bilinear_upsample(&x, 2)?;
        }
        Ok(x)
    }

    /// Number of upsample steps this branch performs.
    pub fn upsample_steps(&self) -> usize {
        self.stages.len()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        for (stride, blocks) in &mut self.stages {
            for (i, block) in blocks.iter_mut().enumerate() {
                block.visit_params(&format!("{prefix}.s{stride}_block{i}"), f);
            }
        }
    }
}

/// Linear classifier plus 4x bilinear upsampling back to pixel
/// resolution.
#[derive(Debug, Clone)]
pub struct SegHead<T> {
    pub linear: Linear<T>,
}

/// Near-zero init keeps untrained logits tiny, so the initial loss sits
/// at ln K whatever the labels correlate with.
const SEG_HEAD_SIGMA: f64 = 1e-3;

impl<T: Scalar> SegHead<T> {
    pub fn new(init: &mut Init, dim: usize, num_classes: usize) -> Self {
        SegHead {
            linear: init.scaled(SEG_HEAD_SIGMA, |init| {
                Linear::new(init, dim, num_classes, true)
            }),
        }
    }

    /// `[B, H/4, W/4, D] -> [B, H, W, K]`.
    pub fn forward(&self, tape: &mut Tape<T>, fused: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.linear.forward(tape, fused)?;
        tape.bilinear_upsample(&logits, 4)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.linear.visit_params(&scoped(prefix, "linear"), f);
    }
}

/// Per-pixel argmax over the class axis; ties break toward the lowest
/// class index.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let s = logits.shape();
    let k = *s.last().ok_or_else(|| {
        Error::dimension("argmax_labels", "logits must have a class axis".to_string())
    })?;
    let rows = logits.numel() / k;
    let dat = logits.data();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &dat[r * k..(r + 1) * k];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Branch outputs (all at stride 4) plus the fused map.
#[derive(Debug, Clone)]
pub struct DecoderFeatures<T> {
    pub branches: [Tensor<T>; STAGES],
    pub fused: Tensor<T>,
}

/// The full decoder, including the main segmentation head and the four
/// training-only auxiliary heads.
#[derive(Debug, Clone)]
pub struct FptDecoder<T> {
    pub config: FPTConfig,
    pub laterals: Vec<Lateral<T>>,
    pub branches: Vec<DecoderBranch<T>>,
    /// Projection back to `embed_dim` for concat fusion.
    pub fuse_proj: Option<Linear<T>>,
    pub seg_head: SegHead<T>,
    pub aux_heads: Vec<SegHead<T>>,
}

impl<T: Scalar> FptDecoder<T> {
    pub fn new(init: &mut Init, encoder: &PGTConfig, config: &FPTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let laterals = (0..STAGES)
            .map(|i| Lateral::new(init, encoder.dims[i], d))
            .collect();
        let branches = (0..STAGES)
            .map(|i| DecoderBranch::new(init, config, i))
            .collect::<Result<Vec<_>>>()?;
        let fuse_proj = match config.fusion {
            FusionMode::Sum => None,
            FusionMode::Concat => Some(Linear::new(init, STAGES * d, d, true)),
        };
        let seg_head = SegHead::new(init, d, config.num_classes);
        let aux_heads = (0..STAGES)
            .map(|_| SegHead::new(init, d, config.num_classes))
            .collect();
        Ok(FptDecoder {
            config: config.clone(),
            laterals,
            branches,
            fuse_proj,
            seg_head,
            aux_heads,
        })
    }

    /// Lateral projection, top-down aggregation, branch refinement, and
    /// fusion. Branch outputs are kept for the auxiliary heads.
    pub fn forward(&self, tape: &mut Tape<T>, pyramid: &FeaturePyramid<T>) -> Result<DecoderFeatures<T>> {
        let mut laterals = Vec::with_capacity(STAGES);
        for (lateral, feature) in self.laterals.iter().zip(&pyramid.stages) {
            laterals.push(lateral.forward(tape, feature)?);
        }
        // Top-down: coarsest lateral flows down, doubled in resolution at
        // each step and summed with the finer lateral.
        let mut merged = vec![laterals[STAGES - 1].clone()];
        for i in (0..STAGES - 1).rev() {
            let down = top_down_merge(tape, merged.last().unwrap(), &laterals[i])?;
            merged.push(down);
        }
        merged.reverse(); // index by stage again

        let mut branches = Vec::with_capacity(STAGES);
        for (branch, m) in self.branches.iter().zip(&merged) {
            branches.push(branch.forward(tape, m)?);
        }
        let branches: [Tensor<T>; STAGES] = branches.try_into().expect("four branches");
        let fused = self.fuse(tape, &branches)?;
        Ok(DecoderFeatures { branches, fused })
    }

    /// Fuses the four stride-4 branch outputs.
    pub fn fuse(&self, tape: &mut Tape<T>, branches: &[Tensor<T>; STAGES]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = branches.iter().collect();
        match self.config.fusion {
            FusionMode::Sum => tape.sum_branches(&refs),
            FusionMode::Concat => {
                let stacked = tape.concat_last(&refs)?;
                self.fuse_proj
                    .as_ref()
                    .expect("concat mode keeps a projection")
                    .forward(tape, &stacked)
            }
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        for (i, lateral) in self.laterals.iter_mut().enumerate() {
            lateral.visit_params(&format!("{prefix}.lateral{}", i + 1), f);
        }
        for (i, branch) in self.branches.iter_mut().enumerate() {
            branch.visit_params(&format!("{prefix}.branch{}", i + 1), f);
        }
        if let Some(p) = &mut self.fuse_proj {
            p.visit_params(&scoped(prefix, "fuse_proj"), f);
        }
        self.seg_head.visit_params(&scoped(prefix, "seg_head"), f);
        for (i, head) in self.aux_heads.iter_mut().enumerate() {
            head.visit_params(&format!("{prefix}.aux_head{}", i + 1), f);
        }
    }
}

/// Expected decoder output shape for an input image extent.
pub fn expected_logit_shape(encoder: &PGTConfig, config: &FPTConfig, h: usize, w: usize) -> Result<[usize; 3]> {
    let shapes: [StageShape; STAGES] = encoder.stage_shapes(h, w)?;
    let s1 = shapes[0];
    Ok([s1.height * 4, s1.width * 4, config.num_classes])
}
