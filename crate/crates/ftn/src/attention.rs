//! Attention machinery: non-overlapping grid grouping, grouped multi-head
//! self-attention with global attention as its single-group special case,
//! and spatial-reduction attention for the decoder.
//!
//! One set of projection weights is shared across all groups of a layer —
//! grouping only masks which tokens may attend to each other, which is
//! what makes the single-group case coincide with global attention.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{scoped, Init, LayerNorm, Linear, ParamFn};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// MAC-counter label for the query-key score products.
pub const SCORES_LABEL: &str = "attention_scores";
/// MAC-counter label for applying attention weights to values.
pub const APPLY_LABEL: &str = "attention_apply";

/// Shape of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub head_dim: usize,
    /// Number of grid groups; must be a perfect square.
    pub groups: usize,
    pub qkv_bias: bool,
}

impl AttentionSpec {
    pub fn new(heads: usize, head_dim: usize, groups: usize, qkv_bias: bool) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(Error::parameter("heads/head_dim", "must be positive"));
        }
        exact_sqrt(groups).ok_or_else(|| {
            Error::parameter("groups", format!("{groups} is not a perfect square"))
        })?;
        Ok(AttentionSpec {
            heads,
            head_dim,
            groups,
            qkv_bias,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

pub(crate) fn exact_sqrt(n: usize) -> Option<usize> {
    if n == 0 {
        return None;
    }
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Placement of square groups over a spatial map.
#[derive(Debug, Clone, Copy)]
pub struct GridLayout {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub grid_side: usize,
    pub group_h: usize,
    pub group_w: usize,
}

impl GridLayout {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        let side = exact_sqrt(groups).ok_or_else(|| {
            Error::layout(format!("group count G={groups} is not a perfect square"))
        })?;
        if height % side != 0 || width % side != 0 {
            return Err(Error::layout(format!(
                "grid side {side} (G={groups}) does not tile H={height} x W={width}"
            )));
        }
        Ok(GridLayout {
            batch,
            height,
            width,
            channels,
            grid_side: side,
            group_h: height / side,
            group_w: width / side,
        })
    }

    pub fn groups(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn tokens_per_group(&self) -> usize {
        self.group_h * self.group_w
    }
}

/// Splits `[B, H, W, C]` into `[B*G, H/sqrt(G)*W/sqrt(G), C]`, one row of
/// token sequences per contiguous spatial cell. A pure permutation of
/// tokens; [`grid_unpartition`] inverts it exactly.
pub fn grid_partition<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    groups: usize,
) -> Result<(Tensor<T>, GridLayout)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dimension(
            "grid_partition",
            format!("expected [B, H, W, C], got {s:?}"),
        ));
    }
    let layout = GridLayout::new(s[0], s[1], s[2], s[3], groups)?;
    let mut index = Vec::with_capacity(x.numel());
    let (h, w, c) = (layout.height, layout.width, layout.channels);
    for b in 0..layout.batch {
        for gy in 0..layout.grid_side {
            for gx in 0..layout.grid_side {
                for ty in 0..layout.group_h {
                    for tx in 0..layout.group_w {
                        let y = gy * layout.group_h + ty;
                        let xx = gx * layout.group_w + tx;
                        let base = ((b * h + y) * w + xx) * c;
                        for ch in 0..c {
                            index.push(base + ch);
                        }
                    }
                }
            }
        }
    }
    let out_shape = vec![
        layout.batch * layout.groups(),
        layout.tokens_per_group(),
        c,
    ];
    let out = tape.reindex(x, Arc::new(index), out_shape)?;
    Ok((out, layout))
}

/// Inverse of [`grid_partition`].
pub fn grid_unpartition<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    layout: &GridLayout,
) -> Result<Tensor<T>> {
    let (h, w, c) = (layout.height, layout.width, layout.channels);
    let tokens = layout.tokens_per_group();
    let expected = [layout.batch * layout.groups(), tokens, c];
    if x.shape() != expected {
        return Err(Error::dimension(
            "grid_unpartition",
            format!("{:?} does not match layout {expected:?}", x.shape()),
        ));
    }
    let mut index = Vec::with_capacity(x.numel());
    for b in 0..layout.batch {
        for y in 0..h {
            for xx in 0..w {
                let g = (y / layout.group_h) * layout.grid_side + xx / layout.group_w;
                let t = (y % layout.group_h) * layout.group_w + xx % layout.group_w;
                let base = ((b * layout.groups() + g) * tokens + t) * c;
                for ch in 0..c {
                    index.push(base + ch);
                }
            }
        }
    }
    tape.reindex(x, Arc::new(index), vec![layout.batch, h, w, c])
}

/// Multi-head self-attention over `[N, L, C]` token sequences:
/// per head `softmax(Q K^T / sqrt(head_dim)) V`, heads concatenated and
/// linearly projected. Contains no positional term, so permuting input
/// tokens permutes outputs identically.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(init: &mut Init, heads: usize, head_dim: usize, qkv_bias: bool) -> Self {
        let dim = heads * head_dim;
        MultiHeadAttention {
            wq: Linear::new(init, dim, dim, qkv_bias),
            wk: Linear::new(init, dim, dim, qkv_bias),
            wv: Linear::new(init, dim, dim, qkv_bias),
            wo: Linear::new(init, dim, dim, true),
            heads,
            head_dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Splits `[N, L, C]` into per-head rows `[N*heads, L, head_dim]`.
    fn split_heads(&self, tape: &mut Tape<T>, x: &Tensor<T>, n: usize, l: usize) -> Result<Tensor<T>> {
        let x = tape.reshape(x, &[n, l, self.heads, self.head_dim])?;
        let x = tape.permute(&x, &[0, 2, 1, 3])?;
        tape.reshape(&x, &[n * self.heads, l, self.head_dim])
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim() {
            return Err(Error::dimension(
                "multi_head_attention",
                format!("expected [N, L, {}], got {s:?}", self.dim()),
            ));
        }
        let (n, l) = (s[0], s[1]);
        let q = self.wq.forward(tape, x)?;
        let k = self.wk.forward(tape, x)?;
        let v = self.wv.forward(tape, x)?;
        let q = self.split_heads(tape, &q, n, l)?;
        let k = self.split_heads(tape, &k, n, l)?;
        let v = self.split_heads(tape, &v, n, l)?;
        let ctx = self.attend(tape, &q, &k, &v)?;
        let ctx = tape.reshape(&ctx, &[n, self.heads, l, self.head_dim])?;
        let ctx = tape.permute(&ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(&ctx, &[n, l, self.dim()])?;
        self.wo.forward(tape, &ctx)
    }

    /// Scaled dot-product attention on per-head rows; `k`/`v` may hold a
    /// different (reduced) token count than `q`.
    fn attend(
        &self,
        tape: &mut Tape<T>,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let scale = T::from_f64(1.0 / (self.head_dim as f64).sqrt());
        let q = tape.scale(q, scale)?;
        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.labeled(SCORES_LABEL, |t| t.matmul(&q, &kt))?;
        let attn = tape.softmax(&scores, 2)?;
        tape.labeled(APPLY_LABEL, |t| t.matmul(&attn, v))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.wq.visit_params(&scoped(prefix, "wq"), f);
        self.wk.visit_params(&scoped(prefix, "wk"), f);
        self.wv.visit_params(&scoped(prefix, "wv"), f);
        self.wo.visit_params(&scoped(prefix, "wo"), f);
    }
}

/// Grouped multi-head self-attention on a spatial map: the map is split
/// into non-overlapping grid cells and attention runs within each cell,
/// with projection weights shared across cells. One group is exactly
/// global attention over the flattened map.
#[derive(Debug, Clone)]
pub struct GroupAttention<T> {
    pub attn: MultiHeadAttention<T>,
    pub groups: usize,
}

impl<T: Scalar> GroupAttention<T> {
    pub fn new(init: &mut Init, spec: AttentionSpec) -> Self {
        GroupAttention {
            attn: MultiHeadAttention::new(init, spec.heads, spec.head_dim, spec.qkv_bias),
            groups: spec.groups,
        }
    }

    /// `[B, H, W, C] -> [B, H, W, C]`; tokens in different grid cells
    /// never attend to each other.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (parts, layout) = grid_partition(tape, x, self.groups)?;
        let y = self.attn.forward(tape, &parts)?;
        grid_unpartition(tape, &y, &layout)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.attn.visit_params(prefix, f);
    }
}

/// Multi-head attention with spatially reduced keys and values: queries
/// come from all `H*W` tokens while each key/value token summarizes an
/// `R x R` cell (cell vectors concatenated, linearly projected back to C,
/// then layer-normalized). `R = 1` skips the reduction entirely and is
/// identical to global attention.
#[derive(Debug, Clone)]
pub struct SpatialReductionAttention<T> {
    pub attn: MultiHeadAttention<T>,
    pub ratio: usize,
    /// Projection + norm for the reduced map; absent when `ratio == 1`.
    pub reduce: Option<(Linear<T>, LayerNorm<T>)>,
}

impl<T: Scalar> SpatialReductionAttention<T> {
    pub fn new(init: &mut Init, heads: usize, head_dim: usize, qkv_bias: bool, ratio: usize) -> Result<Self> {
        if ratio < 1 {
            return Err(Error::parameter("ratio", "must be >= 1"));
        }
        let dim = heads * head_dim;
        let reduce = (ratio > 1).then(|| {
            (
                Linear::new(init, ratio * ratio * dim, dim, true),
                LayerNorm::new(init, dim),
            )
        });
        Ok(SpatialReductionAttention {
            attn: MultiHeadAttention::new(init, heads, head_dim, qkv_bias),
            ratio,
            reduce,
        })
    }

    /// Key/value token count for a given map size. Partial edge cells
    /// (when the ratio does not divide the extent) are dropped.
    pub fn kv_tokens(&self, height: usize, width: usize) -> usize {
        (height / self.ratio) * (width / self.ratio)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.attn.dim() {
            return Err(Error::dimension(
                "spatial_reduction_attention",
                format!("expected [B, H, W, {}], got {s:?}", self.attn.dim()),
            ));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let tokens = tape.reshape(x, &[b, h * w, c])?;
        let heads = self.attn.heads;
        let q = self.attn.wq.forward(tape, &tokens)?;
        let q = self.attn.split_heads(tape, &q, b, h * w)?;

        let kv_src = match &self.reduce {
            None => tokens,
            Some((proj, norm)) => {
                if self.kv_tokens(h, w) == 0 {
                    return Err(Error::layout(format!(
                        "reduction ratio {} leaves no full cell on a {h} x {w} map",
                        self.ratio
                    )));
                }
                let cells = self.merge_cells(tape, x)?;
                let reduced = proj.forward(tape, &cells)?;
                norm.forward(tape, &reduced)?
            }
        };
        let kv_len = kv_src.shape()[1];
        let k = self.attn.wk.forward(tape, &kv_src)?;
        let v = self.attn.wv.forward(tape, &kv_src)?;
        let k = self.attn.split_heads(tape, &k, b, kv_len)?;
        let v = self.attn.split_heads(tape, &v, b, kv_len)?;

        let ctx = self.attn.attend(tape, &q, &k, &v)?;
        let ctx = tape.reshape(&ctx, &[b, heads, h * w, self.attn.head_dim])?;
        let ctx = tape.permute(&ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(&ctx, &[b, h * w, c])?;
        let out = self.attn.wo.forward(tape, &ctx)?;
        tape.reshape(&out, &[b, h, w, c])
    }

    /// Concatenates each full `R x R` cell into one vector:
    /// `[B, H, W, C] -> [B, floor(H/R)*floor(W/R), R*R*C]`.
    fn merge_cells(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let r = self.ratio;
        let (hr, wr) = (h / r, w / r);
        let mut index = Vec::with_capacity(b * hr * wr * r * r * c);
        for bi in 0..b {
            for oy in 0..hr {
                for ox in 0..wr {
                    for py in 0..r {
                        for px in 0..r {
                            let base = ((bi * h + oy * r + py) * w + ox * r + px) * c;
                            for ch in 0..c {
                                index.push(base + ch);
                            }
                        }
                    }
                }
            }
        }
        tape.gather(x, Arc::new(index), vec![b, hr * wr, r * r * c])
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.attn.visit_params(prefix, f);
        if let Some((proj, norm)) = &mut self.reduce {
            proj.visit_params(&scoped(prefix, "sr_proj"), f);
            norm.visit_params(&scoped(prefix, "sr_norm"), f);
        }
    }
}
