//! Forward tensor operations. Every op validates shapes, computes eagerly,
//! rejects non-finite results, and records its backward rule on the tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tape::{gelu_value, MatDims, OpRecord, Tape};
use crate::tensor::{numel_of, Tensor};

impl<T: Scalar> Tape<T> {
    /// Batched matrix product `[.., M, K] . [.., K, N] -> [.., M, N]`.
    /// Batch axes must match exactly, or one operand is rank-2 and is
    /// broadcast over the other's batch.
    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::dimension(
                "matmul",
                format!("both operands need rank >= 2, got {ash:?} and {bsh:?}"),
            ));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(Error::dimension(
                "matmul",
                format!("inner extents disagree: {ash:?} vs {bsh:?}"),
            ));
        }
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        let (batch_shape, a_batched, b_batched) = if a_batch == b_batch {
            (a_batch.to_vec(), true, true)
        } else if b_batch.is_empty() {
            (a_batch.to_vec(), true, false)
        } else if a_batch.is_empty() {
            (b_batch.to_vec(), false, true)
        } else {
            return Err(Error::dimension(
                "matmul",
                format!("batch extents not broadcastable: {ash:?} vs {bsh:?}"),
            ));
        };
        let batch = numel_of(&batch_shape);
        let mut out = vec![T::zero(); batch * m * n];
        let a_dat = a.data();
        let b_dat = b.data();
        for bi in 0..batch {
            let a_off = if a_batched { bi * m * k } else { 0 };
            let b_off = if b_batched { bi * k * n } else { 0 };
            kernels::mm_acc(
                &a_dat[a_off..a_off + m * k],
                &b_dat[b_off..b_off + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.count_macs((batch * m * k * n) as u64);
        let mut out_shape = batch_shape;
        out_shape.push(m);
        out_shape.push(n);
        let dims = MatDims {
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
        };
        self.finish("matmul", out, out_shape, |out_id| OpRecord::Matmul {
            a: a.clone(),
            b: b.clone(),
            dims,
            out_id,
        })
    }

    /// Element-wise sum. Shapes must be equal, or one shape must be a
    /// suffix of the other (broadcast over the leading axes, as in a bias
    /// add `[.., C] + [C]`).
    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (big, small) = if a.shape().ends_with(b.shape()) {
            (a, b)
        } else if b.shape().ends_with(a.shape()) {
            (b, a)
        } else {
            return Err(Error::dimension(
                "add",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        };
        let s_dat = small.data();
        let period = small.numel();
        let out: Vec<T> = big
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + s_dat[i % period])
            .collect();
        self.finish("add", out, big.shape().to_vec(), |out_id| OpRecord::Add {
            a: a.clone(),
            b: b.clone(),
            out_id,
        })
    }

    /// Hadamard product of same-shape tensors.
    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::dimension(
                "mul",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let out: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.finish("mul", out, a.shape().to_vec(), |out_id| OpRecord::Mul {
            a: a.clone(),
            b: b.clone(),
            out_id,
        })
    }

    /// Multiplication by a compile-time constant (not differentiated
    /// through the constant).
    pub fn scale(&mut self, x: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
        let out: Vec<T> = x.data().iter().map(|&v| v * factor).collect();
        self.finish("scale", out, x.shape().to_vec(), |out_id| OpRecord::Scale {
            x_id: x.id(),
            numel: x.numel(),
            factor,
            out_id,
        })
    }

    /// GELU activation, tanh approximation.
    pub fn gelu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out: Vec<T> = x.data().iter().map(|&v| gelu_value(v)).collect();
        self.finish("gelu", out, x.shape().to_vec(), |out_id| OpRecord::Gelu {
            x: x.clone(),
            out_id,
        })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::dimension(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x_dat = x.data();
        let mut out = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut max = x_dat[base];
                for a in 1..axis_len {
                    max = max.max(x_dat[base + a * inner]);
                }
                let mut denom = T::zero();
                for a in 0..axis_len {
                    let off = base + a * inner;
                    let e = (x_dat[off] - max).exp();
                    out[off] = e;
                    denom = denom + e;
                }
                for a in 0..axis_len {
                    let off = base + a * inner;
                    out[off] = out[off] / denom;
                }
            }
        }
        // The backward rule needs the output tensor itself, so this op
        // records directly instead of going through finish().
        let y = Tensor::from_parts(out, shape.to_vec());
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        self.push(OpRecord::Softmax {
            y: y.clone(),
            x_id: x.id(),
            axis,
        });
        Ok(y)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        let c = gamma.numel();
        if x.shape().last() != Some(&c) || beta.numel() != c {
            return Err(Error::dimension(
                "layer_norm",
                format!(
                    "x {:?} vs gamma {:?} / beta {:?}",
                    x.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::parameter("eps", "must be positive"));
        }
        let rows = x.numel() / c;
        let x_dat = x.data();
        let g_dat = gamma.data();
        let b_dat = beta.data();
        let cn = T::from_f64(c as f64);
        let mut out = vec![T::zero(); x.numel()];
        let mut mean = vec![T::zero(); rows];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let xs = &x_dat[r * c..(r + 1) * c];
            let mu = xs.iter().copied().sum::<T>() / cn;
            let var = xs
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .sum::<T>()
                / cn;
            let rstd = T::one() / (var + eps).sqrt();
            mean[r] = mu;
            inv_std[r] = rstd;
            let row = &mut out[r * c..(r + 1) * c];
            for j in 0..c {
                row[j] = (xs[j] - mu) * rstd * g_dat[j] + b_dat[j];
            }
        }
        self.finish("layer_norm", out, x.shape().to_vec(), |out_id| {
            OpRecord::LayerNorm {
                x: x.clone(),
                gamma: gamma.clone(),
                beta_id: beta.id(),
                mean,
                inv_std,
                out_id,
            }
        })
    }

    /// Reinterprets the buffer under a new shape (same element count,
    /// zero copy).
    pub fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != x.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dimension(
                "reshape",
                format!("{:?} cannot reshape to {shape:?}", x.shape()),
            ));
        }
        let out = x.view_as(shape.to_vec());
        self.push(OpRecord::Reshape {
            x_id: x.id(),
            numel: x.numel(),
            out_id: out.id(),
        });
        Ok(out)
    }

    /// Axis permutation: output axis `j` is input axis `perm[j]`.
    pub fn permute(&mut self, x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dimension(
                "permute",
                format!("{perm:?} is not a permutation of axes of {:?}", x.shape()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let mut out = vec![T::zero(); x.numel()];
        kernels::permute_into(x.data(), &mut out, x.shape(), perm);
        self.finish("permute", out, out_shape, |out_id| OpRecord::Permute {
            x_id: x.id(),
            x_shape: x.shape().to_vec(),
            perm: perm.to_vec(),
            out_id,
        })
    }

    /// Element permutation `out[i] = x[index[i]]` under a new shape. The
    /// index must be a bijection on element slots so the inverse is exact;
    /// grid partitioning and patch gathers are built on this.
    pub(crate) fn reindex(
        &mut self,
        x: &Tensor<T>,
        index: Arc<Vec<usize>>,
        out_shape: Vec<usize>,
    ) -> Result<Tensor<T>> {
        if index.len() != x.numel() {
            return Err(Error::dimension(
                "reindex",
                format!(
                    "index len {} vs tensor {:?}",
                    index.len(),
                    x.shape()
                ),
            ));
        }
        debug_assert!(
            {
                let mut seen = vec![false; x.numel()];
                index.iter().all(|&i| !std::mem::replace(&mut seen[i], true))
            },
            "reindex map must be a bijection"
        );
        self.gather(x, index, out_shape)
    }

    /// Element gather `out[i] = x[index[i]]`; elements may be dropped
    /// (backward scatters zeros into untouched slots).
    pub(crate) fn gather(
        &mut self,
        x: &Tensor<T>,
        index: Arc<Vec<usize>>,
        out_shape: Vec<usize>,
    ) -> Result<Tensor<T>> {
        if index.len() != numel_of(&out_shape) {
            return Err(Error::dimension(
                "gather",
                format!("index len {} vs shape {out_shape:?}", index.len()),
            ));
        }
        let x_dat = x.data();
        debug_assert!(index.iter().all(|&i| i < x_dat.len()));
        let out: Vec<T> = index.iter().map(|&i| x_dat[i]).collect();
        self.finish("gather", out, out_shape, |out_id| OpRecord::Reindex {
            x_id: x.id(),
            x_numel: x.numel(),
            index,
            out_id,
        })
    }

    /// Folds each non-overlapping `p x p` spatial cell of `[B, H, W, C]`
    /// into channels: `[B, H/p, W/p, p*p*C]`, cell elements in row-major
    /// order. A pure element permutation.
    pub fn space_to_depth(&mut self, x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::dimension(
                "space_to_depth",
                format!("expected [B, H, W, C], got {s:?}"),
            ));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::layout(format!(
                "patch side {p} does not tile H={h} x W={w}"
            )));
        }
        let (oh, ow) = (h / p, w / p);
        let mut index = Vec::with_capacity(x.numel());
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for py in 0..p {
                        for px in 0..p {
                            let base = ((bi * h + oy * p + py) * w + ox * p + px) * c;
                            for ch in 0..c {
                                index.push(base + ch);
                            }
                        }
                    }
                }
            }
        }
        self.reindex(x, Arc::new(index), vec![b, oh, ow, p * p * c])
    }

    /// Mean over the named axes (removed from the result shape).
    pub fn mean_over(&mut self, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = x.rank();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= rank) || axes.is_empty() {
            return Err(Error::dimension(
                "mean_over",
                format!("axes {axes:?} illegal for shape {:?}", x.shape()),
            ));
        }
        let shape = x.shape();
        let kept: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
        let strides = kernels::strides_of(shape);
        let out_strides = kernels::strides_of(&out_shape);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let scale = T::one() / T::from_f64(count as f64);
        let mut out = vec![T::zero(); numel_of(&out_shape)];
        for (flat, &v) in x.data().iter().enumerate() {
            let mut out_off = 0;
            for (slot, &axis) in kept.iter().enumerate() {
                let coord = (flat / strides[axis]) % shape[axis];
                out_off += coord * out_strides[slot];
            }
            out[out_off] = out[out_off] + v;
        }
        for o in out.iter_mut() {
            *o = *o * scale;
        }
        self.finish("mean_over", out, out_shape, |out_id| OpRecord::MeanAxes {
            x_id: x.id(),
            x_shape: shape.to_vec(),
            axes,
            out_id,
        })
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let total = x.data().iter().copied().sum::<T>();
        self.finish("sum_all", vec![total], Vec::new(), |out_id| OpRecord::SumAll {
            x_id: x.id(),
            numel: x.numel(),
            out_id,
        })
    }

    /// Integer-factor bilinear upsampling of `[B, H, W, C]`, align-corners
    /// false.
    pub fn bilinear_upsample(&mut self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        if factor < 1 {
            return Err(Error::parameter("factor", "must be >= 1"));
        }
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::dimension(
                "bilinear_upsample",
                format!("expected [B, H, W, C], got {s:?}"),
            ));
        }
        let [bsz, h, w, c] = [s[0], s[1], s[2], s[3]];
        let taps_y = kernels::bilinear_taps(h, factor);
        let taps_x = kernels::bilinear_taps(w, factor);
        let (oh, ow) = (h * factor, w * factor);
        let x_dat = x.data();
        let mut out = vec![T::zero(); bsz * oh * ow * c];
        for bi in 0..bsz {
            for oy in 0..oh {
                let ty = taps_y[oy];
                let wy = T::from_f64(ty.w_hi);
                for ox in 0..ow {
                    let tx = taps_x[ox];
                    let wx = T::from_f64(tx.w_hi);
                    let o_base = ((bi * oh + oy) * ow + ox) * c;
                    let i00 = ((bi * h + ty.lo) * w + tx.lo) * c;
                    let i01 = ((bi * h + ty.lo) * w + tx.hi) * c;
                    let i10 = ((bi * h + ty.hi) * w + tx.lo) * c;
                    let i11 = ((bi * h + ty.hi) * w + tx.hi) * c;
                    for ch in 0..c {
                        // Difference form keeps constants and the factor-1
                        // case exact.
                        let top = x_dat[i00 + ch] + wx * (x_dat[i01 + ch] - x_dat[i00 + ch]);
                        let bot = x_dat[i10 + ch] + wx * (x_dat[i11 + ch] - x_dat[i10 + ch]);
                        out[o_base + ch] = top + wy * (bot - top);
                    }
                }
            }
        }
        self.finish(
            "bilinear_upsample",
            out,
            vec![bsz, oh, ow, c],
            |out_id| OpRecord::BilinearUp {
                x_id: x.id(),
                in_shape: [bsz, h, w, c],
                factor,
                out_id,
            },
        )
    }

    /// Per-channel 3x3 spatial aggregation with zero padding: each output
    /// channel is a learned weighted sum over that channel's neighborhood.
    /// `weight` is `[C, 3, 3]`, optional `bias` is `[C]`.
    pub fn dwconv3x3(
        &mut self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::dimension(
                "dwconv3x3",
                format!("expected [B, H, W, C], got {s:?}"),
            ));
        }
        let [bsz, h, w, c] = [s[0], s[1], s[2], s[3]];
        if weight.shape() != [c, 3, 3] {
            return Err(Error::dimension(
                "dwconv3x3",
                format!("weight {:?} does not match C={c}", weight.shape()),
            ));
        }
        if let Some(b) = bias {
            if b.numel() != c {
                return Err(Error::dimension(
                    "dwconv3x3",
                    format!("bias {:?} does not match C={c}", b.shape()),
                ));
            }
        }
        let x_dat = x.data();
        let w_dat = weight.data();
        let mut out = vec![T::zero(); x.numel()];
        for bi in 0..bsz {
            for y in 0..h {
                for xx in 0..w {
                    let o_base = ((bi * h + y) * w + xx) * c;
                    for dy in 0..3usize {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dxp in 0..3usize {
                            let sx = xx as isize + dxp as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let in_base = ((bi * h + sy as usize) * w + sx as usize) * c;
                            for ch in 0..c {
                                out[o_base + ch] = out[o_base + ch]
                                    + w_dat[(ch * 3 + dy) * 3 + dxp] * x_dat[in_base + ch];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let b_dat = b.data();
            for (i, o) in out.iter_mut().enumerate() {
                *o = *o + b_dat[i % c];
            }
        }
        self.count_macs((bsz * h * w * c * 9) as u64);
        self.finish("dwconv3x3", out, s.to_vec(), |out_id| OpRecord::DwConv3x3 {
            x: x.clone(),
            weight: weight.clone(),
            bias_id: bias.map(|b| b.id()),
            out_id,
        })
    }

    /// Mean cross-entropy between `logits [.., K]` and integer labels
    /// (one per leading position), computed via a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        let shape = logits.shape();
        let classes = *shape.last().ok_or_else(|| {
            Error::dimension("cross_entropy", "logits must have a class axis".to_string())
        })?;
        let rows = logits.numel() / classes;
        if labels.len() != rows {
            return Err(Error::dimension(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), rows),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let x_dat = logits.data();
        let mut probs = vec![T::zero(); logits.numel()];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &x_dat[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(row[0], T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * classes + j] = e;
                denom = denom + e;
            }
            for j in 0..classes {
                probs[r * classes + j] = probs[r * classes + j] / denom;
            }
            let lse = denom.ln() + max;
            total = total + (lse - row[labels[r]]);
        }
        let loss = total / T::from_f64(rows as f64);
        let labels = Arc::new(labels.to_vec());
        self.finish("cross_entropy", vec![loss], Vec::new(), |out_id| {
            OpRecord::CrossEntropy {
                probs,
                labels,
                x_id: logits.id(),
                classes,
                out_id,
            }
        })
    }

    /// Concatenation along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return Err(Error::Usage("concat_last of zero tensors".into()));
        }
        let lead_shape = &xs[0].shape()[..xs[0].rank() - 1];
        for x in xs {
            if x.rank() == 0 || &x.shape()[..x.rank() - 1] != lead_shape {
                return Err(Error::dimension(
                    "concat_last",
                    format!("leading extents disagree: {:?}",
                        xs.iter().map(|x| x.shape().to_vec()).collect::<Vec<_>>()),
                ));
            }
        }
        let lead = numel_of(lead_shape);
        let widths: Vec<usize> = xs.iter().map(|x| *x.shape().last().unwrap()).collect();
        let total_w: usize = widths.iter().sum();
        let mut out = vec![T::zero(); lead * total_w];
        let mut offset = 0;
        for (x, &width) in xs.iter().zip(&widths) {
            let x_dat = x.data();
            for l in 0..lead {
                out[l * total_w + offset..l * total_w + offset + width]
                    .copy_from_slice(&x_dat[l * width..(l + 1) * width]);
            }
            offset += width;
        }
        let mut out_shape = lead_shape.to_vec();
        out_shape.push(total_w);
        let inputs: Vec<(crate::tensor::TensorId, usize)> =
            xs.iter().map(|x| (x.id(), x.numel())).collect();
        self.finish("concat_last", out, out_shape, |out_id| OpRecord::ConcatLast {
            inputs,
            lead,
            widths,
            out_id,
        })
    }

    /// N-ary elementwise sum with a canonical per-element addend order
    /// (sorted by value), so the result is independent of operand order.
    pub fn sum_branches(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return Err(Error::Usage("sum_branches of zero tensors".into()));
        }
        let shape = xs[0].shape().to_vec();
        for x in xs {
            if x.shape() != shape {
                return Err(Error::dimension(
                    "sum_branches",
                    format!("{:?} vs {:?}", x.shape(), shape),
                ));
            }
        }
        let numel = xs[0].numel();
        let mut out = vec![T::zero(); numel];
        let mut addends: Vec<T> = Vec::with_capacity(xs.len());
        for (i, o) in out.iter_mut().enumerate() {
            addends.clear();
            addends.extend(xs.iter().map(|x| x.data()[i]));
            addends.sort_by(|a, b| a.partial_cmp(b).expect("finite inputs"));
            *o = addends.iter().copied().sum();
        }
        let inputs: Vec<(crate::tensor::TensorId, usize)> =
            xs.iter().map(|x| (x.id(), x.numel())).collect();
        self.finish("sum_branches", out, shape, |out_id| OpRecord::SumN {
            inputs,
            out_id,
        })
    }
}
