//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Ops (see [`crate::ops`]) execute eagerly and, when the tape is
//! recording, push a record holding everything their backward rule needs.
//! [`Tape::backward`] replays the records in reverse, visiting each node
//! exactly once, and returns the accumulated gradients keyed by tensor id.
//!
//! The tape also keeps multiply-accumulate counters, grouped by a caller
//! label, so attention cost laws can be checked on instrumented runs.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::{numel_of, Tensor, TensorId};

pub(crate) const UNLABELED: &str = "other";

/// Batched matmul geometry resolved at record time.
#[derive(Debug, Clone)]
pub(crate) struct MatDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Whether each operand carries the batch axes (false = rank-2 broadcast).
    pub a_batched: bool,
    pub b_batched: bool,
}

#[derive(Debug)]
pub(crate) enum OpRecord<T> {
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
        dims: MatDims,
        out_id: TensorId,
    },
    /// Element-wise add; the smaller operand's shape is a suffix of the
    /// larger's and is broadcast over the leading axes.
    Add {
        a: Tensor<T>,
        b: Tensor<T>,
        out_id: TensorId,
    },
    Mul {
        a: Tensor<T>,
        b: Tensor<T>,
        out_id: TensorId,
    },
    Scale {
        x_id: TensorId,
        numel: usize,
        factor: T,
        out_id: TensorId,
    },
    Gelu {
        x: Tensor<T>,
        out_id: TensorId,
    },
    Softmax {
        y: Tensor<T>,
        x_id: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta_id: TensorId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        out_id: TensorId,
    },
    Reshape {
        x_id: TensorId,
        numel: usize,
        out_id: TensorId,
    },
    Permute {
        x_id: TensorId,
        x_shape: Vec<usize>,
        perm: Vec<usize>,
        out_id: TensorId,
    },
    /// out[i] = x[index[i]]; `index` is a bijection on element slots.
    Reindex {
        x_id: TensorId,
        x_numel: usize,
        index: Arc<Vec<usize>>,
        out_id: TensorId,
    },
    MeanAxes {
        x_id: TensorId,
        x_shape: Vec<usize>,
        axes: Vec<usize>,
        out_id: TensorId,
    },
    SumAll {
        x_id: TensorId,
        numel: usize,
        out_id: TensorId,
    },
    BilinearUp {
        x_id: TensorId,
        in_shape: [usize; 4],
        factor: usize,
        out_id: TensorId,
    },
    DwConv3x3 {
        x: Tensor<T>,
        weight: Tensor<T>,
        bias_id: Option<TensorId>,
        out_id: TensorId,
    },
    CrossEntropy {
        probs: Vec<T>,
        labels: Arc<Vec<usize>>,
        x_id: TensorId,
        classes: usize,
        out_id: TensorId,
    },
    ConcatLast {
        inputs: Vec<(TensorId, usize)>,
        lead: usize,
        widths: Vec<usize>,
        out_id: TensorId,
    },
    /// Order-canonicalized n-ary elementwise sum.
    SumN {
        inputs: Vec<(TensorId, usize)>,
        out_id: TensorId,
    },
}

/// Gradient accumulator keyed by tensor id.
struct GradStore<T> {
    map: HashMap<TensorId, Vec<T>>,
}

impl<T: Scalar> GradStore<T> {
    fn take(&mut self, id: TensorId) -> Option<Vec<T>> {
        // Taking (not cloning) is safe: reverse topological order means no
        // later record reads this output's gradient again.
        self.map.remove(&id)
    }

    fn entry(&mut self, id: TensorId, numel: usize) -> &mut Vec<T> {
        self.map.entry(id).or_insert_with(|| vec![T::zero(); numel])
    }

    fn add_slice(&mut self, id: TensorId, grad: &[T]) {
        let buf = self.entry(id, grad.len());
        for (b, &g) in buf.iter_mut().zip(grad) {
            *b = *b + g;
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: HashMap<TensorId, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn grad(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient wrapped as a tensor with the shape of `t`; zeros if no
    /// gradient reached it.
    pub fn grad_tensor(&self, t: &Tensor<T>) -> Tensor<T> {
        match self.grads.get(&t.id()) {
            Some(g) => Tensor::from_parts(g.clone(), t.shape().to_vec()),
            None => Tensor::zeros(t.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Recording context for one forward pass. Single-owner, single-threaded;
/// independent tapes may live on different threads.
pub struct Tape<T> {
    records: Vec<OpRecord<T>>,
    recording: bool,
    macs: BTreeMap<&'static str, u64>,
    label_stack: Vec<&'static str>,
}

impl<T: Scalar> Tape<T> {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Tape {
            records: Vec::new(),
            recording: true,
            macs: BTreeMap::new(),
            label_stack: Vec::new(),
        }
    }

    /// A tape for pure inference: ops run and count MACs, nothing is
    /// retained, backward is unavailable.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub(crate) fn push(&mut self, record: OpRecord<T>) {
        if self.recording {
            self.records.push(record);
        }
    }

    pub(crate) fn count_macs(&mut self, n: u64) {
        let label = self.label_stack.last().copied().unwrap_or(UNLABELED);
        *self.macs.entry(label).or_insert(0) += n;
    }

    /// Attributes the MACs of ops run inside `f` to `label`.
    pub fn labeled<R>(&mut self, label: &'static str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.label_stack.push(label);
        let out = f(self);
        self.label_stack.pop();
        out
    }

    /// Multiply-accumulate count recorded under `label` so far.
    pub fn macs_for(&self, label: &str) -> u64 {
        self.macs.get(label).copied().unwrap_or(0)
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    pub fn mac_breakdown(&self) -> impl Iterator<Item = (&'static str, u64)> + '_ {
        self.macs.iter().map(|(&k, &v)| (k, v))
    }

    /// Finality check + record-keeping shared by every op.
    pub(crate) fn finish(
        &mut self,
        op: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        record: impl FnOnce(TensorId) -> OpRecord<T>,
    ) -> Result<Tensor<T>> {
        debug_assert_eq!(data.len(), numel_of(&shape));
        let out = Tensor::from_parts(data, shape);
        if !out.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let id = out.id();
        self.push(record(id));
        Ok(out)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients for
    /// every tensor the sweep reached are returned, addressable by id.
    pub fn backward(self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if self.records.is_empty() {
            return Err(Error::Usage(
                "backward on an empty tape (nothing was recorded)".into(),
            ));
        }
        let mut store = GradStore {
            map: HashMap::new(),
        };
        store.map.insert(loss.id(), vec![T::one()]);

        for record in self.records.iter().rev() {
            backward_op(record, &mut store);
        }
        Ok(Gradients { grads: store.map })
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn backward_op<T: Scalar>(record: &OpRecord<T>, store: &mut GradStore<T>) {
    match record {
        OpRecord::Matmul { a, b, dims, out_id } => {
            let Some(g) = store.take(*out_id) else { return };
            let (m, k, n) = (dims.m, dims.k, dims.n);
            let a_dat = a.data();
            let b_dat = b.data();
            let da = vec![T::zero(); a.numel()];
            let db = vec![T::zero(); b.numel()];
            let mut da = da;
            let mut db = db;
            for batch in 0..dims.batch {
                let a_off = if dims.a_batched { batch * m * k } else { 0 };
                let b_off = if dims.b_batched { batch * k * n } else { 0 };
                let g_sl = &g[batch * m * n..(batch + 1) * m * n];
                kernels::mm_grad_lhs_acc(
                    g_sl,
                    &b_dat[b_off..b_off + k * n],
                    &mut da[a_off..a_off + m * k],
                    m,
                    k,
                    n,
                );
                kernels::mm_grad_rhs_acc(
                    &a_dat[a_off..a_off + m * k],
                    g_sl,
                    &mut db[b_off..b_off + k * n],
                    m,
                    k,
                    n,
                );
            }
            store.add_slice(a.id(), &da);
            store.add_slice(b.id(), &db);
        }
        OpRecord::Add { a, b, out_id } => {
            let Some(g) = store.take(*out_id) else { return };
            for t in [a, b] {
                if t.numel() == g.len() {
                    store.add_slice(t.id(), &g);
                } else {
                    // Broadcast operand: reduce the leading axes.
                    let small = t.numel();
                    let buf = store.entry(t.id(), small);
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i % small] = buf[i % small] + gv;
                    }
                }
            }
        }
        OpRecord::Mul { a, b, out_id } => {
            let Some(g) = store.take(*out_id) else { return };
            let da: Vec<T> = g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
            let db: Vec<T> = g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
            store.add_slice(a.id(), &da);
            store.add_slice(b.id(), &db);
        }
        OpRecord::Scale {
            x_id,
            numel,
            factor,
            out_id,
        } => {
            let Some(g) = store.take(*out_id) else { return };
            let buf = store.entry(*x_id, *numel);
            for (b, &gv) in buf.iter_mut().zip(&g) {
                *b = *b + gv * *factor;
            }
        }
        OpRecord::Gelu { x, out_id } => {
            let Some(g) = store.take(*out_id) else { return };
            let dx: Vec<T> = g
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| gv * gelu_derivative(xv))
                .collect();
            store.add_slice(x.id(), &dx);
        }
        OpRecord::Softmax { y, x_id, axis } => {
            let Some(g) = store.take(y.id()) else { return };
            let shape = y.shape();
            let axis_len = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let y_dat = y.data();
            let mut dx = vec![T::zero(); y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * axis_len * inner + i;
                    let mut dot = T::zero();
                    for a in 0..axis_len {
                        let off = base + a * inner;
                        dot = dot + g[off] * y_dat[off];
                    }
                    for a in 0..axis_len {
                        let off = base + a * inner;
                        dx[off] = y_dat[off] * (g[off] - dot);
                    }
                }
            }
            store.add_slice(*x_id, &dx);
        }
        OpRecord::LayerNorm {
            x,
            gamma,
            beta_id,
            mean,
            inv_std,
            out_id,
        } => {
            let Some(g) = store.take(*out_id) else { return };
            let c = gamma.numel();
            let rows = x.numel() / c;
            let x_dat = x.data();
            let gamma_dat = gamma.data();
            let mut dx = vec![T::zero(); x.numel()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let cn = T::from_f64(c as f64);
            for r in 0..rows {
                let xs = &x_dat[r * c..(r + 1) * c];
                let gs = &g[r * c..(r + 1) * c];
                let (mu, rstd) = (mean[r], inv_std[r]);
                let mut sum_gg = T::zero();
                let mut sum_ggx = T::zero();
                for j in 0..c {
                    let xhat = (xs[j] - mu) * rstd;
                    let gg = gs[j] * gamma_dat[j];
                    sum_gg = sum_gg + gg;
                    sum_ggx = sum_ggx + gg * xhat;
                    dgamma[j] = dgamma[j] + gs[j] * xhat;
                    dbeta[j] = dbeta[j] + gs[j];
                }
                let mean_gg = sum_gg / cn;
                let mean_ggx = sum_ggx / cn;
                let row = &mut dx[r * c..(r + 1) * c];
                for j in 0..c {
                    let xhat = (xs[j] - mu) * rstd;
                    let gg = gs[j] * gamma_dat[j];
                    row[j] = rstd * (gg - mean_gg - xhat * mean_ggx);
                }
            }
            store.add_slice(x.id(), &dx);
            store.add_slice(gamma.id(), &dgamma);
            store.add_slice(*beta_id, &dbeta);
        }
        OpRecord::Reshape { x_id, numel, out_id } => {
            let Some(g) = store.take(*out_id) else { return };
            debug_assert_eq!(g.len(), *numel);
            store.add_slice(*x_id, &g);
        }
        OpRecord::Permute {
            x_id,
            x_shape,
            perm,
            out_id,
        } => {
            let Some(g) = store.take(*out_id) else { return };
            // Gradient flows through the inverse permutation.
            let mut inverse = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| x_shape[p]).collect();
            let mut dx = vec![T::zero(); g.len()];
            kernels::permute_into(&g, &mut dx, &out_shape, &inverse);
            store.add_slice(*x_id, &dx);
        }
        OpRecord::Reindex {
            x_id,
            x_numel,
            index,
            out_id,
        } => {
            let Some(g) = store.take(*out_id) else { return };
            let buf = store.entry(*x_id, *x_numel);
            for (out_pos, &src) in index.iter().enumerate() {
                buf[src] = buf[src] + g[out_pos];
            }
        }
        OpRecord::MeanAxes {
            x_id,
            x_shape,
            axes,
            out_id,
        } => {
            let Some(g) = store.take(*out_id) else { return };
            let count: usize = axes.iter().map(|&a| x_shape[a]).product();
            let scale = T::one() / T::from_f64(count as f64);
            let strides = kernels::strides_of(x_shape);
            let kept: Vec<usize> = (0..x_shape.len()).filter(|a| !axes.contains(a)).collect();
            let out_strides = {
                let out_shape: Vec<usize> = kept.iter().map(|&a| x_shape[a]).collect();
                kernels::strides_of(&out_shape)
            };
            let numel = x_shape.iter().product();
            let buf = store.entry(*x_id, numel);
            for flat in 0..numel {
                let mut out_off = 0;
                for (slot, &axis) in kept.iter().enumerate() {
                    let coord = (flat / strides[axis]) % x_shape[axis];
                    out_off += coord * out_strides[slot];
                }
                buf[flat] = buf[flat] + g[out_off] * scale;
            }
        }
        OpRecord::SumAll { x_id, numel, out_id } => {
            let Some(g) = store.take(*out_id) else { return };
            let gv = g[0];
            let buf = store.entry(*x_id, *numel);
            for b in buf.iter_mut() {
                *b = *b + gv;
            }
        }
        OpRecord::BilinearUp {
            x_id,
            in_shape,
            factor,
            out_id,
        } => {
            let Some(g) = store.take(*out_id) else { return };
            let [bsz, h, w, c] = *in_shape;
            let taps_y = kernels::bilinear_taps(h, *factor);
            let taps_x = kernels::bilinear_taps(w, *factor);
            let (oh, ow) = (h * factor, w * factor);
            let buf = store.entry(*x_id, bsz * h * w * c);
            for bi in 0..bsz {
                for oy in 0..oh {
                    let ty = taps_y[oy];
                    let wy1 = T::from_f64(ty.w_hi);
                    let wy0 = T::from_f64(1.0 - ty.w_hi);
                    for ox in 0..ow {
                        let tx = taps_x[ox];
                        let wx1 = T::from_f64(tx.w_hi);
                        let wx0 = T::from_f64(1.0 - tx.w_hi);
                        let g_base = ((bi * oh + oy) * ow + ox) * c;
                        let i00 = ((bi * h + ty.lo) * w + tx.lo) * c;
                        let i01 = ((bi * h + ty.lo) * w + tx.hi) * c;
                        let i10 = ((bi * h + ty.hi) * w + tx.lo) * c;
                        let i11 = ((bi * h + ty.hi) * w + tx.hi) * c;
                        for ch in 0..c {
                            let gv = g[g_base + ch];
                            buf[i00 + ch] = buf[i00 + ch] + gv * wy0 * wx0;
                            buf[i01 + ch] = buf[i01 + ch] + gv * wy0 * wx1;
                            buf[i10 + ch] = buf[i10 + ch] + gv * wy1 * wx0;
                            buf[i11 + ch] = buf[i11 + ch] + gv * wy1 * wx1;
                        }
                    }
                }
            }
        }
        OpRecord::DwConv3x3 {
            x,
            weight,
            bias_id,
            out_id,
        } => {
            let Some(g) = store.take(*out_id) else { return };
            let (bsz, h, w, c) = {
                let s = x.shape();
                (s[0], s[1], s[2], s[3])
            };
            let x_dat = x.data();
            let w_dat = weight.data();
            let mut dx = vec![T::zero(); x.numel()];
            let mut dw = vec![T::zero(); weight.numel()];
            for bi in 0..bsz {
                for y in 0..h {
                    for xx in 0..w {
                        let g_base = ((bi * h + y) * w + xx) * c;
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
                                    let gv = g[g_base + ch];
                                    let wv = w_dat[(ch * 3 + dy) * 3 + dxp];
                                    dx[in_base + ch] = dx[in_base + ch] + gv * wv;
                                    dw[(ch * 3 + dy) * 3 + dxp] =
                                        dw[(ch * 3 + dy) * 3 + dxp] + gv * x_dat[in_base + ch];
                                }
                            }
                        }
                    }
                }
            }
            store.add_slice(x.id(), &dx);
            store.add_slice(weight.id(), &dw);
            if let Some(bid) = bias_id {
                let db = store.entry(*bid, c);
                for (i, &gv) in g.iter().enumerate() {
                    db[i % c] = db[i % c] + gv;
                }
            }
        }
        OpRecord::CrossEntropy {
            probs,
            labels,
            x_id,
            classes,
            out_id,
        } => {
            let Some(g) = store.take(*out_id) else { return };
            let rows = labels.len();
            let scale = g[0] / T::from_f64(rows as f64);
            let mut dx = vec![T::zero(); probs.len()];
            for r in 0..rows {
                let base = r * classes;
                for j in 0..*classes {
                    let indicator = if labels[r] == j { T::one() } else { T::zero() };
                    dx[base + j] = (probs[base + j] - indicator) * scale;
                }
            }
            store.add_slice(*x_id, &dx);
        }
        OpRecord::ConcatLast {
            inputs,
            lead,
            widths,
            out_id,
        } => {
            let Some(g) = store.take(*out_id) else { return };
            let total_w: usize = widths.iter().sum();
            let mut offset = 0;
            for ((id, numel), &width) in inputs.iter().zip(widths) {
                let buf = store.entry(*id, *numel);
                for l in 0..*lead {
                    let src = l * total_w + offset;
                    let dst = l * width;
                    for j in 0..width {
                        buf[dst + j] = buf[dst + j] + g[src + j];
                    }
                }
                offset += width;
            }
        }
        OpRecord::SumN { inputs, out_id } => {
            let Some(g) = store.take(*out_id) else { return };
            for (id, numel) in inputs {
                debug_assert_eq!(*numel, g.len());
                store.add_slice(*id, &g);
            }
        }
    }
}

pub(crate) fn gelu_value<T: Scalar>(x: T) -> T {
    // tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
