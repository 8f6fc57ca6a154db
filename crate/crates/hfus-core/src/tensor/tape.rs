//! Linear-tape reverse-mode differentiation.
//!
//! Every forward operation appends one [`Node`] holding the result value and
//! the operation record; a [`Val`] is just the node's index. Because each
//! node only references earlier nodes, walking the tape once in reverse order
//! is a reverse-topological traversal, so [`Tape::backward`] is a single pass
//! that accumulates gradients into each node's buffer.
//!
//! A tape lives for exactly one forward/backward round: models bind their
//! [`Param`]s onto a fresh tape per pass and pull the resulting leaf
//! gradients back out afterwards.

use super::conv::{conv2d_backward, conv2d_forward, ConvDims};
use super::{Param, Tensor, TensorError, EPS_LOSS};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

enum Op {
    Leaf,
    Conv2d { x: Val, w: Val, b: Val, dims: ConvDims },
    Relu { x: Val },
    Sigmoid { x: Val },
    Linear { x: Val, w: Val, b: Val },
    Concat { parts: Vec<Val> },
    Mul { a: Val, b: Val },
    SumAll { x: Val },
    MeanAll { x: Val },
    /// Spatial average with a fixed (non-differentiated) per-sample weight
    /// mask; the divisor is always the full plane size.
    SpatialMean { x: Val, masks: Option<Vec<f64>> },
    /// Per-channel mean/variance/max over the leading set axis.
    FuseStats { x: Val, means: Vec<f64>, argmax: Vec<usize> },
    BceLoss { p: Val, targets: Vec<f64> },
    /// stats holds (mean, inv_std) per (sample, channel) group.
    InstanceNorm { x: Val, gammas: Vec<Val>, betas: Vec<Val>, stats: Vec<(f64, f64)> },
    /// stats holds (mean, inv_std) per channel, computed over (N, H, W).
    BatchNormTrain { x: Val, gammas: Vec<Val>, betas: Vec<Val>, stats: Vec<(f64, f64)> },
    /// stats holds (running_mean, inv_std) per channel, treated as constants.
    BatchNormEval { x: Val, gammas: Vec<Val>, betas: Vec<Val>, stats: Vec<(f64, f64)> },
}

struct Node {
    value: Tensor,
    /// Empty until backward reaches this node.
    grad: Vec<f64>,
    op: Op,
    /// Whether a tracked leaf feeds this node; untracked subgraphs are
    /// skipped during backward.
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn ensure_grad(n: &mut Node) -> &mut [f64] {
    if n.grad.is_empty() {
        n.grad = vec![0.0; n.value.numel()];
    }
    &mut n.grad
}

/// Disjoint mutable access to two tape nodes.
fn pair_mut(nodes: &mut [Node], i: usize, j: usize) -> (&mut Node, &mut Node) {
    debug_assert_ne!(i, j);
    if i < j {
        let (left, right) = nodes.split_at_mut(j);
        (&mut left[i], &mut right[0])
    } else {
        let (left, right) = nodes.split_at_mut(i);
        (&mut right[0], &mut left[j])
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Val {
        self.nodes.push(Node { value, grad: Vec::new(), op, tracked });
        Val(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Val) -> bool {
        self.nodes[v.0].tracked
    }

    /// Register a leaf. `tracked` decides whether backward fills its
    /// gradient buffer.
    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Val {
        self.push(value, Op::Leaf, tracked)
    }

    /// Untracked input data.
    pub fn constant(&mut self, value: Tensor) -> Val {
        self.leaf(value, false)
    }

    /// Bind a parameter's current value as a tracked leaf. The caller pulls
    /// the gradient back with [`Tape::grad`] after backward.
    pub fn param(&mut self, p: &Param) -> Val {
        self.leaf(p.value().clone(), true)
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the scalar loss with respect to `v`; `None` until
    /// backward has run and reached this node.
    pub fn grad(&self, v: Val) -> Option<&[f64]> {
        let g = &self.nodes[v.0].grad;
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }

    // ---- forward operations -------------------------------------------

    /// 2-D cross-correlation. `x` is `[C_in, H, W]` or `[N, C_in, H, W]`,
    /// `w` is `[C_out, C_in, k, k]` (square kernels), `b` is `[C_out]`.
    pub fn conv2d(
        &mut self,
        x: Val,
        w: Val,
        b: Val,
        stride: usize,
        pad: usize,
    ) -> Result<Val, TensorError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let (n, c_in, h, wd, batched) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [n, c, h, w] => (*n, *c, *h, *w, true),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("input must be 3-D or 4-D, got {xs:?}"),
                })
            }
        };
        let (c_out, k) = match ws.as_slice() {
            [co, ci, kh, kw] if *ci == c_in && kh == kw => (*co, *kh),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("weight {ws:?} incompatible with {c_in} input channels"),
                })
            }
        };
        if bs != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {bs:?} must be [{c_out}]"),
            });
        }
        let dims = ConvDims::new(n, c_in, h, wd, c_out, k, stride, pad).ok_or(
            TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!(
                    "kernel {k}x{k} stride {stride} pad {pad} does not fit a {h}x{wd} input"
                ),
            },
        )?;
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
        );
        let out_shape = if batched {
            vec![n, c_out, dims.h_out, dims.w_out]
        } else {
            vec![c_out, dims.h_out, dims.w_out]
        };
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, dims }, tracked))
    }

    pub fn relu(&mut self, x: Val) -> Val {
        let value = Tensor {
            shape: self.value(x).shape().to_vec(),
            data: self.value(x).data().iter().map(|&v| v.max(0.0)).collect(),
        };
        let tracked = self.tracked(x);
        self.push(value, Op::Relu { x }, tracked)
    }

    pub fn sigmoid(&mut self, x: Val) -> Val {
        let value = Tensor {
            shape: self.value(x).shape().to_vec(),
            data: self.value(x).data().iter().map(|&v| stable_sigmoid(v)).collect(),
        };
        let tracked = self.tracked(x);
        self.push(value, Op::Sigmoid { x }, tracked)
    }

    /// Affine map `y = x W^T + b` with `x` `[D]` or `[N, D]`, `w` `[O, D]`,
    /// `b` `[O]`.
    pub fn linear(&mut self, x: Val, w: Val, b: Val) -> Result<Val, TensorError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let (n, d, batched) = match xs.as_slice() {
            [d] => (1, *d, false),
            [n, d] => (*n, *d, true),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    detail: format!("input must be 1-D or 2-D, got {xs:?}"),
                })
            }
        };
        let o = match ws.as_slice() {
            [o, wd] if *wd == d => *o,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    detail: format!("weight {ws:?} incompatible with input width {d}"),
                })
            }
        };
        if bs != [o] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("bias {bs:?} must be [{o}]"),
            });
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * o];
        for s in 0..n {
            for j in 0..o {
                let mut acc = bv[j];
                let wrow = &wv[j * d..(j + 1) * d];
                let xrow = &xv[s * d..(s + 1) * d];
                for (wi, xi) in wrow.iter().zip(xrow) {
                    acc += wi * xi;
                }
                out[s * o + j] = acc;
            }
        }
        let shape = if batched { vec![n, o] } else { vec![o] };
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, tracked))
    }

    /// Concatenate values in order, flattening each part; the result is 1-D.
    pub fn concat(&mut self, parts: &[Val]) -> Result<Val, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                detail: "empty part list".into(),
            });
        }
        let mut data = Vec::new();
        let mut tracked = false;
        for &p in parts {
            let t = self.value(p);
            data.extend_from_slice(t.data());
            tracked |= self.tracked(p);
        }
        let value = Tensor { shape: vec![data.len()], data };
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, tracked))
    }

    /// Elementwise product of two same-shape values.
    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor { shape: self.value(a).shape().to_vec(), data };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul { a, b }, tracked))
    }

    pub fn sum_all(&mut self, x: Val) -> Val {
        let s: f64 = self.value(x).data().iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, tracked)
    }

    pub fn mean_all(&mut self, x: Val) -> Val {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(m), Op::MeanAll { x }, tracked)
    }

    /// Average over the spatial plane: `[N, C, H, W] -> [N, C]` (or
    /// `[C, H, W] -> [C]`). With `masks` (one `[H, W]` weight plane per
    /// sample) each element is weighted before averaging, but the divisor
    /// stays the full plane size `H * W` — a mostly-masked-out plane yields a
    /// proportionally small average rather than a renormalized one.
    pub fn spatial_mean(&mut self, x: Val, masks: Option<&[Tensor]>) -> Result<Val, TensorError> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w, batched) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [n, c, h, w] => (*n, *c, *h, *w, true),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "spatial_mean",
                    detail: format!("input must be 3-D or 4-D, got {xs:?}"),
                })
            }
        };
        let hw = h * w;
        let flat_masks = match masks {
            None => None,
            Some(ms) => {
                if ms.len() != n {
                    return Err(TensorError::ShapeMismatch {
                        op: "spatial_mean",
                        detail: format!("{} masks for {} samples", ms.len(), n),
                    });
                }
                let mut flat = Vec::with_capacity(n * hw);
                for m in ms {
                    if m.shape() != [h, w] {
                        return Err(TensorError::ShapeMismatch {
                            op: "spatial_mean",
                            detail: format!("mask {:?} must be [{h}, {w}]", m.shape()),
                        });
                    }
                    flat.extend_from_slice(m.data());
                }
                Some(flat)
            }
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                let sum = match &flat_masks {
                    None => plane.iter().sum::<f64>(),
                    Some(fm) => {
                        let m = &fm[s * hw..(s + 1) * hw];
                        plane.iter().zip(m).map(|(v, mk)| v * mk).sum::<f64>()
                    }
                };
                out[s * c + ch] = sum / hw as f64;
            }
        }
        let shape = if batched { vec![n, c] } else { vec![c] };
        let tracked = self.tracked(x);
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(value, Op::SpatialMean { x, masks: flat_masks }, tracked))
    }

    /// Set-level fusion: reduce `[K, C]` to `[3C]` as the concatenation of
    /// the per-channel mean, population variance, and maximum over the K
    /// set members. Permutation-invariant in K; defined for K = 1 (variance
    /// is zero). Ties in the maximum route gradient to the first maximizer.
    pub fn fuse_stats(&mut self, x: Val) -> Result<Val, TensorError> {
        let xs = self.value(x).shape().to_vec();
        let (k, c) = match xs.as_slice() {
            [k, c] => (*k, *c),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "fuse_stats",
                    detail: format!("input must be [K, C], got {xs:?}"),
                })
            }
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; 3 * c];
        let mut means = vec![0.0; c];
        let mut argmax = vec![0usize; c];
        for ch in 0..c {
            let mut sum = 0.0;
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0;
            for s in 0..k {
                let v = xv[s * c + ch];
                sum += v;
                if v > best {
                    best = v;
                    best_k = s;
                }
            }
            let m = sum / k as f64;
            let var = (0..k).map(|s| (xv[s * c + ch] - m).powi(2)).sum::<f64>() / k as f64;
            out[ch] = m;
            out[c + ch] = var;
            out[2 * c + ch] = best;
            means[ch] = m;
            argmax[ch] = best_k;
        }
        let tracked = self.tracked(x);
        let value = Tensor::from_vec(vec![3 * c], out)?;
        Ok(self.push(value, Op::FuseStats { x, means, argmax }, tracked))
    }

    /// Mean binary cross-entropy over all elements of `p` against `targets`.
    /// Probabilities are clamped to `[EPS_LOSS, 1 - EPS_LOSS]` before the
    /// logs; the clamp is part of the differentiated function, so saturated
    /// probabilities receive zero gradient.
    pub fn bce_loss(&mut self, p: Val, targets: &[f64]) -> Result<Val, TensorError> {
        let pv = self.value(p);
        if pv.numel() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                detail: format!("{} predictions vs {} targets", pv.numel(), targets.len()),
            });
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(TensorError::InvalidArgument {
                op: "bce_loss",
                detail: format!("target {t} outside [0, 1]"),
            });
        }
        let m = targets.len() as f64;
        let mut loss = 0.0;
        for (&pi, &yi) in pv.data().iter().zip(targets) {
            let pc = pi.clamp(EPS_LOSS, 1.0 - EPS_LOSS);
            loss -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        }
        loss /= m;
        let tracked = self.tracked(p);
        Ok(self.push(Tensor::scalar(loss), Op::BceLoss { p, targets: targets.to_vec() }, tracked))
    }

    /// Instance normalization over `[N, C, H, W]`: each (sample, channel)
    /// plane is standardized with its own mean and population variance, then
    /// scaled/shifted by that sample's `[C]` affine pair.
    pub fn instance_norm(
        &mut self,
        x: Val,
        gammas: &[Val],
        betas: &[Val],
        eps: f64,
    ) -> Result<Val, TensorError> {
        let (n, c, hw) = self.check_norm_args("instance_norm", x, gammas, betas)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(n * c);
        for s in 0..n {
            let gv = self.nodes[gammas[s].0].value.data();
            let bv = self.nodes[betas[s].0].value.data();
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let plane = &xv[base..base + hw];
                let mean = plane.iter().sum::<f64>() / hw as f64;
                let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for (i, &v) in plane.iter().enumerate() {
                    out[base + i] = gv[ch] * (v - mean) * inv_std + bv[ch];
                }
                stats.push((mean, inv_std));
            }
        }
        let tracked = self.norm_tracked(x, gammas, betas);
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm { x, gammas: gammas.to_vec(), betas: betas.to_vec(), stats },
            tracked,
        ))
    }

    /// Training-mode batch normalization over `[N, C, H, W]`: per-channel
    /// statistics are computed across the whole (N, H, W) group, while the
    /// affine pair is still selected per sample. Returns the value together
    /// with the per-channel batch mean and biased variance so the caller can
    /// update running statistics. Requires at least two elements per
    /// channel group.
    pub fn batch_norm_train(
        &mut self,
        x: Val,
        gammas: &[Val],
        betas: &[Val],
        eps: f64,
    ) -> Result<(Val, Vec<f64>, Vec<f64>), TensorError> {
        let (n, c, hw) = self.check_norm_args("batch_norm_train", x, gammas, betas)?;
        let group = n * hw;
        if group < 2 {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm_train",
                detail: format!(
                    "needs at least 2 elements per channel to estimate statistics, got {group}"
                ),
            });
        }
        let xv = self.value(x).data();
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                sum += xv[base..base + hw].iter().sum::<f64>();
            }
            let mean = sum / group as f64;
            let mut sq = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                sq += xv[base..base + hw].iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            }
            means[ch] = mean;
            vars[ch] = sq / group as f64;
        }
        let stats: Vec<(f64, f64)> =
            means.iter().zip(&vars).map(|(&m, &v)| (m, 1.0 / (v + eps).sqrt())).collect();
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            let gv = self.nodes[gammas[s].0].value.data();
            let bv = self.nodes[betas[s].0].value.data();
            for ch in 0..c {
                let (mean, inv_std) = stats[ch];
                let base = (s * c + ch) * hw;
                for i in 0..hw {
                    out[base + i] = gv[ch] * (xv[base + i] - mean) * inv_std + bv[ch];
                }
            }
        }
        let tracked = self.norm_tracked(x, gammas, betas);
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), out)?;
        let v = self.push(
            value,
            Op::BatchNormTrain { x, gammas: gammas.to_vec(), betas: betas.to_vec(), stats },
            tracked,
        );
        Ok((v, means, vars))
    }

    /// Inference-mode batch normalization using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Val,
        gammas: &[Val],
        betas: &[Val],
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Val, TensorError> {
        let (n, c, hw) = self.check_norm_args("batch_norm_eval", x, gammas, betas)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm_eval",
                detail: format!(
                    "running stats ({}, {}) must both have length {c}",
                    running_mean.len(),
                    running_var.len()
                ),
            });
        }
        let stats: Vec<(f64, f64)> = running_mean
            .iter()
            .zip(running_var)
            .map(|(&m, &v)| (m, 1.0 / (v + eps).sqrt()))
            .collect();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            let gv = self.nodes[gammas[s].0].value.data();
            let bv = self.nodes[betas[s].0].value.data();
            for ch in 0..c {
                let (mean, inv_std) = stats[ch];
                let base = (s * c + ch) * hw;
                for i in 0..hw {
                    out[base + i] = gv[ch] * (xv[base + i] - mean) * inv_std + bv[ch];
                }
            }
        }
        let tracked = self.norm_tracked(x, gammas, betas);
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval { x, gammas: gammas.to_vec(), betas: betas.to_vec(), stats },
            tracked,
        ))
    }

    fn check_norm_args(
        &self,
        op: &'static str,
        x: Val,
        gammas: &[Val],
        betas: &[Val],
    ) -> Result<(usize, usize, usize), TensorError> {
        let xs = self.value(x).shape();
        let (n, c, h, w) = match xs {
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    detail: format!("input must be [N, C, H, W], got {xs:?}"),
                })
            }
        };
        if gammas.len() != n || betas.len() != n {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!(
                    "{} scale and {} shift vectors for {n} samples",
                    gammas.len(),
                    betas.len()
                ),
            });
        }
        for &v in gammas.iter().chain(betas) {
            if self.value(v).shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op,
                    detail: format!(
                        "affine vectors must be [{c}], got {:?}",
                        self.value(v).shape()
                    ),
                });
            }
        }
        Ok((n, c, h * w))
    }

    fn norm_tracked(&self, x: Val, gammas: &[Val], betas: &[Val]) -> bool {
        self.tracked(x)
            || gammas.iter().any(|&v| self.tracked(v))
            || betas.iter().any(|&v| self.tracked(v))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar loss. Consumes the tape's one backward
    /// budget; leaf gradients are readable via [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Val) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let node = &self.nodes[loss.0];
        if !node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.tracked {
            return Err(TensorError::DetachedBackward);
        }
        self.consumed = true;
        self.nodes[loss.0].grad = vec![1.0];

        for i in (0..=loss.0).rev() {
            let (prefix, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.tracked || node.grad.is_empty() {
                continue;
            }
            let g = std::mem::take(&mut node.grad);
            let out_value = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, dims } => {
                    let need_dx = prefix[x.0].tracked;
                    let (dx, dw, db) = conv2d_backward(
                        prefix[x.0].value.data(),
                        prefix[w.0].value.data(),
                        &g,
                        dims,
                        need_dx,
                    );
                    if need_dx {
                        accumulate(ensure_grad(&mut prefix[x.0]), &dx);
                    }
                    if prefix[w.0].tracked {
                        accumulate(ensure_grad(&mut prefix[w.0]), &dw);
                    }
                    if prefix[b.0].tracked {
                        accumulate(ensure_grad(&mut prefix[b.0]), &db);
                    }
                }
                Op::Relu { x } => {
                    if prefix[x.0].tracked {
                        let nx = &mut prefix[x.0];
                        let xv = &nx.value;
                        if nx.grad.is_empty() {
                            nx.grad = vec![0.0; xv.numel()];
                        }
                        for (i, &gi) in g.iter().enumerate() {
                            if xv.data()[i] > 0.0 {
                                nx.grad[i] += gi;
                            }
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if prefix[x.0].tracked {
                        let sv = out_value.data();
                        let gx = ensure_grad(&mut prefix[x.0]);
                        for (i, &gi) in g.iter().enumerate() {
                            gx[i] += gi * sv[i] * (1.0 - sv[i]);
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (n, d) = match prefix[x.0].value.shape() {
                        [d] => (1, *d),
                        [n, d] => (*n, *d),
                        _ => unreachable!("validated at forward"),
                    };
                    let o = prefix[b.0].value.numel();
                    let (dx, dw, db) = {
                        let xv = prefix[x.0].value.data();
                        let wv = prefix[w.0].value.data();
                        let mut dx = vec![0.0; xv.len()];
                        let mut dw = vec![0.0; wv.len()];
                        let mut db = vec![0.0; o];
                        for s in 0..n {
                            for j in 0..o {
                                let gj = g[s * o + j];
                                db[j] += gj;
                                for k in 0..d {
                                    dx[s * d + k] += gj * wv[j * d + k];
                                    dw[j * d + k] += gj * xv[s * d + k];
                                }
                            }
                        }
                        (dx, dw, db)
                    };
                    if prefix[x.0].tracked {
                        accumulate(ensure_grad(&mut prefix[x.0]), &dx);
                    }
                    if prefix[w.0].tracked {
                        accumulate(ensure_grad(&mut prefix[w.0]), &dw);
                    }
                    if prefix[b.0].tracked {
                        accumulate(ensure_grad(&mut prefix[b.0]), &db);
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = prefix[p.0].value.numel();
                        if prefix[p.0].tracked {
                            accumulate(ensure_grad(&mut prefix[p.0]), &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::Mul { a, b } => {
                    if a == b {
                        let na = &mut prefix[a.0];
                        if na.tracked {
                            let av = &na.value;
                            if na.grad.is_empty() {
                                na.grad = vec![0.0; av.numel()];
                            }
                            for (i, &gi) in g.iter().enumerate() {
                                na.grad[i] += 2.0 * gi * av.data()[i];
                            }
                        }
                    } else {
                        let (na, nb) = pair_mut(prefix, a.0, b.0);
                        if na.tracked {
                            let bv = nb.value.data();
                            let ga = ensure_grad(na);
                            for (i, &gi) in g.iter().enumerate() {
                                ga[i] += gi * bv[i];
                            }
                        }
                        if nb.tracked {
                            let av = na.value.data();
                            let gb = ensure_grad(nb);
                            for (i, &gi) in g.iter().enumerate() {
                                gb[i] += gi * av[i];
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    if prefix[x.0].tracked {
                        let gx = ensure_grad(&mut prefix[x.0]);
                        gx.iter_mut().for_each(|v| *v += g[0]);
                    }
                }
                Op::MeanAll { x } => {
                    if prefix[x.0].tracked {
                        let n = prefix[x.0].value.numel() as f64;
                        let gx = ensure_grad(&mut prefix[x.0]);
                        gx.iter_mut().for_each(|v| *v += g[0] / n);
                    }
                }
                Op::SpatialMean { x, masks } => {
                    if prefix[x.0].tracked {
                        let shape = prefix[x.0].value.shape().to_vec();
                        let (n, c, hw) = match shape.as_slice() {
                            [c, h, w] => (1, *c, h * w),
                            [n, c, h, w] => (*n, *c, h * w),
                            _ => unreachable!("validated at forward"),
                        };
                        let gx = ensure_grad(&mut prefix[x.0]);
                        let scale = 1.0 / hw as f64;
                        for s in 0..n {
                            for ch in 0..c {
                                let gi = g[s * c + ch] * scale;
                                let base = (s * c + ch) * hw;
                                match masks {
                                    None => {
                                        gx[base..base + hw].iter_mut().for_each(|v| *v += gi)
                                    }
                                    Some(m) => {
                                        let mrow = &m[s * hw..(s + 1) * hw];
                                        for (slot, mk) in
                                            gx[base..base + hw].iter_mut().zip(mrow)
                                        {
                                            *slot += gi * mk;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::FuseStats { x, means, argmax } => {
                    if prefix[x.0].tracked {
                        let nx = &mut prefix[x.0];
                        let k = nx.value.shape()[0];
                        let c = nx.value.shape()[1];
                        if nx.grad.is_empty() {
                            nx.grad = vec![0.0; nx.value.numel()];
                        }
                        let xv = nx.value.data();
                        for ch in 0..c {
                            let gm = g[ch] / k as f64;
                            let gv = g[c + ch];
                            for s in 0..k {
                                nx.grad[s * c + ch] +=
                                    gm + gv * 2.0 * (xv[s * c + ch] - means[ch]) / k as f64;
                            }
                            nx.grad[argmax[ch] * c + ch] += g[2 * c + ch];
                        }
                    }
                }
                Op::BceLoss { p, targets } => {
                    if prefix[p.0].tracked {
                        let np = &mut prefix[p.0];
                        if np.grad.is_empty() {
                            np.grad = vec![0.0; np.value.numel()];
                        }
                        let m = targets.len() as f64;
                        for (i, (&pi, &yi)) in np.value.data().iter().zip(targets).enumerate() {
                            if pi <= EPS_LOSS || pi >= 1.0 - EPS_LOSS {
                                continue; // clamp region: flat
                            }
                            np.grad[i] += g[0] * (pi - yi) / (pi * (1.0 - pi)) / m;
                        }
                    }
                }
                Op::InstanceNorm { x, gammas, betas, stats } => {
                    backward_norm(prefix, &g, *x, gammas, betas, stats, NormKind::Instance);
                }
                Op::BatchNormTrain { x, gammas, betas, stats } => {
                    backward_norm(prefix, &g, *x, gammas, betas, stats, NormKind::BatchTrain);
                }
                Op::BatchNormEval { x, gammas, betas, stats } => {
                    backward_norm(prefix, &g, *x, gammas, betas, stats, NormKind::BatchEval);
                }
            }
            node.grad = g;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum NormKind {
    Instance,
    BatchTrain,
    BatchEval,
}

/// Shared backward for the three normalization flavours. `stats` is
/// (mean, inv_std) per (sample, channel) group for instance norm and per
/// channel for the batch variants.
fn backward_norm(
    prefix: &mut [Node],
    g: &[f64],
    x: Val,
    gammas: &[Val],
    betas: &[Val],
    stats: &[(f64, f64)],
    kind: NormKind,
) {
    let (n, c, hw) = match prefix[x.0].value.shape() {
        [n, c, h, w] => (*n, *c, h * w),
        _ => unreachable!("validated at forward"),
    };
    // Affine values are small; copy them out so the input node can be
    // mutated while they are read.
    let gvals: Vec<Vec<f64>> =
        gammas.iter().map(|&v| prefix[v.0].value.data().to_vec()).collect();
    let mut dgamma = vec![0.0; n * c];
    let mut dbeta = vec![0.0; n * c];

    let x_tracked = prefix[x.0].tracked;
    {
        let nx = &mut prefix[x.0];
        if x_tracked && nx.grad.is_empty() {
            nx.grad = vec![0.0; nx.value.numel()];
        }
        let xv = nx.value.data();
        match kind {
            NormKind::Instance => {
                for s in 0..n {
                    for ch in 0..c {
                        let (mean, inv_std) = stats[s * c + ch];
                        let gamma = gvals[s][ch];
                        let base = (s * c + ch) * hw;
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for i in 0..hw {
                            let xh = (xv[base + i] - mean) * inv_std;
                            let dxh = g[base + i] * gamma;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                            dgamma[s * c + ch] += g[base + i] * xh;
                            dbeta[s * c + ch] += g[base + i];
                        }
                        if x_tracked {
                            let inv_m = 1.0 / hw as f64;
                            for i in 0..hw {
                                let xh = (xv[base + i] - mean) * inv_std;
                                let dxh = g[base + i] * gamma;
                                nx.grad[base + i] += inv_std
                                    * (dxh - sum_dxh * inv_m - xh * sum_dxh_xh * inv_m);
                            }
                        }
                    }
                }
            }
            NormKind::BatchTrain => {
                let group = (n * hw) as f64;
                for ch in 0..c {
                    let (mean, inv_std) = stats[ch];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for s in 0..n {
                        let gamma = gvals[s][ch];
                        let base = (s * c + ch) * hw;
                        for i in 0..hw {
                            let xh = (xv[base + i] - mean) * inv_std;
                            let dxh = g[base + i] * gamma;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                            dgamma[s * c + ch] += g[base + i] * xh;
                            dbeta[s * c + ch] += g[base + i];
                        }
                    }
                    if x_tracked {
                        for s in 0..n {
                            let gamma = gvals[s][ch];
                            let base = (s * c + ch) * hw;
                            for i in 0..hw {
                                let xh = (xv[base + i] - mean) * inv_std;
                                let dxh = g[base + i] * gamma;
                                nx.grad[base + i] += inv_std
                                    * (dxh - sum_dxh / group - xh * sum_dxh_xh / group);
                            }
                        }
                    }
                }
            }
            NormKind::BatchEval => {
                // Statistics are constants here: dx is just g * gamma * inv_std.
                for s in 0..n {
                    for ch in 0..c {
                        let (mean, inv_std) = stats[ch];
                        let gamma = gvals[s][ch];
                        let base = (s * c + ch) * hw;
                        for i in 0..hw {
                            let xh = (xv[base + i] - mean) * inv_std;
                            dgamma[s * c + ch] += g[base + i] * xh;
                            dbeta[s * c + ch] += g[base + i];
                            if x_tracked {
                                nx.grad[base + i] += g[base + i] * gamma * inv_std;
                            }
                        }
                    }
                }
            }
        }
    }
    for s in 0..n {
        if prefix[gammas[s].0].tracked {
            accumulate(ensure_grad(&mut prefix[gammas[s].0]), &dgamma[s * c..(s + 1) * c]);
        }
        if prefix[betas[s].0].tracked {
            accumulate(ensure_grad(&mut prefix[betas[s].0]), &dbeta[s * c..(s + 1) * c]);
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
