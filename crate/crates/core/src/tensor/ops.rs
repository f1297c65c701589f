//! Differentiable tensor operations.
//!
//! Elementwise binaries broadcast across singleton axes of equal-rank
//! operands (the only pattern the mask-calibration pipeline needs); matmul
//! additionally broadcasts a rank-2 operand over the other side's leading
//! batch dimensions. Every op registers a local gradient rule when at least
//! one input tracks gradients.

use super::{numel_of, Tensor};
use crate::error::{Error, Result};

/// Map a flat index in `out_shape` to the flat index in `src_shape`, where
/// `src_shape` has the same rank and size-1 axes are broadcast.
fn map_broadcast_index(flat: usize, out_shape: &[usize], src_shape: &[usize]) -> usize {
    let mut rem = flat;
    let mut src_flat = 0;
    let mut src_stride = 1;
    // Walk axes right to left so both strides build up together.
    for axis in (0..out_shape.len()).rev() {
        let coord = rem % out_shape[axis];
        rem /= out_shape[axis];
        let src_coord = if src_shape[axis] == 1 { 0 } else { coord };
        src_flat += src_coord * src_stride;
        src_stride *= src_shape[axis];
    }
    src_flat
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            if da == db || db == 1 {
                Ok(da.max(db))
            } else if da == 1 {
                Ok(db)
            } else {
                Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        })
        .collect()
}

fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    // Local derivatives (d out / d a, d out / d b) as functions of the two
    // input values.
    dfa: impl Fn(f64, f64) -> f64 + 'static,
    dfb: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let a_shape = a.shape();
    let b_shape = b.shape();
    let out_shape = broadcast_shape(op, &a_shape, &b_shape)?;
    let a_data = a.to_vec();
    let b_data = b.to_vec();
    let n = numel_of(&out_shape);
    let mut data = Vec::with_capacity(n);
    for flat in 0..n {
        let av = a_data[map_broadcast_index(flat, &out_shape, &a_shape)];
        let bv = b_data[map_broadcast_index(flat, &out_shape, &b_shape)];
        data.push(f(av, bv));
    }
    let (a_in, b_in) = (a.clone(), b.clone());
    let rule_shape = out_shape.clone();
    let rule = move |g: &[f64]| -> Vec<Vec<f64>> {
        let a_data = a_in.to_vec();
        let b_data = b_in.to_vec();
        let mut ga = vec![0.0; numel_of(&a_shape)];
        let mut gb = vec![0.0; numel_of(&b_shape)];
        for (flat, &gv) in g.iter().enumerate() {
            let ai = map_broadcast_index(flat, &rule_shape, &a_shape);
            let bi = map_broadcast_index(flat, &rule_shape, &b_shape);
            ga[ai] += gv * dfa(a_data[ai], b_data[bi]);
            gb[bi] += gv * dfb(a_data[ai], b_data[bi]);
        }
        vec![ga, gb]
    };
    Ok(Tensor::op_or_leaf(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(rule),
    ))
}

impl Tensor {
    pub(crate) fn op_or_leaf(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        rule: Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>,
    ) -> Tensor {
        if inputs.iter().any(|t| t.tracks_grad()) {
            Tensor::with_op(shape, data, inputs, rule)
        } else {
            Tensor::leaf(shape, data)
        }
    }

    /// Elementwise sum with singleton broadcasting.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_broadcast("add", self, rhs, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    /// Elementwise difference with singleton broadcasting.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_broadcast("sub", self, rhs, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    /// Elementwise (Hadamard) product with singleton broadcasting.
    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_broadcast("hadamard", self, rhs, |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Elementwise quotient with singleton broadcasting.
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_broadcast(
            "div",
            self,
            rhs,
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let shape = self.shape();
        let data = self.to_vec().iter().map(|v| v * c).collect();
        let rule = move |g: &[f64]| vec![g.iter().map(|v| v * c).collect()];
        Tensor::op_or_leaf(shape, data, vec![self.clone()], Box::new(rule))
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let shape = self.shape();
        let data = self.to_vec().iter().map(|v| v + c).collect();
        let rule = move |g: &[f64]| vec![g.to_vec()];
        Tensor::op_or_leaf(shape, data, vec![self.clone()], Box::new(rule))
    }

    /// Add a 1-D bias over the last axis.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        let b_shape = bias.shape();
        let d = *shape.last().expect("add_bias on 0-d tensor");
        if b_shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: shape,
                rhs: b_shape,
            });
        }
        let b_data = bias.to_vec();
        let data: Vec<f64> = self
            .to_vec()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b_data[i % d])
            .collect();
        let rule = move |g: &[f64]| {
            let mut gb = vec![0.0; d];
            for (i, &gv) in g.iter().enumerate() {
                gb[i % d] += gv;
            }
            vec![g.to_vec(), gb]
        };
        Ok(Tensor::op_or_leaf(
            shape,
            data,
            vec![self.clone(), bias.clone()],
            Box::new(rule),
        ))
    }

    /// Smooth GELU activation (tanh form).
    pub fn gelu(&self) -> Tensor {
        const C0: f64 = 0.7978845608028654; // sqrt(2/pi)
        const C1: f64 = 0.044715;
        let shape = self.shape();
        let x = self.to_vec();
        let data: Vec<f64> = x
            .iter()
            .map(|&v| {
                let u = C0 * (v + C1 * v * v * v);
                0.5 * v * (1.0 + u.tanh())
            })
            .collect();
        let rule = move |g: &[f64]| {
            let dx: Vec<f64> = x
                .iter()
                .zip(g)
                .map(|(&v, &gv)| {
                    let u = C0 * (v + C1 * v * v * v);
                    let t = u.tanh();
                    let sech2 = 1.0 - t * t;
                    gv * (0.5 * (1.0 + t) + 0.5 * v * sech2 * C0 * (1.0 + 3.0 * C1 * v * v))
                })
                .collect();
            vec![dx]
        };
        Tensor::op_or_leaf(shape, data, vec![self.clone()], Box::new(rule))
    }

    /// Batched matrix product `[..., m, k] x [..., k, p] -> [..., m, p]`.
    /// A rank-2 operand broadcasts over the other side's leading dimensions.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let a_shape = self.shape();
        let b_shape = rhs.shape();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.clone(),
            rhs: b_shape.clone(),
        };
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (k2, p) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let a_lead = &a_shape[..a_shape.len() - 2];
        let b_lead = &b_shape[..b_shape.len() - 2];
        let (lead, a_bcast, b_bcast) = if a_lead == b_lead {
            (a_lead.to_vec(), false, false)
        } else if b_lead.is_empty() {
            (a_lead.to_vec(), false, true)
        } else if a_lead.is_empty() {
            (b_lead.to_vec(), true, false)
        } else {
            return Err(mismatch());
        };
        let batches = numel_of(&lead);
        let a_data = self.to_vec();
        let b_data = rhs.to_vec();
        let mut data = vec![0.0; batches * m * p];
        for bi in 0..batches {
            let a_off = if a_bcast { 0 } else { bi * m * k };
            let b_off = if b_bcast { 0 } else { bi * k * p };
            let o_off = bi * m * p;
            for i in 0..m {
                for l in 0..k {
                    let av = a_data[a_off + i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..p {
                        data[o_off + i * p + j] += av * b_data[b_off + l * p + j];
                    }
                }
            }
        }
        let mut out_shape = lead.clone();
        out_shape.push(m);
        out_shape.push(p);
        let (a_in, b_in) = (self.clone(), rhs.clone());
        let rule = move |g: &[f64]| {
            let a_data = a_in.to_vec();
            let b_data = b_in.to_vec();
            let mut ga = vec![0.0; a_data.len()];
            let mut gb = vec![0.0; b_data.len()];
            for bi in 0..batches {
                let a_off = if a_bcast { 0 } else { bi * m * k };
                let b_off = if b_bcast { 0 } else { bi * k * p };
                let o_off = bi * m * p;
                // dA = g . B^T, dB = A^T . g, summed over broadcast batches.
                for i in 0..m {
                    for j in 0..p {
                        let gv = g[o_off + i * p + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            ga[a_off + i * k + l] += gv * b_data[b_off + l * p + j];
                            gb[b_off + l * p + j] += gv * a_data[a_off + i * k + l];
                        }
                    }
                }
            }
            vec![ga, gb]
        };
        Ok(Tensor::op_or_leaf(
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(rule),
        ))
    }

    /// Softmax over the last axis, stabilized by per-slice max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::InvalidAxis {
                op: "softmax_lastdim",
                axis: 0,
                shape,
            });
        }
        let d = *shape.last().unwrap();
        let x = self.to_vec();
        let mut data = vec![0.0; x.len()];
        for row in x.chunks(d).zip(data.chunks_mut(d)) {
            let (src, dst) = row;
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (s, o) in src.iter().zip(dst.iter_mut()) {
                *o = (s - max).exp();
                sum += *o;
            }
            for o in dst.iter_mut() {
                *o /= sum;
            }
        }
        let y = data.clone();
        let rule = move |g: &[f64]| {
            let mut dx = vec![0.0; g.len()];
            for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((yv, gv), dv) in yr.iter().zip(gr).zip(dr.iter_mut()) {
                    *dv = yv * (gv - dot);
                }
            }
            vec![dx]
        };
        Ok(Tensor::op_or_leaf(
            shape,
            data,
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    /// Reinterpret the buffer under a new shape with equal element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if numel_of(new_shape) != self.numel() || new_shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.to_vec();
        let rule = move |g: &[f64]| vec![g.to_vec()];
        Ok(Tensor::op_or_leaf(
            new_shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose_last2",
                axis: shape.len(),
                shape,
            });
        }
        let r = shape[shape.len() - 2];
        let c = shape[shape.len() - 1];
        let batches = self.numel() / (r * c);
        let x = self.to_vec();
        let data = transpose2(&x, batches, r, c);
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let rule = move |g: &[f64]| vec![transpose2(g, batches, c, r)];
        Ok(Tensor::op_or_leaf(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "slice_axis",
                axis,
                shape,
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Config(format!(
                "slice_axis: range {start}..{} exceeds axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let x = self.to_vec();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src_numel = self.numel();
        let rule = move |g: &[f64]| {
            let mut dx = vec![0.0; src_numel];
            for o in 0..outer {
                let dst = (o * axis_len + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![dx]
        };
        Ok(Tensor::op_or_leaf(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    /// Tile `times` copies along `axis`; each copy equals the source slab
    /// bit-exactly and gradients sum over the copies.
    pub fn repeat_axis(&self, axis: usize, times: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "repeat_axis",
                axis,
                shape,
            });
        }
        if times == 0 {
            return Err(Error::Config("repeat_axis: times must be >= 1".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let block = axis_len * inner;
        let x = self.to_vec();
        let mut data = Vec::with_capacity(x.len() * times);
        for o in 0..outer {
            let src = &x[o * block..(o + 1) * block];
            for _ in 0..times {
                data.extend_from_slice(src);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = axis_len * times;
        let rule = move |g: &[f64]| {
            let mut dx = vec![0.0; outer * block];
            for o in 0..outer {
                for t in 0..times {
                    let src = (o * times + t) * block;
                    for j in 0..block {
                        dx[o * block + j] += g[src + j];
                    }
                }
            }
            vec![dx]
        };
        Ok(Tensor::op_or_leaf(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    /// Arithmetic mean over axis 0, keeping a leading axis of size 1.
    pub fn mean_axis0(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::InvalidAxis {
                op: "mean_axis0",
                axis: 0,
                shape,
            });
        }
        let d0 = shape[0];
        let block = self.numel() / d0;
        let x = self.to_vec();
        let mut data = vec![0.0; block];
        for i in 0..d0 {
            for j in 0..block {
                data[j] += x[i * block + j];
            }
        }
        for v in data.iter_mut() {
            *v /= d0 as f64;
        }
        let mut out_shape = shape.clone();
        out_shape[0] = 1;
        let rule = move |g: &[f64]| {
            let mut dx = vec![0.0; d0 * block];
            for i in 0..d0 {
                for j in 0..block {
                    dx[i * block + j] = g[j] / d0 as f64;
                }
            }
            vec![dx]
        };
        Ok(Tensor::op_or_leaf(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    /// Sum of all elements as a scalar-shaped tensor.
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.to_vec().iter().sum();
        let n = self.numel();
        let rule = move |g: &[f64]| vec![vec![g[0]; n]];
        Tensor::op_or_leaf(vec![1], vec![total], vec![self.clone()], Box::new(rule))
    }

    /// Layer normalization over the last axis with trainable scale/shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape();
        let d = *shape.last().expect("layer_norm on 0-d tensor");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape(),
            });
        }
        let rows = self.numel() / d;
        let x = self.to_vec();
        let g_data = gamma.to_vec();
        let b_data = beta.to_vec();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                data[r * d + j] = g_data[j] * h + b_data[j];
            }
        }
        let gamma_in = gamma.clone();
        let rule = move |g: &[f64]| {
            let gamma_d = gamma_in.to_vec();
            let mut dx = vec![0.0; rows * d];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..rows {
                let inv = inv_std[r];
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    dgamma[j] += gr[j] * hr[j];
                    dbeta[j] += gr[j];
                    let dh = gr[j] * gamma_d[j];
                    m1 += dh;
                    m2 += dh * hr[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    let dh = gr[j] * gamma_d[j];
                    dx[r * d + j] = inv * (dh - m1 - hr[j] * m2);
                }
            }
            vec![dx, dgamma, dbeta]
        };
        Ok(Tensor::op_or_leaf(
            shape,
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(rule),
        ))
    }

    /// Mean cross-entropy over rows of a `[rows, classes]` logit matrix,
    /// computed with a stabilized log-sum-exp.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Config(format!(
                "cross_entropy_rows expects a 2-d logit matrix, got {shape:?}"
            )));
        }
        let (rows, classes) = (shape[0], shape[1]);
        if targets.len() != rows {
            return Err(Error::Config(format!(
                "cross_entropy_rows: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Config(format!(
                "cross_entropy_rows: class index {bad} out of range 0..{classes}"
            )));
        }
        let x = self.to_vec();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let e = (z - max).exp();
                probs[r * classes + j] = e;
                sum += e;
            }
            for j in 0..classes {
                probs[r * classes + j] /= sum;
            }
            let lse = max + sum.ln();
            total += lse - row[targets[r]];
        }
        let mean = total / rows as f64;
        let targets = targets.to_vec();
        let rule = move |g: &[f64]| {
            let scale = g[0] / rows as f64;
            let mut dx = vec![0.0; rows * classes];
            for r in 0..rows {
                for j in 0..classes {
                    let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                    dx[r * classes + j] = (probs[r * classes + j] - indicator) * scale;
                }
            }
            vec![dx]
        };
        Ok(Tensor::op_or_leaf(
            vec![1],
            vec![mean],
            vec![self.clone()],
            Box::new(rule),
        ))
    }

    /// 2x2-kernel, stride-2 transposed convolution (non-overlapping scatter):
    /// `[b, c_in, h, w] -> [b, c_out, 2h, 2w]`.
    pub fn conv_transpose2x2(&self, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let x_shape = self.shape();
        let k_shape = kernel.shape();
        if x_shape.len() != 4 || k_shape.len() != 4 || k_shape[2] != 2 || k_shape[3] != 2 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2x2",
                lhs: x_shape,
                rhs: k_shape,
            });
        }
        let (b, ci, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let co = k_shape[1];
        if k_shape[0] != ci || bias.shape() != [co] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2x2",
                lhs: x_shape,
                rhs: k_shape,
            });
        }
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.to_vec();
        let k = kernel.to_vec();
        let bias_d = bias.to_vec();
        let mut data = vec![0.0; b * co * oh * ow];
        for bi in 0..b {
            for o in 0..co {
                let out_base = (bi * co + o) * oh * ow;
                for v in &mut data[out_base..out_base + oh * ow] {
                    *v = bias_d[o];
                }
                for c in 0..ci {
                    let in_base = (bi * ci + c) * h * w;
                    let k_base = (c * co + o) * 4;
                    for y in 0..h {
                        for xcol in 0..w {
                            let xv = x[in_base + y * w + xcol];
                            if xv == 0.0 {
                                continue;
                            }
                            for ky in 0..2 {
                                for kx in 0..2 {
                                    data[out_base + (2 * y + ky) * ow + (2 * xcol + kx)] +=
                                        xv * k[k_base + ky * 2 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let (x_in, k_in) = (self.clone(), kernel.clone());
        let rule = move |g: &[f64]| {
            let x = x_in.to_vec();
            let k = k_in.to_vec();
            let mut dx = vec![0.0; x.len()];
            let mut dk = vec![0.0; k.len()];
            let mut dbias = vec![0.0; co];
            for bi in 0..b {
                for o in 0..co {
                    let out_base = (bi * co + o) * oh * ow;
                    for gv in &g[out_base..out_base + oh * ow] {
                        dbias[o] += gv;
                    }
                    for c in 0..ci {
                        let in_base = (bi * ci + c) * h * w;
                        let k_base = (c * co + o) * 4;
                        for y in 0..h {
                            for xcol in 0..w {
                                let xv = x[in_base + y * w + xcol];
                                let mut acc = 0.0;
                                for ky in 0..2 {
                                    for kx in 0..2 {
                                        let gv =
                                            g[out_base + (2 * y + ky) * ow + (2 * xcol + kx)];
                                        acc += gv * k[k_base + ky * 2 + kx];
                                        dk[k_base + ky * 2 + kx] += gv * xv;
                                    }
                                }
                                dx[in_base + y * w + xcol] += acc;
                            }
                        }
                    }
                }
            }
            vec![dx, dk, dbias]
        };
        Ok(Tensor::op_or_leaf(
            vec![b, co, oh, ow],
            data,
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(rule),
        ))
    }
}

fn transpose2(x: &[f64], batches: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batches {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = x[base + i * c + j];
            }
        }
    }
    out
}

/// Concatenate tensors along `axis`; all other axes must agree.
pub fn concat_axis(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Config("concat: empty part list".into()));
    }
    let first_shape = parts[0].shape();
    if axis >= first_shape.len() {
        return Err(Error::InvalidAxis {
            op: "concat",
            axis,
            shape: first_shape,
        });
    }
    for p in parts {
        let s = p.shape();
        let same = s.len() == first_shape.len()
            && s.iter()
                .zip(&first_shape)
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !same {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first_shape,
                rhs: s,
            });
        }
    }
    let outer: usize = first_shape[..axis].iter().product();
    let inner: usize = first_shape[axis + 1..].iter().product();
    let axis_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total_axis: usize = axis_lens.iter().sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    let part_data: Vec<Vec<f64>> = parts.iter().map(|p| p.to_vec()).collect();
    for o in 0..outer {
        for (pd, &alen) in part_data.iter().zip(&axis_lens) {
            let base = o * alen * inner;
            data.extend_from_slice(&pd[base..base + alen * inner]);
        }
    }
    let mut out_shape = first_shape.clone();
    out_shape[axis] = total_axis;
    let lens = axis_lens.clone();
    let rule = move |g: &[f64]| {
        let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| vec![0.0; outer * l * inner]).collect();
        for o in 0..outer {
            let mut offset = 0;
            for (gi, &alen) in lens.iter().enumerate() {
                let src = (o * total_axis + offset) * inner;
                let dst = o * alen * inner;
                grads[gi][dst..dst + alen * inner]
                    .copy_from_slice(&g[src..src + alen * inner]);
                offset += alen;
            }
        }
        grads
    };
    Ok(Tensor::op_or_leaf(
        out_shape,
        data,
        parts.to_vec(),
        Box::new(rule),
    ))
}

/// Concatenate along axis 0.
pub fn concat_axis0(parts: &[Tensor]) -> Result<Tensor> {
    concat_axis(parts, 0)
}
