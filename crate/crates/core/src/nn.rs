//! Neural building blocks: linear layers with optional low-rank adapters,
//! single-head attention with adapted query/value projections, MLPs, layer
//! normalization, the stride-2 transposed-convolution upscaler, and a frozen
//! Fourier positional encoder.

use std::cell::Cell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Plain affine projection `x . W + b` with `W: [c_in, c_out]`.
///
/// Frozen layers keep `requires_grad = false` on both tensors and stay
/// bit-identical across any number of optimizer steps.
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub frozen: bool,
}

impl LinearLayer {
    pub fn random<R: Rng>(c_in: usize, c_out: usize, frozen: bool, rng: &mut R) -> Self {
        let std = 1.0 / (c_in as f64).sqrt();
        let weight = Tensor::randn(&[c_in, c_out], std, rng);
        let bias = Tensor::zeros(&[c_out]);
        weight.set_requires_grad(!frozen);
        bias.set_requires_grad(!frozen);
        LinearLayer { weight, bias, frozen }
    }

    /// Square projection initialized near the identity: `W = I + noise`.
    /// Stands in for a pretrained projection that roughly preserves token
    /// geometry, so positional features stay aligned across Q/K at init.
    pub fn random_near_identity<R: Rng>(
        dim: usize,
        noise_std: f64,
        frozen: bool,
        rng: &mut R,
    ) -> Self {
        let weight = Tensor::randn(&[dim, dim], noise_std, rng);
        weight.update_data(|d| {
            for i in 0..dim {
                d[i * dim + i] += 1.0;
            }
        });
        let bias = Tensor::zeros(&[dim]);
        weight.set_requires_grad(!frozen);
        bias.set_requires_grad(!frozen);
        LinearLayer { weight, bias, frozen }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }
}

/// Trainable low-rank factors `A: [r, c_in]`, `B: [c_out, r]` with
/// `r < min(c_in, c_out)` strictly. `A` starts Gaussian with variance `1/r`,
/// `B` starts at zero so the adapted layer is initially the base layer.
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank >= c_in.min(c_out) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} must satisfy 0 < r < min({c_in}, {c_out})"
            )));
        }
        let a = Tensor::randn(&[rank, c_in], (1.0 / rank as f64).sqrt(), rng);
        let b = Tensor::zeros(&[c_out, rank]);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Ok(LoraAdapter { a, b, rank })
    }
}

/// Frozen base projection plus an optional trainable low-rank update.
pub struct LoraLinear {
    pub base: LinearLayer,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    pub fn frozen_base<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        LoraLinear {
            base: LinearLayer::random(c_in, c_out, true, rng),
            adapter: None,
        }
    }

    pub fn with_adapter<R: Rng>(
        c_in: usize,
        c_out: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LoraLinear {
            base: LinearLayer::random(c_in, c_out, true, rng),
            adapter: Some(LoraAdapter::new(c_in, c_out, rank, rng)?),
        })
    }

    /// Effective weight `W + (B.A)^T`, oriented so `forward(x) = x . W_hat`.
    /// Without an adapter this is the base weight itself.
    pub fn effective_weight(&self) -> Result<Tensor> {
        match &self.adapter {
            None => Ok(self.base.weight.clone()),
            Some(ad) => {
                let delta = ad.b.matmul(&ad.a)?.transpose_last2()?;
                self.base.weight.add(&delta)
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.effective_weight()?)?.add_bias(&self.base.bias)
    }
}

/// Single-head scaled dot-product attention. Query and value projections
/// carry low-rank adapters; the key projection never does. The output
/// projection is a plain trainable layer.
pub struct AttentionBlock {
    pub q_proj: LoraLinear,
    pub k_proj: LoraLinear,
    pub v_proj: LoraLinear,
    pub out_proj: LinearLayer,
    pub head_dim: usize,
}

impl AttentionBlock {
    /// Adapted variant: frozen near-identity Q/K/V bases (standing in for a
    /// pretrained attention whose positional geometry is already aligned),
    /// adapters on Q and V, trainable output projection.
    pub fn with_lora<R: Rng>(dim: usize, rank: usize, rng: &mut R) -> Result<Self> {
        let noise = 0.25 / (dim as f64).sqrt();
        let base = |rng: &mut R| LinearLayer::random_near_identity(dim, noise, true, rng);
        let out_proj = LinearLayer::random(dim, dim, false, rng);
        Ok(AttentionBlock {
            q_proj: LoraLinear {
                base: base(rng),
                adapter: Some(LoraAdapter::new(dim, dim, rank, rng)?),
            },
            k_proj: LoraLinear {
                base: base(rng),
                adapter: None,
            },
            v_proj: LoraLinear {
                base: base(rng),
                adapter: Some(LoraAdapter::new(dim, dim, rank, rng)?),
            },
            out_proj,
            head_dim: dim,
        })
    }

    /// Fully frozen variant (used by the toy image encoder); no adapters.
    pub fn frozen<R: Rng>(dim: usize, rng: &mut R) -> Self {
        AttentionBlock {
            q_proj: LoraLinear::frozen_base(dim, dim, rng),
            k_proj: LoraLinear::frozen_base(dim, dim, rng),
            v_proj: LoraLinear::frozen_base(dim, dim, rng),
            out_proj: LinearLayer::random(dim, dim, true, rng),
            head_dim: dim,
        }
    }

    /// `softmax(Q K^T / sqrt(d_k)) V` followed by the output projection.
    /// Self-attention passes the same tensor for both arguments.
    pub fn forward(&self, queries: &Tensor, keys_values: &Tensor) -> Result<Tensor> {
        self.forward_qkv(queries, keys_values, keys_values)
    }

    /// Attention with separate query/key/value sources, for blocks that mix
    /// positional features into queries and keys only.
    pub fn forward_qkv(&self, q_in: &Tensor, k_in: &Tensor, v_in: &Tensor) -> Result<Tensor> {
        let q_shape = q_in.shape();
        let k_shape = k_in.shape();
        if *q_shape.last().unwrap() != self.head_dim || *k_shape.last().unwrap() != self.head_dim
        {
            return Err(Error::ShapeMismatch {
                op: "attention_forward",
                lhs: q_shape,
                rhs: vec![self.head_dim],
            });
        }
        if k_shape != v_in.shape() {
            return Err(Error::ShapeMismatch {
                op: "attention_forward",
                lhs: k_shape,
                rhs: v_in.shape(),
            });
        }
        let q = self.q_proj.forward(q_in)?;
        let k = self.k_proj.forward(k_in)?;
        let v = self.v_proj.forward(v_in)?;
        let scores = q
            .matmul(&k.transpose_last2()?)?
            .scale(1.0 / (self.head_dim as f64).sqrt());
        let attn = scores.softmax_lastdim()?;
        self.out_proj.forward(&attn.matmul(&v)?)
    }
}

/// Stack of linear layers with GELU between them (none after the last).
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; `dims.len() - 1` linear layers.
    pub fn random<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::random(w[0], w[1], false, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.gelu();
            }
        }
        Ok(h)
    }
}

/// Layer normalization over the last axis with trainable scale and shift.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, frozen: bool) -> Self {
        let gamma = Tensor::ones(&[dim]);
        let beta = Tensor::zeros(&[dim]);
        gamma.set_requires_grad(!frozen);
        beta.set_requires_grad(!frozen);
        LayerNorm { gamma, beta, eps: 1e-6 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

/// Two stride-2 transposed-convolution stages with a GELU between them;
/// channel plan `d -> d/4 -> c`, spatial output 4x the input.
pub struct TransposedConvUpscaler {
    pub kernel1: Tensor,
    pub bias1: Tensor,
    pub kernel2: Tensor,
    pub bias2: Tensor,
}

impl TransposedConvUpscaler {
    pub fn random<R: Rng>(d: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        if d % 4 != 0 {
            return Err(Error::Config(format!(
                "upscaler input dim {d} must be divisible by 4"
            )));
        }
        let mid = d / 4;
        let kernel1 = Tensor::randn(&[d, mid, 2, 2], 1.0 / (d as f64).sqrt(), rng);
        let bias1 = Tensor::zeros(&[mid]);
        let kernel2 = Tensor::randn(&[mid, c_out, 2, 2], 1.0 / (mid as f64).sqrt(), rng);
        let bias2 = Tensor::zeros(&[c_out]);
        for t in [&kernel1, &bias1, &kernel2, &bias2] {
            t.set_requires_grad(true);
        }
        Ok(TransposedConvUpscaler {
            kernel1,
            bias1,
            kernel2,
            bias2,
        })
    }

    pub fn c_in(&self) -> usize {
        self.kernel1.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.kernel2.shape()[1]
    }

    /// `[B, d, h0, w0] -> [B, c, 4*h0, 4*w0]`.
    pub fn forward(&self, grid: &Tensor) -> Result<Tensor> {
        let shape = grid.shape();
        if shape.len() != 4 || shape[1] != self.c_in() {
            return Err(Error::ShapeMismatch {
                op: "upscale_forward",
                lhs: shape,
                rhs: self.kernel1.shape(),
            });
        }
        let mid = grid.conv_transpose2x2(&self.kernel1, &self.bias1)?.gelu();
        mid.conv_transpose2x2(&self.kernel2, &self.bias2)
    }
}

/// Frozen random Fourier features for points in the unit square:
/// `[sin(2*pi*G^T p); cos(2*pi*G^T p)]` with `G: [2, d/2]` Gaussian, fixed
/// per seed. Out-of-range coordinates are clamped and counted.
pub struct FourierPositionalEncoder {
    pub freq: Tensor,
    dim: usize,
    clamped: Cell<u64>,
}

impl FourierPositionalEncoder {
    pub fn new<R: Rng>(dim: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!(
                "positional encoder dim {dim} must be even and positive"
            )));
        }
        let freq = Tensor::randn(&[2, dim / 2], scale, rng);
        Ok(FourierPositionalEncoder {
            freq,
            dim,
            clamped: Cell::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// How many coordinates have been clamped into [0, 1] so far.
    pub fn clamped_count(&self) -> u64 {
        self.clamped.get()
    }

    /// Encode a normalized point; result shape `[d]`.
    pub fn encode_point(&self, x: f64, y: f64) -> Tensor {
        let clamp = |v: f64| -> f64 {
            if !(0.0..=1.0).contains(&v) {
                self.clamped.set(self.clamped.get() + 1);
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        };
        let (x, y) = (clamp(x), clamp(y));
        let g = self.freq.to_vec();
        let half = self.dim / 2;
        let mut out = vec![0.0; self.dim];
        for j in 0..half {
            let phase = 2.0 * std::f64::consts::PI * (g[j] * x + g[half + j] * y);
            out[j] = phase.sin();
            out[half + j] = phase.cos();
        }
        Tensor::leaf(vec![self.dim], out)
    }
}
