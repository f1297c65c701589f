//! Two-way transformer mask decoder.
//!
//! Mask tokens and prompt tokens attend among themselves and to the image
//! grid over two two-way blocks (every attention projection carries a
//! low-rank adapter on its query and value paths). The final image grid is
//! upscaled 4x into `U`; per-token MLP heads map the final mask-token states
//! into `H`. The original mask path takes the channel dot product of `H`
//! and `U`; the calibration path fuses them with per-channel Hadamard
//! products, concatenation over the batch*channel axis, averaging, and an
//! alpha-weighted combination with the original masks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, LayerNorm, Mlp, TransposedConvUpscaler};
use crate::prompt::PromptTokens;
use crate::tensor::{concat_axis, concat_axis0, Tensor};

/// One two-way block: token self-attention, token->image cross-attention,
/// token MLP, then image->token cross-attention, each with a residual and
/// layer norm. The original token embeddings and the image positional grid
/// are re-added to queries and keys at every attention so spatial addressing
/// survives depth.
pub struct TwoWayBlock {
    pub self_attn: AttentionBlock,
    pub norm1: LayerNorm,
    pub cross_token_to_image: AttentionBlock,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub cross_image_to_token: AttentionBlock,
    pub norm4: LayerNorm,
}

impl TwoWayBlock {
    pub fn new<R: Rng>(dim: usize, rank: usize, rng: &mut R) -> Result<Self> {
        Ok(TwoWayBlock {
            self_attn: AttentionBlock::with_lora(dim, rank, rng)?,
            norm1: LayerNorm::new(dim, false),
            cross_token_to_image: AttentionBlock::with_lora(dim, rank, rng)?,
            norm2: LayerNorm::new(dim, false),
            mlp: Mlp::random(&[dim, 2 * dim, dim], rng),
            norm3: LayerNorm::new(dim, false),
            cross_image_to_token: AttentionBlock::with_lora(dim, rank, rng)?,
            norm4: LayerNorm::new(dim, false),
        })
    }

    pub fn forward(&self, tokens: &Tensor, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let attended = self.self_attn.forward(tokens, tokens)?;
        let t = self.norm1.forward(&tokens.add(&attended)?)?;
        let attended = self.cross_token_to_image.forward(&t, image)?;
        let t = self.norm2.forward(&t.add(&attended)?)?;
        let t = self.norm3.forward(&t.add(&self.mlp.forward(&t)?)?)?;
        let attended = self.cross_image_to_token.forward(image, &t)?;
        let img = self.norm4.forward(&image.add(&attended)?)?;
        Ok((t, img))
    }
}

/// Everything one decoder pass produces (all mask tensors are raw logits).
pub struct DecoderOutput {
    /// Upscaled image embedding `[b, c, h, w]`.
    pub u: Tensor,
    /// Transformed mask-token representation `[b, n, c]`.
    pub h: Tensor,
    /// Channel dot-product masks `[b, n, h, w]`.
    pub m_orig: Tensor,
    /// Calibrated masks `[b, n, h, w]`; every batch slice identical by
    /// construction of the cross-batch average.
    pub m_new: Tensor,
    /// `alpha * m_orig + (1 - alpha) * m_new`.
    pub m_final: Tensor,
}

pub struct MaskDecoder {
    pub mask_tokens: Tensor,
    pub blocks: Vec<TwoWayBlock>,
    pub upscaler: TransposedConvUpscaler,
    pub heads: Vec<Mlp>,
    pub alpha: f64,
    pub calibration_enabled: bool,
    /// Experimental variant that averages within each batch element instead
    /// of across the whole batch*channel axis. Off by default; the default
    /// path follows the cross-batch formula literally.
    pub per_batch_calibration: bool,
    pub dim: usize,
    pub channels: usize,
    pub num_masks: usize,
    pub grid: usize,
}

impl MaskDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        dim: usize,
        channels: usize,
        num_masks: usize,
        grid: usize,
        rank: usize,
        alpha: f64,
        calibration_enabled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if num_masks == 0 {
            return Err(Error::Config("decoder needs at least one mask token".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        let mask_tokens = Tensor::randn(&[num_masks, dim], 0.5, rng);
        mask_tokens.set_requires_grad(true);
        let blocks = vec![
            TwoWayBlock::new(dim, rank, rng)?,
            TwoWayBlock::new(dim, rank, rng)?,
        ];
        let upscaler = TransposedConvUpscaler::random(dim, channels, rng)?;
        let heads = (0..num_masks)
            .map(|_| Mlp::random(&[dim, dim, dim, channels], rng))
            .collect();
        Ok(MaskDecoder {
            mask_tokens,
            blocks,
            upscaler,
            heads,
            alpha,
            calibration_enabled,
            per_batch_calibration: false,
            dim,
            channels,
            num_masks,
            grid,
        })
    }

    /// Run the two-way blocks and produce `(U, H)`.
    pub fn decode(&self, image_emb: &Tensor, prompts: &PromptTokens) -> Result<(Tensor, Tensor)> {
        let emb_shape = image_emb.shape();
        if emb_shape.len() != 3
            || emb_shape[1] != self.grid * self.grid
            || emb_shape[2] != self.dim
        {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: emb_shape,
                rhs: vec![0, self.grid * self.grid, self.dim],
            });
        }
        let b = emb_shape[0];
        if prompts.batch() != b {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: prompts.tokens.shape(),
                rhs: emb_shape,
            });
        }
        let mask = self
            .mask_tokens
            .reshape(&[1, self.num_masks, self.dim])?
            .repeat_axis(0, b)?;
        let mut tokens = concat_axis(&[mask, prompts.tokens.clone()], 1)?;
        let mut image = image_emb.clone();
        for blk in &self.blocks {
            let (t, img) = blk.forward(&tokens, &image)?;
            tokens = t;
            image = img;
        }
        let mask_states = tokens.slice_axis(1, 0, self.num_masks)?;
        let grid = image
            .transpose_last2()?
            .reshape(&[b, self.dim, self.grid, self.grid])?;
        let u = self.upscaler.forward(&grid)?;
        let mut head_outputs = Vec::with_capacity(self.num_masks);
        for (i, head) in self.heads.iter().enumerate() {
            let state = mask_states.slice_axis(1, i, 1)?;
            head_outputs.push(head.forward(&state)?);
        }
        let h = concat_axis(&head_outputs, 1)?;
        Ok((u, h))
    }

    /// Full forward pass: decode, original masks, calibration (when
    /// enabled), and the alpha-weighted combination.
    pub fn forward(&self, image_emb: &Tensor, prompts: &PromptTokens) -> Result<DecoderOutput> {
        let (u, h) = self.decode(image_emb, prompts)?;
        let m_orig = predict_orig(&u, &h)?;
        if self.calibration_enabled {
            let m_new = if self.per_batch_calibration {
                calibrate_per_batch(&u, &h)?
            } else {
                calibrate(&u, &h)?
            };
            let m_final = combine(&m_orig, &m_new, self.alpha)?;
            Ok(DecoderOutput { u, h, m_orig, m_new, m_final })
        } else {
            let m_new = m_orig.clone();
            let m_final = m_orig.clone();
            Ok(DecoderOutput { u, h, m_orig, m_new, m_final })
        }
    }
}

/// Original mask path: per-batch channel dot product,
/// `M[b,i,y,x] = sum_k H[b,i,k] * U[b,k,y,x]`.
pub fn predict_orig(u: &Tensor, h: &Tensor) -> Result<Tensor> {
    let u_shape = u.shape();
    let h_shape = h.shape();
    if u_shape.len() != 4 || h_shape.len() != 3 || u_shape[0] != h_shape[0] || u_shape[1] != h_shape[2]
    {
        return Err(Error::ShapeMismatch {
            op: "predict_orig",
            lhs: u_shape,
            rhs: h_shape,
        });
    }
    let (b, c, hh, ww) = (u_shape[0], u_shape[1], u_shape[2], u_shape[3]);
    let n = h_shape[1];
    let flat = u.reshape(&[b, c, hh * ww])?;
    h.matmul(&flat)?.reshape(&[b, n, hh, ww])
}

/// Calibrated mask path: split `U` and `H` per channel, Hadamard-multiply
/// the expanded pairs, concatenate the channel products along axis 0
/// (stacking batch*channel), average that axis, and repeat the mean back to
/// the batch. Every batch slice of the result is identical.
pub fn calibrate(u: &Tensor, h: &Tensor) -> Result<Tensor> {
    let u_shape = u.shape();
    let h_shape = h.shape();
    if u_shape.len() != 4 || h_shape.len() != 3 || u_shape[0] != h_shape[0] || u_shape[1] != h_shape[2]
    {
        return Err(Error::ShapeMismatch {
            op: "calibrate",
            lhs: u_shape,
            rhs: h_shape,
        });
    }
    let (b, c) = (u_shape[0], u_shape[1]);
    let n = h_shape[1];
    let mut products = Vec::with_capacity(c);
    for i in 0..c {
        let u_i = u.slice_axis(1, i, 1)?; // [b,1,h,w]
        let u_hat = u_i.repeat_axis(1, n)?; // [b,n,h,w]
        let h_i = h.slice_axis(2, i, 1)?; // [b,n,1]
        let h_hat = h_i.reshape(&[b, n, 1, 1])?;
        products.push(u_hat.hadamard(&h_hat)?);
    }
    let stacked = concat_axis0(&products)?; // [b*c, n, h, w]
    let mean = stacked.mean_axis0()?; // [1, n, h, w]
    mean.repeat_axis(0, b)
}

/// Per-batch calibration variant: the same channel products, averaged
/// within each batch element only (no cross-batch mixing).
pub fn calibrate_per_batch(u: &Tensor, h: &Tensor) -> Result<Tensor> {
    let b = u.shape()[0];
    let mut rows = Vec::with_capacity(b);
    for bi in 0..b {
        let u_b = u.slice_axis(0, bi, 1)?;
        let h_b = h.slice_axis(0, bi, 1)?;
        rows.push(calibrate(&u_b, &h_b)?);
    }
    concat_axis0(&rows)
}

/// `M_final = alpha * M_orig + (1 - alpha) * M_new`. The endpoints are
/// implemented as pure pass-throughs so they reproduce the corresponding
/// operand bit-exactly.
pub fn combine(m_orig: &Tensor, m_new: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if m_orig.shape() != m_new.shape() {
        return Err(Error::ShapeMismatch {
            op: "combine",
            lhs: m_orig.shape(),
            rhs: m_new.shape(),
        });
    }
    if alpha == 1.0 {
        return Ok(m_orig.scale(1.0));
    }
    if alpha == 0.0 {
        return Ok(m_new.scale(1.0));
    }
    m_orig.scale(alpha).add(&m_new.scale(1.0 - alpha))
}
