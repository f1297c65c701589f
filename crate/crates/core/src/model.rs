//! Full segmentation model: frozen toy encoder, shared Fourier positional
//! basis, learnable prompt embedding, trainable box-corner type vectors, and
//! the LoRA-adapted mask decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::decoder::{DecoderOutput, MaskDecoder};
use crate::encoder::ToyImageEncoder;
use crate::error::{Error, Result};
use crate::nn::FourierPositionalEncoder;
use crate::prompt::{
    assemble_prompts, box_to_prompt_tokens, detect_boxes, select_best_box, stack_prompt_rows,
    BoundingBox, DetectionSource, PromptTokens,
};
use crate::tensor::{concat_axis0, Tensor};

/// Architecture settings. The patch size is pinned to 4 so the decoder's 4x
/// upscaler brings masks back to input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub dim: usize,
    pub channels: usize,
    pub num_masks: usize,
    pub prompt_len: usize,
    pub rank: usize,
    pub alpha: f64,
    pub calibration: bool,
    pub per_batch_calibration: bool,
    pub pe_scale: f64,
    pub seed: u64,
}

pub const PATCH: usize = 4;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            dim: 32,
            channels: 8,
            num_masks: 2,
            prompt_len: 4,
            rank: 4,
            alpha: 0.7,
            calibration: true,
            per_batch_calibration: false,
            pe_scale: 1.0,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % PATCH != 0 {
            return Err(Error::Config(format!(
                "image size {} must be divisible by patch size {PATCH}",
                self.image_size
            )));
        }
        if self.dim % 4 != 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be divisible by 4",
                self.dim
            )));
        }
        if self.num_masks < 2 {
            return Err(Error::Config(
                "need at least 2 mask channels (background + foreground)".into(),
            ));
        }
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt embedding needs at least 1 token".into()));
        }
        if self.rank == 0 || self.rank >= self.dim {
            return Err(Error::Config(format!(
                "rank {} must satisfy 0 < r < dim {}",
                self.rank, self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

pub struct SegModel {
    pub cfg: ModelConfig,
    pub pos_basis: FourierPositionalEncoder,
    pub encoder: ToyImageEncoder,
    /// Learnable prompt embedding, the upper-level variable. `[n_A, d]`.
    pub prompt: Tensor,
    /// Trainable corner type vectors added to box tokens. `[d]` each.
    pub tl_type: Tensor,
    pub br_type: Tensor,
    pub decoder: MaskDecoder,
}

impl std::fmt::Debug for SegModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegModel").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl SegModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf207_e27e);
        let pos_basis = FourierPositionalEncoder::new(cfg.dim, cfg.pe_scale, &mut frozen_rng)?;
        let encoder = ToyImageEncoder::new(cfg.image_size, PATCH, cfg.dim, &pos_basis, cfg.seed)?;
        let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e41_ab1e);
        let prompt = Tensor::randn(&[cfg.prompt_len, cfg.dim], 0.5, &mut train_rng);
        prompt.set_requires_grad(true);
        // nonzero type vectors give corner tokens a constant, linearly
        // readable signature from the first forward pass; starting both
        // corners from the same vector makes the signal a cell receives
        // proportional to the summed corner-proximity kernels, which peaks
        // inside the box
        let tl_type = Tensor::randn(&[cfg.dim], 1.0, &mut train_rng);
        let br_type = tl_type.value_copy();
        tl_type.set_requires_grad(true);
        br_type.set_requires_grad(true);
        let grid = cfg.image_size / PATCH;
        let decoder = MaskDecoder::new(
            cfg.dim,
            cfg.channels,
            cfg.num_masks,
            grid,
            cfg.rank,
            cfg.alpha,
            cfg.calibration,
            &mut train_rng,
        )?;
        let mut decoder = decoder;
        decoder.per_batch_calibration = cfg.per_batch_calibration;
        Ok(SegModel {
            cfg,
            pos_basis,
            encoder,
            prompt,
            tl_type,
            br_type,
            decoder,
        })
    }

    /// Box tokens for one image, or `None` when the detector yields nothing.
    pub fn box_tokens<R: Rng>(
        &self,
        detector: &DetectionSource,
        id: &str,
        mask: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<Option<Tensor>> {
        let size = self.cfg.image_size;
        let boxes = detect_boxes(detector, id, size, size, mask, rng)?;
        match select_best_box(&boxes) {
            None => Ok(None),
            Some(best) => Ok(Some(box_to_prompt_tokens(
                best,
                &self.pos_basis,
                &self.tl_type,
                &self.br_type,
                size,
                size,
            )?)),
        }
    }

    /// Forward a batch of samples. Box prompts are recomputed per sample and
    /// per call; when any sample in the batch has no box the whole batch
    /// falls back to prompt-embedding-only tokens (token counts must agree
    /// across the batch). Returns the decoder output and whether box tokens
    /// were used.
    pub fn forward_samples<R: Rng>(
        &self,
        samples: &[&Sample],
        detector: &DetectionSource,
        rng: &mut R,
    ) -> Result<(DecoderOutput, bool)> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let size = self.cfg.image_size;
        let images: Vec<Tensor> = samples
            .iter()
            .map(|s| s.image.reshape(&[1, 1, size, size]))
            .collect::<Result<_>>()?;
        let images = concat_axis0(&images)?;
        let emb = self.encoder.encode(&images)?;

        let mut per_sample_boxes = Vec::with_capacity(samples.len());
        for s in samples {
            per_sample_boxes.push(self.box_tokens(detector, &s.id, Some(&s.mask), rng)?);
        }
        let all_have_boxes = per_sample_boxes.iter().all(|b| b.is_some());
        let prompts = if all_have_boxes {
            let rows: Vec<Tensor> = per_sample_boxes
                .into_iter()
                .map(|bt| concat_axis0(&[self.prompt.clone(), bt.expect("checked")]))
                .collect::<Result<_>>()?;
            stack_prompt_rows(&rows)?
        } else {
            assemble_prompts(&self.prompt, None, samples.len())?
        };
        let out = self.decoder.forward(&emb, &prompts)?;
        Ok((out, all_have_boxes))
    }

    /// Forward a raw image with an optional explicit box (prediction path;
    /// no ground-truth mask available).
    pub fn forward_image(&self, image: &Tensor, bbox: Option<&BoundingBox>) -> Result<DecoderOutput> {
        let size = self.cfg.image_size;
        if image.shape() != [1, size, size] {
            return Err(Error::Config(format!(
                "model built for [1,{size},{size}] images, got {:?}",
                image.shape()
            )));
        }
        let emb = self.encoder.encode(&image.reshape(&[1, 1, size, size])?)?;
        let prompts: PromptTokens = match bbox {
            None => assemble_prompts(&self.prompt, None, 1)?,
            Some(b) => {
                let tokens = box_to_prompt_tokens(
                    b,
                    &self.pos_basis,
                    &self.tl_type,
                    &self.br_type,
                    size,
                    size,
                )?;
                assemble_prompts(&self.prompt, Some(&tokens), 1)?
            }
        };
        self.decoder.forward(&emb, &prompts)
    }

    /// All lower-level ("W") parameters with stable names.
    pub fn trainable_weights(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = vec![
            ("prompt.tl_type".into(), self.tl_type.clone()),
            ("prompt.br_type".into(), self.br_type.clone()),
            ("decoder.mask_tokens".into(), self.decoder.mask_tokens.clone()),
        ];
        for (bi, blk) in self.decoder.blocks.iter().enumerate() {
            let base = format!("decoder.block{bi}");
            for (tag, attn) in [
                ("self_attn", &blk.self_attn),
                ("cross_t2i", &blk.cross_token_to_image),
                ("cross_i2t", &blk.cross_image_to_token),
            ] {
                let q = attn.q_proj.adapter.as_ref().expect("decoder q has adapter");
                let v = attn.v_proj.adapter.as_ref().expect("decoder v has adapter");
                out.push((format!("{base}.{tag}.q.lora_a"), q.a.clone()));
                out.push((format!("{base}.{tag}.q.lora_b"), q.b.clone()));
                out.push((format!("{base}.{tag}.v.lora_a"), v.a.clone()));
                out.push((format!("{base}.{tag}.v.lora_b"), v.b.clone()));
                out.push((format!("{base}.{tag}.out.weight"), attn.out_proj.weight.clone()));
                out.push((format!("{base}.{tag}.out.bias"), attn.out_proj.bias.clone()));
            }
            for (ni, norm) in [&blk.norm1, &blk.norm2, &blk.norm3, &blk.norm4]
                .iter()
                .enumerate()
            {
                out.push((format!("{base}.norm{}.gamma", ni + 1), norm.gamma.clone()));
                out.push((format!("{base}.norm{}.beta", ni + 1), norm.beta.clone()));
            }
            for (li, layer) in blk.mlp.layers.iter().enumerate() {
                out.push((format!("{base}.mlp.{li}.weight"), layer.weight.clone()));
                out.push((format!("{base}.mlp.{li}.bias"), layer.bias.clone()));
            }
        }
        let up = &self.decoder.upscaler;
        out.push(("decoder.upscaler.kernel1".into(), up.kernel1.clone()));
        out.push(("decoder.upscaler.bias1".into(), up.bias1.clone()));
        out.push(("decoder.upscaler.kernel2".into(), up.kernel2.clone()));
        out.push(("decoder.upscaler.bias2".into(), up.bias2.clone()));
        for (hi, head) in self.decoder.heads.iter().enumerate() {
            for (li, layer) in head.layers.iter().enumerate() {
                out.push((format!("decoder.head{hi}.{li}.weight"), layer.weight.clone()));
                out.push((format!("decoder.head{hi}.{li}.bias"), layer.bias.clone()));
            }
        }
        out
    }

    /// The upper-level parameter.
    pub fn prompt_param(&self) -> (String, Tensor) {
        ("prompt.embedding".into(), self.prompt.clone())
    }

    /// Trainable + prompt tensors, i.e. everything a checkpoint stores.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.trainable_weights();
        let (name, t) = self.prompt_param();
        out.push((name, t));
        out
    }

    /// Frozen tensors (encoder weights, positional basis, frozen attention
    /// bases in the decoder) for freeze-contract audits.
    pub fn frozen_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.frozen_params();
        out.push(("pos_basis.freq".into(), self.pos_basis.freq.clone()));
        for (bi, blk) in self.decoder.blocks.iter().enumerate() {
            let base = format!("decoder.block{bi}");
            for (tag, attn) in [
                ("self_attn", &blk.self_attn),
                ("cross_t2i", &blk.cross_token_to_image),
                ("cross_i2t", &blk.cross_image_to_token),
            ] {
                for (proj, lin) in [
                    ("q", &attn.q_proj.base),
                    ("k", &attn.k_proj.base),
                    ("v", &attn.v_proj.base),
                ] {
                    out.push((format!("{base}.{tag}.{proj}.base_weight"), lin.weight.clone()));
                    out.push((format!("{base}.{tag}.{proj}.base_bias"), lin.bias.clone()));
                }
            }
        }
        out
    }
}
