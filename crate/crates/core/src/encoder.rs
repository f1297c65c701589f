//! Frozen toy image encoder: a patch-embedding projection plus two frozen
//! attention blocks over the patch grid. All weights come from a fixed-seed
//! Gaussian and never train; positional information is injected by adding
//! Fourier features of the patch centers, drawn from the same frequency
//! basis the prompt encoder uses so box-corner tokens and image tokens live
//! in one positional space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, FourierPositionalEncoder, LayerNorm, LinearLayer};
use crate::tensor::{concat_axis0, Tensor};

pub struct ToyImageEncoder {
    pub patch: usize,
    pub dim: usize,
    pub grid: usize,
    patch_embed: LinearLayer,
    pos_embed: Tensor,
    blocks: Vec<AttentionBlock>,
    norm: LayerNorm,
}

impl ToyImageEncoder {
    /// Build a frozen encoder for `image_size`-square inputs split into
    /// `patch`-square patches. `pos_basis` supplies the shared Fourier
    /// frequencies; `seed` fixes every weight.
    pub fn new(
        image_size: usize,
        patch: usize,
        dim: usize,
        pos_basis: &FourierPositionalEncoder,
        seed: u64,
    ) -> Result<Self> {
        if patch == 0 || image_size % patch != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} not divisible by patch size {patch}"
            )));
        }
        if pos_basis.dim() != dim {
            return Err(Error::Config(format!(
                "positional basis dim {} != encoder dim {dim}",
                pos_basis.dim()
            )));
        }
        let grid = image_size / patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7031_c0de);
        let patch_embed = LinearLayer::random(patch * patch, dim, true, &mut rng);
        // keep patch intensity signal comparable to the unit-amplitude
        // positional features added below
        patch_embed.weight.update_data(|d| d.iter_mut().for_each(|v| *v *= 3.0));
        let blocks = vec![
            AttentionBlock::frozen(dim, &mut rng),
            AttentionBlock::frozen(dim, &mut rng),
        ];
        let norm = LayerNorm::new(dim, true);
        // positional embedding of each patch center, frozen
        let mut rows = Vec::with_capacity(grid * grid);
        for gy in 0..grid {
            for gx in 0..grid {
                let cx = (gx as f64 + 0.5) / grid as f64;
                let cy = (gy as f64 + 0.5) / grid as f64;
                rows.push(pos_basis.encode_point(cx, cy).reshape(&[1, dim])?);
            }
        }
        let pos_embed = concat_axis0(&rows)?;
        Ok(ToyImageEncoder {
            patch,
            dim,
            grid,
            patch_embed,
            pos_embed,
            blocks,
            norm,
        })
    }

    /// Number of grid tokens per image.
    pub fn num_tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// The frozen positional grid `[grid*grid, dim]` shared with prompts.
    pub fn positional_grid(&self) -> &Tensor {
        &self.pos_embed
    }

    /// Named frozen parameters, for checksum audits.
    pub fn frozen_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("encoder.patch_embed.weight".into(), self.patch_embed.weight.clone()),
            ("encoder.patch_embed.bias".into(), self.patch_embed.bias.clone()),
            ("encoder.pos_embed".into(), self.pos_embed.clone()),
            ("encoder.norm.gamma".into(), self.norm.gamma.clone()),
            ("encoder.norm.beta".into(), self.norm.beta.clone()),
        ];
        for (i, blk) in self.blocks.iter().enumerate() {
            for (tag, lin) in [
                ("q", &blk.q_proj.base),
                ("k", &blk.k_proj.base),
                ("v", &blk.v_proj.base),
            ] {
                out.push((format!("encoder.block{i}.{tag}.weight"), lin.weight.clone()));
                out.push((format!("encoder.block{i}.{tag}.bias"), lin.bias.clone()));
            }
            out.push((format!("encoder.block{i}.out.weight"), blk.out_proj.weight.clone()));
            out.push((format!("encoder.block{i}.out.bias"), blk.out_proj.bias.clone()));
        }
        out
    }

    /// `[B, 1, H, W] -> [B, grid*grid, dim]` deterministic embedding grid.
    /// Nothing here tracks gradients.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let shape = images.shape();
        let expected = self.grid * self.patch;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != expected || shape[3] != expected {
            return Err(Error::Config(format!(
                "encoder built for [B,1,{expected},{expected}] images, got {shape:?}"
            )));
        }
        let b = shape[0];
        let patches = self.patchify(images, b)?;
        let mut tokens = patches
            .matmul(&self.patch_embed.weight)?
            .add_bias(&self.patch_embed.bias)?;
        let pos = self
            .pos_embed
            .reshape(&[1, self.num_tokens(), self.dim])?;
        tokens = tokens.add(&pos.repeat_axis(0, b)?)?;
        for blk in &self.blocks {
            let attended = blk.forward(&tokens, &tokens)?;
            tokens = self.norm.forward(&tokens.add(&attended)?)?;
        }
        Ok(tokens)
    }

    /// Rearrange `[B,1,H,W]` into `[B, grid*grid, patch*patch]` rows.
    fn patchify(&self, images: &Tensor, b: usize) -> Result<Tensor> {
        let p = self.patch;
        let g = self.grid;
        let side = g * p;
        let data = images.to_vec();
        let mut out = vec![0.0; b * g * g * p * p];
        for bi in 0..b {
            for gy in 0..g {
                for gx in 0..g {
                    let token = (bi * g * g + gy * g + gx) * p * p;
                    for py in 0..p {
                        for px in 0..p {
                            let y = gy * p + py;
                            let x = gx * p + px;
                            out[token + py * p + px] = data[bi * side * side + y * side + x];
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[b, g * g, p * p], out)
    }
}
