//! Cross-entropy and soft-dice training losses, their weighted combination,
//! and the hard dice score used for evaluation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loss settings: trade-off factor between cross-entropy and dice, the
/// smoothing epsilon in soft-dice denominators, and which channel counts as
/// foreground.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub lambda: f64,
    pub smooth_eps: f64,
    pub fg_channel: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.8,
            smooth_eps: 1e-6,
            fg_channel: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.smooth_eps <= 0.0 {
            return Err(Error::Config("smooth_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Reorder `[b, n, h, w]` logits into `[b*h*w, n]` rows so channel-axis
/// softmaxes reduce to last-axis ops.
fn logits_as_rows(logits: &Tensor) -> Result<(Tensor, usize, usize)> {
    let shape = logits.shape();
    if shape.len() != 4 {
        return Err(Error::Config(format!(
            "expected [b, n, h, w] logits, got {shape:?}"
        )));
    }
    let (b, n, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if n < 2 {
        return Err(Error::Config(format!(
            "need at least 2 mask channels, got {n}"
        )));
    }
    let rows = logits
        .reshape(&[b, n, h * w])?
        .transpose_last2()?
        .reshape(&[b * h * w, n])?;
    Ok((rows, b, h * w))
}

/// Flatten a `[b, h, w]` index mask and validate the entries against `n`.
fn targets_as_indices(target: &Tensor, b: usize, pixels: usize, n: usize) -> Result<Vec<usize>> {
    let t_shape = target.shape();
    if t_shape.len() != 3 || t_shape[0] != b || t_shape[1] * t_shape[2] != pixels {
        return Err(Error::Config(format!(
            "target shape {t_shape:?} does not match logits"
        )));
    }
    target
        .to_vec()
        .iter()
        .map(|&v| {
            let idx = v as usize;
            if v.fract() != 0.0 || v < 0.0 || idx >= n {
                Err(Error::Config(format!(
                    "target class {v} outside 0..{n}"
                )))
            } else {
                Ok(idx)
            }
        })
        .collect()
}

/// Mean per-pixel cross-entropy between `[b, n, h, w]` logits and a
/// `[b, h, w]` class-index mask.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (rows, b, pixels) = logits_as_rows(logits)?;
    let n = rows.shape()[1];
    let targets = targets_as_indices(target, b, pixels, n)?;
    rows.cross_entropy_rows(&targets)
}

/// Soft-dice loss of the foreground channel: `1 - (2*sum(p*t)+eps) /
/// (sum(p)+sum(t)+eps)`, summed over pixels, averaged over the batch.
pub fn dice_loss(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (rows, b, pixels) = logits_as_rows(logits)?;
    let n = rows.shape()[1];
    if cfg.fg_channel >= n {
        return Err(Error::Config(format!(
            "foreground channel {} outside 0..{n}",
            cfg.fg_channel
        )));
    }
    let targets = targets_as_indices(target, b, pixels, n)?;
    let probs = rows.softmax_lastdim()?;
    let fg = probs
        .slice_axis(1, cfg.fg_channel, 1)?
        .reshape(&[b, pixels])?;
    let t_flat: Vec<f64> = targets
        .iter()
        .map(|&t| if t == cfg.fg_channel { 1.0 } else { 0.0 })
        .collect();
    let t = Tensor::from_vec(&[b, pixels], t_flat)?;
    let mut dice_sum: Option<Tensor> = None;
    for bi in 0..b {
        let p_b = fg.slice_axis(0, bi, 1)?;
        let t_b = t.slice_axis(0, bi, 1)?;
        let inter = p_b.hadamard(&t_b)?.sum_all();
        let p_sum = p_b.sum_all();
        let t_sum: f64 = t_b.to_vec().iter().sum();
        let num = inter.scale(2.0).add_scalar(cfg.smooth_eps);
        let den = p_sum.add_scalar(t_sum + cfg.smooth_eps);
        let dice = num.div(&den)?;
        dice_sum = Some(match dice_sum {
            None => dice,
            Some(acc) => acc.add(&dice)?,
        });
    }
    let mean_dice = dice_sum.expect("b >= 1").scale(1.0 / b as f64);
    Ok(mean_dice.scale(-1.0).add_scalar(1.0))
}

/// `(1 - lambda) * CE + lambda * dice_loss`.
pub fn combined_loss(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    let ce = cross_entropy(logits, target)?;
    let dice = dice_loss(logits, target, cfg)?;
    ce.scale(1.0 - cfg.lambda).add(&dice.scale(cfg.lambda))
}

/// Hard dice score `2|A n B| / (|A| + |B|)` between binary `[h, w]` masks;
/// two empty masks score 1.0.
pub fn dice_score(pred: &Tensor, gt: &Tensor) -> f64 {
    let p = pred.to_vec();
    let g = gt.to_vec();
    assert_eq!(p.len(), g.len(), "dice_score on mismatched masks");
    let mut inter = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(&g) {
        let (a, b) = (if *a > 0.5 { 1.0 } else { 0.0 }, if *b > 0.5 { 1.0 } else { 0.0 });
        inter += a * b;
        total += a + b;
    }
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

/// Binarize `[b, n, h, w]` logits by channel argmax into a `[h, w]`
/// foreground mask for batch element `bi` (ties go to the lower channel).
pub fn binarize_foreground(logits: &Tensor, bi: usize, fg_channel: usize) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 4 || bi >= shape[0] {
        return Err(Error::Config(format!(
            "binarize: bad logits shape {shape:?} or batch index {bi}"
        )));
    }
    let (n, h, w) = (shape[1], shape[2], shape[3]);
    let data = logits.to_vec();
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for ch in 0..n {
                let v = data[((bi * n + ch) * h + y) * w + x];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            if best == fg_channel {
                mask[y * w + x] = 1.0;
            }
        }
    }
    Tensor::from_vec(&[h, w], mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn target(b: usize, h: usize, w: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(&[b, h, w], data.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_cost_ln_n() {
        let logits = Tensor::zeros(&[1, 2, 2, 2]);
        let t = target(1, 2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let ce = cross_entropy(&logits, &t).unwrap();
        assert!((ce.item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_cost_nothing() {
        // +50 margin on the target class
        let mut data = vec![0.0; 2 * 2 * 2];
        let t_vals = [0.0, 1.0, 1.0, 0.0];
        for (pix, &tv) in t_vals.iter().enumerate() {
            let (y, x) = (pix / 2, pix % 2);
            data[(tv as usize * 2 + y) * 2 + x] = 50.0;
        }
        let logits = Tensor::from_vec(&[1, 2, 2, 2], data).unwrap();
        let t = target(1, 2, 2, &t_vals);
        let ce = cross_entropy(&logits, &t).unwrap();
        assert!(ce.item() < 1e-10);
    }

    #[test]
    fn cross_entropy_matches_per_pixel_hand_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let t_vals = [1.0, 0.0, 0.0, 1.0];
        let t = target(1, 2, 2, &t_vals);
        let ce = cross_entropy(&logits, &t).unwrap();
        let mut total = 0.0;
        for pix in 0..4 {
            let (y, x) = (pix / 2, pix % 2);
            let z0 = logits.at(&[0, 0, y, x]);
            let z1 = logits.at(&[0, 1, y, x]);
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let zt = if t_vals[pix] == 1.0 { z1 } else { z0 };
            total += lse - zt;
        }
        assert!((ce.item() - total / 4.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_classes() {
        let logits = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(cross_entropy(&logits, &target(1, 2, 2, &[0.0, 1.0, 2.0, 0.0])).is_err());
        assert!(cross_entropy(&logits, &target(1, 2, 2, &[0.0, 0.5, 1.0, 0.0])).is_err());
    }

    #[test]
    fn dice_loss_perfect_and_disjoint() {
        let cfg = LossConfig::default();
        // near-hard predictions via big logit margins
        let mut data = vec![0.0; 2 * 4];
        let t_vals = [1.0, 1.0, 0.0, 0.0];
        for (pix, &tv) in t_vals.iter().enumerate() {
            data[(tv as usize) * 4 + pix] = 60.0;
        }
        let logits = Tensor::from_vec(&[1, 2, 2, 2], data).unwrap();
        let t = target(1, 2, 2, &t_vals);
        let loss = dice_loss(&logits, &t, &cfg).unwrap();
        assert!(loss.item().abs() < 1e-6);

        // prediction mass entirely on the complement
        let mut flipped = vec![0.0; 2 * 4];
        for (pix, &tv) in t_vals.iter().enumerate() {
            flipped[((1.0 - tv) as usize) * 4 + pix] = 60.0;
        }
        let logits = Tensor::from_vec(&[1, 2, 2, 2], flipped).unwrap();
        let loss = dice_loss(&logits, &t, &cfg).unwrap();
        assert!((loss.item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dice_loss_matches_loop_oracle() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let t_vals: Vec<f64> = (0..16).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let t = target(1, 4, 4, &t_vals);
        let loss = dice_loss(&logits, &t, &cfg).unwrap();

        let mut inter = 0.0;
        let mut p_sum = 0.0;
        let mut t_sum = 0.0;
        for pix in 0..16 {
            let (y, x) = (pix / 4, pix % 4);
            let z0 = logits.at(&[0, 0, y, x]);
            let z1 = logits.at(&[0, 1, y, x]);
            let p = (z1 - z0).exp() / (1.0 + (z1 - z0).exp());
            inter += p * t_vals[pix];
            p_sum += p;
            t_sum += t_vals[pix];
        }
        let dice = (2.0 * inter + cfg.smooth_eps) / (p_sum + t_sum + cfg.smooth_eps);
        assert!((loss.item() - (1.0 - dice)).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_arithmetic_and_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let t = target(1, 2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let ce = cross_entropy(&logits, &t).unwrap().item();
        let dl = dice_loss(&logits, &t, &LossConfig::default()).unwrap().item();
        let combined = combined_loss(&logits, &t, &LossConfig::default()).unwrap().item();
        assert!((combined - (0.2 * ce + 0.8 * dl)).abs() < 1e-12);

        let cfg0 = LossConfig { lambda: 0.0, ..LossConfig::default() };
        assert!((combined_loss(&logits, &t, &cfg0).unwrap().item() - ce).abs() < 1e-15);
        let cfg1 = LossConfig { lambda: 1.0, ..LossConfig::default() };
        assert!((combined_loss(&logits, &t, &cfg1).unwrap().item() - dl).abs() < 1e-15);
    }

    #[test]
    fn dice_loss_decreases_as_prediction_approaches_target() {
        // single foreground pixel; walk the fg logit margin upward
        let cfg = LossConfig::default();
        let t = target(1, 1, 1, &[1.0]);
        let mut prev = f64::INFINITY;
        for margin in [-4.0, -2.0, 0.0, 2.0, 4.0, 8.0] {
            let logits = Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, margin]).unwrap();
            let loss = dice_loss(&logits, &t, &cfg).unwrap().item();
            assert!(loss < prev, "dice loss must fall as p moves toward t");
            prev = loss;
        }
    }

    #[test]
    fn dice_score_identities() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(dice_score(&a, &a), 1.0);
        let b = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(dice_score(&a, &b), 0.0);
        // |A| = 4, |B| = 4, overlap 2
        let c = Tensor::from_vec(&[2, 4], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let d = Tensor::from_vec(&[2, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(dice_score(&c, &d), 0.5);
        let empty = Tensor::zeros(&[2, 2]);
        assert_eq!(dice_score(&empty, &empty), 1.0);
    }

    #[test]
    fn binarize_argmax_with_tie_toward_background() {
        let logits = Tensor::from_vec(
            &[1, 2, 1, 3],
            vec![0.0, 2.0, 1.0, /* fg: */ 1.0, 2.0, 0.5],
        )
        .unwrap();
        let mask = binarize_foreground(&logits, 0, 1).unwrap();
        // pixel 0: fg wins; pixel 1: tie -> background; pixel 2: bg wins
        assert_eq!(mask.to_vec(), vec![1.0, 0.0, 0.0]);
    }
}
