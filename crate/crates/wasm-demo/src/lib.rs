//! Interactive browser playground: generate a synthetic few-shot dataset,
//! run the bi-level trainer epoch by epoch, and explore predictions with the
//! mask-calibration weight and box prompting toggled live.

use wasm_bindgen::prelude::*;

use promptseg_core::data::{gen_synthetic, Sample, SyntheticSpec};
use promptseg_core::loss::binarize_foreground;
use promptseg_core::model::SegModel;
use promptseg_core::optim::{AdamW, LrSchedule};
use promptseg_core::prompt::{mask_bbox, DetectionSource};
use promptseg_core::trainer::{evaluate, lower_step, upper_step, SplitDataset, TrainConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// One training session: dataset, model, both optimizers and schedules.
#[wasm_bindgen]
pub struct DemoLab {
    cfg: TrainConfig,
    data: SplitDataset,
    model: SegModel,
    opt_w: AdamW,
    opt_a: AdamW,
    lower_sched: LrSchedule,
    upper_sched: LrSchedule,
    lower_iter: u64,
    upper_iter: u64,
    epoch: usize,
    jitter_rng: ChaCha8Rng,
    detector: DetectionSource,
    eval_detector: DetectionSource,
}

#[wasm_bindgen]
impl DemoLab {
    /// Build a fresh session. `train_count` samples are split into the two
    /// optimization halves; 16 held-out samples form the test set.
    #[wasm_bindgen(constructor)]
    pub fn new(
        seed: u32,
        train_count: usize,
        box_prompts: bool,
        calibration: bool,
        distractor: bool,
    ) -> Result<DemoLab, JsValue> {
        let cfg = TrainConfig {
            seed: seed as u64,
            box_prompts,
            calibration,
            ..TrainConfig::default()
        };
        let train_spec = SyntheticSpec {
            count: train_count.max(2),
            distractor,
            seed: seed as u64,
            ..SyntheticSpec::default()
        };
        let test_spec = SyntheticSpec {
            count: 16,
            first_id: train_spec.count,
            seed: seed as u64 ^ 0x7e57_da7a,
            ..train_spec.clone()
        };
        let train = gen_synthetic(&train_spec).map_err(js_err)?;
        let test = gen_synthetic(&test_spec).map_err(js_err)?;
        let data = SplitDataset::new(train, test, cfg.seed).map_err(js_err)?;

        let model = SegModel::new(cfg.model_config()).map_err(js_err)?;
        let mut opt_w = AdamW::new(cfg.adamw_config()).map_err(js_err)?;
        opt_w.register_all(model.trainable_weights().iter().map(|(n, t)| (n.clone(), t)));
        let mut opt_a = AdamW::new(cfg.adamw_config()).map_err(js_err)?;
        let (name, prompt) = model.prompt_param();
        opt_a.register(name, &prompt);

        let per_epoch = |len: usize| len.div_ceil(cfg.batch_size) as u64;
        let lower_sched = LrSchedule::new(cfg.lower_lr0, cfg.epochs as u64 * per_epoch(data.d1.len()))
            .map_err(js_err)?;
        let upper_sched = LrSchedule::new(cfg.upper_lr0, cfg.epochs as u64 * per_epoch(data.d2.len()))
            .map_err(js_err)?;
        let detector = cfg.detector().map_err(js_err)?;
        let eval_detector = cfg.eval_detector().map_err(js_err)?;
        let jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0b0c_e550);
        Ok(DemoLab {
            cfg,
            data,
            model,
            opt_w,
            opt_a,
            lower_sched,
            upper_sched,
            lower_iter: 0,
            upper_iter: 0,
            epoch: 0,
            jitter_rng,
            detector,
            eval_detector,
        })
    }

    pub fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn max_epochs(&self) -> usize {
        self.cfg.epochs
    }

    pub fn train_len(&self) -> usize {
        self.data.d1.len() + self.data.d2.len()
    }

    pub fn test_len(&self) -> usize {
        self.data.test.len()
    }

    /// Run up to `n` epochs (stops at the schedule end) and return a JSON
    /// array of `{epoch, lower_loss, upper_loss, d2_dice}` rows.
    pub fn train_epochs(&mut self, n: usize) -> Result<String, JsValue> {
        let loss_cfg = self.cfg.loss_config();
        let mut rows = Vec::new();
        for _ in 0..n {
            if self.epoch >= self.cfg.epochs {
                break;
            }
            let mut lower_sum = 0.0;
            let mut lower_count = 0.0f64;
            for batch in self.data.d1.chunks(self.cfg.batch_size) {
                let refs: Vec<&Sample> = batch.iter().collect();
                let lr = self.lower_sched.at(self.lower_iter).map_err(js_err)?;
                lower_sum += lower_step(
                    &self.model,
                    &refs,
                    &mut self.opt_w,
                    lr,
                    &self.detector,
                    &loss_cfg,
                    &mut self.jitter_rng,
                )
                .map_err(js_err)?;
                lower_count += 1.0;
                self.lower_iter += 1;
            }
            let mut upper_sum = 0.0;
            let mut upper_count = 0.0f64;
            for batch in self.data.d2.chunks(self.cfg.batch_size) {
                let refs: Vec<&Sample> = batch.iter().collect();
                let lr = self.upper_sched.at(self.upper_iter).map_err(js_err)?;
                upper_sum += upper_step(
                    &self.model,
                    &refs,
                    &mut self.opt_a,
                    lr,
                    &self.detector,
                    &loss_cfg,
                    &mut self.jitter_rng,
                )
                .map_err(js_err)?;
                upper_count += 1.0;
                self.upper_iter += 1;
            }
            let d2_dice = evaluate(&self.model, &self.data.d2, &self.eval_detector).map_err(js_err)?;
            rows.push(serde_json::json!({
                "epoch": self.epoch,
                "lower_loss": lower_sum / lower_count.max(1.0),
                "upper_loss": upper_sum / upper_count.max(1.0),
                "d2_dice": d2_dice,
            }));
            self.epoch += 1;
        }
        Ok(serde_json::Value::Array(rows).to_string())
    }

    /// Mean dice of the current model over the held-out test set.
    pub fn test_dice(&self) -> Result<f64, JsValue> {
        evaluate(&self.model, &self.data.test, &self.eval_detector).map_err(js_err)
    }

    fn sample(&self, split: &str, idx: usize) -> Result<&Sample, JsValue> {
        let pool: &[Sample] = match split {
            "d1" => &self.data.d1,
            "d2" => &self.data.d2,
            "test" => &self.data.test,
            other => return Err(js_err(format!("unknown split `{other}`"))),
        };
        pool.get(idx)
            .ok_or_else(|| js_err(format!("index {idx} out of range for split {split}")))
    }

    pub fn split_len(&self, split: &str) -> Result<usize, JsValue> {
        Ok(match split {
            "d1" => self.data.d1.len(),
            "d2" => self.data.d2.len(),
            "test" => self.data.test.len(),
            other => return Err(js_err(format!("unknown split `{other}`"))),
        })
    }

    /// Grayscale image bytes (row-major, size x size).
    pub fn sample_image(&self, split: &str, idx: usize) -> Result<Vec<u8>, JsValue> {
        let s = self.sample(split, idx)?;
        Ok(s.image
            .to_vec()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect())
    }

    /// Ground-truth mask bytes {0, 255}.
    pub fn sample_mask(&self, split: &str, idx: usize) -> Result<Vec<u8>, JsValue> {
        let s = self.sample(split, idx)?;
        Ok(s.mask
            .to_vec()
            .iter()
            .map(|v| if *v > 0.5 { 255u8 } else { 0u8 })
            .collect())
    }

    /// Tight oracle box `[x1, y1, x2, y2]`, or empty when the mask is empty.
    pub fn oracle_box(&self, split: &str, idx: usize) -> Result<Vec<f64>, JsValue> {
        let s = self.sample(split, idx)?;
        Ok(match mask_bbox(&s.mask) {
            Some((x1, y1, x2, y2)) => vec![x1 as f64, y1 as f64, x2 as f64, y2 as f64],
            None => Vec::new(),
        })
    }

    /// Predict a sample with an explorable calibration weight. Returns
    /// foreground probabilities as bytes (0..255). `alpha` overrides the
    /// configured weight for this call; `use_box` toggles the box prompt.
    pub fn predict_heat(
        &mut self,
        split: &str,
        idx: usize,
        alpha: f64,
        use_box: bool,
    ) -> Result<Vec<u8>, JsValue> {
        let output = self.forward_with(split, idx, alpha, use_box)?;
        let logits = output.m_final.to_vec();
        let shape = output.m_final.shape();
        let (h, w) = (shape[2], shape[3]);
        let mut heat = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let bg = logits[y * w + x]; // batch 0, channel 0
                let fg = logits[h * w + y * w + x]; // batch 0, channel 1
                let p = 1.0 / (1.0 + (bg - fg).exp());
                heat.push((p * 255.0).round() as u8);
            }
        }
        Ok(heat)
    }

    /// Binary predicted mask bytes {0, 255} under the same controls.
    pub fn predict_mask(
        &mut self,
        split: &str,
        idx: usize,
        alpha: f64,
        use_box: bool,
    ) -> Result<Vec<u8>, JsValue> {
        let output = self.forward_with(split, idx, alpha, use_box)?;
        let mask = binarize_foreground(&output.m_final, 0, 1).map_err(js_err)?;
        Ok(mask
            .to_vec()
            .iter()
            .map(|v| if *v > 0.5 { 255u8 } else { 0u8 })
            .collect())
    }

    /// Dice of the current prediction against the ground truth.
    pub fn predict_dice(
        &mut self,
        split: &str,
        idx: usize,
        alpha: f64,
        use_box: bool,
    ) -> Result<f64, JsValue> {
        let output = self.forward_with(split, idx, alpha, use_box)?;
        let pred = binarize_foreground(&output.m_final, 0, 1).map_err(js_err)?;
        let gt = &self.sample(split, idx)?.mask;
        Ok(promptseg_core::loss::dice_score(&pred, gt))
    }

    fn forward_with(
        &mut self,
        split: &str,
        idx: usize,
        alpha: f64,
        use_box: bool,
    ) -> Result<promptseg_core::decoder::DecoderOutput, JsValue> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(js_err("alpha must lie in [0, 1]"));
        }
        let sample = self.sample(split, idx)?.clone();
        let detector = if use_box {
            DetectionSource::OracleFromMask { jitter_px: 0 }
        } else {
            DetectionSource::None
        };
        let previous = self.model.decoder.alpha;
        self.model.decoder.alpha = alpha;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let result = self
            .model
            .forward_samples(&[&sample], &detector, &mut rng)
            .map(|(out, _)| out)
            .map_err(js_err);
        self.model.decoder.alpha = previous;
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_trains_and_predicts() {
        let mut lab = DemoLab::new(7, 4, true, true, true).unwrap();
        assert_eq!(lab.image_size(), 32);
        assert_eq!(lab.train_len(), 4);
        let rows = lab.train_epochs(2).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&rows).unwrap();
        assert_eq!(parsed.as_array().unwrap().len(), 2);
        assert_eq!(lab.epoch(), 2);
        let heat = lab.predict_heat("test", 0, 0.7, true).unwrap();
        assert_eq!(heat.len(), 32 * 32);
        let mask = lab.predict_mask("test", 0, 0.7, false).unwrap();
        assert!(mask.iter().all(|&b| b == 0 || b == 255));
        let dice = lab.predict_dice("test", 0, 0.3, true).unwrap();
        assert!((0.0..=1.0).contains(&dice));
        // error paths construct JsValue, which aborts off-wasm; they are
        // covered by the core crate's tests instead
        let b = lab.oracle_box("test", 0).unwrap();
        assert_eq!(b.len(), 4);
    }
}
