//! Bi-level training loop: lower-level AdamW steps on the model weights W
//! over split D1, upper-level AdamW steps on the prompt embedding over split
//! D2 (first-order alternation), per-level polynomial learning-rate
//! schedules, and D2-dice checkpoint selection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::checkpoint::CheckpointFile;
use crate::data::metrics::MetricsRow;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{binarize_foreground, combined_loss, dice_score, LossConfig};
use crate::model::{ModelConfig, SegModel};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::prompt::{DetectionSource, DetectionsFile};
use crate::tensor::{backward, tensor_checksum, Tensor};

/// Full training configuration. Optimizer and loss defaults follow the
/// training protocol this artifact reproduces: lambda 0.8, alpha 0.7, lower
/// lr 5e-3, upper lr 1e-3, betas (0.9, 0.999), weight decay 0.1, 100 epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub lower_lr0: f64,
    pub upper_lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub rank: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub box_prompts: bool,
    pub jitter_px: u32,
    pub detections_file: Option<PathBuf>,
    pub calibration: bool,
    pub per_batch_calibration: bool,
    pub smooth_eps: f64,
    pub fg_channel: usize,
    pub image_size: usize,
    pub dim: usize,
    pub channels: usize,
    pub num_masks: usize,
    pub prompt_len: usize,
    pub pe_scale: f64,
    pub eval_test_each_epoch: bool,
    pub check_separation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.8,
            alpha: 0.7,
            lower_lr0: 5e-3,
            upper_lr0: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.1,
            epochs: 100,
            rank: 4,
            seed: 7,
            batch_size: 1,
            box_prompts: true,
            jitter_px: 2,
            detections_file: None,
            calibration: true,
            per_batch_calibration: false,
            smooth_eps: 1e-6,
            fg_channel: 1,
            image_size: 32,
            dim: 32,
            channels: 8,
            num_masks: 2,
            prompt_len: 4,
            pe_scale: 1.0,
            eval_test_each_epoch: false,
            check_separation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.loss_config().validate()?;
        self.adamw_config().validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            dim: self.dim,
            channels: self.channels,
            num_masks: self.num_masks,
            prompt_len: self.prompt_len,
            rank: self.rank,
            alpha: self.alpha,
            calibration: self.calibration,
            per_batch_calibration: self.per_batch_calibration,
            pe_scale: self.pe_scale,
            seed: self.seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            smooth_eps: self.smooth_eps,
            fg_channel: self.fg_channel,
        }
    }

    pub fn adamw_config(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    /// Detector used during training.
    pub fn detector(&self) -> Result<DetectionSource> {
        if !self.box_prompts {
            return Ok(DetectionSource::None);
        }
        match &self.detections_file {
            Some(path) => Ok(DetectionSource::FromFile(DetectionsFile::load(path)?)),
            None => Ok(DetectionSource::OracleFromMask {
                jitter_px: self.jitter_px,
            }),
        }
    }

    /// Detector used during evaluation: same source but with oracle jitter
    /// forced to zero so evaluation is deterministic.
    pub fn eval_detector(&self) -> Result<DetectionSource> {
        if !self.box_prompts {
            return Ok(DetectionSource::None);
        }
        match &self.detections_file {
            Some(path) => Ok(DetectionSource::FromFile(DetectionsFile::load(path)?)),
            None => Ok(DetectionSource::OracleFromMask { jitter_px: 0 }),
        }
    }

    /// Flat key=value view, canonical (sorted) order. Floats use Rust's
    /// shortest-roundtrip formatting so parsing back is bit-exact.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("lambda", self.lambda.to_string());
        put("alpha", self.alpha.to_string());
        put("lower_lr0", self.lower_lr0.to_string());
        put("upper_lr0", self.upper_lr0.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("epochs", self.epochs.to_string());
        put("rank", self.rank.to_string());
        put("seed", self.seed.to_string());
        put("batch_size", self.batch_size.to_string());
        put("box_prompts", self.box_prompts.to_string());
        put("jitter_px", self.jitter_px.to_string());
        put(
            "detections_file",
            self.detections_file
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        put("calibration", self.calibration.to_string());
        put("per_batch_calibration", self.per_batch_calibration.to_string());
        put("smooth_eps", self.smooth_eps.to_string());
        put("fg_channel", self.fg_channel.to_string());
        put("image_size", self.image_size.to_string());
        put("dim", self.dim.to_string());
        put("channels", self.channels.to_string());
        put("num_masks", self.num_masks.to_string());
        put("prompt_len", self.prompt_len.to_string());
        put("pe_scale", self.pe_scale.to_string());
        put("eval_test_each_epoch", self.eval_test_each_epoch.to_string());
        put("check_separation", self.check_separation.to_string());
        map
    }

    /// Rebuild a config from the key=value view; unknown keys are errors.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, value) in map {
            cfg.apply_kv(key, value)?;
        }
        Ok(cfg)
    }

    /// Set one field by key. Used by both checkpoint snapshots and the CLI
    /// config-file layer.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
        }
        match key {
            "lambda" => self.lambda = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lower_lr0" => self.lower_lr0 = parse(key, value)?,
            "upper_lr0" => self.upper_lr0 = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "rank" => self.rank = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "box_prompts" => self.box_prompts = parse(key, value)?,
            "jitter_px" => self.jitter_px = parse(key, value)?,
            "detections_file" => {
                self.detections_file = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "calibration" => self.calibration = parse(key, value)?,
            "per_batch_calibration" => self.per_batch_calibration = parse(key, value)?,
            "smooth_eps" => self.smooth_eps = parse(key, value)?,
            "fg_channel" => self.fg_channel = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "num_masks" => self.num_masks = parse(key, value)?,
            "prompt_len" => self.prompt_len = parse(key, value)?,
            "pe_scale" => self.pe_scale = parse(key, value)?,
            "eval_test_each_epoch" => self.eval_test_each_epoch = parse(key, value)?,
            "check_separation" => self.check_separation = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

/// Few-shot training set split into the two optimization halves plus a
/// held-out test set.
pub struct SplitDataset {
    pub d1: Vec<Sample>,
    pub d2: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitDataset {
    pub fn new(train: Vec<Sample>, test: Vec<Sample>, seed: u64) -> Result<Self> {
        let (d1, d2) = split_dataset(train, seed)?;
        Ok(SplitDataset { d1, d2, test })
    }
}

/// Deterministic shuffled halving; odd counts give D1 the extra sample.
pub fn split_dataset(samples: Vec<Sample>, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if samples.len() < 2 {
        return Err(Error::Data(format!(
            "bi-level training needs >= 2 samples to split, got {}",
            samples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5917_57a7);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let d1_len = samples.len() - samples.len() / 2;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut d1 = Vec::with_capacity(d1_len);
    let mut d2 = Vec::with_capacity(slots.len() - d1_len);
    for (pos, &idx) in order.iter().enumerate() {
        let sample = slots[idx].take().expect("each index visited once");
        if pos < d1_len {
            d1.push(sample);
        } else {
            d2.push(sample);
        }
    }
    Ok((d1, d2))
}

/// Serialized trainable state: every W tensor, the prompt embedding, the
/// config snapshot (frozen weights are recoverable from the seed), and the
/// D2 dice the checkpoint was selected at.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub best_d2_dice: f64,
}

impl Checkpoint {
    pub fn capture(model: &SegModel, config: &TrainConfig, best_d2_dice: f64) -> Checkpoint {
        let tensors = model
            .checkpoint_tensors()
            .into_iter()
            .map(|(name, t)| (name, (t.shape(), t.to_vec())))
            .collect();
        Checkpoint {
            config: config.clone(),
            tensors,
            best_d2_dice,
        }
    }

    /// Rebuild the model: construct from the config seed, then overwrite
    /// every trainable tensor from the snapshot. Names that the model does
    /// not expect, missing names, and shape mismatches are all errors.
    pub fn restore_model(&self) -> Result<SegModel> {
        let model = SegModel::new(self.config.model_config())?;
        let expected: BTreeMap<String, Tensor> =
            model.checkpoint_tensors().into_iter().collect();
        let unknown: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| !expected.contains_key(*k))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownTensors { names: unknown });
        }
        let missing: Vec<String> = expected
            .keys()
            .filter(|k| !self.tensors.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingTensors { names: missing });
        }
        for (name, (shape, data)) in &self.tensors {
            let target = &expected[name];
            if target.shape() != *shape {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    manifest: shape.clone(),
                    expected: target.shape(),
                });
            }
            target.set_data(data);
        }
        Ok(model)
    }

    pub fn to_file(&self) -> CheckpointFile {
        let mut config = self.config.to_kv();
        config.insert("best_d2_dice".into(), self.best_d2_dice.to_string());
        CheckpointFile {
            config,
            tensors: self.tensors.clone(),
        }
    }

    pub fn from_file(file: CheckpointFile) -> Result<Checkpoint> {
        let mut config = file.config;
        let best = config
            .remove("best_d2_dice")
            .ok_or_else(|| Error::Data("checkpoint missing best_d2_dice".into()))?;
        let best_d2_dice = best
            .parse()
            .map_err(|_| Error::Data(format!("bad best_d2_dice `{best}`")))?;
        Ok(Checkpoint {
            config: TrainConfig::from_kv(&config)?,
            tensors: file.tensors,
            best_d2_dice,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_file(CheckpointFile::load(path)?)
    }
}

/// One lower-level step: gradient of the combined loss on a D1 batch w.r.t.
/// W only (the prompt embedding's gradient flag is disabled for the step),
/// followed by an AdamW update of W. Gradients are cleared afterwards.
pub fn lower_step<R: Rng>(
    model: &SegModel,
    batch: &[&Sample],
    opt_w: &mut AdamW,
    lr: f64,
    detector: &DetectionSource,
    loss_cfg: &LossConfig,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("lower_step: empty batch".into()));
    }
    model.prompt.set_requires_grad(false);
    let result = step_common(model, batch, opt_w, lr, detector, loss_cfg, rng, true);
    model.prompt.set_requires_grad(true);
    result
}

/// One upper-level step: gradient of the combined loss on a D2 batch w.r.t.
/// the prompt embedding only (every W tensor's gradient flag is disabled),
/// followed by an AdamW update of the prompt.
pub fn upper_step<R: Rng>(
    model: &SegModel,
    batch: &[&Sample],
    opt_a: &mut AdamW,
    lr: f64,
    detector: &DetectionSource,
    loss_cfg: &LossConfig,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("upper_step: empty batch".into()));
    }
    let weights = model.trainable_weights();
    for (_, t) in &weights {
        t.set_requires_grad(false);
    }
    let result = step_common(model, batch, opt_a, lr, detector, loss_cfg, rng, false);
    for (_, t) in &weights {
        t.set_requires_grad(true);
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn step_common<R: Rng>(
    model: &SegModel,
    batch: &[&Sample],
    opt: &mut AdamW,
    lr: f64,
    detector: &DetectionSource,
    loss_cfg: &LossConfig,
    rng: &mut R,
    is_lower: bool,
) -> Result<f64> {
    let (output, used_box) = model.forward_samples(batch, detector, rng)?;
    let target = stack_targets(batch)?;
    let loss = combined_loss(&output.m_final, &target, loss_cfg)?;
    let value = loss.item();
    backward(&loss)?;
    if is_lower && !used_box {
        // box type vectors sit outside the graph on box-less steps; their
        // gradient is exactly zero
        model.tl_type.ensure_zero_grad();
        model.br_type.ensure_zero_grad();
    }
    opt.step(lr)?;
    opt.zero_grads();
    model.prompt.zero_grad();
    for (_, t) in model.trainable_weights() {
        t.zero_grad();
    }
    Ok(value)
}

/// Stack sample masks into a `[b, h, w]` class-index target.
pub fn stack_targets(batch: &[&Sample]) -> Result<Tensor> {
    let (h, w) = (batch[0].height(), batch[0].width());
    let mut data = Vec::with_capacity(batch.len() * h * w);
    for s in batch {
        data.extend_from_slice(&s.mask.to_vec());
    }
    Tensor::from_vec(&[batch.len(), h, w], data)
}

/// Mean dice score of the binarized final masks over `samples`.
pub fn evaluate(model: &SegModel, samples: &[Sample], detector: &DetectionSource) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("evaluate: empty sample set".into()));
    }
    // evaluation is deterministic: oracle jitter is zero by construction of
    // eval_detector, so this rng never influences results
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for sample in samples {
        let (output, _) = model.forward_samples(&[sample], detector, &mut rng)?;
        let pred = binarize_foreground(&output.m_final, 0, 1)?;
        total += dice_score(&pred, &sample.mask);
    }
    Ok(total / samples.len() as f64)
}

/// Evaluate a checkpoint on `samples` after restoring its model.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, samples: &[Sample]) -> Result<f64> {
    let model = ckpt.restore_model()?;
    evaluate(&model, samples, &ckpt.config.eval_detector()?)
}

/// Level-separation audit counters (populated when
/// `TrainConfig::check_separation` is on).
#[derive(Debug, Default, Clone, Copy)]
pub struct SeparationStats {
    pub lower_steps_checked: usize,
    pub upper_steps_checked: usize,
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub final_model: SegModel,
    pub separation: Option<SeparationStats>,
}

fn checksum_all(tensors: &[(String, Tensor)]) -> u64 {
    let mut acc = 0xcbf2_9ce4_8422_2325u64;
    for (_, t) in tensors {
        acc = acc.rotate_left(7) ^ tensor_checksum(t);
    }
    acc
}

/// Run the full bi-level loop and return the best-D2 checkpoint, per-epoch
/// metrics, and the final model state.
pub fn train(cfg: &TrainConfig, data: &SplitDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.d1.is_empty() || data.d2.is_empty() {
        return Err(Error::Data("both D1 and D2 must be non-empty".into()));
    }
    for s in data.d1.iter().chain(&data.d2).chain(&data.test) {
        if s.height() != cfg.image_size || s.width() != cfg.image_size {
            return Err(Error::Config(format!(
                "sample {} is {}x{} but the model expects {}x{}",
                s.id,
                s.height(),
                s.width(),
                cfg.image_size,
                cfg.image_size
            )));
        }
    }
    let model = SegModel::new(cfg.model_config())?;
    let loss_cfg = cfg.loss_config();
    let detector = cfg.detector()?;
    let eval_detector = cfg.eval_detector()?;

    let mut opt_w = AdamW::new(cfg.adamw_config())?;
    opt_w.register_all(
        model
            .trainable_weights()
            .iter()
            .map(|(n, t)| (n.clone(), t)),
    );
    let mut opt_a = AdamW::new(cfg.adamw_config())?;
    let (prompt_name, prompt_tensor) = model.prompt_param();
    opt_a.register(prompt_name, &prompt_tensor);

    let batches_of = |len: usize| len.div_ceil(cfg.batch_size) as u64;
    let lower_sched = LrSchedule::new(cfg.lower_lr0, cfg.epochs as u64 * batches_of(data.d1.len()))?;
    let upper_sched = LrSchedule::new(cfg.upper_lr0, cfg.epochs as u64 * batches_of(data.d2.len()))?;

    let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0b0c_e550);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut lower_iter: u64 = 0;
    let mut upper_iter: u64 = 0;
    let mut separation = cfg.check_separation.then(SeparationStats::default);

    for epoch in 0..cfg.epochs {
        let mut lower_sum = 0.0;
        let mut lower_count = 0usize;
        for (step_idx, batch) in data.d1.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = batch.iter().collect();
            let lr = lower_sched.at(lower_iter)?;
            let a_before = cfg
                .check_separation
                .then(|| tensor_checksum(&model.prompt));
            let loss = lower_step(&model, &refs, &mut opt_w, lr, &detector, &loss_cfg, &mut jitter_rng)?;
            if let (Some(stats), Some(before)) = (separation.as_mut(), a_before) {
                if tensor_checksum(&model.prompt) != before {
                    return Err(Error::Data(format!(
                        "prompt embedding mutated during lower step {step_idx} of epoch {epoch}"
                    )));
                }
                stats.lower_steps_checked += 1;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step_idx,
                    level: "lower",
                });
            }
            lower_sum += loss;
            lower_count += 1;
            lower_iter += 1;
        }

        let mut upper_sum = 0.0;
        let mut upper_count = 0usize;
        for (step_idx, batch) in data.d2.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = batch.iter().collect();
            let lr = upper_sched.at(upper_iter)?;
            let w_before = cfg
                .check_separation
                .then(|| checksum_all(&model.trainable_weights()));
            let loss = upper_step(&model, &refs, &mut opt_a, lr, &detector, &loss_cfg, &mut jitter_rng)?;
            if let (Some(stats), Some(before)) = (separation.as_mut(), w_before) {
                if checksum_all(&model.trainable_weights()) != before {
                    return Err(Error::Data(format!(
                        "W mutated during upper step {step_idx} of epoch {epoch}"
                    )));
                }
                stats.upper_steps_checked += 1;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step_idx,
                    level: "upper",
                });
            }
            upper_sum += loss;
            upper_count += 1;
            upper_iter += 1;
        }

        let before_eval = cfg.check_separation.then(|| {
            (
                tensor_checksum(&model.prompt),
                checksum_all(&model.trainable_weights()),
            )
        });
        let d2_dice = evaluate(&model, &data.d2, &eval_detector)?;
        let test_dice = if cfg.eval_test_each_epoch && !data.test.is_empty() {
            Some(evaluate(&model, &data.test, &eval_detector)?)
        } else {
            None
        };
        if let Some((a_sum, w_sum)) = before_eval {
            if tensor_checksum(&model.prompt) != a_sum
                || checksum_all(&model.trainable_weights()) != w_sum
            {
                return Err(Error::Data(format!(
                    "parameters mutated during evaluation after epoch {epoch}"
                )));
            }
        }

        metrics.push(MetricsRow {
            epoch,
            lower_loss: lower_sum / lower_count.max(1) as f64,
            upper_loss: upper_sum / upper_count.max(1) as f64,
            d2_dice,
            test_dice,
            lr_lower: lower_sched.at(lower_iter)?,
            lr_upper: upper_sched.at(upper_iter)?,
        });

        let improved = match &best {
            None => true,
            Some(b) => d2_dice > b.best_d2_dice,
        };
        if improved {
            best = Some(Checkpoint::capture(&model, cfg, d2_dice));
        }
    }

    Ok(TrainOutcome {
        best: best.expect("epochs >= 1"),
        metrics,
        final_model: model,
        separation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};

    pub(crate) fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            image_size: 16,
            dim: 8,
            channels: 4,
            prompt_len: 2,
            rank: 2,
            epochs: 1,
            jitter_px: 0,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(count: usize, seed: u64) -> SplitDataset {
        let train = gen_synthetic(&SyntheticSpec {
            size: 16,
            count,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let test = gen_synthetic(&SyntheticSpec {
            size: 16,
            count: 2,
            seed: seed ^ 0xdead,
            ..SyntheticSpec::default()
        })
        .unwrap();
        SplitDataset::new(train, test, seed).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        let four = gen_synthetic(&SyntheticSpec { count: 4, ..SyntheticSpec::default() }).unwrap();
        let (d1, d2) = split_dataset(four.clone(), 3).unwrap();
        assert_eq!((d1.len(), d2.len()), (2, 2));
        let five = gen_synthetic(&SyntheticSpec { count: 5, ..SyntheticSpec::default() }).unwrap();
        let (f1, f2) = split_dataset(five, 3).unwrap();
        assert_eq!((f1.len(), f2.len()), (3, 2));

        // same seed, same data -> identical partition
        let (e1, e2) = split_dataset(four, 3).unwrap();
        assert_eq!(ids(&e1), ids(&d1));
        assert_eq!(ids(&e2), ids(&d2));
        // d1 and d2 are disjoint and cover the input
        let mut all: Vec<String> = ids(&e1).into_iter().chain(ids(&e2)).collect();
        all.sort();
        assert_eq!(all, vec!["000", "001", "002", "003"]);

        let single = gen_synthetic(&SyntheticSpec { count: 1, ..SyntheticSpec::default() }).unwrap();
        assert!(split_dataset(single, 3).is_err());
    }

    #[test]
    fn lower_step_keeps_prompt_fixed_and_zero_lr_keeps_w() {
        let cfg = tiny_train_config();
        let data = tiny_data(4, 11);
        let model = SegModel::new(cfg.model_config()).unwrap();
        let mut opt_w = AdamW::new(cfg.adamw_config()).unwrap();
        opt_w.register_all(model.trainable_weights().iter().map(|(n, t)| (n.clone(), t)));
        let detector = cfg.detector().unwrap();
        let loss_cfg = cfg.loss_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let a_before = tensor_checksum(&model.prompt);
        let w_before = checksum_all(&model.trainable_weights());
        let refs: Vec<&Sample> = data.d1.iter().collect();
        lower_step(&model, &refs, &mut opt_w, 0.0, &detector, &loss_cfg, &mut rng).unwrap();
        assert_eq!(tensor_checksum(&model.prompt), a_before);
        assert_eq!(checksum_all(&model.trainable_weights()), w_before, "zero lr");
        assert!(model.prompt.requires_grad(), "flag restored");

        lower_step(&model, &refs, &mut opt_w, 1e-3, &detector, &loss_cfg, &mut rng).unwrap();
        assert_eq!(tensor_checksum(&model.prompt), a_before);
        assert_ne!(checksum_all(&model.trainable_weights()), w_before);
        assert!(lower_step(&model, &[], &mut opt_w, 0.0, &detector, &loss_cfg, &mut rng).is_err());
    }

    #[test]
    fn upper_step_moves_only_prompt() {
        let cfg = tiny_train_config();
        let data = tiny_data(4, 12);
        let model = SegModel::new(cfg.model_config()).unwrap();
        let mut opt_a = AdamW::new(cfg.adamw_config()).unwrap();
        let (name, tensor) = model.prompt_param();
        opt_a.register(name, &tensor);
        let detector = cfg.detector().unwrap();
        let loss_cfg = cfg.loss_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let refs: Vec<&Sample> = data.d2.iter().collect();

        let w_before = checksum_all(&model.trainable_weights());
        let a_before = tensor_checksum(&model.prompt);
        upper_step(&model, &refs, &mut opt_a, 0.0, &detector, &loss_cfg, &mut rng).unwrap();
        assert_eq!(tensor_checksum(&model.prompt), a_before, "zero lr");
        upper_step(&model, &refs, &mut opt_a, 1e-3, &detector, &loss_cfg, &mut rng).unwrap();
        assert_eq!(checksum_all(&model.trainable_weights()), w_before);
        assert_ne!(tensor_checksum(&model.prompt), a_before);
        for (_, t) in model.trainable_weights() {
            assert!(t.requires_grad(), "W flags restored");
        }
    }

    #[test]
    fn zero_lr_training_is_a_noop_and_preserves_frozen() {
        let cfg = TrainConfig {
            lower_lr0: 0.0,
            upper_lr0: 0.0,
            check_separation: true,
            ..tiny_train_config()
        };
        let data = tiny_data(4, 13);
        let reference = SegModel::new(cfg.model_config()).unwrap();
        let outcome = train(&cfg, &data).unwrap();
        for ((name, a), (_, b)) in reference
            .checkpoint_tensors()
            .iter()
            .zip(outcome.final_model.checkpoint_tensors())
        {
            assert_eq!(tensor_checksum(a), tensor_checksum(&b), "{name}");
        }
        for ((name, a), (_, b)) in reference
            .frozen_params()
            .iter()
            .zip(outcome.final_model.frozen_params())
        {
            assert_eq!(tensor_checksum(a), tensor_checksum(&b), "frozen {name}");
        }
        let untrained_d2 = evaluate(&reference, &data.d2, &cfg.eval_detector().unwrap()).unwrap();
        assert_eq!(outcome.metrics[0].d2_dice, untrained_d2);
        let stats = outcome.separation.unwrap();
        assert_eq!(stats.lower_steps_checked, 2);
        assert_eq!(stats.upper_steps_checked, 2);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let cfg = TrainConfig {
            epochs: 2,
            jitter_px: 1,
            ..tiny_train_config()
        };
        let data1 = tiny_data(4, 21);
        let data2 = tiny_data(4, 21);
        let a = train(&cfg, &data1).unwrap();
        let b = train(&cfg, &data2).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.lower_loss.to_bits(), rb.lower_loss.to_bits());
            assert_eq!(ra.upper_loss.to_bits(), rb.upper_loss.to_bits());
            assert_eq!(ra.d2_dice.to_bits(), rb.d2_dice.to_bits());
        }
    }

    #[test]
    fn schedule_rows_match_lr_at() {
        let cfg = TrainConfig { epochs: 3, ..tiny_train_config() };
        let data = tiny_data(4, 31);
        let outcome = train(&cfg, &data).unwrap();
        let lower = LrSchedule::new(cfg.lower_lr0, 3 * 2).unwrap();
        let upper = LrSchedule::new(cfg.upper_lr0, 3 * 2).unwrap();
        for (e, row) in outcome.metrics.iter().enumerate() {
            assert_eq!(row.lr_lower, lower.at(((e + 1) * 2) as u64).unwrap());
            assert_eq!(row.lr_upper, upper.at(((e + 1) * 2) as u64).unwrap());
        }
        // best checkpoint equals max d2 dice over rows
        let max = outcome
            .metrics
            .iter()
            .map(|r| r.d2_dice)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(outcome.best.best_d2_dice, max);
    }

    #[test]
    fn evaluate_is_deterministic_and_rejects_empty() {
        let cfg = tiny_train_config();
        let data = tiny_data(4, 41);
        let model = SegModel::new(cfg.model_config()).unwrap();
        let det = cfg.eval_detector().unwrap();
        let a = evaluate(&model, &data.test, &det).unwrap();
        let b = evaluate(&model, &data.test, &det).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(evaluate(&model, &[], &det).is_err());
    }

    #[test]
    fn evaluate_mean_is_arithmetic_average() {
        let cfg = tiny_train_config();
        let data = tiny_data(4, 43);
        let model = SegModel::new(cfg.model_config()).unwrap();
        let det = cfg.eval_detector().unwrap();
        let s0 = evaluate(&model, &data.test[0..1], &det).unwrap();
        let s1 = evaluate(&model, &data.test[1..2], &det).unwrap();
        let both = evaluate(&model, &data.test[0..2], &det).unwrap();
        assert!((both - (s0 + s1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn evaluating_own_prediction_scores_one() {
        let cfg = tiny_train_config();
        let data = tiny_data(2, 44);
        let model = SegModel::new(cfg.model_config()).unwrap();
        let det = DetectionSource::None;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, _) = model
            .forward_samples(&[&data.d1[0]], &det, &mut rng)
            .unwrap();
        let pred = binarize_foreground(&out.m_final, 0, 1).unwrap();
        let synthetic = Sample {
            id: "self".into(),
            image: data.d1[0].image.clone(),
            mask: pred,
        };
        let dice = evaluate(&model, &[synthetic], &det).unwrap();
        assert_eq!(dice, 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_restores_model_exactly() {
        let cfg = tiny_train_config();
        let data = tiny_data(4, 51);
        let outcome = train(&cfg, &data).unwrap();
        let path = std::env::temp_dir().join(format!("promptseg-ck-{}.amck", std::process::id()));
        outcome.best.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.best_d2_dice.to_bits(), outcome.best.best_d2_dice.to_bits());
        assert_eq!(loaded.config, outcome.best.config);
        let d2_again = evaluate_checkpoint(&loaded, &data.d2).unwrap();
        assert_eq!(d2_again.to_bits(), outcome.best.best_d2_dice.to_bits());
        // save -> load -> save is byte identical
        let bytes1 = std::fs::read(&path).unwrap();
        let path2 = path.with_extension("amck2");
        loaded.save(&path2).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
        std::fs::remove_file(&path).unwrap();
        std::fs::remove_file(&path2).unwrap();
    }

    #[test]
    fn checkpoint_rejects_unknown_and_missing_tensors() {
        let cfg = tiny_train_config();
        let model = SegModel::new(cfg.model_config()).unwrap();
        let mut ck = Checkpoint::capture(&model, &cfg, 0.5);
        ck.tensors
            .insert("decoder.block9.bogus".into(), (vec![1], vec![0.0]));
        match ck.restore_model().unwrap_err() {
            Error::UnknownTensors { names } => {
                assert_eq!(names, vec!["decoder.block9.bogus".to_string()])
            }
            other => panic!("unexpected {other}"),
        }
        let mut ck = Checkpoint::capture(&model, &cfg, 0.5);
        ck.tensors.remove("decoder.mask_tokens");
        assert!(matches!(
            ck.restore_model().unwrap_err(),
            Error::MissingTensors { .. }
        ));
        let mut ck = Checkpoint::capture(&model, &cfg, 0.5);
        ck.tensors
            .insert("decoder.mask_tokens".into(), (vec![1], vec![0.0]));
        assert!(matches!(
            ck.restore_model().unwrap_err(),
            Error::CheckpointShape { .. }
        ));
    }

    #[test]
    fn config_kv_roundtrip_and_unknown_key() {
        let cfg = TrainConfig {
            detections_file: Some(PathBuf::from("/tmp/det.json")),
            ..tiny_train_config()
        };
        let kv = cfg.to_kv();
        let back = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(back, cfg);
        let mut bad = kv.clone();
        bad.insert("bogus_key".into(), "1".into());
        assert!(TrainConfig::from_kv(&bad).is_err());
    }
}
