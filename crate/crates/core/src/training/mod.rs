//! Training configuration, the epoch loop, and thresholded prediction.

mod adam;
mod augment;

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use augment::{apply_transform, augment, normalize_image, AugmentConfig, Transform};

use crate::architecture::{build_cascade, CascadeConfig, CascadeModel, FusionMode};
use crate::data::{save_checkpoint, SamplePair, Size};
use crate::error::{Error, Result};
use crate::loss::{cascade_objective, StageWeights};
use crate::metrics::{compute_metrics, confusion, ImageMetrics, MetricsReport};
use crate::tensor::{Graph, Tensor};

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: usize,
    pub levels: usize,
    /// `levels + 1` widths, finest first.
    pub channel_widths: Vec<usize>,
    pub fusion_mode: FusionMode,
    pub deep_supervision: bool,
    pub alphas: StageWeights,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub threshold: f64,
    pub input_size: Size,
    pub augmentation: AugmentConfig,
    pub seed: u64,
    /// Adds elapsed seconds to each log record; turn off for byte-stable logs.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stages: 4,
            levels: 4,
            channel_widths: vec![16, 32, 64, 128, 256],
            fusion_mode: FusionMode::Cifs,
            deep_supervision: true,
            alphas: StageWeights::four_stage_default(),
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 120,
            threshold: 0.7,
            input_size: Size::new(224, 160),
            augmentation: AugmentConfig::default(),
            seed: 0,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    /// Small CPU-friendly setup: 64x64 inputs, widths 8..128, 30 epochs.
    pub fn desk() -> Self {
        TrainConfig {
            channel_widths: vec![8, 16, 32, 64, 128],
            learning_rate: 2e-3,
            batch_size: 8,
            epochs: 30,
            input_size: Size::new(64, 64),
            ..TrainConfig::default()
        }
    }

    pub fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            stages: self.stages,
            in_channels: 3,
            levels: self.levels,
            channel_widths: self.channel_widths.clone(),
            fusion_mode: self.fusion_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cascade_config().validate()?;
        self.alphas.validate()?;
        if self.alphas.len() != self.stages {
            return Err(Error::Config(format!(
                "{} stages but {} alphas",
                self.stages,
                self.alphas.len()
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must be in (0, 1), got {}", self.threshold)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.augmentation.validate()?;
        self.cascade_config()
            .stage_config(0)
            .check_spatial(self.input_size.height, self.input_size.width)
            .map_err(|e| Error::Config(format!("input size {}: {e}", self.input_size)))
    }
}

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean per-image JA of every stage on the validation set.
    pub val_ja: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

pub struct TrainOutcome {
    pub model: CascadeModel<f32>,
    pub log: Vec<EpochRecord>,
    /// 1-based epoch whose weights are in `best.ckpt`.
    pub best_epoch: usize,
    pub best_model: CascadeModel<f32>,
}

/// Normalized image and, if augmenting, the transformed pair.
fn prepare(sample: &SamplePair, cfg: &TrainConfig, epoch: usize, index: usize) -> (Tensor<f32>, Tensor<f32>) {
    let image = normalize_image(&sample.image);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a0a0_0000_0000 ^ epoch as u64);
    rng.set_stream(index as u64);
    augment(&image, &sample.mask, &cfg.augmentation, &mut rng)
}

fn check_samples(set: &[SamplePair], size: Size, what: &str) -> Result<()> {
    if let Some(s) = set.iter().find(|s| s.size() != size) {
        return Err(Error::Dataset(format!(
            "{what} sample {} is {}, the model expects {size}",
            s.id,
            s.size()
        )));
    }
    Ok(())
}

/// Runs one optimizer step on a batch and returns the loss.
pub fn train_step(
    model: &mut CascadeModel<f32>,
    adam: &mut Adam,
    cfg: &TrainConfig,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let x = g.input(images.clone());
    let t = g.input(masks.clone());
    let ys = model.forward(&mut g, &bound, x)?;
    let (loss, _) = cascade_objective(&mut g, &ys, t, &cfg.alphas, cfg.deep_supervision)?;
    let value = g.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    g.backward(loss)?;
    let grads = model.collect_grads(&mut g, &bound);
    drop(g);
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    adam.step(&mut model.param_tensors_mut(), &grads, &names)?;
    Ok(value)
}

/// Output locations for [`train`]; nothing is written when absent.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
}

impl TrainArtifacts {
    pub fn final_ckpt(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
    pub fn best_ckpt(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

/// The epoch loop: seeded shuffle, normalize + augment, forward, loss,
/// backward, Adam. The incomplete last batch is dropped. After every epoch
/// the validation set is scored; the epoch with the best final-stage mean
/// JA is kept as the best model (ties keep the earlier epoch). Without a
/// validation set the lowest training loss decides.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    artifacts: Option<&TrainArtifacts>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.len() < cfg.batch_size {
        return Err(Error::Dataset(format!(
            "training set has {} samples, fewer than one batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    check_samples(train_set, cfg.input_size, "training")?;
    check_samples(val_set, cfg.input_size, "validation")?;

    let mut model = build_cascade::<f32>(&cfg.cascade_config(), cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut log_file = match artifacts {
        Some(a) => {
            fs::create_dir_all(&a.dir).map_err(|e| Error::io(&a.dir, e))?;
            let path = a.log();
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);

        let mut losses = Vec::new();
        for batch in order.chunks_exact(cfg.batch_size) {
            let prepared: Vec<(Tensor<f32>, Tensor<f32>)> =
                batch.par_iter().map(|&i| prepare(&train_set[i], cfg, epoch, i)).collect();
            let images = Tensor::stack(&prepared.iter().map(|p| &p.0).collect::<Vec<_>>())?;
            let masks = Tensor::stack(&prepared.iter().map(|p| &p.1).collect::<Vec<_>>())?;
            let loss = train_step(&mut model, &mut adam, cfg, &images, &masks)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch} aborted: {e}")))?;
            losses.push(loss);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;

        let val_ja: Vec<f64> = if val_set.is_empty() {
            Vec::new()
        } else {
            evaluate_stages(&model, cfg, val_set, cfg.threshold as f32)?
                .iter()
                .map(|r| r.means.ja)
                .collect()
        };
        let score = val_ja.last().copied().unwrap_or(-train_loss);
        let record = EpochRecord {
            epoch,
            train_loss,
            val_ja,
            wall_time_s: cfg.log_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.5}, val JA {:?}",
            cfg.epochs,
            record.train_loss,
            record.val_ja
        );
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best_model = model.clone();
            if let Some(a) = artifacts {
                save_checkpoint(&a.best_ckpt(), &best_model, cfg)?;
            }
        }
        if let Some(a) = artifacts {
            save_checkpoint(&a.final_ckpt(), &model, cfg)?;
        }
        if let Some((file, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(record);
    }
    if let Some(a) = artifacts {
        if cfg.epochs == 0 {
            save_checkpoint(&a.final_ckpt(), &model, cfg)?;
            save_checkpoint(&a.best_ckpt(), &model, cfg)?;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_model,
    })
}

/// Foreground iff `p >= threshold`.
pub fn threshold_mask(map: &Tensor<f32>, threshold: f32) -> Tensor<f32> {
    map.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[Y^1, ..., Y^S]`, each `(1, 1, H, W)`.
    pub stage_maps: Vec<Tensor<f32>>,
    /// Thresholded last stage.
    pub mask: Tensor<f32>,
}

/// Normalizes a `(1, 3, H, W)` image in `[0, 1]` at the model's input size
/// and runs the cascade.
pub fn predict(model: &CascadeModel<f32>, cfg: &TrainConfig, image: &Tensor<f32>) -> Result<Prediction> {
    let s = image.shape();
    if s.n() != 1 || s.c() != 3 || (s.w(), s.h()) != (cfg.input_size.width, cfg.input_size.height) {
        return Err(Error::shape(format!(
            "expected a (1, 3, {}, {}) image, got {s}",
            cfg.input_size.height, cfg.input_size.width
        )));
    }
    let stage_maps = model.predict_maps(&normalize_image(image))?;
    let mask = threshold_mask(stage_maps.last().expect("at least one stage"), cfg.threshold as f32);
    Ok(Prediction { stage_maps, mask })
}

/// Per-stage metrics reports over `dataset`, in stage order.
pub fn evaluate_stages(
    model: &CascadeModel<f32>,
    cfg: &TrainConfig,
    dataset: &[SamplePair],
    threshold: f32,
) -> Result<Vec<MetricsReport>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    check_samples(dataset, cfg.input_size, "evaluation")?;
    let stages = model.stages().len();
    let mut per_stage: Vec<Vec<ImageMetrics>> = vec![Vec::with_capacity(dataset.len()); stages];
    for chunk in dataset.chunks(cfg.batch_size.max(1)) {
        let normalized: Vec<Tensor<f32>> = chunk.iter().map(|s| normalize_image(&s.image)).collect();
        let batch = Tensor::stack(&normalized.iter().collect::<Vec<_>>())?;
        let maps = model.predict_maps(&batch)?;
        for (s, map) in maps.iter().enumerate() {
            for (i, sample) in chunk.iter().enumerate() {
                let pred = threshold_mask(&map.item_tensor(i), threshold);
                let counts = confusion(&pred, &sample.mask)?;
                per_stage[s].push(ImageMetrics {
                    id: sample.id.clone(),
                    counts,
                    metrics: compute_metrics(&counts),
                });
            }
        }
    }
    per_stage.into_iter().map(MetricsReport::from_images).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthParams};

    fn toy() -> TrainConfig {
        TrainConfig {
            stages: 2,
            levels: 1,
            channel_widths: vec![4, 8],
            alphas: StageWeights::for_stages(2),
            learning_rate: 1e-2,
            batch_size: 2,
            epochs: 2,
            input_size: Size::new(8, 8),
            log_wall_time: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn config_rejections() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
        let bad = [
            TrainConfig { threshold: 1.0, ..toy() },
            TrainConfig { threshold: 0.0, ..toy() },
            TrainConfig { input_size: Size::new(9, 8), ..toy() },
            TrainConfig { alphas: StageWeights::for_stages(3), ..toy() },
            TrainConfig { batch_size: 0, ..toy() },
            TrainConfig { fusion_mode: FusionMode::None, ..toy() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn threshold_is_inclusive_and_monotone() {
        let m = Tensor::<f32>::full([1, 1, 2, 2], 0.7);
        assert!(threshold_mask(&m, 0.7).data().iter().all(|&v| v == 1.0));
        let m = Tensor::<f32>::full([1, 1, 2, 2], 0.69);
        assert!(threshold_mask(&m, 0.7).data().iter().all(|&v| v == 0.0));
        let ramp = Tensor::from_vec([1, 1, 1, 5], vec![0.1f32, 0.3, 0.5, 0.7, 0.9]).unwrap();
        let count = |t: f32| threshold_mask(&ramp, t).data().iter().sum::<f32>();
        assert!(count(0.2) >= count(0.6) && count(0.6) >= count(0.8));
    }

    #[test]
    fn one_epoch_one_step() {
        let data = generate_synthetic(&SynthParams::new(3, 1, Size::new(8, 8)));
        let cfg = TrainConfig { epochs: 1, ..toy() };
        let out = train(&cfg, &data, &[], None).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].train_loss.is_finite());
        assert!(out.log[0].val_ja.is_empty());
    }

    #[test]
    fn rejects_small_or_mismatched_sets() {
        let data = generate_synthetic(&SynthParams::new(1, 1, Size::new(8, 8)));
        assert!(train(&toy(), &data, &[], None).is_err());
        let wrong = generate_synthetic(&SynthParams::new(4, 1, Size::new(16, 8)));
        assert!(train(&toy(), &wrong, &[], None).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = generate_synthetic(&SynthParams::new(4, 2, Size::new(8, 8)));
        let a = train(&toy(), &data, &data[..2], None).unwrap();
        let b = train(&toy(), &data, &data[..2], None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.named_params(), b.model.named_params());
    }

    #[test]
    fn predict_returns_every_stage_and_checks_size() {
        let cfg = toy();
        let model = build_cascade::<f32>(&cfg.cascade_config(), 0).unwrap();
        let s = &generate_synthetic(&SynthParams::new(1, 1, Size::new(8, 8)))[0];
        let p = predict(&model, &cfg, &s.image).unwrap();
        assert_eq!(p.stage_maps.len(), 2);
        assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let big = generate_synthetic(&SynthParams::new(1, 1, Size::new(16, 16)));
        assert!(predict(&model, &cfg, &big[0].image).is_err());
    }
}
