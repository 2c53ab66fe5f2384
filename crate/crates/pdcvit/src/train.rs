//! Training: seeded shuffling, cross-entropy + Adam, per-epoch test metrics,
//! best/final checkpointing, and the loss-history CSV.

use std::fs;
use std::path::{Path, PathBuf};

use pdcvit_core::adam::{Adam, AdamConfig};
use pdcvit_core::model::{ModelConfig, PdcVitModel};
use pdcvit_core::pdc::Variant;
use pdcvit_core::rng::{component_seed, seeded};
use pdcvit_core::vit::VitConfig;
use pdcvit_core::{GradTape, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::dataset::{load_and_crop, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::eval::predict_items;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VitPreset {
    Desk,
    Full,
}

impl VitPreset {
    pub fn vit_config(self, num_classes: usize) -> VitConfig {
        match self {
            VitPreset::Desk => VitConfig::desk(num_classes),
            VitPreset::Full => VitConfig::full_scale(num_classes),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VitPreset::Desk => "desk",
            VitPreset::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(VitPreset::Desk),
            "full" => Some(VitPreset::Full),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub preset: VitPreset,
    pub branch_channels: usize,
    /// Center-crop size applied at load time; 0 uses images as stored.
    pub crop: usize,
    /// Fraction of the training split held out from optimization entirely.
    pub val_fraction: f64,
    /// Stop after the first epoch whose test accuracy reaches this value.
    pub stop_at_test_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            batch_size: 32,
            epochs: 20,
            seed: 7,
            variant: Variant::Pdc,
            preset: VitPreset::Desk,
            branch_channels: 16,
            crop: 0,
            val_fraction: 0.0,
            stop_at_test_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Usage(format!("lr {} must be a finite non-negative value", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Usage(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn model_config(&self, image_size: usize, num_classes: usize) -> Result<ModelConfig> {
        let vit = self.preset.vit_config(num_classes);
        let config = ModelConfig::new(self.variant, image_size, self.branch_channels, vit);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub history: Vec<EpochStats>,
    pub best_path: PathBuf,
    pub final_path: PathBuf,
    pub history_path: PathBuf,
    pub checkpoint: Checkpoint,
}

/// Decodes one split into memory, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split, crop: usize) -> Result<Vec<(Tensor, usize)>> {
    let items: Vec<_> = manifest.items_in(split).collect();
    items
        .par_iter()
        .map(|it| Ok((load_and_crop(&it.path, crop)?, it.class_index)))
        .collect()
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,test_loss,test_accuracy\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.test_loss, row.test_accuracy
        ));
    }
    out
}

/// Trains on the manifest's train split and writes `best.ckpt`,
/// `final.ckpt`, and `history.csv` under `out_dir`.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig, out_dir: &Path) -> Result<TrainResult> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let num_classes = manifest.num_classes();
    let train_data = load_split(manifest, Split::Train, config.crop)?;
    let test_data = load_split(manifest, Split::Test, config.crop)?;
    if train_data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    for c in 0..num_classes {
        if !train_data.iter().any(|(_, label)| *label == c) {
            return Err(Error::Data(format!(
                "class '{}' has no items in the training split",
                manifest.classes[c]
            )));
        }
    }
    let image_size = check_uniform_size(&train_data, &test_data)?;
    let model_config = config.model_config(image_size, num_classes)?;
    let mut model = PdcVitModel::init(model_config, config.seed)?;

    let refs: Vec<&Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &refs);

    let mut shuffle_rng = seeded(component_seed(config.seed, "shuffle"));
    let mut dropout_rng = seeded(component_seed(config.seed, "dropout"));

    // Optional held-out fraction, excluded from optimization.
    let mut train_indices: Vec<usize> = (0..train_data.len()).collect();
    if config.val_fraction > 0.0 {
        let mut rng = seeded(component_seed(config.seed, "val"));
        train_indices.shuffle(&mut rng);
        let held = ((train_data.len() as f64) * config.val_fraction).round() as usize;
        train_indices.drain(..held.min(train_indices.len().saturating_sub(1)));
    }

    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let history_path = out_dir.join("history.csv");

    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_test_loss = f64::INFINITY;
    let mut tape = GradTape::recording();

    for epoch in 1..=config.epochs {
        train_indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_idx, batch) in train_indices.chunks(config.batch_size).enumerate() {
            tape.reset();
            let vars = model.register(&mut tape, true);
            let ordered = PdcVitModel::ordered_vars(&vars);
            let mut logit_rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let (image, label) = &train_data[i];
                let img = tape.input(image.clone());
                let (_, logits) = model.forward(&mut tape, img, &vars, true, &mut dropout_rng)?;
                logit_rows.push(logits);
                labels.push(*label);
            }
            let batch_logits = tape.concat_rows(&logit_rows)?;
            let loss = tape.cross_entropy(batch_logits, &labels)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx, loss: loss_value });
            }
            tape.backward(loss)?;

            let grads: Vec<Option<Vec<f64>>> =
                ordered.iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec)).collect();
            let mut params: Vec<&mut Tensor> =
                model.named_params_mut().into_iter().map(|(_, t)| t).collect();
            for (param, grad) in params.iter_mut().zip(grads) {
                param.grad = grad;
            }
            adam.step(&mut params)?;
            epoch_loss += loss_value * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = epoch_loss / seen.max(1) as f64;

        let rows = predict_items(&model, &test_data)?;
        let test_loss = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64;
        if !test_loss.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite test loss {test_loss} after epoch {epoch}"
            )));
        }
        let correct = rows.iter().filter(|r| r.pred == r.label).count();
        let test_accuracy = correct as f64 / rows.len().max(1) as f64;
        history.push(EpochStats { epoch, train_loss, test_loss, test_accuracy });

        if test_loss < best_test_loss {
            best_test_loss = test_loss;
            make_checkpoint(&model, manifest, config, &adam, &dropout_rng).save(&best_path)?;
        }
        if let Some(target) = config.stop_at_test_accuracy {
            if test_accuracy >= target {
                break;
            }
        }
    }

    let checkpoint = make_checkpoint(&model, manifest, config, &adam, &dropout_rng);
    checkpoint.save(&final_path)?;
    fs::write(&history_path, history_csv(&history))?;
    Ok(TrainResult { history, best_path, final_path, history_path, checkpoint })
}

fn make_checkpoint(
    model: &PdcVitModel,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    adam: &Adam,
    dropout_rng: &pdcvit_core::rng::Prng,
) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        classes: manifest.classes.clone(),
        train: *config,
        adam: adam.clone(),
        rng_seed: dropout_rng.get_seed(),
        rng_word_pos: dropout_rng.get_word_pos(),
    }
}

fn check_uniform_size(
    train: &[(Tensor, usize)],
    test: &[(Tensor, usize)],
) -> Result<usize> {
    let first = train
        .first()
        .or_else(|| test.first())
        .ok_or_else(|| Error::Data("no items to train on".into()))?;
    let shape = first.0.shape().to_vec();
    if shape[1] != shape[2] {
        return Err(Error::Data(format!(
            "images must be square after cropping, got {}x{} (use --crop)",
            shape[1], shape[2]
        )));
    }
    for (t, _) in train.iter().chain(test.iter()) {
        if t.shape() != shape {
            return Err(Error::Data(format!(
                "inconsistent image sizes: {:?} vs {:?} (use --crop)",
                t.shape(),
                shape
            )));
        }
    }
    Ok(shape[1])
}
