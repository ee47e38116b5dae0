use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread;

use serde::{Deserialize, Serialize};

use super::ocs::{ocs_loss, OcsParams};
use super::optim::{Adam, AdamHyper};
use super::sampler::{balanced_batches, crop_or_wrap};
use crate::error::{Error, Result};
use crate::evaluation::{eer_from_scores, Key, Partition, Protocol, ScoreSet, TrialRecord};
use crate::frontend::{feature_path, read_features};
use crate::model::{apply_bn_updates, batch_tensor, save_checkpoint, ForwardCtx, Model};
use crate::numerics::{Graph, Tensor};
use crate::seed_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_rate: f64,
    /// Epochs between learning-rate decays.
    pub decay_interval: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Frames per training example after cropping or wrapping.
    pub crop_frames: usize,
    /// Stop after this many optimizer steps (for dry runs).
    pub max_steps: Option<u64>,
    /// Write a checkpoint after every epoch, not only the best one.
    pub keep_epoch_checkpoints: bool,
    pub ocs: OcsParams,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr0: 3e-4,
            decay_rate: 0.5,
            decay_interval: 1,
            epochs: 20,
            seed: 0,
            crop_frames: 400,
            max_steps: None,
            keep_epoch_checkpoints: true,
            ocs: OcsParams::default(),
            adam: AdamHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config("train.batch_size", "must be even and at least 2"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("train.lr0", "must be positive"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config("train.decay_rate", "must lie in (0, 1]"));
        }
        if self.decay_interval == 0 {
            return Err(Error::config("train.decay_interval", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.crop_frames == 0 {
            return Err(Error::config("train.crop_frames", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return Err(Error::config("train.adam", "betas must lie in [0, 1) and eps be positive"));
        }
        self.ocs.validate()
    }
}

/// `lr0 * decay_rate ^ floor(epoch / decay_interval)`
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_rate.powi((epoch / cfg.decay_interval.max(1)) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: f64,
    pub dev_eer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub best_dev_eer: Option<f64>,
}

/// Files written by [`train`] under its output directory.
pub struct TrainLayout {
    pub root: PathBuf,
}

impl TrainLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:03}"))
    }

    /// Checkpoint with the lowest development EER (the last one when there
    /// is no development set).
    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("best")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("train_summary.json")
    }
}

/// Lists utterances in `utts` without a feature file in `dir`.
pub fn missing_features<'a>(dir: &Path, utts: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    utts.into_iter()
        .filter(|u| !feature_path(dir, u).is_file())
        .map(str::to_string)
        .collect()
}

/// Scores each utterance at full length (eval mode).
pub fn score_utterances<'a>(
    model: &Model<f32>,
    dir: &Path,
    utts: impl IntoIterator<Item = &'a str>,
) -> Result<ScoreSet> {
    let mut set = ScoreSet::new();
    for utt in utts {
        let map = read_features(&feature_path(dir, utt))?;
        set.insert(utt, model.score(&map)?)?;
    }
    Ok(set)
}

struct Batch {
    epoch: usize,
    x: Tensor<f32>,
    labels: Vec<usize>,
}

/// Builds batches on a separate thread, in a fixed order, with at most two
/// waiting ahead of the optimizer.
fn spawn_loader(
    records: Vec<TrialRecord>,
    dir: PathBuf,
    cfg: TrainConfig,
) -> (Receiver<Result<Batch>>, thread::JoinHandle<()>) {
    let (tx, rx) = sync_channel(2);
    let handle = thread::spawn(move || {
        let mut sampler_rng = seed_rng(cfg.seed.wrapping_add(0x5a4d_1e00));
        let mut crop_rng = seed_rng(cfg.seed.wrapping_add(0xc409_0000));
        for epoch in 0..cfg.epochs {
            let batches = match balanced_batches(&records, cfg.batch_size, &mut sampler_rng) {
                Ok(b) => b,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            };
            for idx in batches {
                let built = (|| {
                    let mut maps = Vec::with_capacity(idx.len());
                    for &i in &idx {
                        let m = read_features(&feature_path(&dir, &records[i].utt_id))?;
                        maps.push(crop_or_wrap(&m, cfg.crop_frames, &mut crop_rng)?);
                    }
                    let refs: Vec<_> = maps.iter().collect();
                    Ok(Batch {
                        epoch,
                        x: batch_tensor(&refs)?,
                        labels: idx.iter().map(|&i| records[i].key.label()).collect(),
                    })
                })();
                let failed = built.is_err();
                if tx.send(built).is_err() || failed {
                    return;
                }
            }
        }
    });
    (rx, handle)
}

/// Trains `model` with one-class softmax on the protocol's training
/// partition, selecting on development EER when a development partition
/// with both classes exists.
///
/// Writes `loss.csv` (`step,epoch,lr,loss`), per-epoch checkpoints, the
/// best checkpoint and `train_summary.json` under `out_dir`.
pub fn train(
    model: &mut Model<f32>,
    features_dir: &Path,
    protocol: &Protocol,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_recs: Vec<TrialRecord> = protocol.partition(Partition::Train).cloned().collect();
    let dev_recs: Vec<TrialRecord> = protocol.partition(Partition::Dev).cloned().collect();
    if train_recs.is_empty() {
        return Err(Error::Dataset("protocol has no training utterances".into()));
    }
    let missing = missing_features(
        features_dir,
        train_recs.iter().chain(&dev_recs).map(|r| r.utt_id.as_str()),
    );
    if !missing.is_empty() {
        return Err(Error::MissingFeatures { missing });
    }
    let use_dev = [Key::Bonafide, Key::Spoof]
        .iter()
        .all(|k| dev_recs.iter().any(|r| r.key == *k));

    let layout = TrainLayout::new(out_dir);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let log_path = layout.loss_log();
    let mut log = BufWriter::new(
        File::create(&log_path).map_err(|e| Error::io(format!("creating {}", log_path.display()), e))?,
    );
    let log_err = |e| Error::io(format!("writing {}", log_path.display()), e);
    writeln!(log, "step,epoch,lr,loss").map_err(log_err)?;

    let mut adam = Adam::new(model.params(), cfg.adam);
    let mut act_rng = seed_rng(cfg.seed.wrapping_add(0xac71_0000));
    let (rx, loader) = spawn_loader(train_recs, features_dir.to_path_buf(), cfg.clone());

    let mut summary = TrainSummary {
        steps: 0,
        epochs: Vec::new(),
        best_epoch: None,
        best_dev_eer: None,
    };
    let mut epoch_losses: Vec<f64> = Vec::new();
    let mut current_epoch = 0;

    let finish_epoch = |model: &Model<f32>, epoch: usize, losses: &mut Vec<f64>, summary: &mut TrainSummary| -> Result<()> {
        let dev_eer = if use_dev {
            let scores = score_utterances(model, features_dir, dev_recs.iter().map(|r| r.utt_id.as_str()))?
                .with_keys(protocol)?;
            let (b, s) = scores.split()?;
            Some(eer_from_scores(&b, &s)?.eer)
        } else {
            None
        };
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        log::info!(
            "epoch {epoch}: {} steps, mean loss {mean_loss:.5}, dev EER {}",
            losses.len(),
            dev_eer.map_or("n/a".to_string(), |e| format!("{:.4}", e))
        );
        summary.epochs.push(EpochStats {
            epoch,
            lr: lr_at(epoch, cfg),
            steps: losses.len(),
            mean_loss,
            dev_eer,
        });
        if cfg.keep_epoch_checkpoints {
            save_checkpoint(&layout.epoch_checkpoint(epoch), model, summary.steps)?;
        }
        let better = match (dev_eer, summary.best_dev_eer) {
            (Some(e), Some(best)) => e < best,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if better {
            summary.best_epoch = Some(epoch);
            summary.best_dev_eer = dev_eer;
            save_checkpoint(&layout.best_checkpoint(), model, summary.steps)?;
        }
        losses.clear();
        Ok(())
    };

    let result = (|| -> Result<()> {
        for batch in rx.iter() {
            let batch = batch?;
            if batch.epoch != current_epoch {
                finish_epoch(model, current_epoch, &mut epoch_losses, &mut summary)?;
                current_epoch = batch.epoch;
            }
            let lr = lr_at(batch.epoch, cfg);
            let mut g = Graph::new();
            let x = g.constant(batch.x);
            let mut ctx = ForwardCtx::train(&mut act_rng);
            let out = model.forward(&mut g, x, &mut ctx)?;
            let updates = std::mem::take(&mut ctx.bn_updates);
            drop(ctx);
            let w0 = g.param(model.params(), model.w0());
            let loss = ocs_loss(&mut g, out.embedding, &batch.labels, w0, &cfg.ocs)?;
            let grads = g.backward(loss)?;
            let store = model.params_mut();
            store.zero_grads();
            store.accumulate_grads(&g, &grads)?;
            adam.step(store, lr)?;
            apply_bn_updates(store, &updates);

            let value = g.value(loss).item()?;
            summary.steps += 1;
            epoch_losses.push(f64::from(value));
            writeln!(log, "{},{},{},{}", summary.steps, batch.epoch, lr, value).map_err(log_err)?;
            if cfg.max_steps.is_some_and(|m| summary.steps >= m) {
                break;
            }
        }
        if !epoch_losses.is_empty() {
            finish_epoch(model, current_epoch, &mut epoch_losses, &mut summary)?;
        }
        Ok(())
    })();
    drop(rx);
    let _ = loader.join();
    result?;
    log.flush().map_err(log_err)?;
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    fs::write(layout.summary(), text).map_err(|e| Error::io("writing training summary", e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0003);
        assert_eq!(lr_at(1, &cfg), 0.00015);
        assert_eq!(lr_at(2, &cfg), 0.000075);
        let slow = TrainConfig {
            decay_interval: 3,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(2, &slow), 0.0003);
        assert_eq!(lr_at(3, &slow), 0.00015);
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig {
            batch_size: 7,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "train.batch_size"));
        let c = TrainConfig {
            lr0: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
