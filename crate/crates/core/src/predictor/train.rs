use std::collections::BTreeMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{HybridModel, ModelInput};
use super::{Mode, PredictorConfig, PredictorError, Result};
use crate::metrics::EvalReport;
use crate::nn::{write_checkpoint, AdamConfig, AdamState, Graph};
use crate::scenario::Sample;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of the training split used, rounded down.
    pub fraction: f64,
    pub seed: u64,
    /// Consecutive windows of one trajectory kept together in a batch, so
    /// their shared frames are encoded once.
    pub chunk_len: usize,
    /// The learning rate follows a per-epoch cosine from `learning_rate`
    /// down to this share of it.
    pub final_lr_fraction: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-3,
            fraction: 1.0,
            seed: 6,
            chunk_len: 2,
            final_lr_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over samples of the loss summed across the horizon.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_top_k: Option<BTreeMap<usize, f64>>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub train_samples: usize,
    pub val_samples: usize,
    pub parameter_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub total_seconds: f64,
    pub per_frame_latency_ms: Option<f64>,
}

/// Sidecar written next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub config: PredictorConfig,
    /// Modes the weights have been trained in.
    pub trained_modes: Vec<Mode>,
}

/// The first `floor(fraction * n)` samples of a seeded shuffle.
pub fn subsample<'a>(samples: &[&'a Sample], fraction: f64, seed: u64) -> Vec<&'a Sample> {
    let keep = ((fraction.clamp(0.0, 1.0) * samples.len() as f64) + 1e-9).floor() as usize;
    let mut picked = samples.to_vec();
    if keep < samples.len() {
        picked.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        picked.truncate(keep);
    }
    picked
}

/// Groups samples into runs of at most `chunk_len` windows of the same
/// trajectory, in start order.
fn chunks<'a>(samples: &[&'a Sample], chunk_len: usize) -> Vec<Vec<&'a Sample>> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| (a.trajectory, a.start, &a.id).cmp(&(b.trajectory, b.start, &b.id)));
    let mut out: Vec<Vec<&Sample>> = Vec::new();
    for s in sorted {
        match out.last_mut() {
            Some(c) if c.len() < chunk_len.max(1) && c[0].trajectory == s.trajectory => c.push(s),
            _ => out.push(vec![s]),
        }
    }
    out
}

fn numeric_stats(samples: &[&Sample], d_n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; d_n];
    let mut sq = vec![0.0; d_n];
    let mut n = 0usize;
    for s in samples {
        for row in s.numeric.chunks(d_n) {
            for j in 0..d_n {
                sum[j] += row[j];
                sq[j] += row[j] * row[j];
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    (mean, std)
}

fn epoch_lr(schedule: &TrainSchedule, epoch: usize) -> f64 {
    let progress = (epoch - 1) as f64 / schedule.epochs.max(1) as f64;
    let f = schedule.final_lr_fraction;
    schedule.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Minimizes the horizon-summed cross-entropy with Adam. `val` is only
/// reported on, never used for selection. Calls `on_epoch` after each epoch;
/// a `Break` ends training early.
pub fn train(
    model: &mut HybridModel<f32>,
    train: &[&Sample],
    val: &[&Sample],
    schedule: &TrainSchedule,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainReport> {
    let started = Instant::now();
    if !(0.0..=1.0).contains(&schedule.final_lr_fraction) {
        return Err(PredictorError::InvalidConfig(format!(
            "final_lr_fraction must be in [0, 1], got {}",
            schedule.final_lr_fraction
        )));
    }
    let used = subsample(train, schedule.fraction, schedule.seed);
    if used.is_empty() {
        return Err(PredictorError::EmptyTrainingSet);
    }
    let mode = model.config.mode;
    if mode.uses_numeric() && !model.has_numeric_normalization() {
        let (mean, std) = numeric_stats(&used, model.config.numeric_dim);
        model.set_numeric_normalization(&mean, &std)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = AdamState::new(AdamConfig {
        lr: schedule.learning_rate,
        ..AdamConfig::default()
    });
    let mut groups = chunks(&used, schedule.chunk_len);
    let mut records = Vec::with_capacity(schedule.epochs);
    for epoch in 1..=schedule.epochs {
        let epoch_start = Instant::now();
        adam.config.lr = epoch_lr(schedule, epoch);
        groups.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut next = 0;
        let mut batch_no = 0;
        while next < groups.len() {
            let mut batch: Vec<&Sample> = Vec::with_capacity(schedule.batch_size);
            while next < groups.len() && (batch.is_empty() || batch.len() + groups[next].len() <= schedule.batch_size) {
                batch.extend_from_slice(&groups[next]);
                next += 1;
            }
            batch_no += 1;
            let input = ModelInput::from_samples(&batch, mode);
            let labels = ModelInput::labels(&batch);
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &input, Some(&mut rng))?;
            let loss = g.cross_entropy(logits, &labels, batch.len())?;
            let value = f64::from(g.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(PredictorError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    sample: batch[0].id.clone(),
                    loss: value,
                });
            }
            g.backward_into(loss, &mut model.params);
            drop(g);
            adam.step(&mut model.params)?;
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let (val_loss, val_top_k) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(model, val, schedule.batch_size)?;
            (Some(r.mean_loss), Some(r.top_k))
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            val_top_k,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, val top-1 {:?}",
            record.train_loss,
            record.val_top_k.as_ref().and_then(|t| t.get(&1))
        );
        let flow = on_epoch(&record);
        records.push(record);
        if flow.is_break() {
            break;
        }
    }
    let latency = if val.is_empty() {
        None
    } else {
        Some(evaluate(model, val, schedule.batch_size)?.per_frame_latency_ms)
    };
    Ok(TrainReport {
        mode,
        train_samples: used.len(),
        val_samples: val.len(),
        parameter_count: model.parameter_count(),
        epochs: records,
        total_seconds: started.elapsed().as_secs_f64(),
        per_frame_latency_ms: latency,
    })
}

/// Evaluation-mode metrics over `samples`. Latency covers the forward pass
/// only, averaged per predicted frame.
pub fn evaluate(model: &HybridModel<f32>, samples: &[&Sample], batch_size: usize) -> Result<EvalReport> {
    let k = model.config.num_classes;
    let horizon = model.config.horizon;
    let mut probs = Vec::with_capacity(samples.len() * horizon * k);
    let mut labels = Vec::with_capacity(samples.len() * horizon);
    let mut loss_sum = 0.0;
    let mut elapsed = 0.0;
    for batch in samples.chunks(batch_size.max(1)) {
        let input = ModelInput::from_samples(batch, model.config.mode);
        let start = Instant::now();
        let preds = model.predict(&input)?;
        elapsed += start.elapsed().as_secs_f64();
        for (p, s) in preds.iter().zip(batch) {
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= k) {
                return Err(crate::metrics::MetricsError::LabelOutOfRange { label: bad, classes: k }.into());
            }
            for (row, &y) in p.probability_rows().zip(&s.labels) {
                loss_sum -= row[y].max(f64::MIN_POSITIVE).ln();
            }
            probs.extend_from_slice(&p.probabilities);
            labels.extend_from_slice(&s.labels);
        }
    }
    let frames = labels.len().max(1) as f64;
    Ok(EvalReport::from_probabilities(
        &probs,
        k,
        &labels,
        horizon,
        loss_sum / samples.len().max(1) as f64,
        elapsed * 1e3 / frames,
    )?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PredictorError + '_ {
    move |source| PredictorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `model.ckpt` and `config.json` into `dir`.
pub fn save_model(model: &HybridModel<f32>, trained_modes: &[Mode], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    fs::write(&ckpt, write_checkpoint(&model.params)).map_err(io_err(&ckpt))?;
    let mut modes = trained_modes.to_vec();
    modes.sort();
    modes.dedup();
    let file = ModelFile {
        config: model.config.clone(),
        trained_modes: modes,
    };
    let cfg = dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(&file).expect("config serializes");
    fs::write(&cfg, json).map_err(io_err(&cfg))?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(HybridModel<f32>, ModelFile)> {
    let cfg = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg).map_err(io_err(&cfg))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| PredictorError::BadModelFile {
        path: cfg.clone(),
        reason: e.to_string(),
    })?;
    let mut model = HybridModel::new(file.config.clone(), 0)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let bytes = fs::read(&ckpt).map_err(io_err(&ckpt))?;
    model.params.load_checkpoint(&bytes).map_err(|e| PredictorError::BadModelFile {
        path: ckpt.clone(),
        reason: e.to_string(),
    })?;
    Ok((model, file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_codebook, OfdmConfig};
    use crate::scenario::{generate_dataset, DatasetSpec, ScenarioConfig, Split};

    fn tiny_dataset(n: usize) -> crate::scenario::Dataset {
        let cfg = ScenarioConfig {
            trajectory_len: 20,
            ..ScenarioConfig::default()
        };
        let ofdm = OfdmConfig::default();
        let cb = build_codebook(16, 16).unwrap();
        generate_dataset(
            &cfg,
            &ofdm,
            &cb,
            DatasetSpec {
                num_samples: n,
                test_fraction: 0.3,
            },
        )
        .unwrap()
        .dataset
    }

    #[test]
    fn fraction_is_floored() {
        let ds = tiny_dataset(20);
        let train: Vec<&Sample> = ds.samples.iter().filter(|s| s.split == Split::Train).collect();
        let n = train.len();
        assert_eq!(subsample(&train, 0.25, 1).len(), n / 4);
        assert_eq!(subsample(&train, 1.0, 1).len(), n);
        assert_eq!(subsample(&train, 0.0, 1).len(), 0);
    }

    #[test]
    fn learning_rate_decays_to_floor() {
        let s = TrainSchedule {
            epochs: 4,
            learning_rate: 1.0,
            final_lr_fraction: 0.1,
            ..TrainSchedule::default()
        };
        let lrs: Vec<f64> = (1..=4).map(|e| epoch_lr(&s, e)).collect();
        assert_eq!(lrs[0], 1.0);
        assert!((lrs[2] - 0.55).abs() < 1e-12);
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert!(lrs[3] > 0.1);
    }

    #[test]
    fn chunks_stay_within_trajectories() {
        let ds = tiny_dataset(40);
        let all: Vec<&Sample> = ds.samples.iter().collect();
        let groups = chunks(&all, 8);
        assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), 40);
        for c in &groups {
            assert!(c.len() <= 8);
            assert!(c.iter().all(|s| s.trajectory == c[0].trajectory));
            assert!(c.windows(2).all(|w| w[0].start < w[1].start));
        }
    }

    #[test]
    fn one_epoch_smoke_and_round_trip() {
        let ds = tiny_dataset(10);
        let cfg = PredictorConfig {
            hidden_dim: 8,
            backbone_widths: vec![4, 4, 4, 4],
            numeric_blocks: 1,
            image_blocks: 1,
            decoder_layers: 1,
            ..PredictorConfig::for_dataset(&ds.meta, Mode::Multi)
        };
        let mut model = HybridModel::<f32>::new(cfg, 1).unwrap();
        let samples: Vec<&Sample> = ds.samples.iter().collect();
        let schedule = TrainSchedule {
            epochs: 1,
            batch_size: 4,
            ..TrainSchedule::default()
        };
        let mut seen = 0;
        let report = train(&mut model, &samples, &samples[..2], &schedule, &mut |_| {
            seen += 1;
            ControlFlow::Continue(())
        }).unwrap();
        assert_eq!(seen, 1);
        assert!(report.epochs[0].train_loss.is_finite());
        assert_eq!(report.train_samples, 10);
        assert!(model.has_numeric_normalization());

        let dir = tempfile::tempdir().unwrap();
        save_model(&model, &[Mode::Multi], dir.path()).unwrap();
        let (loaded, file) = load_model(dir.path()).unwrap();
        assert_eq!(file.trained_modes, vec![Mode::Multi]);
        assert_eq!(write_checkpoint(&loaded.params), write_checkpoint(&model.params));
        let bytes = std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(bytes, write_checkpoint(&loaded.params));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let ds = tiny_dataset(10);
        let cfg = PredictorConfig {
            hidden_dim: 8,
            backbone_widths: vec![4, 4, 4, 4],
            ..PredictorConfig::for_dataset(&ds.meta, Mode::Numeric)
        };
        let mut model = HybridModel::<f32>::new(cfg, 1).unwrap();
        model.params.get_mut("head.b").unwrap().value.data_mut()[0] = f32::NAN;
        let samples: Vec<&Sample> = ds.samples.iter().collect();
        let err = train(&mut model, &samples, &[], &TrainSchedule::default(), &mut |_| ControlFlow::Continue(())).unwrap_err();
        assert!(matches!(err, PredictorError::NonFiniteLoss { epoch: 1, batch: 1, .. }), "{err}");
    }
}
