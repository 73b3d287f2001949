use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{config_hash, Checkpoint, CheckpointHeader, TensorEntry};
use super::{adam_step, batch_ctc_loss, AdamState, EvalMetric, TrainConfig, TrainError};
use crate::ctc::{ctc_loss, greedy_decode_indices};
use crate::data::{collate_batch, Batch, Charset, Dataset, LineSample};
use crate::metrics::{cer_wer, EvalReport};
use crate::model::Model;
use crate::tensor::{Element, Tape, Tensor};

/// Consecutive non-finite batch losses tolerated within one epoch.
pub const MAX_NON_FINITE_STREAK: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_cer: f64,
    pub valid_wer: f64,
    pub improved: bool,
    pub samples_per_sec: f64,
    pub wall_seconds: f64,
}

/// Everything beyond parameters and optimizer moments that a resumed run
/// needs to continue exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed training epochs.
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Evaluations since the last strict improvement.
    pub stale_epochs: usize,
    pub skipped_steps: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean per-sample loss; non-finite when the step was skipped.
    pub loss: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub samples_per_sec: f64,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub mean_loss: f64,
    pub references: Vec<String>,
    pub hypotheses: Vec<String>,
}

impl Evaluation {
    pub fn metric(&self, which: EvalMetric) -> f64 {
        match which {
            EvalMetric::Cer => self.report.cer,
            EvalMetric::CtcLoss => self.mean_loss,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Option<Checkpoint>,
    pub last: Checkpoint,
    pub stopped_early: bool,
}

/// Shuffle and dropout stream for one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub adam: AdamState<T>,
    pub progress: Progress,
    pub charset: Option<Charset>,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, charset: Option<Charset>) -> Result<Self, TrainError> {
        config.validate()?;
        if let Some(cs) = &charset {
            check_charset(cs, model.config().charset_size)?;
        }
        let adam = AdamState::new(model.params(), config.adam);
        Ok(Self { model, config, adam, progress: Progress::default(), charset })
    }

    /// Forward, loss, backward and one Adam update on `batch`. A non-finite
    /// loss skips the update.
    pub fn train_step(&mut self, batch: &Batch<T>, rng: &mut ChaCha8Rng) -> Result<StepOutcome, TrainError> {
        self.model.set_training(true);
        let mut tape = Tape::new();
        let x = tape.leaf(batch.images.clone(), false);
        let pass = self.model.forward_on_tape(&mut tape, x, rng)?;
        let (loss, _) = batch_ctc_loss(&mut tape, pass.log_probs, &batch.frames, &batch.labels, self.model.config().charset_size)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            self.progress.skipped_steps += 1;
            return Ok(StepOutcome { loss: value, skipped: true });
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Option<Tensor<T>>> = pass.params.iter().map(|&v| grads.take(v)).collect();
        adam_step(self.model.params_mut(), &grads, &mut self.adam, self.config.learning_rate)?;
        self.model.apply_batch_stats(&pass.batch_stats);
        Ok(StepOutcome { loss: value, skipped: false })
    }

    /// One shuffled pass over `data`.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset(data.split.clone()));
        }
        let epoch = self.progress.epoch + 1;
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let start = Instant::now();
        let (mut sum, mut counted, mut streak, mut skipped) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let samples: Vec<&LineSample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let batch = collate_batch(&samples)?;
            let step = self.train_step(&batch, &mut rng)?;
            if step.skipped {
                streak += 1;
                skipped += 1;
                if streak > MAX_NON_FINITE_STREAK {
                    return Err(TrainError::Diverged { epoch, streak });
                }
            } else {
                streak = 0;
                sum += step.loss * chunk.len() as f64;
                counted += chunk.len();
            }
        }
        self.progress.epoch = epoch;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        Ok(EpochStats {
            epoch,
            mean_loss: if counted == 0 { f64::NAN } else { sum / counted as f64 },
            samples_per_sec: data.len() as f64 / secs,
            skipped_steps: skipped,
        })
    }

    /// Evaluation-mode greedy decoding with corpus CER/WER and mean CTC loss.
    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation, TrainError> {
        let charset = self.charset.as_ref().ok_or(TrainError::NoCharset)?;
        evaluate(&self.model, data, charset, self.config.batch_size)
    }

    fn snapshot(&self) -> Checkpoint {
        let mut directory = Vec::new();
        let mut data = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, values: &mut dyn Iterator<Item = f64>| {
            directory.push(TensorEntry { name, shape, offset: data.len() });
            data.extend(values);
        };
        for (i, p) in self.model.params().iter().enumerate() {
            push(format!("param/{}", p.name), p.value.shape().to_vec(), &mut p.value.data().iter().map(|v| v.as_f64()));
            let n = vec![p.value.len()];
            push(format!("adam.m/{}", p.name), n.clone(), &mut self.adam.m[i].iter().map(|v| v.as_f64()));
            push(format!("adam.v/{}", p.name), n, &mut self.adam.v[i].iter().map(|v| v.as_f64()));
        }
        for (layer, stats) in self.model.running_stats().iter().enumerate() {
            if let Some(s) = stats {
                let name = &self.model.layers()[layer].name;
                push(format!("running.mean/{name}"), vec![s.mean.len()], &mut s.mean.iter().map(|v| v.as_f64()));
                push(format!("running.var/{name}"), vec![s.var.len()], &mut s.var.iter().map(|v| v.as_f64()));
            }
        }
        push("adam.step".into(), vec![1], &mut std::iter::once(self.adam.step as f64));
        Checkpoint {
            header: CheckpointHeader {
                architecture: self.model.config().clone(),
                training: self.config.clone(),
                config_hash: config_hash(self.model.config(), &self.config),
                charset: self.charset.as_ref().map(|c| c.symbols().iter().collect()),
                dtype: T::DTYPE.into(),
                progress: self.progress.clone(),
                directory,
            },
            data,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.snapshot()
    }

    /// Rebuilds a trainer exactly as it was when `ckpt` was taken.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let h = &ckpt.header;
        if config_hash(&h.architecture, &h.training) != h.config_hash {
            return Err(TrainError::CorruptCheckpoint("config hash does not match the stored configuration".into()));
        }
        let mut model = Model::<T>::build(&h.architecture, 0)?;
        let charset = h.charset.as_ref().map(|s| Charset::new(s.chars())).transpose()?;
        let mut adam = AdamState::new(model.params(), h.training.adam);
        let get = |name: String, len: usize| -> Result<Vec<T>, TrainError> {
            let (_, values) = ckpt.tensor(&name).ok_or_else(|| TrainError::CorruptCheckpoint(format!("missing tensor {name}")))?;
            if values.len() != len {
                return Err(TrainError::CorruptCheckpoint(format!("tensor {name} has {} values, expected {len}", values.len())));
            }
            Ok(values.iter().map(|&v| T::from_f64_lossy(v)).collect())
        };
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&get(format!("param/{}", p.name), n)?);
            adam.m[i] = get(format!("adam.m/{}", p.name), n)?;
            adam.v[i] = get(format!("adam.v/{}", p.name), n)?;
        }
        let names: Vec<String> = model.layers().iter().map(|l| l.name.clone()).collect();
        for (layer, stats) in model.running_stats_mut().iter_mut().enumerate() {
            if let Some(s) = stats {
                s.mean = get(format!("running.mean/{}", names[layer]), s.mean.len())?;
                s.var = get(format!("running.var/{}", names[layer]), s.var.len())?;
            }
        }
        adam.step = get("adam.step".into(), 1)?[0].as_f64() as u64;
        h.training.validate()?;
        Ok(Self { model, config: h.training.clone(), adam, progress: h.progress.clone(), charset })
    }

    /// Whether patience or the epoch budget has run out.
    pub fn finished(&self) -> bool {
        self.progress.stale_epochs >= self.config.patience || self.progress.epoch >= self.config.max_epochs
    }

    /// Trains and validates epoch by epoch until patience or `max_epochs`
    /// runs out. With `out_dir`, writes `last.ckpt` every epoch, `best.ckpt`
    /// on improvement, and one JSON line per epoch to `history.jsonl`.
    pub fn fit(
        &mut self,
        train: &Dataset,
        valid: &Dataset,
        out_dir: Option<&Path>,
        observer: &mut dyn FnMut(&EpochRecord),
    ) -> Result<FitOutcome, TrainError> {
        if self.charset.is_none() {
            return Err(TrainError::NoCharset);
        }
        if valid.is_empty() {
            return Err(TrainError::EmptyDataset(valid.split.clone()));
        }
        let mut best = match out_dir.map(|d| d.join("best.ckpt")) {
            Some(p) if p.exists() && self.progress.best_epoch.is_some() => Some(Checkpoint::load(&p)?),
            _ => None,
        };
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
            // a resumed run continues the history its checkpoint knew about
            let mut text = String::new();
            for r in &self.progress.history {
                text.push_str(&serde_json::to_string(r).expect("record serializes"));
                text.push('\n');
            }
            std::fs::write(dir.join("history.jsonl"), text).map_err(|e| TrainError::Io(e.to_string()))?;
        }
        while !self.finished() {
            let start = Instant::now();
            let stats = self.train_epoch(train)?;
            let eval = self.evaluate(valid)?;
            let metric = eval.metric(self.config.eval_metric);
            let improved = self.progress.best_metric.is_none_or(|b| metric < b);
            if improved {
                self.progress.best_metric = Some(metric);
                self.progress.best_epoch = Some(stats.epoch);
                self.progress.stale_epochs = 0;
            } else {
                self.progress.stale_epochs += 1;
            }
            let record = EpochRecord {
                epoch: stats.epoch,
                train_loss: stats.mean_loss,
                valid_loss: eval.mean_loss,
                valid_cer: eval.report.cer,
                valid_wer: eval.report.wer,
                improved,
                samples_per_sec: stats.samples_per_sec,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            self.progress.history.push(record.clone());
            let snapshot = self.snapshot();
            if improved {
                best = Some(snapshot.clone());
            }
            if let Some(dir) = out_dir {
                if improved {
                    snapshot.save(&dir.join("best.ckpt"))?;
                }
                snapshot.save(&dir.join("last.ckpt"))?;
                let mut f = std::fs::OpenOptions::new()
                    .append(true)
                    .create(true)
                    .open(dir.join("history.jsonl"))
                    .map_err(|e| TrainError::Io(e.to_string()))?;
                writeln!(f, "{}", serde_json::to_string(&record).expect("record serializes"))
                    .map_err(|e| TrainError::Io(e.to_string()))?;
            }
            observer(&record);
        }
        Ok(FitOutcome {
            best,
            last: self.snapshot(),
            stopped_early: self.progress.stale_epochs >= self.config.patience,
        })
    }
}

fn check_charset(charset: &Charset, charset_size: usize) -> Result<(), TrainError> {
    if charset.len() != charset_size {
        return Err(TrainError::CharsetMismatch { charset: charset.len(), model: charset_size });
    }
    Ok(())
}

/// Greedy transcriptions of `samples` in evaluation mode.
pub fn transcribe<T: Element>(model: &Model<T>, samples: &[&LineSample], charset: &Charset) -> Result<Vec<String>, TrainError> {
    check_charset(charset, model.config().charset_size)?;
    let batch: Batch<T> = collate_batch(samples)?;
    model
        .predict(&batch.images, Some(&batch.frames))?
        .iter()
        .map(|l| Ok(charset.decode(&greedy_decode_indices(l))?))
        .collect()
}

/// Evaluation-mode pass over `data` in fixed order.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    charset: &Charset,
    batch_size: usize,
) -> Result<Evaluation, TrainError> {
    check_charset(charset, model.config().charset_size)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset(data.split.clone()));
    }
    let mut hypotheses = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let refs: Vec<&LineSample> = chunk.iter().collect();
        let batch: Batch<T> = collate_batch(&refs)?;
        for (lattice, label) in model.predict(&batch.images, Some(&batch.frames))?.iter().zip(&batch.labels) {
            loss_sum += ctc_loss(lattice, label)?;
            hypotheses.push(charset.decode(&greedy_decode_indices(lattice))?);
        }
    }
    let references: Vec<String> = data.samples.iter().map(|s| s.transcript.clone()).collect();
    let report = cer_wer(&references, &hypotheses)?;
    Ok(Evaluation { report, mean_loss: loss_sum / data.len() as f64, references, hypotheses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, ResizeMode, SynthSpec};
    use crate::model::ArchitectureConfig;
    use crate::train::CHECKPOINT_MAGIC;

    fn charset() -> Charset {
        Charset::new("ab".chars()).unwrap()
    }

    fn data(split: &str, count: usize, seed: u64) -> Dataset {
        let spec = SynthSpec { count, seed, min_len: 1, max_len: 2 };
        synth_dataset(&charset(), split, &spec, 16, ResizeMode::HeightOnly).unwrap()
    }

    fn trainer(config: TrainConfig) -> Trainer<f64> {
        let arch = ArchitectureConfig {
            input_height: 16,
            convblock_filters: vec![2, 2],
            gateblock_filters: vec![2, 2, 2],
            ending_gate_count: 1,
            ending_channels: 4,
            charset_size: 2,
            ..ArchitectureConfig::default()
        };
        Trainer::new(Model::build(&arch, 1).unwrap(), config, Some(charset())).unwrap()
    }

    fn params(t: &Trainer<f64>) -> Vec<Vec<f64>> {
        t.model.params().iter().map(|p| p.value.data().to_vec()).collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut t = trainer(TrainConfig { learning_rate: 0.0, ..Default::default() });
        let before = params(&t);
        t.train_epoch(&data("train", 4, 1)).unwrap();
        assert_eq!(params(&t), before);
        assert_eq!(t.adam.step, 2);
    }

    #[test]
    fn patience_counts_epochs_without_strict_improvement() {
        // lr 0 freezes the metric, so only the first epoch improves
        let mut t = trainer(TrainConfig { learning_rate: 0.0, patience: 2, max_epochs: 50, ..Default::default() });
        let outcome = t.fit(&data("train", 2, 1), &data("valid", 2, 2), None, &mut |_| {}).unwrap();
        assert!(outcome.stopped_early);
        assert_eq!(t.progress.epoch, 3);
        assert_eq!(t.progress.best_epoch, Some(1));
        let flags: Vec<bool> = t.progress.history.iter().map(|r| r.improved).collect();
        assert_eq!(flags, [true, false, false]);
        assert_eq!(outcome.best.unwrap().header.progress.epoch, 1);
    }

    #[test]
    fn epoch_budget_stops_without_patience() {
        let mut t = trainer(TrainConfig { learning_rate: 1e-3, max_epochs: 2, ..Default::default() });
        let outcome = t.fit(&data("train", 2, 1), &data("valid", 2, 2), None, &mut |_| {}).unwrap();
        assert!(!outcome.stopped_early);
        assert_eq!(t.progress.history.len(), 2);
    }

    #[test]
    fn checkpoint_bytes_restore_an_identical_trainer() {
        let train = data("train", 4, 1);
        let mut t = trainer(TrainConfig { learning_rate: 1e-3, ..Default::default() });
        t.train_epoch(&train).unwrap();
        let bytes = t.checkpoint().to_bytes();
        let mut restored: Trainer<f64> = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(params(&restored), params(&t));
        assert_eq!((restored.adam.step, &restored.adam.m, &restored.adam.v), (t.adam.step, &t.adam.m, &t.adam.v));
        let a = t.train_epoch(&train).unwrap();
        let b = restored.train_epoch(&train).unwrap();
        assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
        assert_eq!(params(&restored), params(&t));
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let t = trainer(TrainConfig::default());
        let bytes = t.checkpoint().to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(TrainError::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(TrainError::CorruptCheckpoint(_))));

        let mut ckpt = t.checkpoint();
        ckpt.header.training.learning_rate = 0.5;
        assert!(matches!(Trainer::<f64>::from_checkpoint(&ckpt), Err(TrainError::CorruptCheckpoint(_))));
    }

    #[test]
    fn mismatched_charset_is_refused() {
        let arch = ArchitectureConfig { charset_size: 3, ..ArchitectureConfig::for_height(16).scaled_widths(32) };
        let model = Model::<f64>::build(&arch, 0).unwrap();
        let err = Trainer::new(model, TrainConfig::default(), Some(charset())).unwrap_err();
        assert_eq!(err, TrainError::CharsetMismatch { charset: 2, model: 3 });
    }

    #[test]
    fn epoch_streams_are_distinct_and_reproducible() {
        use rand::Rng;
        let draw = |seed, epoch| epoch_rng(seed, epoch).random::<u64>();
        assert_eq!(draw(3, 1), draw(3, 1));
        assert_ne!(draw(3, 1), draw(3, 2));
        assert_ne!(draw(3, 1), draw(4, 1));
    }
}
