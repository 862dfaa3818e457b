//! Adam training of a DCCRN on dynamically mixed data.

pub mod adam;
pub mod config;
pub mod schedule;

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, IxDyn};

pub use adam::{Adam, AdamConfig};
pub use config::{DataSource, RunConfig};
pub use schedule::{PlateauSchedule, Verdict};

use crate::data::{DynamicMixer, Manifest, MixCursor, Mixture, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::model::{Dccrn, Mode};
use crate::targets::{loss_sisnr, si_snr};
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: Split,
    /// Mean SI-SNR of the enhanced clips in dB.
    pub sisnr: f64,
    /// Rate in effect during the epoch.
    pub lr: f64,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let split = match self.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        write!(f, "epoch={} split={split} sisnr={:.4} lr={:e}", self.epoch, self.sisnr, self.lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Epochs,
    Patience,
    TimeBudget,
}

#[derive(Clone, Debug)]
pub struct Summary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_sisnr: f64,
    pub stop: StopReason,
    pub best_checkpoint: PathBuf,
}

/// Seed of epoch `epoch` in a run seeded with `seed`.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1)
}

/// Manifests for a run; synthetic data is generated in memory.
pub fn manifests(cfg: &RunConfig) -> Result<(Manifest, Manifest)> {
    match &cfg.data {
        DataSource::Manifest { train, val } => {
            let (t, v) = (Manifest::load(train)?, Manifest::load(val)?);
            let missing: Vec<_> = t.missing().into_iter().chain(v.missing()).collect();
            if let Some(p) = missing.first() {
                return Err(Error::Data(format!("{} listed clips are missing, first {}", missing.len(), p.display())));
            }
            Ok((t, v))
        }
        DataSource::Synthetic { clips, seed } => {
            let corpus = |clips: usize, seed: u64| SyntheticCorpus {
                speech_clips: clips,
                noise_clips: (clips / 4).max(2),
                clip_len: 2 * cfg.mix.clip_len,
                seed,
            };
            let val_clips = (clips / 5).max(4);
            Ok((corpus(*clips, *seed).manifest(), corpus(val_clips, !*seed).manifest()))
        }
    }
}

fn batch_planes(rows: &[&[f32]]) -> ndarray::ArrayD<f32> {
    let len = rows[0].len();
    Array2::from_shape_fn((rows.len(), len), |(b, i)| rows[b][i])
        .into_dyn()
        .into_shape_with_order(IxDyn(&[rows.len(), len]))
        .expect("[B, L]")
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Dccrn<f32>,
    adam: Adam<f32>,
    schedule: PlateauSchedule,
    mixer: DynamicMixer,
    val: Vec<Mixture>,
}

impl Trainer {
    /// Validates every path, builds the model and draws the validation set.
    pub fn new(config: RunConfig) -> Result<Self> {
        let (train, val) = manifests(&config)?;
        std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
        let model = Dccrn::build(&config.model, config.seed)?;
        let mut val_mixer = DynamicMixer::new(val, config.mix.clone())?;
        let val = val_mixer.epoch(!config.seed, config.val_clips)?;
        Ok(Self {
            adam: Adam::new(config.optim.clone(), model.params()),
            schedule: PlateauSchedule::new(config.optim.lr, config.patience),
            mixer: DynamicMixer::new(train, config.mix.clone())?,
            model,
            val,
            config,
        })
    }

    pub fn validation_set(&self) -> &[Mixture] {
        &self.val
    }

    /// One optimizer step; returns the batch SI-SNR before the update.
    pub fn step(&mut self, batch: &[Mixture]) -> Result<f64> {
        let noisy: Vec<&[f32]> = batch.iter().map(|m| m.noisy.as_slice()).collect();
        let clean: Vec<&[f32]> = batch.iter().map(|m| m.clean.as_slice()).collect();
        let reference = batch_planes(&clean);
        let (loss, grads, updates) = {
            let mut g = Graph::with_params(self.model.params());
            let out = self.model.forward(&mut g, &noisy, Mode::Train)?;
            let loss = loss_sisnr(&mut g, out.wave, &reference, true)?;
            let value = g.value(loss).iter().next().copied().unwrap_or(f32::NAN) as f64;
            if !value.is_finite() {
                log::warn!("non-finite loss, batch skipped");
                return Ok(f64::NAN);
            }
            (value, g.backward(loss)?, out.bn_updates)
        };
        self.model.apply_bn_updates(&updates)?;
        self.adam.set_lr(self.schedule.lr());
        self.adam.step(self.model.params_mut(), &grads);
        Ok(-loss)
    }

    /// Mean SI-SNR of the enhanced validation clips.
    pub fn validate(&self) -> Result<f64> {
        evaluate(&self.model, &self.val, self.config.batch_size).map(|(enh, _)| enh)
    }

    /// Trains until the epoch limit, patience or the time budget runs out,
    /// writing `metrics.log`, `best.ckpt` and `last.ckpt` to the output
    /// directory and passing every record to `sink`.
    pub fn run(&mut self, sink: impl FnMut(&MetricRecord)) -> Result<Summary> {
        self.run_with(|t, _| t.validate(), sink)
    }

    /// [`Self::run`] with a replaceable validation measurement.
    pub fn run_with(
        &mut self,
        mut validate: impl FnMut(&Self, usize) -> Result<f64>,
        mut sink: impl FnMut(&MetricRecord),
    ) -> Result<Summary> {
        let start = Instant::now();
        let dir = self.config.out_dir.clone();
        let log_path = dir.join("metrics.log");
        let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let best_path = dir.join("best.ckpt");
        let steps = self.config.clips_per_epoch.div_ceil(self.config.batch_size);
        let mut best = (0, f64::NEG_INFINITY);
        let mut stop = StopReason::Epochs;
        let mut epochs = 0;
        for epoch in 1..=self.config.epochs {
            let lr = self.schedule.lr();
            let seed = epoch_seed(self.config.seed, epoch);
            let mut sum = 0.0;
            let mut n = 0;
            let mut out_of_time = false;
            let mut cursor = MixCursor::new(seed);
            for _ in 0..steps {
                let batch = (0..self.config.batch_size)
                    .map(|_| self.mixer.next_mix(&mut cursor))
                    .collect::<Result<Vec<_>>>()?;
                let v = self.step(&batch)?;
                if v.is_finite() {
                    sum += v;
                    n += 1;
                }
                if self.config.max_time.is_some_and(|t| start.elapsed() >= t) {
                    out_of_time = true;
                    break;
                }
            }
            epochs = epoch;
            let val = validate(self, epoch)?;
            let mut emit = |r: MetricRecord| -> Result<()> {
                writeln!(log, "{r}").map_err(|e| Error::io(&log_path, e))?;
                sink(&r);
                Ok(())
            };
            let train = if n > 0 { sum / n as f64 } else { f64::NAN };
            emit(MetricRecord { epoch, split: Split::Train, sisnr: train, lr })?;
            emit(MetricRecord { epoch, split: Split::Val, sisnr: val, lr })?;
            let verdict = self.schedule.observe(-val);
            if verdict.decayed {
                log::info!("validation loss went up, lr now {:e}", verdict.lr);
            }
            if verdict.improved {
                best = (epoch, val);
                self.model.save(&best_path)?;
            }
            self.model.save(dir.join("last.ckpt"))?;
            if out_of_time {
                stop = StopReason::TimeBudget;
                break;
            }
            if verdict.stop {
                stop = StopReason::Patience;
                break;
            }
        }
        if best.0 == 0 {
            return Err(Error::Data("validation never produced a finite SI-SNR".into()));
        }
        Ok(Summary {
            epochs,
            best_epoch: best.0,
            best_val_sisnr: best.1,
            stop,
            best_checkpoint: best_path,
        })
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr()
    }
}

/// Mean SI-SNR of `model`'s enhanced output and of the noisy input over
/// `set`, evaluated in batches.
pub fn evaluate(model: &Dccrn<f32>, set: &[Mixture], batch_size: usize) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let (mut enh, mut noisy) = (0.0, 0.0);
    for chunk in set.chunks(batch_size.max(1)) {
        let rows: Vec<&[f32]> = chunk.iter().map(|m| m.noisy.as_slice()).collect();
        let mut g = Graph::with_params(model.params());
        let out = model.forward(&mut g, &rows, Mode::Eval)?;
        let waves = g.value(out.wave);
        for (b, m) in chunk.iter().enumerate() {
            let est: Vec<f32> = waves.index_axis(ndarray::Axis(0), b).iter().copied().collect();
            enh += si_snr(&est, &m.clean)?;
            noisy += si_snr(&m.noisy, &m.clean)?;
        }
    }
    Ok((enh / set.len() as f64, noisy / set.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn toy(dir: &Path, extra: &str) -> RunConfig {
        let text = format!(
            "model.tiny = true\nmodel.variant = E\ndata.synthetic = 12\ndata.clip_seconds = 0.25\n\
             train.batch_size = 2\ntrain.clips_per_epoch = 4\ntrain.val_clips = 2\n{extra}"
        );
        RunConfig::parse(&text, dir).unwrap()
    }

    #[test]
    fn forced_validation_increases_halve_the_rate_each_time() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(toy(dir.path(), "train.epochs = 6\ntrain.patience = 10\n")).unwrap();
        // Validation SI-SNR falls, so the loss rises, after epochs 2, 3 and 5.
        let script = [3.0, 4.0, 2.0, 1.0, 1.5, 0.5];
        let mut records = Vec::new();
        let s = t.run_with(|_, e| Ok(script[e - 1]), |r| records.push(*r)).unwrap();
        let lrs: Vec<f64> = records.iter().filter(|r| r.split == Split::Val).map(|r| r.lr).collect();
        assert_eq!(lrs, [1e-3, 1e-3, 1e-3, 5e-4, 2.5e-4, 2.5e-4]);
        assert_eq!(t.lr(), 1.25e-4);
        assert_eq!((s.best_epoch, s.stop), (2, StopReason::Epochs));
        let log = std::fs::read_to_string(dir.path().join("run/metrics.log")).unwrap();
        assert_eq!(log.lines().count(), 12);
        assert!(log.lines().nth(1).unwrap().starts_with("epoch=1 split=val sisnr=3.0000 lr=1e-3"));
    }

    #[test]
    fn patience_stops_and_best_checkpoint_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(toy(dir.path(), "train.epochs = 20\ntrain.patience = 2\n")).unwrap();
        let s = t.run_with(|_, e| Ok(if e == 1 { 1.0 } else { 0.0 }), |_| {}).unwrap();
        assert_eq!((s.epochs, s.best_epoch, s.stop), (3, 1, StopReason::Patience));
        let m = Dccrn::<f32>::load(&s.best_checkpoint).unwrap();
        assert_eq!(m.config(), t.model.config());
    }

    #[test]
    fn training_steps_raise_batch_sisnr() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(toy(dir.path(), "optim.lr = 0.003\n")).unwrap();
        let batch: Vec<Mixture> = t.validation_set().to_vec();
        let first = t.step(&batch).unwrap();
        let mut last = first;
        for _ in 0..15 {
            last = t.step(&batch).unwrap();
        }
        assert!(last > first + 1.0, "{first} -> {last}");
        let (enh, noisy) = evaluate(&t.model, &batch, 2).unwrap();
        assert!(enh.is_finite() && noisy.is_finite());
    }

    #[test]
    fn same_seed_trains_identically() {
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let mut t = Trainer::new(toy(dir.path(), "train.epochs = 1\n")).unwrap();
            let mut rec = Vec::new();
            t.run(|r| rec.push(*r)).unwrap();
            (rec, t.model.to_checkpoint_bytes())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_manifest_files_fail_before_training() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("speech.lst"), "a.wav\n").unwrap();
        std::fs::write(dir.path().join("noise.lst"), "b.wav\n").unwrap();
        let cfg = RunConfig::parse("data.train = .\ndata.val = .\n", dir.path()).unwrap();
        let msg = Trainer::new(cfg).err().unwrap().to_string();
        assert!(msg.contains("a.wav"), "{msg}");
    }
}
