use std::path::{Path, PathBuf};
use std::time::Duration;

use super::adam::AdamConfig;
use crate::data::{MixConfig, NoiseRir, SnrPolicy, SAMPLE_RATE, TRAIN_SNR};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::ModelConfig;

/// Where training and validation clips come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Manifest directories for training and validation.
    Manifest { train: PathBuf, val: PathBuf },
    /// Generated tones and noise; validation uses a disjoint seed.
    Synthetic { clips: usize, seed: u64 },
}

/// A training run, read from a flat `key = value` file.
///
/// | key | default |
/// |-----|---------|
/// | `model.*`, `stft.*` | see [`ModelConfig::from_kv`] |
/// | `optim.name` | `adam` (the only choice) |
/// | `optim.lr`, `optim.beta1`, `optim.beta2`, `optim.eps` | `0.001`, `0.9`, `0.999`, `1e-8` |
/// | `optim.clip_norm` | none |
/// | `train.epochs` | `100` |
/// | `train.patience` | `5` |
/// | `train.batch_size` | `8` |
/// | `train.clips_per_epoch` | `400` |
/// | `train.val_clips` | `40` |
/// | `train.seed` | `0` |
/// | `train.max_minutes` | none |
/// | `data.train`, `data.val` | manifest directories |
/// | `data.synthetic` | speech clips to generate instead of manifests |
/// | `data.synthetic_seed` | `0` |
/// | `data.clip_seconds` | `2` |
/// | `data.rir_prob` | `0.5` |
/// | `data.noise_rir` | `independent`, `same` or `none` |
/// | `out.dir` | `run` |
///
/// Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub clips_per_epoch: usize,
    pub val_clips: usize,
    pub seed: u64,
    pub max_time: Option<Duration>,
    pub data: DataSource,
    pub mix: MixConfig,
    pub out_dir: PathBuf,
}

fn positive<V: PartialOrd + Default + std::fmt::Display>(key: &str, v: V) -> Result<V> {
    if v > V::default() {
        Ok(v)
    } else {
        Err(Error::Config(format!("{key} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let model = ModelConfig::from_kv(&mut kv)?;
        if let Some(name) = kv.take("optim.name") {
            if name != "adam" {
                return Err(Error::Config(format!("optim.name: only `adam` is supported, got `{name}`")));
            }
        }
        let d = AdamConfig::default();
        let optim = AdamConfig {
            lr: positive("optim.lr", kv.take_parsed("optim.lr")?.unwrap_or(d.lr))?,
            beta1: kv.take_parsed("optim.beta1")?.unwrap_or(d.beta1),
            beta2: kv.take_parsed("optim.beta2")?.unwrap_or(d.beta2),
            eps: positive("optim.eps", kv.take_parsed("optim.eps")?.unwrap_or(d.eps))?,
            clip_norm: kv.take_parsed::<f64>("optim.clip_norm")?.map(|c| positive("optim.clip_norm", c)).transpose()?,
        };
        for (key, b) in [("optim.beta1", optim.beta1), ("optim.beta2", optim.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{key} must lie in [0, 1), got {b}")));
            }
        }
        let epochs = positive("train.epochs", kv.take_parsed("train.epochs")?.unwrap_or(100usize))?;
        let patience = positive("train.patience", kv.take_parsed("train.patience")?.unwrap_or(5usize))?;
        let batch_size = positive("train.batch_size", kv.take_parsed("train.batch_size")?.unwrap_or(8usize))?;
        let clips_per_epoch = positive("train.clips_per_epoch", kv.take_parsed("train.clips_per_epoch")?.unwrap_or(400usize))?;
        let val_clips = positive("train.val_clips", kv.take_parsed("train.val_clips")?.unwrap_or(40usize))?;
        let seed = kv.take_parsed("train.seed")?.unwrap_or(0u64);
        let max_time = kv
            .take_parsed::<f64>("train.max_minutes")?
            .map(|m| positive("train.max_minutes", m).map(|m| Duration::from_secs_f64(m * 60.0)))
            .transpose()?;

        let synthetic = kv.take_parsed::<usize>("data.synthetic")?;
        let synthetic_seed = kv.take_parsed("data.synthetic_seed")?.unwrap_or(0u64);
        let train = kv.take("data.train");
        let val = kv.take("data.val");
        let data = match (synthetic, train, val) {
            (Some(clips), None, None) => DataSource::Synthetic {
                clips: positive("data.synthetic", clips)?,
                seed: synthetic_seed,
            },
            (None, Some(t), Some(v)) => DataSource::Manifest {
                train: base.join(t),
                val: base.join(v),
            },
            (Some(_), _, _) => return Err(Error::Config("data.synthetic excludes data.train and data.val".into())),
            _ => return Err(Error::Config("set data.train and data.val, or data.synthetic".into())),
        };
        let seconds = positive("data.clip_seconds", kv.take_parsed("data.clip_seconds")?.unwrap_or(2.0f64))?;
        let rir_prob = kv.take_parsed("data.rir_prob")?.unwrap_or(0.5f64);
        if !(0.0..=1.0).contains(&rir_prob) {
            return Err(Error::Config(format!("data.rir_prob must lie in [0, 1], got {rir_prob}")));
        }
        let noise_rir = match kv.take("data.noise_rir").as_deref() {
            None | Some("independent") => NoiseRir::Independent,
            Some("same") => NoiseRir::Same,
            Some("none") => NoiseRir::None,
            Some(o) => return Err(Error::Config(format!("data.noise_rir: expected independent, same or none, got `{o}`"))),
        };
        let mix = MixConfig {
            clip_len: (seconds * SAMPLE_RATE as f64).round() as usize,
            snr: SnrPolicy::Uniform(TRAIN_SNR.0, TRAIN_SNR.1),
            rir_prob,
            noise_rir,
        };
        let out_dir = base.join(kv.take("out.dir").unwrap_or_else(|| "run".into()));
        kv.finish()?;
        Ok(Self {
            model,
            optim,
            epochs,
            patience,
            batch_size,
            clips_per_epoch,
            val_clips,
            seed,
            max_time,
            data,
            mix,
            out_dir,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn defaults_and_relative_paths() {
        let c = RunConfig::parse("data.train = tr\ndata.val = cv\n", Path::new("/cfg")).unwrap();
        assert_eq!(c.optim, AdamConfig::default());
        assert_eq!(c.patience, 5);
        assert_eq!(
            c.data,
            DataSource::Manifest {
                train: "/cfg/tr".into(),
                val: "/cfg/cv".into()
            }
        );
        assert_eq!(c.out_dir, Path::new("/cfg/run"));
        assert_eq!(c.model, ModelConfig::default_for(Variant::E));
        assert_eq!(c.mix.noise_rir, NoiseRir::Independent);
    }

    #[test]
    fn field_errors_name_the_key() {
        let cases = [
            ("data.synthetic = 10\noptim.lr = 0\n", "optim.lr"),
            ("data.synthetic = 10\ntrain.patience = 0\n", "train.patience"),
            ("data.synthetic = 10\ntrain.bogus = 1\n", "train.bogus"),
            ("data.synthetic = 10\noptim.name = sgd\n", "optim.name"),
            ("data.synthetic = 10\ndata.train = x\n", "data.synthetic"),
            ("train.epochs = 3\n", "data.train"),
            ("data.synthetic = 10\ntrain.epochs = three\n", "train.epochs"),
        ];
        for (text, key) in cases {
            let msg = RunConfig::parse(text, Path::new(".")).unwrap_err().to_string();
            assert!(msg.contains(key), "{text:?}: {msg}");
        }
    }

    #[test]
    fn tiny_synthetic_run() {
        let c = RunConfig::parse(
            "model.variant = C\nmodel.tiny = true\ndata.synthetic = 50\ntrain.max_minutes = 1.5\ndata.clip_seconds = 1\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(c.model, ModelConfig::tiny(Variant::C));
        assert_eq!(c.max_time, Some(Duration::from_secs(90)));
        assert_eq!(c.mix.clip_len, 16000);
    }
}
