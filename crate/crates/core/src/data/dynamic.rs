//! Seeded on-the-fly mixing of speech, noise and impulse responses.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mix::{mix_at_snr, rms, tile, Convolver, Mixture};
use super::synth::{self, NoiseKind};
use super::wav::{read_wav, write_wav, AudioClip, WavFormat, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Training SNR range in dB.
pub const TRAIN_SNR: (f64, f64) = (-5.0, 20.0);
/// Evaluation SNRs in dB.
pub const EVAL_SNRS: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];

/// A clip on disk or in memory.
#[derive(Clone, Debug)]
pub enum ClipRef {
    File(PathBuf),
    Memory(Arc<[f32]>),
}

/// Lists of speech, noise and impulse-response clips.
#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub speech: Vec<ClipRef>,
    pub noise: Vec<ClipRef>,
    pub rir: Vec<ClipRef>,
}

fn read_list(dir: &Path, name: &str, required: bool) -> Result<Vec<ClipRef>> {
    let path = dir.join(name);
    if !path.exists() && !required {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| ClipRef::File(dir.join(l)))
        .collect())
}

impl Manifest {
    /// Reads `speech.lst`, `noise.lst` and the optional `rir.lst` from
    /// `dir`; entries are paths relative to `dir`, one per line.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m = Self {
            speech: read_list(dir, "speech.lst", true)?,
            noise: read_list(dir, "noise.lst", true)?,
            rir: read_list(dir, "rir.lst", false)?,
        };
        if m.speech.is_empty() || m.noise.is_empty() {
            return Err(Error::Data(format!("{}: manifest lists no speech or no noise", dir.display())));
        }
        Ok(m)
    }

    /// Reports every listed file that does not exist.
    pub fn missing(&self) -> Vec<PathBuf> {
        self.speech
            .iter()
            .chain(&self.noise)
            .chain(&self.rir)
            .filter_map(|c| match c {
                ClipRef::File(p) if !p.exists() => Some(p.clone()),
                _ => None,
            })
            .collect()
    }
}

/// How the SNR of each mixture is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum SnrPolicy {
    Uniform(f64, f64),
    /// Cycles through the list in order.
    Grid(Vec<f64>),
}

/// Which impulse response reverberates the noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseRir {
    /// A separate draw from the speech's.
    Independent,
    Same,
    /// Noise stays dry.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixConfig {
    /// Samples per emitted pair.
    pub clip_len: usize,
    pub snr: SnrPolicy,
    /// Probability that a mixture is reverberated (when RIRs are listed).
    pub rir_prob: f64,
    pub noise_rir: NoiseRir,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            clip_len: 2 * SAMPLE_RATE as usize,
            snr: SnrPolicy::Uniform(TRAIN_SNR.0, TRAIN_SNR.1),
            rir_prob: 0.5,
            noise_rir: NoiseRir::Independent,
        }
    }
}

/// Draws `(speech, noise, RIR, SNR)` combinations from a seeded generator.
///
/// A clip that cannot be read is logged, counted and replaced by a new
/// draw; the emitted stream then depends on which files are readable, but
/// is still a function of the seed.
#[derive(Debug)]
pub struct DynamicMixer {
    manifest: Manifest,
    config: MixConfig,
    cache: HashMap<PathBuf, Arc<[f32]>>,
    convolver: Convolver,
    skipped: usize,
}

/// Consecutive unreadable draws before giving up.
const MAX_RETRIES: usize = 100;

impl DynamicMixer {
    pub fn new(manifest: Manifest, config: MixConfig) -> Result<Self> {
        if manifest.speech.is_empty() || manifest.noise.is_empty() {
            return Err(Error::Data("dynamic mixing needs speech and noise clips".into()));
        }
        if config.clip_len == 0 {
            return Err(Error::Data("clip length must be positive".into()));
        }
        if let SnrPolicy::Uniform(lo, hi) = config.snr {
            if !(lo <= hi) {
                return Err(Error::Data(format!("empty SNR range [{lo}, {hi}]")));
            }
        }
        Ok(Self {
            manifest,
            config,
            cache: HashMap::new(),
            convolver: Convolver::new(),
            skipped: 0,
        })
    }

    pub fn config(&self) -> &MixConfig {
        &self.config
    }

    /// Clips skipped so far because they could not be read.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn fetch(&mut self, clip: &ClipRef) -> Result<Arc<[f32]>> {
        match clip {
            ClipRef::Memory(s) => Ok(s.clone()),
            ClipRef::File(p) => {
                if let Some(s) = self.cache.get(p) {
                    return Ok(s.clone());
                }
                let c: AudioClip = read_wav(p)?;
                if c.is_empty() {
                    return Err(Error::Wav {
                        path: p.clone(),
                        msg: "no samples".into(),
                    });
                }
                let s: Arc<[f32]> = c.samples.into();
                self.cache.insert(p.clone(), s.clone());
                Ok(s)
            }
        }
    }

    fn pick(&mut self, rng: &mut ChaCha8Rng, list: fn(&Manifest) -> &[ClipRef]) -> Result<Arc<[f32]>> {
        for _ in 0..MAX_RETRIES {
            let items = list(&self.manifest);
            let c = items[rng.gen_range(0..items.len())].clone();
            match self.fetch(&c) {
                Ok(s) => return Ok(s),
                Err(e) => {
                    self.skipped += 1;
                    log::warn!("skipping unreadable clip ({} so far): {e}", self.skipped);
                }
            }
        }
        Err(Error::Data(format!("{MAX_RETRIES} consecutive clips could not be read")))
    }

    /// Mixture number `index` of the stream seeded by `rng`.
    fn draw(&mut self, rng: &mut ChaCha8Rng, index: usize) -> Result<Mixture> {
        let len = self.config.clip_len;
        let mut s = vec![0.0f32; len];
        // A crop that falls entirely in a pause is drawn again.
        for attempt in 0.. {
            let speech = self.pick(rng, |m| &m.speech)?;
            if speech.len() > len {
                let start = rng.gen_range(0..=speech.len() - len);
                s.copy_from_slice(&speech[start..start + len]);
            } else {
                s.fill(0.0);
                s[..speech.len()].copy_from_slice(&speech);
            }
            if rms(&s) > 0.0 {
                break;
            }
            if attempt == MAX_RETRIES {
                return Err(Error::Data(format!("{MAX_RETRIES} consecutive speech crops were silent")));
            }
        }
        let noise = self.pick(rng, |m| &m.noise)?;
        let offset = rng.gen_range(0..noise.len());
        let mut n = tile(&noise, len, offset)?;

        if !self.manifest.rir.is_empty() && rng.gen_bool(self.config.rir_prob) {
            let rir = self.pick(rng, |m| &m.rir)?;
            if rir.len() < len {
                s = self.convolver.convolve_rir(&s, &rir)?;
                let noise_rir = match self.config.noise_rir {
                    NoiseRir::Independent => Some(self.pick(rng, |m| &m.rir)?),
                    NoiseRir::Same => Some(rir),
                    NoiseRir::None => None,
                };
                if let Some(r) = noise_rir.filter(|r| r.len() < len) {
                    n = self.convolver.convolve_rir(&n, &r)?;
                }
            }
        }
        let snr = match &self.config.snr {
            SnrPolicy::Uniform(lo, hi) if lo == hi => *lo,
            SnrPolicy::Uniform(lo, hi) => rng.gen_range(*lo..*hi),
            SnrPolicy::Grid(g) => g[index % g.len()],
        };
        mix_at_snr(&s, &n, snr)
    }

    /// The first `count` mixtures of the stream for `seed`.
    pub fn epoch(&mut self, seed: u64, count: usize) -> Result<Vec<Mixture>> {
        self.iter(seed).take(count).collect()
    }

    /// Unbounded stream of mixtures for `seed`.
    pub fn iter(&mut self, seed: u64) -> MixIter<'_> {
        MixIter {
            mixer: self,
            cursor: MixCursor::new(seed),
        }
    }

    /// Next mixture of the stream `cursor` tracks.
    pub fn next_mix(&mut self, cursor: &mut MixCursor) -> Result<Mixture> {
        let m = self.draw(&mut cursor.rng, cursor.index);
        cursor.index += 1;
        m
    }
}

/// Position in a seeded mixture stream, detached from the mixer.
#[derive(Clone, Debug)]
pub struct MixCursor {
    rng: ChaCha8Rng,
    index: usize,
}

impl MixCursor {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            index: 0,
        }
    }
}

pub struct MixIter<'a> {
    mixer: &'a mut DynamicMixer,
    cursor: MixCursor,
}

impl Iterator for MixIter<'_> {
    type Item = Result<Mixture>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.mixer.next_mix(&mut self.cursor))
    }
}

/// Sizes of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub speech_clips: usize,
    pub noise_clips: usize,
    pub clip_len: usize,
    pub seed: u64,
}

impl SyntheticCorpus {
    fn generate(&self) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let speech = (0..self.speech_clips)
            .map(|_| synth::speech(&mut rng, self.clip_len, SAMPLE_RATE, 0.08))
            .collect();
        let noise = (0..self.noise_clips)
            .map(|i| {
                let kind = if i % 2 == 0 { NoiseKind::White } else { NoiseKind::Babble };
                synth::noise(&mut rng, kind, self.clip_len, SAMPLE_RATE, 0.08)
            })
            .collect();
        (speech, noise)
    }

    /// The corpus as an in-memory manifest.
    pub fn manifest(&self) -> Manifest {
        let (speech, noise) = self.generate();
        let mem = |v: Vec<Vec<f32>>| v.into_iter().map(|c| ClipRef::Memory(c.into())).collect();
        Manifest {
            speech: mem(speech),
            noise: mem(noise),
            rir: Vec::new(),
        }
    }

    /// Writes the clips as float WAVs plus `speech.lst` and `noise.lst`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (speech, noise) = self.generate();
        for (name, clips) in [("speech", speech), ("noise", noise)] {
            let mut list = String::new();
            for (i, c) in clips.into_iter().enumerate() {
                let file = format!("{name}_{i:04}.wav");
                write_wav(dir.join(&file), &AudioClip::new(c), WavFormat::Float32)?;
                list += &file;
                list.push('\n');
            }
            let lst = dir.join(format!("{name}.lst"));
            std::fs::write(&lst, list).map_err(|e| Error::io(&lst, e))?;
        }
        Ok(())
    }
}
