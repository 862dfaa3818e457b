//! Synthetic stand-ins for speech and noise.
//!
//! "Speech" is a train of voiced syllables: a harmonic stack on a gliding
//! fundamental with a smooth envelope, separated by short pauses. Noise is
//! either white or babble, several gap-free voices summed with a
//! noise floor.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Kinds of synthetic noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Babble,
}

fn normalize(mut x: Vec<f64>, target_rms: f64) -> Vec<f32> {
    let r = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v *= target_rms / r);
    }
    x.into_iter().map(|v| v as f32).collect()
}

/// Adds one voiced syllable of `n` samples at `start` into `out`.
fn syllable(rng: &mut impl Rng, out: &mut [f64], start: usize, n: usize, sr: f64) {
    let f0: f64 = rng.gen_range(90.0..260.0);
    // Linear glide of the fundamental across the syllable, kept inside the
    // adult speaking range.
    let f1 = (f0 * rng.gen_range(0.7..1.4)).clamp(85.0, 260.0);
    let harmonics = rng.gen_range(4..12);
    let formant = rng.gen_range(300.0..2500.0);
    let amps: Vec<f64> = (1..=harmonics)
        .map(|k| {
            let f = f0 * k as f64;
            let shape = (-((f - formant) / 700.0).powi(2)).exp();
            (0.3 + shape) / k as f64
        })
        .collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..TAU)).collect();
    let mut phase = 0.0;
    for i in 0..n {
        let Some(slot) = out.get_mut(start + i) else { break };
        let u = i as f64 / n as f64;
        let f = f0 + (f1 - f0) * u;
        phase += TAU * f / sr;
        let env = (std::f64::consts::PI * u).sin().powf(0.7);
        let mut v = 0.0;
        for (k, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
            let fk = f * (k + 1) as f64;
            if fk < sr / 2.0 - 200.0 {
                v += a * ((k + 1) as f64 * phase + p).sin();
            }
        }
        *slot += env * v;
    }
}

/// Syllables and pauses filling `len` samples.
fn voice(rng: &mut impl Rng, len: usize, sr: f64, pauses: bool) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut t = if pauses { rng.gen_range(0..(0.1 * sr) as usize) } else { 0 };
    let shortest = (0.08 * sr) as usize;
    while t < len {
        let mut n = rng.gen_range(shortest..(0.3 * sr) as usize);
        if pauses {
            // An utterance ends on a completed syllable, not mid-vowel.
            if len - t < shortest {
                break;
            }
            n = n.min(len - t);
        }
        syllable(rng, &mut out, t, n, sr);
        let gap = if pauses {
            rng.gen_range((0.03 * sr) as usize..(0.15 * sr) as usize)
        } else {
            0
        };
        // Without pauses syllables overlap a little so the level never drops.
        t += if pauses { n + gap } else { n * 3 / 4 };
    }
    out
}

/// One synthetic utterance of `len` samples at `rms` level.
pub fn speech(rng: &mut impl Rng, len: usize, sample_rate: u32, rms: f64) -> Vec<f32> {
    normalize(voice(rng, len, sample_rate as f64, true), rms)
}

pub fn noise(rng: &mut impl Rng, kind: NoiseKind, len: usize, sample_rate: u32, rms: f64) -> Vec<f32> {
    let sr = sample_rate as f64;
    let raw = match kind {
        NoiseKind::White => (0..len).map(|_| StandardNormal.sample(rng)).collect(),
        NoiseKind::Babble => {
            let talkers = rng.gen_range(4..8);
            let mut sum = vec![0.0; len];
            for _ in 0..talkers {
                for (s, v) in sum.iter_mut().zip(voice(rng, len, sr, false)) {
                    *s += v;
                }
            }
            let level = (sum.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
            for s in sum.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *s += 0.1 * level * n;
            }
            sum
        }
    };
    normalize(raw, rms)
}
