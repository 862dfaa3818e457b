//! SNR-controlled mixing and room-impulse-response convolution.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn peak(x: &[f32]) -> f32 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `20·log10(rms(clean) / rms(noise))`.
pub fn snr_db(clean: &[f32], noise: &[f32]) -> f64 {
    20.0 * (rms(clean) / rms(noise)).log10()
}

/// A noisy mixture with its clean reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub noisy: Vec<f32>,
    pub clean: Vec<f32>,
    /// Noise gain applied before any peak normalization.
    pub alpha: f64,
    /// Common gain of the joint peak normalization (1 if none).
    pub gain: f64,
}

impl Mixture {
    /// SNR of the stored pair, measured from `noisy − clean`.
    pub fn measured_snr_db(&self) -> f64 {
        let noise: Vec<f32> = self.noisy.iter().zip(&self.clean).map(|(&y, &s)| y - s).collect();
        snr_db(&self.clean, &noise)
    }
}

/// Mixes `speech` with the first `speech.len()` samples of `noise` scaled to
/// the requested SNR. If the mixture would clip, both signals are scaled by
/// the same factor.
///
/// The arithmetic runs in `f64`; the stored `noisy − clean` is the scaled
/// noise up to `f32` rounding.
pub fn mix_at_snr(speech: &[f32], noise: &[f32], snr_db: f64) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::Data(format!("SNR must be finite, got {snr_db}")));
    }
    if noise.len() < speech.len() {
        return Err(Error::Data(format!(
            "noise has {} samples, speech {}: tile it first",
            noise.len(),
            speech.len()
        )));
    }
    let noise = &noise[..speech.len()];
    let (rs, rn) = (rms(speech), rms(noise));
    if rs == 0.0 {
        return Err(Error::Data("speech is silent".into()));
    }
    if rn == 0.0 {
        return Err(Error::Data("noise is silent".into()));
    }
    let alpha = rs / (rn * 10f64.powf(snr_db / 20.0));
    let mix: Vec<f64> = speech.iter().zip(noise).map(|(&s, &n)| s as f64 + alpha * n as f64).collect();
    let top = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if top > 1.0 { 1.0 / top } else { 1.0 };
    // The stored clean is rounded first and the noise is added to it, so
    // that the measured SNR only sees the rounding of one signal.
    let clean: Vec<f32> = speech.iter().map(|&s| (s as f64 * gain) as f32).collect();
    let noisy = clean
        .iter()
        .zip(noise)
        .map(|(&s, &n)| (s as f64 + alpha * gain * n as f64) as f32)
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    Ok(Mixture {
        noisy,
        clean,
        alpha,
        gain,
    })
}

/// Repeats `noise` circularly from `offset` until `len` samples.
pub fn tile(noise: &[f32], len: usize, offset: usize) -> Result<Vec<f32>> {
    if noise.is_empty() {
        return Err(Error::Data("empty noise clip".into()));
    }
    Ok((0..len).map(|i| noise[(offset + i) % noise.len()]).collect())
}

/// FFT convolution with cached plans.
pub struct Convolver {
    planner: FftPlanner<f64>,
}

impl Default for Convolver {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Convolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Convolver")
    }
}

impl Convolver {
    pub fn new() -> Self {
        Self {
            planner: FftPlanner::new(),
        }
    }

    fn plans(&mut self, n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
        (self.planner.plan_fft_forward(n), self.planner.plan_fft_inverse(n))
    }

    /// First `x.len()` samples of the full linear convolution `x * h`.
    pub fn convolve_truncated(&mut self, x: &[f32], h: &[f32]) -> Vec<f64> {
        let n = (x.len() + h.len() - 1).next_power_of_two();
        let (fwd, inv) = self.plans(n);
        let load = |v: &[f32]| {
            let mut buf: Vec<Complex<f64>> = v.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
            buf.resize(n, Complex::new(0.0, 0.0));
            buf
        };
        let (mut a, mut b) = (load(x), load(h));
        fwd.process(&mut a);
        fwd.process(&mut b);
        for (p, q) in a.iter_mut().zip(&b) {
            *p *= q;
        }
        inv.process(&mut a);
        a[..x.len()].iter().map(|c| c.re / n as f64).collect()
    }

    /// Reverberates `x` with `rir`; the output keeps the input's length and
    /// peak.
    pub fn convolve_rir(&mut self, x: &[f32], rir: &[f32]) -> Result<Vec<f32>> {
        if rir.is_empty() {
            return Err(Error::Data("empty impulse response".into()));
        }
        if rir.len() >= x.len() {
            return Err(Error::Data(format!(
                "impulse response ({} samples) must be shorter than the signal ({})",
                rir.len(),
                x.len()
            )));
        }
        let y = self.convolve_truncated(x, rir);
        let top = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if top > 0.0 { peak(x) as f64 / top } else { 0.0 };
        Ok(y.iter().map(|&v| (v * scale) as f32).collect())
    }
}

/// One-off [`Convolver::convolve_rir`].
pub fn convolve_rir(x: &[f32], rir: &[f32]) -> Result<Vec<f32>> {
    Convolver::new().convolve_rir(x, rir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64, amp: f32) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-amp..amp)).collect()
    }

    #[test]
    fn alpha_follows_the_requested_snr() {
        let s = noise(4000, 1, 0.1);
        let mut n = noise(4000, 2, 0.1);
        let k = (rms(&s) / rms(&n)) as f32;
        n.iter_mut().for_each(|v| *v *= k);
        assert!((mix_at_snr(&s, &n, 0.0).unwrap().alpha - 1.0).abs() < 1e-6);
        assert!((mix_at_snr(&s, &n, 20.0).unwrap().alpha - 0.1).abs() < 1e-6);
    }

    #[test]
    fn silent_inputs_are_errors() {
        let s = noise(100, 1, 0.1);
        assert!(mix_at_snr(&s, &[0.0; 100], 5.0).is_err());
        assert!(mix_at_snr(&[0.0; 100], &s, 5.0).is_err());
        assert!(mix_at_snr(&s, &s[..50], 5.0).is_err());
    }

    #[test]
    fn loud_mixtures_are_normalized_jointly() {
        let s = noise(2000, 3, 0.9);
        let n = noise(2000, 4, 0.9);
        let m = mix_at_snr(&s, &n, -5.0).unwrap();
        assert!(m.gain < 1.0);
        assert!(peak(&m.noisy) <= 1.0);
        assert!((m.measured_snr_db() + 5.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn measured_snr_matches_request(snr in -5.0f64..20.0, seed in 0u64..1000) {
            let s = noise(3000, seed, 0.3);
            let n = noise(3000, seed + 7, 0.3);
            let m = mix_at_snr(&s, &n, snr).unwrap();
            prop_assert!(peak(&m.noisy) <= 1.0);
            // Pre-normalization linearity: mixture − α·noise is the speech.
            let pre: Vec<f64> = s.iter().zip(&n).map(|(&a, &b)| a as f64 + m.alpha * b as f64).collect();
            for ((p, &a), &b) in pre.iter().zip(&s).zip(&n) {
                prop_assert!((p - m.alpha * b as f64 - a as f64).abs() <= 1e-15);
            }
            let got = m.measured_snr_db();
            prop_assert!((got - snr).abs() < 1e-6, "{} vs {}", got, snr);
        }
    }

    #[test]
    fn tiling_wraps_from_the_offset() {
        assert_eq!(tile(&[1.0, 2.0, 3.0], 5, 2).unwrap(), vec![3.0, 1.0, 2.0, 3.0, 1.0]);
        assert!(tile(&[], 3, 0).is_err());
    }

    #[test]
    fn impulses_pass_or_shift_the_signal() {
        let x = noise(500, 5, 0.5);
        let y = convolve_rir(&x, &[1.0]).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut x2 = vec![0.0f32; 500];
        x2[..100].copy_from_slice(&x[..100]);
        let mut d = vec![0.0f32; 8];
        d[7] = 1.0;
        let y = convolve_rir(&x2, &d).unwrap();
        assert!(y[..7].iter().all(|v| v.abs() < 1e-6));
        for i in 0..100 {
            assert!((y[i + 7] - x2[i]).abs() < 1e-6);
        }
        assert!(convolve_rir(&x, &[]).is_err());
    }

    #[test]
    fn fft_convolution_matches_direct_sum() {
        let x = noise(700, 6, 0.5);
        let h = noise(90, 7, 0.5);
        let fast = Convolver::new().convolve_truncated(&x, &h);
        for (i, &v) in fast.iter().enumerate() {
            let direct: f64 = (0..h.len()).filter(|&k| k <= i).map(|k| h[k] as f64 * x[i - k] as f64).sum();
            assert!((v - direct).abs() < 1e-9, "{i}");
        }
        let out = convolve_rir(&x, &h).unwrap();
        assert!((peak(&out) - peak(&x)).abs() < 1e-6);
    }
}
