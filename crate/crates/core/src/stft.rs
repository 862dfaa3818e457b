//! STFT analysis and overlap-add synthesis as fixed DFT-kernel products.
//!
//! Analysis multiplies a `[T, W]` frame matrix by a `[W, 2F]` kernel whose
//! columns are `w[n]·cos(2πkn/N)` and `−w[n]·sin(2πkn/N)`; this is the
//! strided convolution with DFT-initialized filters written as one GEMM.
//! Synthesis multiplies by the matching `[2F, W]` inverse kernel, overlap-adds
//! and divides by the window-product envelope.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayD, ArrayView1, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Scalar};

/// Analysis/synthesis window (the same window is applied on both sides).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    SqrtHann,
    Hann,
    Rect,
}

impl Window {
    pub fn name(self) -> &'static str {
        match self {
            Window::SqrtHann => "sqrt_hann",
            Window::Hann => "hann",
            Window::Rect => "rect",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sqrt_hann" => Ok(Window::SqrtHann),
            "hann" => Ok(Window::Hann),
            "rect" => Ok(Window::Rect),
            other => Err(Error::Config(format!(
                "unknown window `{other}` (expected sqrt_hann, hann or rect)"
            ))),
        }
    }

    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                match self {
                    Window::SqrtHann => hann.sqrt(),
                    Window::Hann => hann,
                    Window::Rect => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_len: 400,
            hop: 100,
            fft_len: 512,
            window: Window::SqrtHann,
        }
    }
}

impl StftConfig {
    /// Number of non-negative frequency bins.
    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn hop_ms(&self) -> f64 {
        1000.0 * self.hop as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_len || self.win_len > self.fft_len {
            return Err(Error::Config(format!(
                "stft needs 0 < hop <= win_len <= fft_len, got hop={} win_len={} fft_len={}",
                self.hop, self.win_len, self.fft_len
            )));
        }
        if self.fft_len % 2 != 0 {
            return Err(Error::Config(format!("stft.fft_len must be even, got {}", self.fft_len)));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("stft.sample_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Where the frames of a spectrogram sit relative to the signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    /// Zeros prepended before the first sample.
    pub pad_front: usize,
    pub signal_len: usize,
    pub frames: usize,
}

/// `[F × T]` complex spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram<T: Scalar> {
    pub bins: ComplexTensor<T>,
    pub config: StftConfig,
    pub layout: FrameLayout,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn freqs(&self) -> usize {
        self.bins.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.bins.shape()[1]
    }

    /// Drops the DC row: `[F × T] → [F−1 × T]`.
    pub fn remove_dc(&self) -> Result<Self> {
        if self.freqs() < 2 {
            return Err(Error::InvalidArgument(format!(
                "remove_dc needs at least 2 bins, got {}",
                self.freqs()
            )));
        }
        let cut = |a: &ArrayD<T>| a.slice_axis(Axis(0), (1..).into()).to_owned();
        Ok(Self {
            bins: ComplexTensor::new(cut(self.bins.re()), cut(self.bins.im()))?,
            config: self.config.clone(),
            layout: self.layout,
        })
    }

    /// Re-inserts a zero DC row: `[F × T] → [F+1 × T]`.
    pub fn restore_dc(&self) -> Self {
        let grow = |a: &ArrayD<T>| {
            let mut sh = a.shape().to_vec();
            sh[0] += 1;
            let mut out = ArrayD::zeros(IxDyn(&sh));
            out.slice_axis_mut(Axis(0), (1..).into()).assign(a);
            out
        };
        Self {
            bins: ComplexTensor::new(grow(self.bins.re()), grow(self.bins.im())).expect("same shape"),
            config: self.config.clone(),
            layout: self.layout,
        }
    }
}

/// Precomputed analysis and synthesis kernels for one configuration.
#[derive(Clone, Debug)]
pub struct Stft<T: Scalar> {
    config: StftConfig,
    window: Vec<f64>,
    analysis: Array2<T>,
    synthesis: Array2<T>,
}

/// Relative tolerance on the flatness of the overlap-add envelope.
const COLA_TOL: f64 = 1e-9;

impl<T: Scalar> Stft<T> {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let (w, hop, n) = (config.win_len, config.hop, config.fft_len);
        let window = config.window.coefficients(w);
        let env: Vec<f64> = (0..hop)
            .map(|r| (r..w).step_by(hop).map(|i| window[i] * window[i]).sum())
            .collect();
        let (lo, hi) = env.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        if lo <= 0.0 || (hi - lo) / hi > COLA_TOL {
            return Err(Error::Config(format!(
                "{} window with win_len={w} and hop={hop} does not satisfy constant overlap-add \
                 (envelope ranges {lo:.6}..{hi:.6})",
                config.window.name()
            )));
        }
        let f = config.bins();
        let mut analysis = Array2::zeros((w, 2 * f));
        let mut synthesis = Array2::zeros((2 * f, w));
        for i in 0..w {
            for k in 0..f {
                // Reduce k·i mod N before scaling so the angle stays exact.
                let ang = 2.0 * PI * ((k * i) % n) as f64 / n as f64;
                let (sn, cs) = ang.sin_cos();
                analysis[[i, k]] = T::of(window[i] * cs);
                analysis[[i, f + k]] = T::of(-window[i] * sn);
                let c = if k == 0 || 2 * k == n { 1.0 } else { 2.0 } / n as f64;
                synthesis[[k, i]] = T::of(c * window[i] * cs);
                synthesis[[f + k, i]] = T::of(-c * window[i] * sn);
            }
        }
        Ok(Self {
            config,
            window,
            analysis,
            synthesis,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn bins(&self) -> usize {
        self.config.bins()
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// `[W, 2F]` analysis kernel (real parts, then imaginary parts).
    pub fn analysis_kernel(&self) -> &Array2<T> {
        &self.analysis
    }

    /// `[2F, W]` synthesis kernel producing a windowed time frame.
    pub fn synthesis_kernel(&self) -> &Array2<T> {
        &self.synthesis
    }

    /// Synthesis kernel without the two DC rows, `[2(F−1), W]`, for
    /// spectra whose DC bin has been removed.
    pub fn synthesis_kernel_no_dc(&self) -> Array2<T> {
        let f = self.bins();
        ndarray::concatenate(
            Axis(0),
            &[self.synthesis.slice(s![1..f, ..]), self.synthesis.slice(s![f + 1.., ..])],
        )
        .expect("same width")
    }

    /// Frames starting at sample 0 with no padding; a signal shorter than
    /// one window yields a single zero-padded frame.
    pub fn layout(&self, len: usize) -> FrameLayout {
        let (w, hop) = (self.config.win_len, self.config.hop);
        let frames = if len < w { 1 } else { (len - w) / hop + 1 };
        FrameLayout {
            pad_front: 0,
            signal_len: len,
            frames,
        }
    }

    /// Layout with `win_len − hop` leading zeros and enough trailing frames
    /// that every sample is covered by the full set of overlapping windows.
    /// Frame `t` then ends at sample `(t+1)·hop − 1` of the signal, which is
    /// what a causal streaming front-end sees after `t+1` hops.
    pub fn padded_layout(&self, len: usize) -> FrameLayout {
        let (w, hop) = (self.config.win_len, self.config.hop);
        let pad = w - hop;
        let frames = if len == 0 { 1 } else { (pad + len - 1) / hop + 1 };
        FrameLayout {
            pad_front: pad,
            signal_len: len,
            frames,
        }
    }

    /// `[T, W]` matrix of raw (unwindowed) frames for a layout.
    pub fn frames(&self, x: &[T], layout: &FrameLayout) -> Array2<T> {
        let (w, hop) = (self.config.win_len, self.config.hop);
        let mut out = Array2::zeros((layout.frames, w));
        for t in 0..layout.frames {
            let mut row = out.row_mut(t);
            for i in 0..w {
                let p = (t * hop + i) as isize - layout.pad_front as isize;
                if p >= 0 && (p as usize) < x.len() {
                    row[i] = x[p as usize];
                }
            }
        }
        out
    }

    /// `[T, 2F]` spectra of a frame matrix.
    pub fn spectra(&self, frames: &Array2<T>) -> Array2<T> {
        frames.dot(&self.analysis)
    }

    pub fn analyze(&self, x: &[T]) -> ComplexSpectrogram<T> {
        self.analyze_with(x, self.layout(x.len()))
    }

    pub fn analyze_padded(&self, x: &[T]) -> ComplexSpectrogram<T> {
        self.analyze_with(x, self.padded_layout(x.len()))
    }

    pub fn analyze_with(&self, x: &[T], layout: FrameLayout) -> ComplexSpectrogram<T> {
        let spec = self.spectra(&self.frames(x, &layout));
        let f = self.bins();
        let re = spec.slice(s![.., ..f]).t().to_owned().into_dyn();
        let im = spec.slice(s![.., f..]).t().to_owned().into_dyn();
        ComplexSpectrogram {
            bins: ComplexTensor::new(re, im).expect("same shape"),
            config: self.config.clone(),
            layout,
        }
    }

    /// Per-sample reciprocal of the overlap-add envelope over the output
    /// region of `layout` (zero where no window reaches).
    pub fn inverse_envelope(&self, layout: &FrameLayout) -> Array1<T> {
        let (w, hop) = (self.config.win_len, self.config.hop);
        let total = (layout.frames - 1) * hop + w;
        let mut env = vec![0.0f64; total];
        for t in 0..layout.frames {
            for i in 0..w {
                env[t * hop + i] += self.window[i] * self.window[i];
            }
        }
        Array1::from_shape_fn(layout.signal_len, |p| {
            let q = p + layout.pad_front;
            match env.get(q) {
                Some(&e) if e > 1e-10 => T::of(1.0 / e),
                _ => T::zero(),
            }
        })
    }

    /// Overlap-adds windowed frames `[T, W]` and normalizes onto the
    /// signal region of `layout`.
    pub fn overlap_add(&self, frames: &Array2<T>, layout: &FrameLayout) -> Vec<T> {
        let (w, hop) = (self.config.win_len, self.config.hop);
        let total = (frames.nrows() - 1) * hop + w;
        let mut acc = vec![T::zero(); total];
        for (t, row) in frames.outer_iter().enumerate() {
            for (a, &v) in acc[t * hop..t * hop + w].iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = self.inverse_envelope(layout);
        (0..layout.signal_len)
            .map(|p| acc.get(p + layout.pad_front).copied().unwrap_or(T::zero()) * inv[p])
            .collect()
    }

    pub fn synthesize(&self, spec: &ComplexSpectrogram<T>) -> Result<Vec<T>> {
        let f = self.bins();
        if spec.freqs() != f || spec.config != self.config {
            return Err(Error::InvalidArgument(format!(
                "spectrogram with {} bins does not match this transform ({f} bins)",
                spec.freqs()
            )));
        }
        if spec.frames() != spec.layout.frames {
            return Err(Error::InvalidArgument("spectrogram frame count disagrees with its layout".into()));
        }
        let t = spec.frames();
        let mut stacked = Array2::zeros((t, 2 * f));
        stacked.slice_mut(s![.., ..f]).assign(&spec.bins.re().view().into_dimensionality::<ndarray::Ix2>().expect("2-D").t());
        stacked.slice_mut(s![.., f..]).assign(&spec.bins.im().view().into_dimensionality::<ndarray::Ix2>().expect("2-D").t());
        let frames = stacked.dot(&self.synthesis);
        Ok(self.overlap_add(&frames, &spec.layout))
    }

    /// Windowed time frame for one `[2F]` spectrum.
    pub fn synthesize_frame(&self, spectrum: ArrayView1<T>) -> Array1<T> {
        spectrum.dot(&self.synthesis)
    }

    /// Spectral energy with the one-sided Parseval weighting, equal to the
    /// summed energy of the windowed, zero-padded frames.
    pub fn energy(&self, spec: &ComplexSpectrogram<T>) -> f64 {
        let n = self.config.fft_len;
        let mut total = 0.0;
        for k in 0..spec.freqs() {
            let c = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
            let row: f64 = spec
                .bins
                .re()
                .index_axis(Axis(0), k)
                .iter()
                .zip(spec.bins.im().index_axis(Axis(0), k).iter())
                .map(|(&r, &i)| r.as_f64() * r.as_f64() + i.as_f64() * i.as_f64())
                .sum();
            total += c * row;
        }
        total / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn default_config_shapes() {
        let st = Stft::<f64>::new(StftConfig::default()).unwrap();
        assert_eq!(st.bins(), 257);
        let spec = st.analyze(&noise(16_000, 1));
        assert_eq!(spec.frames(), (16_000 - 400) / 100 + 1);
        assert_eq!(spec.remove_dc().unwrap().freqs(), 256);
    }

    #[test]
    fn short_signal_gives_one_frame() {
        let st = Stft::<f64>::new(StftConfig::default()).unwrap();
        let spec = st.analyze(&noise(123, 2));
        assert_eq!(spec.frames(), 1);
    }

    #[test]
    fn zero_in_zero_out() {
        let st = Stft::<f32>::new(StftConfig::default()).unwrap();
        let spec = st.analyze(&vec![0.0; 2000]);
        assert!(spec.bins.re().iter().chain(spec.bins.im()).all(|&v| v == 0.0));
        assert!(st.synthesize(&spec).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_cola_is_rejected_at_construction() {
        let cfg = StftConfig { window: Window::Hann, hop: 300, ..Default::default() };
        let err = Stft::<f32>::new(cfg).unwrap_err().to_string();
        assert!(err.contains("overlap-add"), "{err}");
        for window in [Window::SqrtHann, Window::Hann, Window::Rect] {
            assert!(Stft::<f32>::new(StftConfig { window, ..Default::default() }).is_ok());
        }
        assert!(Stft::<f32>::new(StftConfig { hop: 500, ..Default::default() }).is_err());
    }

    #[test]
    fn padded_round_trip_is_exact_everywhere() {
        let st = Stft::<f64>::new(StftConfig::default()).unwrap();
        for len in [1, 99, 400, 1234, 16_000] {
            let x = noise(len, len as u64);
            let y = st.synthesize(&st.analyze_padded(&x)).unwrap();
            assert_eq!(y.len(), len);
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-12, "len {len}: {err}");
        }
    }

    #[test]
    fn plain_round_trip_interior() {
        let st = Stft::<f32>::new(StftConfig::default()).unwrap();
        let x: Vec<f32> = noise(16_000, 3).iter().map(|&v| v as f32).collect();
        let y = st.synthesize(&st.analyze(&x)).unwrap();
        let covered = (st.layout(x.len()).frames - 1) * 100 + 400;
        let err = (400..covered - 400).map(|i| (x[i] - y[i]).abs()).fold(0.0, f32::max);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn remove_restore_zeroes_dc_only() {
        let st = Stft::<f64>::new(StftConfig::default()).unwrap();
        let spec = st.analyze(&noise(2000, 4));
        let back = spec.remove_dc().unwrap().restore_dc();
        let mut expect = spec.clone();
        expect.bins.re_mut().index_axis_mut(Axis(0), 0).fill(0.0);
        expect.bins.im_mut().index_axis_mut(Axis(0), 0).fill(0.0);
        assert_eq!(back, expect);
        let a = st.synthesize(&expect).unwrap();
        let b = st.synthesize(&expect.remove_dc().unwrap().restore_dc()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
    }

    #[test]
    fn parseval_energy() {
        let st = Stft::<f64>::new(StftConfig::default()).unwrap();
        let x = noise(4000, 5);
        let spec = st.analyze(&x);
        let frames = st.frames(&x, &spec.layout);
        let direct: f64 = frames
            .outer_iter()
            .map(|r| r.iter().zip(st.window()).map(|(&v, &w)| (v * w).powi(2)).sum::<f64>())
            .sum();
        assert!((st.energy(&spec) - direct).abs() <= 1e-6 * direct);
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let st = Stft::<f64>::new(StftConfig::default()).unwrap();
        let x: Vec<f64> = (0..8000).map(|n| (2.0 * PI * 1000.0 * n as f64 / 16_000.0).sin()).collect();
        let mag = st.analyze(&x).bins.magnitude();
        for col in mag.axis_iter(Axis(1)) {
            let arg = col.iter().enumerate().fold((0, 0.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
            assert_eq!(arg, 32);
        }
    }

    #[test]
    fn analysis_is_linear() {
        let st = Stft::<f64>::new(StftConfig::default()).unwrap();
        let (x, y) = (noise(3000, 6), noise(3000, 7));
        let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.3 * a - 1.7 * b).collect();
        let (sx, sy, sz) = (st.analyze(&x).bins, st.analyze(&y).bins, st.analyze(&z).bins);
        let comb = sx.scale(0.3).csub(&sy.scale(1.7)).unwrap();
        let d = comb.csub(&sz).unwrap();
        assert!(d.re().iter().chain(d.im()).all(|v| v.abs() <= 1e-6));
    }
}
