//! Frame-by-frame inference with cached temporal context.
//!
//! Every encoder layer keeps its last `kT − 1` input frames and runs the
//! kernel on that window without time padding. A decoder layer keeps a
//! window of `kT` input frames and runs with `kT − 1` frames of padding on
//! both sides, which yields exactly one output frame: for a look-ahead
//! layer the window covers frames `t..t+kT−1` and starts empty, for a
//! causal layer it covers `t−kT+1..t` and starts with zeros. The delays of
//! the look-ahead layers add up to the configured look-ahead.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use super::dccrn::Dccrn;
use super::engine::{CoreState, Engine, Frame};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Channel concatenation of two `[2, C, F]` frames with equal `F`.
fn stack_channels<T: Scalar>(a: &[T], b: &[T]) -> Frame<T> {
    let (ha, hb) = (a.len() / 2, b.len() / 2);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for p in 0..2 {
        out.extend_from_slice(&a[p * ha..(p + 1) * ha]);
        out.extend_from_slice(&b[p * hb..(p + 1) * hb]);
    }
    out
}

/// Streaming state at the spectrum level: noisy frames `[2, F−1]` in,
/// enhanced frames out, delayed by the look-ahead.
#[derive(Clone, Debug)]
pub struct FrameStream<T: Scalar> {
    model_id: u64,
    context: usize,
    lookahead_layers: usize,
    engine: Engine<T>,
    enc_windows: Vec<VecDeque<Frame<T>>>,
    dec_windows: Vec<VecDeque<Frame<T>>>,
    /// Encoder outputs waiting for their decoder layer, indexed by decoder.
    skips: Vec<VecDeque<Frame<T>>>,
    state: CoreState<T>,
    noisy: VecDeque<Frame<T>>,
    pushed: usize,
    emitted: usize,
    finished: bool,
}

impl<T: Scalar> FrameStream<T> {
    /// Fails if a norm layer has no running statistics yet.
    pub fn new(model: &Dccrn<T>) -> Result<Self> {
        let cfg = model.config();
        let p = cfg.time_context();
        let engine = Engine::new(model)?;
        let enc_windows = engine
            .encoder
            .iter()
            .map(|st| (0..p).map(|_| vec![T::zero(); st.input_len()]).collect())
            .collect();
        let dec_windows = engine
            .decoder
            .iter()
            .enumerate()
            .map(|(j, st)| {
                if j < cfg.lookahead_layers() {
                    VecDeque::new()
                } else {
                    (0..p).map(|_| vec![T::zero(); st.input_len()]).collect()
                }
            })
            .collect();
        Ok(Self {
            model_id: model.id(),
            context: p,
            lookahead_layers: cfg.lookahead_layers(),
            state: engine.initial_state(),
            enc_windows,
            dec_windows,
            skips: vec![VecDeque::new(); cfg.depth()],
            engine,
            noisy: VecDeque::new(),
            pushed: 0,
            emitted: 0,
            finished: false,
        })
    }

    pub fn frames_pushed(&self) -> usize {
        self.pushed
    }

    pub fn frames_emitted(&self) -> usize {
        self.emitted
    }

    fn check(&self, model: &Dccrn<T>) -> Result<()> {
        if model.id() != self.model_id {
            return Err(Error::Stream(format!(
                "stream belongs to model {} but was driven with model {}",
                self.model_id,
                model.id()
            )));
        }
        if self.finished {
            return Err(Error::Stream("stream already flushed".into()));
        }
        Ok(())
    }

    /// Feeds noisy frame `t` (`[2, F−1]`) and returns enhanced frame
    /// `t − lookahead` once it is determined.
    pub fn push(&mut self, model: &Dccrn<T>, frame: ArrayView2<T>) -> Result<Option<Array2<T>>> {
        self.check(model)?;
        let f = model.stft().bins() - 1;
        if frame.dim() != (2, f) {
            return Err(Error::ShapeMismatch {
                lhs: frame.shape().to_vec(),
                rhs: vec![2, f],
            });
        }
        let flat: Vec<T> = frame.iter().copied().collect();
        Ok(self.push_flat(flat).map(|v| Array2::from_shape_vec((2, f), v).expect("[2, F]")))
    }

    /// [`Self::push`] on a flattened `[2, F−1]` frame.
    pub(crate) fn push_flat(&mut self, frame: Frame<T>) -> Option<Frame<T>> {
        self.pushed += 1;
        let d = self.engine.encoder.len();
        let mut x = frame.clone();
        self.noisy.push_back(frame);
        for i in 0..d {
            let win = &mut self.enc_windows[i];
            win.push_back(x);
            let views: Vec<&[T]> = win.iter().map(|v| v.as_slice()).collect();
            x = self.engine.encoder[i].run(&views);
            win.pop_front();
            self.skips[d - 1 - i].push_back(x.clone());
        }
        let h = self.engine.core_step(&x, &mut self.state);
        let skip = self.skips[0].pop_front().expect("skip for every frame");
        self.decode_from(0, stack_channels(&h, &skip))
    }

    /// Pushes one input frame into decoder layer `j` and runs every layer
    /// below it that becomes ready.
    fn decode_from(&mut self, mut j: usize, mut input: Frame<T>) -> Option<Frame<T>> {
        let d = self.engine.decoder.len();
        loop {
            let win = &mut self.dec_windows[j];
            win.push_back(input);
            if win.len() <= self.context {
                return None;
            }
            let views: Vec<&[T]> = win.iter().map(|v| v.as_slice()).collect();
            let y = self.engine.decoder[j].run(&views);
            win.pop_front();
            if j + 1 == d {
                let mut est = self.noisy.pop_front().expect("noisy frame for every output");
                self.engine.mask(&mut est, &y);
                self.emitted += 1;
                return Some(est);
            }
            j += 1;
            let skip = self.skips[j].pop_front().expect("skip for every frame");
            input = stack_channels(&y, &skip);
        }
    }

    fn flush_flat(&mut self) -> Vec<Frame<T>> {
        let mut out = Vec::new();
        for j in 0..self.lookahead_layers {
            for _ in 0..self.context {
                let zero = vec![T::zero(); self.engine.decoder[j].input_len()];
                out.extend(self.decode_from(j, zero));
            }
        }
        self.finished = true;
        out
    }

    /// Ends the stream: the look-ahead layers see zero frames past the end,
    /// exactly as the offline pass pads them. Returns the remaining
    /// `lookahead` frames (fewer if fewer were pushed).
    pub fn flush(&mut self, model: &Dccrn<T>) -> Result<Vec<Array2<T>>> {
        self.check(model)?;
        let f = model.stft().bins() - 1;
        Ok(self
            .flush_flat()
            .into_iter()
            .map(|v| Array2::from_shape_vec((2, f), v).expect("[2, F]"))
            .collect())
    }
}

/// Waveform-level stream: hop-sized chunks in, hop-sized chunks out.
///
/// Output lags input by the look-ahead plus `win_len − hop` samples, the
/// overlap still waiting for later frames.
#[derive(Clone, Debug)]
pub struct WaveStream<T: Scalar> {
    frames: FrameStream<T>,
    hop: usize,
    pad_front: usize,
    window: Vec<T>,
    pending: Vec<T>,
    acc: VecDeque<T>,
    /// Inverse overlap-add envelope by position modulo hop.
    inv_env: Vec<T>,
    /// `[2(F−1), W]`: window to spectrum without the DC bin.
    analysis: Vec<T>,
    /// `[W, 2(F−1)]`: spectrum to windowed frame.
    synthesis: Vec<T>,
    samples_in: usize,
    samples_out: usize,
    /// Padded positions already dropped or emitted.
    position: usize,
}

impl<T: Scalar> WaveStream<T> {
    pub fn new(model: &Dccrn<T>) -> Result<Self> {
        let stft = model.stft();
        let (w, hop) = (stft.config().win_len, stft.config().hop);
        let steady = stft.padded_layout(hop);
        let inv = stft.inverse_envelope(&steady);
        let mut inv_env = vec![T::zero(); hop];
        for (p, &v) in inv.iter().enumerate() {
            inv_env[(steady.pad_front + p) % hop] = v;
        }
        let f = stft.bins();
        let a = stft.analysis_kernel();
        let analysis = (1..f)
            .chain(f + 1..2 * f)
            .flat_map(|c| a.column(c).to_vec())
            .collect();
        let synthesis = stft.synthesis_kernel_no_dc().t().iter().copied().collect();
        Ok(Self {
            frames: FrameStream::new(model)?,
            hop,
            pad_front: w - hop,
            window: vec![T::zero(); w],
            pending: Vec::with_capacity(hop),
            acc: VecDeque::new(),
            inv_env,
            analysis,
            synthesis,
            samples_in: 0,
            samples_out: 0,
            position: 0,
        })
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Processes exactly one hop of samples.
    pub fn push_frame(&mut self, model: &Dccrn<T>, chunk: &[T]) -> Result<Option<Vec<T>>> {
        if chunk.len() != self.hop {
            return Err(Error::Stream(format!("expected {} samples per frame, got {}", self.hop, chunk.len())));
        }
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("input contains non-finite samples".into()));
        }
        self.frames.check(model)?;
        self.samples_in += self.hop;
        Ok(self.step(chunk))
    }

    fn step(&mut self, chunk: &[T]) -> Option<Vec<T>> {
        self.window.rotate_left(self.hop);
        let w = self.window.len();
        self.window[w - self.hop..].copy_from_slice(chunk);
        let mut spec = vec![T::zero(); self.analysis.len() / w];
        T::gemm_nt_acc(spec.len(), 1, w, &self.analysis, &self.window, &mut spec);
        let est = self.frames.push_flat(spec)?;
        Some(self.synthesize(&est)).filter(|o| !o.is_empty())
    }

    /// Overlap-adds one enhanced frame and returns the samples it completes.
    fn synthesize(&mut self, est: &[T]) -> Vec<T> {
        let w = self.window.len();
        let mut frame = vec![T::zero(); w];
        T::gemm_nt_acc(w, 1, est.len(), &self.synthesis, est, &mut frame);
        while self.acc.len() < w {
            self.acc.push_back(T::zero());
        }
        for (a, &v) in self.acc.iter_mut().zip(frame.iter()) {
            *a += v;
        }
        let mut out = Vec::with_capacity(self.hop);
        for _ in 0..self.hop {
            let v = self.acc.pop_front().expect("filled above");
            let q = self.position;
            self.position += 1;
            if q >= self.pad_front {
                out.push(v * self.inv_env[q % self.hop]);
            }
        }
        self.samples_out += out.len();
        out
    }

    /// Arbitrary-length input; returns whatever output became available.
    pub fn push(&mut self, model: &Dccrn<T>, samples: &[T]) -> Result<Vec<T>> {
        let mut out = Vec::new();
        let mut rest = samples;
        while !rest.is_empty() {
            let take = (self.hop - self.pending.len()).min(rest.len());
            self.pending.extend_from_slice(&rest[..take]);
            rest = &rest[take..];
            if self.pending.len() == self.hop {
                let chunk = std::mem::take(&mut self.pending);
                out.extend(self.push_frame(model, &chunk)?.unwrap_or_default());
                self.pending = chunk;
                self.pending.clear();
            }
        }
        Ok(out)
    }

    /// Ends the stream. Together with earlier outputs, exactly as many
    /// samples come out as went in.
    pub fn flush(&mut self, model: &Dccrn<T>) -> Result<Vec<T>> {
        self.frames.check(model)?;
        if self.pending.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("input contains non-finite samples".into()));
        }
        let total = self.samples_in + self.pending.len();
        let mut out = Vec::new();
        if total == 0 {
            self.frames.finished = true;
            return Ok(out);
        }
        let target = model.stft().padded_layout(total).frames;
        let mut chunk = std::mem::take(&mut self.pending);
        chunk.resize(self.hop, T::zero());
        let zeros = vec![T::zero(); self.hop];
        if total > self.samples_in {
            out.extend(self.step(&chunk).unwrap_or_default());
        }
        while self.frames.frames_pushed() < target {
            out.extend(self.step(&zeros).unwrap_or_default());
        }
        for est in self.frames.flush_flat() {
            let o = self.synthesize(&est);
            out.extend(o);
        }
        let emitted_before = self.samples_out - out.len();
        out.truncate(total.saturating_sub(emitted_before));
        self.samples_in = total;
        Ok(out)
    }
}

impl<T: Scalar> Dccrn<T> {
    pub fn frame_stream(&self) -> Result<FrameStream<T>> {
        FrameStream::new(self)
    }

    pub fn wave_stream(&self) -> Result<WaveStream<T>> {
        WaveStream::new(self)
    }

    /// Streams `wave` through a fresh [`WaveStream`] in hop-sized chunks.
    pub fn enhance_streaming(&self, wave: &[T]) -> Result<Vec<T>> {
        let mut s = self.wave_stream()?;
        let mut out = s.push(self, wave)?;
        out.extend(s.flush(self)?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use ndarray::s;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    fn model(v: Variant, seed: u64) -> Dccrn<f32> {
        let mut m = Dccrn::build(&ModelConfig::tiny(v), seed).unwrap();
        let x = noise(3000, seed + 100);
        m.calibrate(&[&x]).unwrap();
        m
    }

    fn max_diff(a: &[f32], b: &[f32]) -> f32 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn waveform_stream_matches_offline() {
        for v in Variant::ALL {
            let m = model(v, 1);
            let x = noise(2345, 2);
            let off = m.enhance(&x).unwrap().wave;
            let on = m.enhance_streaming(&x).unwrap();
            let diff = max_diff(&off, &on);
            assert!(diff <= 1e-5, "{v}: {diff}");
        }
    }

    #[test]
    fn frame_stream_delays_by_lookahead() {
        let m = model(Variant::E, 3);
        let a = m.analyze(&[&noise(1600, 4)]).unwrap();
        let t = a.planes.shape()[2];
        let mut s = m.frame_stream().unwrap();
        let mut got = Vec::new();
        for i in 0..t {
            let fr = a.planes.slice(s![.., 0, i, ..]);
            let out = s.push(&m, fr).unwrap();
            assert_eq!(out.is_some(), i >= 2, "frame {i}");
            got.extend(out);
        }
        got.extend(s.flush(&m).unwrap());
        assert_eq!(got.len(), t);
        assert!(s.push(&m, a.planes.slice(s![.., 0, 0, ..])).is_err());
    }

    #[test]
    fn chunk_sizes_do_not_matter() {
        let m = model(Variant::C, 5);
        let x = noise(1999, 6);
        let whole = m.enhance_streaming(&x).unwrap();
        let mut s = m.wave_stream().unwrap();
        let mut out = Vec::new();
        for c in x.chunks(37) {
            out.extend(s.push(&m, c).unwrap());
        }
        out.extend(s.flush(&m).unwrap());
        assert_eq!(out, whole);
    }

    #[test]
    fn stream_refuses_another_model() {
        let a = model(Variant::R, 7);
        let b = a.clone().cast::<f32>().unwrap();
        let mut s = a.wave_stream().unwrap();
        assert!(matches!(s.push_frame(&b, &[0.0; 100]), Err(Error::Stream(_))));
    }

    #[test]
    fn empty_stream_flushes_to_nothing() {
        let m = model(Variant::E, 8);
        let mut s = m.wave_stream().unwrap();
        assert!(s.flush(&m).unwrap().is_empty());
    }
}
