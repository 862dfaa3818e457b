use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, ArrayD, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mask::{apply_mask_graph, MaskActivation};
use super::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::layers::{
    BatchNormStats, BnMode, ComplexBatchNorm, ComplexConv2d, ComplexConvTranspose2d, ComplexDense, ComplexLstm,
    Dense, Lstm, LstmState, Prelu,
};
use crate::stft::{FrameLayout, Stft};
use crate::targets::ComplexMask;
use crate::tensor::{ComplexTensor, Graph, ParamStore, Scalar, Var};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Whether batch norm uses batch statistics or the running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderBlock {
    pub conv: ComplexConv2d,
    pub bn: ComplexBatchNorm,
    pub act: Prelu,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderBlock {
    pub conv: ComplexConvTranspose2d,
    /// Absent on the output layer.
    pub post: Option<(ComplexBatchNorm, Prelu)>,
    pub out_f: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Core {
    Real { lstm: Lstm, dense: Dense },
    Complex { lstm: ComplexLstm, dense: ComplexDense },
}

/// Noisy input prepared for the network.
#[derive(Clone, Debug)]
pub struct Analysis<T: Scalar> {
    /// `[2, B, T, F−1]`, DC removed.
    pub planes: ArrayD<T>,
    pub layout: FrameLayout,
}

/// Tape handles of one forward pass.
#[derive(Debug)]
pub struct Output<T: Scalar> {
    /// `[2, B, T, F−1]`.
    pub mask: Var,
    /// Masked spectrum, `[2, B, T, F−1]`.
    pub estimate: Var,
    /// `[B, L]`.
    pub wave: Var,
    /// Batch statistics of every norm layer (train mode only), to be passed
    /// to [`Dccrn::apply_bn_updates`] once the tape is dropped.
    pub bn_updates: Vec<BatchNormStats<T>>,
}

/// Offline inference result for one waveform.
#[derive(Clone, Debug)]
pub struct Enhanced<T: Scalar> {
    /// `[F−1 × T]`.
    pub mask: ComplexMask<T>,
    pub wave: Vec<T>,
}

/// Complex encoder, recurrent core and skip-connected complex decoder
/// estimating a mask on the STFT of the input.
#[derive(Clone, Debug)]
pub struct Dccrn<T: Scalar> {
    config: ModelConfig,
    stft: Stft<T>,
    params: ParamStore<T>,
    pub(crate) encoder: Vec<EncoderBlock>,
    pub(crate) core: Core,
    pub(crate) decoder: Vec<DecoderBlock>,
    bn_stats: Vec<BatchNormStats<T>>,
    activation: MaskActivation,
    id: u64,
}

impl<T: Scalar> Dccrn<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stft = Stft::new(config.stft.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cc = config.complex_channels();
        let freqs = config.freq_sizes()?;
        let d = config.depth();
        let mut bn_stats = Vec::new();

        let mut encoder = Vec::with_capacity(d);
        for i in 0..d {
            let cin = if i == 0 { 1 } else { cc[i - 1] };
            let name = format!("encoder.{i}");
            let conv = ComplexConv2d::new(
                &mut params,
                &format!("{name}.conv"),
                cin,
                cc[i],
                config.encoder_geometry(),
                &mut rng,
            );
            let bn = ComplexBatchNorm::new(&mut params, &format!("{name}.bn"), cc[i]);
            let act = Prelu::new(&mut params, &format!("{name}.prelu"), cc[i]);
            bn_stats.push(BatchNormStats::new(cc[i]));
            encoder.push(EncoderBlock { conv, bn, act });
        }

        let width = config.bottleneck_width()?;
        let units = config.lstm_units;
        let core = if config.variant.complex_lstm() {
            Core::Complex {
                lstm: ComplexLstm::new(&mut params, "lstm", width / 2, units, config.lstm_layers, &mut rng),
                dense: ComplexDense::new(&mut params, "dense", units, config.dense_units / 2, &mut rng),
            }
        } else {
            Core::Real {
                lstm: Lstm::new(&mut params, "lstm", width, units, config.lstm_layers, &mut rng),
                dense: Dense::new(&mut params, "dense", units, config.dense_units, &mut rng),
            }
        };

        let mut decoder = Vec::with_capacity(d);
        for j in 0..d {
            let cin = 2 * cc[d - 1 - j];
            let last = j + 1 == d;
            let cout = if last { 1 } else { cc[d - 2 - j] };
            let name = format!("decoder.{j}");
            let conv = ComplexConvTranspose2d::new(
                &mut params,
                &format!("{name}.conv"),
                cin,
                cout,
                config.decoder_geometry(j),
                &mut rng,
            );
            let post = (!last).then(|| {
                bn_stats.push(BatchNormStats::new(cout));
                (
                    ComplexBatchNorm::new(&mut params, &format!("{name}.bn"), cout),
                    Prelu::new(&mut params, &format!("{name}.prelu"), cout),
                )
            });
            decoder.push(DecoderBlock {
                conv,
                post,
                out_f: freqs[d - 1 - j],
            });
        }

        Ok(Self {
            config: config.clone(),
            stft,
            params,
            encoder,
            core,
            decoder,
            bn_stats,
            activation: MaskActivation::Tanh,
            id: next_id(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn stft(&self) -> &Stft<T> {
        &self.stft
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mutable weights. The model gets a fresh id, so streams opened on the
    /// old weights refuse to continue.
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.id = next_id();
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Identifies this instance; streams refuse to run on another model.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn activation(&self) -> MaskActivation {
        self.activation
    }

    pub fn set_activation(&mut self, act: MaskActivation) {
        self.id = next_id();
        self.activation = act;
    }

    /// Names of the norm layers, in the order of [`Self::bn_stats`].
    pub fn bn_names(&self) -> Vec<&str> {
        self.norms().map(|bn| bn.name.as_str()).collect()
    }

    pub fn bn_stats(&self) -> &[BatchNormStats<T>] {
        &self.bn_stats
    }

    /// Like [`Self::params_mut`], this assigns a fresh id.
    pub fn bn_stats_mut(&mut self) -> &mut [BatchNormStats<T>] {
        self.id = next_id();
        &mut self.bn_stats
    }

    fn norms(&self) -> impl Iterator<Item = &ComplexBatchNorm> {
        self.encoder
            .iter()
            .map(|b| &b.bn)
            .chain(self.decoder.iter().filter_map(|b| b.post.as_ref().map(|p| &p.0)))
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// averages.
    pub fn apply_bn_updates(&mut self, updates: &[BatchNormStats<T>]) -> Result<()> {
        if updates.len() != self.bn_stats.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} norm updates, got {}",
                self.bn_stats.len(),
                updates.len()
            )));
        }
        let momentum = ComplexBatchNorm::MOMENTUM;
        for (s, u) in self.bn_stats.iter_mut().zip(updates) {
            s.update(u, momentum);
        }
        self.id = next_id();
        Ok(())
    }

    /// One train-mode pass over `waves` to seed the running statistics.
    pub fn calibrate(&mut self, waves: &[&[T]]) -> Result<()> {
        let updates = {
            let mut g = Graph::with_params(&self.params);
            self.forward(&mut g, waves, Mode::Train)?.bn_updates
        };
        self.apply_bn_updates(&updates)
    }

    /// Same weights and statistics in another precision, with a fresh id.
    pub fn cast<U: Scalar>(&self) -> Result<Dccrn<U>> {
        Ok(Dccrn {
            config: self.config.clone(),
            stft: Stft::new(self.config.stft.clone())?,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            core: self.core.clone(),
            decoder: self.decoder.clone(),
            bn_stats: self.bn_stats.iter().map(|s| s.cast()).collect(),
            activation: self.activation,
            id: next_id(),
        })
    }

    pub(crate) fn bn_mode(&self, index: usize, mode: Mode) -> BnMode<'_, T> {
        match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval(&self.bn_stats[index]),
        }
    }

    /// Index into [`Self::bn_stats`] of decoder layer `j`'s norm.
    pub(crate) fn decoder_bn_index(&self, j: usize) -> usize {
        self.encoder.len() + j
    }

    /// Padded STFT of equal-length waveforms with the DC bin dropped.
    pub fn analyze(&self, waves: &[&[T]]) -> Result<Analysis<T>> {
        let len = match waves.first() {
            Some(w) if !w.is_empty() => w.len(),
            _ => return Err(Error::InvalidArgument("no input samples".into())),
        };
        if let Some(w) = waves.iter().find(|w| w.len() != len) {
            return Err(Error::InvalidArgument(format!(
                "batch waveforms must share one length, got {len} and {}",
                w.len()
            )));
        }
        if waves.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("input contains non-finite samples".into()));
        }
        let layout = self.stft.padded_layout(len);
        let f = self.stft.bins() - 1;
        let mut planes = ArrayD::zeros(IxDyn(&[2, waves.len(), layout.frames, f]));
        for (b, w) in waves.iter().enumerate() {
            let spec = self.stft.analyze_with(w, layout).remove_dc()?;
            let re = spec.bins.re().view().into_dimensionality::<Ix2>().expect("[F, T]");
            let im = spec.bins.im().view().into_dimensionality::<Ix2>().expect("[F, T]");
            planes.slice_mut(s![0, b, .., ..]).assign(&re.t());
            planes.slice_mut(s![1, b, .., ..]).assign(&im.t());
        }
        Ok(Analysis { planes, layout })
    }

    /// Network pass from noisy planes `[2, B, T, F−1]` to the mask.
    pub fn estimate_mask(
        &self,
        g: &mut Graph<'_, T>,
        noisy: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchNormStats<T>>)> {
        let sh = g.shape(noisy).to_vec();
        let f = self.stft.bins() - 1;
        if sh.len() != 4 || sh[0] != 2 || sh[3] != f {
            return Err(Error::ShapeMismatch {
                lhs: sh,
                rhs: vec![2, 0, 0, f],
            });
        }
        let (b, t) = (sh[1], sh[2]);
        let mut x = g.reshape(noisy, &[2, b, 1, t, f])?;
        let mut updates = Vec::new();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (i, blk) in self.encoder.iter().enumerate() {
            let y = blk.conv.forward(g, x)?;
            let (y, st) = blk.bn.forward(g, y, self.bn_mode(i, mode))?;
            updates.extend(st);
            x = blk.act.forward(g, y)?;
            skips.push(x);
        }
        let (mut h, _) = self.core_forward(g, x, None)?;
        let d = self.decoder.len();
        for (j, blk) in self.decoder.iter().enumerate() {
            let inp = g.concat(&[h, skips[d - 1 - j]], 2)?;
            let y = blk.conv.forward(g, inp, blk.out_f)?;
            h = match &blk.post {
                Some((bn, act)) => {
                    let (y, st) = bn.forward(g, y, self.bn_mode(self.decoder_bn_index(j), mode))?;
                    updates.extend(st);
                    act.forward(g, y)?
                }
                None => y,
            };
        }
        Ok((g.reshape(h, &[2, b, t, f])?, updates))
    }

    /// Recurrent core on `x: [2, B, C, T, F]`, returning the same shape.
    pub(crate) fn core_forward(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        state: Option<&LstmState<T>>,
    ) -> Result<(Var, LstmState<T>)> {
        let sh = g.shape(x).to_vec();
        let (b, c, t, f) = (sh[1], sh[2], sh[3], sh[4]);
        let p = g.permute(x, &[3, 1, 0, 2, 4])?;
        let (d, st) = match &self.core {
            Core::Real { lstm, dense } => {
                let seq = g.reshape(p, &[t, b, 2 * c * f])?;
                let (y, st) = lstm.forward(g, seq, state)?;
                let flat = g.reshape(y, &[t * b, lstm.hidden()])?;
                let out = dense.forward(g, flat)?;
                (g.reshape(out, &[t, b, 2, c, f])?, st)
            }
            Core::Complex { lstm, dense } => {
                let plane = |g: &mut Graph<'_, T>, i: usize| -> Result<Var> {
                    let n = g.narrow(p, 2, i, 1)?;
                    g.reshape(n, &[t, b, c * f])
                };
                let (xr, xi) = (plane(g, 0)?, plane(g, 1)?);
                let (yr, yi, st) = lstm.forward(g, xr, xi, state)?;
                let hdim = lstm.hidden();
                let yr = g.reshape(yr, &[t * b, hdim])?;
                let yi = g.reshape(yi, &[t * b, hdim])?;
                let (dr, di) = dense.forward(g, yr, yi)?;
                let dr = g.reshape(dr, &[t, b, 1, c, f])?;
                let di = g.reshape(di, &[t, b, 1, c, f])?;
                (g.concat(&[dr, di], 2)?, st)
            }
        };
        Ok((g.permute(d, &[2, 1, 3, 0, 4])?, st))
    }

    /// Full pass from waveforms to the enhanced waveforms.
    pub fn forward(&self, g: &mut Graph<'_, T>, waves: &[&[T]], mode: Mode) -> Result<Output<T>> {
        let a = self.analyze(waves)?;
        let noisy = g.constant(a.planes);
        let (mask, bn_updates) = self.estimate_mask(g, noisy, mode)?;
        let estimate = apply_mask_graph(g, self.config.variant, self.activation, noisy, mask)?;
        let wave = reconstruct(g, &self.stft, estimate, &a.layout)?;
        Ok(Output {
            mask,
            estimate,
            wave,
            bn_updates,
        })
    }

    /// Eval-mode enhancement of one waveform; output length equals input
    /// length.
    pub fn enhance(&self, wave: &[T]) -> Result<Enhanced<T>> {
        let mut g = Graph::with_params(&self.params);
        let out = self.forward(&mut g, &[wave], Mode::Eval)?;
        let m = g.value(out.mask);
        let plane = |p: usize| {
            m.slice(s![p, 0, .., ..]).t().to_owned().into_dyn()
        };
        let mask = ComplexMask::new(ComplexTensor::new(plane(0), plane(1))?);
        let wave = g.value(out.wave).iter().copied().collect();
        Ok(Enhanced { mask, wave })
    }

    /// Bypasses the network: applies `mask: [F−1 × T]` to the noisy
    /// spectrum of `wave` with this model's variant and synthesizes.
    pub fn enhance_with_mask(&self, wave: &[T], mask: &ComplexMask<T>) -> Result<Vec<T>> {
        let a = self.analyze(&[wave])?;
        let (t, f) = (a.planes.shape()[2], a.planes.shape()[3]);
        if mask.shape() != [f, t] {
            return Err(Error::ShapeMismatch {
                lhs: mask.shape().to_vec(),
                rhs: vec![f, t],
            });
        }
        let mut planes = ArrayD::zeros(IxDyn(&[2, 1, t, f]));
        for (p, src) in [mask.planes.re(), mask.planes.im()].into_iter().enumerate() {
            let v = src.view().into_dimensionality::<Ix2>().expect("[F, T]");
            planes.slice_mut(s![p, 0, .., ..]).assign(&v.t());
        }
        let mut g = Graph::new();
        let noisy = g.constant(a.planes);
        let m = g.constant(planes);
        let est = apply_mask_graph(&mut g, self.config.variant, self.activation, noisy, m)?;
        let wave = reconstruct(&mut g, &self.stft, est, &a.layout)?;
        Ok(g.value(wave).iter().copied().collect())
    }
}

/// Inverse STFT on the tape: `est: [2, B, T, F−1]` → `[B, L]`.
pub fn reconstruct<T: Scalar>(g: &mut Graph<'_, T>, stft: &Stft<T>, est: Var, layout: &FrameLayout) -> Result<Var> {
    let sh = g.shape(est).to_vec();
    let (b, t, f) = (sh[1], sh[2], sh[3]);
    let (w, hop) = (stft.config().win_len, stft.config().hop);
    let p = g.permute(est, &[1, 2, 0, 3])?;
    let flat = g.reshape(p, &[b * t, 2 * f])?;
    let kernel: Array2<T> = stft.synthesis_kernel_no_dc();
    let k = g.constant(kernel.into_dyn());
    let frames = g.matmul(flat, k)?;
    let frames = g.reshape(frames, &[b, t, w])?;
    let ola = g.overlap_add(frames, hop)?;
    let sig = g.narrow(ola, 1, layout.pad_front, layout.signal_len)?;
    let inv = g.constant(stft.inverse_envelope(layout).into_dyn());
    g.mul(sig, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn default_parameter_counts() {
        let e = Dccrn::<f32>::build(&ModelConfig::default_for(Variant::E), 0).unwrap();
        assert_eq!(e.num_params(), 3_980_994);
        let cl = Dccrn::<f32>::build(&ModelConfig::default_for(Variant::CL), 0).unwrap();
        assert_eq!(cl.num_params(), 3_670_722);
        // Variants R, C and E differ only in how the mask is applied.
        for v in [Variant::R, Variant::C] {
            assert_eq!(Dccrn::<f32>::build(&ModelConfig::default_for(v), 0).unwrap().num_params(), e.num_params());
        }
    }

    #[test]
    fn eval_before_calibration_is_an_error() {
        let m = Dccrn::<f32>::build(&ModelConfig::tiny(Variant::E), 1).unwrap();
        let err = m.enhance(&noise(800, 1)).unwrap_err();
        assert!(matches!(err, Error::NoRunningStats(_)), "{err}");
    }

    #[test]
    fn output_is_finite_and_length_preserving() {
        for v in Variant::ALL {
            let mut m = Dccrn::<f32>::build(&ModelConfig::tiny(v), 2).unwrap();
            let x = noise(1234, 2);
            m.calibrate(&[&x]).unwrap();
            for len in [1, 399, 400, 1234] {
                let out = m.enhance(&x[..len]).unwrap();
                assert_eq!(out.wave.len(), len);
                assert!(out.wave.iter().all(|v| v.is_finite()));
                let t = m.stft().padded_layout(len).frames;
                assert_eq!(out.mask.shape(), [256, t]);
            }
        }
    }

    #[test]
    fn depth_one_model_builds_and_runs() {
        let mut c = ModelConfig::tiny(Variant::C);
        c.encoder_channels = vec![8];
        c.lookahead_frames = 1;
        c.dense_units = 8 * 128;
        let mut m = Dccrn::<f32>::build(&c, 3).unwrap();
        let x = noise(640, 3);
        m.calibrate(&[&x]).unwrap();
        assert_eq!(m.enhance(&x).unwrap().wave.len(), 640);
    }

    #[test]
    fn inconsistent_config_fails_to_build() {
        let mut c = ModelConfig::tiny(Variant::E);
        c.dense_units = 17;
        assert!(Dccrn::<f32>::build(&c, 0).is_err());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for v in Variant::ALL {
            let m = Dccrn::<f64>::build(&ModelConfig::tiny(v), 4).unwrap();
            let x: Vec<f64> = noise(900, 4).iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = noise(900, 5).iter().map(|&v| v as f64).collect();
            let mut g = Graph::with_params(m.params());
            let out = m.forward(&mut g, &[&x, &y], Mode::Train).unwrap();
            let refs = ndarray::Array2::from_shape_fn((2, 900), |(b, i)| if b == 0 { y[i] } else { x[i] }).into_dyn();
            let loss = crate::targets::loss_sisnr(&mut g, out.wave, &refs, true).unwrap();
            let grads = g.backward(loss).unwrap();
            for (id, p) in m.params().iter() {
                assert!(grads.param(id).iter().any(|&d| d != 0.0), "{v}: {} has zero gradient", p.name);
            }
        }
    }

    #[test]
    fn cast_preserves_outputs() {
        let mut m = Dccrn::<f32>::build(&ModelConfig::tiny(Variant::CL), 5).unwrap();
        let x = noise(700, 6);
        m.calibrate(&[&x]).unwrap();
        let a = m.enhance(&x).unwrap().wave;
        let m64 = m.cast::<f64>().unwrap();
        assert_ne!(m64.id(), m.id());
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let b = m64.enhance(&x64).unwrap().wave;
        let max = a.iter().zip(&b).fold(0.0f64, |acc, (&p, &q)| acc.max((p as f64 - q).abs()));
        assert!(max < 1e-4, "{max}");
    }
}
