//! Tape-free single-frame inference used by the streams.
//!
//! Weights are re-laid out once so that every layer of one time step is a
//! few dense products against the current context. A complex convolution
//! becomes one real product with the block matrix `[[W_r, −W_i], [W_i, W_r]]`
//! over columns gathered per output frequency. Transposed convolutions are
//! split by output phase modulo the stride so that only the taps that land
//! on a bin are multiplied.

use super::dccrn::{Core, Dccrn};
use super::mask::{mask_bin, MaskActivation};
use super::Variant;
use crate::error::Result;
use crate::layers::{ComplexBatchNorm, LstmCell, Prelu};
use crate::tensor::{ConvGeometry, ParamStore, Scalar};

/// Frame layout shared by all stages: `[2, C, F]`, flattened.
pub(crate) type Frame<T> = Vec<T>;

/// Output bins that share one set of frequency taps.
#[derive(Clone, Debug)]
struct Group<T> {
    /// `[2·Co, K]` with `K = 2·Ci·taps·kT`.
    weight: Vec<T>,
    k: usize,
    outputs: Vec<usize>,
    /// Input bin of each `(output, tap)` pair, if inside the input.
    sources: Vec<Option<usize>>,
    taps: usize,
}

/// Eval-mode norm folded to a 2×2 map per channel, then PReLU.
#[derive(Clone, Debug)]
struct Post<T> {
    m: [Vec<T>; 4],
    bias: [Vec<T>; 2],
    slope: Vec<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvStage<T> {
    cin: usize,
    cout: usize,
    fin: usize,
    fout: usize,
    kt: usize,
    /// Window slot of each time tap.
    slots: Vec<usize>,
    groups: Vec<Group<T>>,
    bias: Vec<T>,
    post: Option<Post<T>>,
    cols: Vec<T>,
    acc: Vec<T>,
}

impl<T: Scalar> ConvStage<T> {
    /// `w(p, o, i, kf, kt)` reads weight plane `p` for output channel `o`
    /// and input channel `i`. Each group is `(outputs, taps, source)`.
    #[allow(clippy::too_many_arguments)]
    fn build(
        w: impl Fn(usize, usize, usize, usize, usize) -> T,
        bias: &[T],
        (cin, cout, fin, fout): (usize, usize, usize, usize),
        kt: usize,
        slots: Vec<usize>,
        layout: Vec<(Vec<usize>, Vec<usize>)>,
        source: impl Fn(usize, usize) -> Option<usize>,
        post: Option<Post<T>>,
    ) -> Self {
        let groups = layout
            .into_iter()
            .filter(|(outs, _)| !outs.is_empty())
            .map(|(outputs, kfs)| {
                let taps = kfs.len();
                let k = 2 * cin * taps * kt;
                let mut weight = vec![T::zero(); 2 * cout * k];
                for q in 0..2 {
                    for o in 0..cout {
                        let row = &mut weight[(q * cout + o) * k..(q * cout + o + 1) * k];
                        for p in 0..2 {
                            // Re out: W_r·x_r − W_i·x_i. Im out: W_i·x_r + W_r·x_i.
                            let (plane, sign) = match (q, p) {
                                (0, 0) | (1, 1) => (0, T::one()),
                                (0, _) => (1, -T::one()),
                                _ => (1, T::one()),
                            };
                            for i in 0..cin {
                                for (a, &kf) in kfs.iter().enumerate() {
                                    for t in 0..kt {
                                        row[((p * cin + i) * taps + a) * kt + t] = sign * w(plane, o, i, kf, t);
                                    }
                                }
                            }
                        }
                    }
                }
                let sources = outputs
                    .iter()
                    .flat_map(|&f| kfs.iter().map(move |&kf| (f, kf)))
                    .map(|(f, kf)| source(f, kf))
                    .collect();
                Group {
                    weight,
                    k,
                    outputs,
                    sources,
                    taps,
                }
            })
            .collect();
        Self {
            cin,
            cout,
            fin,
            fout,
            kt,
            slots,
            groups,
            bias: bias.to_vec(),
            post,
            cols: Vec::new(),
            acc: Vec::new(),
        }
    }

    pub(crate) fn input_len(&self) -> usize {
        2 * self.cin * self.fin
    }

    /// One output frame from a window of input frames, oldest first.
    pub(crate) fn run(&mut self, window: &[&[T]]) -> Frame<T> {
        let (cin, cout, fin, fout, kt) = (self.cin, self.cout, self.fin, self.fout, self.kt);
        let mut y = vec![T::zero(); 2 * cout * fout];
        for g in &self.groups {
            let n = g.outputs.len();
            self.cols.clear();
            self.cols.resize(n * g.k, T::zero());
            for (j, col) in self.cols.chunks_exact_mut(g.k).enumerate() {
                let src = &g.sources[j * g.taps..(j + 1) * g.taps];
                for p in 0..2 {
                    for i in 0..cin {
                        let base = (p * cin + i) * fin;
                        for (a, s) in src.iter().enumerate() {
                            let Some(s) = *s else { continue };
                            let dst = &mut col[((p * cin + i) * g.taps + a) * kt..][..kt];
                            for (t, d) in dst.iter_mut().enumerate() {
                                *d = window[self.slots[t]][base + s];
                            }
                        }
                    }
                }
            }
            self.acc.clear();
            self.acc.resize(2 * cout * n, T::zero());
            T::gemm_nt_acc(2 * cout, n, g.k, &g.weight, &self.cols, &mut self.acc);
            for (r, row) in self.acc.chunks_exact(n).enumerate() {
                let b = self.bias[r];
                let out = &mut y[r * fout..(r + 1) * fout];
                for (&f, &v) in g.outputs.iter().zip(row) {
                    out[f] = v + b;
                }
            }
        }
        if self.groups.is_empty() {
            for (r, out) in y.chunks_exact_mut(fout).enumerate() {
                out.fill(self.bias[r]);
            }
        }
        if let Some(post) = &self.post {
            let (re, im) = y.split_at_mut(cout * fout);
            for c in 0..cout {
                let [mrr, mri, mir, mii] = [post.m[0][c], post.m[1][c], post.m[2][c], post.m[3][c]];
                let (br, bi, a) = (post.bias[0][c], post.bias[1][c], post.slope[c]);
                let act = |v: T| if v > T::zero() { v } else { a * v };
                for (r, i) in re[c * fout..(c + 1) * fout].iter_mut().zip(&mut im[c * fout..(c + 1) * fout]) {
                    let (x, z) = (*r, *i);
                    *r = act(mrr * x + mri * z + br);
                    *i = act(mir * x + mii * z + bi);
                }
            }
        }
        y
    }
}

fn post<T: Scalar>(params: &ParamStore<T>, bn: &ComplexBatchNorm, stats: &crate::layers::BatchNormStats<T>, act: &Prelu) -> Result<Post<T>> {
    let (m, bias) = bn.eval_affine(params, stats)?;
    let row = |a: &ndarray::ArrayD<T>, idx: &[usize]| -> Vec<T> {
        let mut v = a.view();
        for &i in idx {
            v = v.index_axis_move(ndarray::Axis(0), i);
        }
        v.iter().copied().collect()
    };
    Ok(Post {
        m: [row(&m, &[0, 0]), row(&m, &[0, 1]), row(&m, &[1, 0]), row(&m, &[1, 1])],
        bias: [row(&bias, &[0]), row(&bias, &[1])],
        slope: params.value(act.slope).iter().copied().collect(),
    })
}

/// Input bin feeding output bin `fo` through tap `kf` of a strided
/// convolution.
fn conv_source(g: ConvGeometry, fin: usize) -> impl Fn(usize, usize) -> Option<usize> {
    move |fo, kf| (fo * g.stride_f + kf).checked_sub(g.pad_f).filter(|&f| f < fin)
}

/// Input bin reaching output bin `f` of a transposed convolution through
/// tap `kf`, when the stride lines up.
fn convt_source(g: ConvGeometry, fin: usize) -> impl Fn(usize, usize) -> Option<usize> {
    move |f, kf| {
        let p = (f + g.pad_f).checked_sub(kf)?;
        (p % g.stride_f == 0 && p / g.stride_f < fin).then_some(p / g.stride_f)
    }
}

#[derive(Clone, Debug)]
struct Cell<T> {
    w_ih: Vec<T>,
    w_hh: Vec<T>,
    bias: Vec<T>,
    input: usize,
    hidden: usize,
    gates: Vec<T>,
}

impl<T: Scalar> Cell<T> {
    fn new(params: &ParamStore<T>, cell: &LstmCell) -> Self {
        let flat = |id| params.value(id).iter().copied().collect::<Vec<T>>();
        Self {
            w_ih: flat(cell.w_ih),
            w_hh: flat(cell.w_hh),
            bias: flat(cell.bias),
            input: cell.input,
            hidden: cell.hidden,
            gates: Vec::new(),
        }
    }

    /// One step for `n` sequences; `x: [n, I]`, state `[n, H]` updated.
    fn step(&mut self, n: usize, x: &[T], h: &mut [T], c: &mut [T]) {
        let hd = self.hidden;
        self.gates.clear();
        for &b in &self.bias {
            self.gates.extend(std::iter::repeat(b).take(n));
        }
        T::gemm_nt_acc(4 * hd, n, self.input, &self.w_ih, x, &mut self.gates);
        T::gemm_nt_acc(4 * hd, n, hd, &self.w_hh, h, &mut self.gates);
        let sig = |v: T| T::one() / (T::one() + (-v).exp());
        let gt = &self.gates;
        for b in 0..n {
            for k in 0..hd {
                let at = |gate: usize| gt[(gate * hd + k) * n + b];
                let (i, f, g, o) = (sig(at(0)), sig(at(1)), at(2).tanh(), sig(at(3)));
                let cell = f * c[b * hd + k] + i * g;
                c[b * hd + k] = cell;
                h[b * hd + k] = o * cell.tanh();
            }
        }
    }
}

#[derive(Clone, Debug)]
enum CoreStage<T> {
    /// Real stack over the concatenated planes, then a real dense layer.
    Real {
        cells: Vec<Cell<T>>,
        dense_w: Vec<T>,
        dense_b: Vec<T>,
    },
    /// Pairs `(LSTM_r, LSTM_i)` run on `[x_r; x_i]`, then a complex dense
    /// layer.
    Complex {
        cells: Vec<(Cell<T>, Cell<T>)>,
        dense_w: [Vec<T>; 2],
        dense_b: [Vec<T>; 2],
    },
}

/// Recurrent state: `(h, c)` per sub-LSTM, `[n, H]` each.
#[derive(Clone, Debug)]
pub(crate) struct CoreState<T>(Vec<(Vec<T>, Vec<T>)>);

#[derive(Clone, Debug)]
pub(crate) struct Engine<T> {
    pub(crate) encoder: Vec<ConvStage<T>>,
    core: CoreStage<T>,
    pub(crate) decoder: Vec<ConvStage<T>>,
    variant: Variant,
    act: MaskActivation,
}

impl<T: Scalar> Engine<T> {
    pub(crate) fn new(model: &Dccrn<T>) -> Result<Self> {
        let cfg = model.config();
        let params = model.params();
        let freqs = cfg.freq_sizes()?;
        let p = cfg.time_context();
        let kt = cfg.kernel.1;
        let d = cfg.depth();
        let plane = |id| params.value(id);

        let mut encoder = Vec::with_capacity(d);
        for (i, blk) in model.encoder.iter().enumerate() {
            let w = plane(blk.conv.weight);
            let g = blk.conv.geom;
            let (cin, cout) = (blk.conv.in_channels, blk.conv.out_channels);
            let layout = vec![((0..freqs[i + 1]).collect(), (0..g.kernel_f).collect())];
            encoder.push(ConvStage::build(
                |pl, o, ci, kf, t| w[[pl, o, ci, kf, t]],
                plane(blk.conv.bias).as_slice().expect("contiguous bias"),
                (cin, cout, freqs[i], freqs[i + 1]),
                kt,
                (0..kt).collect(),
                layout,
                conv_source(g, freqs[i]),
                Some(post(params, &blk.bn, &model.bn_stats()[i], &blk.act)?),
            ));
        }

        let mut decoder = Vec::with_capacity(d);
        for (j, blk) in model.decoder.iter().enumerate() {
            let w = plane(blk.conv.weight);
            let g = blk.conv.geom;
            let (cin, cout) = (blk.conv.in_channels, blk.conv.out_channels);
            let (fin, fout) = (freqs[d - j], blk.out_f);
            let s = g.stride_f;
            let layout = (0..s)
                .map(|r| {
                    let outs = (0..fout).filter(|f| (f + g.pad_f) % s == r).collect();
                    let kfs = (0..g.kernel_f).filter(|kf| kf % s == r).collect();
                    (outs, kfs)
                })
                .collect();
            let post = match &blk.post {
                Some((bn, act)) => Some(post(params, bn, &model.bn_stats()[model.decoder_bn_index(j)], act)?),
                None => None,
            };
            decoder.push(ConvStage::build(
                // Transposed weights are stored [2, Cin, Cout, kF, kT].
                |pl, o, ci, kf, t| w[[pl, ci, o, kf, t]],
                plane(blk.conv.bias).as_slice().expect("contiguous bias"),
                (cin, cout, fin, fout),
                kt,
                (0..kt).map(|t| p - t).collect(),
                layout,
                convt_source(g, fin),
                post,
            ));
        }

        let flat = |id| plane(id).iter().copied().collect::<Vec<T>>();
        let core = match &model.core {
            Core::Real { lstm, dense } => CoreStage::Real {
                cells: lstm.layers.iter().map(|c| Cell::new(params, c)).collect(),
                dense_w: flat(dense.weight),
                dense_b: flat(dense.bias),
            },
            Core::Complex { lstm, dense } => {
                let half = |id, k: usize| -> Vec<T> {
                    let v = plane(id);
                    v.index_axis(ndarray::Axis(0), k).iter().copied().collect()
                };
                CoreStage::Complex {
                    cells: lstm
                        .layers
                        .iter()
                        .map(|(r, i)| (Cell::new(params, r), Cell::new(params, i)))
                        .collect(),
                    dense_w: [half(dense.weight, 0), half(dense.weight, 1)],
                    dense_b: [half(dense.bias, 0), half(dense.bias, 1)],
                }
            }
        };
        Ok(Self {
            encoder,
            core,
            decoder,
            variant: cfg.variant,
            act: model.activation(),
        })
    }

    pub(crate) fn initial_state(&self) -> CoreState<T> {
        let zeros = |c: &Cell<T>, n: usize| (vec![T::zero(); n * c.hidden], vec![T::zero(); n * c.hidden]);
        CoreState(match &self.core {
            CoreStage::Real { cells, .. } => cells.iter().map(|c| zeros(c, 1)).collect(),
            CoreStage::Complex { cells, .. } => cells.iter().flat_map(|(r, i)| [zeros(r, 2), zeros(i, 2)]).collect(),
        })
    }

    /// Bottleneck frame `[2, C, F]` through the recurrent core.
    pub(crate) fn core_step(&mut self, x: &[T], state: &mut CoreState<T>) -> Frame<T> {
        match &mut self.core {
            CoreStage::Real { cells, dense_w, dense_b } => {
                let mut h = x.to_vec();
                for (cell, (hs, cs)) in cells.iter_mut().zip(&mut state.0) {
                    cell.step(1, &h, hs, cs);
                    h.clone_from(hs);
                }
                let mut y = dense_b.clone();
                T::gemm_nt_acc(y.len(), 1, h.len(), dense_w, &h, &mut y);
                y
            }
            CoreStage::Complex { cells, dense_w, dense_b } => {
                // Rows [x_r; x_i] form a batch of two sequences.
                let mut both = x.to_vec();
                let mut hd = 0;
                for (l, (cr, ci)) in cells.iter_mut().enumerate() {
                    let [sr, si] = &mut state.0[2 * l..2 * l + 2] else { unreachable!() };
                    cr.step(2, &both, &mut sr.0, &mut sr.1);
                    ci.step(2, &both, &mut si.0, &mut si.1);
                    hd = cr.hidden;
                    let (f_rr, f_ir) = sr.0.split_at(hd);
                    let (f_ri, f_ii) = si.0.split_at(hd);
                    both.clear();
                    both.extend(f_rr.iter().zip(f_ii).map(|(&a, &b)| a - b));
                    both.extend(f_ri.iter().zip(f_ir).map(|(&a, &b)| a + b));
                }
                let out = dense_b[0].len();
                let mut wr = vec![T::zero(); 2 * out];
                let mut wi = vec![T::zero(); 2 * out];
                T::gemm_nt_acc(out, 2, hd, &dense_w[0], &both, &mut wr);
                T::gemm_nt_acc(out, 2, hd, &dense_w[1], &both, &mut wi);
                let mut y = vec![T::zero(); 2 * out];
                for o in 0..out {
                    y[o] = (wr[2 * o] - wi[2 * o + 1]) + dense_b[0][o];
                    y[out + o] = (wi[2 * o] + wr[2 * o + 1]) + dense_b[1][o];
                }
                y
            }
        }
    }

    /// Applies the mask frame `[2, F−1]` to the noisy frame in place.
    pub(crate) fn mask(&self, noisy: &mut [T], mask: &[T]) {
        let f = noisy.len() / 2;
        for k in 0..f {
            let (re, im) = mask_bin(self.variant, self.act, (noisy[k], noisy[f + k]), (mask[k], mask[f + k]));
            noisy[k] = re;
            noisy[f + k] = im;
        }
    }
}
