//! Self-checks run by the `verify` command: finite-difference gradients,
//! scalar oracles for the complex layers, the look-ahead contract,
//! streaming equivalence and oracle-mask reconstruction.

use std::fmt;

use ndarray::{s, Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::synth;
use crate::error::Result;
use crate::layers::{BnMode, ComplexBatchNorm, ComplexConv2d, ComplexConvTranspose2d, ComplexDense, ComplexLstm, Dense, Lstm, LstmCell, Prelu};
use crate::model::{Dccrn, Mode, ModelConfig, Variant};
use crate::targets::{crm, loss_sisnr, si_snr, ComplexMask};
use crate::tensor::gradcheck::{check_inputs_in, check_params, spread_picks, GradReport};
use crate::tensor::{conv, ComplexTensor, ConvGeometry, Graph, ParamStore, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-10;
/// Exact-zero gradients may only carry round-off.
pub const ZERO_TOL: f64 = 1e-12;
pub const CAUSAL_TOL: f64 = 1e-7;
pub const STREAM_TOL: f64 = 1e-5;
pub const CRM_MIN_DB: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
    /// A deliberately broken computation; passes when the measurement
    /// exceeds the tolerance.
    Exceeds(f64),
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: Bound,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, measured: f64, bound: Bound, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            measured,
            bound,
            detail: detail.into(),
        }
    }

    pub fn failed(name: &str, err: &crate::Error) -> Self {
        Self::new(name, f64::NAN, Bound::AtMost(0.0), format!("error: {err}"))
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost(t) => self.measured <= t,
            Bound::AtLeast(t) => self.measured >= t,
            Bound::Exceeds(t) => self.measured > t,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (op, tol) = match self.bound {
            Bound::AtMost(t) => ("<=", t),
            Bound::AtLeast(t) => (">=", t),
            Bound::Exceeds(t) => (">", t),
        };
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<26} {:>10.3e} {op} {tol:.0e}", self.name, self.measured)?;
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

type CheckFn = fn() -> Result<Check>;

/// Every check, in report order.
pub fn checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("grad.conv2d", grad_conv2d),
        ("grad.conv_transpose2d", grad_conv_transpose2d),
        ("grad.batch_norm", grad_batch_norm),
        ("grad.prelu", grad_prelu),
        ("grad.lstm", grad_lstm),
        ("grad.complex_lstm", grad_complex_lstm),
        ("grad.dense", grad_dense),
        ("grad.model_loss", grad_model_loss),
        ("grad.cancelled_bias", grad_cancelled_bias),
        ("grad.negative_control", grad_negative_control),
        ("oracle.conv2d", oracle_conv2d),
        ("oracle.conv_transpose2d", oracle_conv_transpose2d),
        ("oracle.complex_lstm", oracle_complex_lstm),
        ("oracle.complex_dense", oracle_complex_dense),
        ("lookahead.causality", lookahead_causality),
        ("lookahead.latency", lookahead_latency),
        ("stream.equivalence", stream_equivalence),
        ("oracle_crm.reconstruction", oracle_crm),
    ]
}

/// Runs `checks()`, turning errors into failed checks.
pub fn run_all(mut progress: impl FnMut(&Check)) -> Vec<Check> {
    checks()
        .into_iter()
        .map(|(name, f)| {
            let c = f().unwrap_or_else(|e| Check::failed(name, &e));
            progress(&c);
            c
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

const ENC: ConvGeometry = ConvGeometry {
    kernel_f: 5,
    kernel_t: 2,
    stride_f: 2,
    pad_f: 2,
    pad_t: (1, 0),
};

fn grad_check(name: &str, reports: &[GradReport]) -> Check {
    let worst = reports.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("non-empty");
    let n: usize = reports.iter().map(|r| r.checked).sum();
    Check::new(name, worst.max_rel_err, Bound::AtMost(GRAD_TOL), format!("{n} entries, worst {}", worst.worst))
}

/// Parameter and input gradients of `loss(layer(x))` for one layer.
fn layer_grad<F>(name: &str, store: &mut ParamStore<f64>, x: &ArrayD<f64>, f: F) -> Result<Check>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let mut r = rng(99);
    let probe = {
        let mut g = Graph::with_params(store);
        let xv = g.constant(x.clone());
        let y = f(&mut g, xv)?;
        rand_arr(g.shape(y), &mut r)
    };
    // A random projection followed by tanh exercises every output entry.
    let loss = |g: &mut Graph<'_, f64>, y: Var| -> Result<Var> {
        let p = g.constant(probe.clone());
        let y = g.mul(y, p)?;
        let y = g.tanh(y);
        Ok(g.sum(y))
    };
    let picks = spread_picks(store, 6);
    let params = check_params(
        store,
        &picks,
        GRAD_STEP,
        |g| {
            let xv = g.constant(x.clone());
            let y = f(g, xv)?;
            loss(g, y)
        },
        |_| {},
    )?;
    let inputs = check_inputs_in(Some(store), std::slice::from_ref(x), GRAD_STEP, |g, v| {
        let y = f(g, v[0])?;
        loss(g, y)
    })?;
    Ok(grad_check(name, &[params, inputs]))
}

fn grad_conv2d() -> Result<Check> {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let c = ComplexConv2d::new(&mut store, "conv", 2, 3, ENC, &mut r);
    layer_grad("grad.conv2d", &mut store, &rand_arr(&[2, 2, 2, 3, 8], &mut r), |g, x| c.forward(g, x))
}

fn grad_conv_transpose2d() -> Result<Check> {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let c = ComplexConvTranspose2d::new(&mut store, "deconv", 3, 2, ConvGeometry { pad_t: (0, 1), ..ENC }, &mut r);
    layer_grad("grad.conv_transpose2d", &mut store, &rand_arr(&[2, 2, 3, 3, 4], &mut r), |g, x| c.forward(g, x, 8))
}

fn grad_batch_norm() -> Result<Check> {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let bn = ComplexBatchNorm::new(&mut store, "bn", 2);
    layer_grad("grad.batch_norm", &mut store, &rand_arr(&[2, 2, 2, 3, 4], &mut r), |g, x| {
        Ok(bn.forward(g, x, BnMode::Train)?.0)
    })
}

fn grad_prelu() -> Result<Check> {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let p = Prelu::new(&mut store, "prelu", 3);
    // Keep inputs away from the kink at zero.
    let x = rand_arr(&[2, 2, 3, 2, 4], &mut r).mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    layer_grad("grad.prelu", &mut store, &x, |g, x| p.forward(g, x))
}

fn grad_lstm() -> Result<Check> {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let l = Lstm::new(&mut store, "lstm", 3, 4, 2, &mut r);
    layer_grad("grad.lstm", &mut store, &rand_arr(&[5, 2, 3], &mut r), |g, x| Ok(l.forward(g, x, None)?.0))
}

fn grad_complex_lstm() -> Result<Check> {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let l = ComplexLstm::new(&mut store, "clstm", 3, 4, 2, &mut r);
    layer_grad("grad.complex_lstm", &mut store, &rand_arr(&[2, 5, 2, 3], &mut r), |g, x| {
        let (xr, xi) = split_planes(g, x)?;
        let (yr, yi, _) = l.forward(g, xr, xi, None)?;
        g.concat(&[yr, yi], 0)
    })
}

fn grad_dense() -> Result<Check> {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let cd = ComplexDense::new(&mut store, "cdense", 4, 3, &mut r);
    let d = Dense::new(&mut store, "dense", 3, 2, &mut r);
    layer_grad("grad.dense", &mut store, &rand_arr(&[2, 3, 4], &mut r), |g, x| {
        let (xr, xi) = split_planes(g, x)?;
        let (yr, yi) = cd.forward(g, xr, xi)?;
        let y = g.mul(yr, yi)?;
        d.forward(g, y)
    })
}

/// `[2, rest..]` into two `[rest..]` planes.
fn split_planes(g: &mut Graph<'_, f64>, x: Var) -> Result<(Var, Var)> {
    let rest = g.shape(x)[1..].to_vec();
    let r = g.narrow(x, 0, 0, 1)?;
    let i = g.narrow(x, 0, 1, 1)?;
    Ok((g.reshape(r, &rest)?, g.reshape(i, &rest)?))
}

fn tiny_model() -> Result<(Dccrn<f64>, Vec<Vec<f64>>, ArrayD<f64>)> {
    let model = Dccrn::<f64>::build(&ModelConfig::tiny(Variant::E), 11)?;
    let mut r = rng(12);
    let len = 700;
    let clean: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let tones: Vec<(f64, f64)> = (0..3).map(|_| (r.gen_range(0.01..0.3), r.gen_range(0.0..6.0))).collect();
            (0..len).map(|i| tones.iter().map(|(w, p)| 0.1 * (w * i as f64 + p).sin()).sum()).collect()
        })
        .collect();
    let noisy: Vec<Vec<f64>> = clean
        .iter()
        .map(|c| c.iter().map(|&v| v + 0.05 * r.gen_range(-1.0..1.0)).collect())
        .collect();
    let refs = Array2::from_shape_fn((2, len), |(b, i)| clean[b][i]).into_dyn();
    Ok((model, noisy, refs))
}

/// Biases feeding a train-mode batch norm: the normalization subtracts them
/// again, so their true gradient is exactly zero and a finite difference
/// only sees round-off.
fn cancelled_by_norm(store: &ParamStore<f64>, name: &str) -> bool {
    name.strip_suffix(".conv.bias")
        .is_some_and(|block| store.iter().any(|(_, p)| p.name.starts_with(&format!("{block}.bn."))))
}

/// Full tiny-model SI-SNR loss against finite differences; `corrupt`
/// rewrites the analytic conv gradients before comparison. Also returns the
/// largest analytic gradient among the norm-cancelled biases.
fn model_grad(corrupt: bool) -> Result<(GradReport, f64)> {
    let (model, noisy, refs) = tiny_model()?;
    let mut store = model.params().clone();
    let zero_ids: Vec<usize> = store
        .iter()
        .filter(|(_, p)| cancelled_by_norm(&store, &p.name))
        .map(|(id, _)| id.index())
        .collect();
    let picks: Vec<_> = spread_picks(&store, 2)
        .into_iter()
        .filter(|(id, _)| !zero_ids.contains(&id.index()))
        .filter(|(id, _)| !corrupt || store.get(*id).name.contains("conv.weight"))
        .collect();
    let conv_ids: Vec<usize> = store.iter().filter(|(_, p)| p.name.contains("conv.weight")).map(|(id, _)| id.index()).collect();
    let rows: Vec<&[f64]> = noisy.iter().map(Vec::as_slice).collect();
    let mut zero_max = 0.0f64;
    let report = check_params(
        &mut store,
        &picks,
        GRAD_STEP,
        |g| {
            let out = model.forward(g, &rows, Mode::Train)?;
            loss_sisnr(g, out.wave, &refs, true)
        },
        |grads| {
            for &i in &zero_ids {
                zero_max = grads[i].iter().fold(zero_max, |m, v| m.max(v.abs()));
            }
            if corrupt {
                // A conv backward that forgets the imaginary weight plane.
                for &i in &conv_ids {
                    grads[i].index_axis_mut(Axis(0), 1).fill(0.0);
                    grads[i].index_axis_mut(Axis(0), 0).mapv_inplace(|v| v * 1.1);
                }
            }
        },
    )?;
    Ok((report, zero_max))
}

fn grad_model_loss() -> Result<Check> {
    Ok(grad_check("grad.model_loss", &[model_grad(false)?.0]))
}

fn grad_cancelled_bias() -> Result<Check> {
    let (_, zero_max) = model_grad(false)?;
    Ok(Check::new(
        "grad.cancelled_bias",
        zero_max,
        Bound::AtMost(ZERO_TOL),
        "conv biases ahead of batch norm have zero gradient",
    ))
}

fn grad_negative_control() -> Result<Check> {
    let (r, _) = model_grad(true)?;
    Ok(Check::new(
        "grad.negative_control",
        r.max_rel_err,
        Bound::Exceeds(GRAD_TOL),
        format!("corrupted conv backward must be caught, worst {}", r.worst),
    ))
}

fn oracle_conv2d() -> Result<Check> {
    let mut r = rng(20);
    let mut worst: f64 = 0.0;
    for g in [ENC, ConvGeometry { kernel_f: 3, kernel_t: 3, stride_f: 1, pad_f: 1, pad_t: (2, 0) }] {
        let x = rand_arr(&[2, 2, 3, 4, 9], &mut r);
        let w = rand_arr(&[2, 2, 3, g.kernel_f, g.kernel_t], &mut r);
        let b = rand_arr(&[2, 2], &mut r);
        let fast = conv::conv2d(&x, &w, Some(&b), &g)?;
        let slow = conv_oracle(&x, &w, &b, &g);
        worst = worst.max(max_abs_diff(&fast, &slow));
    }
    Ok(Check::new("oracle.conv2d", worst, Bound::AtMost(ORACLE_TOL), "vs scalar complex sum"))
}

/// `y[o,t,f] = b[o] + Σ W[o,i,kf,kt]·x[i, t+kt−pad_t, f·s+kf−pad_f]` in
/// complex arithmetic.
fn conv_oracle(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>, g: &ConvGeometry) -> ArrayD<f64> {
    let (bn, ci, t, f) = (x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let co = w.shape()[1];
    let to = t + g.pad_t.0 + g.pad_t.1 + 1 - g.kernel_t;
    let fo = (f + 2 * g.pad_f - g.kernel_f) / g.stride_f + 1;
    let mut y = ArrayD::zeros(IxDyn(&[2, bn, co, to, fo]));
    for bi in 0..bn {
        for o in 0..co {
            for tt in 0..to {
                for ff in 0..fo {
                    let (mut re, mut im) = (b[[0, o]], b[[1, o]]);
                    for i in 0..ci {
                        for kf in 0..g.kernel_f {
                            for kt in 0..g.kernel_t {
                                let ts = (tt + kt) as isize - g.pad_t.0 as isize;
                                let fs = (ff * g.stride_f + kf) as isize - g.pad_f as isize;
                                if ts < 0 || ts >= t as isize || fs < 0 || fs >= f as isize {
                                    continue;
                                }
                                let (ts, fs) = (ts as usize, fs as usize);
                                let (xr, xi) = (x[[0, bi, i, ts, fs]], x[[1, bi, i, ts, fs]]);
                                let (wr, wi) = (w[[0, o, i, kf, kt]], w[[1, o, i, kf, kt]]);
                                re += wr * xr - wi * xi;
                                im += wr * xi + wi * xr;
                            }
                        }
                    }
                    y[[0, bi, o, tt, ff]] = re;
                    y[[1, bi, o, tt, ff]] = im;
                }
            }
        }
    }
    y
}

fn oracle_conv_transpose2d() -> Result<Check> {
    let mut r = rng(21);
    let mut worst: f64 = 0.0;
    for (g, out_f) in [(ConvGeometry { pad_t: (0, 1), ..ENC }, 9), (ConvGeometry { pad_t: (0, 1), ..ENC }, 10), (ENC, 8)] {
        let fin = g.out_f(out_f)?;
        let y = rand_arr(&[2, 2, 3, 4, fin], &mut r);
        let w = rand_arr(&[2, 3, 2, g.kernel_f, g.kernel_t], &mut r);
        let b = rand_arr(&[2, 2], &mut r);
        let fast = conv::conv_transpose2d(&y, &w, Some(&b), &g, out_f)?;
        let slow = conv_transpose_oracle(&y, &w, &b, &g, out_f);
        if fast.shape() != slow.shape() {
            return Ok(Check::new("oracle.conv_transpose2d", f64::INFINITY, Bound::AtMost(ORACLE_TOL), "shape differs"));
        }
        worst = worst.max(max_abs_diff(&fast, &slow));
    }
    Ok(Check::new("oracle.conv_transpose2d", worst, Bound::AtMost(ORACLE_TOL), "vs scalar complex scatter"))
}

/// Scatters `W[i,o,kf,kt]·y[i,t,f]` to `x[o, t+kt−pad_t, f·s+kf−pad_f]`.
fn conv_transpose_oracle(y: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>, g: &ConvGeometry, out_f: usize) -> ArrayD<f64> {
    let (bn, ci, t, f) = (y.shape()[1], y.shape()[2], y.shape()[3], y.shape()[4]);
    let co = w.shape()[2];
    let to = t + g.kernel_t - 1 - g.pad_t.0 - g.pad_t.1;
    let mut x = ArrayD::zeros(IxDyn(&[2, bn, co, to, out_f]));
    for bi in 0..bn {
        for o in 0..co {
            x.slice_mut(s![0, bi, o, .., ..]).fill(b[[0, o]]);
            x.slice_mut(s![1, bi, o, .., ..]).fill(b[[1, o]]);
        }
        for i in 0..ci {
            for tt in 0..t {
                for ff in 0..f {
                    let (yr, yi) = (y[[0, bi, i, tt, ff]], y[[1, bi, i, tt, ff]]);
                    for o in 0..co {
                        for kf in 0..g.kernel_f {
                            for kt in 0..g.kernel_t {
                                let td = (tt + kt) as isize - g.pad_t.0 as isize;
                                let fd = (ff * g.stride_f + kf) as isize - g.pad_f as isize;
                                if td < 0 || td >= to as isize || fd < 0 || fd >= out_f as isize {
                                    continue;
                                }
                                let (wr, wi) = (w[[0, i, o, kf, kt]], w[[1, i, o, kf, kt]]);
                                x[[0, bi, o, td as usize, fd as usize]] += wr * yr - wi * yi;
                                x[[1, bi, o, td as usize, fd as usize]] += wr * yi + wi * yr;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Scalar LSTM over `x: [T][I]` with gates `(i, f, g, o)`.
fn lstm_oracle(store: &ParamStore<f64>, cell: &LstmCell, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (wi, wh, b) = (store.value(cell.w_ih), store.value(cell.w_hh), store.value(cell.bias));
    let h = cell.hidden;
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
    let mut out = Vec::with_capacity(x.len());
    for xt in x {
        let z: Vec<f64> = (0..4 * h)
            .map(|r| {
                b[[r]] + (0..cell.input).map(|j| wi[[r, j]] * xt[j]).sum::<f64>() + (0..h).map(|j| wh[[r, j]] * hs[j]).sum::<f64>()
            })
            .collect();
        for k in 0..h {
            cs[k] = sig(z[h + k]) * cs[k] + sig(z[k]) * z[2 * h + k].tanh();
            hs[k] = sig(z[3 * h + k]) * cs[k].tanh();
        }
        out.push(hs.clone());
    }
    out
}

fn oracle_complex_lstm() -> Result<Check> {
    let mut r = rng(22);
    let mut store = ParamStore::new();
    let cl = ComplexLstm::new(&mut store, "clstm", 3, 4, 2, &mut r);
    let (steps, batch) = (6, 2);
    let xr = rand_arr(&[steps, batch, 3], &mut r);
    let xi = rand_arr(&[steps, batch, 3], &mut r);
    let mut g = Graph::with_params(&store);
    let (vr, vi) = (g.constant(xr.clone()), g.constant(xi.clone()));
    let (yr, yi, _) = cl.forward(&mut g, vr, vi, None)?;
    let mut worst: f64 = 0.0;
    for b in 0..batch {
        let seq = |a: &ArrayD<f64>| -> Vec<Vec<f64>> { (0..steps).map(|t| a.slice(s![t, b, ..]).to_vec()).collect() };
        let (mut hr, mut hi) = (seq(&xr), seq(&xi));
        for (lr, li) in &cl.layers {
            let (f_rr, f_ir) = (lstm_oracle(&store, lr, &hr), lstm_oracle(&store, lr, &hi));
            let (f_ri, f_ii) = (lstm_oracle(&store, li, &hr), lstm_oracle(&store, li, &hi));
            // (F_rr − F_ii) + j(F_ri + F_ir)
            hr = f_rr.iter().zip(&f_ii).map(|(a, c)| a.iter().zip(c).map(|(p, q)| p - q).collect()).collect();
            hi = f_ri.iter().zip(&f_ir).map(|(a, c)| a.iter().zip(c).map(|(p, q)| p + q).collect()).collect();
        }
        for t in 0..steps {
            worst = worst.max(max_abs_diff(g.value(yr).slice(s![t, b, ..]), &hr[t]));
            worst = worst.max(max_abs_diff(g.value(yi).slice(s![t, b, ..]), &hi[t]));
        }
    }
    Ok(Check::new("oracle.complex_lstm", worst, Bound::AtMost(ORACLE_TOL), "vs scalar recurrences"))
}

fn oracle_complex_dense() -> Result<Check> {
    let mut r = rng(23);
    let mut store = ParamStore::new();
    let d = ComplexDense::new(&mut store, "cdense", 5, 4, &mut r);
    let (xr, xi) = (rand_arr(&[3, 5], &mut r), rand_arr(&[3, 5], &mut r));
    let mut g = Graph::with_params(&store);
    let (vr, vi) = (g.constant(xr.clone()), g.constant(xi.clone()));
    let (yr, yi) = d.forward(&mut g, vr, vi)?;
    let (w, b) = (store.value(d.weight), store.value(d.bias));
    let mut worst: f64 = 0.0;
    for n in 0..3 {
        for o in 0..4 {
            let (mut re, mut im) = (b[[0, o]], b[[1, o]]);
            for k in 0..5 {
                let (wr, wi) = (w[[0, o, k]], w[[1, o, k]]);
                re += wr * xr[[n, k]] - wi * xi[[n, k]];
                im += wr * xi[[n, k]] + wi * xr[[n, k]];
            }
            worst = worst.max((g.value(yr)[[n, o]] - re).abs()).max((g.value(yi)[[n, o]] - im).abs());
        }
    }
    Ok(Check::new("oracle.complex_dense", worst, Bound::AtMost(ORACLE_TOL), "vs scalar matvec"))
}

/// Eval-mode masks for noisy planes `[2, 1, T, F−1]`.
fn masks(model: &Dccrn<f64>, planes: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let mut g = Graph::with_params(model.params());
    let x = g.constant(planes.clone());
    let (m, _) = model.estimate_mask(&mut g, x, Mode::Eval)?;
    Ok(g.value(m).clone())
}

/// Largest change of mask frames `..=t` and of frame `t` alone when input
/// frame `t + d` is perturbed.
pub fn perturbation_response(model: &Dccrn<f64>, frames: usize, t: usize, d: usize, seed: u64) -> Result<(f64, f64)> {
    let f = model.stft().bins() - 1;
    let mut r = rng(seed);
    let planes = rand_arr(&[2, 1, frames, f], &mut r);
    let mut bumped = planes.clone();
    bumped.slice_mut(s![.., 0, t + d, ..]).mapv_inplace(|v| v + 1.0 + r.gen_range(0.0..1.0));
    let (a, b) = (masks(model, &planes)?, masks(model, &bumped)?);
    let past = max_abs_diff(a.slice(s![.., .., ..=t, ..]), b.slice(s![.., .., ..=t, ..]));
    let at_t = max_abs_diff(a.slice(s![.., .., t, ..]), b.slice(s![.., .., t, ..]));
    Ok((past, at_t))
}

/// Default-size E model with running statistics from a synthetic clip.
pub fn calibrated(variant: Variant, seed: u64) -> Result<Dccrn<f64>> {
    let mut m = Dccrn::<f64>::build(&ModelConfig::default_for(variant), seed)?;
    let mut r = rng(seed);
    let x: Vec<f64> = synth::speech(&mut r, 8000, 16_000, 0.1).iter().map(|&v| v as f64 + 0.01 * r.gen_range(-1.0..1.0)).collect();
    m.calibrate(&[&x])?;
    Ok(m)
}

fn lookahead_causality() -> Result<Check> {
    let m = calibrated(Variant::E, 30)?;
    let ahead = m.config().lookahead_frames;
    let mut worst: f64 = 0.0;
    for t in [0, 5, 11] {
        worst = worst.max(perturbation_response(&m, 20, t, ahead + 1, 31 + t as u64)?.0);
    }
    Ok(Check::new(
        "lookahead.causality",
        worst,
        Bound::AtMost(CAUSAL_TOL),
        format!("input frame t+{} moved output frames <= t", ahead + 1),
    ))
}

fn lookahead_latency() -> Result<Check> {
    let m = calibrated(Variant::E, 32)?;
    let c = m.config();
    let (_, reach) = perturbation_response(&m, 20, 6, c.lookahead_frames, 33)?;
    let ms = c.lookahead_ms();
    let exact = c.lookahead_frames == 6 && (ms - 37.5).abs() < 1e-12;
    Ok(Check::new(
        "lookahead.latency",
        if exact { reach } else { 0.0 },
        Bound::Exceeds(0.0),
        format!("{} frames = {ms} ms; input t+{} reaches output t", c.lookahead_frames, c.lookahead_frames),
    ))
}

fn stream_equivalence() -> Result<Check> {
    let mut r = rng(40);
    let mut worst: f64 = 0.0;
    for v in Variant::ALL {
        let m = calibrated(v, 41)?.cast::<f32>()?;
        let x: Vec<f32> = synth::speech(&mut r, 6000, 16_000, 0.1).iter().map(|&s| s + 0.02 * r.gen_range(-1.0f32..1.0)).collect();
        let off = m.enhance(&x)?.wave;
        let on = m.enhance_streaming(&x)?;
        let d = off.iter().zip(&on).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        worst = worst.max(if off.len() == on.len() { d } else { f64::INFINITY });
    }
    Ok(Check::new("stream.equivalence", worst, Bound::AtMost(STREAM_TOL), "frame-by-frame vs offline, R/C/E/CL"))
}

/// `[2, 1, T, F−1]` planes to an `[F−1 × T]` tensor.
fn planes_to_tensor(p: &ArrayD<f64>) -> Result<ComplexTensor<f64>> {
    let plane = |i: usize| p.slice(s![i, 0, .., ..]).t().to_owned().into_dyn();
    ComplexTensor::new(plane(0), plane(1))
}

/// Worst SI-SNR over `count` mixtures enhanced with their oracle CRM through
/// the variant-C mask path.
pub fn oracle_crm_worst(count: usize, seed: u64) -> Result<f64> {
    let m = Dccrn::<f64>::build(&ModelConfig::tiny(Variant::C), 0)?;
    let mut r = rng(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..count {
        let len = r.gen_range(4000..12000);
        let clean: Vec<f64> = synth::speech(&mut r, len, 16_000, 0.1).iter().map(|&v| v as f64).collect();
        let noise = synth::noise(&mut r, synth::NoiseKind::Babble, len, 16_000, 0.1);
        let gain = 10f64.powf(-r.gen_range(-5.0..20.0) / 20.0);
        let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(&s, &n)| s + gain * n as f64).collect();
        let s_spec = planes_to_tensor(&m.analyze(&[&clean])?.planes)?;
        let y_spec = planes_to_tensor(&m.analyze(&[&noisy])?.planes)?;
        let mask: ComplexMask<f64> = crm(&s_spec, &y_spec)?;
        let est = m.enhance_with_mask(&noisy, &mask)?;
        worst = worst.min(si_snr(&est, &clean)?);
    }
    Ok(worst)
}

fn oracle_crm() -> Result<Check> {
    let worst = oracle_crm_worst(20, 50)?;
    Ok(Check::new("oracle_crm.reconstruction", worst, Bound::AtLeast(CRM_MIN_DB), "worst SI-SNR (dB) of 20 mixtures"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_and_display() {
        let c = Check::new("x", 1e-6, Bound::AtMost(1e-4), "");
        assert!(c.passed());
        assert!(c.to_string().starts_with("PASS x"));
        assert!(!Check::new("y", 1e-6, Bound::Exceeds(1e-4), "").passed());
        assert!(Check::new("z", 50.0, Bound::AtLeast(40.0), "").passed());
        assert!(!Check::new("n", f64::NAN, Bound::AtMost(1.0), "").passed());
    }

    #[test]
    fn fast_checks_pass() {
        for f in [oracle_conv2d, oracle_conv_transpose2d, oracle_complex_lstm, oracle_complex_dense, grad_conv2d, grad_prelu] {
            let c = f().unwrap();
            assert!(c.passed(), "{c}");
        }
    }

    #[test]
    fn corrupted_conv_backward_is_caught() {
        let c = grad_negative_control().unwrap();
        assert!(c.passed(), "{c}");
    }
}
