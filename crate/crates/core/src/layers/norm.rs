use ndarray::{Array2, ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

/// Running statistics of one complex batch-norm layer, kept outside the
/// parameter store because they are not trained by gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T: Scalar> {
    /// `[2, C]`: mean of the real and imaginary planes.
    pub mean: Array2<T>,
    /// `[3, C]`: covariance entries `V_rr, V_ri, V_ii` (without epsilon).
    pub cov: Array2<T>,
    /// False until the first training-mode update.
    pub ready: bool,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        let mut cov = Array2::zeros((3, channels));
        cov.row_mut(0).fill(T::one());
        cov.row_mut(2).fill(T::one());
        Self {
            mean: Array2::zeros((2, channels)),
            cov,
            ready: false,
        }
    }

    /// Blends batch statistics in with the given momentum.
    pub fn update(&mut self, batch: &BatchNormStats<T>, momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        if self.ready {
            self.mean.zip_mut_with(&batch.mean, |a, &b| *a = keep * *a + m * b);
            self.cov.zip_mut_with(&batch.cov, |a, &b| *a = keep * *a + m * b);
        } else {
            // The first batch replaces the placeholder initialization.
            self.mean.assign(&batch.mean);
            self.cov.assign(&batch.cov);
        }
        self.ready = true;
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormStats<U> {
        BatchNormStats {
            mean: self.mean.mapv(|v| U::of(v.as_f64())),
            cov: self.cov.mapv(|v| U::of(v.as_f64())),
            ready: self.ready,
        }
    }
}

/// Which statistics normalize the batch.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T: Scalar> {
    /// Batch statistics; the new statistics are returned for the caller to
    /// fold into the running averages.
    Train,
    Eval(&'a BatchNormStats<T>),
}

/// Complex batch normalization by 2×2 whitening of each channel's
/// `(re, im)` distribution followed by a symmetric 2×2 affine map `Γ` and a
/// complex shift `β`.
#[derive(Clone, Debug)]
pub struct ComplexBatchNorm {
    pub name: String,
    /// `[3, C]`: `Γ_rr, Γ_ri, Γ_ii`.
    pub gamma: ParamId,
    /// `[2, C]`.
    pub beta: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl ComplexBatchNorm {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let mut gamma = ArrayD::zeros(IxDyn(&[3, channels]));
        let diag = T::of(std::f64::consts::FRAC_1_SQRT_2);
        gamma.index_axis_mut(Axis(0), 0).fill(diag);
        gamma.index_axis_mut(Axis(0), 2).fill(diag);
        Self {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), gamma),
            beta: store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[2, channels]))),
            channels,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    /// Eval-mode normalization as a per-channel 2×2 map and shift,
    /// `(m: [2, 2, C], bias: [2, C])`, for use outside the tape.
    pub fn eval_affine<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        stats: &BatchNormStats<T>,
    ) -> Result<(ArrayD<T>, ArrayD<T>)> {
        if !stats.ready {
            return Err(Error::NoRunningStats(self.name.clone()));
        }
        let mut g = Graph::with_params(store);
        let moments = self.eval_moments(&mut g, stats);
        let (m, bias) = self.fold(&mut g, moments)?;
        Ok((g.value(m).clone(), g.value(bias).clone()))
    }

    fn eval_moments<T: Scalar>(&self, g: &mut Graph<'_, T>, stats: &BatchNormStats<T>) -> [Var; 5] {
        let mut k = |a: ndarray::ArrayView1<T>, add: f64| g.constant(a.mapv(|v| v + T::of(add)).into_dyn());
        [
            k(stats.mean.row(0), 0.0),
            k(stats.mean.row(1), 0.0),
            k(stats.cov.row(0), self.eps),
            k(stats.cov.row(1), 0.0),
            k(stats.cov.row(2), self.eps),
        ]
    }

    /// `[μ_r, μ_i, V_rr, V_ri, V_ii]` (epsilon included) to `(M, bias)`.
    fn fold<T: Scalar>(&self, g: &mut Graph<'_, T>, moments: [Var; 5]) -> Result<(Var, Var)> {
        let c = self.channels;
        let [mu_r, mu_i, vrr, vri, vii] = moments;
        // Closed-form inverse square root of [[Vrr, Vri], [Vri, Vii]]:
        // W = ([[Vii, −Vri], [−Vri, Vrr]] + s·I) / (s·t), s = √det, t = √(tr + 2s).
        let det = {
            let a = g.mul(vrr, vii)?;
            let b = g.square(vri);
            g.sub(a, b)?
        };
        let s = g.sqrt(det);
        let t = {
            let tr = g.add(vrr, vii)?;
            let s2 = g.scale(s, 2.0);
            let sum = g.add(tr, s2)?;
            g.sqrt(sum)
        };
        let st = g.mul(s, t)?;
        let wrr = {
            let n = g.add(vii, s)?;
            g.div(n, st)?
        };
        let wii = {
            let n = g.add(vrr, s)?;
            g.div(n, st)?
        };
        let wri = {
            let q = g.div(vri, st)?;
            g.neg(q)
        };
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let row = |g: &mut Graph<'_, T>, v: Var, i: usize| -> Result<Var> {
            let n = g.narrow(v, 0, i, 1)?;
            g.reshape(n, &[c])
        };
        let (grr, gri, gii) = (row(g, gamma, 0)?, row(g, gamma, 1)?, row(g, gamma, 2)?);
        let (br, bi) = (row(g, beta, 0)?, row(g, beta, 1)?);
        // M = Γ·W, then y = M·x + (β − M·μ).
        let mut dot = |a: Var, b: Var, c2: Var, d: Var| -> Result<Var> {
            let p = g.mul(a, b)?;
            let q = g.mul(c2, d)?;
            g.add(p, q)
        };
        let m_rr = dot(grr, wrr, gri, wri)?;
        let m_ri = dot(grr, wri, gri, wii)?;
        let m_ir = dot(gri, wrr, gii, wri)?;
        let m_ii = dot(gri, wri, gii, wii)?;
        let off_r = dot(m_rr, mu_r, m_ri, mu_i)?;
        let off_i = dot(m_ir, mu_r, m_ii, mu_i)?;
        let bias_r = g.sub(br, off_r)?;
        let bias_i = g.sub(bi, off_i)?;
        let m = g.concat(&[m_rr, m_ri, m_ir, m_ii], 0)?;
        let m = g.reshape(m, &[2, 2, c])?;
        let bias = g.concat(&[bias_r, bias_i], 0)?;
        let bias = g.reshape(bias, &[2, c])?;
        Ok((m, bias))
    }

    /// Normalizes `x: [2, B, C, T, F]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        let sh = g.shape(x).to_vec();
        if sh.len() != 5 || sh[0] != 2 || sh[2] != self.channels {
            return Err(Error::ChannelMismatch {
                layer: self.name.clone(),
                expected: self.channels,
                got: sh.get(2).copied().unwrap_or(0),
                shape: sh,
            });
        }
        let c = self.channels;
        let axes = [1, 3, 4];
        // Per-channel statistics as [C] vectors: mean (μ_r, μ_i) and the
        // covariance entries with epsilon on the diagonal.
        let (mu_r, mu_i, vrr, vri, vii, stats) = match mode {
            BnMode::Train => {
                let mu = g.mean_axes(x, &axes)?;
                let xc = {
                    let neg = g.neg(mu);
                    g.add(x, neg)?
                };
                let xr = g.narrow(xc, 0, 0, 1)?;
                let xi = g.narrow(xc, 0, 1, 1)?;
                let moment = |g: &mut Graph<'_, T>, a: Var, b: Var| -> Result<Var> {
                    let p = g.mul(a, b)?;
                    let m = g.mean_axes(p, &axes)?;
                    g.reshape(m, &[c])
                };
                let vrr = moment(g, xr, xr)?;
                let vri = moment(g, xr, xi)?;
                let vii = moment(g, xi, xi)?;
                let mu = g.reshape(mu, &[2, c])?;
                let mu_r = g.narrow(mu, 0, 0, 1)?;
                let mu_i = g.narrow(mu, 0, 1, 1)?;
                let mu_r = g.reshape(mu_r, &[c])?;
                let mu_i = g.reshape(mu_i, &[c])?;
                let row = |g: &Graph<'_, T>, v: Var| ndarray::Array1::from_iter(g.value(v).iter().copied());
                let mut cov = Array2::zeros((3, c));
                cov.row_mut(0).assign(&row(g, vrr));
                cov.row_mut(1).assign(&row(g, vri));
                cov.row_mut(2).assign(&row(g, vii));
                let mean = Array2::from_shape_vec((2, c), g.value(mu).iter().copied().collect()).expect("[2, C]");
                let stats = BatchNormStats { mean, cov, ready: true };
                let vrr = g.offset(vrr, self.eps);
                let vii = g.offset(vii, self.eps);
                (mu_r, mu_i, vrr, vri, vii, Some(stats))
            }
            BnMode::Eval(stats) => {
                if !stats.ready {
                    return Err(Error::NoRunningStats(self.name.clone()));
                }
                let [mu_r, mu_i, vrr, vri, vii] = self.eval_moments(g, stats);
                (mu_r, mu_i, vrr, vri, vii, None)
            }
        };
        let (m, bias) = self.fold(g, [mu_r, mu_i, vrr, vri, vii])?;
        Ok((g.channel_affine(x, m, bias)?, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, spread_picks};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn run(
        store: &ParamStore<f64>,
        bn: &ComplexBatchNorm,
        x: &ArrayD<f64>,
        mode: BnMode<'_, f64>,
    ) -> Result<(ArrayD<f64>, Option<BatchNormStats<f64>>)> {
        let mut g = Graph::with_params(store);
        let xv = g.constant(x.clone());
        let (y, s) = bn.forward(&mut g, xv, mode)?;
        Ok((g.value(y).clone(), s))
    }

    #[test]
    fn constant_input_gives_beta() {
        let mut store = ParamStore::<f64>::new();
        let bn = ComplexBatchNorm::new(&mut store, "bn", 2);
        store.value_mut(bn.beta).assign(&ndarray::arr2(&[[0.5, -1.0], [2.0, 3.0]]).into_dyn());
        let x = ArrayD::from_elem(IxDyn(&[2, 3, 2, 4, 5]), 1.7);
        let (y, _) = run(&store, &bn, &x, BnMode::Train).unwrap();
        for ((p, _, c, _, _), &v) in y.clone().into_dimensionality::<ndarray::Ix5>().unwrap().indexed_iter() {
            let want = store.value(bn.beta)[[p, c]];
            assert!((v - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn whitened_identity_input_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let bn = ComplexBatchNorm::new(&mut store, "bn", 1);
        let mut gamma = ArrayD::zeros(IxDyn(&[3, 1]));
        gamma[[0, 0]] = 1.0;
        gamma[[2, 0]] = 1.0;
        store.set(bn.gamma, gamma).unwrap();
        // Exact zero mean and identity covariance via a ±/swap construction.
        let n = 500;
        let base: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let mut pts = Vec::new();
        for &(a, b) in &base {
            pts.extend([(a, b), (-a, -b), (b, -a), (-b, a)]);
        }
        let e: f64 = pts.iter().map(|p| p.0 * p.0).sum::<f64>() / pts.len() as f64;
        let k = 1.0 / e.sqrt();
        let mut x = ArrayD::zeros(IxDyn(&[2, 1, 1, 1, pts.len()]));
        for (i, p) in pts.iter().enumerate() {
            x[[0, 0, 0, 0, i]] = p.0 * k;
            x[[1, 0, 0, 0, i]] = p.1 * k;
        }
        let (y, _) = run(&store, &bn, &x, BnMode::Train).unwrap();
        let d = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-5, "{d}");
    }

    #[test]
    fn output_covariance_is_gamma_gamma_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let bn = ComplexBatchNorm::new(&mut store, "bn", 2);
        store.set(bn.gamma, ndarray::arr2(&[[1.3, 0.4], [0.2, -0.3], [0.6, 0.9]]).into_dyn()).unwrap();
        let n = 10_000;
        let mut x = ArrayD::zeros(IxDyn(&[2, 1, 2, 1, n]));
        for c in 0..2 {
            for i in 0..n {
                let (u, v): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                x[[0, 0, c, 0, i]] = 3.0 * u + 1.0;
                x[[1, 0, c, 0, i]] = 0.5 * u + 0.2 * v - 2.0;
            }
        }
        let (y, _) = run(&store, &bn, &x, BnMode::Train).unwrap();
        let gm = store.value(bn.gamma).clone();
        for c in 0..2 {
            let (yr, yi) = (y.slice(ndarray::s![0, 0, c, 0, ..]), y.slice(ndarray::s![1, 0, c, 0, ..]));
            let (mr, mi) = (yr.mean().unwrap(), yi.mean().unwrap());
            let cov = |a: &ndarray::ArrayView1<f64>, ma: f64, b: &ndarray::ArrayView1<f64>, mb: f64| {
                a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n as f64
            };
            let (rr, ri, ii) = (gm[[0, c]], gm[[1, c]], gm[[2, c]]);
            assert!((cov(&yr, mr, &yr, mr) - (rr * rr + ri * ri)).abs() <= 1e-3);
            assert!((cov(&yr, mr, &yi, mi) - (rr * ri + ri * ii)).abs() <= 1e-3);
            assert!((cov(&yi, mi, &yi, mi) - (ri * ri + ii * ii)).abs() <= 1e-3);
        }
    }

    #[test]
    fn eval_requires_running_stats_and_matches_train_on_same_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let bn = ComplexBatchNorm::new(&mut store, "enc.bn", 3);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[2, 2, 3, 4, 6]), || rng.gen_range(-1.0..1.0));
        let mut stats = BatchNormStats::new(3);
        let err = run(&store, &bn, &x, BnMode::Eval(&stats)).unwrap_err();
        assert!(matches!(err, Error::NoRunningStats(ref n) if n == "enc.bn"));
        let (yt, batch) = run(&store, &bn, &x, BnMode::Train).unwrap();
        stats.update(&batch.unwrap(), 0.1);
        let (ye, _) = run(&store, &bn, &x, BnMode::Eval(&stats)).unwrap();
        let d = yt.iter().zip(&ye).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-12, "{d}");
        // Running covariance stays positive definite.
        let det = stats.cov[[0, 0]] * stats.cov[[2, 0]] - stats.cov[[1, 0]].powi(2);
        assert!(det > 0.0);
    }

    #[test]
    fn gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let bn = ComplexBatchNorm::new(&mut store, "bn", 2);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[2, 2, 2, 3, 4]), || rng.gen_range(-1.0..1.0));
        let probe = ArrayD::from_shape_simple_fn(IxDyn(&[2, 2, 2, 3, 4]), || rng.gen_range(-1.0..1.0));
        let picks = spread_picks(&store, 4);
        let report = check_params(
            &mut store,
            &picks,
            1e-5,
            |g| {
                let xv = g.constant(x.clone());
                let (y, _) = bn.forward(g, xv, BnMode::Train)?;
                let p = g.constant(probe.clone());
                let y = g.mul(y, p)?;
                let y = g.tanh(y);
                Ok(g.sum(y))
            },
            |_| {},
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report}");
        let report = crate::tensor::gradcheck::check_inputs_in(Some(&store), &[x.clone()], 1e-5, |g, v| {
            let (y, _) = bn.forward(g, v[0], BnMode::Train)?;
            let p = g.constant(probe.clone());
            let y = g.mul(y, p)?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report}");
    }
}
