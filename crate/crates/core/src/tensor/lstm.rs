//! Fused LSTM forward pass and backpropagation through time.
//!
//! Gates are packed `(input, forget, cell, output)` along the `4H` axis.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use super::Scalar;

/// Activations saved by the forward pass for BPTT.
#[derive(Clone, Debug)]
pub(crate) struct LstmCache<T: Scalar> {
    /// Activated gates, `[T, B, 4H]`.
    gates: Array3<T>,
    /// Cell states `c_0 .. c_T`, `[T + 1, B, H]`.
    cells: Array3<T>,
    /// Hidden states `h_0 .. h_T`, `[T + 1, B, H]`.
    hidden: Array3<T>,
}

impl<T: Scalar> LstmCache<T> {
    pub(crate) fn output(&self) -> Array3<T> {
        self.hidden.slice(s![1.., .., ..]).to_owned()
    }

    pub(crate) fn final_state(&self) -> (Array2<T>, Array2<T>) {
        let t = self.hidden.shape()[0] - 1;
        (
            self.hidden.index_axis(Axis(0), t).to_owned(),
            self.cells.index_axis(Axis(0), t).to_owned(),
        )
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Runs the recurrence over `x: [T, B, I]` with `w_ih: [4H, I]`,
/// `w_hh: [4H, H]`, `bias: [4H]` from the initial state `(h0, c0)`.
pub(crate) fn forward<T: Scalar>(
    x: ArrayView3<T>,
    w_ih: ArrayView2<T>,
    w_hh: ArrayView2<T>,
    bias: ArrayView1<T>,
    h0: ArrayView2<T>,
    c0: ArrayView2<T>,
) -> LstmCache<T> {
    let (steps, batch, input) = x.dim();
    let h4 = w_ih.nrows();
    let h = h4 / 4;
    let xs = x.to_shape((steps * batch, input)).expect("reshape input");
    let mut gates = Array2::zeros((steps * batch, h4));
    gates.assign(&bias.broadcast((steps * batch, h4)).expect("bias width"));
    general_mat_mul(T::one(), &xs, &w_ih.t(), T::one(), &mut gates);
    let mut gates = gates.into_shape_with_order((steps, batch, h4)).expect("gate shape");

    let mut cells = Array3::zeros((steps + 1, batch, h));
    let mut hidden = Array3::zeros((steps + 1, batch, h));
    cells.index_axis_mut(Axis(0), 0).assign(&c0);
    hidden.index_axis_mut(Axis(0), 0).assign(&h0);
    for t in 0..steps {
        let mut pre = gates.index_axis_mut(Axis(0), t);
        general_mat_mul(T::one(), &hidden.index_axis(Axis(0), t), &w_hh.t(), T::one(), &mut pre);
        for b in 0..batch {
            let mut row = pre.row_mut(b);
            let row = row.as_slice_mut().expect("contiguous gates");
            for k in 0..h {
                let i = sigmoid(row[k]);
                let f = sigmoid(row[h + k]);
                let g = row[2 * h + k].tanh();
                let o = sigmoid(row[3 * h + k]);
                row[k] = i;
                row[h + k] = f;
                row[2 * h + k] = g;
                row[3 * h + k] = o;
                let c = f * cells[[t, b, k]] + i * g;
                cells[[t + 1, b, k]] = c;
                hidden[[t + 1, b, k]] = o * c.tanh();
            }
        }
    }
    LstmCache { gates, cells, hidden }
}

/// Gradients `(dx, dw_ih, dw_hh, dbias)` for an output gradient
/// `dy: [T, B, H]`. The final state carries no gradient.
pub(crate) fn backward<T: Scalar>(
    x: ArrayView3<T>,
    w_ih: ArrayView2<T>,
    w_hh: ArrayView2<T>,
    cache: &LstmCache<T>,
    dy: ArrayView3<T>,
) -> (Array3<T>, Array2<T>, Array2<T>, ndarray::Array1<T>) {
    let (steps, batch, input) = x.dim();
    let h4 = w_ih.nrows();
    let h = h4 / 4;
    let mut dgates = Array3::<T>::zeros((steps, batch, h4));
    let mut dh_next = Array2::<T>::zeros((batch, h));
    let mut dc_next = Array2::<T>::zeros((batch, h));
    let mut dw_hh = Array2::<T>::zeros((h4, h));
    for t in (0..steps).rev() {
        let gt = cache.gates.index_axis(Axis(0), t);
        let mut dg = dgates.index_axis_mut(Axis(0), t);
        for b in 0..batch {
            for k in 0..h {
                let (i, f, g, o) = (gt[[b, k]], gt[[b, h + k]], gt[[b, 2 * h + k]], gt[[b, 3 * h + k]]);
                let c = cache.cells[[t + 1, b, k]];
                let c_prev = cache.cells[[t, b, k]];
                let tc = c.tanh();
                let dh = dy[[t, b, k]] + dh_next[[b, k]];
                let dc = dh * o * (T::one() - tc * tc) + dc_next[[b, k]];
                dg[[b, k]] = dc * g * i * (T::one() - i);
                dg[[b, h + k]] = dc * c_prev * f * (T::one() - f);
                dg[[b, 2 * h + k]] = dc * i * (T::one() - g * g);
                dg[[b, 3 * h + k]] = dh * tc * o * (T::one() - o);
                dc_next[[b, k]] = dc * f;
            }
        }
        general_mat_mul(T::one(), &dg, &w_hh, T::zero(), &mut dh_next);
        general_mat_mul(T::one(), &dg.t(), &cache.hidden.index_axis(Axis(0), t), T::one(), &mut dw_hh);
    }
    let dflat = dgates.into_shape_with_order((steps * batch, h4)).expect("gate shape");
    let xs = x.to_shape((steps * batch, input)).expect("reshape input");
    let dx = dflat.dot(&w_ih).into_shape_with_order((steps, batch, input)).expect("dx shape");
    let dw_ih = dflat.t().dot(&xs);
    let db = dflat.sum_axis(Axis(0));
    (dx, dw_ih, dw_hh, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand<D: ndarray::Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(sh: Sh, rng: &mut ChaCha8Rng) -> Array<f64, D> {
        Array::from_shape_simple_fn(sh, || rng.gen_range(-0.8..0.8))
    }

    /// Plain per-step reference written from the gate equations.
    fn reference(x: &Array3<f64>, wih: &Array2<f64>, whh: &Array2<f64>, b: &Array1<f64>) -> Array3<f64> {
        let (steps, batch, _) = x.dim();
        let h = whh.ncols();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut out = Array3::zeros((steps, batch, h));
        for bi in 0..batch {
            let mut hs = vec![0.0; h];
            let mut cs = vec![0.0; h];
            for t in 0..steps {
                let mut z = b.to_vec();
                for (r, zr) in z.iter_mut().enumerate() {
                    for j in 0..x.dim().2 {
                        *zr += wih[[r, j]] * x[[t, bi, j]];
                    }
                    for j in 0..h {
                        *zr += whh[[r, j]] * hs[j];
                    }
                }
                for k in 0..h {
                    let c = sig(z[h + k]) * cs[k] + sig(z[k]) * z[2 * h + k].tanh();
                    cs[k] = c;
                    hs[k] = sig(z[3 * h + k]) * c.tanh();
                    out[[t, bi, k]] = hs[k];
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Array3<f64> = rand((5, 2, 3), &mut rng);
        let wih: Array2<f64> = rand((16, 3), &mut rng);
        let whh: Array2<f64> = rand((16, 4), &mut rng);
        let b: Array1<f64> = rand(16, &mut rng);
        let z = Array2::zeros((2, 4));
        let cache = forward(x.view(), wih.view(), whh.view(), b.view(), z.view(), z.view());
        let r = reference(&x, &wih, &whh, &b);
        let d = (&cache.output() - &r).mapv(f64::abs).fold(0.0f64, |a, &v| a.max(v));
        assert!(d <= 1e-12);
    }

    #[test]
    fn chunked_equals_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Array3<f64> = rand((8, 1, 3), &mut rng);
        let wih: Array2<f64> = rand((8, 3), &mut rng);
        let whh: Array2<f64> = rand((8, 2), &mut rng);
        let b: Array1<f64> = rand(8, &mut rng);
        let z = Array2::zeros((1, 2));
        let full = forward(x.view(), wih.view(), whh.view(), b.view(), z.view(), z.view()).output();
        let a = forward(x.slice(s![..3, .., ..]), wih.view(), whh.view(), b.view(), z.view(), z.view());
        let (h, c) = a.final_state();
        let rest = forward(x.slice(s![3.., .., ..]), wih.view(), whh.view(), b.view(), h.view(), c.view());
        let joined = ndarray::concatenate(Axis(0), &[a.output().view(), rest.output().view()]).unwrap();
        assert!((&joined - &full).iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Array3<f64> = rand((4, 2, 3), &mut rng);
        let wih: Array2<f64> = rand((8, 3), &mut rng);
        let whh: Array2<f64> = rand((8, 2), &mut rng);
        let b: Array1<f64> = rand(8, &mut rng);
        let probe: Array3<f64> = rand((4, 2, 2), &mut rng);
        let z = Array2::zeros((2, 2));
        let loss = |x: &Array3<f64>, wih: &Array2<f64>, whh: &Array2<f64>, b: &Array1<f64>| {
            let y = forward(x.view(), wih.view(), whh.view(), b.view(), z.view(), z.view()).output();
            (&y * &probe).sum()
        };
        let cache = forward(x.view(), wih.view(), whh.view(), b.view(), z.view(), z.view());
        let (dx, dwih, dwhh, db) = backward(x.view(), wih.view(), whh.view(), &cache, probe.view());
        let h = 1e-6;
        macro_rules! check {
            ($arr:ident, $grad:ident, $call:expr) => {
                for i in 0..$arr.len() {
                    let mut p = $arr.clone();
                    p.as_slice_mut().unwrap()[i] += h;
                    let up = { let $arr = &p; $call };
                    p.as_slice_mut().unwrap()[i] -= 2.0 * h;
                    let dn = { let $arr = &p; $call };
                    let fd = (up - dn) / (2.0 * h);
                    assert!((fd - $grad.as_slice().unwrap()[i]).abs() <= 1e-8, "{} {i}", stringify!($arr));
                }
            };
        }
        check!(x, dx, loss(x, &wih, &whh, &b));
        check!(wih, dwih, loss(&x, wih, &whh, &b));
        check!(whh, dwhh, loss(&x, &wih, whh, &b));
        check!(b, db, loss(&x, &wih, &whh, b));
    }
}
