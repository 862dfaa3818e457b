use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

/// One real LSTM layer's parameters, gates packed `(i, f, g, o)`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub const FORGET_BIAS: f64 = 1.0;

    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = scale / (hidden as f64).sqrt();
        let w_ih = store.add_uniform(format!("{name}.w_ih"), &[4 * hidden, input], bound, rng);
        let w_hh = store.add_uniform(format!("{name}.w_hh"), &[4 * hidden, hidden], bound, rng);
        let mut b = ArrayD::zeros(IxDyn(&[4 * hidden]));
        b.slice_mut(ndarray::s![hidden..2 * hidden]).fill(T::of(Self::FORGET_BIAS));
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    pub(crate) fn run<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        init: Option<&(Array2<T>, Array2<T>)>,
    ) -> Result<(Var, (Array2<T>, Array2<T>))> {
        let (wi, wh, b) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.bias));
        let y = g.lstm(x, wi, wh, b, init.map(|(h, c)| (h, c)))?;
        let state = g.lstm_state(y).expect("lstm node");
        Ok((y, state))
    }
}

/// Carried `(h, c)` for every sub-LSTM of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T: Scalar> {
    pub cells: Vec<(Array2<T>, Array2<T>)>,
}

fn check_input(shape: &[usize], width: usize, layer: &str) -> Result<()> {
    if shape.len() != 3 || shape[2] != width {
        return Err(Error::ChannelMismatch {
            layer: layer.to_string(),
            expected: width,
            got: shape.get(2).copied().unwrap_or(0),
            shape: shape.to_vec(),
        });
    }
    if shape[0] == 0 {
        return Err(Error::InvalidArgument(format!("{layer}: empty sequence")));
    }
    Ok(())
}

/// Stacked real LSTM over `[T, B, I]` sequences.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub name: String,
    pub layers: Vec<LstmCell>,
}

impl Lstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { hidden };
                LstmCell::new(store, &format!("{name}.{l}"), inp, hidden, 1.0, rng)
            })
            .collect();
        Self {
            name: name.to_string(),
            layers,
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        state: Option<&LstmState<T>>,
    ) -> Result<(Var, LstmState<T>)> {
        check_input(g.shape(x), self.layers[0].input, &self.name)?;
        let mut cells = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (l, cell) in self.layers.iter().enumerate() {
            let (y, s) = cell.run(g, h, state.map(|s| &s.cells[l]))?;
            cells.push(s);
            h = y;
        }
        Ok((h, LstmState { cells }))
    }
}

/// Complex LSTM: per layer a pair of real LSTMs `LSTM_r`, `LSTM_i` with
/// `F_out = (F_rr − F_ii) + j(F_ri + F_ir)`.
#[derive(Clone, Debug)]
pub struct ComplexLstm {
    pub name: String,
    pub layers: Vec<(LstmCell, LstmCell)>,
}

impl ComplexLstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { hidden };
                (
                    LstmCell::new(store, &format!("{name}.{l}.r"), inp, hidden, scale, rng),
                    LstmCell::new(store, &format!("{name}.{l}.i"), inp, hidden, scale, rng),
                )
            })
            .collect();
        Self {
            name: name.to_string(),
            layers,
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.0.hidden)
    }

    /// `x_r, x_i: [T, B, I]`. Both planes go through each sub-LSTM as one
    /// batch of `2B` sequences; the state holds `[2B, H]` pairs.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x_r: Var,
        x_i: Var,
        state: Option<&LstmState<T>>,
    ) -> Result<(Var, Var, LstmState<T>)> {
        check_input(g.shape(x_r), self.layers[0].0.input, &self.name)?;
        if g.shape(x_r) != g.shape(x_i) {
            return Err(Error::ShapeMismatch {
                lhs: g.shape(x_r).to_vec(),
                rhs: g.shape(x_i).to_vec(),
            });
        }
        let batch = g.shape(x_r)[1];
        let mut cells = Vec::with_capacity(2 * self.layers.len());
        let (mut hr, mut hi) = (x_r, x_i);
        for (l, (lr, li)) in self.layers.iter().enumerate() {
            let both = g.concat(&[hr, hi], 1)?;
            let (yr, sr) = lr.run(g, both, state.map(|s| &s.cells[2 * l]))?;
            let (yi, si) = li.run(g, both, state.map(|s| &s.cells[2 * l + 1]))?;
            cells.push(sr);
            cells.push(si);
            let f_rr = g.narrow(yr, 1, 0, batch)?;
            let f_ir = g.narrow(yr, 1, batch, batch)?;
            let f_ri = g.narrow(yi, 1, 0, batch)?;
            let f_ii = g.narrow(yi, 1, batch, batch)?;
            hr = g.sub(f_rr, f_ii)?;
            hi = g.add(f_ri, f_ir)?;
        }
        Ok((hr, hi, LstmState { cells }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, spread_picks};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    fn values(store: &ParamStore<f64>, f: impl FnOnce(&mut Graph<'_, f64>) -> Var) -> ArrayD<f64> {
        let mut g = Graph::with_params(store);
        let v = f(&mut g);
        g.value(v).clone()
    }

    #[test]
    fn forget_bias_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lstm = Lstm::new(&mut store, "l", 3, 2, 1, &mut rng);
        let b = store.value(lstm.layers[0].bias);
        assert_eq!(b.as_slice().unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_imaginary_input_with_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let cl = ComplexLstm::new(&mut store, "cl", 3, 4, 1, &mut rng);
        for (a, b) in &cl.layers {
            store.value_mut(a.bias).fill(0.0);
            store.value_mut(b.bias).fill(0.0);
        }
        let xr = seq(&[5, 2, 3], &mut rng);
        let xi = ArrayD::zeros(IxDyn(&[5, 2, 3]));
        let out = |plane: usize| {
            values(&store, |g| {
                let (r, i) = (g.constant(xr.clone()), g.constant(xi.clone()));
                let (yr, yi, _) = cl.forward(g, r, i, None).unwrap();
                [yr, yi][plane]
            })
        };
        let run_sub = |cell: &LstmCell| {
            values(&store, |g| {
                let x = g.constant(xr.clone());
                cell.run(g, x, None).unwrap().0
            })
        };
        // F_ir = F_ii = 0, so the output is F_rr + jF_ri.
        assert_eq!(out(0), run_sub(&cl.layers[0].0));
        assert_eq!(out(1), run_sub(&cl.layers[0].1));
    }

    #[test]
    fn combination_matches_separately_run_sub_lstms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let cl = ComplexLstm::new(&mut store, "cl", 3, 4, 1, &mut rng);
        let xr = seq(&[6, 2, 3], &mut rng);
        let xi = seq(&[6, 2, 3], &mut rng);
        let sub = |cell: &LstmCell, x: &ArrayD<f64>| {
            values(&store, |g| {
                let x = g.constant(x.clone());
                cell.run(g, x, None).unwrap().0
            })
        };
        let (lr, li) = &cl.layers[0];
        let want_r = &sub(lr, &xr) - &sub(li, &xi);
        let want_i = &sub(li, &xr) + &sub(lr, &xi);
        let mut g = Graph::with_params(&store);
        let (r, i) = (g.constant(xr.clone()), g.constant(xi.clone()));
        let (yr, yi, _) = cl.forward(&mut g, r, i, None).unwrap();
        let d = |a: &ArrayD<f64>, b: &ArrayD<f64>| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d(g.value(yr), &want_r) <= 1e-10);
        assert!(d(g.value(yi), &want_i) <= 1e-10);
    }

    #[test]
    fn chunked_with_carried_state_equals_full_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let cl = ComplexLstm::new(&mut store, "cl", 3, 4, 2, &mut rng);
        let xr = seq(&[7, 1, 3], &mut rng);
        let xi = seq(&[7, 1, 3], &mut rng);
        let mut g = Graph::with_params(&store);
        let (r, i) = (g.constant(xr.clone()), g.constant(xi.clone()));
        let (full_r, _, _) = cl.forward(&mut g, r, i, None).unwrap();
        let full = g.value(full_r).clone();
        let cut = |a: &ArrayD<f64>, r: std::ops::Range<usize>| a.slice_axis(ndarray::Axis(0), r.into()).to_owned();
        let (r1, i1) = (g.constant(cut(&xr, 0..3)), g.constant(cut(&xi, 0..3)));
        let (a, _, st) = cl.forward(&mut g, r1, i1, None).unwrap();
        let (r2, i2) = (g.constant(cut(&xr, 3..7)), g.constant(cut(&xi, 3..7)));
        let (b, _, _) = cl.forward(&mut g, r2, i2, Some(&st)).unwrap();
        let joined = ndarray::concatenate(ndarray::Axis(0), &[g.value(a).view(), g.value(b).view()]).unwrap();
        assert!(joined.iter().zip(&full).all(|(x, y)| (x - y).abs() <= 1e-6));
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let l = Lstm::new(&mut store, "l", 3, 2, 1, &mut rng);
        let mut g = Graph::with_params(&store);
        let x = g.constant(ArrayD::zeros(IxDyn(&[0, 1, 3])));
        assert!(l.forward(&mut g, x, None).is_err());
    }

    #[test]
    fn gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let cl = ComplexLstm::new(&mut store, "cl", 3, 2, 2, &mut rng);
        let l = Lstm::new(&mut store, "l", 2, 3, 2, &mut rng);
        let xr = seq(&[4, 2, 3], &mut rng);
        let xi = seq(&[4, 2, 3], &mut rng);
        let picks = spread_picks(&store, 3);
        let report = check_params(
            &mut store,
            &picks,
            1e-5,
            |g| {
                let (r, i) = (g.constant(xr.clone()), g.constant(xi.clone()));
                let (yr, yi, _) = cl.forward(g, r, i, None)?;
                let y = g.mul(yr, yi)?;
                let (z, _) = l.forward(g, y, None)?;
                let z = g.square(z);
                Ok(g.sum(z))
            },
            |_| {},
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report}");
    }
}
