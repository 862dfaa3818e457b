//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. Parameters are read in place from a borrowed [`ParamStore`]
//! rather than copied onto the tape. [`Graph::backward`] walks the nodes in
//! reverse creation order (a valid reverse topological order) and visits
//! each node once.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn, Slice, Zip};

use super::conv::{self, ConvGeometry};
use super::lstm::{self, LstmCache};
use super::params::{ParamId, ParamStore};
use super::shape::{contiguous, sum_to_shape, zip_broadcast};
use super::Scalar;
use crate::error::{Error, Result};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(Slot);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Slot {
    Param(usize),
    Node(usize),
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Offset(Var),
    Square(Var),
    Sqrt(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Cos(Var),
    Sin(Var),
    Atan2(Var, Var),
    Prelu { x: Var, slope: Var, axis: usize },
    MatMul { a: Var, b: Var, trans_b: bool },
    Sum(Var),
    SumAxes(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    CMul(Var, Var),
    Affine2 { x: Var, m: Var, bias: Var },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    ConvT { y: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Lstm { x: Var, w_ih: Var, w_hh: Var, bias: Var, cache: Box<LstmCache<T>> },
    OverlapAdd { a: Var, hop: usize },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape for one forward/backward pass.
pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    params: Vec<ArrayD<T>>,
    leaves: HashMap<usize, ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter; all zeros when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0]
    }

    /// Gradient of a tracked leaf created with [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<T>> {
        match v.0 {
            Slot::Param(i) => self.params.get(i),
            Slot::Node(i) => self.leaves.get(&i),
        }
    }

    pub fn into_params(self) -> Vec<ArrayD<T>> {
        self.params
    }
}

fn mismatch(a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> Result<ArrayView2<'_, T>> {
    a.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::InvalidArgument(format!("expected a 2-D array, got {:?}", a.shape())))
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(store),
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> Option<&'p ParamStore<T>> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Var {
        let store = self.params.expect("graph has no parameter store");
        assert!(id.0 < store.len(), "parameter id out of range");
        Var(Slot::Param(id.0))
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        match v.0 {
            Slot::Param(i) => &self.params.expect("graph has no parameter store").value(ParamId(i)),
            Slot::Node(i) => &self.nodes[i].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        match v.0 {
            Slot::Param(_) => true,
            Slot::Node(i) => self.nodes[i].needs_grad,
        }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: contiguous(value),
            op,
            needs_grad,
        });
        Var(Slot::Node(self.nodes.len() - 1))
    }

    fn push_op(&mut self, value: ArrayD<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, op, needs)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let v = zip_broadcast(self.value(a), self.value(b), f)?;
        Ok(self.push_op(v, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `atan2(y, x)` elementwise.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary(y, x, |a, b| a.atan2(b), Op::Atan2(y, x))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a).mapv(f);
        self.push_op(v, op, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), Op::Cos(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), Op::Sin(a))
    }

    /// Parametric ReLU with one slope per index of `axis`.
    pub fn prelu(&mut self, x: Var, slope: Var, axis: usize) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(slope));
        if sv.ndim() != 1 || axis >= xv.ndim() || xv.shape()[axis] != sv.len() {
            return Err(mismatch(xv.shape(), sv.shape()));
        }
        let mut out = xv.clone();
        for (c, mut lane) in out.axis_iter_mut(Axis(axis)).enumerate() {
            let a = sv[c];
            lane.mapv_inplace(|v| if v > T::zero() { v } else { a * v });
        }
        Ok(self.push_op(out, Op::Prelu { x, slope, axis }, &[x, slope]))
    }

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for 2-D operands.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let av = as2(self.value(a))?;
        let bv = as2(self.value(b))?;
        let bv = if trans_b { bv.reversed_axes() } else { bv };
        if av.ncols() != bv.nrows() {
            return Err(mismatch(self.shape(a), self.shape(b)));
        }
        let out = av.dot(&bv).into_dyn();
        Ok(self.push_op(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Sum of all elements, as a 0-d array.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_op(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let mut v = self.value(a).clone();
        for &ax in axes {
            if ax >= v.ndim() {
                return Err(Error::InvalidArgument(format!("axis {ax} out of range for {:?}", v.shape())));
            }
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        Ok(self.push_op(v, Op::SumAxes(a), &[a]))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let n: usize = axes.iter().map(|&ax| self.shape(a).get(ax).copied().unwrap_or(1)).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.len() != shape.iter().product::<usize>() {
            return Err(mismatch(v.shape(), shape));
        }
        let out = v.to_shape(IxDyn(shape)).expect("standard layout").into_owned();
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut seen = vec![false; v.ndim()];
        if perm.len() != v.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("bad permutation {perm:?} for {:?}", v.shape())));
        }
        let out = v.view().permuted_axes(IxDyn(perm)).as_standard_layout().into_owned();
        Ok(self.push_op(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(axis), &views).map_err(|_| {
            Error::InvalidArgument(format!(
                "cannot concatenate {:?} along axis {axis}",
                views.iter().map(|v| v.shape().to_vec()).collect::<Vec<_>>()
            ))
        })?;
        Ok(self.push_op(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Slice `start .. start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.ndim() || start + len > v.shape()[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow {start}..{} on axis {axis} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let out = v.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        Ok(self.push_op(out, Op::Narrow { a, axis, start }, &[a]))
    }

    /// Complex product of plane-stacked tensors (leading axis of 2),
    /// broadcasting over the remaining axes.
    pub fn cmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() == 0 || bv.ndim() == 0 || av.shape()[0] != 2 || bv.shape()[0] != 2 {
            return Err(mismatch(av.shape(), bv.shape()));
        }
        let (ar, ai) = (av.index_axis(Axis(0), 0).to_owned(), av.index_axis(Axis(0), 1).to_owned());
        let (br, bi) = (bv.index_axis(Axis(0), 0).to_owned(), bv.index_axis(Axis(0), 1).to_owned());
        let re = &zip_broadcast(&ar, &br, |x, y| x * y)? - &zip_broadcast(&ai, &bi, |x, y| x * y)?;
        let im = &zip_broadcast(&ar, &bi, |x, y| x * y)? + &zip_broadcast(&ai, &br, |x, y| x * y)?;
        let out = concatenate(Axis(0), &[re.view().insert_axis(Axis(0)), im.view().insert_axis(Axis(0))])
            .expect("planes share a shape");
        Ok(self.push_op(out, Op::CMul(a, b), &[a, b]))
    }

    /// Per-channel 2×2 map on the planes of `x: [2, B, C, T, F]`:
    /// `y[o] = Σ_i m[o, i, c]·x[i] + bias[o, c]` with `m: [2, 2, C]` and
    /// `bias: [2, C]`.
    pub fn channel_affine(&mut self, x: Var, m: Var, bias: Var) -> Result<Var> {
        let (xv, mv, bv) = (self.value(x), self.value(m), self.value(bias));
        let c = xv.shape().get(2).copied().unwrap_or(0);
        if xv.ndim() != 5 || xv.shape()[0] != 2 || mv.shape() != [2, 2, c] || bv.shape() != [2, c] {
            return Err(Error::InvalidArgument(format!(
                "channel_affine: x {:?}, m {:?}, bias {:?}",
                xv.shape(),
                mv.shape(),
                bv.shape()
            )));
        }
        let mut out = ArrayD::zeros(xv.raw_dim());
        for o in 0..2 {
            let mut yo = out.index_axis_mut(Axis(0), o);
            for ch in 0..c {
                let (a, b, k) = (mv[[o, 0, ch]], mv[[o, 1, ch]], bv[[o, ch]]);
                let mut y = yo.index_axis_mut(Axis(1), ch).into_dimensionality::<Ix3>().expect("[B, T, F]");
                let xr = xv.slice(s![0, .., ch, .., ..]);
                let xi = xv.slice(s![1, .., ch, .., ..]);
                Zip::from(&mut y).and(&xr).and(&xi).for_each(|y, &r, &i| *y = a * r + b * i + k);
            }
        }
        Ok(self.push_op(out, Op::Affine2 { x, m, bias }, &[x, m, bias]))
    }

    /// Complex (2 planes) or real (1 plane) convolution; see
    /// [`conv::conv2d`].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(out, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution; see [`conv::conv_transpose2d`].
    pub fn conv_transpose2d(
        &mut self,
        y: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        out_f: usize,
    ) -> Result<Var> {
        let out = conv::conv_transpose2d(self.value(y), self.value(w), b.map(|b| self.value(b)), &geom, out_f)?;
        let mut inputs = vec![y, w];
        inputs.extend(b);
        Ok(self.push_op(out, Op::ConvT { y, w, b, geom }, &inputs))
    }

    /// LSTM over `x: [T, B, I]`, returning all hidden states `[T, B, H]`.
    /// The initial state is a constant (zeros when `None`).
    pub fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        init: Option<(&Array2<T>, &Array2<T>)>,
    ) -> Result<Var> {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().map_err(|_| {
            Error::InvalidArgument(format!("lstm input must be [T, B, I], got {:?}", self.shape(x)))
        })?;
        if xv.shape()[0] == 0 {
            return Err(Error::InvalidArgument("lstm: empty sequence".into()));
        }
        let wi = as2(self.value(w_ih))?;
        let wh = as2(self.value(w_hh))?;
        let bv = self.value(bias).view().into_dimensionality::<ndarray::Ix1>().map_err(|_| {
            Error::InvalidArgument(format!("lstm bias must be 1-D, got {:?}", self.shape(bias)))
        })?;
        let (batch, input) = (xv.shape()[1], xv.shape()[2]);
        let h = wh.ncols();
        if wi.ncols() != input || wi.nrows() != 4 * h || wh.nrows() != 4 * h || bv.len() != 4 * h {
            return Err(Error::InvalidArgument(format!(
                "lstm weights {:?}/{:?}/{:?} do not fit input width {input}",
                wi.shape(),
                wh.shape(),
                bv.shape()
            )));
        }
        let zeros = Array2::zeros((batch, h));
        let (h0, c0) = init.unwrap_or((&zeros, &zeros));
        if h0.dim() != (batch, h) || c0.dim() != (batch, h) {
            return Err(mismatch(h0.shape(), &[batch, h]));
        }
        let cache = lstm::forward(xv, wi, wh, bv, h0.view(), c0.view());
        let out = cache.output().into_dyn();
        let op = Op::Lstm {
            x,
            w_ih,
            w_hh,
            bias,
            cache: Box::new(cache),
        };
        Ok(self.push_op(out, op, &[x, w_ih, w_hh, bias]))
    }

    /// Final `(h, c)` of an [`lstm`](Self::lstm) node.
    pub fn lstm_state(&self, v: Var) -> Option<(Array2<T>, Array2<T>)> {
        match v.0 {
            Slot::Node(i) => match &self.nodes[i].op {
                Op::Lstm { cache, .. } => Some(cache.final_state()),
                _ => None,
            },
            Slot::Param(_) => None,
        }
    }

    /// Overlap-add of frames `a: [B, T, W]` at `hop` into `[B, (T−1)·hop + W]`.
    pub fn overlap_add(&mut self, a: Var, hop: usize) -> Result<Var> {
        let v = self.value(a).view().into_dimensionality::<Ix3>().map_err(|_| {
            Error::InvalidArgument(format!("overlap_add needs [B, T, W], got {:?}", self.shape(a)))
        })?;
        let (b, t, w) = v.dim();
        if hop == 0 || t == 0 {
            return Err(Error::InvalidArgument("overlap_add: empty frames or zero hop".into()));
        }
        let len = (t - 1) * hop + w;
        let mut out = Array2::<T>::zeros((b, len));
        for bi in 0..b {
            for ti in 0..t {
                let mut dst = out.slice_mut(s![bi, ti * hop..ti * hop + w]);
                dst += &v.slice(s![bi, ti, ..]);
            }
        }
        Ok(self.push_op(out.into_dyn(), Op::OverlapAdd { a, hop }, &[a]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.shape().iter().any(|&d| d != 1) {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut params: Vec<Option<ArrayD<T>>> = vec![None; self.params.map_or(0, |p| p.len())];
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves = HashMap::new();
        let seed = ArrayD::from_elem(lv.raw_dim(), T::one());
        let end = match loss.0 {
            Slot::Param(i) => {
                params[i] = Some(seed);
                0
            }
            Slot::Node(i) => {
                grads[i] = Some(seed);
                i + 1
            }
        };
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(i, g);
                continue;
            }
            for (v, dv) in self.node_backward(node, g)? {
                if !self.needs(v) {
                    continue;
                }
                let slot = match v.0 {
                    Slot::Param(p) => &mut params[p],
                    Slot::Node(n) => &mut grads[n],
                };
                match slot {
                    Some(acc) => *acc += &dv,
                    None => *slot = Some(dv),
                }
            }
        }
        let params = params
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| ArrayD::zeros(self.params.expect("store").value(ParamId(i)).raw_dim())))
            .collect();
        Ok(Gradients { params, leaves })
    }

    fn node_backward(&self, node: &Node<T>, g: ArrayD<T>) -> Result<Vec<(Var, ArrayD<T>)>> {
        let val = |v: Var| self.value(v);
        let y = &node.value;
        let red = |v: Var, d: ArrayD<T>| (v, sum_to_shape(d, self.shape(v)));
        let one = T::one();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Add(a, b) => vec![red(a, g.clone()), red(b, g)],
            &Op::Sub(a, b) => vec![red(a, g.clone()), red(b, g.mapv(|v| -v))],
            &Op::Mul(a, b) => vec![
                red(a, zip_broadcast(&g, val(b), |x, y| x * y)?),
                red(b, zip_broadcast(&g, val(a), |x, y| x * y)?),
            ],
            &Op::Div(a, b) => {
                let ga = zip_broadcast(&g, val(b), |x, y| x / y)?;
                let gb = zip_broadcast(&ga, y, |x, q| -x * q)?;
                vec![red(a, ga), red(b, gb)]
            }
            &Op::Neg(a) => vec![(a, g.mapv(|v| -v))],
            &Op::Scale(a, s) => vec![(a, g.mapv(|v| v * s))],
            &Op::Offset(a) => vec![(a, g)],
            &Op::Square(a) => vec![(a, Zip::from(&g).and(val(a)).map_collect(|&d, &x| d * (x + x)))],
            &Op::Sqrt(a) => vec![(
                a,
                Zip::from(&g).and(y).map_collect(|&d, &r| {
                    if r > T::zero() {
                        d / (r + r)
                    } else {
                        T::zero()
                    }
                }),
            )],
            &Op::Log(a) => vec![(a, Zip::from(&g).and(val(a)).map_collect(|&d, &x| d / x))],
            &Op::Tanh(a) => vec![(a, Zip::from(&g).and(y).map_collect(|&d, &t| d * (one - t * t)))],
            &Op::Sigmoid(a) => vec![(a, Zip::from(&g).and(y).map_collect(|&d, &s| d * s * (one - s)))],
            &Op::Cos(a) => vec![(a, Zip::from(&g).and(val(a)).map_collect(|&d, &x| -d * x.sin()))],
            &Op::Sin(a) => vec![(a, Zip::from(&g).and(val(a)).map_collect(|&d, &x| d * x.cos()))],
            &Op::Atan2(yv, xv) => {
                let r2 = zip_broadcast(val(yv), val(xv), |a, b| a * a + b * b)?;
                let safe = |r: T| if r > T::zero() { r } else { T::infinity() };
                let xs = zip_broadcast(val(xv), &r2, |x, r| x / safe(r))?;
                let ys = zip_broadcast(val(yv), &r2, |y, r| -y / safe(r))?;
                vec![
                    red(yv, zip_broadcast(&g, &xs, |d, q| d * q)?),
                    red(xv, zip_broadcast(&g, &ys, |d, q| d * q)?),
                ]
            }
            &Op::Prelu { x, slope, axis } => {
                let (xv, sv) = (val(x), val(slope));
                let mut gx = g.clone();
                let mut gs = ArrayD::zeros(sv.raw_dim());
                for (c, (mut gl, xl)) in gx.axis_iter_mut(Axis(axis)).zip(xv.axis_iter(Axis(axis))).enumerate() {
                    let a = sv[c];
                    let mut acc = T::zero();
                    Zip::from(&mut gl).and(&xl).for_each(|d, &xi| {
                        if xi <= T::zero() {
                            acc += *d * xi;
                            *d = *d * a;
                        }
                    });
                    gs[c] = acc;
                }
                vec![(x, gx), (slope, gs)]
            }
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (as2(val(a))?, as2(val(b))?);
                let g2 = as2(&g)?;
                if trans_b {
                    vec![(a, g2.dot(&bv).into_dyn()), (b, g2.t().dot(&av).into_dyn())]
                } else {
                    vec![(a, g2.dot(&bv.t()).into_dyn()), (b, av.t().dot(&g2).into_dyn())]
                }
            }
            &Op::Sum(a) | &Op::SumAxes(a) => {
                let sh = self.shape(a);
                let d = if g.ndim() == 0 {
                    ArrayD::from_elem(IxDyn(sh), g[[]])
                } else {
                    g.broadcast(IxDyn(sh)).expect("kept dims broadcast").to_owned()
                };
                vec![(a, d)]
            }
            &Op::Reshape(a) => vec![(a, g.to_shape(IxDyn(self.shape(a))).expect("contiguous").into_owned())],
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*a, g.permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned())]
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.shape(p)[*axis];
                        let d = g.slice_axis(Axis(*axis), Slice::from(start..start + n)).to_owned();
                        start += n;
                        (p, d)
                    })
                    .collect()
            }
            &Op::Narrow { a, axis, start } => {
                let mut d = ArrayD::zeros(IxDyn(self.shape(a)));
                let n = g.shape()[axis];
                d.slice_axis_mut(Axis(axis), Slice::from(start..start + n)).assign(&g);
                vec![(a, d)]
            }
            &Op::CMul(a, b) => {
                let plane = |x: &ArrayD<T>, p: usize| x.index_axis(Axis(0), p).to_owned();
                let (gr, gi) = (plane(&g, 0), plane(&g, 1));
                // d/da = g · conj(b), and symmetrically for b.
                let conj_prod = |o: &ArrayD<T>| -> Result<ArrayD<T>> {
                    let (or, oi) = (plane(o, 0), plane(o, 1));
                    let re = &zip_broadcast(&gr, &or, |x, y| x * y)? + &zip_broadcast(&gi, &oi, |x, y| x * y)?;
                    let im = &zip_broadcast(&gi, &or, |x, y| x * y)? - &zip_broadcast(&gr, &oi, |x, y| x * y)?;
                    Ok(concatenate(Axis(0), &[re.view().insert_axis(Axis(0)), im.view().insert_axis(Axis(0))])
                        .expect("planes share a shape"))
                };
                vec![red(a, conj_prod(val(b))?), red(b, conj_prod(val(a))?)]
            }
            &Op::Affine2 { x, m, bias } => {
                let (xv, mv) = (val(x), val(m));
                let c = mv.shape()[2];
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let mut dm = ArrayD::zeros(mv.raw_dim());
                let mut db = ArrayD::zeros(IxDyn(&[2, c]));
                for ch in 0..c {
                    let gr = g.slice(s![0, .., ch, .., ..]);
                    let gi = g.slice(s![1, .., ch, .., ..]);
                    let xr = xv.slice(s![0, .., ch, .., ..]);
                    let xi = xv.slice(s![1, .., ch, .., ..]);
                    let (m00, m01, m10, m11) = (mv[[0, 0, ch]], mv[[0, 1, ch]], mv[[1, 0, ch]], mv[[1, 1, ch]]);
                    let (mut s00, mut s01, mut s10, mut s11, mut b0, mut b1) =
                        (T::zero(), T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
                    Zip::from(&gr).and(&gi).and(&xr).and(&xi).for_each(|&a, &b, &r, &i| {
                        s00 += a * r;
                        s01 += a * i;
                        s10 += b * r;
                        s11 += b * i;
                        b0 += a;
                        b1 += b;
                    });
                    dm[[0, 0, ch]] = s00;
                    dm[[0, 1, ch]] = s01;
                    dm[[1, 0, ch]] = s10;
                    dm[[1, 1, ch]] = s11;
                    db[[0, ch]] = b0;
                    db[[1, ch]] = b1;
                    let mut dxr = dx.slice_mut(s![0, .., ch, .., ..]);
                    Zip::from(&mut dxr).and(&gr).and(&gi).for_each(|d, &a, &b| *d = m00 * a + m10 * b);
                    let mut dxi = dx.slice_mut(s![1, .., ch, .., ..]);
                    Zip::from(&mut dxi).and(&gr).and(&gi).for_each(|d, &a, &b| *d = m01 * a + m11 * b);
                }
                vec![(x, dx), (m, dm), (bias, db)]
            }
            &Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv2d_backward(val(x), val(w), &g, &geom)?;
                let mut out = vec![(x, dx), (w, dw)];
                if let Some(b) = b {
                    out.push((b, db));
                }
                out
            }
            &Op::ConvT { y: yin, w, b, geom } => {
                let (dy, dw, db) = conv::conv_transpose2d_backward(val(yin), val(w), &g, &geom)?;
                let mut out = vec![(yin, dy), (w, dw)];
                if let Some(b) = b {
                    out.push((b, db));
                }
                out
            }
            Op::Lstm { x, w_ih, w_hh, bias, cache } => {
                let xv = val(*x).view().into_dimensionality::<Ix3>().expect("checked at forward");
                let gy = g.view().into_dimensionality::<Ix3>().expect("output shape");
                let (dx, dwi, dwh, db) = lstm::backward(xv, as2(val(*w_ih))?, as2(val(*w_hh))?, cache, gy);
                vec![
                    (*x, dx.into_dyn()),
                    (*w_ih, dwi.into_dyn()),
                    (*w_hh, dwh.into_dyn()),
                    (*bias, db.into_dyn()),
                ]
            }
            &Op::OverlapAdd { a, hop } => {
                let sh = self.shape(a);
                let (b, t, w) = (sh[0], sh[1], sh[2]);
                let g2 = g.view().into_dimensionality::<Ix2>().expect("output shape");
                let mut d = ndarray::Array3::<T>::zeros((b, t, w));
                for bi in 0..b {
                    for ti in 0..t {
                        d.slice_mut(s![bi, ti, ..]).assign(&g2.slice(s![bi, ti * hop..ti * hop + w]));
                    }
                }
                vec![(a, d.into_dyn())]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_inputs;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr2(&[[1.0, -2.0], [3.0, 4.0]]).into_dyn());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn squared_magnitude_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let planes = rand_arr(&[2, 3, 4], &mut rng);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(planes.clone());
        let sq = g.square(x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &planes.mapv(|v| 2.0 * v));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr1(&[1.0, 2.0]).into_dyn());
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_parameters_get_zero_gradients() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", arr1(&[1.0, 2.0]).into_dyn());
        let b = store.add("b", arr1(&[5.0]).into_dyn());
        let mut g = Graph::with_params(&store);
        let av = g.param(a);
        let s = g.sum(av);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(a), &arr1(&[1.0, 1.0]).into_dyn());
        assert_eq!(grads.param(b), &arr1(&[0.0]).into_dyn());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr1(&[3.0]).into_dyn());
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap()[[0]], 7.0);
    }

    #[test]
    fn elementwise_ops_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_arr(&[3, 4], &mut rng);
        let b = rand_arr(&[4], &mut rng).mapv(|v| v + 2.0);
        let report = check_inputs(&[a, b], 1e-5, |g, v| {
            let (a, b) = (v[0], v[1]);
            let t = g.add(a, b)?;
            let t = g.mul(t, a)?;
            let u = g.div(t, b)?;
            let u = g.sub(u, a)?;
            let th = g.tanh(u);
            let sg = g.sigmoid(a);
            let c = g.cos(a);
            let s = g.sin(b);
            let sq = g.square(b);
            let sq = g.offset(sq, 1.0);
            let rt = g.sqrt(sq);
            let lg = g.log(rt);
            let at = g.atan2(a, b)?;
            let n = g.neg(at);
            let terms = [th, sg, c, s, lg, n];
            let mut acc = g.scale(terms[0], 0.5);
            for &t in &terms[1..] {
                let m = g.mul(t, acc)?;
                acc = g.add(acc, m)?;
            }
            Ok(g.sum(acc))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report}");
    }

    #[test]
    fn structural_ops_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_arr(&[2, 3, 4], &mut rng);
        let b = rand_arr(&[2, 3, 2], &mut rng);
        let w = rand_arr(&[5, 6], &mut rng);
        let slope = rand_arr(&[3], &mut rng);
        let report = check_inputs(&[a, b, w, slope], 1e-5, |g, v| {
            let c = g.concat(&[v[0], v[1]], 2)?;
            let p = g.permute(c, &[2, 0, 1])?;
            let p = g.prelu(p, v[3], 2)?;
            let r = g.reshape(p, &[6, 6])?;
            let m = g.matmul_t(v[2], r)?;
            let m2 = g.matmul(m, r)?;
            let n = g.narrow(m2, 1, 1, 4)?;
            let s = g.sum_axes(n, &[0])?;
            let q = g.mul(s, n)?;
            let sq = g.square(q);
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report}");
    }

    #[test]
    fn cmul_and_overlap_add_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_arr(&[2, 3, 4], &mut rng);
        let b = rand_arr(&[2, 1, 4], &mut rng);
        let report = check_inputs(&[a, b], 1e-5, |g, v| {
            let c = g.cmul(v[0], v[1])?;
            let c = g.square(c);
            let ola = g.overlap_add(c, 2)?;
            let o2 = g.square(ola);
            Ok(g.sum(o2))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report}");
    }

    #[test]
    fn channel_affine_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_arr(&[2, 2, 3, 2, 4], &mut rng);
        let m = rand_arr(&[2, 2, 3], &mut rng);
        let b = rand_arr(&[2, 3], &mut rng);
        let report = check_inputs(&[x, m, b], 1e-5, |g, v| {
            let y = g.channel_affine(v[0], v[1], v[2])?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report}");
    }

    #[test]
    fn conv_lstm_nodes_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = ConvGeometry { kernel_f: 3, kernel_t: 2, stride_f: 2, pad_f: 1, pad_t: (1, 0) };
        let x = rand_arr(&[2, 1, 2, 3, 8], &mut rng);
        let w = rand_arr(&[2, 3, 2, 3, 2], &mut rng);
        let bias = rand_arr(&[2, 3], &mut rng);
        let wt = rand_arr(&[2, 3, 1, 3, 2], &mut rng);
        let report = check_inputs(&[x, w, bias, wt], 1e-5, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), geom)?;
            let z = g.conv_transpose2d(y, v[3], None, ConvGeometry { pad_t: (0, 1), ..geom }, 8)?;
            let z = g.tanh(z);
            Ok(g.sum(z))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report}");

        let xs = rand_arr(&[4, 2, 3], &mut rng);
        let wih = rand_arr(&[8, 3], &mut rng);
        let whh = rand_arr(&[8, 2], &mut rng);
        let b = rand_arr(&[8], &mut rng);
        let report = check_inputs(&[xs, wih, whh, b], 1e-5, |g, v| {
            let h = g.lstm(v[0], v[1], v[2], v[3], None)?;
            let h = g.square(h);
            Ok(g.sum(h))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report}");
    }

    #[test]
    fn zero_guards_do_not_produce_nan() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(arr1(&[0.0, 1.0]).into_dyn());
        let r = g.sqrt(z);
        let a = g.atan2(z, z).unwrap();
        let t = g.add(r, a).unwrap();
        let s = g.sum(t);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(z).unwrap().iter().all(|v| v.is_finite()));
    }
}
