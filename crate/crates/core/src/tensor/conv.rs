//! 2-D convolution kernels over `[planes, B, C, T, F]` arrays.
//!
//! Time has unit stride and explicit front/back padding; frequency has a
//! stride and symmetric padding. The input is unrolled along frequency only
//! (`[Ci·kF, T_pad·F_out]`), so each time tap of the kernel is one GEMM on a
//! contiguous column block. Complex layers are expressed as a list of
//! signed real products between planes, which lets the real and complex
//! paths share every loop.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayD, ArrayView2, ArrayView3, ArrayViewMut2, ArrayViewMut3, Axis, IxDyn, ShapeBuilder};

use super::Scalar;
use crate::error::{Error, Result};

/// Kernel size, frequency stride and padding of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_f: usize,
    pub kernel_t: usize,
    pub stride_f: usize,
    pub pad_f: usize,
    /// Zero frames added before and after the time axis.
    pub pad_t: (usize, usize),
}

impl ConvGeometry {
    pub fn out_f(&self, f: usize) -> Result<usize> {
        let padded = f + 2 * self.pad_f;
        if self.stride_f == 0 || padded < self.kernel_f {
            return Err(Error::InvalidArgument(format!(
                "frequency size {f} too small for kernel {} with padding {}",
                self.kernel_f, self.pad_f
            )));
        }
        Ok((padded - self.kernel_f) / self.stride_f + 1)
    }

    pub fn out_t(&self, t: usize) -> Result<usize> {
        let padded = t + self.pad_t.0 + self.pad_t.1;
        if padded < self.kernel_t {
            return Err(Error::InvalidArgument(format!(
                "{t} frames too few for time kernel {} with padding {:?}",
                self.kernel_t, self.pad_t
            )));
        }
        Ok(padded + 1 - self.kernel_t)
    }

    /// Number of input frames that a transposed convolution produces from
    /// `t` frames.
    pub fn in_t(&self, t: usize) -> Result<usize> {
        let padded = t + self.kernel_t - 1;
        padded
            .checked_sub(self.pad_t.0 + self.pad_t.1)
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{t} frames too few to transpose with padding {:?}",
                    self.pad_t
                ))
            })
    }
}

/// `(sign, weight plane, input plane, output plane)`.
type Term = (f64, usize, usize, usize);

const REAL: &[Term] = &[(1.0, 0, 0, 0)];
const COMPLEX: &[Term] = &[(1.0, 0, 0, 0), (-1.0, 1, 1, 0), (1.0, 1, 0, 1), (1.0, 0, 1, 1)];

fn terms(planes: usize) -> &'static [Term] {
    if planes == 1 {
        REAL
    } else {
        COMPLEX
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    planes: usize,
    b: usize,
    ci: usize,
    co: usize,
    t: usize,
    f: usize,
    to: usize,
    fo: usize,
}

impl Dims {
    fn t_pad(&self, g: &ConvGeometry) -> usize {
        self.t + g.pad_t.0 + g.pad_t.1
    }
    fn ck(&self, g: &ConvGeometry) -> usize {
        self.ci * g.kernel_f
    }
}

fn check_weight<T>(w: &ArrayD<T>, planes: usize, g: &ConvGeometry, layer: &str) -> Result<(usize, usize)> {
    let sh = w.shape();
    if sh.len() != 5 || sh[0] != planes || sh[3] != g.kernel_f || sh[4] != g.kernel_t {
        return Err(Error::InvalidArgument(format!(
            "{layer}: weight shape {sh:?} does not match {planes} planes and kernel ({}, {})",
            g.kernel_f, g.kernel_t
        )));
    }
    Ok((sh[1], sh[2]))
}

fn check_input<T>(x: &ArrayD<T>, planes: usize, channels: usize, layer: &str) -> Result<()> {
    let sh = x.shape();
    if sh.len() != 5 || sh[0] != planes {
        return Err(Error::InvalidArgument(format!(
            "{layer}: expected a [{planes}, B, C, T, F] input, got {sh:?}"
        )));
    }
    if sh[2] != channels {
        return Err(Error::ChannelMismatch {
            layer: layer.to_string(),
            expected: channels,
            got: sh[2],
            shape: sh.to_vec(),
        });
    }
    Ok(())
}

fn check_bias<T>(bias: Option<&ArrayD<T>>, planes: usize, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [planes, channels] => Err(Error::ShapeMismatch {
            lhs: b.shape().to_vec(),
            rhs: vec![planes, channels],
        }),
        _ => Ok(()),
    }
}

/// Frequency-only unroll of one `[Ci, T, F]` slab into `[Ci·kF, T_pad·F_out]`.
fn im2col<T: Scalar>(x: ArrayView3<T>, g: &ConvGeometry, d: &Dims, cols: &mut Array2<T>) {
    let t_pad = d.t_pad(g);
    cols.fill(T::zero());
    for ci in 0..d.ci {
        for kf in 0..g.kernel_f {
            let mut row = cols.row_mut(ci * g.kernel_f + kf);
            let row = row.as_slice_mut().expect("contiguous");
            for tp in g.pad_t.0..(g.pad_t.0 + d.t) {
                let src = x.slice(s![ci, tp - g.pad_t.0, ..]);
                let dst = &mut row[tp * d.fo..(tp + 1) * d.fo];
                for (fo, v) in dst.iter_mut().enumerate() {
                    let f = fo * g.stride_f + kf;
                    if f >= g.pad_f && f - g.pad_f < d.f {
                        *v = src[f - g.pad_f];
                    }
                }
            }
            debug_assert!(t_pad * d.fo == row.len());
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[Ci, T, F]` slab.
fn col2im<T: Scalar>(cols: &Array2<T>, g: &ConvGeometry, d: &Dims, mut x: ArrayViewMut3<T>) {
    for ci in 0..d.ci {
        for kf in 0..g.kernel_f {
            let row = cols.row(ci * g.kernel_f + kf);
            let row = row.as_slice().expect("contiguous");
            for t in 0..d.t {
                let tp = t + g.pad_t.0;
                let src = &row[tp * d.fo..(tp + 1) * d.fo];
                let mut dst = x.slice_mut(s![ci, t, ..]);
                for (fo, &v) in src.iter().enumerate() {
                    let f = fo * g.stride_f + kf;
                    if f >= g.pad_f && f - g.pad_f < d.f {
                        dst[f - g.pad_f] += v;
                    }
                }
            }
        }
    }
}

/// Output rows `t0..t1` whose tap `kt` lands on unpadded input frames.
fn live_rows(kt: usize, g: &ConvGeometry, d: &Dims) -> Option<(usize, usize)> {
    let t0 = g.pad_t.0.saturating_sub(kt);
    let t1 = (g.pad_t.0 + d.t).saturating_sub(kt).min(d.to);
    (t0 < t1).then_some((t0, t1))
}

/// The `[Co, Ci·kF]` slice of a `[Co, Ci, kF, kT]` weight plane at tap `kt`.
fn tap<'a, T: Scalar>(w: &'a [T], d: &Dims, g: &ConvGeometry, kt: usize) -> ArrayView2<'a, T> {
    let ck = d.ck(g);
    ArrayView2::from_shape((d.co, ck).strides((ck * g.kernel_t, g.kernel_t)), &w[kt..])
        .expect("tap view in bounds")
}

fn tap_mut<'a, T: Scalar>(w: &'a mut [T], d: &Dims, g: &ConvGeometry, kt: usize) -> ArrayViewMut2<'a, T> {
    let ck = d.ck(g);
    ArrayViewMut2::from_shape((d.co, ck).strides((ck * g.kernel_t, g.kernel_t)), &mut w[kt..])
        .expect("tap view in bounds")
}

fn weight_planes<T: Scalar>(w: &ArrayD<T>) -> Vec<&[T]> {
    let flat = w.as_slice().expect("standard layout weight");
    let n = flat.len() / w.shape()[0];
    flat.chunks(n).collect()
}

/// `[Co, To·Fo]` view of plane `p`, batch `b` of an output-shaped array.
fn mat_mut<T: Scalar>(a: &mut ArrayD<T>, p: usize, b: usize, rows: usize) -> ArrayViewMut2<'_, T> {
    let v = a.slice_mut(s![p, b, .., .., ..]);
    let cols = v.len() / rows;
    v.into_shape_with_order((rows, cols)).expect("contiguous slab")
}

fn mat<T: Scalar>(a: &ArrayD<T>, p: usize, b: usize, rows: usize) -> ArrayView2<'_, T> {
    let v = a.slice(s![p, b, .., .., ..]);
    let cols = v.len() / rows;
    v.into_shape_with_order((rows, cols)).expect("contiguous slab")
}

fn add_bias<T: Scalar>(y: &mut ArrayD<T>, bias: &ArrayD<T>) {
    for p in 0..y.shape()[0] {
        for mut batch in y.index_axis_mut(Axis(0), p).axis_iter_mut(Axis(0)) {
            for (c, mut ch) in batch.axis_iter_mut(Axis(0)).enumerate() {
                let v = bias[[p, c]];
                ch.mapv_inplace(|x| x + v);
            }
        }
    }
}

fn bias_grad<T: Scalar>(dy: &ArrayD<T>) -> ArrayD<T> {
    dy.sum_axis(Axis(4)).sum_axis(Axis(3)).sum_axis(Axis(1))
}

fn conv_dims<T>(x: &ArrayD<T>, w: &ArrayD<T>, g: &ConvGeometry, layer: &str) -> Result<Dims> {
    let planes = w.shape().first().copied().unwrap_or(0);
    if planes != 1 && planes != 2 {
        return Err(Error::InvalidArgument(format!("{layer}: weight must have 1 or 2 planes")));
    }
    let (co, ci) = check_weight(w, planes, g, layer)?;
    check_input(x, planes, ci, layer)?;
    let sh = x.shape();
    Ok(Dims {
        planes,
        b: sh[1],
        ci,
        co,
        t: sh[3],
        f: sh[4],
        to: g.out_t(sh[3])?,
        fo: g.out_f(sh[4])?,
    })
}

/// Convolution of `x: [P, B, Ci, T, F]` with `w: [P, Co, Ci, kF, kT]` where
/// `P` is 1 (real) or 2 (complex, combined as a complex product).
pub fn conv2d<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    bias: Option<&ArrayD<T>>,
    g: &ConvGeometry,
) -> Result<ArrayD<T>> {
    let d = conv_dims(x, w, g, "conv2d")?;
    check_bias(bias, d.planes, d.co)?;
    let wp = weight_planes(w);
    let mut y = ArrayD::zeros(IxDyn(&[d.planes, d.b, d.co, d.to, d.fo]));
    let mut cols: Vec<Array2<T>> = (0..d.planes)
        .map(|_| Array2::zeros((d.ck(g), d.t_pad(g) * d.fo)))
        .collect();
    for b in 0..d.b {
        for (p, c) in cols.iter_mut().enumerate() {
            im2col(x.slice(s![p, b, .., .., ..]), g, &d, c);
        }
        for kt in 0..g.kernel_t {
            let blk = kt * d.fo..(kt + d.to) * d.fo;
            for &(sign, wi, ip, op) in terms(d.planes) {
                let wv = tap(wp[wi], &d, g, kt);
                let cv = cols[ip].slice(s![.., blk.clone()]);
                general_mat_mul(T::of(sign), &wv, &cv, T::one(), &mut mat_mut(&mut y, op, b, d.co));
            }
        }
    }
    if let Some(bias) = bias {
        add_bias(&mut y, bias);
    }
    Ok(y)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    dy: &ArrayD<T>,
    g: &ConvGeometry,
) -> Result<(ArrayD<T>, ArrayD<T>, ArrayD<T>)> {
    let d = conv_dims(x, w, g, "conv2d")?;
    if dy.shape() != [d.planes, d.b, d.co, d.to, d.fo] {
        return Err(Error::ShapeMismatch {
            lhs: dy.shape().to_vec(),
            rhs: vec![d.planes, d.b, d.co, d.to, d.fo],
        });
    }
    let wp = weight_planes(w);
    let mut dx = ArrayD::zeros(x.raw_dim());
    let mut dw = ArrayD::zeros(w.raw_dim());
    let plane_len = w.len() / d.planes;
    let mut cols: Vec<Array2<T>> = (0..d.planes)
        .map(|_| Array2::zeros((d.ck(g), d.t_pad(g) * d.fo)))
        .collect();
    let mut dcols = cols.clone();
    for b in 0..d.b {
        for (p, c) in cols.iter_mut().enumerate() {
            im2col(x.slice(s![p, b, .., .., ..]), g, &d, c);
        }
        dcols.iter_mut().for_each(|c| c.fill(T::zero()));
        for kt in 0..g.kernel_t {
            let Some((t0, t1)) = live_rows(kt, g, &d) else { continue };
            let ys = t0 * d.fo..t1 * d.fo;
            let cs = (t0 + kt) * d.fo..(t1 + kt) * d.fo;
            for &(sign, wi, ip, op) in terms(d.planes) {
                let dyv = mat(dy, op, b, d.co);
                let dyv = dyv.slice(s![.., ys.clone()]);
                let wv = tap(wp[wi], &d, g, kt);
                let mut dc = dcols[ip].slice_mut(s![.., cs.clone()]);
                general_mat_mul(T::of(sign), &wv.t(), &dyv, T::one(), &mut dc);
                let cv = cols[ip].slice(s![.., cs.clone()]);
                let flat = dw.as_slice_mut().expect("standard layout");
                let mut dwv = tap_mut(&mut flat[wi * plane_len..(wi + 1) * plane_len], &d, g, kt);
                general_mat_mul(T::of(sign), &dyv, &cv.t(), T::one(), &mut dwv);
            }
            // Weight gradients from padded rows: those columns are zero, so
            // the live-row restriction loses nothing.
        }
        for (p, c) in dcols.iter().enumerate() {
            col2im(c, g, &d, dx.slice_mut(s![p, b, .., .., ..]));
        }
    }
    Ok((dx, dw, bias_grad(dy)))
}

fn convt_dims<T>(y: &ArrayD<T>, w: &ArrayD<T>, g: &ConvGeometry, out_f: usize) -> Result<Dims> {
    let layer = "conv_transpose2d";
    let planes = w.shape().first().copied().unwrap_or(0);
    if planes != 1 && planes != 2 {
        return Err(Error::InvalidArgument(format!("{layer}: weight must have 1 or 2 planes")));
    }
    let (co, ci) = check_weight(w, planes, g, layer)?;
    check_input(y, planes, co, layer)?;
    let sh = y.shape();
    let t = g.in_t(sh[3])?;
    if g.out_f(out_f)? != sh[4] {
        return Err(Error::InvalidArgument(format!(
            "{layer}: output frequency size {out_f} does not map back to {}",
            sh[4]
        )));
    }
    Ok(Dims {
        planes,
        b: sh[1],
        ci,
        co,
        t,
        f: out_f,
        to: sh[3],
        fo: sh[4],
    })
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same weight
/// and geometry. `y: [P, B, Cin, T, F]`, `w: [P, Cin, Cout, kF, kT]`, and
/// `out_f` selects the output frequency size among those that the forward
/// convolution would map onto `F`.
pub fn conv_transpose2d<T: Scalar>(
    y: &ArrayD<T>,
    w: &ArrayD<T>,
    bias: Option<&ArrayD<T>>,
    g: &ConvGeometry,
    out_f: usize,
) -> Result<ArrayD<T>> {
    let d = convt_dims(y, w, g, out_f)?;
    check_bias(bias, d.planes, d.ci)?;
    let wp = weight_planes(w);
    let mut x = ArrayD::zeros(IxDyn(&[d.planes, d.b, d.ci, d.t, d.f]));
    let mut cols: Vec<Array2<T>> = (0..d.planes)
        .map(|_| Array2::zeros((d.ck(g), d.t_pad(g) * d.fo)))
        .collect();
    for b in 0..d.b {
        cols.iter_mut().for_each(|c| c.fill(T::zero()));
        for kt in 0..g.kernel_t {
            let Some((t0, t1)) = live_rows(kt, g, &d) else { continue };
            let ys = t0 * d.fo..t1 * d.fo;
            let cs = (t0 + kt) * d.fo..(t1 + kt) * d.fo;
            for &(sign, wi, ip, op) in terms(d.planes) {
                let yv = mat(y, ip, b, d.co);
                let wv = tap(wp[wi], &d, g, kt);
                let mut cv = cols[op].slice_mut(s![.., cs.clone()]);
                general_mat_mul(T::of(sign), &wv.t(), &yv.slice(s![.., ys.clone()]), T::one(), &mut cv);
            }
        }
        for (p, c) in cols.iter().enumerate() {
            col2im(c, g, &d, x.slice_mut(s![p, b, .., .., ..]));
        }
    }
    if let Some(bias) = bias {
        add_bias(&mut x, bias);
    }
    Ok(x)
}

/// Gradients of [`conv_transpose2d`] with respect to input, weight and bias.
pub fn conv_transpose2d_backward<T: Scalar>(
    y: &ArrayD<T>,
    w: &ArrayD<T>,
    dx: &ArrayD<T>,
    g: &ConvGeometry,
) -> Result<(ArrayD<T>, ArrayD<T>, ArrayD<T>)> {
    let out_f = dx.shape().get(4).copied().unwrap_or(0);
    let d = convt_dims(y, w, g, out_f)?;
    if dx.shape() != [d.planes, d.b, d.ci, d.t, d.f] {
        return Err(Error::ShapeMismatch {
            lhs: dx.shape().to_vec(),
            rhs: vec![d.planes, d.b, d.ci, d.t, d.f],
        });
    }
    let wp = weight_planes(w);
    let plane_len = w.len() / d.planes;
    let mut dy = ArrayD::zeros(y.raw_dim());
    let mut dw = ArrayD::zeros(w.raw_dim());
    let mut gcols: Vec<Array2<T>> = (0..d.planes)
        .map(|_| Array2::zeros((d.ck(g), d.t_pad(g) * d.fo)))
        .collect();
    for b in 0..d.b {
        for (p, c) in gcols.iter_mut().enumerate() {
            im2col(dx.slice(s![p, b, .., .., ..]), g, &d, c);
        }
        for kt in 0..g.kernel_t {
            let Some((t0, t1)) = live_rows(kt, g, &d) else { continue };
            let ys = t0 * d.fo..t1 * d.fo;
            let cs = (t0 + kt) * d.fo..(t1 + kt) * d.fo;
            for &(sign, wi, ip, op) in terms(d.planes) {
                let gv = gcols[op].slice(s![.., cs.clone()]);
                let wv = tap(wp[wi], &d, g, kt);
                {
                    let mut dyv = mat_mut(&mut dy, ip, b, d.co);
                    let mut dyv = dyv.slice_mut(s![.., ys.clone()]);
                    general_mat_mul(T::of(sign), &wv, &gv, T::one(), &mut dyv);
                }
                let yv = mat(y, ip, b, d.co);
                let flat = dw.as_slice_mut().expect("standard layout");
                let mut dwv = tap_mut(&mut flat[wi * plane_len..(wi + 1) * plane_len], &d, g, kt);
                general_mat_mul(T::of(sign), &yv.slice(s![.., ys.clone()]), &gv.t(), T::one(), &mut dwv);
            }
        }
    }
    Ok((dy, dw, bias_grad(dx)))
}

/// Brute-force sliding-window reference for [`conv2d`], used by tests and
/// the verification report. Complex inputs are combined with explicit
/// scalar complex arithmetic.
pub fn conv2d_reference<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    bias: Option<&ArrayD<T>>,
    g: &ConvGeometry,
) -> Result<ArrayD<T>> {
    let d = conv_dims(x, w, g, "conv2d")?;
    let mut y = ArrayD::zeros(IxDyn(&[d.planes, d.b, d.co, d.to, d.fo]));
    let at = |p: usize, b: usize, c: usize, tp: isize, fp: isize| -> T {
        if tp < 0 || fp < 0 || tp as usize >= d.t || fp as usize >= d.f || p >= d.planes {
            T::zero()
        } else {
            x[[p, b, c, tp as usize, fp as usize]]
        }
    };
    let wat = |p: usize, o: usize, i: usize, kf: usize, kt: usize| -> T {
        if p >= d.planes {
            T::zero()
        } else {
            w[[p, o, i, kf, kt]]
        }
    };
    for b in 0..d.b {
        for o in 0..d.co {
            for to in 0..d.to {
                for fo in 0..d.fo {
                    let (mut re, mut im) = (T::zero(), T::zero());
                    for i in 0..d.ci {
                        for kf in 0..g.kernel_f {
                            for kt in 0..g.kernel_t {
                                let tp = (to + kt) as isize - g.pad_t.0 as isize;
                                let fp = (fo * g.stride_f + kf) as isize - g.pad_f as isize;
                                let (xr, xi) = (at(0, b, i, tp, fp), at(1, b, i, tp, fp));
                                let (wr, wi) = (wat(0, o, i, kf, kt), wat(1, o, i, kf, kt));
                                re += wr * xr - wi * xi;
                                im += wr * xi + wi * xr;
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        re += bias[[0, o]];
                        if d.planes == 2 {
                            im += bias[[1, o]];
                        }
                    }
                    y[[0, b, o, to, fo]] = re;
                    if d.planes == 2 {
                        y[[1, b, o, to, fo]] = im;
                    }
                }
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn max_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn dot(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    const G3: ConvGeometry = ConvGeometry {
        kernel_f: 3,
        kernel_t: 3,
        stride_f: 1,
        pad_f: 1,
        pad_t: (2, 0),
    };

    const ENC: ConvGeometry = ConvGeometry {
        kernel_f: 5,
        kernel_t: 2,
        stride_f: 2,
        pad_f: 2,
        pad_t: (1, 0),
    };

    #[test]
    fn complex_conv_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for g in [G3, ENC] {
            let x = rand_arr(&[2, 2, 2, 5, 5], &mut rng);
            let w = rand_arr(&[2, 3, 2, g.kernel_f, g.kernel_t], &mut rng);
            let b = rand_arr(&[2, 3], &mut rng);
            let fast = conv2d(&x, &w, Some(&b), &g).unwrap();
            let slow = conv2d_reference(&x, &w, Some(&b), &g).unwrap();
            assert!(max_diff(&fast, &slow) <= 1e-10);
        }
    }

    #[test]
    fn pure_j_one_by_one_kernel_rotates_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = ConvGeometry { kernel_f: 1, kernel_t: 1, stride_f: 1, pad_f: 0, pad_t: (0, 0) };
        let x = rand_arr(&[2, 1, 1, 4, 6], &mut rng);
        let mut w = ArrayD::zeros(IxDyn(&[2, 1, 1, 1, 1]));
        w[[1, 0, 0, 0, 0]] = 1.0;
        let y = conv2d(&x, &w, None, &g).unwrap();
        assert_eq!(y.index_axis(Axis(0), 0), x.index_axis(Axis(0), 1).mapv(|v| -v));
        assert_eq!(y.index_axis(Axis(0), 1), x.index_axis(Axis(0), 0));
    }

    #[test]
    fn real_degeneracy_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xr = rand_arr(&[1, 2, 3, 6, 16], &mut rng);
        let wr = rand_arr(&[1, 4, 3, 5, 2], &mut rng);
        let real = conv2d(&xr, &wr, None, &ENC).unwrap();
        let mut xc = ArrayD::zeros(IxDyn(&[2, 2, 3, 6, 16]));
        xc.index_axis_mut(Axis(0), 0).assign(&xr.index_axis(Axis(0), 0));
        let mut wc = ArrayD::zeros(IxDyn(&[2, 4, 3, 5, 2]));
        wc.index_axis_mut(Axis(0), 0).assign(&wr.index_axis(Axis(0), 0));
        let cplx = conv2d(&xc, &wc, None, &ENC).unwrap();
        assert_eq!(cplx.index_axis(Axis(0), 0), real.index_axis(Axis(0), 0));
        assert!(cplx.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));

        let yt = rand_arr(&[1, 2, 4, 6, 8], &mut rng);
        let real_t = conv_transpose2d(&yt, &wr, None, &ENC, 16).unwrap();
        let mut yc = ArrayD::zeros(IxDyn(&[2, 2, 4, 6, 8]));
        yc.index_axis_mut(Axis(0), 0).assign(&yt.index_axis(Axis(0), 0));
        let cplx_t = conv_transpose2d(&yc, &wc, None, &ENC, 16).unwrap();
        assert_eq!(cplx_t.index_axis(Axis(0), 0), real_t.index_axis(Axis(0), 0));
        assert!(cplx_t.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transpose_restores_frequency_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = rand_arr(&[2, 1, 2, 3, 128], &mut rng);
        let w = rand_arr(&[2, 2, 1, 5, 2], &mut rng);
        let x = conv_transpose2d(&y, &w, None, &ENC, 256).unwrap();
        assert_eq!(x.shape(), &[2, 1, 1, 3, 256]);
        assert_eq!(ENC.out_f(256).unwrap(), 128);
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (g, f) in [(ENC, 16), (ENC, 15), (G3, 7)] {
            for planes in [1, 2] {
                let x = rand_arr(&[planes, 2, 3, 5, f], &mut rng);
                let w = rand_arr(&[planes, 4, 3, g.kernel_f, g.kernel_t], &mut rng);
                let cx = conv2d(&x, &w, None, &g).unwrap();
                let y = rand_arr(cx.shape(), &mut rng);
                let ty = conv_transpose2d(&y, &w, None, &g, f).unwrap();
                if planes == 1 {
                    assert!((dot(&cx, &y) - dot(&x, &ty)).abs() <= 1e-8);
                } else {
                    // For a complex kernel the adjoint conjugates W; check the
                    // real-kernel case by zeroing W_i.
                    let mut wr = w.clone();
                    wr.index_axis_mut(Axis(0), 1).fill(0.0);
                    let cx = conv2d(&x, &wr, None, &g).unwrap();
                    let ty = conv_transpose2d(&y, &wr, None, &g, f).unwrap();
                    assert!((dot(&cx, &y) - dot(&x, &ty)).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_names_layer_and_shape() {
        let x = ArrayD::<f64>::zeros(IxDyn(&[2, 1, 3, 4, 8]));
        let w = ArrayD::<f64>::zeros(IxDyn(&[2, 4, 2, 5, 2]));
        let msg = conv2d(&x, &w, None, &ENC).unwrap_err().to_string();
        assert!(msg.contains("conv2d") && msg.contains("[2, 1, 3, 4, 8]"), "{msg}");
    }

    fn fd_check(
        f: &dyn Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        dx: &ArrayD<f64>,
        dw: &ArrayD<f64>,
        probe: &ArrayD<f64>,
    ) {
        let h = 1e-6;
        let loss = |x: &ArrayD<f64>, w: &ArrayD<f64>| dot(&f(x, w), probe);
        for i in (0..x.len()).step_by(7) {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.as_slice_mut().unwrap()[i] += h;
            b.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&a, w) - loss(&b, w)) / (2.0 * h);
            assert!((fd - dx.as_slice().unwrap()[i]).abs() <= 1e-7, "dx[{i}]");
        }
        for i in 0..w.len() {
            let (mut a, mut b) = (w.clone(), w.clone());
            a.as_slice_mut().unwrap()[i] += h;
            b.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(x, &a) - loss(x, &b)) / (2.0 * h);
            assert!((fd - dw.as_slice().unwrap()[i]).abs() <= 1e-7, "dw[{i}]");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for g in [ENC, G3, ConvGeometry { pad_t: (0, 1), ..ENC }] {
            let x = rand_arr(&[2, 2, 2, 4, 9], &mut rng);
            let w = rand_arr(&[2, 3, 2, g.kernel_f, g.kernel_t], &mut rng);
            let y = conv2d(&x, &w, None, &g).unwrap();
            let probe = rand_arr(y.shape(), &mut rng);
            let (dx, dw, _) = conv2d_backward(&x, &w, &probe, &g).unwrap();
            fd_check(&|x, w| conv2d(x, w, None, &g).unwrap(), &x, &w, &dx, &dw, &probe);

            let yin = rand_arr(y.shape(), &mut rng);
            let xt = conv_transpose2d(&yin, &w, None, &g, 9).unwrap();
            let probe = rand_arr(xt.shape(), &mut rng);
            let (dy, dw, _) = conv_transpose2d_backward(&yin, &w, &probe, &g).unwrap();
            fd_check(&|y, w| conv_transpose2d(y, w, None, &g, 9).unwrap(), &yin, &w, &dy, &dw, &probe);
        }
    }
}
