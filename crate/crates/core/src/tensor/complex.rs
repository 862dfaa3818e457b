use ndarray::{concatenate, ArrayD, Axis, IxDyn, Zip};

use super::shape::zip_broadcast;
use super::Scalar;
use crate::error::{Error, Result};

/// N-dimensional complex array stored as separate real and imaginary planes.
///
/// Both planes always share one shape. A purely real tensor has an
/// imaginary plane of exact zeros, and real-only arithmetic keeps it that
/// way.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T: Scalar> {
    re: ArrayD<T>,
    im: ArrayD<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(re: ArrayD<T>, im: ArrayD<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::ShapeMismatch {
                lhs: re.shape().to_vec(),
                rhs: im.shape().to_vec(),
            });
        }
        Ok(Self { re, im })
    }

    pub fn from_real(re: ArrayD<T>) -> Self {
        let im = ArrayD::zeros(re.raw_dim());
        Self { re, im }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            re: ArrayD::zeros(IxDyn(shape)),
            im: ArrayD::zeros(IxDyn(shape)),
        }
    }

    /// Builds a tensor from polar coordinates `mag · e^{j·phase}`.
    pub fn from_polar(mag: &ArrayD<T>, phase: &ArrayD<T>) -> Result<Self> {
        let re = zip_broadcast(mag, phase, |m, p| m * p.cos())?;
        let im = zip_broadcast(mag, phase, |m, p| m * p.sin())?;
        Ok(Self { re, im })
    }

    /// Splits a `[2, ...]` plane-stacked array.
    pub fn from_planes(planes: &ArrayD<T>) -> Result<Self> {
        if planes.ndim() == 0 || planes.shape()[0] != 2 {
            return Err(Error::InvalidArgument(format!(
                "plane-stacked array needs a leading axis of 2, got {:?}",
                planes.shape()
            )));
        }
        Ok(Self {
            re: planes.index_axis(Axis(0), 0).to_owned(),
            im: planes.index_axis(Axis(0), 1).to_owned(),
        })
    }

    /// Stacks the planes along a new leading axis of length 2.
    pub fn to_planes(&self) -> ArrayD<T> {
        concatenate(
            Axis(0),
            &[
                self.re.view().insert_axis(Axis(0)),
                self.im.view().insert_axis(Axis(0)),
            ],
        )
        .expect("planes share a shape")
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &ArrayD<T> {
        &self.re
    }

    pub fn im(&self) -> &ArrayD<T> {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut ArrayD<T> {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut ArrayD<T> {
        &mut self.im
    }

    pub fn into_parts(self) -> (ArrayD<T>, ArrayD<T>) {
        (self.re, self.im)
    }

    /// True when every imaginary entry is exactly zero.
    pub fn is_real(&self) -> bool {
        self.im.iter().all(|&v| v == T::zero())
    }

    /// Elementwise complex product.
    pub fn cmul(&self, other: &Self) -> Result<Self> {
        let re = zip4(self, other, |ar, ai, br, bi| ar * br - ai * bi)?;
        let im = if self.is_real() && other.is_real() {
            ArrayD::zeros(re.raw_dim())
        } else {
            zip4(self, other, |ar, ai, br, bi| ar * bi + ai * br)?
        };
        Ok(Self { re, im })
    }

    pub fn cadd(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            re: zip_broadcast(&self.re, &other.re, |a, b| a + b)?,
            im: zip_broadcast(&self.im, &other.im, |a, b| a + b)?,
        })
    }

    pub fn csub(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            re: zip_broadcast(&self.re, &other.re, |a, b| a - b)?,
            im: zip_broadcast(&self.im, &other.im, |a, b| a - b)?,
        })
    }

    pub fn conj(&self) -> Self {
        Self {
            re: self.re.clone(),
            im: self.im.mapv(|v| -v),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            re: self.re.mapv(|v| v * s),
            im: self.im.mapv(|v| v * s),
        }
    }

    /// `sqrt(re² + im²)`.
    pub fn magnitude(&self) -> ArrayD<T> {
        Zip::from(&self.re)
            .and(&self.im)
            .map_collect(|&r, &i| r.hypot(i))
    }

    /// `atan2(im, re)`, in `(-π, π]`.
    pub fn phase(&self) -> ArrayD<T> {
        Zip::from(&self.re)
            .and(&self.im)
            .map_collect(|&r, &i| i.atan2(r))
    }

    /// Sum of `|z|²` over all elements, accumulated in f64.
    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(self.im.iter())
            .map(|(&r, &i)| r.as_f64() * r.as_f64() + i.as_f64() * i.as_f64())
            .sum()
    }

    pub fn map_precision<U: Scalar>(&self) -> ComplexTensor<U> {
        ComplexTensor {
            re: self.re.mapv(|v| U::of(v.as_f64())),
            im: self.im.mapv(|v| U::of(v.as_f64())),
        }
    }
}

fn zip4<T: Scalar>(
    a: &ComplexTensor<T>,
    b: &ComplexTensor<T>,
    f: impl Fn(T, T, T, T) -> T,
) -> Result<ArrayD<T>> {
    let shape = super::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let d = IxDyn(&shape);
    let (ar, ai) = (a.re.broadcast(d.clone()).unwrap(), a.im.broadcast(d.clone()).unwrap());
    let (br, bi) = (b.re.broadcast(d.clone()).unwrap(), b.im.broadcast(d).unwrap());
    Ok(Zip::from(&ar)
        .and(&ai)
        .and(&br)
        .and(&bi)
        .map_collect(|&w, &x, &y, &z| f(w, x, y, z)))
}
