use crate::error::{Error, Result};
use crate::targets::ComplexMask;
use crate::tensor::{ComplexTensor, Graph, Scalar, Var};

use super::Variant;

/// Bound applied to the mask magnitude of the polar variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskActivation {
    #[default]
    Tanh,
    /// Unbounded magnitude; makes the polar form equal to the complex
    /// product.
    Identity,
}

/// Applies a plane-stacked mask `m: [2, ...]` to `y` of the same shape.
pub fn apply_mask_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    variant: Variant,
    act: MaskActivation,
    y: Var,
    m: Var,
) -> Result<Var> {
    if g.shape(y) != g.shape(m) || g.shape(y).first() != Some(&2) {
        return Err(Error::ShapeMismatch {
            lhs: g.shape(y).to_vec(),
            rhs: g.shape(m).to_vec(),
        });
    }
    match variant {
        Variant::R => g.mul(y, m),
        Variant::C => g.cmul(y, m),
        Variant::E | Variant::CL => {
            let polar = |g: &mut Graph<'_, T>, v: Var| -> Result<(Var, Var)> {
                let r = g.narrow(v, 0, 0, 1)?;
                let i = g.narrow(v, 0, 1, 1)?;
                let (r2, i2) = (g.square(r), g.square(i));
                let sum = g.add(r2, i2)?;
                Ok((g.sqrt(sum), g.atan2(i, r)?))
            };
            let (y_mag, y_phase) = polar(g, y)?;
            let (m_mag, m_phase) = polar(g, m)?;
            let gain = match act {
                MaskActivation::Tanh => g.tanh(m_mag),
                MaskActivation::Identity => m_mag,
            };
            let mag = g.mul(y_mag, gain)?;
            let phase = g.add(y_phase, m_phase)?;
            let (c, s) = (g.cos(phase), g.sin(phase));
            let re = g.mul(mag, c)?;
            let im = g.mul(mag, s)?;
            g.concat(&[re, im], 0)
        }
    }
}

/// Masking of a single bin; same arithmetic as [`apply_mask_graph`].
#[inline]
pub(crate) fn mask_bin<T: Scalar>(variant: Variant, act: MaskActivation, y: (T, T), m: (T, T)) -> (T, T) {
    match variant {
        Variant::R => (y.0 * m.0, y.1 * m.1),
        Variant::C => (y.0 * m.0 - y.1 * m.1, y.0 * m.1 + y.1 * m.0),
        Variant::E | Variant::CL => {
            let y_mag = (y.0 * y.0 + y.1 * y.1).sqrt();
            let m_mag = (m.0 * m.0 + m.1 * m.1).sqrt();
            let gain = match act {
                MaskActivation::Tanh => m_mag.tanh(),
                MaskActivation::Identity => m_mag,
            };
            let mag = y_mag * gain;
            let phase = y.1.atan2(y.0) + m.1.atan2(m.0);
            (mag * phase.cos(), mag * phase.sin())
        }
    }
}

/// Value-level masking: `R` multiplies planes independently, `C` is the
/// complex product and `E`/`CL` combine magnitudes and phases.
pub fn apply_mask<T: Scalar>(
    y: &ComplexTensor<T>,
    m: &ComplexMask<T>,
    variant: Variant,
    act: MaskActivation,
) -> Result<ComplexTensor<T>> {
    let mut g = Graph::new();
    let yv = g.constant(y.to_planes());
    let mv = g.constant(m.planes.to_planes());
    let out = apply_mask_graph(&mut g, variant, act, yv, mv)?;
    ComplexTensor::from_planes(g.value(out))
}
