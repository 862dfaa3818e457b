use rand::Rng;

use super::complex_bound;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

fn check_width(shape: &[usize], width: usize, layer: &str) -> Result<()> {
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::ChannelMismatch {
            layer: layer.to_string(),
            expected: width,
            got: shape.get(1).copied().unwrap_or(0),
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

/// Real affine map `y = x·Wᵀ + b` on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            name: name.to_string(),
            weight: store.add_uniform(format!("{name}.weight"), &[output, input], bound, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[output], bound, rng),
            input,
            output,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        check_width(g.shape(x), self.input, &self.name)?;
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.matmul_t(x, w)?;
        g.add(y, b)
    }
}

/// Complex affine map on separate planes; weight `[2, out, in]`, bias
/// `[2, out]`.
#[derive(Clone, Debug)]
pub struct ComplexDense {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl ComplexDense {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = complex_bound(input);
        Self {
            name: name.to_string(),
            weight: store.add_uniform(format!("{name}.weight"), &[2, output, input], bound, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[2, output], bound, rng),
            input,
            output,
        }
    }

    /// `x_r, x_i: [N, in]` → `(y_r, y_i)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x_r: Var, x_i: Var) -> Result<(Var, Var)> {
        check_width(g.shape(x_r), self.input, &self.name)?;
        check_width(g.shape(x_i), self.input, &self.name)?;
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let plane = |g: &mut Graph<'_, T>, v: Var, i: usize, shape: &[usize]| -> Result<Var> {
            let n = g.narrow(v, 0, i, 1)?;
            g.reshape(n, shape)
        };
        let (o, n) = (self.output, self.input);
        let (wr, wi) = (plane(g, w, 0, &[o, n])?, plane(g, w, 1, &[o, n])?);
        let (br, bi) = (plane(g, b, 0, &[o])?, plane(g, b, 1, &[o])?);
        let rr = g.matmul_t(x_r, wr)?;
        let ii = g.matmul_t(x_i, wi)?;
        let ri = g.matmul_t(x_r, wi)?;
        let ir = g.matmul_t(x_i, wr)?;
        let yr = g.sub(rr, ii)?;
        let yr = g.add(yr, br)?;
        let yi = g.add(ri, ir)?;
        let yi = g.add(yi, bi)?;
        Ok((yr, yi))
    }
}
