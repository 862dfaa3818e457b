use rand::Rng;

use super::complex_bound;
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Graph, ParamId, ParamStore, Scalar, Var};

/// Complex 2-D convolution, `W = W_r + jW_i`, with complex bias.
#[derive(Clone, Debug)]
pub struct ComplexConv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeometry,
}

impl ComplexConv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = complex_bound(in_channels * geom.kernel_f * geom.kernel_t);
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[2, out_channels, in_channels, geom.kernel_f, geom.kernel_t],
            bound,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), &[2, out_channels], bound, rng);
        Self {
            name: name.to_string(),
            weight,
            bias,
            in_channels,
            out_channels,
            geom,
        }
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[2] != self.in_channels {
            return Err(Error::ChannelMismatch {
                layer: self.name.clone(),
                expected: self.in_channels,
                got: shape.get(2).copied().unwrap_or(0),
                shape: shape.to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.forward_with(g, x, self.geom)
    }

    /// Forward with a different time padding (streaming windows).
    pub fn forward_with<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, geom: ConvGeometry) -> Result<Var> {
        self.check(g.shape(x))?;
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, Some(b), geom)
    }
}

/// Complex transposed convolution; weight layout `[2, Cin, Cout, kF, kT]`.
#[derive(Clone, Debug)]
pub struct ComplexConvTranspose2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeometry,
}

impl ComplexConvTranspose2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = complex_bound(in_channels * geom.kernel_f * geom.kernel_t);
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[2, in_channels, out_channels, geom.kernel_f, geom.kernel_t],
            bound,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), &[2, out_channels], bound, rng);
        Self {
            name: name.to_string(),
            weight,
            bias,
            in_channels,
            out_channels,
            geom,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, y: Var, out_f: usize) -> Result<Var> {
        self.forward_with(g, y, self.geom, out_f)
    }

    pub fn forward_with<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        y: Var,
        geom: ConvGeometry,
        out_f: usize,
    ) -> Result<Var> {
        let shape = g.shape(y);
        if shape.len() != 5 || shape[2] != self.in_channels {
            return Err(Error::ChannelMismatch {
                layer: self.name.clone(),
                expected: self.in_channels,
                got: shape.get(2).copied().unwrap_or(0),
                shape: shape.to_vec(),
            });
        }
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv_transpose2d(y, w, Some(b), geom, out_f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, spread_picks};
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GEOM: ConvGeometry = ConvGeometry { kernel_f: 5, kernel_t: 2, stride_f: 2, pad_f: 2, pad_t: (1, 0) };

    #[test]
    fn channel_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let conv = ComplexConv2d::new(&mut store, "enc0", 3, 4, GEOM, &mut rng);
        let mut g = Graph::with_params(&store);
        let x = g.constant(ArrayD::zeros(IxDyn(&[2, 1, 2, 4, 8])));
        let msg = conv.forward(&mut g, x).unwrap_err().to_string();
        assert!(msg.contains("enc0") && msg.contains("expected 3"), "{msg}");
    }

    #[test]
    fn parameter_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let conv = ComplexConv2d::new(&mut store, "c", 2, 3, GEOM, &mut rng);
        let deconv = ComplexConvTranspose2d::new(&mut store, "d", 3, 2, ConvGeometry { pad_t: (0, 1), ..GEOM }, &mut rng);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 2, 3, 8]), |i| ((i[4] * 7 + i[3] * 3 + i[2] + i[0]) as f64).sin());
        let picks = spread_picks(&store, 5);
        let report = check_params(
            &mut store,
            &picks,
            1e-5,
            |g| {
                let xv = g.constant(x.clone());
                let y = conv.forward(g, xv)?;
                let y = g.tanh(y);
                let z = deconv.forward(g, y, 8)?;
                let z = g.square(z);
                Ok(g.sum(z))
            },
            |_| {},
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report}");
    }
}
