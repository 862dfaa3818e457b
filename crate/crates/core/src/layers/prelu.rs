use ndarray::{ArrayD, IxDyn};

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

/// Real PReLU applied to both planes, one learned slope per complex channel.
#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: ParamId,
    pub channels: usize,
}

impl Prelu {
    pub const INIT_SLOPE: f64 = 0.25;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let slope = store.add(
            format!("{name}.slope"),
            ArrayD::from_elem(IxDyn(&[channels]), T::of(Self::INIT_SLOPE)),
        );
        Self { slope, channels }
    }

    /// `x: [2, B, C, T, F]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.param(self.slope);
        g.prelu(x, s, 2)
    }
}
