//! Small reusable layers built from graph ops.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::init::{kaiming_uniform, uniform};
use crate::{Float, ParamSet};

/// Binds `x · W (+ b)` for `x` of shape `[N, in]`.
pub fn linear<T: Float>(g: &mut Graph<T>, set: &ParamSet<T>, x: Var, weight: usize, bias: Option<usize>) -> Var {
    let w = g.param(set, weight);
    let y = g.matmul(x, w);
    match bias {
        Some(b) => {
            let b = g.param(set, b);
            g.add_broadcast(y, b)
        }
        None => y,
    }
}

/// Multi-layer perceptron with ReLU between layers (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp<T: Float = f32> {
    dims: Vec<usize>,
    params: ParamSet<T>,
}

impl<T: Float> Mlp<T> {
    /// `dims = [in, hidden..., out]`; needs at least two entries.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], bias: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let mut params = ParamSet::new();
        for (i, w) in dims.windows(2).enumerate() {
            params.add(format!("mlp{i}.weight"), kaiming_uniform(&[w[0], w[1]], w[0], rng));
            if bias {
                params.add(format!("mlp{i}.bias"), uniform(&[w[1]], 0.0, rng));
            }
        }
        Mlp { dims: dims.to_vec(), params }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn has_bias(&self) -> bool {
        self.params.len() == 2 * (self.dims.len() - 1)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let layers = self.dims.len() - 1;
        let stride = if self.has_bias() { 2 } else { 1 };
        let mut h = x;
        for i in 0..layers {
            let bias = self.has_bias().then_some(i * stride + 1);
            h = linear(g, &self.params, h, i * stride, bias);
            if i + 1 < layers {
                h = g.relu(h);
            }
        }
        h
    }
}
