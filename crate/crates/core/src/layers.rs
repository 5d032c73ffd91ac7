//! Parameter-holding layer handles shared by both networks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use stitchforge_tensor::{Binding, ConvSpec, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

fn he_normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), he_normal(rng, &[cout, cin, kernel, kernel], cin * kernel * kernel));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, spec }
    }

    pub(crate) fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.spec)
    }

    pub(crate) fn apply_relu<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        let y = self.apply(g, p, x);
        g.relu(y)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub(crate) fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), he_normal(rng, &[fan_out, fan_in], fan_in));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub(crate) fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_out, fan_in]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub(crate) fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        g.linear(x, p.var(self.w), p.var(self.b))
    }
}

/// 2x2 stride-2 transposed convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Deconv {
    w: ParamId,
    b: ParamId,
}

impl Deconv {
    pub(crate) fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.add(format!("{name}.weight"), he_normal(rng, &[cin, cout, 2, 2], cin));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b }
    }

    pub(crate) fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        g.deconv2x2(x, p.var(self.w), p.var(self.b))
    }
}
