//! Layer helpers on top of the tensor engine.

use crate::tensor::{Bound, ConvSpec, Graph, ParamId, ParamStore, Result, Scalar, Tensor, Var};
use rand::Rng;

/// Centered uniform init scaled by fan-in (`±√(6/fan_in)`).
pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    FanIn,
    Zero,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        spec: ConvSpec,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let cg = cin / spec.groups;
        let shape = [cout, cg, kernel.0, kernel.1];
        let w = match init {
            Init::FanIn => fan_in_uniform(rng, &shape, cg * kernel.0 * kernel.1),
            Init::Zero => Tensor::zeros(&shape),
        };
        Conv2d {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            spec,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.spec)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, init: Init, rng: &mut R) -> Self {
        let w = match init {
            Init::FanIn => fan_in_uniform(rng, &[dout, din], din),
            Init::Zero => Tensor::zeros(&[dout, din]),
        };
        Linear { w: store.add(format!("{name}.w"), w), b: store.add(format!("{name}.b"), Tensor::zeros(&[dout])) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

/// Flattens everything after the leading axis.
pub fn flatten<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let rest: usize = s[1..].iter().product();
    g.reshape(x, &[s[0], rest])
}
