//! Parameter containers shared by the task network and the modulation network.
//!
//! Every container is generic over its leaf type so the same layout holds
//! stored tensors (`Tensor`), graph leaves (`Var`), gradients, or optimizer
//! moments. Leaves are visited in a fixed order under dotted names.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Result as AdResult, Tensor, Var};

/// Walks the leaves of a parameter container in a fixed order.
pub trait Params<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T));

    fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t));
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, t| out.push(t));
        out
    }

    fn names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, _| out.push(n));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine layer `x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> Dense<T> {
    pub fn try_map<U, E>(&self, f: &mut dyn FnMut(&T) -> Result<U, E>) -> Result<Dense<U>, E> {
        Ok(Dense { weight: f(&self.weight)?, bias: f(&self.bias)? })
    }
}

impl<T> Params<T> for Dense<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl Dense<Tensor> {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Dense<Var> {
    /// `x: [batch, in] -> [batch, out]`.
    pub fn forward(&self, x: &Var) -> AdResult<Var> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

/// A stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T> Mlp<T> {
    pub fn try_map<U, E>(&self, f: &mut dyn FnMut(&T) -> Result<U, E>) -> Result<Mlp<U>, E> {
        let layers = self.layers.iter().map(|l| l.try_map(f)).collect::<Result<_, _>>()?;
        Ok(Mlp { layers })
    }
}

impl<T> Params<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

impl Mlp<Tensor> {
    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layers.iter().map(Dense::in_dim).collect();
        if let Some(last) = self.layers.last() {
            dims.push(last.out_dim());
        }
        dims
    }
}

/// Standard-normal draw truncated to two standard deviations.
fn truncated_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return v;
        }
    }
}

/// Standard deviation of a standard normal truncated at ±2.
const TRUNCATED_STD: f64 = 0.879_625_661_034_239_8;

/// Truncated-normal weights rescaled to standard deviation `1/sqrt(fan_in)`,
/// zero bias.
pub fn init_dense<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Dense<Tensor> {
    let std = 1.0 / (fan_in as f64).sqrt() / TRUNCATED_STD;
    let data = (0..fan_in * fan_out).map(|_| std * truncated_standard_normal(rng)).collect();
    Dense { weight: Tensor::matrix(fan_in, fan_out, data), bias: Tensor::zeros(&[fan_out]) }
}

pub fn zero_dense(fan_in: usize, fan_out: usize) -> Dense<Tensor> {
    Dense { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
}

/// An MLP with widths `dims` (input first), initialized by [`init_dense`].
pub fn init_mlp<R: Rng + ?Sized>(rng: &mut R, dims: &[usize]) -> Mlp<Tensor> {
    let layers = dims.windows(2).map(|w| init_dense(rng, w[0], w[1])).collect();
    Mlp { layers }
}

/// Turns stored tensors into differentiable leaves.
pub fn params_to_vars<P>(p: &P) -> AdResult<Vec<Var>>
where
    P: Params<Tensor>,
{
    p.leaves().into_iter().map(|t| Var::param(t.clone())).collect()
}
