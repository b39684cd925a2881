//! The modulatable MLP regressor.
//!
//! Hidden blocks compute a pre-activation, apply the block's modulation
//! and then ReLU. The output layer is linear and never modulated.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{init_mlp, Mlp};

pub const HIDDEN_WIDTH: usize = 100;
/// Input, three modulated hidden blocks, scalar output.
pub const TASK_NET_DIMS: [usize; 5] = [1, HIDDEN_WIDTH, HIDDEN_WIDTH, HIDDEN_WIDTH, 1];
pub const MODULATED_BLOCKS: usize = TASK_NET_DIMS.len() - 2;

pub type MlpParameters = Mlp<Tensor>;

/// How a block's modulation vectors act on its pre-activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operator {
    /// `F * gamma + beta`
    Film,
    /// `F * tau`, `tau` a rescaled softmax over the block's units
    SoftmaxAttention,
    /// `F * tau`, `tau` in (0, 1)
    SigmoidGating,
    Identity,
}

impl Operator {
    pub fn name(self) -> &'static str {
        match self {
            Operator::Film => "film",
            Operator::SoftmaxAttention => "softmax-attention",
            Operator::SigmoidGating => "sigmoid-gating",
            Operator::Identity => "identity",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "film" => Ok(Operator::Film),
            "softmax" | "softmax-attention" => Ok(Operator::SoftmaxAttention),
            "sigmoid" | "sigmoid-gating" => Ok(Operator::SigmoidGating),
            "identity" => Ok(Operator::Identity),
            other => Err(Error::Operator(other.to_string())),
        }
    }
}

/// Modulation of one hidden block: multiplicative `scale`, additive `shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockModulation<T> {
    pub scale: Option<T>,
    pub shift: Option<T>,
}

/// Per-block modulation vectors, tagged by operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationSet<T> {
    pub operator: Operator,
    pub blocks: Vec<BlockModulation<T>>,
}

impl<T> ModulationSet<T> {
    pub fn identity(blocks: usize) -> Self {
        let blocks = (0..blocks).map(|_| BlockModulation { scale: None, shift: None }).collect();
        Self { operator: Operator::Identity, blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

impl ModulationSet<Var> {
    /// FiLM with the given constant gamma and beta in every block.
    pub fn film_constant(widths: &[usize], gamma: f64, beta: f64) -> Result<Self> {
        let blocks = widths
            .iter()
            .map(|&w| {
                Ok(BlockModulation {
                    scale: Some(Var::constant(Tensor::full(&[w], gamma))?),
                    shift: Some(Var::constant(Tensor::full(&[w], beta))?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { operator: Operator::Film, blocks })
    }

    /// Plain values of every vector, for inspection and export.
    pub fn values(&self) -> ModulationSet<Tensor> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockModulation {
                scale: b.scale.as_ref().map(|v| v.value().clone()),
                shift: b.shift.as_ref().map(|v| v.value().clone()),
            })
            .collect();
        ModulationSet { operator: self.operator, blocks }
    }

    /// Constant copies; gradients stop here.
    pub fn detach(&self) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockModulation {
                scale: b.scale.as_ref().map(Var::detach),
                shift: b.shift.as_ref().map(Var::detach),
            })
            .collect();
        Self { operator: self.operator, blocks }
    }
}

/// Per-block pre-activation before (`unmodulated`) and after (`modulated`)
/// applying the block's modulation.
#[derive(Clone, Debug)]
pub struct ModulatedActivations {
    pub unmodulated: Vec<Var>,
    pub modulated: Vec<Var>,
}

fn as_column(x: &Var) -> Result<Var> {
    match x.shape() {
        [n] => Ok(x.reshape(&[*n, 1])?),
        [_, 1] => Ok(x.clone()),
        other => Err(Error::LengthMismatch { what: "input columns", left: other.len(), right: 1 }),
    }
}

/// Predictions for an input batch `x` (`[B]` or `[B, 1]`) as `[B]`.
pub fn forward(x: &Var, theta: &Mlp<Var>, tau: &ModulationSet<Var>) -> Result<Var> {
    Ok(forward_traced(x, theta, tau)?.0)
}

/// [`forward`] that also returns each hidden block's pre-activations.
pub fn forward_traced(x: &Var, theta: &Mlp<Var>, tau: &ModulationSet<Var>) -> Result<(Var, ModulatedActivations)> {
    let hidden = theta.layers.len().saturating_sub(1);
    if tau.len() != hidden {
        return Err(Error::BlockCount { expected: hidden, got: tau.len() });
    }
    let mut acts = ModulatedActivations { unmodulated: Vec::with_capacity(hidden), modulated: Vec::with_capacity(hidden) };
    let mut h = as_column(x)?;
    for (layer, block) in theta.layers[..hidden].iter().zip(&tau.blocks) {
        let pre = layer.forward(&h)?;
        let mut modulated = pre.clone();
        if let Some(scale) = &block.scale {
            modulated = modulated.mul(scale)?;
        }
        if let Some(shift) = &block.shift {
            modulated = modulated.add(shift)?;
        }
        h = modulated.relu()?;
        acts.unmodulated.push(pre);
        acts.modulated.push(modulated);
    }
    let last = theta.layers.last().ok_or(Error::BlockCount { expected: 1, got: 0 })?;
    let out = last.forward(&h)?;
    let batch = out.shape()[0];
    Ok((out.reshape(&[batch])?, acts))
}

/// Mean squared error between equal-length batches.
pub fn mse_loss(pred: &Var, target: &Var) -> Result<Var> {
    if pred.value().len() != target.value().len() {
        return Err(Error::LengthMismatch { what: "mse_loss", left: pred.value().len(), right: target.value().len() });
    }
    let target = if target.shape() == pred.shape() { target.clone() } else { target.reshape(pred.shape())? };
    Ok(pred.sub(&target)?.square()?.mean()?)
}

/// Task network with the standard `1-100-100-100-1` layout.
pub fn init_parameters<R: Rng + ?Sized>(rng: &mut R) -> MlpParameters {
    init_mlp(rng, &TASK_NET_DIMS)
}

/// Hidden block widths of a task network.
pub fn block_widths(theta: &MlpParameters) -> Vec<usize> {
    let dims = theta.dims();
    dims[1..dims.len().saturating_sub(1)].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_tensors;
    use crate::gradcheck::{central_difference, compare};
    use crate::nn::Params;
    use crate::tasks::RngStream;

    fn vars(theta: &MlpParameters) -> Mlp<Var> {
        theta.try_map(&mut |t| Var::param(t.clone())).unwrap()
    }

    fn xs(n: usize) -> Var {
        Var::constant(Tensor::vector((0..n).map(|i| -5.0 + 10.0 * i as f64 / (n - 1) as f64).collect())).unwrap()
    }

    fn random_film(rng: &mut RngStream, widths: &[usize]) -> ModulationSet<Tensor> {
        let blocks = widths
            .iter()
            .map(|&w| BlockModulation {
                scale: Some(Tensor::vector((0..w).map(|_| rng.random_range(0.5..1.5)).collect())),
                shift: Some(Tensor::vector((0..w).map(|_| rng.random_range(-0.5..0.5)).collect())),
            })
            .collect();
        ModulationSet { operator: Operator::Film, blocks }
    }

    fn tau_vars(t: &ModulationSet<Tensor>) -> ModulationSet<Var> {
        let blocks = t
            .blocks
            .iter()
            .map(|b| BlockModulation {
                scale: b.scale.clone().map(|v| Var::param(v).unwrap()),
                shift: b.shift.clone().map(|v| Var::param(v).unwrap()),
            })
            .collect();
        ModulationSet { operator: t.operator, blocks }
    }

    #[test]
    fn film_identity_matches_identity_bitwise() {
        let mut rng = RngStream::new(4);
        let theta = vars(&init_parameters(&mut rng));
        let a = forward(&xs(17), &theta, &ModulationSet::identity(3)).unwrap();
        let film = ModulationSet::film_constant(&[100; 3], 1.0, 0.0).unwrap();
        let b = forward(&xs(17), &theta, &film).unwrap();
        assert_eq!(a.value(), b.value());
        assert_eq!(a.shape(), &[17]);
    }

    #[test]
    fn half_gates_halve_preactivations() {
        let mut rng = RngStream::new(5);
        let theta = vars(&init_parameters(&mut rng));
        let (_, id) = forward_traced(&xs(9), &theta, &ModulationSet::identity(3)).unwrap();
        let gate = |_| BlockModulation { scale: Some(Var::constant(Tensor::full(&[100], 0.5)).unwrap()), shift: None };
        let tau = ModulationSet { operator: Operator::SigmoidGating, blocks: (0..3).map(gate).collect() };
        let (_, gated) = forward_traced(&xs(9), &theta, &tau).unwrap();
        // first block sees the same input, so its modulated pre-activation is exactly half
        for (g, u) in gated.modulated[0].value().data().iter().zip(id.unmodulated[0].value().data()) {
            assert_eq!(*g, 0.5 * u);
        }
        for (g, u) in gated.modulated[0].value().data().iter().zip(gated.unmodulated[0].value().data()) {
            assert_eq!(*g, 0.5 * u);
        }
    }

    #[test]
    fn zero_gamma_erases_input_dependence() {
        let mut rng = RngStream::new(6);
        let theta = vars(&init_parameters(&mut rng));
        let tau = ModulationSet::film_constant(&[100; 3], 0.0, 0.7).unwrap();
        let (_, acts) = forward_traced(&xs(11), &theta, &tau).unwrap();
        assert!(acts.modulated[0].value().data().iter().all(|&v| v == 0.7));
        let h = acts.modulated[0].relu().unwrap();
        assert!(h.value().data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn block_count_mismatch() {
        let mut rng = RngStream::new(6);
        let theta = vars(&init_parameters(&mut rng));
        let err = forward(&xs(3), &theta, &ModulationSet::identity(2)).unwrap_err();
        assert!(matches!(err, Error::BlockCount { expected: 3, got: 2 }));
    }

    #[test]
    fn modulation_is_local_to_later_blocks() {
        let mut rng = RngStream::new(8);
        let theta = vars(&init_parameters(&mut rng));
        let base = random_film(&mut rng, &[100; 3]);
        let mut changed = base.clone();
        changed.blocks[1].shift = Some(Tensor::full(&[100], 2.0));
        let (_, a) = forward_traced(&xs(7), &theta, &tau_vars(&base)).unwrap();
        let (_, b) = forward_traced(&xs(7), &theta, &tau_vars(&changed)).unwrap();
        assert_eq!(a.unmodulated[0].value(), b.unmodulated[0].value());
        assert_eq!(a.unmodulated[1].value(), b.unmodulated[1].value());
        assert_ne!(a.unmodulated[2].value(), b.unmodulated[2].value());
    }

    #[test]
    fn mse_values_and_mismatch() {
        let p = Var::constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let t = Var::constant(Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert_eq!(mse_loss(&p, &t).unwrap().value().item(), Some(1.0));
        assert_eq!(mse_loss(&t, &t).unwrap().value().item(), Some(0.0));
        let short = Var::constant(Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(mse_loss(&p, &short), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn mse_gradient_wrt_prediction() {
        let pred = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let target = Tensor::vector(vec![1.0, -1.0, 2.0, 0.5]);
        let p = Var::param(pred.clone()).unwrap();
        let tv = Var::constant(target.clone()).unwrap();
        let analytic = grad_tensors(&mse_loss(&p, &tv).unwrap(), &[p]).unwrap();
        let f = |x: &[Tensor]| {
            mse_loss(&Var::constant(x[0].clone()).unwrap(), &tv).unwrap().value().item().unwrap()
        };
        let numeric = central_difference(f, std::slice::from_ref(&pred), 1e-5);
        assert!(compare(&analytic, &numeric, 1e-7).passes(1e-4));
        for i in 0..4 {
            let expect = 2.0 * (pred.data()[i] - target.data()[i]) / 4.0;
            assert!((analytic[0].data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let a = init_parameters(&mut RngStream::new(1));
        let b = init_parameters(&mut RngStream::new(1));
        assert_eq!(a, b);
        assert_eq!(a.dims(), TASK_NET_DIMS.to_vec());
        for layer in &a.layers {
            assert!(layer.bias.data().iter().all(|&v| v == 0.0));
            let fan_in = layer.in_dim() as f64;
            let w = layer.weight.data();
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let target = 1.0 / fan_in.sqrt();
            assert!((std - target).abs() <= 0.2 * target, "std {std} vs {target}");
        }
    }

    #[test]
    fn gradients_wrt_theta_and_tau_match_fd() {
        let mut rng = RngStream::new(21);
        let theta = crate::nn::init_mlp(&mut rng, &[1, 6, 5, 1]);
        let tau = random_film(&mut rng, &[6, 5]);
        let x = xs(4);
        let y = Var::constant(Tensor::vector(vec![0.5, -1.0, 2.0, 0.1])).unwrap();

        let mut inputs: Vec<Tensor> = theta.leaves().into_iter().cloned().collect();
        for b in &tau.blocks {
            inputs.push(b.scale.clone().unwrap());
            inputs.push(b.shift.clone().unwrap());
        }
        let n_theta = theta.leaves().len();
        let loss_at = |t: &[Tensor], record: bool| -> (Var, Vec<Var>) {
            let mk = |v: &Tensor| if record { Var::param(v.clone()).unwrap() } else { Var::constant(v.clone()).unwrap() };
            let leaves: Vec<Var> = t.iter().map(mk).collect();
            let mut it = leaves[..n_theta].iter().cloned();
            let th = theta.try_map(&mut |_| Ok::<_, ()>(it.next().unwrap())).unwrap();
            let blocks = leaves[n_theta..]
                .chunks(2)
                .map(|c| BlockModulation { scale: Some(c[0].clone()), shift: Some(c[1].clone()) })
                .collect();
            let tv = ModulationSet { operator: Operator::Film, blocks };
            let pred = forward(&x, &th, &tv).unwrap();
            (mse_loss(&pred, &y).unwrap(), leaves)
        };
        let (loss, leaves) = loss_at(&inputs, true);
        let analytic = grad_tensors(&loss, &leaves).unwrap();
        let numeric = central_difference(|t| loss_at(t, false).0.value().item().unwrap(), &inputs, 1e-5);
        let check = compare(&analytic, &numeric, 1e-7);
        assert!(check.passes(1e-4), "{check:?}");
        assert!(analytic[n_theta..].iter().any(|g| g.l2_norm_sq() > 0.0));
    }
}
