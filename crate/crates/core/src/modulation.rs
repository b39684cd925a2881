//! Task encoder and per-block modulation generators.
//!
//! The encoder runs a bidirectional LSTM over the support pairs sorted by x
//! and concatenates the final hidden state of each direction into the task
//! embedding. One small MLP per hidden block of the task network maps the
//! embedding to that block's modulation vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{init_dense, join, zero_dense, Dense, Mlp, Params};
use crate::task_net::{BlockModulation, ModulationSet, Operator};
use crate::tasks::Points;

pub const ENCODER_HIDDEN: usize = 40;
pub const EMBEDDING_DIM: usize = 2 * ENCODER_HIDDEN;
pub const GENERATOR_HIDDEN: usize = 64;

/// LSTM cell with gates packed as `[input, forget, cell, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell<T> {
    /// `[input, 4 * hidden]`
    pub input_weight: T,
    /// `[hidden, 4 * hidden]`
    pub hidden_weight: T,
    /// `[4 * hidden]`
    pub bias: T,
}

impl<T> LstmCell<T> {
    pub fn try_map<U, E>(&self, f: &mut dyn FnMut(&T) -> std::result::Result<U, E>) -> std::result::Result<LstmCell<U>, E> {
        Ok(LstmCell { input_weight: f(&self.input_weight)?, hidden_weight: f(&self.hidden_weight)?, bias: f(&self.bias)? })
    }
}

impl<T> Params<T> for LstmCell<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "input_weight"), &self.input_weight);
        f(join(prefix, "hidden_weight"), &self.hidden_weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(join(prefix, "input_weight"), &mut self.input_weight);
        f(join(prefix, "hidden_weight"), &mut self.hidden_weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl LstmCell<Var> {
    fn hidden(&self) -> usize {
        self.hidden_weight.shape()[0]
    }

    /// One step; `state` is `None` before the first input.
    fn step(&self, input: &Var, state: Option<(Var, Var)>) -> Result<(Var, Var)> {
        let n = self.hidden();
        let mut z = input.matmul(&self.input_weight)?.add(&self.bias)?;
        if let Some((h, _)) = &state {
            z = z.add(&h.matmul(&self.hidden_weight)?)?;
        }
        let i = z.slice(0, n)?.sigmoid()?;
        let f = z.slice(n, n)?.sigmoid()?;
        let g = z.slice(2 * n, n)?.tanh()?;
        let o = z.slice(3 * n, n)?.sigmoid()?;
        let c = match &state {
            Some((_, c)) => f.mul(c)?.add(&i.mul(&g)?)?,
            None => i.mul(&g)?,
        };
        let h = o.mul(&c.tanh()?)?;
        Ok((h, c))
    }
}

fn init_lstm<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> LstmCell<Tensor> {
    LstmCell {
        input_weight: init_dense(rng, input, 4 * hidden).weight,
        hidden_weight: init_dense(rng, hidden, 4 * hidden).weight,
        bias: Tensor::zeros(&[4 * hidden]),
    }
}

/// Task encoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    /// Projects each `(x, y)` pair to the cell input width.
    pub input: Dense<T>,
    pub forward: LstmCell<T>,
    pub backward: LstmCell<T>,
}

pub type EncoderParameters = Encoder<Tensor>;

impl<T> Encoder<T> {
    pub fn try_map<U, E>(&self, f: &mut dyn FnMut(&T) -> std::result::Result<U, E>) -> std::result::Result<Encoder<U>, E> {
        Ok(Encoder { input: self.input.try_map(f)?, forward: self.forward.try_map(f)?, backward: self.backward.try_map(f)? })
    }
}

impl<T> Params<T> for Encoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.input.visit(&join(prefix, "input"), f);
        self.forward.visit(&join(prefix, "forward"), f);
        self.backward.visit(&join(prefix, "backward"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        self.forward.visit_mut(&join(prefix, "forward"), f);
        self.backward.visit_mut(&join(prefix, "backward"), f);
    }
}

pub fn init_encoder<R: Rng + ?Sized>(rng: &mut R, hidden: usize) -> EncoderParameters {
    Encoder { input: init_dense(rng, 2, hidden), forward: init_lstm(rng, hidden, hidden), backward: init_lstm(rng, hidden, hidden) }
}

/// Fixed-length summary of a task's support set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub values: Vec<f64>,
}

impl TaskEmbedding {
    pub fn from_var(v: &Var) -> Self {
        Self { values: v.value().data().to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Embedding `[1, 2 * hidden]` of the support set. Pairs are sorted by x
/// first, so any ordering of the same points encodes identically.
pub fn encode(support: &Points, encoder: &Encoder<Var>) -> Result<Var> {
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut sorted = support.clone();
    if !sorted.is_sorted_by_x() {
        sorted.sort_by_x();
    }
    let inputs = sorted
        .pairs()
        .map(|(x, y)| encoder.input.forward(&Var::constant(Tensor::matrix(1, 2, vec![x, y]))?).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;

    let run = |cell: &LstmCell<Var>, seq: &mut dyn Iterator<Item = &Var>| -> Result<Var> {
        let mut state = None;
        for x in seq {
            state = Some(cell.step(x, state)?);
        }
        Ok(state.expect("non-empty sequence").0)
    };
    let h_fwd = run(&encoder.forward, &mut inputs.iter())?;
    let h_bwd = run(&encoder.backward, &mut inputs.iter().rev())?;
    Ok(Var::concat(&[h_fwd, h_bwd])?)
}

/// One generator MLP per modulated block.
#[derive(Clone, Debug, PartialEq)]
pub struct Generators<T> {
    pub blocks: Vec<Mlp<T>>,
}

pub type GeneratorParameters = Generators<Tensor>;

impl<T> Generators<T> {
    pub fn try_map<U, E>(&self, f: &mut dyn FnMut(&T) -> std::result::Result<U, E>) -> std::result::Result<Generators<U>, E> {
        let blocks = self.blocks.iter().map(|b| b.try_map(f)).collect::<std::result::Result<_, _>>()?;
        Ok(Generators { blocks })
    }
}

impl<T> Params<T> for Generators<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Raw generator outputs per block for `operator` on blocks of `width`.
pub fn generator_output_width(operator: Operator, width: usize) -> Result<usize> {
    match operator {
        Operator::Film => Ok(2 * width),
        Operator::SoftmaxAttention | Operator::SigmoidGating => Ok(width),
        Operator::Identity => Err(Error::Operator(operator.to_string())),
    }
}

/// Generators whose hidden layer is random and whose output layer is zero,
/// so untrained FiLM modulation is exactly the identity.
pub fn init_generators<R: Rng + ?Sized>(
    rng: &mut R,
    operator: Operator,
    block_widths: &[usize],
    embedding_dim: usize,
    hidden: usize,
) -> Result<GeneratorParameters> {
    let blocks = block_widths
        .iter()
        .map(|&w| {
            let out = generator_output_width(operator, w)?;
            Ok(Mlp { layers: vec![init_dense(rng, embedding_dim, hidden), zero_dense(hidden, out)] })
        })
        .collect::<Result<_>>()?;
    Ok(Generators { blocks })
}

/// Generators with every weight and bias zero.
pub fn zero_generators(operator: Operator, block_widths: &[usize], embedding_dim: usize, hidden: usize) -> Result<GeneratorParameters> {
    let blocks = block_widths
        .iter()
        .map(|&w| {
            let out = generator_output_width(operator, w)?;
            Ok(Mlp { layers: vec![zero_dense(embedding_dim, hidden), zero_dense(hidden, out)] })
        })
        .collect::<Result<_>>()?;
    Ok(Generators { blocks })
}

/// Modulation vectors for every block from the task embedding.
///
/// FiLM uses `gamma = 1 + raw` and `beta = raw`; softmax attention is scaled
/// by the block width so its mean entry is 1; gating is a plain sigmoid.
pub fn generate_modulation(upsilon: &Var, generators: &Generators<Var>, operator: Operator) -> Result<ModulationSet<Var>> {
    let emb = match upsilon.shape() {
        [n] => upsilon.reshape(&[1, *n])?,
        _ => upsilon.clone(),
    };
    let mut blocks = Vec::with_capacity(generators.blocks.len());
    for mlp in &generators.blocks {
        let [l0, l1] = &mlp.layers[..] else {
            return Err(Error::LengthMismatch { what: "generator layers", left: mlp.layers.len(), right: 2 });
        };
        let raw = l1.forward(&l0.forward(&emb)?.relu()?)?;
        let out = raw.shape()[1];
        let raw = raw.reshape(&[out])?;
        let block = match operator {
            Operator::Film => {
                let w = out / 2;
                let ones = Var::constant(Tensor::ones(&[w]))?;
                BlockModulation { scale: Some(raw.slice(0, w)?.add(&ones)?), shift: Some(raw.slice(w, w)?) }
            }
            Operator::SoftmaxAttention => BlockModulation { scale: Some(raw.softmax()?.scale(out as f64)?), shift: None },
            Operator::SigmoidGating => BlockModulation { scale: Some(raw.sigmoid()?), shift: None },
            Operator::Identity => return Err(Error::Operator(operator.to_string())),
        };
        blocks.push(block);
    }
    Ok(ModulationSet { operator, blocks })
}

/// Encoder plus generators.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationNetwork<T> {
    pub encoder: Encoder<T>,
    pub generators: Generators<T>,
}

impl<T> ModulationNetwork<T> {
    pub fn try_map<U, E>(&self, f: &mut dyn FnMut(&T) -> std::result::Result<U, E>) -> std::result::Result<ModulationNetwork<U>, E> {
        Ok(ModulationNetwork { encoder: self.encoder.try_map(f)?, generators: self.generators.try_map(f)? })
    }
}

impl<T> Params<T> for ModulationNetwork<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.generators.visit(&join(prefix, "generator"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.generators.visit_mut(&join(prefix, "generator"), f);
    }
}

impl ModulationNetwork<Var> {
    /// Embedding and modulation for one support set.
    pub fn modulate(&self, support: &Points, operator: Operator) -> Result<(Var, ModulationSet<Var>)> {
        let upsilon = encode(support, &self.encoder)?;
        let tau = generate_modulation(&upsilon, &self.generators, operator)?;
        Ok((upsilon, tau))
    }
}
