//! Reverse-mode sweep. Vector-Jacobian products are written with graph ops,
//! so with `create_graph` the returned gradients can be differentiated again.

use std::collections::{HashMap, HashSet};

use super::tensor::Tensor;
use super::var::{no_grad, Bcast, Op, Var};
use super::{AutodiffError, Result};

/// Gradients of a scalar `output` with respect to each node of `wrt`, in order.
///
/// With `create_graph` the results are recorded nodes that depend on the
/// inputs; otherwise they are constants. A `wrt` node that `output` does not
/// depend on gets a zero gradient.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
    if output.value().len() != 1 {
        return Err(AutodiffError::NonScalarOutput { shape: output.shape().to_vec() });
    }
    if create_graph {
        sweep(output, wrt)
    } else {
        no_grad(|| sweep(output, wrt))
    }
}

/// Convenience wrapper returning plain tensors.
pub fn grad_tensors(output: &Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
    Ok(grad(output, wrt, false)?.into_iter().map(|g| g.value().clone()).collect())
}

fn sweep(output: &Var, wrt: &[Var]) -> Result<Vec<Var>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.extend(v.0.parents.iter().cloned());
        order.push(v);
    }
    order.sort_unstable_by_key(|n| std::cmp::Reverse(n.id()));

    let wanted: HashSet<u64> = wrt.iter().map(Var::id).collect();
    let mut grads: HashMap<u64, Var> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape()))?);
    }
    for node in &order {
        if node.0.parents.is_empty() {
            continue;
        }
        let Some(g) = grads.remove(&node.id()) else { continue };
        let parent_grads = vjp(node, &g)?;
        for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !parent.requires_grad() {
                continue;
            }
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg)?,
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
        if wanted.contains(&node.id()) {
            grads.insert(node.id(), g);
        }
    }
    wrt.iter()
        .map(|w| match grads.get(&w.id()) {
            Some(g) => Ok(g.clone()),
            None => Var::constant(Tensor::zeros(w.shape())),
        })
        .collect()
}

fn mask(t: &Tensor, f: impl Fn(f64) -> f64) -> Result<Var> {
    Var::constant(t.map(f))
}

/// Gradient for the broadcast operand of a binary op.
fn reduce(g: Var, mode: Bcast, side: Bcast) -> Result<Var> {
    if mode == side {
        g.sum_rows()
    } else {
        Ok(g)
    }
}

fn vjp(node: &Var, g: &Var) -> Result<Vec<Option<Var>>> {
    let parents = &node.0.parents;
    let x = |i: usize| &parents[i];
    let out = match &node.0.op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let ga = if x(0).requires_grad() { Some(g.matmul(&x(1).transpose()?)?) } else { None };
            let gb = if x(1).requires_grad() { Some(x(0).transpose()?.matmul(g)?) } else { None };
            vec![ga, gb]
        }
        Op::Add(mode) => {
            vec![Some(reduce(g.clone(), *mode, Bcast::Lhs)?), Some(reduce(g.clone(), *mode, Bcast::Rhs)?)]
        }
        Op::Sub(mode) => {
            vec![Some(reduce(g.clone(), *mode, Bcast::Lhs)?), Some(reduce(g.neg()?, *mode, Bcast::Rhs)?)]
        }
        Op::Mul(mode) => {
            let ga = if x(0).requires_grad() { Some(reduce(g.mul(x(1))?, *mode, Bcast::Lhs)?) } else { None };
            let gb = if x(1).requires_grad() { Some(reduce(g.mul(x(0))?, *mode, Bcast::Rhs)?) } else { None };
            vec![ga, gb]
        }
        Op::Neg => vec![Some(g.neg()?)],
        Op::Scale(s) => vec![Some(g.scale(*s)?)],
        Op::Relu => vec![Some(g.mul(&mask(x(0).value(), |v| if v > 0.0 { 1.0 } else { 0.0 })?)?)],
        Op::Tanh => {
            // g * (1 - y^2)
            let gy = g.mul(node)?;
            vec![Some(g.sub(&gy.mul(node)?)?)]
        }
        Op::Sigmoid => {
            // g * y * (1 - y)
            let gy = g.mul(node)?;
            vec![Some(gy.sub(&gy.mul(node)?)?)]
        }
        Op::Sin => vec![Some(g.mul(&x(0).cos()?)?)],
        Op::Cos => vec![Some(g.mul(&x(0).sin()?)?.neg()?)],
        Op::Abs => vec![Some(g.mul(&mask(x(0).value(), |v| if v == 0.0 { 0.0 } else { v.signum() })?)?)],
        Op::Square => vec![Some(g.mul(x(0))?.scale(2.0)?)],
        Op::Sum => vec![Some(g.expand(x(0).shape())?)],
        Op::Mean => {
            let n = x(0).value().len() as f64;
            vec![Some(g.scale(1.0 / n)?.expand(x(0).shape())?)]
        }
        Op::Concat(widths) => {
            let mut start = 0;
            let mut out = Vec::with_capacity(widths.len());
            for &w in widths {
                out.push(Some(g.slice(start, w)?));
                start += w;
            }
            out
        }
        Op::Softmax => {
            // y * (g - <g, y>) per row
            let gy = g.mul(node)?;
            let shape = node.shape().to_vec();
            let dot = if shape.len() == 1 {
                gy.sum()?.expand(&shape)?
            } else {
                let n = shape[1];
                let ones_col = Var::constant(Tensor::ones(&[n, 1]))?;
                let ones_row = Var::constant(Tensor::ones(&[1, n]))?;
                gy.matmul(&ones_col)?.matmul(&ones_row)?
            };
            vec![Some(node.mul(&g.sub(&dot)?)?)]
        }
        Op::BroadcastRows => vec![Some(g.sum_rows()?)],
        Op::SumRows => vec![Some(g.broadcast_rows(x(0).shape()[0])?)],
        Op::Expand => vec![Some(g.sum()?.reshape(x(0).shape())?)],
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Reshape => vec![Some(g.reshape(x(0).shape())?)],
        Op::Slice { start } => vec![Some(g.pad(*start, x(0).value().last_dim())?)],
        Op::Pad { start } => vec![Some(g.slice(*start, x(0).value().last_dim())?)],
    };
    Ok(out)
}
