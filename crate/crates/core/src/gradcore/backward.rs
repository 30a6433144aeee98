use std::collections::{HashMap, HashSet};

use log::warn;

use super::tensor::{GradModeGuard, Tensor};
use super::{GradError, Real, Result};

/// Result of [`grad`]: one gradient per requested tensor, in order.
#[derive(Debug)]
pub struct Gradients<R: Real> {
    pub grads: Vec<Tensor<R>>,
    /// Positions in `wrt` that the loss does not depend on; their entries
    /// in `grads` are zeros.
    pub unreachable: Vec<usize>,
}

impl<R: Real> Gradients<R> {
    pub fn into_vec(self) -> Vec<Tensor<R>> {
        self.grads
    }
}

/// Reverse-mode gradient of a single-element `loss` with respect to each of `wrt`.
///
/// With `create_graph` the backward pass is recorded, so the returned
/// gradients are graph nodes that can be differentiated again.
pub fn grad<R: Real>(loss: &Tensor<R>, wrt: &[&Tensor<R>], create_graph: bool) -> Result<Gradients<R>> {
    if loss.numel() != 1 {
        return Err(GradError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let order = needed_topological_order(loss, &targets);
    let needed: HashSet<u64> = order.iter().map(|t| t.id()).collect();

    let _mode = GradModeGuard::set(create_graph);
    let mut acc: HashMap<u64, Tensor<R>> = HashMap::new();
    let mut results: HashMap<u64, Tensor<R>> = HashMap::new();
    if needed.contains(&loss.id()) {
        acc.insert(loss.id(), Tensor::full(loss.shape(), R::one()));
    }

    for node in order.iter().rev() {
        let Some(g) = acc.remove(&node.id()) else { continue };
        if targets.contains(&node.id()) {
            results.insert(node.id(), g.clone());
        }
        let Some(grad_fn) = node.grad_fn() else { continue };
        let parent_grads = grad_fn.op.vjp(&grad_fn.inputs, node, &g)?;
        for (parent, pg) in grad_fn.inputs.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !needed.contains(&parent.id()) {
                continue;
            }
            debug_assert_eq!(parent.shape(), pg.shape(), "{} produced a misshapen gradient", grad_fn.op.name());
            let merged = match acc.remove(&parent.id()) {
                Some(prev) => prev.add(&pg)?,
                None => pg,
            };
            acc.insert(parent.id(), merged);
        }
    }

    let mut grads = Vec::with_capacity(wrt.len());
    let mut unreachable = Vec::new();
    for (k, t) in wrt.iter().enumerate() {
        match results.get(&t.id()) {
            Some(g) => grads.push(g.clone()),
            None => {
                unreachable.push(k);
                grads.push(Tensor::zeros(t.shape()));
            }
        }
    }
    if !unreachable.is_empty() {
        warn!("grad: {} of {} tensors unreachable from the loss; returning zeros", unreachable.len(), wrt.len());
    }
    Ok(Gradients { grads, unreachable })
}

/// Post-order of graph nodes that require a gradient and lead to some target.
fn needed_topological_order<R: Real>(loss: &Tensor<R>, targets: &HashSet<u64>) -> Vec<Tensor<R>> {
    let mut order = Vec::new();
    let mut state: HashMap<u64, bool> = HashMap::new();
    if !loss.requires_grad() {
        return order;
    }
    // (node, next input index to visit)
    let mut stack: Vec<(Tensor<R>, usize)> = vec![(loss.clone(), 0)];
    let mut visiting: HashSet<u64> = HashSet::from([loss.id()]);
    while let Some((node, next)) = stack.pop() {
        let inputs = node.grad_fn().map(|f| f.inputs.as_slice()).unwrap_or(&[]);
        if next < inputs.len() {
            let child = inputs[next].clone();
            stack.push((node, next + 1));
            if child.requires_grad() && !state.contains_key(&child.id()) && visiting.insert(child.id()) {
                stack.push((child, 0));
            }
            continue;
        }
        let is_needed = targets.contains(&node.id())
            || inputs.iter().any(|p| state.get(&p.id()).copied().unwrap_or(false));
        visiting.remove(&node.id());
        state.insert(node.id(), is_needed);
        if is_needed {
            order.push(node);
        }
    }
    order
}
