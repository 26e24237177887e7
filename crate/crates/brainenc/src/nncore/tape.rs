//! Reverse pass over the implicit tape.

use std::collections::{HashMap, HashSet};

use super::precision;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient of a scalar loss with respect to each leaf.
///
/// Walks the recorded graph once in reverse topological order, accumulating
/// per-node gradients. Stop-gradient nodes have no parents, so they
/// contribute zero upstream. Errors when the loss is not scalar or a leaf is
/// not reachable on the tape.
pub fn grad(loss: &Tensor, leaves: &[&Tensor]) -> Result<Vec<Tensor>> {
    backward(loss, leaves, true)
}

/// Like [`grad`], but leaves unreachable from the loss receive zero
/// gradients instead of an error. Training loops use this: a parameter can
/// legitimately sit out a batch (e.g. a null-context vector when no stream
/// start is present).
pub fn grad_or_zero(loss: &Tensor, leaves: &[&Tensor]) -> Result<Vec<Tensor>> {
    backward(loss, leaves, false)
}

fn backward(loss: &Tensor, leaves: &[&Tensor], strict: bool) -> Result<Vec<Tensor>> {
    if loss.len() != 1 {
        return Err(Error::NotScalar(loss.len()));
    }

    let order = topo_order(loss);

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);

    for node in order.iter().rev() {
        let Some(mut g) = grads.remove(&node.id()) else {
            continue;
        };
        // Gradient storage is finalized here; accumulation above stayed full
        // precision.
        precision::quantize_store(&mut g);
        let inner = &node.inner;
        let keep = leaves.iter().any(|l| l.id() == node.id());
        if let Some(bw) = &inner.backward {
            let parent_grads = bw(inner, &g);
            debug_assert_eq!(parent_grads.len(), inner.parents.len());
            for (parent, pg) in inner.parents.iter().zip(parent_grads) {
                if !parent.requires_grad() {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.len(), parent.len());
                match grads.get_mut(&parent.id()) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
        if keep {
            grads.insert(node.id(), g);
        }
    }

    leaves
        .iter()
        .map(|leaf| {
            if strict && !leaf.requires_grad() {
                return Err(Error::LeafNotOnTape);
            }
            match grads.get(&leaf.id()) {
                Some(g) => Ok(Tensor::from_vec(leaf.shape().to_vec(), g.clone())),
                None if strict => Err(Error::LeafNotOnTape),
                None => Ok(Tensor::zeros(leaf.shape().to_vec())),
            }
        })
        .collect()
}

/// Iterative post-order DFS: parents always precede their consumers.
fn topo_order(loss: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, parents_expanded)
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.inner.parents.iter().rev() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}
