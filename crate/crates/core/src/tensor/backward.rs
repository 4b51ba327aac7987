use std::collections::{HashMap, HashSet};

use super::Tensor;
use crate::error::{Error, Result};

/// Gradients of a scalar with respect to every tracked leaf that fed it.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    /// Accumulated gradient for `leaf`, shaped like it. `None` if the leaf did
    /// not contribute to the differentiated value.
    pub fn get(&self, leaf: &Tensor) -> Option<Tensor> {
        self.by_id
            .get(&leaf.id())
            .map(|g| Tensor::new(leaf.rows(), leaf.cols(), g.clone()).expect("gradient shape"))
    }

    /// Like [`Gradients::get`] but zero-filled for non-contributing leaves.
    pub fn get_or_zero(&self, leaf: &Tensor) -> Tensor {
        self.get(leaf)
            .unwrap_or_else(|| Tensor::zeros(leaf.rows(), leaf.cols()))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl Tensor {
    /// Reverse-mode pass from this 1×1 value. Intermediate gradients are
    /// dropped as soon as they have been propagated; only leaf gradients are
    /// returned.
    pub fn backward(&self) -> Result<Gradients> {
        if self.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.shape(),
                rhs: (1, 1),
            });
        }
        let mut grads = Gradients::default();
        if !self.is_tracked() {
            return Ok(grads);
        }

        let order = topo_order(self);
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let Some(node) = t.node() else {
                grads.by_id.insert(t.id(), g);
                continue;
            };
            let input_grads = node.op.backward(&node.inputs, t, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op.name());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if !input.is_tracked() {
                    continue;
                }
                debug_assert_eq!(ig.len(), input.len(), "{}", node.op.name());
                match pending.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(input.id(), ig);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Tracked tensors reachable from `root`, each after all of its inputs.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.node() {
            for input in node.inputs.iter().rev() {
                if input.is_tracked() && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}
