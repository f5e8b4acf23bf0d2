use std::collections::{HashMap, HashSet};

use crate::ops;
use crate::tensor::{set_grad_enabled, GradModeGuard, Tensor};

/// Parents-before-children ordering of every recorded node reachable from `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !t.requires_grad() || !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = t.op() {
            for p in op.parents() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of `output` (summed over all of its elements) with respect to
/// each tensor in `wrt`.
///
/// With `create_graph` the returned gradients are themselves recorded and can
/// be differentiated again; otherwise they are constants. Tensors `output`
/// does not depend on receive zeros.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    let _mode = GradModeGuard::restore_on_drop(set_grad_enabled(create_graph));

    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let order = topo_order(output);

    // a node matters only if some target is reachable through its parents
    let mut needed: HashSet<u64> = HashSet::new();
    for t in &order {
        let hit = targets.contains(&t.id())
            || t
                .op()
                .map(|op| op.parents().iter().any(|p| needed.contains(&p.id())))
                .unwrap_or(false);
        if hit {
            needed.insert(t.id());
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if needed.contains(&output.id()) {
        grads.insert(output.id(), Tensor::constant(output.value().mapv(|_| 1.0)));
    }
    let is_needed = |t: &Tensor| needed.contains(&t.id());

    for node in order.iter().rev() {
        let Some(op) = node.op() else { continue };
        if !needed.contains(&node.id()) {
            continue;
        }
        let g = if targets.contains(&node.id()) {
            grads.get(&node.id()).cloned()
        } else {
            grads.remove(&node.id())
        };
        let Some(g) = g else { continue };
        for (parent, pg) in op.parents().into_iter().zip(op.backward(node, &g, &is_needed)) {
            let Some(pg) = pg else { continue };
            debug_assert_eq!(pg.shape(), parent.shape());
            match grads.remove(&parent.id()) {
                Some(acc) => {
                    grads.insert(parent.id(), ops::add(&acc, &pg));
                }
                None => {
                    grads.insert(parent.id(), pg);
                }
            }
        }
    }

    wrt.iter()
        .map(|t| {
            grads
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}
