use std::collections::{HashMap, HashSet};

use crate::var::{no_grad, Node, Var};
use crate::{Error, Result, Tensor};

/// Nodes reachable from `root` that require gradients, in post-order
/// (every node after all of its parents).
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Node> = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !node.requires_grad() || !visited.insert(node.ptr()) {
            continue;
        }
        stack.push((node.clone(), true));
        for parent in node.0.op.parents() {
            if parent.requires_grad() && !visited.contains(&parent.ptr()) {
                stack.push((parent.clone(), false));
            }
        }
    }
    order
}

/// Gradients of the scalar `output` with respect to each of `inputs`.
///
/// With `create_graph` the returned gradients are recorded in the graph and
/// can be differentiated again. Inputs that do not influence `output` get a
/// zero gradient.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
    if output.value().len() != 1 {
        return Err(Error::Shape(format!(
            "grad needs a scalar output, got shape {:?}",
            output.shape()
        )));
    }
    let _guard = (!create_graph).then(no_grad);

    let order = topo_order(output);
    let mut grads: HashMap<*const Node, Var> = HashMap::new();
    grads.insert(
        output.ptr(),
        Var::constant(Tensor::ones(output.shape())),
    );
    for node in order.iter().rev() {
        let Some(g) = grads.get(&node.ptr()).cloned() else {
            continue;
        };
        for (parent, contribution) in node.0.op.backward(node, &g) {
            if !parent.requires_grad() {
                continue;
            }
            let key = parent.ptr();
            let merged = match grads.remove(&key) {
                Some(existing) => existing.add(&contribution),
                None => contribution,
            };
            grads.insert(key, merged);
        }
    }

    Ok(inputs
        .iter()
        .map(|input| {
            grads
                .get(&input.ptr())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(input.shape())))
        })
        .collect())
}
