//! Append-only operation record with reverse-mode gradient propagation.
//!
//! Nodes are pushed in evaluation order and may only reference earlier
//! nodes, so insertion order is a topological order. Gradients flowing into
//! a node from several consumers are summed in the order the consumers are
//! visited, which is fixed by the tape, so repeated runs agree bit for bit.

use crate::error::{invalid, Result};

#[derive(Clone, Debug)]
pub struct TapeNode<N> {
    pub op: N,
    pub inputs: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct GradientTape<N> {
    nodes: Vec<TapeNode<N>>,
}

/// Per-input gradients returned by a backward rule (`None` = no gradient).
pub type InputGrads = Vec<Option<Vec<f64>>>;

impl<N> GradientTape<N> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn push(&mut self, op: N, inputs: Vec<usize>) -> usize {
        let id = self.nodes.len();
        assert!(inputs.iter().all(|&i| i < id), "tape inputs must precede their consumer");
        self.nodes.push(TapeNode { op, inputs });
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> &TapeNode<N> {
        &self.nodes[id]
    }

    pub fn op(&self, id: usize) -> &N {
        &self.nodes[id].op
    }

    /// Propagates `seed` from `output` back to the first node. `rule` receives
    /// the tape, a node id and the gradient of the loss with respect to that
    /// node's value, and returns one entry per input. Returns the visit order.
    pub fn backward<F>(&self, output: usize, seed: Vec<f64>, mut rule: F) -> Result<Vec<usize>>
    where
        F: FnMut(&Self, usize, &[f64]) -> Result<InputGrads>,
    {
        if output >= self.nodes.len() {
            return Err(invalid(format!("output node {output} not on the tape")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=output).map(|_| None).collect();
        grads[output] = Some(seed);
        let mut order = Vec::with_capacity(output + 1);
        for id in (0..=output).rev() {
            order.push(id);
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let ins = rule(self, id, &g)?;
            if ins.len() != node.inputs.len() {
                return Err(invalid(format!(
                    "backward rule of node {id} returned {} gradients for {} inputs",
                    ins.len(),
                    node.inputs.len()
                )));
            }
            for (&src, gin) in node.inputs.iter().zip(ins) {
                let Some(gin) = gin else { continue };
                match &mut grads[src] {
                    Some(acc) => {
                        if acc.len() != gin.len() {
                            return Err(invalid(format!("gradient length mismatch into node {src}")));
                        }
                        acc.iter_mut().zip(&gin).for_each(|(a, b)| *a += b);
                    }
                    slot => *slot = Some(gin),
                }
            }
        }
        Ok(order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    enum Op {
        Leaf(f64),
        Mul,
        Add,
    }

    fn value(t: &GradientTape<Op>, id: usize) -> f64 {
        let n = t.node(id);
        match n.op {
            Op::Leaf(v) => v,
            Op::Mul => value(t, n.inputs[0]) * value(t, n.inputs[1]),
            Op::Add => value(t, n.inputs[0]) + value(t, n.inputs[1]),
        }
    }

    #[test]
    fn chain_rule_on_a_diamond() {
        // f = (a * b) + a with a = 3, b = 4  ->  df/da = b + 1, df/db = a
        let mut t = GradientTape::new();
        let a = t.push(Op::Leaf(3.0), vec![]);
        let b = t.push(Op::Leaf(4.0), vec![]);
        let m = t.push(Op::Mul, vec![a, b]);
        let f = t.push(Op::Add, vec![m, a]);
        assert_eq!(value(&t, f), 15.0);
        let mut leaf = [0.0; 2];
        let order = t
            .backward(f, vec![1.0], |tape, id, g| {
                let n = tape.node(id);
                Ok(match n.op {
                    Op::Leaf(_) => {
                        leaf[id] += g[0];
                        vec![]
                    }
                    Op::Mul => vec![
                        Some(vec![g[0] * value(tape, n.inputs[1])]),
                        Some(vec![g[0] * value(tape, n.inputs[0])]),
                    ],
                    Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
                })
            })
            .unwrap();
        assert_eq!(leaf, [5.0, 3.0]);
        assert_eq!(order, vec![3, 2, 1, 0]);
    }

    #[test]
    fn every_node_visited_once_in_reverse() {
        let mut t = GradientTape::new();
        let mut last = t.push(Op::Leaf(1.0), vec![]);
        for i in 0..20 {
            let l = t.push(Op::Leaf(i as f64), vec![]);
            last = t.push(if i % 2 == 0 { Op::Add } else { Op::Mul }, vec![last, l]);
        }
        let mut calls = vec![0; t.len()];
        let order = t
            .backward(last, vec![1.0], |tape, id, g| {
                calls[id] += 1;
                Ok(tape.node(id).inputs.iter().map(|_| Some(g.to_vec())).collect())
            })
            .unwrap();
        assert_eq!(order, (0..t.len()).rev().collect::<Vec<_>>());
        assert!(calls.iter().all(|&c| c == 1));
    }

    #[test]
    #[should_panic]
    fn forward_references_rejected() {
        let mut t: GradientTape<Op> = GradientTape::new();
        t.push(Op::Add, vec![0]);
    }
}
