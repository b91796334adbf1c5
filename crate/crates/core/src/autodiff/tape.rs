use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Index of a node on its [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    MatMul,
    AddBias,
    Relu,
    Conv2d,
    MaxPool2,
    Reshape,
    SoftmaxCePerSample,
    TrimmedMean,
    Mean,
    Sum,
    GatherRows,
    ScalarScale,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Argmax(Vec<usize>),
    Softmax {
        probs: Tensor,
        labels: Vec<usize>,
    },
    /// Selected positions, ascending. Held constant during backward.
    Selection(Vec<usize>),
    Rows(Vec<usize>),
    Scale(f64),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
    aux: Aux,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].grad.as_ref()
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        for &id in ids {
            if id >= self.nodes.len() {
                return Err(Error::Index {
                    index: id,
                    bound: self.nodes.len(),
                });
            }
        }
        Ok(())
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, value: Tensor, aux: Aux) -> NodeId {
        let id = self.nodes.len();
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            id,
            kind,
            inputs,
            value,
            grad: None,
            requires_grad,
            aux,
        });
        id
    }

    /// Leaf node. Parameters use `requires_grad = true`, data `false`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            kind: OpKind::Input,
            inputs: vec![],
            value,
            grad: None,
            requires_grad,
            aux: Aux::None,
        });
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(OpKind::MatMul, vec![a, b], v, Aux::None))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(&[x, bias])?;
        let v = kernels::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(OpKind::AddBias, vec![x, bias], v, Aux::None))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = kernels::relu(self.value(x));
        Ok(self.push(OpKind::Relu, vec![x], v, Aux::None))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(&[x, w, bias])?;
        let v = kernels::conv2d_forward(self.value(x), self.value(w), self.value(bias))?;
        Ok(self.push(OpKind::Conv2d, vec![x, w, bias], v, Aux::None))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let (v, arg) = kernels::maxpool2_forward(self.value(x))?;
        Ok(self.push(OpKind::MaxPool2, vec![x], v, Aux::Argmax(arg)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(&[x])?;
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(OpKind::Reshape, vec![x], v, Aux::None))
    }

    /// Per-row cross-entropy of `logits[b,c]`; the result has shape `[b]`.
    pub fn softmax_ce_per_sample(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(&[logits])?;
        let (v, probs) = kernels::softmax_ce_per_sample(self.value(logits), labels)?;
        let aux = Aux::Softmax {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(OpKind::SoftmaxCePerSample, vec![logits], v, aux))
    }

    /// Mean over the listed positions of a rank-1 node.
    ///
    /// Terms are added in ascending position order regardless of the order of
    /// `selected`, then divided by the count.
    pub fn trimmed_mean(&mut self, losses: NodeId, selected: &[usize]) -> Result<NodeId> {
        self.check(&[losses])?;
        let x = self.value(losses);
        if x.rank() != 1 {
            return Err(Error::shape(format!(
                "trimmed_mean expects a loss vector, got {:?}",
                x.shape()
            )));
        }
        let mut sel = selected.to_vec();
        sel.sort_unstable();
        if sel.is_empty() || sel.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract(
                "trimmed_mean selection must be nonempty and distinct",
            ));
        }
        if let Some(&bad) = sel.iter().find(|&&i| i >= x.len()) {
            return Err(Error::Index {
                index: bad,
                bound: x.len(),
            });
        }
        let sum = sel.iter().fold(0.0, |acc, &i| acc + x.data()[i]);
        let v = Tensor::scalar(sum / sel.len() as f64);
        Ok(self.push(OpKind::TrimmedMean, vec![losses], v, Aux::Selection(sel)))
    }

    /// Mean over every element, ascending order.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let xs = self.value(x);
        let v = Tensor::scalar(kernels::sum_ascending(xs.data()) / xs.len() as f64);
        Ok(self.push(OpKind::Mean, vec![x], v, Aux::None))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = Tensor::scalar(kernels::sum_ascending(self.value(x).data()));
        Ok(self.push(OpKind::Sum, vec![x], v, Aux::None))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.check(&[x])?;
        let v = kernels::gather_rows(self.value(x), idx)?;
        Ok(self.push(OpKind::GatherRows, vec![x], v, Aux::Rows(idx.to_vec())))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.check(&[x])?;
        let src = self.value(x);
        let v = Tensor::new(src.shape(), src.data().iter().map(|v| factor * v).collect())?;
        Ok(self.push(OpKind::ScalarScale, vec![x], v, Aux::Scale(factor)))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Clears every gradient first, so repeated calls give identical results.
    /// Afterwards each node that requires a gradient holds one of its own
    /// shape (zeros when the root does not depend on it).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check(&[root])?;
        if self.nodes[root].value.shape() != [1] {
            return Err(Error::contract(format!(
                "backward root must have shape [1], got {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                for (input, contribution) in self.local_grads(node, &g)? {
                    accumulate(&mut grads[input], contribution);
                }
            }
            grads[id] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad {
                Some(match g {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.shape())?,
                })
            } else {
                None
            };
        }
        Ok(())
    }

    /// Which side of every non-smooth point the forward pass landed on:
    /// relu input signs and maxpool argmax positions, in tape order.
    pub(crate) fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match (node.kind, &node.aux) {
                (OpKind::Relu, _) => {
                    let x = self.value(node.inputs[0]);
                    sig.extend(x.data().iter().map(|&v| usize::from(v > 0.0)));
                }
                (OpKind::MaxPool2, Aux::Argmax(arg)) => sig.extend_from_slice(arg),
                _ => {}
            }
        }
        sig
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Vector-Jacobian products of `node` for each input that needs a gradient.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let ins = &node.inputs;
        let mut out = Vec::with_capacity(ins.len());
        match (node.kind, &node.aux) {
            (OpKind::Input, _) => {}
            (OpKind::MatMul, _) => {
                let (a, b) = (ins[0], ins[1]);
                if self.wants(a) {
                    let bt = kernels::transpose(self.value(b))?;
                    out.push((a, kernels::matmul(g, &bt)?));
                }
                if self.wants(b) {
                    out.push((b, kernels::matmul_tn(self.value(a), g)?));
                }
            }
            (OpKind::AddBias, _) => {
                if self.wants(ins[0]) {
                    out.push((ins[0], g.clone()));
                }
                if self.wants(ins[1]) {
                    out.push((ins[1], kernels::sum_rows(g)?));
                }
            }
            (OpKind::Relu, _) => {
                out.push((ins[0], kernels::relu_backward(self.value(ins[0]), g)));
            }
            (OpKind::Conv2d, _) => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let (dx, dw, db) = kernels::conv2d_backward(self.value(x), self.value(w), g, self.wants(x))?;
                if let Some(dx) = dx {
                    out.push((x, dx));
                }
                if self.wants(w) {
                    out.push((w, dw));
                }
                if self.wants(b) {
                    out.push((b, db));
                }
            }
            (OpKind::MaxPool2, Aux::Argmax(arg)) => {
                let shape = self.value(ins[0]).shape();
                out.push((ins[0], kernels::maxpool2_backward(shape, arg, g)?));
            }
            (OpKind::Reshape, _) => {
                let shape = self.value(ins[0]).shape().to_vec();
                out.push((ins[0], g.clone().reshape(&shape)?));
            }
            (OpKind::SoftmaxCePerSample, Aux::Softmax { probs, labels }) => {
                let c = probs.shape()[1];
                let mut d = vec![0.0; probs.len()];
                for (b, (&gb, &label)) in g.data().iter().zip(labels).enumerate() {
                    if gb == 0.0 {
                        continue;
                    }
                    let row = &probs.data()[b * c..(b + 1) * c];
                    for (j, (dj, &pj)) in d[b * c..(b + 1) * c].iter_mut().zip(row).enumerate() {
                        let target = if j == label { 1.0 } else { 0.0 };
                        *dj = gb * (pj - target);
                    }
                }
                out.push((ins[0], Tensor::new(probs.shape(), d)?));
            }
            (OpKind::TrimmedMean, Aux::Selection(sel)) => {
                let n = self.value(ins[0]).len();
                let w = g.data()[0] * (1.0 / sel.len() as f64);
                let mut d = vec![0.0; n];
                for &i in sel {
                    d[i] = w;
                }
                out.push((ins[0], Tensor::new(&[n], d)?));
            }
            (OpKind::Mean, _) => {
                let x = self.value(ins[0]);
                let w = g.data()[0] * (1.0 / x.len() as f64);
                out.push((ins[0], Tensor::full(x.shape(), w)?));
            }
            (OpKind::Sum, _) => {
                out.push((ins[0], Tensor::full(self.value(ins[0]).shape(), g.data()[0])?));
            }
            (OpKind::GatherRows, Aux::Rows(idx)) => {
                let shape = self.value(ins[0]).shape();
                out.push((ins[0], kernels::scatter_rows(g, idx, shape)?));
            }
            (OpKind::ScalarScale, Aux::Scale(c)) => {
                let d = g.data().iter().map(|v| c * v).collect();
                out.push((ins[0], Tensor::new(g.shape(), d)?));
            }
            (kind, _) => unreachable!("node {kind:?} recorded without its auxiliary data"),
        }
        Ok(out.into_iter().filter(|(i, _)| self.wants(*i)).collect())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[-1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1], &[0.0]), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn add_bias_broadcasts() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 2], &[1.0, 1.0]), false);
        let b = tape.input(t(&[2], &[1.0, 2.0]), true);
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_node_delegates_to_kernel() {
        let mut r = Prng::new(1);
        let a = Tensor::randn(&mut r, &[3, 4], 0.0, 1.0).unwrap();
        let b = Tensor::randn(&mut r, &[4, 2], 0.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let ia = tape.input(a.clone(), true);
        let ib = tape.input(b.clone(), true);
        let c = tape.matmul(ia, ib).unwrap();
        assert_eq!(tape.value(c), &kernels::matmul(&a, &b).unwrap());
    }

    #[test]
    fn sum_of_weights_has_unit_gradient() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::randn(&mut Prng::new(2), &[3, 2], 0.0, 1.0).unwrap(), true);
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::zeros(&[2]).unwrap(), true);
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn inputs_reference_earlier_nodes() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2]).unwrap(), true);
        let y = tape.relu(x).unwrap();
        let z = tape.matmul(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        for (i, node) in tape.nodes().iter().enumerate() {
            assert_eq!(node.id, i);
            assert!(node.inputs.iter().all(|&j| j < i));
        }
        assert!(tape.relu(s + 10).is_err());
    }

    #[test]
    fn gather_backward_scatters() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]), true);
        let g = tape.gather_rows(x, &[2, 2, 0]).unwrap();
        let s = tape.sum(g).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn trimmed_mean_value_and_grad() {
        let mut tape = Tape::new();
        let l = tape.input(t(&[4], &[1., 2., 3., 4.]), true);
        let m = tape.trimmed_mean(l, &[3, 2]).unwrap();
        assert_eq!(tape.value(m).data(), &[3.5]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(l).unwrap().data(), &[0., 0., 0.5, 0.5]);
    }

    #[test]
    fn trimmed_mean_rejects_bad_selection() {
        let mut tape = Tape::new();
        let l = tape.input(t(&[2], &[1., 2.]), true);
        assert!(tape.trimmed_mean(l, &[]).is_err());
        assert!(tape.trimmed_mean(l, &[1, 1]).is_err());
        assert!(matches!(tape.trimmed_mean(l, &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn maxpool_and_reshape_backward() {
        let ramp: Vec<f64> = (0..16).map(f64::from).collect();
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 1, 4, 4], &ramp), true);
        let p = tape.maxpool2(x).unwrap();
        let f = tape.reshape(p, &[1, 4]).unwrap();
        let s = tape.sum(f).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap().data();
        let hot: Vec<usize> = (0..16).filter(|&i| g[i] == 1.0).collect();
        assert_eq!(hot, vec![5, 7, 13, 15]);
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[2], &[1., 2.]), true);
        let b = tape.input(t(&[3], &[1., 2., 3.]), true);
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[0.0; 3]);
    }
}
