//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations are appended to a [`Tape`] in evaluation order, so the tape is
//! already topologically sorted. [`Tape::backward`] walks it once from the
//! loss node down to index 0 and accumulates every contribution in tape order.
//! Leaves created with [`Tape::constant`] never receive gradients, and nodes
//! that only depend on constants are skipped entirely.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    L1 {
        params: Vec<Var>,
        lambda: f64,
    },
    Sum(Vec<Var>),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Summary of one backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardReport {
    /// Nodes whose gradient was propagated to their operands.
    pub visited: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient (input data, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. `v`; zeros if `v` was not reached.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let t = &self.nodes[v.0].value;
        t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let [c, h, w] = geom.output_shape();
        let mut out = vec![0.0; c * h * w];
        kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data(), &mut out);
        let rg = self.needs(input) || self.needs(kernel);
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(t, Op::Conv2d { input, kernel, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.clear_grad();
        kernels::relu_inplace(t.data_mut());
        let rg = self.needs(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// `[c, h, w] -> [c]` by per-channel mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        if shape.len() != 3 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                expected: vec![0, 0, 0],
                found: shape.to_vec(),
            });
        }
        let pooled = kernels::global_avg_pool(self.value(x).data(), shape[0]);
        let rg = self.needs(x);
        Ok(self.push(Tensor::from_vec(pooled), Op::GlobalAvgPool(x), rg))
    }

    /// `x[k] -> bias[n] + x · weight[k, n]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let k = self.value(input).len();
        let ws = self.value(weight).shape();
        let n = self.value(bias).len();
        if ws != [k, n] {
            return Err(Error::Shape {
                op: "dense",
                expected: vec![k, n],
                found: ws.to_vec(),
            });
        }
        let mut out = vec![0.0; n];
        kernels::dense_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
        );
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(Tensor::from_vec(out), Op::Dense { input, weight, bias }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits).data(), label)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// `lambda * sum |w|` over all elements of `params`.
    pub fn l1_penalty(&mut self, params: &[Var], lambda: f64) -> Result<Var> {
        let value = kernels::l1_penalty(params.iter().map(|&p| self.value(p).data()), lambda)?;
        let rg = params.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::scalar(value),
            Op::L1 {
                params: params.to_vec(),
                lambda,
            },
            rg,
        ))
    }

    /// Elementwise sum of same-shaped operands.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("sum of zero operands"))?;
        let mut acc = self.value(first).clone();
        acc.clear_grad();
        for &x in &xs[1..] {
            let t = self.value(x);
            if t.shape() != acc.shape() {
                return Err(Error::Shape {
                    op: "sum",
                    expected: acc.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        let rg = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(acc, Op::Sum(xs.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.sum(&[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut t = self.value(x).clone();
        t.clear_grad();
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.needs(x);
        self.push(t, Op::Scale(x, factor), rg)
    }

    /// Back-propagates from the single-element node `loss`.
    ///
    /// Gradients from a previous pass are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                expected: vec![1],
                found: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            visited += 1;
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.clear_grad();
            if node.requires_grad {
                if let Some(g) = g {
                    node.value.set_grad(g)?;
                }
            }
        }
        Ok(BackwardReport { visited })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let x = nodes[input.0].value.data();
                let k = nodes[kernel.0].value.data();
                // Two disjoint slots: take one buffer out while filling the other.
                let mut gk = slot(nodes, grads, *kernel).map(std::mem::take);
                let gi = slot(nodes, grads, *input);
                kernels::conv2d_backward(
                    geom,
                    x,
                    k,
                    g,
                    gi.map(|v| v.as_mut_slice()),
                    gk.as_deref_mut(),
                );
                if let Some(gk) = gk {
                    grads[kernel.0] = Some(gk);
                }
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = nodes[x.0].value.shape();
                let hw = shape[1] * shape[2];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (c, chunk) in gx.chunks_exact_mut(hw).enumerate() {
                        let share = g[c] / hw as f64;
                        chunk.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = nodes[input.0].value.data();
                let w = nodes[weight.0].value.data();
                let n = g.len();
                if let Some(gx) = slot(nodes, grads, *input) {
                    for (k, d) in gx.iter_mut().enumerate() {
                        let row = &w[k * n..(k + 1) * n];
                        *d += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(gw) = slot(nodes, grads, *weight) {
                    for (k, &xk) in x.iter().enumerate() {
                        for (d, &gc) in gw[k * n..(k + 1) * n].iter_mut().zip(g) {
                            *d += xk * gc;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for (d, &gc) in gb.iter_mut().zip(g) {
                        *d += gc;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (c, (d, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let target = if c == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (p - target);
                    }
                }
            }
            Op::L1 { params, lambda } => {
                for &p in params {
                    let w = nodes[p.0].value.data();
                    if let Some(gp) = slot(nodes, grads, p) {
                        for (d, &wv) in gp.iter_mut().zip(w) {
                            *d += g[0] * lambda * kernels::sign(wv);
                        }
                    }
                }
            }
            Op::Sum(xs) => {
                for &x in xs {
                    if let Some(gx) = slot(nodes, grads, x) {
                        for (d, &gv) in gx.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, &gv) in gx.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
        }
    }
}

/// Lazily allocates an operand's gradient buffer, but only for operands that need one.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(Tensor::new(vec![1, 4, 4], data.clone()).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn zero_input_conv() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 5, 5]));
        let kd: Vec<f64> = (0..54).map(|i| (i as f64).sin()).collect();
        let k = tape.leaf(Tensor::new(vec![3, 2, 3, 3], kd).unwrap());
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_parameter_gets_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::from_vec(vec![3.0]));
        let s = tape.l1_penalty(&[a], 1.0).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a), vec![1.0, 1.0]);
        assert_eq!(tape.grad(unused), vec![0.0]);
    }

    #[test]
    fn each_node_visited_once() {
        // loss = sum(relu(x), relu(x)) reuses one node twice.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -1.0, 2.0]));
        let r = tape.relu(x);
        let s = tape.sum(&[r, r]).unwrap();
        let l = tape.l1_penalty(&[s], 1.0).unwrap();
        let report = tape.backward(l).unwrap();
        assert_eq!(report.visited, 4);
        assert_eq!(tape.grad(x), vec![2.0, 0.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let w = tape.leaf(Tensor::new(vec![2, 1], vec![0.5, -0.5]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![0.1]));
        let y = tape.dense(x, w, b).unwrap();
        let l = tape.l1_penalty(&[y], 1.0).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.value(x).grad().is_none());
        // y = 0.5 - 1.0 + 0.1 = -0.4 < 0, so d|y|/dw = -x
        assert_eq!(tape.grad(w), vec![-1.0, -2.0]);
        assert_eq!(tape.grad(b), vec![-1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            tape.softmax_cross_entropy(x, 2),
            Err(Error::ClassOutOfRange { index: 2, count: 2 })
        ));
    }
}
