//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! Every operation appends a node holding its output value and enough
//! context to run its backward rule. [`Tape::backward`] walks the nodes in
//! reverse, visiting each at most once, and sums gradients into the leaves
//! that were registered with `requires_grad`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::kernels::{self, ConvGeom, Padding};

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
        weights: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    SubChannel {
        input: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Sum {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs_at: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Softmax outputs kept for the cross-entropy backward rule.
    probs: Vec<Vec<T>>,
    /// Accumulated leaf gradients, indexed like `nodes`.
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            probs: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Registers a copy of `t`; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Takes ownership of `t` without copying.
    pub fn leaf_owned(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, needs)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    /// Gradient accumulated into a leaf by every `backward` call so far.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Sums this tape's gradient for `v` into `target.grad`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weights: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.shape(input),
            self.shape(weights),
            self.shape(bias),
            stride,
            padding,
        )?;
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weights),
            self.value(bias),
            &geom,
        );
        let needs = [input, weights, bias]
            .iter()
            .any(|&v| self.requires_grad(v));
        Ok(self.push(
            geom.out_shape(),
            out,
            Op::Conv2d {
                input,
                weights,
                bias,
                geom,
            },
            needs,
        ))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let &[n, d] = self.shape(input) else {
            return Err(Error::Rank {
                op: "dense",
                expected: 2,
                got: self.shape(input).to_vec(),
            });
        };
        let &[wd, k] = self.shape(weights) else {
            return Err(Error::Rank {
                op: "dense",
                expected: 2,
                got: self.shape(weights).to_vec(),
            });
        };
        if wd != d {
            return Err(Error::Shape {
                op: "dense",
                dim: "inner",
                expected: wd,
                got: d,
            });
        }
        if self.shape(bias) != [k] {
            return Err(Error::Shape {
                op: "dense",
                dim: "bias",
                expected: k,
                got: self.shape(bias).iter().product(),
            });
        }
        let out = kernels::dense_forward(
            self.value(input),
            self.value(weights),
            self.value(bias),
            n,
            d,
            k,
        );
        let needs = [input, weights, bias]
            .iter()
            .any(|&v| self.requires_grad(v));
        Ok(self.push(
            vec![n, k],
            out,
            Op::Dense {
                input,
                weights,
                bias,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self
            .value(input)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let (shape, needs) = (self.shape(input).to_vec(), self.requires_grad(input));
        self.push(shape, out, Op::Relu { input }, needs)
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let &[n, h, w, c] = self.shape(input) else {
            return Err(Error::Rank {
                op: "maxpool2",
                expected: 4,
                got: self.shape(input).to_vec(),
            });
        };
        if h % 2 != 0 || h < 2 {
            return Err(Error::Shape {
                op: "maxpool2",
                dim: "height",
                expected: h + 1,
                got: h,
            });
        }
        if w % 2 != 0 || w < 2 {
            return Err(Error::Shape {
                op: "maxpool2",
                dim: "width",
                expected: w + 1,
                got: w,
            });
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(input), n, h, w, c);
        let needs = self.requires_grad(input);
        Ok(self.push(
            vec![n, h / 2, w / 2, c],
            out,
            Op::MaxPool2 { input, argmax },
            needs,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                dim: "numel",
                expected: self.value(input).len(),
                got: numel,
            });
        }
        let (value, needs) = (self.value(input).to_vec(), self.requires_grad(input));
        Ok(self.push(shape, value, Op::Reshape { input }, needs))
    }

    /// Collapses everything but the leading (batch) dimension.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(input, vec![n, rest])
    }

    /// Subtracts a constant per-channel vector along the last dimension.
    pub fn sub_channel(&mut self, input: Var, means: &[T]) -> Result<Var> {
        let c = *self.shape(input).last().unwrap();
        if means.len() != c {
            return Err(Error::Shape {
                op: "sub_channel",
                dim: "channels",
                expected: c,
                got: means.len(),
            });
        }
        let out = self
            .value(input)
            .chunks_exact(c)
            .flat_map(|px| px.iter().zip(means).map(|(&v, &m)| v - m))
            .collect();
        let (shape, needs) = (self.shape(input).to_vec(), self.requires_grad(input));
        Ok(self.push(shape, out, Op::SubChannel { input }, needs))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::Shape {
                op: "mul",
                dim: "numel",
                expected: self.value(lhs).len(),
                got: self.value(rhs).len(),
            });
        }
        let out = self
            .value(lhs)
            .iter()
            .zip(self.value(rhs))
            .map(|(&a, &b)| a * b)
            .collect();
        let needs = self.requires_grad(lhs) || self.requires_grad(rhs);
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(shape, out, Op::Mul { lhs, rhs }, needs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().copied().sum();
        let needs = self.requires_grad(input);
        self.push(vec![1], vec![s], Op::Sum { input }, needs)
    }

    /// Mean softmax cross-entropy over the batch; `logits` is `[N, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, k] = self.shape(logits) else {
            return Err(Error::Rank {
                op: "softmax_cross_entropy",
                expected: 2,
                got: self.shape(logits).to_vec(),
            });
        };
        if labels.len() != n {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                dim: "batch",
                expected: n,
                got: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels, k);
        self.probs.push(probs);
        let needs = self.requires_grad(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs_at: self.probs.len() - 1,
        };
        Ok(self.push(vec![1], vec![loss], op, needs))
    }

    /// Propagates d(loss)/d(node) back to every `requires_grad` leaf and
    /// adds it to that leaf's accumulated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                match &mut self.grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (var, contribution) in self.backward_rule(idx, &g) {
                match &mut grads[var.0] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn backward_rule(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let needs = |v: Var| self.requires_grad(v);
        let mut out = Vec::with_capacity(3);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weights,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weights),
                    geom,
                    g,
                    [needs(*input), needs(*weights), needs(*bias)],
                );
                out.extend(grads.input.map(|d| (*input, d)));
                out.extend(grads.weights.map(|d| (*weights, d)));
                out.extend(grads.bias.map(|d| (*bias, d)));
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let (n, d) = (self.shape(*input)[0], self.shape(*input)[1]);
                let k = self.shape(*weights)[1];
                let grads = kernels::dense_backward(
                    self.value(*input),
                    self.value(*weights),
                    n,
                    d,
                    k,
                    g,
                    [needs(*input), needs(*weights), needs(*bias)],
                );
                out.extend(grads.input.map(|d| (*input, d)));
                out.extend(grads.weights.map(|d| (*weights, d)));
                out.extend(grads.bias.map(|d| (*bias, d)));
            }
            Op::Relu { input } => {
                let d = self
                    .value(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() })
                    .collect();
                out.push((*input, d));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).len()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    d[src] += gi;
                }
                out.push((*input, d));
            }
            Op::Reshape { input } | Op::SubChannel { input } => out.push((*input, g.to_vec())),
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(*lhs), self.value(*rhs));
                if needs(*lhs) {
                    out.push((*lhs, b.iter().zip(g).map(|(&bv, &gi)| bv * gi).collect()));
                }
                if needs(*rhs) {
                    out.push((*rhs, a.iter().zip(g).map(|(&av, &gi)| av * gi).collect()));
                }
            }
            Op::Sum { input } => out.push((*input, vec![g[0]; self.value(*input).len()])),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs_at,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let mut d = self.probs[*probs_at].clone();
                for (row, &label) in d.chunks_exact_mut(k).zip(labels) {
                    row[label] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                out.push((*logits, d));
            }
        }
        out.retain(|(v, _)| needs(*v));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec())
            .unwrap()
            .with_requires_grad(true)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_doubles_leaf_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn relu_values_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        // zero input gets zero gradient
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[2], &[-1.0, 2.0]));
        let y = tape.relu(x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[2], &[1.0, 2.0]));
        assert_eq!(tape.backward(x), Err(Error::NotScalar(vec![2])));
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.dense(x, w, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
        assert!(tape.grad(b).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn dense_affine_example() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(&Tensor::new(vec![2], vec![10.0, 10.0]).unwrap());
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[11.0, 12.0]);
    }

    #[test]
    fn dense_shape_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 3]));
        let w = tape.leaf(&Tensor::zeros(&[2, 2]));
        let b = tape.leaf(&Tensor::zeros(&[2]));
        assert!(matches!(
            tape.dense(x, w, b),
            Err(Error::Shape { dim: "inner", .. })
        ));
    }

    #[test]
    fn maxpool_rejects_odd_sizes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 3, 4, 1]));
        assert!(matches!(
            tape.maxpool2(x),
            Err(Error::Shape { dim: "height", .. })
        ));
        let x = tape.leaf(&Tensor::zeros(&[1, 4, 5, 1]));
        assert!(matches!(
            tape.maxpool2(x),
            Err(Error::Shape { dim: "width", .. })
        ));
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y), &[4.0]);
        let c = tape.leaf(&Tensor::from_fn(&[2, 4, 6, 3], |_| 0.75));
        let y = tape.maxpool2(c).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 3, 3]);
        assert!(tape.value(y).iter().all(|&v| v == 0.75));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&Tensor::zeros(&[1, 10]));
        let loss = tape.softmax_cross_entropy(z, &[3]).unwrap();
        assert!((tape.value(loss)[0] - 10f64.ln()).abs() < 1e-12);

        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(z, &[0]).unwrap();
        let v = tape.value(loss)[0];
        assert!(v.is_finite() && v.abs() < 1e-6);

        let z = tape.leaf(&Tensor::zeros(&[2, 3]));
        assert_eq!(
            tape.softmax_cross_entropy(z, &[0, 3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        );
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::from_fn(&[1, 5, 5, 2], |i| i as f32 * 0.1 - 1.0));
        let w = tape.leaf(&Tensor::zeros(&[3, 3, 2, 4]));
        let b = tape.leaf(&Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
        assert_eq!(tape.shape(y), &[1, 5, 5, 4]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_identity_conv_is_exact() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..2 * 3 * 4 * 3)
            .map(|i| ((i * 37) % 101) as f32 / 100.0)
            .collect();
        let x = tape.leaf(&Tensor::new(vec![2, 3, 4, 3], data.clone()).unwrap());
        let w = tape.leaf(&Tensor::from_fn(&[1, 1, 3, 3], |i| {
            if i % 4 == 0 {
                1.0
            } else {
                0.0
            }
        }));
        let b = tape.leaf(&Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
        let y = tape.relu(y);
        assert_eq!(tape.value(y), &data[..]);
    }
}
