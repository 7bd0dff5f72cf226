use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::{kernels, Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero-pad so the output keeps the input's height and width.
    Same,
    Valid,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad_same: bool,
    },
    ConvTranspose {
        input: Var,
        weight: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Jaccard {
        prob: Var,
        target: Var,
        eps: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
    Project {
        input: Var,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose { .. } => "transposed_conv2x2",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Concat(..) => "concat_channels",
            Op::Jaccard { .. } => "jaccard_distance",
            Op::WeightedSum(_) => "weighted_sum",
            Op::Project { .. } => "project",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Test hooks that corrupt an adjoint, used to prove the gradient checker
/// actually detects broken backward rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the conv2d weight gradient by 1.01.
    ConvWeightGrad,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the tape is already topologically sorted and backward is a reverse scan.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf) || value.all_finite() || !self.inputs_finite(&op),
            "{} produced non-finite output",
            op.name()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op<T>) -> bool {
        let check = |v: &Var| self.nodes[v.0].value.all_finite();
        match op {
            Op::Leaf => true,
            Op::Conv2d { input, weight, bias, .. } => {
                check(input) && check(weight) && bias.as_ref().is_none_or(check)
            }
            Op::ConvTranspose { input, weight } => check(input) && check(weight),
            Op::MaxPool { input, .. } | Op::Relu(input) | Op::Sigmoid(input) => check(input),
            Op::Add(a, b) | Op::Concat(a, b) => check(a) && check(b),
            Op::Jaccard { prob, target, .. } => check(prob) && check(target),
            Op::WeightedSum(terms) => terms.iter().all(|(v, _)| check(v)),
            Op::Project { input, .. } => check(input),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input: no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter or a tensor under gradient check).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves the gradient out of a leaf as a standalone tensor.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        let node = &mut self.nodes[v.0].value;
        let shape = node.shape();
        let grad = node.grad.take()?;
        Tensor::from_vec(shape, grad).ok()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let pad_same = padding == Padding::Same;
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            pad_same,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad_same,
            },
            rg,
        ))
    }

    pub fn conv_transpose2x2(&mut self, input: Var, weight: Var) -> Result<Var> {
        let out = kernels::conv_transpose2x2(self.value(input), self.value(weight))?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(out, Op::ConvTranspose { input, weight }, rg))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2x2(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = kernels::relu(self.value(input));
        let rg = self.rg(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = kernels::sigmoid(self.value(input));
        let rg = self.rg(input);
        self.push(out, Op::Sigmoid(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// Soft Jaccard distance between `prob` and a constant `target`, summed
    /// jointly over batch and pixels. `eps` is added to the denominator.
    pub fn jaccard_distance(&mut self, prob: Var, target: Var, eps: f64) -> Result<Var> {
        let (p, t) = (self.value(prob), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape(format!(
                "jaccard loss needs matching shapes, got prob {} and target {}",
                p.shape(),
                t.shape()
            )));
        }
        if !p.all_finite() || !t.all_finite() {
            return Err(Error::NonFinite("jaccard loss input contains NaN or Inf".into()));
        }
        if self.rg(target) {
            return Err(Error::InvalidArgument(
                "jaccard target must be a constant input".into(),
            ));
        }
        let (loss, _) = kernels::jaccard_distance_with_grad(t.data(), p.data(), eps);
        let rg = self.rg(prob);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::Jaccard { prob, target, eps },
            rg,
        ))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("weighted sum of zero terms".into()));
        }
        let mut acc = 0.0;
        for &(v, w) in terms {
            acc += w * self.value(v).item()?.to_f64_lossy();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(T::from_f64(acc)), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Inner product of a node with a constant tensor of the same size.
    pub fn project(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.numel() {
            return Err(Error::shape(format!(
                "projection weights of length {} for tensor {}",
                weights.len(),
                x.shape()
            )));
        }
        let acc: f64 = x
            .data()
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a.to_f64_lossy() * b.to_f64_lossy())
            .sum();
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(T::from_f64(acc)), Op::Project { input, weights }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        self.project(input, vec![T::one(); n])
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate
    /// additively across multiple uses of a node and are stored on the
    /// differentiable leaves; any gradients from an earlier sweep are
    /// replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.value(loss).shape();
        if loss_shape.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {loss_shape}"
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let contributions = self.adjoint(idx, &g)?;
            for (var, contrib) in contributions {
                if !self.rg(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(existing) => {
                        for (a, &b) in existing.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.set_grad(g.into_data())?;
            }
        }
        Ok(())
    }

    fn adjoint(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                pad_same,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    pad_same,
                    self.rg(input),
                )?;
                let mut dw = grads.weight;
                if self.fault == Some(Fault::ConvWeightGrad) {
                    dw = dw.map(|v| v * T::from_f64(1.01));
                }
                if let Some(din) = grads.input {
                    out.push((input, din));
                }
                out.push((weight, dw));
                if let Some(b) = bias {
                    out.push((b, grads.bias));
                }
            }
            &Op::ConvTranspose { input, weight } => {
                let (din, dw) = kernels::conv_transpose2x2_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    self.rg(input),
                )?;
                if let Some(din) = din {
                    out.push((input, din));
                }
                out.push((weight, dw));
            }
            Op::MaxPool { input, argmax } => {
                let shape = self.value(*input).shape();
                out.push((*input, kernels::maxpool2x2_backward(shape, argmax, g)));
            }
            &Op::Relu(input) => {
                let x = self.value(input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((input, Tensor::from_vec(x.shape(), data)?));
            }
            &Op::Sigmoid(input) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                    .collect();
                out.push((input, Tensor::from_vec(y.shape(), data)?));
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Concat(a, b) => {
                let ca = self.value(a).shape().c();
                let (da, db) = kernels::split_channels(g, ca)?;
                out.push((a, da));
                out.push((b, db));
            }
            &Op::Jaccard { prob, target, eps } => {
                let p = self.value(prob);
                let (_, dp) =
                    kernels::jaccard_distance_with_grad(self.value(target).data(), p.data(), eps);
                let scale = g.item()?;
                let data = dp.into_iter().map(|v| v * scale).collect();
                out.push((prob, Tensor::from_vec(p.shape(), data)?));
            }
            Op::WeightedSum(terms) => {
                let gv = g.item()?;
                for &(v, w) in terms {
                    out.push((v, Tensor::scalar(gv * T::from_f64(w))));
                }
            }
            Op::Project { input, weights } => {
                let gv = g.item()?;
                let shape = self.value(*input).shape();
                let data = weights.iter().map(|&w| w * gv).collect();
                out.push((*input, Tensor::from_vec(shape, data)?));
            }
        }
        Ok(out)
    }

    /// Hash of every piecewise-linear branch decision on the tape (ReLU sign
    /// pattern and max-pool winners). Two evaluations with equal signatures
    /// lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => {
                    for &v in self.value(*input).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Smallest |pre-activation| over all ReLU inputs on the tape.
    pub fn min_relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(input) => Some(input),
                _ => None,
            })
            .flat_map(|v| self.value(v).data().iter().map(|x| x.to_f64_lossy().abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(vec_t(&[0.5, -2.0, 3.0]));
        let loss = g.sum(w).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_gradient_masks_non_positive() {
        let mut g = Graph::new();
        let w = g.leaf(vec_t(&[-1.0, 2.0]));
        let r = g.relu(w);
        let loss = g.sum(r).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.0, 1.0]);

        let mut g = Graph::new();
        let w = g.leaf(vec_t(&[0.0]));
        let r = g.relu(w);
        let loss = g.sum(r).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec_t(&[0.0]));
        let s = g.sigmoid(x);
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn add_passes_gradient_to_both() {
        let mut g = Graph::new();
        let a = g.leaf(vec_t(&[1.0, 2.0]));
        let b = g.leaf(vec_t(&[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let loss = g.project(c, vec![2.0, -1.0]).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, -1.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0, -1.0]);
    }

    #[test]
    fn reuse_accumulates_branch_adjoints() {
        // y = relu(x) + sigmoid(x): the shared x must receive both branches.
        let x0 = vec_t(&[0.7, -0.4, 1.3]);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let r = g.relu(x);
        let s = g.sigmoid(x);
        let y = g.add(r, s).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let shared = g.grad(x).unwrap().to_vec();

        // duplicated-graph oracle: two independent copies of x
        let mut g = Graph::new();
        let x1 = g.leaf(x0.clone());
        let x2 = g.leaf(x0);
        let r = g.relu(x1);
        let s = g.sigmoid(x2);
        let y = g.add(r, s).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let split: Vec<f64> = g
            .grad(x1)
            .unwrap()
            .iter()
            .zip(g.grad(x2).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(shared, split);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(vec_t(&[1.0, 2.0]));
        let r = g.relu(w);
        assert!(matches!(g.backward(r), Err(Error::Shape(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.input(vec_t(&[1.0, 2.0]));
        let w = g.leaf(vec_t(&[1.0, 1.0]));
        let y = g.add(c, w).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(w).is_some());
    }

    #[test]
    fn jaccard_rejects_nan() {
        let mut g = Graph::new();
        let p = g.leaf(vec_t(&[f64::NAN, 0.5]));
        let t = g.input(vec_t(&[1.0, 0.0]));
        assert!(matches!(g.jaccard_distance(p, t, 0.0), Err(Error::NonFinite(_))));
    }
}
