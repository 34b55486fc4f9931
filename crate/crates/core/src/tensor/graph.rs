use super::kernels;
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use crate::VOID;

/// Probabilities are clamped to at least this value before `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    /// `ln(1 + x)`, defined for `x > -1`.
    Log1p,
    /// Square root; the derivative at exactly zero is taken as zero.
    Sqrt,
    Square,
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Log1p => "log1p",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Square => "square",
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Unary {
        x: NodeId,
        kind: UnaryKind,
    },
    Softmax {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Upsample {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    MeanPerItem {
        x: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    CrossEntropy {
        probs: NodeId,
        /// Input of the softmax that produced `probs`, if any; the gradient
        /// then goes straight to the logits as `p - onehot`.
        logits: Option<NodeId>,
        labels: Vec<u8>,
        counted: usize,
    },
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Recording tape for reverse-mode differentiation. Nodes are appended in
/// evaluation order, so the node list is always a topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Disables the per-op NaN/Inf scan.
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn push_raw(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = self.requires(inputs);
        Ok(self.push_raw(op, value, rg))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let value = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push("conv2d", Op::Conv2d { x, w, b, stride, pad }, value, &[x, w, b])
    }

    pub fn unary(&mut self, x: NodeId, kind: UnaryKind) -> Result<NodeId> {
        let input = self.value(x);
        let value = match kind {
            UnaryKind::Relu => input.map(|v| v.max(T::zero())),
            UnaryKind::Sigmoid => input.map(sigmoid),
            UnaryKind::Log1p => {
                if let Some(bad) = input.data().iter().find(|&&v| v <= -T::one()) {
                    return Err(Error::Domain {
                        op: "log1p",
                        detail: format!("input {bad} is not greater than -1"),
                    });
                }
                input.map(|v| v.ln_1p())
            }
            UnaryKind::Sqrt => {
                if let Some(bad) = input.data().iter().find(|&&v| v < T::zero()) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("negative input {bad}"),
                    });
                }
                input.map(|v| v.sqrt())
            }
            UnaryKind::Square => input.map(|v| v * v),
        };
        self.push(kind.name(), Op::Unary { x, kind }, value, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn log1p(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Log1p)
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let value = kernels::softmax_channels(self.value(x))?;
        self.push("softmax_channels", Op::Softmax { x }, value, &[x])
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (value, argmax) = kernels::maxpool2_forward(self.value(x))?;
        self.push("maxpool2", Op::MaxPool { x, argmax }, value, &[x])
    }

    pub fn upsample_bilinear2x(&mut self, x: NodeId) -> Result<NodeId> {
        let value = kernels::upsample2x_forward(self.value(x))?;
        self.push("upsample_bilinear2x", Op::Upsample { x }, value, &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape().dims(), vb.shape().dims()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add { a, b }, value, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub { a, b }, value, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", Op::Mul { a, b }, value, &[a, b])
    }

    /// Mean over everything but the batch axis: `B x C x H x W -> B x 1 x 1 x 1`.
    pub fn mean_per_item(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let len = v.shape().item_len();
        let inv = T::one() / T::from_usize(len.max(1)).unwrap();
        let data = v
            .data()
            .chunks(len.max(1))
            .map(|c| c.iter().fold(T::zero(), |a, &b| a + b) * inv)
            .collect();
        let value = Tensor::from_vec([v.shape().n(), 1, 1, 1], data)?;
        self.push("mean_per_item", Op::MeanPerItem { x }, value, &[x])
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = T::from_usize(v.len().max(1)).unwrap();
        let value = Tensor::scalar(v.data().iter().fold(T::zero(), |a, &b| a + b) / n);
        self.push("mean_all", Op::MeanAll { x }, value, &[x])
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let value = Tensor::scalar(v.data().iter().fold(T::zero(), |a, &b| a + b));
        self.push("sum_all", Op::SumAll { x }, value, &[x])
    }

    /// Mean of `-ln p[true class]` over pixels whose label is not [`VOID`].
    /// `labels` holds one entry per `(batch, y, x)`. Returns the loss node and
    /// the number of counted pixels; with zero counted pixels the loss is 0.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[u8]) -> Result<(NodeId, usize)> {
        let p = self.value(probs);
        let [n, c, h, w] = p.shape().0;
        if labels.len() != n * h * w {
            return Err(Error::shape("cross_entropy labels", p.shape().dims(), &[labels.len()]));
        }
        let plane = h * w;
        let floor = T::from_f64_lossy(PROB_FLOOR);
        let mut total = T::zero();
        let mut counted = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            if label == VOID {
                continue;
            }
            if label as usize >= c {
                return Err(Error::Domain {
                    op: "segmentation_loss",
                    detail: format!("label {label} outside 0..{c} and not void"),
                });
            }
            let (b, px) = (i / plane, i % plane);
            let prob = p.data()[(b * c + label as usize) * plane + px];
            total = total - prob.max(floor).ln();
            counted += 1;
        }
        let loss = if counted == 0 {
            T::zero()
        } else {
            total / T::from_usize(counted).unwrap()
        };
        let logits = match self.nodes[probs.0].op {
            Op::Softmax { x } => Some(x),
            _ => None,
        };
        let id = self.push(
            "segmentation_loss",
            Op::CrossEntropy {
                probs,
                logits,
                labels: labels.to_vec(),
                counted,
            },
            Tensor::scalar(loss),
            &[probs],
        )?;
        Ok((id, counted))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out; every gradient-tracked leaf gets an entry, zero if the
    /// loss does not depend on it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != Shape::scalar() {
            return Err(Error::shape("backward (loss must be scalar)", shape.dims(), &[1, 1, 1, 1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (target, g) in self.local_grads(node, &dy)? {
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let g = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    self.value(*b).shape(),
                    *stride,
                    *pad,
                    dy,
                    rg(*x),
                )?;
                if let Some(dx) = g.input {
                    out.push((*x, dx));
                }
                if rg(*w) {
                    out.push((*w, g.weight));
                }
                if rg(*b) {
                    out.push((*b, g.bias));
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x);
                let yv = &node.value;
                let data: Vec<T> = match kind {
                    UnaryKind::Relu => zip3(xv, yv, dy, |x, _, g| if x > T::zero() { g } else { T::zero() }),
                    UnaryKind::Sigmoid => zip3(xv, yv, dy, |_, y, g| g * y * (T::one() - y)),
                    UnaryKind::Log1p => zip3(xv, yv, dy, |x, _, g| g / (T::one() + x)),
                    UnaryKind::Sqrt => zip3(xv, yv, dy, |_, y, g| {
                        if y > T::zero() {
                            g / (y + y)
                        } else {
                            T::zero()
                        }
                    }),
                    UnaryKind::Square => zip3(xv, yv, dy, |x, _, g| g * (x + x)),
                };
                out.push((*x, Tensor::from_vec(xv.shape(), data)?));
            }
            Op::Softmax { x } => out.push((*x, kernels::softmax_backward(&node.value, dy))),
            Op::MaxPool { x, argmax } => {
                out.push((*x, kernels::maxpool2_backward(self.value(*x).shape(), argmax, dy)))
            }
            Op::Upsample { x } => {
                out.push((*x, kernels::upsample2x_backward(self.value(*x).shape(), dy)))
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    out.push((*a, dy.clone()));
                }
                if rg(*b) {
                    out.push((*b, dy.clone()));
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    out.push((*a, dy.clone()));
                }
                if rg(*b) {
                    out.push((*b, dy.map(|v| -v)));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if rg(*a) {
                    let d = vb.data().iter().zip(dy.data()).map(|(&y, &g)| y * g).collect();
                    out.push((*a, Tensor::from_vec(va.shape(), d)?));
                }
                if rg(*b) {
                    let d = va.data().iter().zip(dy.data()).map(|(&x, &g)| x * g).collect();
                    out.push((*b, Tensor::from_vec(vb.shape(), d)?));
                }
            }
            Op::MeanPerItem { x } => {
                let shape = self.value(*x).shape();
                let len = shape.item_len().max(1);
                let inv = T::one() / T::from_usize(len).unwrap();
                let mut d = Tensor::zeros(shape);
                for (chunk, &g) in d.data_mut().chunks_mut(len).zip(dy.data()) {
                    chunk.fill(g * inv);
                }
                out.push((*x, d));
            }
            Op::MeanAll { x } => {
                let shape = self.value(*x).shape();
                let g = dy.item() / T::from_usize(shape.numel().max(1)).unwrap();
                out.push((*x, Tensor::full(shape, g)));
            }
            Op::SumAll { x } => out.push((*x, Tensor::full(self.value(*x).shape(), dy.item()))),
            Op::CrossEntropy {
                probs,
                logits,
                labels,
                counted,
            } => {
                let p = self.value(*probs);
                let [_, c, h, w] = p.shape().0;
                let plane = h * w;
                let scale = if *counted > 0 {
                    dy.item() / T::from_usize(*counted).unwrap()
                } else {
                    T::zero()
                };
                let counted_pixels = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l != VOID && *counted > 0)
                    .map(|(i, &l)| (i / plane, i % plane, l as usize));
                let mut d = Tensor::zeros(p.shape());
                match logits {
                    Some(x) => {
                        // Fused softmax + log loss: stays informative when
                        // the true-class probability underflows the floor.
                        for (b, px, label) in counted_pixels {
                            for k in 0..c {
                                let idx = (b * c + k) * plane + px;
                                let target = if k == label { T::one() } else { T::zero() };
                                d.data_mut()[idx] = scale * (p.data()[idx] - target);
                            }
                        }
                        out.push((*x, d));
                    }
                    None => {
                        let floor = T::from_f64_lossy(PROB_FLOOR);
                        for (b, px, label) in counted_pixels {
                            let idx = (b * c + label) * plane + px;
                            let prob = p.data()[idx];
                            if prob > floor {
                                d.data_mut()[idx] = -scale / prob;
                            }
                        }
                        out.push((*probs, d));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn zip3<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T, T) -> T) -> Vec<T> {
    x.data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&a, &b), &c)| f(a, b, c))
        .collect()
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_tensor(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn unary_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec_tensor(&[-2.0, 0.0, 3.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);

        let z = g.constant(vec_tensor(&[0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);

        let h = g.constant(vec_tensor(&[0.5]));
        let l = g.log1p(h).unwrap();
        assert!((g.value(l).data()[0] - 0.405465).abs() < 1e-6);
    }

    #[test]
    fn log1p_domain_fault() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec_tensor(&[0.3, -1.0]));
        assert!(matches!(g.log1p(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.param(vec_tensor(&[1.0, -2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(vec_tensor(&[1.0, 2.0]));
        let unused = g.param(vec_tensor(&[5.0, 6.0, 7.0]));
        let loss = g.sum_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([2, 1, 2, 2], 3.0));
        let loss = g.mean_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0 / 8.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.param(vec_tensor(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_values_are_detected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec_tensor(&[f64::MAX]));
        assert!(matches!(g.mul(x, x), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x*x) + sum(3x): d/dx = 2x + 3
        let xs = [0.5, -1.5, 2.0];
        let mut g = Graph::<f64>::new();
        let x = g.param(vec_tensor(&xs));
        let three = g.constant(vec_tensor(&[3.0; 3]));
        let sq = g.mul(x, x).unwrap();
        let f = g.sum_all(sq).unwrap();
        let lin = g.mul(three, x).unwrap();
        let h = g.sum_all(lin).unwrap();
        let loss = g.add(f, h).unwrap();
        let grads = g.backward(loss).unwrap();
        for (gv, xv) in grads.get(x).unwrap().data().iter().zip(xs) {
            assert!((gv - (2.0 * xv + 3.0)).abs() <= 1e-12 * gv.abs());
        }
    }

    #[test]
    fn cross_entropy_uniform_and_void() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::full([1, 4, 2, 2], 0.25));
        let (l, n) = g.cross_entropy(p, &[0, 1, 2, 3]).unwrap();
        assert_eq!(n, 4);
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let (l, n) = g.cross_entropy(p, &[VOID; 4]).unwrap();
        assert_eq!((g.value(l).item(), n), (0.0, 0));

        assert!(g.cross_entropy(p, &[0, 1, 4, 3]).is_err());
    }
}
