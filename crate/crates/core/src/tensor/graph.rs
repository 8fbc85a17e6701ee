//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass and consumed by
//! [`Graph::backward`]. Nodes are appended in evaluation order, so replaying
//! them in reverse visits every consumer before its producers; gradients of
//! values read by several ops (the shared backbone output) are summed.

use super::ops::{self, ConvGeometry};
use super::{MaskMap, Real, Tensor};
use crate::error::{contract, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
        patches: Option<Vec<T>>,
    },
    Relu(Var),
    CRelu(Var, MaskMap),
    GlobalAvgPool(Var),
    Bce {
        logits: Var,
        target: Tensor<T>,
    },
    Add(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is wanted after `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let needs_grad = self.needs(input) || self.needs(weight) || self.needs(bias);
        let keep = self.needs(weight);
        let (out, geometry, patches) = ops::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
            keep,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                patches,
            },
            needs_grad,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn c_relu(&mut self, x: Var, mask: &MaskMap) -> Result<Var> {
        let out = ops::c_relu_forward(self.value(x), mask)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::CRelu(x, mask.clone()), needs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), needs))
    }

    pub fn bce_multilabel(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = ops::bce_multilabel_loss(self.value(logits), target)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                target: target.clone(),
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        contract!(
            self.value(a).shape() == self.value(b).shape(),
            "add of shapes {:?} and {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let out = Tensor::from_fn(self.value(a).shape(), |i| {
            self.value(a).data()[i] + self.value(b).data()[i]
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Which side of zero every rectifier input sits on, plus the sign of
    /// every C-ReLU mask entry.
    ///
    /// Two evaluations with equal patterns lie in the same smooth piece of
    /// the network, which is what the gradient checker uses to skip kinks.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    pattern.extend(self.value(*x).data().iter().map(|&v| v > T::zero()));
                }
                Op::CRelu(x, mask) => {
                    pattern.extend(self.value(*x).data().iter().map(|&v| v > T::zero()));
                    for &m in mask.values() {
                        pattern.extend([m > 0, m < 0]);
                    }
                }
                _ => {}
            }
        }
        pattern
    }

    /// Backpropagates from a scalar node and returns the leaf gradients.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        contract!(
            self.value(loss).numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let Graph { nodes } = self;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let send = |grads: &mut Vec<Option<Vec<T>>>, to: Var, d: Vec<T>| {
                if !nodes[to.0].needs_grad {
                    return;
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &v)| *a = *a + v),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geometry,
                    patches,
                } => {
                    let want_input = nodes[input.0].needs_grad;
                    let (d_in, d_w, d_b) = ops::conv2d_backward_raw(
                        &g,
                        nodes[input.0].value.data(),
                        patches.as_deref(),
                        nodes[weight.0].value.data(),
                        geometry,
                        want_input,
                    );
                    if let Some(d_in) = d_in {
                        send(&mut grads, *input, d_in);
                    }
                    send(&mut grads, *weight, d_w);
                    send(&mut grads, *bias, d_b);
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    send(&mut grads, *x, d);
                }
                Op::CRelu(x, mask) => {
                    let plane = mask.height() * mask.width();
                    let m = mask.values();
                    let xv = nodes[x.0].value.data();
                    let d = g
                        .iter()
                        .zip(xv)
                        .enumerate()
                        .map(|(j, (&g, &x))| {
                            if x > T::zero() {
                                match m[j % plane] {
                                    1 => g,
                                    -1 => -g,
                                    _ => T::zero(),
                                }
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    send(&mut grads, *x, d);
                }
                Op::GlobalAvgPool(x) => {
                    let shape = nodes[x.0].value.shape();
                    let area = shape[1] * shape[2];
                    let inv = T::one() / T::from_usize(area).unwrap();
                    let d = (0..shape[0] * area).map(|j| g[j / area] * inv).collect();
                    send(&mut grads, *x, d);
                }
                Op::Bce { logits, target } => {
                    let d = ops::bce_multilabel_backward(g[0], &nodes[logits.0].value, target)?;
                    send(&mut grads, *logits, d.into_data());
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
            }
        }

        // Only leaf gradients survive; intermediates were consumed above.
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
