//! Reverse-mode differentiation over a recorded tape.
//!
//! Each op appends one node holding its output value and whatever it saved
//! for the backward pass, so the tape order is the forward execution order.
//! [`Graph::backward`] walks the tape once in reverse from a scalar loss.
//!
//! The [`Exec`] trait lets model code run either on a [`Graph`] (recording)
//! or on [`Eager`] (plain evaluation, nothing retained).

use crate::error::{Error, Result};
use crate::loss::{self, Reduction};
use crate::ops::{
    self, Activation, MinMaxCache, Mode, NormCache, RunningStats,
};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    /// Constant input; never receives a gradient.
    Input,
    /// Free variable that receives a gradient.
    Leaf,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dilation: usize,
    },
    Act {
        x: NodeId,
        kind: Activation,
    },
    Norm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: NormCache,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    AvgPool {
        x: NodeId,
        window: usize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    MinMax {
        x: NodeId,
        cache: MinMaxCache,
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
    Sum {
        x: NodeId,
    },
    BackgroundLoss {
        b: NodeId,
        s: NodeId,
    },
    SegmentationLoss {
        pred: NodeId,
        target: Tensor<T>,
        include: Option<Tensor<T>>,
        reduction: Reduction,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a backward pass, kept for leaf and parameter nodes.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter; it requires a gradient iff it is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push(p.value().cast(), Op::Param(id), p.trainable)
    }

    /// Records every parameter of `store`, indexed by `ParamId`.
    pub fn bind(&mut self, store: &ParamStore) -> Vec<NodeId> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, dilation: usize) -> Result<NodeId> {
        let y = ops::conv2d_same(self.value(x), self.value(w), self.value(b), dilation)?;
        let r = self.req(&[x, w, b]);
        Ok(self.push(y, Op::Conv2d { x, w, b, dilation }, r))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let y = ops::activation(self.value(x), kind);
        let r = self.req(&[x]);
        self.push(y, Op::Act { x, kind }, r)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut RunningStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let (y, cache) = match mode {
            Mode::Train => {
                let (y, cache) = ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
                running.update(&cache.mean, &cache.var, momentum);
                (y, cache)
            }
            Mode::Infer => {
                if !running.initialized {
                    return Err(Error::UninitializedRunningStats("batch_norm".into()));
                }
                ops::batch_norm_infer(self.value(x), self.value(gamma), self.value(beta), running, eps)?
            }
        };
        let r = self.req(&[x, gamma, beta]);
        Ok(self.push(y, Op::Norm { x, gamma, beta, cache }, r))
    }

    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (y, cache) =
            ops::instance_norm_with_cache(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let r = self.req(&[x, gamma, beta]);
        Ok(self.push(y, Op::Norm { x, gamma, beta, cache }, r))
    }

    pub fn spatial_dropout(&mut self, x: NodeId, rate: f64, mode: Mode, rng: &mut Rng) -> Result<NodeId> {
        let (y, mask) = ops::spatial_dropout_with_mask(self.value(x), rate, mode, rng)?;
        let r = self.req(&[x]);
        Ok(self.push(y, Op::Dropout { x, mask }, r))
    }

    pub fn avg_pool_same(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let y = ops::avg_pool_same(self.value(x), window)?;
        let r = self.req(&[x]);
        Ok(self.push(y, Op::AvgPool { x, window }, r))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        let r = self.req(&[a, b]);
        Ok(self.push(y, Op::Concat { a, b }, r))
    }

    pub fn minmax_normalize(&mut self, x: NodeId) -> NodeId {
        let (y, cache) = ops::minmax_normalize_with_cache(self.value(x));
        let r = self.req(&[x]);
        self.push(y, Op::MinMax { x, cache }, r)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).add(self.value(b))?;
        let r = self.req(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, r))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).sub(self.value(b))?;
        let r = self.req(&[a, b]);
        Ok(self.push(y, Op::Sub { a, b }, r))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).mul(self.value(b))?;
        let r = self.req(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, r))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::scalar(T::from_f64_lossy(self.value(x).sum()));
        let r = self.req(&[x]);
        self.push(y, Op::Sum { x }, r)
    }

    pub fn background_loss(&mut self, b: NodeId, s: NodeId) -> Result<NodeId> {
        let v = loss::background_loss(self.value(b), self.value(s))?;
        let r = self.req(&[b, s]);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(v)), Op::BackgroundLoss { b, s }, r))
    }

    pub fn segmentation_loss(
        &mut self,
        pred: NodeId,
        target: Tensor<T>,
        include: Option<Tensor<T>>,
        reduction: Reduction,
    ) -> Result<NodeId> {
        let v = loss::segmentation_loss(self.value(pred), &target, include.as_ref(), reduction)?;
        let r = self.req(&[pred]);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(v)),
            Op::SegmentationLoss {
                pred,
                target,
                include,
                reduction,
            },
            r,
        ))
    }

    /// Backpropagates from the scalar node `loss`.
    ///
    /// Returns gradients for every leaf and parameter node that requires one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape.len() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut kept: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Leaf | Op::Param(_) => kept[i] = Some(g),
                Op::Conv2d { x, w, b, dilation } => {
                    let cg = ops::conv2d_same_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *dilation,
                        self.requires_grad(*x),
                    )?;
                    if let Some(dx) = cg.input {
                        self.accumulate(&mut grads, *x, dx)?;
                    }
                    self.accumulate(&mut grads, *w, cg.weight)?;
                    let db = cg.bias.reshape(self.value(*b).shape())?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::Act { x, kind } => {
                    let dx = ops::activation_backward(self.value(*x), &node.value, &g, *kind);
                    self.accumulate(&mut grads, *x, dx)?;
                }
                Op::Norm { x, gamma, beta, cache } => {
                    let ng = ops::norm_backward(self.value(*x), self.value(*gamma), &g, cache)?;
                    self.accumulate(&mut grads, *x, ng.input)?;
                    self.accumulate(&mut grads, *gamma, ng.gamma)?;
                    self.accumulate(&mut grads, *beta, ng.beta)?;
                }
                Op::Dropout { x, mask } => {
                    let dx = ops::spatial::scale_planes(&g, mask);
                    self.accumulate(&mut grads, *x, dx)?;
                }
                Op::AvgPool { x, window } => {
                    let dx = ops::avg_pool_same_backward(&g, *window);
                    self.accumulate(&mut grads, *x, dx)?;
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = ops::split_channels(&g, self.value(*a).shape().c)?;
                    self.accumulate(&mut grads, *a, ga)?;
                    self.accumulate(&mut grads, *b, gb)?;
                }
                Op::MinMax { x, cache } => {
                    let dx = ops::minmax_backward(self.value(*x), &g, cache);
                    self.accumulate(&mut grads, *x, dx)?;
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, g.clone())?;
                    self.accumulate(&mut grads, *b, g)?;
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut grads, *b, g.map(|v| -v))?;
                    self.accumulate(&mut grads, *a, g)?;
                }
                Op::Mul { a, b } => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    self.accumulate(&mut grads, *a, ga)?;
                    self.accumulate(&mut grads, *b, gb)?;
                }
                Op::Sum { x } => {
                    let u = g.item()?;
                    self.accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), u))?;
                }
                Op::BackgroundLoss { b, s } => {
                    let u = g.item()?.as_f64();
                    let gb = loss::background_loss_grad(self.value(*b), self.value(*s), u);
                    if self.requires_grad(*s) {
                        self.accumulate(&mut grads, *s, gb.map(|v| -v))?;
                    }
                    self.accumulate(&mut grads, *b, gb)?;
                }
                Op::SegmentationLoss {
                    pred,
                    target,
                    include,
                    reduction,
                } => {
                    let u = g.item()?.as_f64();
                    let gp = loss::segmentation_loss_grad(
                        self.value(*pred),
                        target,
                        include.as_ref(),
                        *reduction,
                        u,
                    );
                    self.accumulate(&mut grads, *pred, gp)?;
                }
            }
        }
        Ok(Gradients { grads: kept })
    }

    /// [`Graph::backward`], then adds each trainable parameter's gradient
    /// into `store`. Gradients accumulate; callers zero them between steps.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads.grads[i]) {
                let p = store.get_mut(*pid);
                if p.trainable {
                    p.accumulate_grad(g)?;
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
        if !self.requires_grad(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

/// Execution backend for model code.
pub trait Exec<T: Scalar> {
    type Value: Clone;

    fn constant(&mut self, t: Tensor<T>) -> Self::Value;
    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;
    fn conv2d(&mut self, x: Self::Value, w: &Self::Value, b: &Self::Value, dilation: usize) -> Result<Self::Value>;
    fn activation(&mut self, x: Self::Value, kind: Activation) -> Self::Value;
    #[allow(clippy::too_many_arguments)]
    fn batch_norm(
        &mut self,
        x: Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        running: &mut RunningStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Self::Value>;
    fn instance_norm(&mut self, x: Self::Value, gamma: &Self::Value, beta: &Self::Value, eps: f64) -> Result<Self::Value>;
    fn spatial_dropout(&mut self, x: Self::Value, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Self::Value>;
    fn avg_pool_same(&mut self, x: Self::Value, window: usize) -> Result<Self::Value>;
    fn concat_channels(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value>;
    fn minmax_normalize(&mut self, x: Self::Value) -> Self::Value;
    fn sub(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value>;

    fn shape(&self, v: &Self::Value) -> Shape {
        self.tensor(v).shape()
    }
}

impl<T: Scalar> Exec<T> for Graph<T> {
    type Value = NodeId;

    fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.input(t)
    }
    fn tensor<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        self.value(*v)
    }
    fn conv2d(&mut self, x: NodeId, w: &NodeId, b: &NodeId, dilation: usize) -> Result<NodeId> {
        Graph::conv2d(self, x, *w, *b, dilation)
    }
    fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        Graph::activation(self, x, kind)
    }
    fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: &NodeId,
        beta: &NodeId,
        running: &mut RunningStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        Graph::batch_norm(self, x, *gamma, *beta, running, mode, momentum, eps)
    }
    fn instance_norm(&mut self, x: NodeId, gamma: &NodeId, beta: &NodeId, eps: f64) -> Result<NodeId> {
        Graph::instance_norm(self, x, *gamma, *beta, eps)
    }
    fn spatial_dropout(&mut self, x: NodeId, rate: f64, mode: Mode, rng: &mut Rng) -> Result<NodeId> {
        Graph::spatial_dropout(self, x, rate, mode, rng)
    }
    fn avg_pool_same(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        Graph::avg_pool_same(self, x, window)
    }
    fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Graph::concat_channels(self, a, b)
    }
    fn minmax_normalize(&mut self, x: NodeId) -> NodeId {
        Graph::minmax_normalize(self, x)
    }
    fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Graph::sub(self, a, b)
    }
}

/// Plain forward evaluation; intermediate values are dropped as soon as
/// they are consumed.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Eager {
    /// Parameter values of `store` in the backend's element type.
    pub fn bind<T: Scalar>(store: &ParamStore) -> Vec<Tensor<T>> {
        store.iter().map(|p| p.value().cast()).collect()
    }
}

impl<T: Scalar> Exec<T> for Eager {
    type Value = Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }
    fn tensor<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }
    fn conv2d(&mut self, x: Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, dilation: usize) -> Result<Tensor<T>> {
        ops::conv2d_same(&x, w, b, dilation)
    }
    fn activation(&mut self, x: Tensor<T>, kind: Activation) -> Tensor<T> {
        ops::activation(&x, kind)
    }
    fn batch_norm(
        &mut self,
        x: Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running: &mut RunningStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor<T>> {
        ops::batch_norm(&x, gamma, beta, running, mode, momentum, eps)
    }
    fn instance_norm(&mut self, x: Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        ops::instance_norm(&x, gamma, beta, eps)
    }
    fn spatial_dropout(&mut self, x: Tensor<T>, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        ops::spatial_dropout(&x, rate, mode, rng)
    }
    fn avg_pool_same(&mut self, x: Tensor<T>, window: usize) -> Result<Tensor<T>> {
        ops::avg_pool_same(&x, window)
    }
    fn concat_channels(&mut self, a: Tensor<T>, b: Tensor<T>) -> Result<Tensor<T>> {
        ops::concat_channels(&a, &b)
    }
    fn minmax_normalize(&mut self, x: Tensor<T>) -> Tensor<T> {
        ops::minmax_normalize(&x)
    }
    fn sub(&mut self, a: Tensor<T>, b: Tensor<T>) -> Result<Tensor<T>> {
        a.sub(&b)
    }
}
