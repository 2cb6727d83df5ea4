//! Reverse-mode differentiable tensors and the small set of operations needed
//! to express the three U-nets and their losses.
//!
//! Tensors form a dynamically recorded computation graph: every op returns a
//! new tensor holding its inputs and a backward step. Calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients into every tracked leaf. Data is `f32`,
//! row-major, with the `N x C x H x W` convention for image tensors.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

mod conv;
mod optim;

pub use conv::{concat_channels, conv2d_same, maxpool4, upsample_nearest4};
pub use optim::{rmsprop_step, OptimizerConfig, Parameter};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with gradient recording disabled on the current thread.
///
/// Forward passes inside the closure build no graph, which keeps inference,
/// validation and curriculum scoring cheap.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

/// A backward step knows how to push a node's gradient into its parents.
trait BackwardStep {
    fn step(&self, node: &Node);
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    track: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<Box<dyn BackwardStep>>,
}

impl Node {
    fn accumulate_grad(&self, delta: &[f32]) {
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Gradient buffer, creating a zeroed one on first access. Used by
    /// backward steps that accumulate in place instead of via a temporary.
    fn grad_mut(&self) -> RefMut<'_, Vec<f32>> {
        {
            let mut slot = self.grad.borrow_mut();
            if slot.is_none() {
                *slot = Some(vec![0.0; self.data.borrow().len()]);
            }
        }
        RefMut::map(self.grad.borrow_mut(), |g| g.as_mut().unwrap())
    }
}

/// An n-dimensional `f32` array with an optional gradient buffer.
///
/// Cloning is cheap and shares storage; a tensor cloned into two expressions
/// is the same graph node in both.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("track", &self.node.track.get())
            .finish()
    }
}

impl Tensor {
    /// Untracked leaf tensor. Panics if `data` does not fill `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                track: Cell::new(false),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Tracked leaf tensor that will receive a gradient on backward.
    pub fn with_grad(shape: &[usize], data: Vec<f32>) -> Tensor {
        let t = Tensor::from_vec(shape, data);
        t.node.track.set(true);
        t
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    /// Internal op-result constructor. When grad recording is off or no
    /// parent is tracked, the result is a plain leaf and the graph edges are
    /// dropped.
    fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: Box<dyn BackwardStep>,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.node.track.get());
        let (parents, backward) = if track {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                track: Cell::new(track),
                parents,
                backward,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.node.data.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.node.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.node.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.node.grad.borrow().is_some()
    }

    /// Takes the gradient buffer, leaving the tensor without one.
    pub fn take_grad(&self) -> Option<Vec<f32>> {
        self.node.grad.borrow_mut().take()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the gradient buffer, creating it if absent. Panics
    /// if `delta` does not match the tensor length.
    pub fn accumulate_grad(&self, delta: &[f32]) {
        assert_eq!(delta.len(), self.len(), "gradient length mismatch");
        self.node.accumulate_grad(delta);
    }

    pub fn is_tracked(&self) -> bool {
        self.node.track.get()
    }

    /// Enables or disables gradient accumulation into this leaf. Flipping it
    /// off freezes a parameter: ops still route gradients through it to
    /// upstream tensors, but the leaf itself stays grad-free.
    pub fn set_tracked(&self, tracked: bool) {
        self.node.track.set(tracked);
    }

    /// Copies the data into a fresh untracked leaf.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.node.shape, self.node.data.borrow().clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let data = self.node.data.borrow();
        assert_eq!(data.len(), 1, "item() requires a single-element tensor");
        data[0]
    }

    /// Reverse-mode sweep from a scalar loss: every tracked leaf reachable
    /// from `self` receives its gradient. Gradients of intermediate nodes are
    /// freed as soon as they have been consumed.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.track.get() {
            return Ok(());
        }

        // Iterative post-order DFS over tracked nodes: the reversed order is
        // topological, so each node is complete before it pushes to parents.
        enum Frame {
            Enter(Rc<Node>),
            Exit(Rc<Node>),
        }
        let mut order: Vec<Rc<Node>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.node.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(n) => {
                    if !n.track.get() || !visited.insert(n.id) {
                        continue;
                    }
                    stack.push(Frame::Exit(n.clone()));
                    for p in &n.parents {
                        stack.push(Frame::Enter(p.node.clone()));
                    }
                }
                Frame::Exit(n) => order.push(n),
            }
        }

        self.node.accumulate_grad(&[1.0]);
        for n in order.iter().rev() {
            if let Some(op) = &n.backward {
                op.step(n);
                *n.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

struct AddBackward;

impl BackwardStep for AddBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow();
        let g = g.as_ref().expect("grad present during backward");
        for p in &node.parents {
            if p.node.track.get() {
                p.node.accumulate_grad(g);
            }
        }
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "add")?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(AddBackward),
    ))
}

struct SubBackward;

impl BackwardStep for SubBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow();
        let g = g.as_ref().expect("grad present during backward");
        let (a, b) = (&node.parents[0], &node.parents[1]);
        if a.node.track.get() {
            a.node.accumulate_grad(g);
        }
        if b.node.track.get() {
            let neg: Vec<f32> = g.iter().map(|v| -v).collect();
            b.node.accumulate_grad(&neg);
        }
    }
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "sub")?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x - y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(SubBackward),
    ))
}

struct ScaleBackward {
    factor: f32,
}

impl BackwardStep for ScaleBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow();
        let g = g.as_ref().expect("grad present during backward");
        let a = &node.parents[0];
        if a.node.track.get() {
            let scaled: Vec<f32> = g.iter().map(|v| v * self.factor).collect();
            a.node.accumulate_grad(&scaled);
        }
    }
}

pub fn scale(a: &Tensor, factor: f32) -> Tensor {
    let data = a.data().iter().map(|x| x * factor).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(ScaleBackward { factor }),
    )
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Keeps sigmoid outputs strictly inside (0,1) in f32 arithmetic, so that a
/// saturated head never trips the binary cross-entropy domain check.
const SIGMOID_FLOOR: f32 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

struct ReluBackward;

impl BackwardStep for ReluBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow();
        let g = g.as_ref().expect("grad present during backward");
        let a = &node.parents[0];
        if a.node.track.get() {
            let input = a.node.data.borrow();
            let mut ag = a.node.grad_mut();
            for ((agi, gi), xi) in ag.iter_mut().zip(g.iter()).zip(input.iter()) {
                if *xi > 0.0 {
                    *agi += *gi;
                }
            }
        }
    }
}

struct SigmoidBackward;

impl BackwardStep for SigmoidBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow();
        let g = g.as_ref().expect("grad present during backward");
        let a = &node.parents[0];
        if a.node.track.get() {
            let y = node.data.borrow();
            let mut ag = a.node.grad_mut();
            for ((agi, gi), yi) in ag.iter_mut().zip(g.iter()).zip(y.iter()) {
                *agi += *gi * *yi * (1.0 - *yi);
            }
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(ReluBackward),
    )
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|v| (1.0 / (1.0 + (-v).exp())).clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR))
        .collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(SigmoidBackward),
    )
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => relu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

const DICE_EPS: f32 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Bce,
    Dice,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Bce => "bce",
            LossKind::Dice => "dice",
        }
    }

    pub fn parse(s: &str) -> Option<LossKind> {
        match s {
            "mse" => Some(LossKind::Mse),
            "bce" => Some(LossKind::Bce),
            "dice" => Some(LossKind::Dice),
            _ => None,
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

struct MseBackward;

impl BackwardStep for MseBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow().as_ref().expect("grad")[0];
        let (pred, target) = (&node.parents[0], &node.parents[1]);
        let p = pred.node.data.borrow();
        let t = target.node.data.borrow();
        if pred.node.track.get() {
            let mut pg = pred.node.grad_mut();
            for ((pgi, pi), ti) in pg.iter_mut().zip(p.iter()).zip(t.iter()) {
                *pgi += g * 2.0 * (pi - ti);
            }
        }
        if target.node.track.get() {
            let mut tg = target.node.grad_mut();
            for ((tgi, pi), ti) in tg.iter_mut().zip(p.iter()).zip(t.iter()) {
                *tgi += g * -2.0 * (pi - ti);
            }
        }
    }
}

/// Sum of squared differences, the squared L2 norm of `pred - target`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "mse_loss")?;
    let value: f32 = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(p, t)| {
            let d = p - t;
            d * d
        })
        .sum();
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![pred.clone(), target.clone()],
        Box::new(MseBackward),
    ))
}

struct BceBackward;

impl BackwardStep for BceBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow().as_ref().expect("grad")[0];
        let (pred, target) = (&node.parents[0], &node.parents[1]);
        let p = pred.node.data.borrow();
        let t = target.node.data.borrow();
        let inv_n = 1.0 / p.len() as f32;
        if pred.node.track.get() {
            let mut pg = pred.node.grad_mut();
            for ((pgi, pi), ti) in pg.iter_mut().zip(p.iter()).zip(t.iter()) {
                *pgi += g * inv_n * (pi - ti) / (pi * (1.0 - pi));
            }
        }
        if target.node.track.get() {
            let mut tg = target.node.grad_mut();
            for ((tgi, pi), _) in tg.iter_mut().zip(p.iter()).zip(t.iter()) {
                *tgi += g * inv_n * ((1.0 - pi).ln() - pi.ln());
            }
        }
    }
}

/// Mean binary cross-entropy. Predictions must lie strictly inside (0,1).
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "bce_loss")?;
    {
        let p = pred.data();
        if p.iter().any(|v| *v <= 0.0 || *v >= 1.0) {
            return Err(Error::Domain(
                "bce_loss: predictions must lie strictly inside (0,1)".into(),
            ));
        }
        let t = target.data();
        if t.iter().any(|v| *v < 0.0 || *v > 1.0) {
            return Err(Error::Domain(
                "bce_loss: targets must lie inside [0,1]".into(),
            ));
        }
    }
    let n = pred.len() as f32;
    let value: f32 = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .sum::<f32>()
        / n;
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![pred.clone(), target.clone()],
        Box::new(BceBackward),
    ))
}

struct DiceBackward;

impl BackwardStep for DiceBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow().as_ref().expect("grad")[0];
        let (pred, target) = (&node.parents[0], &node.parents[1]);
        let p = pred.node.data.borrow();
        let t = target.node.data.borrow();
        let s_pt: f32 = p.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
        let denom: f32 = p.iter().sum::<f32>() + t.iter().sum::<f32>() + DICE_EPS;
        let denom_sq = denom * denom;
        if pred.node.track.get() {
            let mut pg = pred.node.grad_mut();
            for (pgi, ti) in pg.iter_mut().zip(t.iter()) {
                *pgi += g * 2.0 * (s_pt - ti * denom) / denom_sq;
            }
        }
        if target.node.track.get() {
            let mut tg = target.node.grad_mut();
            for (tgi, pi) in tg.iter_mut().zip(p.iter()) {
                *tgi += g * 2.0 * (s_pt - pi * denom) / denom_sq;
            }
        }
    }
}

/// Soft Dice loss: `1 - 2<p,t> / (sum(p) + sum(t) + eps)`.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "dice_loss")?;
    let s_pt: f32 = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(p, t)| p * t)
        .sum();
    let denom: f32 =
        pred.data().iter().sum::<f32>() + target.data().iter().sum::<f32>() + DICE_EPS;
    let value = 1.0 - 2.0 * s_pt / denom;
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![pred.clone(), target.clone()],
        Box::new(DiceBackward),
    ))
}

pub fn loss(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<Tensor> {
    match kind {
        LossKind::Mse => mse_loss(pred, target),
        LossKind::Bce => bce_loss(pred, target),
        LossKind::Dice => dice_loss(pred, target),
    }
}

/// Sum of absolute values. Scoring/metric helper, records no gradient.
pub fn l1_norm(t: &Tensor) -> f32 {
    t.data().iter().map(|v| v.abs()).sum()
}
