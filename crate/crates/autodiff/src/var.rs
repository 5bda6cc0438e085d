//! Graph-building variables.
//!
//! Every operation on a [`Var`] records its inputs, and every backward rule is
//! written in terms of `Var` operations again. When gradients are taken with
//! `create_graph = true` the gradient expressions are themselves recorded,
//! which gives higher-order derivatives (double backprop) for free.

use std::cell::Cell;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::ops;
use std::rc::Rc;

use crate::conv::{self, ConvGeom, ConvSpec};
use crate::{Result, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Restores the previous grad-recording state on drop.
#[must_use]
pub struct NoGradGuard {
    previous: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

/// Disables graph recording on this thread until the guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let previous = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { previous }
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    MulConst(Var, Rc<Tensor>),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    RoundSte(Var),
    Softplus(Var),
    Sigmoid(Var),
    NormalCdf(Var),
    Sum(Var),
    Broadcast(Var),
    SumBatch(Var),
    ExpandBatch(Var),
    SumChannels(Var),
    ExpandChannels(Var),
    Reshape(Var),
    Conv(Var, Var, ConvGeom),
    ConvTranspose(Var, Var, ConvGeom),
    ConvWeight(Var, Var, ConvGeom),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// A tensor-valued node in a computation graph.
#[derive(Clone)]
pub struct Var(pub(crate) Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A trainable leaf.
    pub fn param(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        }))
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        }))
    }

    fn from_op(value: Tensor, op: Op) -> Self {
        let requires_grad = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            value,
            requires_grad,
            op,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub(crate) fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    // ---- elementwise binary ------------------------------------------------

    pub fn add(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(v, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(v, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(v, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a / b);
        Var::from_op(v, Op::Div(self.clone(), other.clone()))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, c: &Tensor) -> Var {
        self.mul_const_rc(Rc::new(c.clone()))
    }

    fn mul_const_rc(&self, c: Rc<Tensor>) -> Var {
        let v = self.value().zip_map(&c, |a, b| a * b);
        Var::from_op(v, Op::MulConst(self.clone(), c))
    }

    /// Adds a constant tensor.
    pub fn add_const(&self, c: &Tensor) -> Var {
        self.add(&Var::constant(c.clone()))
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().map(|a| -a), Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::from_op(self.value().map(|a| a * c), Op::Scale(self.clone(), c))
    }

    /// Adds a scalar.
    pub fn shift(&self, c: f64) -> Var {
        Var::from_op(self.value().map(|a| a + c), Op::Shift(self.clone()))
    }

    pub fn square(&self) -> Var {
        Var::from_op(self.value().map(|a| a * a), Op::Square(self.clone()))
    }

    pub fn sqrt(&self) -> Var {
        Var::from_op(self.value().map(f64::sqrt), Op::Sqrt(self.clone()))
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.value().map(f64::ln), Op::Ln(self.clone()))
    }

    pub fn abs(&self) -> Var {
        Var::from_op(self.value().map(f64::abs), Op::Abs(self.clone()))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        Var::from_op(
            self.value().map(|a| a.clamp(lo, hi)),
            Op::Clamp(self.clone(), lo, hi),
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Var {
        self.clamp(lo, f64::INFINITY)
    }

    /// Round to nearest (ties away from zero) with an identity backward pass.
    pub fn round_ste(&self) -> Var {
        Var::from_op(self.value().map(f64::round), Op::RoundSte(self.clone()))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var {
        Var::from_op(self.value().map(softplus), Op::Softplus(self.clone()))
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(self.value().map(sigmoid), Op::Sigmoid(self.clone()))
    }

    /// Standard normal CDF.
    pub fn normal_cdf(&self) -> Var {
        Var::from_op(self.value().map(normal_cdf), Op::NormalCdf(self.clone()))
    }

    /// Standard normal density, built from differentiable primitives.
    pub fn normal_pdf(&self) -> Var {
        self.square().scale(-0.5).exp().scale(1.0 / (2.0 * PI).sqrt())
    }

    // ---- reductions and broadcasts -----------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var {
        Var::from_op(Tensor::scalar(self.value().sum()), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        assert_eq!(self.value().len(), 1, "broadcast_to expects a scalar");
        Var::from_op(
            Tensor::full(shape, self.value().data()[0]),
            Op::Broadcast(self.clone()),
        )
    }

    /// Per-item sums over every axis but the first: `[B, ...] -> [B]`.
    pub fn sum_batch(&self) -> Var {
        let b = self.shape()[0];
        let per = self.value().len() / b;
        let data = self
            .value()
            .data()
            .chunks(per)
            .map(|c| c.iter().sum())
            .collect();
        Var::from_op(
            Tensor::new(&[b], data).expect("sum_batch shape"),
            Op::SumBatch(self.clone()),
        )
    }

    /// Expands `[B]` to `shape` (`shape[0] == B`).
    pub fn expand_batch(&self, shape: &[usize]) -> Var {
        assert_eq!(self.shape(), &[shape[0]], "expand_batch: leading axis mismatch");
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(per * shape[0]);
        for &v in self.value().data() {
            data.extend(std::iter::repeat_n(v, per));
        }
        Var::from_op(
            Tensor::new(shape, data).expect("expand_batch shape"),
            Op::ExpandBatch(self.clone()),
        )
    }

    /// Per-channel sums of a `[B, C, H, W]` tensor: result `[C]`.
    pub fn sum_channels(&self) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 4, "sum_channels expects rank 4");
        let (c, plane) = (s[1], s[2] * s[3]);
        let mut out = vec![0.0; c];
        for (i, chunk) in self.value().data().chunks(plane).enumerate() {
            out[i % c] += chunk.iter().sum::<f64>();
        }
        Var::from_op(
            Tensor::new(&[c], out).expect("sum_channels shape"),
            Op::SumChannels(self.clone()),
        )
    }

    /// Expands a `[C]` vector to `shape = [B, C, H, W]`.
    pub fn expand_channels(&self, shape: &[usize]) -> Var {
        assert_eq!(shape.len(), 4, "expand_channels expects a rank-4 target");
        assert_eq!(self.shape(), &[shape[1]], "expand_channels: channel mismatch");
        let plane = shape[2] * shape[3];
        let src = self.value().data();
        let mut data = Vec::with_capacity(shape.iter().product());
        for _ in 0..shape[0] {
            for &v in src {
                data.extend(std::iter::repeat_n(v, plane));
            }
        }
        Var::from_op(
            Tensor::new(shape, data).expect("expand_channels shape"),
            Op::ExpandChannels(self.clone()),
        )
    }

    /// Adds a per-channel bias `[C]` to a `[B, C, H, W]` tensor.
    pub fn add_channel_bias(&self, bias: &Var) -> Var {
        self.add(&bias.expand_channels(self.shape()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().clone().reshape(shape)?;
        Ok(Var::from_op(v, Op::Reshape(self.clone())))
    }

    // ---- convolutions ------------------------------------------------------

    /// `conv(self, weight)` with weight `[Cout, Cin, k, k]`.
    pub fn conv2d(&self, weight: &Var, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::for_conv(spec, self.shape(), weight.shape())?;
        Ok(Var::conv_raw(self, weight, geom))
    }

    /// Transposed convolution producing spatial size `out_hw`; `weight` is
    /// laid out as for the forward conv that maps the output back to `self`.
    pub fn conv_transpose2d(
        &self,
        weight: &Var,
        spec: ConvSpec,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let geom = ConvGeom::for_transpose(spec, self.shape(), weight.shape(), out_hw)?;
        Ok(Var::conv_transpose_raw(self, weight, geom))
    }

    pub(crate) fn conv_raw(x: &Var, w: &Var, geom: ConvGeom) -> Var {
        let v = conv::conv2d(&geom, x.value(), w.value());
        Var::from_op(v, Op::Conv(x.clone(), w.clone(), geom))
    }

    pub(crate) fn conv_transpose_raw(y: &Var, w: &Var, geom: ConvGeom) -> Var {
        let v = conv::conv_transpose2d(&geom, y.value(), w.value());
        Var::from_op(v, Op::ConvTranspose(y.clone(), w.clone(), geom))
    }

    pub(crate) fn conv_weight_raw(x: &Var, y: &Var, geom: ConvGeom) -> Var {
        let v = conv::conv_weight_grad(&geom, x.value(), y.value());
        Var::from_op(v, Op::ConvWeight(x.clone(), y.clone(), geom))
    }
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![a, b],
            Conv(a, b, _) | ConvTranspose(a, b, _) | ConvWeight(a, b, _) => vec![a, b],
            Neg(a) | Scale(a, _) | Shift(a) | MulConst(a, _) | Square(a) | Sqrt(a) | Exp(a)
            | Ln(a) | Abs(a) | Clamp(a, _, _) | RoundSte(a) | Softplus(a) | Sigmoid(a)
            | NormalCdf(a) | Sum(a) | Broadcast(a) | SumBatch(a) | ExpandBatch(a)
            | SumChannels(a) | ExpandChannels(a) | Reshape(a) => vec![a],
        }
    }

    /// Vector-Jacobian products: gradient contributions for each parent,
    /// given the node's output `out` and upstream gradient `g`.
    pub(crate) fn backward(&self, out: &Var, g: &Var) -> Vec<(Var, Var)> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
            Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.neg())],
            Mul(a, b) => vec![(a.clone(), g.mul(b)), (b.clone(), g.mul(a))],
            Div(a, b) => vec![
                (a.clone(), g.div(b)),
                (b.clone(), g.mul(out).div(b).neg()),
            ],
            Neg(a) => vec![(a.clone(), g.neg())],
            Scale(a, c) => vec![(a.clone(), g.scale(*c))],
            Shift(a) => vec![(a.clone(), g.clone())],
            MulConst(a, c) => vec![(a.clone(), g.mul_const_rc(c.clone()))],
            Square(a) => vec![(a.clone(), g.mul(a).scale(2.0))],
            Sqrt(a) => vec![(a.clone(), g.div(out).scale(0.5))],
            Exp(a) => vec![(a.clone(), g.mul(out))],
            Ln(a) => vec![(a.clone(), g.div(a))],
            Abs(a) => {
                let sign = a.value().map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![(a.clone(), g.mul_const_rc(Rc::new(sign)))]
            }
            Clamp(a, lo, hi) => {
                let mask = a
                    .value()
                    .map(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                vec![(a.clone(), g.mul_const_rc(Rc::new(mask)))]
            }
            RoundSte(a) => vec![(a.clone(), g.clone())],
            Softplus(a) => vec![(a.clone(), g.mul(&a.sigmoid()))],
            Sigmoid(a) => {
                let slope = out.mul(&out.neg().shift(1.0));
                vec![(a.clone(), g.mul(&slope))]
            }
            NormalCdf(a) => vec![(a.clone(), g.mul(&a.normal_pdf()))],
            Sum(a) => vec![(a.clone(), g.broadcast_to(a.shape()))],
            Broadcast(a) => vec![(a.clone(), g.sum())],
            SumBatch(a) => vec![(a.clone(), g.expand_batch(a.shape()))],
            ExpandBatch(a) => vec![(a.clone(), g.sum_batch())],
            SumChannels(a) => vec![(a.clone(), g.expand_channels(a.shape()))],
            ExpandChannels(a) => vec![(a.clone(), g.sum_channels())],
            Reshape(a) => vec![(
                a.clone(),
                g.reshape(a.shape()).expect("reshape back to source shape"),
            )],
            Conv(x, w, geom) => vec![
                (x.clone(), Var::conv_transpose_raw(g, w, *geom)),
                (w.clone(), Var::conv_weight_raw(x, g, *geom)),
            ],
            ConvTranspose(y, w, geom) => vec![
                (y.clone(), Var::conv_raw(g, w, *geom)),
                (w.clone(), Var::conv_weight_raw(g, y, *geom)),
            ],
            ConvWeight(x, y, geom) => vec![
                (x.clone(), Var::conv_transpose_raw(y, g, *geom)),
                (y.clone(), Var::conv_raw(x, g, *geom)),
            ],
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

macro_rules! binary_operator {
    ($trait:ident, $method:ident, $call:ident) => {
        impl ops::$trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                self.$call(rhs)
            }
        }
    };
}

binary_operator!(Add, add, add);
binary_operator!(Sub, sub, sub);
binary_operator!(Mul, mul, mul);
binary_operator!(Div, div, div);

impl ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}
