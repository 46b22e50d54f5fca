//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and enough
//! saved state to run its adjoint. [`GradTape::backward`] walks the nodes
//! in reverse and returns gradients for every node that (transitively)
//! depends on a [`GradTape::param`] leaf.
//!
//! A tape is single-owner: one tape per training step.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and for the fault-injection hook
/// of the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv3d,
    LeakyRelu,
    Add,
    MeanOverTime,
    SubtractBroadcast,
    MaxOverTime,
    MaxPool,
    StripPool,
    StripLinear,
    WeightedSum,
    Custom(&'static str),
}

impl OpKind {
    /// Kinds with a backward rule, custom losses included.
    pub const DIFFERENTIABLE: [OpKind; 12] = [
        OpKind::Conv3d,
        OpKind::LeakyRelu,
        OpKind::Add,
        OpKind::MeanOverTime,
        OpKind::SubtractBroadcast,
        OpKind::MaxOverTime,
        OpKind::MaxPool,
        OpKind::StripPool,
        OpKind::StripLinear,
        OpKind::WeightedSum,
        OpKind::Custom("triplet"),
        OpKind::Custom("cross_entropy"),
    ];

    pub fn parse(s: &str) -> Option<Self> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv3d => "conv3d",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Add => "add",
            OpKind::MeanOverTime => "mean_over_time",
            OpKind::SubtractBroadcast => "subtract_broadcast",
            OpKind::MaxOverTime => "max_over_time",
            OpKind::MaxPool => "maxpool_spatial",
            OpKind::StripPool => "strip_pool",
            OpKind::StripLinear => "strip_linear",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::Custom(name) => name,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    MeanOverTime {
        x: Var,
    },
    SubtractBroadcast {
        x: Var,
        m: Var,
    },
    MaxOverTime {
        x: Var,
        arg: Vec<u32>,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    StripPool {
        x: Var,
        strips: usize,
        arg: Vec<u32>,
    },
    StripLinear {
        x: Var,
        w: Var,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
    /// Scalar-valued op whose gradient with respect to each input was
    /// computed alongside the forward value.
    Custom {
        name: &'static str,
        inputs: Vec<(Var, Tensor<T>)>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Add { .. } => OpKind::Add,
            Op::MeanOverTime { .. } => OpKind::MeanOverTime,
            Op::SubtractBroadcast { .. } => OpKind::SubtractBroadcast,
            Op::MaxOverTime { .. } => OpKind::MaxOverTime,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::StripPool { .. } => OpKind::StripPool,
            Op::StripLinear { .. } => OpKind::StripLinear,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Custom { name, .. } => OpKind::Custom(name),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
    branches: Option<u64>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            branches: None,
            fault: None,
        }
    }

    /// A tape that fingerprints every piecewise decision (activation sign,
    /// arg-max winner, active hinge) so a finite-difference probe can tell
    /// whether it crossed a kink.
    pub fn with_branch_tracking() -> Self {
        GradTape {
            branches: Some(FNV_OFFSET),
            ..Self::new()
        }
    }

    /// Scale every gradient leaving ops of `kind` by 1.01. Test hook for the
    /// gradient checker's failure path.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    pub fn note_branch(&mut self, v: u64) {
        if let Some(h) = self.branches.as_mut() {
            *h = (*h ^ v).wrapping_mul(FNV_PRIME);
        }
    }

    pub fn is_tracking_branches(&self) -> bool {
        self.branches.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; [`GradTape::backward`] returns its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient (input data).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let y = ops::conv3d_raw(self.value(x), self.value(w), &geom)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(y, Op::Conv3d { x, w, geom }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = ops::leaky_relu(self.value(x), slope);
        if self.branches.is_some() {
            let mut h = FNV_OFFSET;
            for (i, v) in self.nodes[x.0].value.data().iter().enumerate() {
                if *v < T::zero() {
                    h = (h ^ (i as u64 + 1)).wrapping_mul(FNV_PRIME);
                }
            }
            self.note_branch(h);
        }
        let rg = self.rg(x);
        self.push(y, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let mut y = va.clone();
        y.add_assign(vb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn mean_over_time(&mut self, x: Var) -> Result<Var> {
        let y = ops::mean_over_time(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::MeanOverTime { x }, rg))
    }

    pub fn subtract_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let y = ops::subtract_broadcast(self.value(x), self.value(m))?;
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(y, Op::SubtractBroadcast { x, m }, rg))
    }

    fn note_args(&mut self, arg: &[u32]) {
        if self.branches.is_some() {
            let h = arg.iter().fold(FNV_OFFSET, |h, &a| {
                (h ^ (a as u64 + 1)).wrapping_mul(FNV_PRIME)
            });
            self.note_branch(h);
        }
    }

    pub fn max_over_time(&mut self, x: Var) -> Result<Var> {
        let (y, arg) = ops::max_over_time(self.value(x))?;
        self.note_args(&arg);
        let rg = self.rg(x);
        Ok(self.push(y, Op::MaxOverTime { x, arg }, rg))
    }

    pub fn maxpool_spatial(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let (y, arg) = ops::maxpool_spatial(self.value(x), window)?;
        self.note_args(&arg);
        let rg = self.rg(x);
        Ok(self.push(y, Op::MaxPool { x, arg }, rg))
    }

    pub fn strip_pool(&mut self, x: Var, strips: usize) -> Result<Var> {
        let (y, arg) = ops::strip_pool(self.value(x), strips)?;
        self.note_args(&arg);
        let rg = self.rg(x);
        Ok(self.push(y, Op::StripPool { x, strips, arg }, rg))
    }

    /// `(S, C)` pooled strips through per-strip matrices `(S, d, C)`.
    pub fn strip_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::strip_linear_batch(self.value(x), self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(y, Op::StripLinear { x, w }, rg))
    }

    /// Scalar `sum_i weights_i * x_i`; projects any tensor to a scalar for
    /// gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::shape("weighted_sum", xv.shape(), weights.shape()));
        }
        let s: T = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Register a scalar-valued op whose local gradients are already known.
    pub fn custom_scalar(
        &mut self,
        name: &'static str,
        value: T,
        inputs: Vec<(Var, Tensor<T>)>,
    ) -> Result<Var> {
        for (v, g) in &inputs {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::shape(name, self.value(*v).shape(), g.shape()));
            }
        }
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Tensor::scalar(value), Op::Custom { name, inputs }, rg))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward (root must be scalar)",
                self.value(root).shape(),
                &[1],
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                let f = T::from_f64_lossy(1.01);
                g = g.map(|v| v * f);
            }
            self.adjoint(node, &g, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn adjoint(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, geom } => {
                let (gx, gw) =
                    ops::conv3d_backward(self.value(*x), self.value(*w), geom, g, self.rg(*x))?;
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx)?;
                }
                if self.rg(*w) {
                    accumulate(grads, *w, gw)?;
                }
            }
            Op::LeakyRelu { x, slope } => {
                accumulate(
                    grads,
                    *x,
                    ops::leaky_relu_backward(self.value(*x), g, *slope),
                )?;
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::MeanOverTime { x } => {
                let [c, t, h, w] = self.value(*x).dims4()?;
                let inv = T::one() / T::from_usize(t).unwrap();
                let hw = h * w;
                let mut gx = Tensor::zeros(&[c, t, h, w]);
                for ci in 0..c {
                    let gs = &g.data()[ci * hw..(ci + 1) * hw];
                    for ti in 0..t {
                        let off = (ci * t + ti) * hw;
                        for (o, &v) in gx.data_mut()[off..off + hw].iter_mut().zip(gs) {
                            *o = v * inv;
                        }
                    }
                }
                accumulate(grads, *x, gx)?;
            }
            Op::SubtractBroadcast { x, m } => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.clone())?;
                }
                if self.rg(*m) {
                    let [c, t, h, w] = g.dims4()?;
                    let hw = h * w;
                    let mut gm = Tensor::zeros(&[c, 1, h, w]);
                    for ci in 0..c {
                        for ti in 0..t {
                            let off = (ci * t + ti) * hw;
                            for (o, &v) in gm.data_mut()[ci * hw..(ci + 1) * hw]
                                .iter_mut()
                                .zip(&g.data()[off..off + hw])
                            {
                                *o -= v;
                            }
                        }
                    }
                    accumulate(grads, *m, gm)?;
                }
            }
            Op::MaxOverTime { x, arg } => {
                let [c, t, h, w] = self.value(*x).dims4()?;
                let hw = h * w;
                let mut gx = Tensor::zeros(&[c, t, h, w]);
                for ci in 0..c {
                    for p in 0..hw {
                        let ti = arg[ci * hw + p] as usize;
                        gx.data_mut()[(ci * t + ti) * hw + p] = g.data()[ci * hw + p];
                    }
                }
                accumulate(grads, *x, gx)?;
            }
            Op::MaxPool { x, arg } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[a as usize] += gv;
                }
                accumulate(grads, *x, gx)?;
            }
            Op::StripPool { x, strips, arg } => {
                let xv = self.value(*x);
                let [c, _, h, w] = xv.dims4()?;
                let band = (h / strips) * w;
                let inv = T::one() / T::from_usize(band).unwrap();
                let mut gx = Tensor::zeros(xv.shape());
                for ci in 0..c {
                    for s in 0..*strips {
                        let gv = g.data()[s * c + ci] * inv;
                        let off = ci * h * w + s * band;
                        for o in &mut gx.data_mut()[off..off + band] {
                            *o += gv;
                        }
                    }
                }
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[a as usize] += gv;
                }
                accumulate(grads, *x, gx)?;
            }
            Op::StripLinear { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (s, c, d) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(&[s, c]);
                    for si in 0..s {
                        // gx_s (c) = W_s^T (c x d) g_s (d)
                        T::gemm(
                            c,
                            d,
                            1,
                            T::one(),
                            &wv.data()[si * d * c..],
                            (1, c),
                            &g.data()[si * d..],
                            (1, 1),
                            T::zero(),
                            &mut gx.data_mut()[si * c..],
                            (1, 1),
                        );
                    }
                    accumulate(grads, *x, gx)?;
                }
                if self.rg(*w) {
                    let mut gw = Tensor::zeros(wv.shape());
                    for si in 0..s {
                        // gW_s (d x c) = g_s (d x 1) x_s^T (1 x c)
                        T::gemm(
                            d,
                            1,
                            c,
                            T::one(),
                            &g.data()[si * d..],
                            (1, 1),
                            &xv.data()[si * c..],
                            (1, 1),
                            T::zero(),
                            &mut gw.data_mut()[si * d * c..],
                            (c, 1),
                        );
                    }
                    accumulate(grads, *w, gw)?;
                }
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                accumulate(grads, *x, weights.map(|v| v * s))?;
            }
            Op::Custom { inputs, .. } => {
                let s = g.data()[0];
                for (v, local) in inputs {
                    if self.rg(*v) {
                        accumulate(grads, *v, local.map(|x| x * s))?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match grads[v.0].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads[v.0] = Some(g);
            Ok(())
        }
    }
}

/// Result of [`GradTape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf; `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
