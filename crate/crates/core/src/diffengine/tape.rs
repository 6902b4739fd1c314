use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::kernels::{self, ConvSpec};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Softplus => {
                if v > 30.0 {
                    v
                } else {
                    v.exp().ln_1p()
                }
            }
            Activation::Identity => v,
        }
    }

    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-v).exp()),
            Activation::Identity => 1.0,
        }
    }
}

/// Batch-normalization statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the batch's own mean and variance.
    Train,
    /// Normalize with supplied running statistics.
    Eval,
}

/// Batch statistics observed by a train-mode batch norm, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    AddScalar(usize, usize),
    MulScalar(usize, usize),
    Act(usize, Activation),
    Shift {
        a: usize,
        axis: usize,
        offset: isize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Upsample {
        a: usize,
        axis: usize,
        factor: usize,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxAxis {
        a: usize,
        axis: usize,
        arg: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    SqErr(usize, usize),
    /// Residuals `a - target` with zeros where the mask is unset.
    MaskedSqErr {
        a: usize,
        resid: Vec<f64>,
    },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

/// Explicit reverse-mode tape. Single use: [`Tape::backward`] consumes it.
///
/// Values are stored in a `RefCell`; a [`Ref`] returned by [`Tape::value`]
/// must be dropped before recording further operations.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients of a scalar with respect to every gradient-requiring leaf.
#[derive(Clone, Debug)]
pub struct GradientMap {
    tape: u64,
    grads: BTreeMap<usize, Array>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Array> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.idx)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradients in leaf creation order.
    pub fn arrays(&self) -> impl Iterator<Item = &Array> {
        self.grads.values()
    }

    pub fn into_arrays(self) -> Vec<Array> {
        self.grads.into_values().collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that evaluates values without recording provenance.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Array) -> Result<Var> {
        self.insert(value, Op::Leaf, true, "param")
    }

    pub fn constant(&self, value: Array) -> Result<Var> {
        self.insert(value, Op::Const, false, "constant")
    }

    pub fn scalar(&self, v: f64) -> Result<Var> {
        self.constant(Array::scalar(v))
    }

    fn insert(&self, value: Array, op: Op, is_param: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = is_param && self.recording;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: needs_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: nodes.len() - 1,
        })
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.borrow().len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> Result<Ref<'_, Array>> {
        let idx = self.check(v)?;
        Ok(Ref::map(self.nodes.borrow(), |n| &n[idx].value))
    }

    pub fn value_cloned(&self, v: Var) -> Result<Array> {
        Ok(self.value(v)?.clone())
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let val = self.value(v)?;
        if !val.is_scalar() {
            return Err(Error::NotScalar(val.shape().to_vec()));
        }
        Ok(val.item())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.value(v)?.shape().to_vec())
    }

    fn push(&self, value: Array, op: Op, parents: &[usize], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.recording && parents.iter().any(|&p| nodes[p].needs_grad);
        let op = if needs_grad { op } else { Op::Const };
        nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Ok(Var {
            tape: self.id,
            idx: nodes.len() - 1,
        })
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            kernels::same_shape(name, va, vb)?;
            kernels::zip(va, vb, f)
        };
        self.push(value, op(ia, ib), &[ia, ib], name)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn unary(
        &self,
        a: Var,
        name: &'static str,
        f: impl FnOnce(&Array) -> Result<Array>,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let value = f(&self.nodes.borrow()[ia].value)?;
        self.push(value, op(ia), &[ia], name)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(a, "neg", |v| Ok(v.map(|x| -x)), Op::Neg)
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "scale", |v| Ok(v.map(|x| x * c)), |i| Op::Scale(i, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "offset", |v| Ok(v.map(|x| x + c)), Op::Offset)
    }

    fn scalar_binary(
        &self,
        a: Var,
        s: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, is) = (self.check(a)?, self.check(s)?);
        let value = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[is].value;
            if sv.len() != 1 {
                return Err(Error::shape(name, format!("expected scalar, got {:?}", sv.shape())));
            }
            let c = sv.item();
            nodes[ia].value.map(|x| f(x, c))
        };
        self.push(value, op(ia, is), &[ia, is], name)
    }

    /// Broadcast-add a one-element `s` to every entry of `a`.
    pub fn add_scalar(&self, a: Var, s: Var) -> Result<Var> {
        self.scalar_binary(a, s, "add_scalar", |x, c| x + c, Op::AddScalar)
    }

    /// Broadcast-multiply every entry of `a` by a one-element `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        self.scalar_binary(a, s, "mul_scalar", |x, c| x * c, Op::MulScalar)
    }

    pub fn activation(&self, a: Var, act: Activation) -> Result<Var> {
        self.unary(a, "activation", |v| Ok(v.map(|x| act.apply(x))), |i| Op::Act(i, act))
    }

    pub fn circular_shift(&self, a: Var, axis: usize, offset: isize) -> Result<Var> {
        self.unary(
            a,
            "circular_shift",
            |v| {
                if axis >= v.ndim() {
                    return Err(Error::shape("circular_shift", "axis out of range"));
                }
                Ok(kernels::circular_shift(v, axis, offset))
            },
            |i| Op::Shift {
                a: i,
                axis,
                offset,
            },
        )
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Array> = idx.iter().map(|&i| &nodes[i].value).collect();
            kernels::concat(&refs, axis)?
        };
        self.push(
            value,
            Op::Concat {
                parts: idx.clone(),
                axis,
            },
            &idx,
            "concat",
        )
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.unary(
            a,
            "slice",
            |v| kernels::slice(v, axis, start, len),
            |i| Op::Slice { a: i, axis, start },
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, "reshape", |v| v.clone().reshape(shape), Op::Reshape)
    }

    pub fn upsample(&self, a: Var, axis: usize, factor: usize) -> Result<Var> {
        self.unary(
            a,
            "upsample",
            |v| {
                if axis >= v.ndim() || factor == 0 {
                    return Err(Error::shape("upsample", "bad axis or factor"));
                }
                Ok(kernels::upsample_nearest(v, axis, factor))
            },
            |i| Op::Upsample { a: i, axis, factor },
        )
    }

    /// Cross-correlation over `[N, C, H, W]` with weights `[O, C, KH, KW]`:
    /// zero padding along `H`, circular padding along `W`, output
    /// `[N, O, H', W / stride_w]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let value = {
            let nodes = self.nodes.borrow();
            kernels::conv_forward(
                &nodes[ix].value,
                &nodes[iw].value,
                ib.map(|i| &nodes[i].value),
                spec,
            )?
        };
        let mut parents = vec![ix, iw];
        parents.extend(ib);
        self.push(
            value,
            Op::Conv {
                x: ix,
                w: iw,
                b: ib,
                spec,
            },
            &parents,
            "conv2d",
        )
    }

    /// Circular 1-D cross-correlation over `[N, C, L]` with weights `[O, C, K]`.
    pub fn conv1d(&self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x)?;
        let ws = self.shape(w)?;
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape("conv1d", format!("{:?} {:?}", xs, ws)));
        }
        let x4 = self.reshape(x, &[xs[0], xs[1], 1, xs[2]])?;
        let w4 = self.reshape(w, &[ws[0], ws[1], 1, ws[2]])?;
        let y = self.conv2d(
            x4,
            w4,
            b,
            ConvSpec {
                stride_h: 1,
                stride_w: stride,
            },
        )?;
        let ys = self.shape(y)?;
        self.reshape(y, &[ys[0], ys[1], ys[3]])
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`. In train mode the
    /// batch statistics are returned for updating running averages.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (value, mean, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[ix].value;
            let (mean, var, stats) = match mode {
                NormMode::Train => {
                    let s = kernels::channel_stats(xv)?;
                    let unbiased = if s.count > 1 {
                        let f = s.count as f64 / (s.count - 1) as f64;
                        s.var.iter().map(|v| v * f).collect()
                    } else {
                        s.var.clone()
                    };
                    let stats = BatchStats {
                        mean: s.mean.clone(),
                        var: unbiased,
                    };
                    (s.mean, s.var, Some(stats))
                }
                NormMode::Eval => {
                    let (m, v) = running.ok_or_else(|| {
                        Error::Config("eval-mode batch norm needs running statistics".into())
                    })?;
                    (m.to_vec(), v.to_vec(), None)
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let value =
                kernels::normalize(xv, &nodes[ig].value, &nodes[ib].value, &mean, &inv_std)?;
            (value, mean, inv_std, stats)
        };
        let y = self.push(
            value,
            Op::Norm {
                x: ix,
                gamma: ig,
                beta: ib,
                mean,
                inv_std,
                batch_stats: mode == NormMode::Train,
            },
            &[ix, ig, ib],
            "batch_norm",
        )?;
        Ok((y, stats))
    }

    /// Maximum along `axis` (axis removed); gradient goes to the lowest
    /// index among tied maxima.
    pub fn max_over_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (value, arg) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ia].value;
            if axis >= v.ndim() || v.shape()[axis] == 0 {
                return Err(Error::shape("max_over_axis", "bad axis"));
            }
            kernels::max_over_axis(v, axis)
        };
        self.push(value, Op::MaxAxis { a: ia, axis, arg }, &[ia], "max_over_axis")
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            "sum",
            |v| Ok(Array::scalar(v.data().iter().sum())),
            Op::Sum,
        )
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            "mean",
            |v| {
                if v.is_empty() {
                    return Err(Error::shape("mean", "empty input"));
                }
                Ok(Array::scalar(v.data().iter().sum::<f64>() / v.len() as f64))
            },
            Op::Mean,
        )
    }

    /// `sum((a - b)^2)`.
    pub fn sq_err(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            kernels::same_shape("sq_err", va, vb)?;
            let s = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Array::scalar(s)
        };
        self.push(value, Op::SqErr(ia, ib), &[ia, ib], "sq_err")
    }

    /// `sum over mask of (a - target)^2`. Target entries where the mask is
    /// unset are never read.
    pub fn masked_sq_err(&self, a: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let ia = self.check(a)?;
        let (value, resid) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[ia].value;
            if target.len() != va.len() || mask.len() != va.len() {
                return Err(Error::shape(
                    "masked_sq_err",
                    format!("{} values vs {} targets / {} mask", va.len(), target.len(), mask.len()),
                ));
            }
            let mut resid = vec![0.0; va.len()];
            let mut s = 0.0;
            for i in 0..va.len() {
                if mask[i] {
                    let r = va.data()[i] - target[i];
                    resid[i] = r;
                    s += r * r;
                }
            }
            (Array::scalar(s), resid)
        };
        self.push(value, Op::MaskedSqErr { a: ia, resid }, &[ia], "masked_sq_err")
    }

    /// A copy of `a` that blocks gradient flow.
    pub fn detach(&self, a: Var) -> Result<Var> {
        let v = self.value_cloned(a)?;
        self.constant(v)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<GradientMap> {
        let il = self.check(loss)?;
        let nodes = self.nodes.into_inner();
        if !nodes[il].value.is_scalar() {
            return Err(Error::NotScalar(nodes[il].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(il + 1);
        grads.resize_with(il + 1, || None);
        grads[il] = Some(Array::full(nodes[il].value.shape(), 1.0));
        let mut out = BTreeMap::new();

        for i in (0..=il).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if node.is_param {
                out.insert(i, g);
                continue;
            }
            let mut acc = |p: usize, delta: Array| {
                if !nodes[p].needs_grad {
                    return;
                }
                match &mut grads[p] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |p: usize| &nodes[p].value;
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, kernels::zip(&g, val(*b), |x, y| x * y));
                    acc(*b, kernels::zip(&g, val(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, kernels::zip(&g, vb, |x, y| x / y));
                    let gb = Array::from_parts(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data().iter().zip(vb.data()))
                            .map(|(gx, (x, y))| -gx * x / (y * y))
                            .collect(),
                    );
                    acc(*b, gb);
                }
                Op::Neg(a) => acc(*a, g.map(|x| -x)),
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|x| x * c));
                }
                Op::Offset(a) => acc(*a, g),
                Op::AddScalar(a, s) => {
                    let total: f64 = g.data().iter().sum();
                    acc(*s, Array::from_parts(val(*s).shape().to_vec(), vec![total]));
                    acc(*a, g);
                }
                Op::MulScalar(a, s) => {
                    let c = val(*s).item();
                    let total: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    acc(*s, Array::from_parts(val(*s).shape().to_vec(), vec![total]));
                    acc(*a, g.map(|x| x * c));
                }
                Op::Act(a, act) => {
                    acc(*a, kernels::zip(&g, val(*a), |x, y| x * act.derivative(y)));
                }
                Op::Shift { a, axis, offset } => {
                    acc(*a, kernels::circular_shift(&g, *axis, -offset));
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        let piece = kernels::slice(&g, *axis, start, len)?;
                        acc(p, piece);
                        start += len;
                    }
                }
                Op::Slice { a, axis, start } => {
                    acc(*a, kernels::unslice(&g, val(*a).shape(), *axis, *start));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, g.reshape(&shape)?);
                }
                Op::Upsample { a, axis, factor } => {
                    acc(*a, kernels::upsample_adjoint(&g, *axis, *factor));
                }
                Op::Conv { x, w, b, spec } => {
                    let need = (
                        nodes[*x].needs_grad,
                        nodes[*w].needs_grad,
                        b.map(|b| nodes[b].needs_grad).unwrap_or(false),
                    );
                    let cg = kernels::conv_backward(val(*x), val(*w), &g, *spec, need)?;
                    if let Some(dx) = cg.dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = cg.dw {
                        acc(*w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        acc(*b, db);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let ng = kernels::normalize_backward(
                        val(*x),
                        val(*gamma),
                        mean,
                        inv_std,
                        &g,
                        *batch_stats,
                    )?;
                    acc(*x, ng.dx);
                    acc(*gamma, ng.dgamma);
                    acc(*beta, ng.dbeta);
                }
                Op::MaxAxis { a, axis, arg } => {
                    acc(*a, kernels::max_adjoint(&g, val(*a).shape(), *axis, arg));
                }
                Op::Sum(a) => {
                    let c = g.item();
                    acc(*a, Array::full(val(*a).shape(), c));
                }
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    let c = g.item() / n;
                    acc(*a, Array::full(val(*a).shape(), c));
                }
                Op::SqErr(a, b) => {
                    let c = 2.0 * g.item();
                    let d = kernels::zip(val(*a), val(*b), |x, y| c * (x - y));
                    acc(*b, d.map(|x| -x));
                    acc(*a, d);
                }
                Op::MaskedSqErr { a, resid } => {
                    let c = 2.0 * g.item();
                    acc(
                        *a,
                        Array::from_parts(
                            val(*a).shape().to_vec(),
                            resid.iter().map(|r| c * r).collect(),
                        ),
                    );
                }
            }
        }

        for (i, node) in nodes.iter().enumerate() {
            if node.is_param {
                out.entry(i)
                    .or_insert_with(|| Array::zeros(node.value.shape()));
            }
        }
        Ok(GradientMap {
            tape: self.id,
            grads: out,
        })
    }
}
