//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] is a node in a dynamically recorded graph. Gradients are
//! computed by [`grad`], optionally with `create_graph = true`, in which case
//! the backward pass is itself recorded and can be differentiated again.
//!
//! Second-order differentiation is supported through the linear and
//! piecewise-linear ops (convolutions and their adjoints, pooling,
//! upsampling, channel broadcasts, (leaky) ReLU, elementwise arithmetic,
//! channel selection). Ops whose backward is computed by an opaque kernel
//! (instance norm, tanh, softplus, cross-entropy) report an error when asked
//! for a differentiable backward.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvSpec};
use crate::{Float, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

type BackwardFn<T> = dyn Fn(&[Var<T>], &Var<T>, &Var<T>, &[bool]) -> Result<Vec<Option<Var<T>>>>;

struct GradFn<T: Float> {
    name: &'static str,
    parents: Vec<Var<T>>,
    backward: Box<BackwardFn<T>>,
}

struct Node<T: Float> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Differentiable handle around a [`Tensor`].
pub struct Var<T: Float>(Rc<Node<T>>);

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let op = self.0.grad_fn.as_ref().map_or("leaf", |g| g.name);
        write!(f, "Var#{}({op}, {:?})", self.0.id, self.0.value)
    }
}

impl<T: Float> Var<T> {
    fn with(value: Tensor<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// A graph leaf; gradients can be requested for it when `requires_grad`.
    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Self::with(value, requires_grad, None)
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    fn op(
        value: Tensor<T>,
        name: &'static str,
        parents: Vec<Var<T>>,
        backward: impl Fn(&[Var<T>], &Var<T>, &Var<T>, &[bool]) -> Result<Vec<Option<Var<T>>>> + 'static,
    ) -> Self {
        if !parents.iter().any(Var::requires_grad) {
            return Self::constant(value);
        }
        Self::with(
            value,
            true,
            Some(GradFn {
                name,
                parents,
                backward: Box::new(backward),
            }),
        )
    }
}

fn opaque<T: Float>(name: &'static str, inputs: &[Var<T>], g: &Var<T>) -> Result<()> {
    if g.requires_grad() || inputs.iter().any(Var::requires_grad) {
        return Err(TensorError::Invalid {
            op: name,
            msg: "higher-order gradients are not supported through this op".into(),
        });
    }
    Ok(())
}

/// Gradients of the scalar `root` with respect to each of `wrt`.
///
/// Entries of `wrt` that `root` does not depend on receive zeros. With
/// `create_graph`, returned gradients are themselves differentiable.
pub fn grad<T: Float>(root: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Result<Vec<Var<T>>> {
    if root.value().numel() != 1 {
        return Err(TensorError::Invalid {
            op: "grad",
            msg: format!("root must be a scalar, got shape {:?}", root.shape()),
        });
    }
    let targets: HashSet<usize> = wrt.iter().map(|v| v.id()).collect();

    // Post-order over the recorded graph (parents before children).
    let mut order: Vec<Var<T>> = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(gf) = &v.0.grad_fn {
            for p in &gf.parents {
                stack.push((p.clone(), false));
            }
        }
    }

    let mut depends: HashMap<usize, bool> = HashMap::with_capacity(order.len());
    for v in &order {
        let from_parents =
            v.0.grad_fn
                .as_ref()
                .is_some_and(|gf| gf.parents.iter().any(|p| depends.get(&p.id()).copied().unwrap_or(false)));
        depends.insert(v.id(), targets.contains(&v.id()) || from_parents);
    }

    let mut grads: HashMap<usize, Var<T>> = HashMap::new();
    if depends.get(&root.id()).copied().unwrap_or(false) {
        grads.insert(root.id(), Var::constant(Tensor::ones(root.shape())));
    }
    for v in order.iter().rev() {
        let Some(gf) = &v.0.grad_fn else { continue };
        if !depends[&v.id()] {
            continue;
        }
        let Some(g) = (if targets.contains(&v.id()) {
            grads.get(&v.id()).cloned()
        } else {
            grads.remove(&v.id())
        }) else {
            continue;
        };
        let needs: Vec<bool> = gf.parents.iter().map(|p| depends.get(&p.id()).copied().unwrap_or(false)).collect();
        let pg = if create_graph {
            (gf.backward)(&gf.parents, v, &g, &needs)?
        } else {
            let detached: Vec<Var<T>> = gf.parents.iter().map(Var::detach).collect();
            (gf.backward)(&detached, &v.detach(), &g.detach(), &needs)?
        };
        for ((p, gp), need) in gf.parents.iter().zip(pg).zip(&needs) {
            let (Some(gp), true) = (gp, *need) else { continue };
            debug_assert_eq!(gp.shape(), p.shape(), "gradient shape of {}", gf.name);
            let merged = match grads.remove(&p.id()) {
                Some(prev) => prev.add(&gp)?,
                None => gp,
            };
            grads.insert(p.id(), merged);
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            let g = grads
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape())));
            if create_graph {
                g
            } else {
                g.detach()
            }
        })
        .collect())
}

impl<T: Float> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = self.value().add(other.value())?;
        Ok(Self::op(value, "add", vec![self.clone(), other.clone()], |_, _, g, _| {
            Ok(vec![Some(g.clone()), Some(g.clone())])
        }))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = self.value().sub(other.value())?;
        Ok(Self::op(value, "sub", vec![self.clone(), other.clone()], |_, _, g, n| {
            Ok(vec![Some(g.clone()), if n[1] { Some(g.neg()) } else { None }])
        }))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = self.value().mul(other.value())?;
        Ok(Self::op(value, "mul", vec![self.clone(), other.clone()], |x, _, g, n| {
            Ok(vec![
                if n[0] { Some(g.mul(&x[1])?) } else { None },
                if n[1] { Some(g.mul(&x[0])?) } else { None },
            ])
        }))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, s: T) -> Var<T> {
        Self::op(self.value().scale(s), "scale", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.scale(s))])
        })
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        Self::op(self.value().map(|v| v + s), "add_scalar", vec![self.clone()], |_, _, g, _| {
            Ok(vec![Some(g.clone())])
        })
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, c: &Tensor<T>) -> Result<Var<T>> {
        let value = self.value().mul(c)?;
        let c = c.clone();
        Ok(Self::op(value, "mul_const", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.mul_const(&c)?)])
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = self.value().reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(Self::op(value, "reshape", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.reshape(&orig)?)])
        }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        Self::op(Tensor::scalar(self.value().sum()), "sum", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.expand(&shape)?)])
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.value().numel().max(1)).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var<T>> {
        if self.value().numel() != 1 {
            return Err(TensorError::Invalid {
                op: "expand",
                msg: format!("expected one element, got {:?}", self.shape()),
            });
        }
        let value = Tensor::full(shape, self.value().item());
        let orig = self.shape().to_vec();
        Ok(Self::op(value, "expand", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.sum().reshape(&orig)?)])
        }))
    }

    pub fn abs(&self) -> Var<T> {
        let sign = self.value().map(|v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        Self::op(self.value().map(|v| v.abs()), "abs", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.mul_const(&sign)?)])
        })
    }

    /// `max(x, 0) + slope * min(x, 0)`; `slope = 0` gives ReLU.
    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let mask = self.value().map(|v| if v > T::zero() { T::one() } else { slope });
        let value = self.value().map(|v| if v > T::zero() { v } else { v * slope });
        Self::op(value, "leaky_relu", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.mul_const(&mask)?)])
        })
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }

    pub fn tanh(&self) -> Var<T> {
        let value = self.value().map(|v| v.tanh());
        Self::op(value, "tanh", vec![self.clone()], |x, y, g, _| {
            opaque("tanh", x, g)?;
            let d = y.value().map(|t| T::one() - t * t);
            Ok(vec![Some(Var::constant(g.value().mul(&d)?))])
        })
    }

    /// `log(1 + exp(x))`, computed stably.
    pub fn softplus(&self) -> Var<T> {
        let value = self.value().map(|v| v.max(T::zero()) + (-v.abs()).exp().ln_1p());
        Self::op(value, "softplus", vec![self.clone()], |x, _, g, _| {
            opaque("softplus", x, g)?;
            let sig = x[0].value().map(|v| T::one() / (T::one() + (-v).exp()));
            Ok(vec![Some(Var::constant(g.value().mul(&sig)?))])
        })
    }

    pub fn conv2d(&self, w: &Var<T>, spec: ConvSpec) -> Result<Var<T>> {
        let value = kernels::conv2d(self.value(), w.value(), spec)?;
        let (_, _, h, wd) = self.value().dims4()?;
        let (_, _, kh, kw) = w.value().dims4()?;
        Ok(Self::op(value, "conv2d", vec![self.clone(), w.clone()], move |x, _, g, n| {
            Ok(vec![
                if n[0] {
                    Some(g.conv2d_input_grad(&x[1], (h, wd), spec)?)
                } else {
                    None
                },
                if n[1] {
                    Some(x[0].conv2d_weight_grad(g, (kh, kw), spec)?)
                } else {
                    None
                },
            ])
        }))
    }

    /// Transposed convolution of `self` (an output-space gradient) with `w`.
    pub fn conv2d_input_grad(&self, w: &Var<T>, in_hw: (usize, usize), spec: ConvSpec) -> Result<Var<T>> {
        let value = kernels::conv2d_input_grad(self.value(), w.value(), in_hw, spec)?;
        let (_, _, kh, kw) = w.value().dims4()?;
        Ok(Self::op(
            value,
            "conv2d_input_grad",
            vec![self.clone(), w.clone()],
            move |x, _, g, n| {
                Ok(vec![
                    if n[0] { Some(g.conv2d(&x[1], spec)?) } else { None },
                    if n[1] {
                        Some(g.conv2d_weight_grad(&x[0], (kh, kw), spec)?)
                    } else {
                        None
                    },
                ])
            },
        ))
    }

    /// Weight gradient of a convolution with input `self` and output
    /// gradient `gy`.
    pub fn conv2d_weight_grad(&self, gy: &Var<T>, k_hw: (usize, usize), spec: ConvSpec) -> Result<Var<T>> {
        let value = kernels::conv2d_weight_grad(self.value(), gy.value(), k_hw, spec)?;
        let (_, _, h, wd) = self.value().dims4()?;
        Ok(Self::op(
            value,
            "conv2d_weight_grad",
            vec![self.clone(), gy.clone()],
            move |x, _, g, n| {
                Ok(vec![
                    if n[0] {
                        Some(x[1].conv2d_input_grad(g, (h, wd), spec)?)
                    } else {
                        None
                    },
                    if n[1] { Some(x[0].conv2d(g, spec)?) } else { None },
                ])
            },
        ))
    }

    pub fn avg_pool2(&self) -> Result<Var<T>> {
        let value = kernels::avg_pool2(self.value())?;
        Ok(Self::op(value, "avg_pool2", vec![self.clone()], |_, _, g, _| {
            Ok(vec![Some(g.upsample2(T::from_f64_lossy(0.25))?)])
        }))
    }

    /// Nearest-neighbour 2x upsampling, multiplied by `factor`.
    pub fn upsample2(&self, factor: T) -> Result<Var<T>> {
        let value = kernels::upsample2(self.value(), factor)?;
        Ok(Self::op(value, "upsample2", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.avg_pool2()?.scale(factor * T::from_f64_lossy(4.0)))])
        }))
    }

    pub fn add_channel(&self, bias: &Var<T>) -> Result<Var<T>> {
        let value = kernels::add_channel(self.value(), bias.value())?;
        Ok(Self::op(value, "add_channel", vec![self.clone(), bias.clone()], |_, _, g, n| {
            Ok(vec![Some(g.clone()), if n[1] { Some(g.sum_channel()?) } else { None }])
        }))
    }

    pub fn sum_channel(&self) -> Result<Var<T>> {
        let value = kernels::sum_channel(self.value())?;
        let shape = self.shape().to_vec();
        Ok(Self::op(value, "sum_channel", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.broadcast_channel(&shape)?)])
        }))
    }

    pub fn broadcast_channel(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = kernels::broadcast_channel(self.value(), shape)?;
        Ok(Self::op(value, "broadcast_channel", vec![self.clone()], |_, _, g, _| {
            Ok(vec![Some(g.sum_channel()?)])
        }))
    }

    pub fn sum_spatial(&self) -> Result<Var<T>> {
        let value = kernels::sum_spatial(self.value())?;
        let shape = self.shape().to_vec();
        Ok(Self::op(value, "sum_spatial", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.broadcast_spatial(&shape)?)])
        }))
    }

    /// Spatial mean, `[B,C,...] -> [B,C]`.
    pub fn mean_spatial(&self) -> Result<Var<T>> {
        let (_, _, s) = kernels::bcs(self.shape())?;
        Ok(self.sum_spatial()?.scale(T::one() / T::from_usize(s).unwrap()))
    }

    pub fn broadcast_spatial(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = kernels::broadcast_spatial(self.value(), shape)?;
        Ok(Self::op(value, "broadcast_spatial", vec![self.clone()], |_, _, g, _| {
            Ok(vec![Some(g.sum_spatial()?)])
        }))
    }

    /// `self * scale[b,c] + shift[b,c]` with the affine constant over
    /// spatial positions.
    pub fn affine_spatial(&self, scale: &Var<T>, shift: &Var<T>) -> Result<Var<T>> {
        let value = kernels::affine_spatial(self.value(), scale.value(), Some(shift.value()))?;
        Ok(Self::op(
            value,
            "affine_spatial",
            vec![self.clone(), scale.clone(), shift.clone()],
            |x, _, g, n| {
                Ok(vec![
                    if n[0] { Some(g.scale_spatial(&x[1])?) } else { None },
                    if n[1] { Some(g.mul(&x[0])?.sum_spatial()?) } else { None },
                    if n[2] { Some(g.sum_spatial()?) } else { None },
                ])
            },
        ))
    }

    fn scale_spatial(&self, scale: &Var<T>) -> Result<Var<T>> {
        let value = kernels::affine_spatial(self.value(), scale.value(), None)?;
        Ok(Self::op(value, "scale_spatial", vec![self.clone(), scale.clone()], |x, _, g, n| {
            Ok(vec![
                if n[0] { Some(g.scale_spatial(&x[1])?) } else { None },
                if n[1] { Some(g.mul(&x[0])?.sum_spatial()?) } else { None },
            ])
        }))
    }

    /// Instance normalisation without affine parameters.
    pub fn instance_norm(&self, eps: T) -> Result<Var<T>> {
        let (value, inv_std) = kernels::instance_norm(self.value(), eps)?;
        Ok(Self::op(value, "instance_norm", vec![self.clone()], move |x, y, g, _| {
            opaque("instance_norm", x, g)?;
            let gx = kernels::instance_norm_backward(g.value(), y.value(), &inv_std)?;
            Ok(vec![Some(Var::constant(gx))])
        }))
    }

    /// `op(self) x op(other)` for 2-d operands.
    pub fn matmul(&self, trans_a: bool, other: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        let value = kernels::matmul(self.value(), trans_a, other.value(), trans_b)?;
        Ok(Self::op(value, "matmul", vec![self.clone(), other.clone()], move |x, _, g, n| {
            let (a, b) = (&x[0], &x[1]);
            let ga = match (n[0], trans_a) {
                (false, _) => None,
                (true, false) => Some(g.matmul(false, b, !trans_b)?),
                (true, true) => Some(b.matmul(trans_b, g, true)?),
            };
            let gb = match (n[1], trans_b) {
                (false, _) => None,
                (true, false) => Some(a.matmul(!trans_a, g, false)?),
                (true, true) => Some(g.matmul(true, a, trans_a)?),
            };
            Ok(vec![ga, gb])
        }))
    }

    /// Columns `[start, start+len)` of a 2-d tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Var<T>> {
        let (r, c) = self.value().dims2()?;
        if start + len > c {
            return Err(TensorError::Index {
                op: "narrow_cols",
                index: start + len,
                bound: c,
            });
        }
        let d = self.value().data();
        let value: Vec<T> = (0..r).flat_map(|i| d[i * c + start..i * c + start + len].iter().copied()).collect();
        let value = Tensor::new_unchecked(value, &[r, len]);
        Ok(Self::op(value, "narrow_cols", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.embed_cols(start, c)?)])
        }))
    }

    /// Place a `[R, L]` tensor at column `start` of a zero `[R, total]`.
    pub fn embed_cols(&self, start: usize, total: usize) -> Result<Var<T>> {
        let (r, len) = self.value().dims2()?;
        if start + len > total {
            return Err(TensorError::Index {
                op: "embed_cols",
                index: start + len,
                bound: total,
            });
        }
        let mut out = vec![T::zero(); r * total];
        for (i, row) in self.value().data().chunks(len.max(1)).take(r).enumerate() {
            out[i * total + start..i * total + start + len].copy_from_slice(row);
        }
        let value = Tensor::new_unchecked(out, &[r, total]);
        Ok(Self::op(value, "embed_cols", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.narrow_cols(start, len)?)])
        }))
    }

    /// Mean over consecutive groups of `k` along the leading axis, exactly
    /// invariant to the order within each group.
    pub fn group_mean(&self, k: usize) -> Result<Var<T>> {
        let value = kernels::group_mean_sorted(self.value(), k)?;
        Ok(Self::op(value, "group_mean", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.group_repeat(k)?)])
        }))
    }

    fn group_repeat(&self, k: usize) -> Result<Var<T>> {
        let inv = T::one() / T::from_usize(k).unwrap();
        let value = kernels::group_repeat(self.value(), k, inv);
        Ok(Self::op(value, "group_repeat", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.group_mean(k)?)])
        }))
    }

    /// Spatial mean of channel `classes[b]` for each sample, `[B,S,h,w] -> [B]`.
    pub fn select_channel_mean(&self, classes: &[usize]) -> Result<Var<T>> {
        let value = kernels::select_channel_mean(self.value(), classes)?;
        let classes = classes.to_vec();
        let shape = self.shape().to_vec();
        Ok(Self::op(value, "select_channel_mean", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.select_channel_adjoint(&classes, &shape)?)])
        }))
    }

    fn select_channel_adjoint(&self, classes: &[usize], shape: &[usize]) -> Result<Var<T>> {
        let value = kernels::select_channel_mean_adjoint(self.value(), classes, shape)?;
        let classes = classes.to_vec();
        Ok(Self::op(value, "select_channel_adjoint", vec![self.clone()], move |_, _, g, _| {
            Ok(vec![Some(g.select_channel_mean(&classes)?)])
        }))
    }

    /// Mean cross-entropy of `[N, C]` logits against integer labels, with
    /// optional per-sample weights (normalised by their sum).
    pub fn cross_entropy(&self, labels: &[usize], weights: Option<&[T]>) -> Result<Var<T>> {
        let (n, c) = self.value().dims2()?;
        if labels.len() != n || weights.is_some_and(|w| w.len() != n) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                expected: vec![n],
                got: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let w: Vec<T> = weights.map_or_else(|| vec![T::one(); n], <[T]>::to_vec);
        let wsum = w.iter().copied().sum::<T>();
        let logp = kernels::log_softmax(self.value())?;
        let loss = labels.iter().enumerate().map(|(i, &l)| -logp.data()[i * c + l] * w[i]).sum::<T>() / wsum;
        let labels = labels.to_vec();
        Ok(Self::op(
            Tensor::scalar(loss),
            "cross_entropy",
            vec![self.clone()],
            move |x, _, g, _| {
                opaque("cross_entropy", x, g)?;
                let scale = g.value().item() / wsum;
                let mut d: Vec<T> = logp.data().iter().map(|v| v.exp()).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= T::one();
                    for v in &mut d[i * c..(i + 1) * c] {
                        *v *= w[i] * scale;
                    }
                }
                Ok(vec![Some(Var::constant(Tensor::new_unchecked(d, &[n, c])))])
            },
        ))
    }
}

/// Convenience: a leaf that requires grad.
pub fn param<T: Float>(t: Tensor<T>) -> Var<T> {
    Var::leaf(t, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Central finite difference of `f` at `x` along every coordinate.
    fn fd(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.make_mut()[i] += h;
                let mut m = x.clone();
                m.make_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(x: &Tensor<f64>, f: impl Fn(&Var<f64>) -> Var<f64>) {
        let v = param(x.clone());
        let g = grad(&f(&v), &[&v], false).unwrap().remove(0);
        let num = fd(x, &|t| f(&Var::constant(t.clone())).value().item());
        for (a, b) in g.value().data().iter().zip(&num) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn elementwise_grads() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let c = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        check(&x, |v| v.mul(v).unwrap().sum());
        check(&x, |v| v.leaky_relu(0.2).mul_const(&c).unwrap().sum());
        check(&x, |v| v.tanh().mul_const(&c).unwrap().sum());
        check(&x, |v| v.softplus().mul_const(&c).unwrap().sum());
        check(&x, |v| v.abs().add_scalar(1.0).mean());
        check(&x, |v| v.instance_norm(1e-5).unwrap().mul_const(&c).unwrap().sum());
        check(&x, |v| v.avg_pool2().unwrap().upsample2(0.5).unwrap().mul_const(&c).unwrap().sum());
        check(&x, |v| v.mean_spatial().unwrap().mul(&v.mean_spatial().unwrap()).unwrap().sum());
        check(&x, |v| {
            v.select_channel_mean(&[2, 0])
                .unwrap()
                .mul(&v.select_channel_mean(&[1, 1]).unwrap())
                .unwrap()
                .sum()
        });
    }

    #[test]
    fn conv_and_matmul_grads() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 4, 4], 0.3, &mut r);
        let b = Tensor::randn(&[4], 1.0, &mut r);
        let spec = ConvSpec::new(2, 1);
        let wc = w.clone();
        check(&x, move |v| v.conv2d(&Var::constant(wc.clone()), spec).unwrap().relu().sum());
        let xc = x.clone();
        check(&w, move |v| {
            Var::constant(xc.clone())
                .conv2d(v, spec)
                .unwrap()
                .add_channel(&Var::constant(b.clone()))
                .unwrap()
                .relu()
                .sum()
        });
        let a = Tensor::randn(&[3, 5], 1.0, &mut r);
        let m = Tensor::randn(&[4, 5], 1.0, &mut r);
        check(&a, |v| v.matmul(false, &Var::constant(m.clone()), true).unwrap().tanh().sum());
        check(&a, |v| {
            v.narrow_cols(1, 3).unwrap().mul(&v.narrow_cols(2, 3).unwrap()).unwrap().sum()
        });
    }

    #[test]
    fn affine_and_group_mean_grads() {
        let mut r = rng();
        let x = Tensor::randn(&[4, 3, 2, 2], 1.0, &mut r);
        let s = Tensor::randn(&[4, 3], 1.0, &mut r);
        let xc = x.clone();
        check(&s, move |v| {
            Var::constant(xc.clone()).affine_spatial(v, &v.scale(0.5)).unwrap().tanh().sum()
        });
        check(&x, |v| v.group_mean(2).unwrap().tanh().sum());
        let labels = [0usize, 2, 1, 2];
        check(&s, move |v| v.cross_entropy(&labels, Some(&[1.0, 0.5, 0.25, 1.0])).unwrap());
    }

    /// d/dw of ||d/dx sum(leaky(conv(x, w)))||^2 against finite differences
    /// of the first-order gradient norm.
    #[test]
    fn second_order_through_conv_stack() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut r);
        let w1 = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let w2 = Tensor::randn(&[2, 3, 3, 3], 0.5, &mut r);
        let spec = ConvSpec::new(1, 1);
        let penalty = |w1v: &Var<f64>, create: bool| -> (Var<f64>, Var<f64>) {
            let xv = param(x.clone());
            let h = xv.conv2d(w1v, spec).unwrap().leaky_relu(0.2);
            let h = h.avg_pool2().unwrap();
            let w2v = Var::constant(w2.clone());
            let out = h.leaky_relu(0.2).conv2d(&w2v, spec).unwrap();
            let s = out.select_channel_mean(&[1, 0]).unwrap().sum();
            let gx = grad(&s, &[&xv], create).unwrap().remove(0);
            (gx.mul(&gx).unwrap().sum(), xv)
        };
        let w1v = param(w1.clone());
        let (p, _) = penalty(&w1v, true);
        let g = grad(&p, &[&w1v], false).unwrap().remove(0);
        let num = fd(&w1, &|t| penalty(&Var::constant(t.clone()), false).0.value().item());
        for (a, b) in g.value().data().iter().zip(&num) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn opaque_ops_refuse_create_graph() {
        let x = param(Tensor::<f64>::ones(&[1, 1, 2, 2]));
        let y = x.instance_norm(1e-5).unwrap().sum();
        assert!(grad(&y, &[&x], true).is_err());
        assert!(grad(&y, &[&x], false).is_ok());
    }

    #[test]
    fn unrelated_target_gets_zeros() {
        let a = param(Tensor::<f32>::ones(&[3]));
        let b = param(Tensor::<f32>::ones(&[2]));
        let g = grad(&a.sum(), &[&b], false).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }
}
