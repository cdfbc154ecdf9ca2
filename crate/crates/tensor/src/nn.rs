//! Parameter storage and the two parametric layers every network here is
//! built from.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::kernels::ConvSpec;
use crate::var::Var;
use crate::{Float, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Float> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a tensor. Panics on a duplicate name, which is a bug in the
    /// network constructor rather than a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Wrap every tensor in a [`Var`] for one forward/backward pass.
    pub fn vars(&self, requires_grad: bool) -> Params<T> {
        Params(self.tensors.iter().map(|t| Var::leaf(t.clone(), requires_grad)).collect())
    }

    /// Same names and shapes in the same order.
    pub fn congruent(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// `self <- (1 - w) * self + w * other`, tensor by tensor.
    pub fn lerp_toward(&mut self, other: &Self, w: T) -> Result<()> {
        if !self.congruent(other) {
            return Err(TensorError::Invalid {
                op: "lerp_toward",
                msg: "parameter stores are not congruent".into(),
            });
        }
        // Written as x + w (y - x) so equal entries stay bit-identical.
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            let dst = a.make_mut();
            for (x, &y) in dst.iter_mut().zip(b.data()) {
                *x = if w == T::one() { y } else { *x + (y - *x) * w };
            }
        }
        Ok(())
    }

    /// Replace tensors with `other`'s, checking names and shapes.
    pub fn assign(&mut self, other: &Self) -> Result<()> {
        if !self.congruent(other) {
            return Err(TensorError::Invalid {
                op: "assign",
                msg: "parameter stores are not congruent".into(),
            });
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bits_eq(b))
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// The [`Var`]s of a [`ParamStore`] for a single pass, indexable by
/// [`ParamId`].
pub struct Params<T: Float>(pub Vec<Var<T>>);

impl<T: Float> Index<ParamId> for Params<T> {
    type Output = Var<T>;

    fn index(&self, id: ParamId) -> &Var<T> {
        &self.0[id.0]
    }
}

impl<T: Float> Params<T> {
    pub fn as_refs(&self) -> Vec<&Var<T>> {
        self.0.iter().collect()
    }
}

/// Fan-in scaled normal initialisation, `std = gain / sqrt(fan_in)`.
pub fn kaiming_normal<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, gain / (fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = kaiming_normal(&[out_channels, in_channels, kernel, kernel], fan_in, 2f64.sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// `kernel x kernel` convolution with "same" padding.
    pub fn same<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(
            store,
            name,
            in_channels,
            out_channels,
            kernel,
            ConvSpec::new(1, kernel / 2),
            true,
            rng,
        )
    }

    pub fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = x.conv2d(&p[self.weight], self.spec)?;
        match self.bias {
            Some(b) => y.add_channel(&p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = kaiming_normal(&[out_features, in_features], in_features, gain, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// `x [N, in] -> [N, out]`.
    pub fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        x.matmul(false, &p[self.weight], true)?.add_channel(&p[self.bias])
    }
}
