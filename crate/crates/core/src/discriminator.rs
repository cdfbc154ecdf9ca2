//! Multi-task patch discriminator: one real/fake map per training class
//! from a stack of activation-first residual blocks.

use kshot_tensor::{Conv2d, ConvSpec, Float, ParamId, ParamStore, Params, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Output channels of each stage as multiples of `base_channels`. A 2x2
    /// average pool sits between consecutive stages.
    pub stage_multipliers: Vec<usize>,
    pub blocks_per_stage: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            stage_multipliers: vec![2, 4, 8],
            blocks_per_stage: 2,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    /// The five-stage chain used at 128x128.
    pub fn full_scale() -> Self {
        Self {
            stage_multipliers: vec![2, 4, 8, 16, 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.blocks_per_stage == 0 {
            return Err(Error::config("discriminator channel and block counts must be positive"));
        }
        if self.stage_multipliers.is_empty() || self.stage_multipliers.contains(&0) {
            return Err(Error::config("discriminator.stage_multipliers must be non-empty and positive"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::config("discriminator.leaky_slope must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn pools(&self) -> usize {
        self.stage_multipliers.len() - 1
    }

    /// Side of the decision maps for a given input side.
    pub fn output_size(&self, image_size: usize) -> Result<usize> {
        let f = 1usize << self.pools();
        if image_size == 0 || image_size % f != 0 {
            return Err(Error::config(format!(
                "image_size {image_size} is not divisible by the discriminator's pooling factor {f}"
            )));
        }
        Ok(image_size / f)
    }

    pub fn feature_channels(&self) -> usize {
        self.base_channels * self.stage_multipliers.last().copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone)]
struct ActFirstBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub n_classes: usize,
    pub image_size: usize,
    stem: Conv2d,
    /// Blocks grouped by stage.
    stages: Vec<Vec<ActFirstBlock>>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new<T: Float, R: Rng + ?Sized>(
        cfg: &DiscriminatorConfig,
        image_size: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        cfg.output_size(image_size)?;
        if n_classes == 0 {
            return Err(Error::config("discriminator needs at least one class"));
        }
        let mut s = ParamStore::new();
        let nf = cfg.base_channels;
        let stem = Conv2d::same(&mut s, "disc.stem", 3, nf, 7, rng);
        let mut cin = nf;
        let mut stages = Vec::with_capacity(cfg.stage_multipliers.len());
        for (si, &m) in cfg.stage_multipliers.iter().enumerate() {
            let cout = nf * m;
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for bi in 0..cfg.blocks_per_stage {
                let name = format!("disc.s{si}b{bi}");
                let skip =
                    (cin != cout).then(|| Conv2d::new(&mut s, &format!("{name}.skip"), cin, cout, 1, ConvSpec::new(1, 0), false, rng));
                blocks.push(ActFirstBlock {
                    conv1: Conv2d::same(&mut s, &format!("{name}.conv1"), cin, cout, 3, rng),
                    conv2: Conv2d::same(&mut s, &format!("{name}.conv2"), cout, cout, 3, rng),
                    skip,
                });
                cin = cout;
            }
            stages.push(blocks);
        }
        let head = Conv2d::new(&mut s, "disc.head", cin, n_classes, 1, ConvSpec::new(1, 0), true, rng);
        Ok((
            Self {
                cfg: cfg.clone(),
                n_classes,
                image_size,
                stem,
                stages,
                head,
            },
            s,
        ))
    }

    pub fn head_weight(&self) -> ParamId {
        self.head.weight
    }

    pub fn head_bias(&self) -> ParamId {
        self.head.bias.expect("head has a bias")
    }

    fn slope<T: Float>(&self) -> T {
        T::from_f64_lossy(self.cfg.leaky_slope)
    }

    /// Activations feeding the prediction layer, `[B, C_f, h, w]`.
    pub fn extract_features<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = self.image_size;
        if !matches!(x.shape(), &[_, 3, h, w] if h == s && w == s) {
            return Err(Error::contract(format!(
                "discriminator input: expected [B,3,{s},{s}], got {:?}",
                x.shape()
            )));
        }
        let a = self.slope::<T>();
        let mut h = self.stem.forward(p, x)?;
        for (si, blocks) in self.stages.iter().enumerate() {
            if si > 0 {
                h = h.avg_pool2()?;
            }
            for b in blocks {
                let r = b.conv1.forward(p, &h.leaky_relu(a))?;
                let r = b.conv2.forward(p, &r.leaky_relu(a))?;
                let skip = match &b.skip {
                    Some(c) => c.forward(p, &h)?,
                    None => h,
                };
                h = skip.add(&r)?;
            }
        }
        Ok(h.leaky_relu(a))
    }

    /// Prediction layer applied to features.
    pub fn head<T: Float>(&self, p: &Params<T>, features: &Var<T>) -> Result<Var<T>> {
        Ok(self.head.forward(p, features)?)
    }

    /// Per-class decision maps, `[B, n_classes, h, w]`.
    pub fn discriminate<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        self.head(p, &self.extract_features(p, x)?)
    }

    /// Features and decision maps from one pass.
    pub fn forward_both<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let f = self.extract_features(p, x)?;
        let logits = self.head(p, &f)?;
        Ok((f, logits))
    }

    pub fn discriminate_tensor<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.discriminate(&store.vars(false), &Var::constant(x.clone()))?.value().clone())
    }
}

/// Spatial mean of channel `classes[b]` of sample `b`'s decision maps.
pub fn select_class_score<T: Float>(logits: &Var<T>, classes: &[usize]) -> Result<Var<T>> {
    let c = logits.shape().get(1).copied().unwrap_or(0);
    if let Some(bad) = classes.iter().find(|&&k| k >= c) {
        return Err(Error::contract(format!("class {bad} out of range for {c} decision maps")));
    }
    Ok(logits.select_channel_mean(classes)?)
}
