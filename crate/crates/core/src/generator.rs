//! Few-shot translator: content encoder, K-shot class encoder and an
//! AdaIN residual decoder.

use kshot_tensor::{Conv2d, ConvSpec, Float, Linear, ParamStore, Params, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// How the decoder head's scale outputs become AdaIN scales.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Used as is.
    #[default]
    Direct,
    /// Passed through softplus, keeping scales positive.
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// Stride-2 convolutions in the content encoder (and upsampling stages
    /// in the decoder).
    pub downsamples: usize,
    pub base_channels: usize,
    pub content_resblocks: usize,
    pub adain_resblocks: usize,
    /// Stride-2 convolutions in the class encoder before global pooling.
    pub class_downsamples: usize,
    pub class_code_dim: usize,
    pub mlp_hidden: usize,
    pub scale_mode: ScaleMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            downsamples: 2,
            base_channels: 64,
            content_resblocks: 2,
            adain_resblocks: 2,
            class_downsamples: 3,
            class_code_dim: 64,
            mlp_hidden: 256,
            scale_mode: ScaleMode::Direct,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("base_channels", self.base_channels),
            ("adain_resblocks", self.adain_resblocks),
            ("class_code_dim", self.class_code_dim),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("generator.{name} must be positive")));
        }
        for (name, d) in [("downsamples", self.downsamples), ("class_downsamples", self.class_downsamples)] {
            if d >= usize::BITS as usize || self.image_size % (1 << d) != 0 {
                return Err(Error::config(format!(
                    "generator.image_size {} is not divisible by 2^{name} = 2^{d}",
                    self.image_size
                )));
            }
        }
        Ok(())
    }

    /// Channels of the content code.
    pub fn content_channels(&self) -> usize {
        self.base_channels << self.downsamples
    }

    /// Side of the content code.
    pub fn content_size(&self) -> usize {
        self.image_size >> self.downsamples
    }

    /// Width of the decoder head's output: scale and shift per channel for
    /// each of the two AdaIN layers of every AdaIN residual block.
    pub fn adain_param_count(&self) -> usize {
        self.adain_resblocks * 2 * 2 * self.content_channels()
    }
}

/// `scale * instance_norm(h) + shift`, per sample and channel.
pub fn adain<T: Float>(h: &Var<T>, scale: &Var<T>, shift: &Var<T>) -> Result<Var<T>> {
    Ok(h.instance_norm(T::from_f64_lossy(NORM_EPS))?.affine_spatial(scale, shift)?)
}

fn norm<T: Float>(x: &Var<T>) -> Result<Var<T>> {
    Ok(x.instance_norm(T::from_f64_lossy(NORM_EPS))?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::same(store, &format!("{name}.conv1"), ch, ch, 3, rng),
            conv2: Conv2d::same(store, &format!("{name}.conv2"), ch, ch, 3, rng),
        }
    }

    fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = norm(&self.conv1.forward(p, x)?)?.relu();
        let h = norm(&self.conv2.forward(p, &h)?)?;
        Ok(x.add(&h)?)
    }

    /// Same block with AdaIN in place of instance norm; `params` holds
    /// `(scale, shift)` for each of the two layers.
    fn forward_adain<T: Float>(&self, p: &Params<T>, x: &Var<T>, params: &[(Var<T>, Var<T>)]) -> Result<Var<T>> {
        let h = self.conv1.forward(p, x)?;
        let h = adain(&h, &params[0].0, &params[0].1)?.relu();
        let h = self.conv2.forward(p, &h)?;
        let h = adain(&h, &params[1].0, &params[1].1)?;
        Ok(x.add(&h)?)
    }
}

#[derive(Debug, Clone)]
struct ContentEncoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
struct ClassEncoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct Decoder {
    fc1: Linear,
    fc2: Linear,
    blocks: Vec<ResBlock>,
    ups: Vec<Conv2d>,
    out: Conv2d,
}

/// Architecture of the translator. Parameters live in a separate
/// [`ParamStore`] so the same structure drives the trained and the
/// averaged weights.
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    content: ContentEncoder,
    class: ClassEncoder,
    decoder: Decoder,
}

impl Generator {
    pub fn new<T: Float, R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut s = ParamStore::new();
        let nf = cfg.base_channels;
        let down = ConvSpec::new(2, 1);

        let stem = Conv2d::same(&mut s, "content.stem", 3, nf, 7, rng);
        let downs = (0..cfg.downsamples)
            .map(|i| Conv2d::new(&mut s, &format!("content.down{i}"), nf << i, nf << (i + 1), 4, down, true, rng))
            .collect();
        let cz = cfg.content_channels();
        let blocks = (0..cfg.content_resblocks)
            .map(|i| ResBlock::new(&mut s, &format!("content.res{i}"), cz, rng))
            .collect();
        let content = ContentEncoder { stem, downs, blocks };

        let stem = Conv2d::same(&mut s, "class.stem", 3, nf, 7, rng);
        let downs: Vec<Conv2d> = (0..cfg.class_downsamples)
            .map(|i| Conv2d::new(&mut s, &format!("class.down{i}"), nf << i, nf << (i + 1), 4, down, true, rng))
            .collect();
        let top = nf << cfg.class_downsamples;
        let proj = Linear::new(&mut s, "class.proj", top, cfg.class_code_dim, 1.0, rng);
        let class = ClassEncoder { stem, downs, proj };

        let fc1 = Linear::new(&mut s, "decoder.fc1", cfg.class_code_dim, cfg.mlp_hidden, 2f64.sqrt(), rng);
        let fc2 = Linear::new(&mut s, "decoder.fc2", cfg.mlp_hidden, cfg.adain_param_count(), 0.1, rng);
        // Scale outputs start at 1 so the untrained decoder keeps unit statistics.
        let unit = match cfg.scale_mode {
            ScaleMode::Direct => 1.0,
            ScaleMode::Softplus => (1f64.exp() - 1.0).ln(),
        };
        {
            let bias = s.get_mut(fc2.bias).make_mut();
            for (i, b) in bias.iter_mut().enumerate() {
                if (i / cz) % 2 == 0 {
                    *b = T::from_f64_lossy(unit);
                }
            }
        }
        let blocks = (0..cfg.adain_resblocks)
            .map(|i| ResBlock::new(&mut s, &format!("decoder.res{i}"), cz, rng))
            .collect();
        let ups = (0..cfg.downsamples)
            .map(|i| {
                let cin = cz >> i;
                Conv2d::same(&mut s, &format!("decoder.up{i}"), cin, cin / 2, 5, rng)
            })
            .collect();
        let out = Conv2d::same(&mut s, "decoder.out", nf, 3, 7, rng);
        let decoder = Decoder {
            fc1,
            fc2,
            blocks,
            ups,
            out,
        };

        Ok((
            Self {
                cfg: cfg.clone(),
                content,
                class,
                decoder,
            },
            s,
        ))
    }

    fn check_images<T: Float>(&self, x: &Var<T>, what: &str) -> Result<usize> {
        let s = self.cfg.image_size;
        match x.shape() {
            &[b, 3, h, w] if h == s && w == s => Ok(b),
            other => Err(Error::contract(format!("{what}: expected [B,3,{s},{s}], got {other:?}"))),
        }
    }

    /// `[B,3,H,W] -> [B, C_z, H/2^d, W/2^d]`.
    pub fn encode_content<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        self.check_images(x, "content images")?;
        let e = &self.content;
        let mut h = norm(&e.stem.forward(p, x)?)?.relu();
        for c in &e.downs {
            h = norm(&c.forward(p, &h)?)?.relu();
        }
        for b in &e.blocks {
            h = b.forward(p, &h)?;
        }
        Ok(h)
    }

    /// Per-image class embeddings, `[N,3,H,W] -> [N, d_y]`.
    pub fn class_embeddings<T: Float>(&self, p: &Params<T>, ys: &Var<T>) -> Result<Var<T>> {
        self.check_images(ys, "class images")?;
        let e = &self.class;
        let mut h = e.stem.forward(p, ys)?.relu();
        for c in &e.downs {
            h = c.forward(p, &h)?.relu();
        }
        Ok(e.proj.forward(p, &h.mean_spatial()?)?)
    }

    /// K-shot class code. `ys` is sample-major `[B*K, 3, H, W]`; the mean over
    /// each group of K is exactly invariant to the order within the group.
    pub fn encode_class<T: Float>(&self, p: &Params<T>, ys: &Var<T>, k: usize) -> Result<Var<T>> {
        let n = self.check_images(ys, "class images")?;
        if k == 0 || n == 0 || n % k != 0 {
            return Err(Error::contract(format!("{n} class images cannot form groups of K={k}")));
        }
        Ok(self.class_embeddings(p, ys)?.group_mean(k)?)
    }

    /// `(scale, shift)` pairs, two per AdaIN residual block, each `[B, C_z]`.
    pub fn adain_params<T: Float>(&self, p: &Params<T>, class_code: &Var<T>) -> Result<Vec<(Var<T>, Var<T>)>> {
        let d = &self.decoder;
        let raw = d.fc2.forward(p, &d.fc1.forward(p, class_code)?.relu())?;
        let cz = self.cfg.content_channels();
        (0..self.cfg.adain_resblocks * 2)
            .map(|i| {
                let scale = raw.narrow_cols(2 * i * cz, cz)?;
                let shift = raw.narrow_cols((2 * i + 1) * cz, cz)?;
                let scale = match self.cfg.scale_mode {
                    ScaleMode::Direct => scale,
                    ScaleMode::Softplus => scale.softplus(),
                };
                Ok((scale, shift))
            })
            .collect()
    }

    pub fn decode<T: Float>(&self, p: &Params<T>, content_code: &Var<T>, class_code: &Var<T>) -> Result<Var<T>> {
        let (b, cz, hs) = (content_code.shape()[0], self.cfg.content_channels(), self.cfg.content_size());
        if content_code.shape() != [b, cz, hs, hs] {
            return Err(Error::contract(format!(
                "content code: expected [B,{cz},{hs},{hs}], got {:?}",
                content_code.shape()
            )));
        }
        if class_code.shape() != [b, self.cfg.class_code_dim] {
            return Err(Error::contract(format!(
                "class code {:?} does not match batch {b}",
                class_code.shape()
            )));
        }
        let d = &self.decoder;
        let params = self.adain_params(p, class_code)?;
        let mut h = content_code.clone();
        for (i, blk) in d.blocks.iter().enumerate() {
            h = blk.forward_adain(p, &h, &params[2 * i..2 * i + 2])?;
        }
        for up in &d.ups {
            h = norm(&up.forward(p, &h.upsample2(T::one())?)?)?.relu();
        }
        Ok(d.out.forward(p, &h)?.tanh())
    }

    /// Translate content images `x [B,...]` using `ys [B*K,...]`.
    pub fn translate<T: Float>(&self, p: &Params<T>, x: &Var<T>, ys: &Var<T>, k: usize) -> Result<Var<T>> {
        let b = self.check_images(x, "content images")?;
        if ys.shape().first() != Some(&(b * k)) {
            return Err(Error::contract(format!(
                "expected {} class images for batch {b} and K={k}, got {:?}",
                b * k,
                ys.shape()
            )));
        }
        let zx = self.encode_content(p, x)?;
        let zy = self.encode_class(p, ys, k)?;
        self.decode(p, &zx, &zy)
    }

    /// Inference-only translation over plain tensors.
    pub fn translate_tensor<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>, ys: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
        let p = store.vars(false);
        let out = self.translate(&p, &Var::constant(x.clone()), &Var::constant(ys.clone()), k)?;
        Ok(out.value().clone())
    }

    /// Class codes (K = 1) of plain images, `[N, d_y]`.
    pub fn class_codes<T: Float>(&self, store: &ParamStore<T>, ys: &Tensor<T>) -> Result<Tensor<T>> {
        let p = store.vars(false);
        Ok(self.class_embeddings(&p, &Var::constant(ys.clone()))?.value().clone())
    }

    pub fn content_codes<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let p = store.vars(false);
        Ok(self.encode_content(&p, &Var::constant(x.clone()))?.value().clone())
    }

    pub fn decode_tensor<T: Float>(&self, store: &ParamStore<T>, content_code: &Tensor<T>, class_code: &Tensor<T>) -> Result<Tensor<T>> {
        let p = store.vars(false);
        Ok(self
            .decode(&p, &Var::constant(content_code.clone()), &Var::constant(class_code.clone()))?
            .value()
            .clone())
    }

    /// Parameter id of the decoder head's weight (the last layer of the
    /// class-code pathway).
    pub fn class_head_weight(&self) -> kshot_tensor::ParamId {
        self.decoder.fc2.weight
    }
}
