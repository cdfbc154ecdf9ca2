//! Compact convolutional classifier used for translation accuracy, IS, FID
//! features, perceptual distance maps and few-shot probe features.

use kshot_tensor::kernels::softmax;
use kshot_tensor::{grad, Adam, Conv2d, Float, Linear, ParamStore, Params, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, ImageRef};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Output channels of the three conv layers.
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub min_images: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            epochs: 12,
            batch_size: 32,
            lr: 2e-3,
            holdout_fraction: 0.2,
            min_images: 10,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 3 || self.channels.contains(&0) {
            return Err(Error::config("classifier.channels must list three positive widths"));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::config("classifier.batch_size and lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("classifier.holdout_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Net {
    convs: [Conv2d; 3],
    head: Linear,
}

/// What a forward pass exposes.
pub struct ClassifierOutput<T: Float> {
    /// Last conv activations, `[N, C, h, w]`.
    pub maps: Var<T>,
    /// Global-average-pooled maps, `[N, C]`.
    pub features: Var<T>,
    pub logits: Var<T>,
}

impl Net {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore<f32>, ch: &[usize], n_classes: usize, rng: &mut R) -> Self {
        let convs = [
            Conv2d::same(store, "clf.conv0", 3, ch[0], 3, rng),
            Conv2d::same(store, "clf.conv1", ch[0], ch[1], 3, rng),
            Conv2d::same(store, "clf.conv2", ch[1], ch[2], 3, rng),
        ];
        let head = Linear::new(store, "clf.head", ch[2], n_classes, 1.0, rng);
        Self { convs, head }
    }

    fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Result<ClassifierOutput<T>> {
        let h = self.convs[0].forward(p, x)?.relu().avg_pool2()?;
        let h = self.convs[1].forward(p, &h)?.relu().avg_pool2()?;
        let maps = self.convs[2].forward(p, &h)?.relu();
        let features = maps.mean_spatial()?;
        let logits = self.head.forward(p, &features)?;
        Ok(ClassifierOutput { maps, features, logits })
    }
}

#[derive(Debug, Clone)]
pub struct EvalClassifier {
    net: Net,
    pub params: ParamStore<f32>,
    /// Global labels in output order.
    pub classes: Vec<usize>,
    pub holdout_accuracy: f64,
    pub feature_dim: usize,
}

const INFER_CHUNK: usize = 256;

impl EvalClassifier {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Output index of a global label.
    pub fn local(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    /// Forward pass in chunks; returns `(maps, features, probabilities)` as
    /// requested.
    fn infer(&self, images: &Tensor<f32>, want_maps: bool) -> Result<(Option<Tensor<f32>>, Tensor<f32>, Tensor<f32>)> {
        let n = images.shape()[0];
        let p = self.params.vars(false);
        let (mut maps, mut feats, mut probs) = (Vec::new(), Vec::new(), Vec::new());
        let mut start = 0;
        while start < n {
            let len = INFER_CHUNK.min(n - start);
            let out = self.net.forward(&p, &Var::constant(images.narrow0(start, len)?))?;
            if want_maps {
                maps.push(out.maps.value().clone());
            }
            feats.push(out.features.value().clone());
            probs.push(softmax(out.logits.value())?);
            start += len;
        }
        if n == 0 {
            let f = self.feature_dim;
            return Ok((None, Tensor::zeros(&[0, f]), Tensor::zeros(&[0, self.n_classes()])));
        }
        let maps = if want_maps { Some(Tensor::cat0(&maps)?) } else { None };
        Ok((maps, Tensor::cat0(&feats)?, Tensor::cat0(&probs)?))
    }

    pub fn probabilities(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.infer(images, false)?.2)
    }

    /// Penultimate features, `[N, feature_dim]`.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.infer(images, false)?.1)
    }

    /// Last convolutional feature maps.
    pub fn feature_maps(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.infer(images, true)?.0.expect("maps requested"))
    }

    /// Features and probabilities from one pass.
    pub fn features_and_probabilities(&self, images: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (_, f, p) = self.infer(images, false)?;
        Ok((f, p))
    }
}

fn split_class(n: usize, holdout_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_hold = if holdout_fraction > 0.0 {
        ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let hold = idx[..n_hold].to_vec();
    (idx[n_hold..].to_vec(), hold)
}

fn top1(probs: &Tensor<f32>, targets: &[usize]) -> f64 {
    let c = probs.shape()[1];
    let hits = probs
        .data()
        .chunks(c)
        .zip(targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == t
        })
        .count();
    100.0 * hits as f64 / targets.len().max(1) as f64
}

/// Train a classifier over `classes` (global labels) of `corpus`, holding out
/// a per-class fraction for the recorded accuracy.
pub fn train_eval_classifier(corpus: &Corpus, classes: &[usize], cfg: &ClassifierConfig) -> Result<EvalClassifier> {
    cfg.validate()?;
    if classes.len() < 2 {
        return Err(Error::config("classifier needs at least two classes"));
    }
    if corpus.image_size() % 4 != 0 {
        return Err(Error::config("classifier needs an image size divisible by 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for (local, &label) in classes.iter().enumerate() {
        let n = corpus.class_len(label);
        if n < cfg.min_images {
            return Err(Error::config(format!(
                "class `{}` has {n} images, the classifier needs at least {}",
                corpus.index.classes[label].name, cfg.min_images
            )));
        }
        let (tr, ho) = split_class(n, cfg.holdout_fraction, &mut rng);
        train.extend(tr.into_iter().map(|index| (ImageRef { label, index }, local)));
        hold.extend(ho.into_iter().map(|index| (ImageRef { label, index }, local)));
    }
    let mut params = ParamStore::new();
    let net = Net::new(&mut params, &cfg.channels, classes.len(), &mut rng);
    let mut opt = Adam::new(&params, cfg.lr as f32);
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(cfg.batch_size) {
            let refs: Vec<ImageRef> = chunk.iter().map(|(r, _)| *r).collect();
            let labels: Vec<usize> = chunk.iter().map(|(_, l)| *l).collect();
            let flips: Vec<bool> = (0..refs.len()).map(|_| rng.random_bool(0.5)).collect();
            let x = Var::constant(corpus.stack::<f32>(&refs, Some(&flips)));
            let p = params.vars(true);
            let loss = net.forward(&p, &x)?.logits.cross_entropy(&labels, None)?;
            if !loss.value().item().is_finite() {
                return Err(Error::Numerical("classifier loss diverged".into()));
            }
            let grads: Vec<Tensor<f32>> = grad(&loss, &p.as_refs(), false)?.into_iter().map(|g| g.value().clone()).collect();
            opt.step(&mut params, &grads)?;
        }
    }
    let mut clf = EvalClassifier {
        net,
        params,
        classes: classes.to_vec(),
        holdout_accuracy: f64::NAN,
        feature_dim: cfg.channels[2],
    };
    if !hold.is_empty() {
        let refs: Vec<ImageRef> = hold.iter().map(|(r, _)| *r).collect();
        let labels: Vec<usize> = hold.iter().map(|(_, l)| *l).collect();
        let probs = clf.probabilities(&corpus.stack(&refs, None))?;
        clf.holdout_accuracy = top1(&probs, &labels);
        log::info!(
            "evaluation classifier over {} classes: held-out top-1 {:.2}%",
            classes.len(),
            clf.holdout_accuracy
        );
    }
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_corpus;

    #[test]
    fn target_only_head_size_and_determinism() {
        let corpus = synthetic_corpus(5, 12, 16, 1).unwrap();
        let cfg = ClassifierConfig {
            channels: vec![4, 4, 8],
            epochs: 1,
            ..Default::default()
        };
        let targets = corpus.spec.target_labels();
        let classes: Vec<usize> = (0..corpus.spec.n_classes()).collect();
        let a = train_eval_classifier(&corpus, &classes, &cfg).unwrap();
        let b = train_eval_classifier(&corpus, &classes, &cfg).unwrap();
        assert!(a.params.bits_eq(&b.params));
        assert_eq!(a.n_classes(), 5);
        assert_eq!(targets.len(), 1);
        let x = corpus.stack::<f32>(&corpus.refs_of(0), None);
        assert_eq!(a.probabilities(&x).unwrap().shape(), &[12, 5]);
        assert_eq!(a.features(&x).unwrap().shape(), &[12, 8]);
        assert_eq!(a.feature_maps(&x).unwrap().shape(), &[12, 8, 4, 4]);
    }

    #[test]
    fn too_few_images_is_config_error() {
        let corpus = synthetic_corpus(4, 5, 16, 1).unwrap();
        let e = train_eval_classifier(&corpus, &[0, 1], &ClassifierConfig::default()).unwrap_err();
        assert!(e.is_usage());
    }
}
