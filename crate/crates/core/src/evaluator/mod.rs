//! Translation quality metrics over a fixed evaluation protocol.

pub mod classifier;
pub mod metrics;
pub mod tools;

use kshot_tensor::{ParamStore, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, ImageRef};
use crate::error::{Error, Result};
use crate::generator::Generator;

pub use classifier::{train_eval_classifier, ClassifierConfig, EvalClassifier};

/// Recorded in every report: which network produced the features.
pub const FEATURE_SPACE: &str = "internal-cnn (desk-scale classifier; not comparable to pretrained-backbone metrics)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Content images drawn from the source classes.
    pub content_images: usize,
    /// Class-image counts to evaluate.
    pub shots: Vec<usize>,
    pub is_splits: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            content_images: 200,
            shots: vec![1, 5],
            is_splits: 4,
            batch_size: 50,
            seed: 0,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content_images == 0 || self.batch_size == 0 || self.is_splits == 0 {
            return Err(Error::config("eval.content_images, batch_size and is_splits must be positive"));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::config("eval.shots must list positive K values"));
        }
        self.classifier.validate()
    }
}

/// One evaluation row. Keys follow the usual table column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "Top1-all")]
    pub top1_all: f64,
    #[serde(rename = "Top5-all")]
    pub top5_all: Option<f64>,
    #[serde(rename = "Top1-test")]
    pub top1_test: f64,
    #[serde(rename = "Top5-test")]
    pub top5_test: Option<f64>,
    #[serde(rename = "DIPD")]
    pub dipd: f64,
    #[serde(rename = "IS-all")]
    pub is_all: f64,
    #[serde(rename = "IS-test")]
    pub is_test: f64,
    #[serde(rename = "mFID")]
    pub mfid: f64,
    pub k: usize,
    pub step: u64,
    pub translator: String,
    pub feature_space: String,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 10] = [
        "K",
        "step",
        "Top1-all",
        "Top5-all",
        "Top1-test",
        "Top5-test",
        "DIPD",
        "IS-all",
        "IS-test",
        "mFID",
    ];

    /// Values in [`Self::COLUMNS`] order; missing top-5 entries are empty.
    pub fn row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        vec![
            self.k.to_string(),
            self.step.to_string(),
            format!("{:.4}", self.top1_all),
            opt(self.top5_all),
            format!("{:.4}", self.top1_test),
            opt(self.top5_test),
            format!("{:.6}", self.dipd),
            format!("{:.4}", self.is_all),
            format!("{:.4}", self.is_test),
            format!("{:.4}", self.mfid),
        ]
    }
}

/// Anything that maps content images and sample-major class images to
/// translated images.
pub trait Translator {
    fn name(&self) -> String;
    fn translate(&self, content: &Tensor<f32>, class_images: &Tensor<f32>, k: usize) -> Result<Tensor<f32>>;
}

pub struct GeneratorTranslator<'a> {
    pub gen: &'a Generator,
    pub params: &'a ParamStore<f32>,
}

impl<'a> GeneratorTranslator<'a> {
    pub fn new(gen: &'a Generator, params: &'a ParamStore<f32>) -> Self {
        Self { gen, params }
    }
}

impl Translator for GeneratorTranslator<'_> {
    fn name(&self) -> String {
        "generator".into()
    }

    fn translate(&self, content: &Tensor<f32>, class_images: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
        self.gen.translate_tensor(self.params, content, class_images, k)
    }
}

/// Returns the content image unchanged.
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn name(&self) -> String {
        "identity".into()
    }

    fn translate(&self, content: &Tensor<f32>, _: &Tensor<f32>, _: usize) -> Result<Tensor<f32>> {
        Ok(content.clone())
    }
}

/// K class images per (target class, content image).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSets {
    pub label: usize,
    pub sets: Vec<Vec<ImageRef>>,
}

/// Fixed inputs shared by every evaluated model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    pub k: usize,
    pub content: Vec<ImageRef>,
    pub targets: Vec<TargetSets>,
}

impl EvalProtocol {
    /// Content images are uniform over source classes then files; the
    /// content pool depends only on the seed, not on K.
    pub fn new(corpus: &Corpus, n_content: usize, k: usize, seed: u64) -> Result<Self> {
        let sources = corpus.spec.source_labels();
        if sources.is_empty() || corpus.spec.target_classes.is_empty() {
            return Err(Error::config("evaluation needs source and target classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let content = (0..n_content)
            .map(|_| {
                let label = sources[rng.random_range(0..sources.len())];
                ImageRef {
                    label,
                    index: rng.random_range(0..corpus.class_len(label)),
                }
            })
            .collect();
        let targets = corpus
            .spec
            .target_labels()
            .into_iter()
            .map(|label| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1 + label as u64);
                let n = corpus.class_len(label);
                let sets = (0..n_content)
                    .map(|_| {
                        let idx: Vec<usize> = if n >= k {
                            sample(&mut rng, n, k).into_vec()
                        } else {
                            (0..k).map(|_| rng.random_range(0..n)).collect()
                        };
                        idx.into_iter().map(|index| ImageRef { label, index }).collect()
                    })
                    .collect();
                TargetSets { label, sets }
            })
            .collect();
        Ok(Self { k, content, targets })
    }

    /// Number of translated images one evaluation scores.
    pub fn len(&self) -> usize {
        self.content.len() * self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Classifiers and protocols prepared once per corpus.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub cfg: EvalConfig,
    pub corpus: Corpus,
    /// Trained on every declared class.
    pub clf_all: EvalClassifier,
    /// Trained on target classes only.
    pub clf_test: EvalClassifier,
    pub protocols: Vec<EvalProtocol>,
    /// Features of every real image per target class, from `clf_all`.
    real_features: Vec<Vec<Vec<f64>>>,
}

/// Intermediate per-translation results.
#[derive(Default)]
struct Accum {
    probs_all: Vec<Vec<f64>>,
    targets_all: Vec<usize>,
    probs_test: Vec<Vec<f64>>,
    targets_test: Vec<usize>,
    dipd_sum: f64,
    dipd_n: usize,
    fids: Vec<f64>,
}

impl Evaluator {
    pub fn prepare(corpus: &Corpus, cfg: &EvalConfig) -> Result<Self> {
        let all: Vec<usize> = (0..corpus.spec.n_classes()).collect();
        let clf_all = train_eval_classifier(corpus, &all, &cfg.classifier)?;
        let clf_test = train_eval_classifier(corpus, &corpus.spec.target_labels(), &cfg.classifier)?;
        Self::with_classifiers(corpus, cfg, clf_all, clf_test)
    }

    pub fn with_classifiers(corpus: &Corpus, cfg: &EvalConfig, clf_all: EvalClassifier, clf_test: EvalClassifier) -> Result<Self> {
        cfg.validate()?;
        let protocols = cfg
            .shots
            .iter()
            .map(|&k| EvalProtocol::new(corpus, cfg.content_images, k, cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        let real_features = corpus
            .spec
            .target_labels()
            .into_iter()
            .map(|t| metrics::rows(&clf_all.features(&corpus.stack(&corpus.refs_of(t), None))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            corpus: corpus.clone(),
            clf_all,
            clf_test,
            protocols,
            real_features,
        })
    }

    pub fn protocol(&self, k: usize) -> Result<&EvalProtocol> {
        self.protocols
            .iter()
            .find(|p| p.k == k)
            .ok_or_else(|| Error::config(format!("no evaluation protocol prepared for K={k}")))
    }

    /// One report per prepared K.
    pub fn evaluate_all(&self, tr: &dyn Translator, step: u64) -> Result<Vec<MetricReport>> {
        self.protocols.iter().map(|p| self.evaluate_protocol(tr, p, step)).collect()
    }

    pub fn evaluate(&self, tr: &dyn Translator, k: usize, step: u64) -> Result<MetricReport> {
        self.evaluate_protocol(tr, self.protocol(k)?, step)
    }

    /// Translated images for one target class of a protocol, in content
    /// order.
    pub fn translate_class(&self, tr: &dyn Translator, p: &EvalProtocol, sets: &TargetSets) -> Result<Tensor<f32>> {
        let mut parts = Vec::new();
        for (ci, chunk) in p.content.chunks(self.cfg.batch_size).enumerate() {
            let start = ci * self.cfg.batch_size;
            let x = self.corpus.stack::<f32>(chunk, None);
            let refs: Vec<ImageRef> = sets.sets[start..start + chunk.len()].iter().flatten().copied().collect();
            let ys = self.corpus.stack::<f32>(&refs, None);
            let out = tr.translate(&x, &ys, p.k)?;
            if out.shape() != x.shape() {
                return Err(Error::contract(format!(
                    "translator returned {:?} for {:?}",
                    out.shape(),
                    x.shape()
                )));
            }
            parts.push(out);
        }
        Ok(Tensor::cat0(&parts)?)
    }

    /// Save a preview grid: one row per content image holding the content
    /// image, then the first class image and the translation for each target
    /// class.
    pub fn sample_grid(&self, tr: &dyn Translator, rows: usize, path: &std::path::Path) -> Result<()> {
        let p = self.protocols.first().ok_or_else(|| Error::contract("no evaluation protocol"))?;
        let n = rows.min(p.content.len());
        let x = self.corpus.stack::<f32>(&p.content[..n], None);
        let mut outs = Vec::new();
        for sets in &p.targets {
            let refs: Vec<ImageRef> = sets.sets[..n].iter().flatten().copied().collect();
            let ys = self.corpus.stack::<f32>(&refs, None);
            outs.push((refs, tr.translate(&x, &ys, p.k)?));
        }
        let content = tools::images_of(&x);
        let grid: Vec<Vec<&[f32]>> = (0..n)
            .map(|i| {
                let mut row = vec![content[i]];
                for (refs, out) in &outs {
                    row.push(self.corpus.image(refs[i * p.k]));
                    row.push(tools::images_of(out)[i]);
                }
                row
            })
            .collect();
        tools::write_grid(&grid, self.corpus.image_size(), path)
    }

    pub fn evaluate_protocol(&self, tr: &dyn Translator, p: &EvalProtocol, step: u64) -> Result<MetricReport> {
        let content = self.corpus.stack::<f32>(&p.content, None);
        let content_maps = self.clf_all.feature_maps(&content)?;
        let mut acc = Accum::default();
        for (ti, sets) in p.targets.iter().enumerate() {
            let out = self.translate_class(tr, p, sets)?;
            let (feats, probs_all) = self.clf_all.features_and_probabilities(&out)?;
            let maps = self.clf_all.feature_maps(&out)?;
            let d = metrics::dipd_per_sample(&content_maps, &maps)?;
            acc.dipd_sum += d.iter().sum::<f64>();
            acc.dipd_n += d.len();
            let local_all = self
                .clf_all
                .local(sets.label)
                .ok_or_else(|| Error::contract("target class missing from the all-classes classifier"))?;
            let local_test = self
                .clf_test
                .local(sets.label)
                .ok_or_else(|| Error::contract("target class missing from the target-classes classifier"))?;
            acc.probs_all.extend(metrics::rows(&probs_all)?);
            acc.targets_all.extend(std::iter::repeat_n(local_all, out.shape()[0]));
            acc.probs_test.extend(metrics::rows(&self.clf_test.probabilities(&out)?)?);
            acc.targets_test.extend(std::iter::repeat_n(local_test, out.shape()[0]));
            acc.fids.push(metrics::fid(&metrics::rows(&feats)?, &self.real_features[ti])?);
        }
        let (top1_all, top5_all) = metrics::translation_accuracy(&acc.probs_all, &acc.targets_all)?;
        let (top1_test, top5_test) = metrics::translation_accuracy(&acc.probs_test, &acc.targets_test)?;
        Ok(MetricReport {
            top1_all,
            top5_all,
            top1_test,
            top5_test,
            dipd: acc.dipd_sum / acc.dipd_n.max(1) as f64,
            is_all: metrics::inception_score(&acc.probs_all, self.cfg.is_splits)?,
            is_test: metrics::inception_score(&acc.probs_test, self.cfg.is_splits)?,
            mfid: acc.fids.iter().sum::<f64>() / acc.fids.len().max(1) as f64,
            k: p.k,
            step,
            translator: tr.name(),
            feature_space: FEATURE_SPACE.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_corpus;

    #[test]
    fn protocol_is_cross_product() {
        let corpus = synthetic_corpus(16, 12, 16, 0).unwrap();
        let p = EvalProtocol::new(&corpus, 50, 5, 3).unwrap();
        assert_eq!(p.targets.len(), 3);
        assert_eq!(p.len(), 150);
        assert!(p.content.iter().all(|r| r.label < 13));
        for t in &p.targets {
            assert!(t.sets.iter().all(|s| s.len() == 5 && s.iter().all(|r| r.label == t.label)));
        }
        let p1 = EvalProtocol::new(&corpus, 50, 1, 3).unwrap();
        assert_eq!(p1.content, p.content);
    }
}
