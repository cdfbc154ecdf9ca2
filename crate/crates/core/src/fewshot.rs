//! One-shot classification of target classes with translated images as
//! extra training data, scored by a linear probe on frozen features.

use kshot_tensor::{par, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, ImageRef};
use crate::error::{Error, Result};
use crate::evaluator::{EvalClassifier, Translator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub n_splits: usize,
    pub val_per_class: usize,
    pub generated_counts: Vec<usize>,
    /// Independent generation seeds per split.
    pub runs: usize,
    /// `[lo, hi, count]` of the log-spaced loss multipliers for generated
    /// images.
    pub multiplier_grid: (f64, f64, usize),
    /// `[lo, hi, count]` of the log-spaced L2 penalties.
    pub decay_grid: (f64, f64, usize),
    pub objective_tolerance: f64,
    pub max_newton_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            n_splits: 5,
            val_per_class: 20,
            generated_counts: vec![0, 10, 50, 100],
            runs: 5,
            multiplier_grid: (1e-3, 1.0, 7),
            decay_grid: (1e-6, 1e-1, 15),
            objective_tolerance: 1e-9,
            max_newton_iters: 200,
            batch_size: 50,
            seed: 0,
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 || self.runs == 0 || self.batch_size == 0 {
            return Err(Error::config("fewshot.n_splits, runs and batch_size must be positive"));
        }
        for (lo, hi, n) in [self.multiplier_grid, self.decay_grid] {
            if !(lo > 0.0 && hi >= lo && n >= 1) {
                return Err(Error::config("fewshot grids need 0 < lo <= hi and at least one point"));
            }
        }
        if !(self.multiplier_grid.1 <= 1.0) {
            return Err(Error::config("generated-image multipliers must not exceed 1"));
        }
        Ok(())
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub split_id: usize,
    /// One image per target class, in target order.
    pub train: Vec<ImageRef>,
    pub val: Vec<ImageRef>,
    pub test: Vec<ImageRef>,
}

impl FewShotSplit {
    pub fn check_disjoint(&self) -> Result<()> {
        let mut all: Vec<ImageRef> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        let n = all.len();
        all.sort();
        all.dedup();
        if all.len() != n {
            return Err(Error::contract(format!("split {} has overlapping sets", self.split_id)));
        }
        Ok(())
    }
}

/// Per split: one training image per class, `min(val_per_class, n - 2)`
/// validation images and the rest for testing.
pub fn make_splits(corpus: &Corpus, targets: &[usize], n_splits: usize, val_per_class: usize, seed: u64) -> Result<Vec<FewShotSplit>> {
    (1..=n_splits)
        .map(|split_id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(split_id as u64);
            let mut s = FewShotSplit {
                split_id,
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            };
            for &label in targets {
                let n = corpus.class_len(label);
                if n < 3 {
                    return Err(Error::config(format!(
                        "class `{}` needs at least 3 images for train/val/test",
                        corpus.index.classes[label].name
                    )));
                }
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                let n_val = val_per_class.min(n - 2);
                let r = |index| ImageRef { label, index };
                s.train.push(r(idx[0]));
                s.val.extend(idx[1..1 + n_val].iter().map(|&i| r(i)));
                s.test.extend(idx[1 + n_val..].iter().map(|&i| r(i)));
            }
            s.check_disjoint()?;
            Ok(s)
        })
        .collect()
}

/// Real training images plus `n` translations per class.
#[derive(Debug, Clone)]
pub struct AugmentedTrainSet {
    pub real: Vec<ImageRef>,
    /// `[n * classes, 3, H, W]`, class-major.
    pub generated: Tensor<f32>,
    /// Global label of each generated image.
    pub generated_labels: Vec<usize>,
}

/// Translate `n` random source-class content images into each class, using
/// that class's single training image as the class input.
pub fn augment(tr: &dyn Translator, corpus: &Corpus, split: &FewShotSplit, n: usize, batch: usize, seed: u64) -> Result<AugmentedTrainSet> {
    let s = corpus.image_size();
    let sources = corpus.spec.source_labels();
    if sources.is_empty() {
        return Err(Error::config("augmentation needs source classes for content images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for &class_img in &split.train {
        let content: Vec<ImageRef> = (0..n)
            .map(|_| {
                let label = sources[rng.random_range(0..sources.len())];
                ImageRef {
                    label,
                    index: rng.random_range(0..corpus.class_len(label)),
                }
            })
            .collect();
        for chunk in content.chunks(batch.max(1)) {
            let x = corpus.stack::<f32>(chunk, None);
            let ys = corpus.stack::<f32>(&vec![class_img; chunk.len()], None);
            parts.push(tr.translate(&x, &ys, 1)?);
        }
        labels.extend(std::iter::repeat_n(class_img.label, n));
    }
    let generated = if parts.is_empty() {
        Tensor::zeros(&[0, 3, s, s])
    } else {
        Tensor::cat0(&parts)?
    };
    Ok(AugmentedTrainSet {
        real: split.train.clone(),
        generated,
        generated_labels: labels,
    })
}

/// Multinomial logistic regression, weights `[C, F + 1]` with the bias in the
/// last column.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
}

fn with_bias(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, f) = x.shape();
    DMatrix::from_fn(n, f + 1, |i, j| if j < f { x[(i, j)] } else { 1.0 })
}

fn softmax_rows(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = z.clone();
    for mut row in p.row_iter_mut() {
        let m = row.max();
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s = row.sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    p
}

struct Problem<'a> {
    xb: DMatrix<f64>,
    labels: &'a [usize],
    weights: &'a [f64],
    wsum: f64,
    decay: f64,
    classes: usize,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.classes * self.xb.ncols()
    }

    fn unpack(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let d = self.xb.ncols();
        DMatrix::from_fn(self.classes, d, |c, j| theta[c * d + j])
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let w = self.unpack(theta);
        let z = &self.xb * w.transpose();
        let f = self.xb.ncols() - 1;
        let mut loss = 0.0;
        for (i, row) in z.row_iter().enumerate() {
            if self.weights[i] == 0.0 {
                continue;
            }
            let m = row.max();
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += self.weights[i] * (lse - row[self.labels[i]]);
        }
        let reg: f64 = (0..self.classes)
            .flat_map(|c| (0..f).map(move |j| (c, j)))
            .map(|(c, j)| w[(c, j)].powi(2))
            .sum();
        loss / self.wsum + 0.5 * self.decay * reg
    }

    fn grad_hess(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.xb.ncols();
        let f = d - 1;
        let c = self.classes;
        let n = self.xb.nrows();
        let w = self.unpack(theta);
        let p = softmax_rows(&(&self.xb * w.transpose()));
        let sw = DVector::from_fn(n, |i, _| self.weights[i] / self.wsum);
        // Weighted residuals, one column per class.
        let resid = DMatrix::from_fn(n, c, |i, a| sw[i] * (p[(i, a)] - if a == self.labels[i] { 1.0 } else { 0.0 }));
        let gm = resid.transpose() * &self.xb;
        let mut g = DVector::from_fn(c * d, |k, _| gm[(k / d, k % d)]);
        let mut h = DMatrix::zeros(c * d, c * d);
        for a in 0..c {
            for b in a..c {
                let scaled = DMatrix::from_fn(n, d, |i, j| {
                    let s = if a == b { p[(i, a)] } else { 0.0 } - p[(i, a)] * p[(i, b)];
                    sw[i] * s * self.xb[(i, j)]
                });
                let block = self.xb.transpose() * scaled;
                h.view_mut((a * d, b * d), (d, d)).copy_from(&block);
                if a != b {
                    h.view_mut((b * d, a * d), (d, d)).copy_from(&block.transpose());
                }
            }
        }
        for a in 0..c {
            for j in 0..f {
                g[a * d + j] += self.decay * theta[a * d + j];
                h[(a * d + j, a * d + j)] += self.decay;
            }
        }
        (g, h)
    }
}

/// Damping on the Newton system; the shared-bias direction has zero
/// curvature because softmax is shift invariant.
const NEWTON_DAMPING: f64 = 1e-10;

/// Minimise `sum_i w_i CE_i / sum_i w_i + decay/2 * ||W||^2` (bias
/// unpenalised) with damped Newton steps and backtracking line search.
pub fn train_linear_probe(
    features: &DMatrix<f64>,
    labels: &[usize],
    sample_weights: &[f64],
    n_classes: usize,
    decay: f64,
    init: Option<&DMatrix<f64>>,
    tolerance: f64,
    max_iters: usize,
) -> Result<LinearProbe> {
    let (n, f) = features.shape();
    if labels.len() != n || sample_weights.len() != n {
        return Err(Error::contract("one label and weight per feature row required"));
    }
    if labels.iter().any(|&l| l >= n_classes) || sample_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::contract("labels out of range or negative weights"));
    }
    let wsum: f64 = sample_weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::contract("sample weights sum to zero"));
    }
    let active: Vec<usize> = (0..n).filter(|&i| sample_weights[i] > 0.0).collect();
    let varies = (0..f).any(|j| active.iter().any(|&i| features[(i, j)] != features[(active[0], j)]));
    if f == 0 || !varies {
        return Err(Error::Numerical("probe features have zero variance".into()));
    }
    let prob = Problem {
        xb: with_bias(features),
        labels,
        weights: sample_weights,
        wsum,
        decay,
        classes: n_classes,
    };
    let d = f + 1;
    let mut theta = match init {
        Some(w) if w.shape() == (n_classes, d) => DVector::from_fn(n_classes * d, |k, _| w[(k / d, k % d)]),
        Some(_) => return Err(Error::contract("initial weights have the wrong shape")),
        None => DVector::zeros(prob.dim()),
    };
    let mut obj = prob.objective(&theta);
    let mut iterations = 0;
    for it in 0..max_iters {
        iterations = it + 1;
        let (g, mut h) = prob.grad_hess(&theta);
        for k in 0..prob.dim() {
            h[(k, k)] += NEWTON_DAMPING;
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => h.lu().solve(&g).ok_or_else(|| Error::Numerical("singular Newton system".into()))?,
        };
        let decrement = g.dot(&step);
        if decrement / 2.0 <= tolerance {
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let cand = &theta - &step * t;
            let o = prob.objective(&cand);
            if o <= obj - 1e-4 * t * decrement {
                theta = cand;
                obj = o;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !obj.is_finite() {
        return Err(Error::Numerical("probe objective is not finite".into()));
    }
    Ok(LinearProbe {
        weights: prob.unpack(&theta),
        objective: obj,
        iterations,
    })
}

impl LinearProbe {
    pub fn predict(&self, features: &DMatrix<f64>) -> Vec<usize> {
        let z = with_bias(features) * self.weights.transpose();
        z.row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, features: &DMatrix<f64>, labels: &[usize]) -> f64 {
        let hits = self.predict(features).iter().zip(labels).filter(|(a, b)| a == b).count();
        100.0 * hits as f64 / labels.len().max(1) as f64
    }
}

/// Frozen feature extractor with a fixed standardisation computed from
/// source-class images.
pub struct ProbeFeatures<'a> {
    extractor: &'a EvalClassifier,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl<'a> ProbeFeatures<'a> {
    pub fn new(extractor: &'a EvalClassifier, corpus: &Corpus) -> Result<Self> {
        let refs: Vec<ImageRef> = corpus.spec.source_labels().into_iter().flat_map(|l| corpus.refs_of(l)).collect();
        let f = extractor.features(&corpus.stack(&refs, None))?;
        let (n, d) = f.dims2()?;
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for row in f.data().chunks(d) {
            for j in 0..d {
                mean[j] += row[j] as f64;
                sq[j] += (row[j] as f64).powi(2);
            }
        }
        let nf = n.max(1) as f64;
        let scale = (0..d)
            .map(|j| {
                let m = mean[j] / nf;
                let sd = (sq[j] / nf - m * m).max(0.0).sqrt();
                if sd > 1e-8 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        mean.iter_mut().for_each(|m| *m /= nf);
        Ok(Self { extractor, mean, scale })
    }

    pub fn of(&self, images: &Tensor<f32>) -> Result<DMatrix<f64>> {
        let f = self.extractor.features(images)?;
        let (n, d) = f.dims2()?;
        Ok(DMatrix::from_fn(n, d, |i, j| {
            (f.data()[i * d + j] as f64 - self.mean[j]) * self.scale[j]
        }))
    }
}

fn stack_rows(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = parts.first().map_or(0, |m| m.ncols());
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for m in parts {
        out.rows_mut(r, m.nrows()).copy_from(*m);
        r += m.nrows();
    }
    out
}

/// Features of an augmented set, ready for the probe.
struct ProbeData {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    generated: Vec<bool>,
}

impl ProbeData {
    fn weights(&self, multiplier: f64) -> Vec<f64> {
        self.generated.iter().map(|&g| if g { multiplier } else { 1.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split_id: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub generated: usize,
    pub multiplier: f64,
    pub decay: f64,
    pub splits: Vec<SplitResult>,
    /// Mean over splits of the per-split means.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub rows: Vec<FewShotRow>,
}

/// Runs the probe experiment for every configured N.
pub struct FewShotExperiment<'a> {
    pub corpus: &'a Corpus,
    pub cfg: FewShotConfig,
    pub features: ProbeFeatures<'a>,
    pub splits: Vec<FewShotSplit>,
    targets: Vec<usize>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl<'a> FewShotExperiment<'a> {
    pub fn new(corpus: &'a Corpus, extractor: &'a EvalClassifier, cfg: &FewShotConfig) -> Result<Self> {
        cfg.validate()?;
        let targets = corpus.spec.target_labels();
        if targets.len() < 2 {
            return Err(Error::config("few-shot classification needs at least two target classes"));
        }
        Ok(Self {
            corpus,
            cfg: cfg.clone(),
            features: ProbeFeatures::new(extractor, corpus)?,
            splits: make_splits(corpus, &targets, cfg.n_splits, cfg.val_per_class, cfg.seed)?,
            targets,
        })
    }

    fn local(&self, label: usize) -> usize {
        self.targets.iter().position(|&t| t == label).expect("target label")
    }

    fn eval_set(&self, refs: &[ImageRef]) -> Result<(DMatrix<f64>, Vec<usize>)> {
        let f = self.features.of(&self.corpus.stack(refs, None))?;
        Ok((f, refs.iter().map(|r| self.local(r.label)).collect()))
    }

    fn data(&self, tr: &dyn Translator, split: &FewShotSplit, n: usize, run: usize) -> Result<ProbeData> {
        let seed = self.cfg.seed ^ ((split.split_id as u64) << 32) ^ (run as u64 + 1);
        let aug = augment(tr, self.corpus, split, n, self.cfg.batch_size, seed)?;
        let (real, mut labels) = self.eval_set(&aug.real)?;
        let gen = self.features.of(&aug.generated)?;
        labels.extend(aug.generated_labels.iter().map(|&l| self.local(l)));
        let mut generated = vec![false; real.nrows()];
        generated.extend(std::iter::repeat_n(true, gen.nrows()));
        Ok(ProbeData {
            features: stack_rows(&[&real, &gen]),
            labels,
            generated,
        })
    }

    fn fit(&self, d: &ProbeData, multiplier: f64, decay: f64) -> Result<LinearProbe> {
        train_linear_probe(
            &d.features,
            &d.labels,
            &d.weights(multiplier),
            self.targets.len(),
            decay,
            None,
            self.cfg.objective_tolerance,
            self.cfg.max_newton_iters,
        )
    }

    /// `(multiplier, decay)` with the best validation accuracy on the first
    /// split; ties keep the earliest grid point.
    pub fn select_hyperparameters(&self, tr: &dyn Translator, n: usize) -> Result<(f64, f64)> {
        let split = &self.splits[0];
        let d = self.data(tr, split, n, 0)?;
        let (vf, vl) = self.eval_set(&split.val)?;
        let (ml, mh, mn) = self.cfg.multiplier_grid;
        let (dl, dh, dn) = self.cfg.decay_grid;
        let grid: Vec<(f64, f64)> = log_space(ml, mh, mn)
            .into_iter()
            .flat_map(|m| log_space(dl, dh, dn).into_iter().map(move |decay| (m, decay)))
            .collect();
        let scores = par::map_indexed(grid.len(), |i| {
            let (m, decay) = grid[i];
            self.fit(&d, m, decay).map(|p| p.accuracy(&vf, &vl))
        });
        let mut best = (f64::NEG_INFINITY, ml, dl);
        for (&(m, decay), acc) in grid.iter().zip(scores) {
            let acc = acc?;
            if acc > best.0 {
                best = (acc, m, decay);
            }
        }
        Ok((best.1, best.2))
    }

    /// Test accuracy for every split and run with fixed hyperparameters.
    pub fn row(&self, tr: &dyn Translator, n: usize) -> Result<FewShotRow> {
        let (multiplier, decay) = self.select_hyperparameters(tr, n)?;
        let mut splits = Vec::new();
        for split in &self.splits {
            let (tf, tl) = self.eval_set(&split.test)?;
            let runs = (0..self.cfg.runs)
                .map(|run| Ok(self.fit(&self.data(tr, split, n, run)?, multiplier, decay)?.accuracy(&tf, &tl)))
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&runs);
            splits.push(SplitResult {
                split_id: split.split_id,
                mean,
                std,
                runs,
            });
        }
        let mean = splits.iter().map(|s| s.mean).sum::<f64>() / splits.len() as f64;
        Ok(FewShotRow {
            generated: n,
            multiplier,
            decay,
            splits,
            mean,
        })
    }

    /// Real-only probe: the `N = 0` row.
    pub fn baseline(&self, tr: &dyn Translator) -> Result<FewShotRow> {
        self.row(tr, 0)
    }

    pub fn run(&self, tr: &dyn Translator) -> Result<FewShotReport> {
        let rows = self
            .cfg
            .generated_counts
            .iter()
            .map(|&n| self.row(tr, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(FewShotReport { rows })
    }
}
