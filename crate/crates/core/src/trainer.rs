//! Alternating discriminator/generator optimisation with RMSProp and a
//! weight-averaged copy of the generator.

use std::io::Write;
use std::path::{Path, PathBuf};

use kshot_tensor::{grad, ParamStore, Params, RmsProp, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::Config;
use crate::dataset::{Corpus, TrainBatch};
use crate::discriminator::{select_class_score, Discriminator};
use crate::error::{Error, Result};
use crate::evaluator::{Evaluator, GeneratorTranslator, MetricReport};
use crate::generator::Generator;
use crate::losses::{self, AdvForm, LossBreakdown, LossWeights};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Rmsprop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub use_fm: bool,
    pub use_gp: bool,
    pub adv_form: AdvForm,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_fm: true,
            use_gp: true,
            adv_form: AdvForm::Hinge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub batch_size: usize,
    /// Class images per translation during training.
    pub shots: usize,
    pub total_steps: u64,
    pub ema_weight: f64,
    pub toggles: Toggles,
    pub seed: u64,
    /// Apply the gradient penalty on every n-th discriminator step.
    pub gp_every: u64,
    /// Reuse the adversarial content batch for reconstruction instead of
    /// drawing a fresh one.
    pub share_recon_batch: bool,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Rmsprop,
            lr: 1e-4,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            batch_size: 16,
            shots: 1,
            total_steps: 20_000,
            ema_weight: 0.001,
            toggles: Toggles::default(),
            seed: 0,
            gp_every: 1,
            share_recon_batch: false,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("trainer.lr must be finite and non-negative"));
        }
        if !(self.ema_weight > 0.0 && self.ema_weight <= 1.0) {
            return Err(Error::config("trainer.ema_weight must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.shots == 0 || self.gp_every == 0 {
            return Err(Error::config("trainer.batch_size, shots and gp_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.rms_alpha) || self.rms_eps <= 0.0 {
            return Err(Error::config("trainer.rms_alpha must lie in [0,1) and rms_eps be positive"));
        }
        Ok(())
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub g: ParamStore<f32>,
    pub d: ParamStore<f32>,
    pub g_ema: ParamStore<f32>,
    pub opt_g: RmsProp<f32>,
    pub opt_d: RmsProp<f32>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.g.bits_eq(&other.g)
            && self.d.bits_eq(&other.d)
            && self.g_ema.bits_eq(&other.g_ema)
            && self.opt_g.steps() == other.opt_g.steps()
            && self.opt_d.steps() == other.opt_d.steps()
            && states_eq(self.opt_g.state(), other.opt_g.state())
            && states_eq(self.opt_d.state(), other.opt_d.state())
            && self.rng == other.rng
    }
}

fn states_eq(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bits_eq(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub report: MetricReport,
}

/// Network structure plus the hyperparameters of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: Config,
    pub gen: Generator,
    pub disc: Discriminator,
    /// Global labels sampled for training; the discriminator has one map per
    /// label up to the largest.
    pub classes: Vec<usize>,
}

/// Seeds of the independent random streams of a run.
const SAMPLING_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let classes = cfg.dataset.training_labels();
        if classes.len() < 2 {
            return Err(Error::config("training needs at least two training classes"));
        }
        let n_maps = classes.iter().max().map_or(0, |m| m + 1);
        let mut rng = init_rng(cfg.trainer.seed);
        let (gen, _) = Generator::new::<f32, _>(&cfg.generator, &mut rng)?;
        let (disc, _) = Discriminator::new::<f32, _>(&cfg.discriminator, cfg.dataset.image_size, n_maps, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            gen,
            disc,
            classes,
        })
    }

    /// Freshly initialised state; the averaged generator starts as a copy.
    pub fn init_state(&self) -> Result<TrainState> {
        let mut rng = init_rng(self.cfg.trainer.seed);
        let (_, g) = Generator::new::<f32, _>(&self.cfg.generator, &mut rng)?;
        let (_, d) = Discriminator::new::<f32, _>(&self.cfg.discriminator, self.cfg.dataset.image_size, self.disc.n_classes, &mut rng)?;
        let t = &self.cfg.trainer;
        let (lr, a, e) = (t.lr as f32, t.rms_alpha as f32, t.rms_eps as f32);
        let mut sampling = ChaCha8Rng::seed_from_u64(t.seed);
        sampling.set_stream(SAMPLING_STREAM);
        Ok(TrainState {
            opt_g: RmsProp::new(&g, lr, a, e),
            opt_d: RmsProp::new(&d, lr, a, e),
            g_ema: g.clone(),
            g,
            d,
            step: 0,
            rng: sampling,
        })
    }

    fn weights(&self) -> &LossWeights {
        &self.cfg.losses
    }

    /// Draw the adversarial batch and the reconstruction images for one step.
    pub fn sample_step_inputs(&self, corpus: &Corpus, rng: &mut ChaCha8Rng) -> Result<(TrainBatch<f32>, Tensor<f32>)> {
        let t = &self.cfg.trainer;
        let batch = corpus.sample_batch(&self.classes, t.batch_size, t.shots, rng)?;
        let recon = if t.share_recon_batch {
            batch.content.clone()
        } else {
            corpus.sample_images(&self.classes, t.batch_size, rng).0
        };
        Ok((batch, recon))
    }

    /// One discriminator update, one generator update, then the weight
    /// average.
    pub fn train_step(&self, state: &mut TrainState, batch: &TrainBatch<f32>, recon: &Tensor<f32>) -> Result<LossBreakdown> {
        let t = &self.cfg.trainer;
        let w = self.weights();
        let form = t.toggles.adv_form;
        let k = batch.k;
        let mut out = LossBreakdown::default();
        let x = Var::constant(batch.content.clone());
        let ys = Var::constant(batch.class_images.clone());

        // Discriminator step.
        {
            let pg = state.g.vars(false);
            let fake = self.gen.translate(&pg, &x, &ys, k)?.detach();
            let pd = state.d.vars(true);
            let apply_gp = t.toggles.use_gp && state.step % t.gp_every == 0;
            let x_real = if apply_gp {
                Var::leaf(batch.content.clone(), true)
            } else {
                x.clone()
            };
            let s_real = select_class_score(&self.disc.discriminate(&pd, &x_real)?, &batch.c_x)?;
            let s_fake = select_class_score(&self.disc.discriminate(&pd, &fake)?, &batch.c_y)?;
            let (d_real, d_fake) = losses::d_adv_loss(&s_real, &s_fake, form);
            let mut total = d_real.add(&d_fake)?;
            if apply_gp {
                let pen = losses::r1_from_score(&s_real, &x_real)?;
                out.grad_penalty = pen.value().item() as f64;
                total = total.add(&pen.scale((w.gradient_penalty_weight / 2.0) as f32))?;
            }
            out.d_real = d_real.value().item() as f64;
            out.d_fake = d_fake.value().item() as f64;
            out.d_total = total.value().item() as f64;
            check_finite(&out, state.step)?;
            let grads = param_grads(&total, &pd)?;
            state.opt_d.step(&mut state.d, &grads)?;
        }

        // Generator step against the updated discriminator.
        {
            let pg = state.g.vars(true);
            let pd = state.d.vars(false);
            let fake = self.gen.translate(&pg, &x, &ys, k)?;
            let (f_fake, logits) = self.disc.forward_both(&pd, &fake)?;
            let g_adv = losses::g_adv_loss(&select_class_score(&logits, &batch.c_y)?, form);
            let xr = Var::constant(recon.clone());
            let rec = losses::recon_loss(&xr, &self.gen.translate(&pg, &xr, &xr, 1)?)?;
            let mut total = g_adv.add(&rec.scale(w.recon_weight as f32))?;
            if t.toggles.use_fm {
                let f_class = self.disc.extract_features(&pd, &ys)?;
                let fm = losses::feature_matching_loss(&f_fake, &f_class, k)?;
                out.feat_match = fm.value().item() as f64;
                total = total.add(&fm.scale(w.feature_match_weight as f32))?;
            }
            out.g_adv = g_adv.value().item() as f64;
            out.recon = rec.value().item() as f64;
            out.g_total = total.value().item() as f64;
            check_finite(&out, state.step)?;
            let grads = param_grads(&total, &pg)?;
            state.opt_g.step(&mut state.g, &grads)?;
        }

        state.g_ema.lerp_toward(&state.g, t.ema_weight as f32)?;
        state.step += 1;
        Ok(out)
    }

    /// Run `steps` iterations, sampling from `corpus` with the state's rng.
    /// `observe` sees the state after every step.
    pub fn run(
        &self,
        state: &mut TrainState,
        corpus: &Corpus,
        steps: u64,
        mut observe: impl FnMut(&TrainState, &LossRecord) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let (batch, recon) = self.sample_step_inputs(corpus, &mut state.rng)?;
            let losses = self.train_step(state, &batch, &recon)?;
            observe(state, &LossRecord { step: state.step, losses })?;
        }
        Ok(())
    }
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(INIT_STREAM);
    r
}

fn param_grads(loss: &Var<f32>, p: &Params<f32>) -> Result<Vec<Tensor<f32>>> {
    Ok(grad(loss, &p.as_refs(), false)?.into_iter().map(|g| g.value().clone()).collect())
}

fn check_finite(b: &LossBreakdown, step: u64) -> Result<()> {
    if b.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, breakdown: *b })
    }
}

/// Where and how [`train`] writes its artifacts.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Output directory for the loss log, metric timeline and checkpoints.
    pub out_dir: Option<PathBuf>,
    pub evaluator: Option<&'a Evaluator>,
    /// Continue from this state instead of a fresh one.
    pub resume: Option<TrainState>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LossRecord>,
    pub timeline: Vec<MetricRecord>,
}

pub const LOSS_LOG: &str = "losses.jsonl";
pub const METRIC_LOG: &str = "metrics.jsonl";
pub const SAMPLE_DIR: &str = "samples";

/// Train until `total_steps`, evaluating the averaged generator every
/// `eval_every` steps and checkpointing every `checkpoint_every` steps.
pub fn train(corpus: &Corpus, cfg: &Config, opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg)?;
    let mut state = match opts.resume {
        Some(s) => s,
        None => trainer.init_state()?,
    };
    let t = &cfg.trainer;
    if t.eval_every > 0 && opts.evaluator.is_none() {
        return Err(Error::config("eval_every > 0 requires an evaluator"));
    }
    let mut loss_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            Some(open_append(&dir.join(LOSS_LOG))?)
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut timeline = Vec::new();
    let remaining = t.total_steps.saturating_sub(state.step);
    trainer.run(&mut state, corpus, remaining, |st, rec| {
        log.push(*rec);
        if let Some(f) = loss_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(rec)?)?;
        }
        if t.eval_every > 0 && st.step % t.eval_every == 0 {
            let ev = opts.evaluator.expect("checked above");
            let tr = GeneratorTranslator::new(&trainer.gen, &st.g_ema);
            if let Some(dir) = &opts.out_dir {
                let samples = dir.join(SAMPLE_DIR);
                std::fs::create_dir_all(&samples).map_err(|e| Error::file(&samples, e))?;
                ev.sample_grid(&tr, 8, &samples.join(format!("step-{:08}.png", st.step)))?;
            }
            for report in ev.evaluate_all(&tr, st.step)? {
                let r = MetricRecord { step: st.step, report };
                if let Some(dir) = &opts.out_dir {
                    let mut f = open_append(&dir.join(METRIC_LOG))?;
                    writeln!(f, "{}", serde_json::to_string(&r)?)?;
                }
                timeline.push(r);
            }
        }
        if let Some(dir) = &opts.out_dir {
            if t.checkpoint_every > 0 && st.step % t.checkpoint_every == 0 {
                checkpoint::save(&dir.join("checkpoints"), &trainer, st)?;
            }
        }
        Ok(())
    })?;
    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&dir.join("checkpoints"), &trainer, &state)?;
    }
    Ok(TrainOutcome { state, log, timeline })
}

fn open_append(path: &Path) -> Result<std::fs::File> {
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::file(path, e))
}

/// One report per class count and evaluation K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub source_classes: usize,
    pub report: MetricReport,
}

/// Train one model per count on the first `count` source classes (nested
/// subsets, identical seeds) and evaluate each on the same target classes.
pub fn run_source_count_sweep(
    corpus: &Corpus,
    cfg: &Config,
    counts: &[usize],
    evaluator: &Evaluator,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    let n_src = cfg.dataset.source_classes.len();
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("source class counts must be strictly ascending"));
    }
    if let Some(&c) = counts.iter().find(|&&c| c > n_src || c < 2) {
        return Err(Error::config(format!("source class count {c} outside [2, {n_src}]")));
    }
    let mut rows = Vec::new();
    for &count in counts {
        let sub = corpus.with_first_sources(count)?;
        let mut c = cfg.clone();
        c.dataset = sub.spec.clone();
        let opts = TrainOptions {
            out_dir: out_dir.map(|d| d.join(format!("sources-{count}"))),
            ..Default::default()
        };
        let outcome = train(&sub, &c, opts)?;
        let trainer = Trainer::new(&c)?;
        let tr = GeneratorTranslator::new(&trainer.gen, &outcome.state.g_ema);
        for report in evaluator.evaluate_all(&tr, outcome.state.step)? {
            rows.push(SweepRow {
                source_classes: count,
                report,
            });
        }
    }
    Ok(rows)
}


/// Loss-term ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoFm,
    NoGp,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoFm, Ablation::NoGp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoFm => "no-fm",
            Self::NoGp => "no-gp",
        }
    }

    pub fn apply(self, cfg: &Config) -> Config {
        let mut c = cfg.clone();
        match self {
            Self::Full => {}
            Self::NoFm => c.trainer.toggles.use_fm = false,
            Self::NoGp => c.trainer.toggles.use_gp = false,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: Ablation,
    pub seed: u64,
    pub report: MetricReport,
}

/// Train every ablation for every seed and evaluate the averaged
/// generator at `k`.
pub fn run_ablation(
    corpus: &Corpus,
    cfg: &Config,
    seeds: &[u64],
    k: usize,
    evaluator: &Evaluator,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    evaluator.protocol(k)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for setting in Ablation::ALL {
            let mut c = setting.apply(cfg);
            c.trainer.seed = seed;
            let opts = TrainOptions {
                out_dir: out_dir.map(|d| d.join(format!("{}-seed{seed}", setting.name()))),
                ..Default::default()
            };
            let outcome = train(corpus, &c, opts)?;
            let trainer = Trainer::new(&c)?;
            let tr = GeneratorTranslator::new(&trainer.gen, &outcome.state.g_ema);
            rows.push(AblationRow {
                setting,
                seed,
                report: evaluator.evaluate(&tr, k, outcome.state.step)?,
            });
        }
    }
    Ok(rows)
}
