//! Acceptance checks, one line per criterion.
//!
//! Criteria 8-11 need fully trained 32x32 models (20k steps per seed) and
//! only run with `--include-ignored` / `--ignored` or
//! `KSHOT_ACCEPTANCE_FULL=1`. Trained models are cached under
//! `KSHOT_ACCEPTANCE_DIR` (default `target/acceptance`) and resumed from
//! their latest checkpoint, so an interrupted run can be continued.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use kshot_core::checkpoint;
use kshot_core::dataset::Corpus;
use kshot_core::discriminator::{select_class_score, Discriminator};
use kshot_core::evaluator::classifier::train_eval_classifier;
use kshot_core::evaluator::metrics::{dipd, fid, fid_from_moments, inception_score};
use kshot_core::evaluator::{Evaluator, GeneratorTranslator, IdentityTranslator, MetricReport};
use kshot_core::fewshot::{FewShotConfig, FewShotExperiment};
use kshot_core::generator::{adain, Generator, GeneratorConfig};
use kshot_core::losses::{self, AdvForm};
use kshot_core::synth::synthetic_corpus;
use kshot_core::tensor::{grad, ParamStore, Params, Tensor, Var};
use kshot_core::trainer::{train, Ablation, LossRecord, TrainOptions, Trainer};
use kshot_core::{presets, Config};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const ADAIN_TOL: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this in both routes count as agreeing zeros.
const FD_ZERO: f64 = 1e-9;
const FD_PARAMS: usize = 10;
const FID_SELF_TOL: f64 = 1e-6;
const FID_ANALYTIC_TOL: f64 = 1e-6;
const IS_CONST_TOL: f64 = 1e-9;
const IS_ONEHOT_TOL: f64 = 1e-6;
const DIPD_AFFINE_TOL: f64 = 1e-5;
const EMA_TOL: f64 = 1e-6;
const MFID_IMPROVEMENT: f64 = 0.30;
const CHANCE_MULTIPLE: f64 = 3.0;
const FEWSHOT_BASELINE_TOL: f64 = 0.1;

const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const DESK_CLASSES: usize = 16;
const DESK_IMAGES_PER_CLASS: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    id: u32,
    title: &'static str,
    budget: Duration,
    heavy: bool,
    run: fn() -> Outcome,
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let criteria = [
        Criterion {
            id: 1,
            title: "content code spatial shape",
            budget: secs(1),
            heavy: false,
            run: content_code_shapes,
        },
        Criterion {
            id: 2,
            title: "AdaIN output statistics",
            budget: secs(10),
            heavy: false,
            run: adain_statistics,
        },
        Criterion {
            id: 3,
            title: "K-permutation invariance",
            budget: secs(30),
            heavy: false,
            run: k_permutation_invariance,
        },
        Criterion {
            id: 4,
            title: "finite-difference gradients",
            budget: secs(120),
            heavy: false,
            run: finite_difference_gradients,
        },
        Criterion {
            id: 5,
            title: "class isolation of head gradients",
            budget: secs(30),
            heavy: false,
            run: class_isolation,
        },
        Criterion {
            id: 6,
            title: "metric oracles",
            budget: secs(60),
            heavy: false,
            run: metric_oracles,
        },
        Criterion {
            id: 7,
            title: "EMA geometric decay",
            budget: secs(10),
            heavy: false,
            run: ema_law,
        },
        Criterion {
            id: 8,
            title: "desk end-to-end quality",
            budget: secs(6 * 3600),
            heavy: true,
            run: desk_end_to_end,
        },
        Criterion {
            id: 9,
            title: "ablation direction",
            budget: secs(6 * 3600),
            heavy: true,
            run: ablation_direction,
        },
        Criterion {
            id: 10,
            title: "K=5 vs K=1 mFID",
            budget: secs(3600),
            heavy: true,
            run: k_monotonicity,
        },
        Criterion {
            id: 11,
            title: "few-shot augmentation",
            budget: secs(15 * 60),
            heavy: true,
            run: fewshot_augmentation,
        },
        Criterion {
            id: 12,
            title: "determinism and resume",
            budget: secs(300),
            heavy: false,
            run: determinism_and_resume,
        },
    ];
    if args.iter().any(|a| a == "--list") {
        for c in &criteria {
            println!("criterion_{:02}: test", c.id);
        }
        return;
    }
    let full = args.iter().any(|a| a == "--include-ignored" || a == "--ignored") || std::env::var_os("KSHOT_ACCEPTANCE_FULL").is_some();
    let only_heavy = args.iter().any(|a| a == "--ignored");
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        let name = format!("criterion_{:02}", c.id);
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        if only_heavy && !c.heavy {
            continue;
        }
        if c.heavy && !full {
            println!(
                "[{:02}] {:<36} NOT RUN  (trains 32x32 models for 20k steps; pass --include-ignored)",
                c.id, c.title
            );
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let in_time = took <= c.budget;
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = if in_time {
            String::new()
        } else {
            format!(" over budget {:?}", c.budget)
        };
        println!(
            "[{:02}] {:<36} {}  ({:.2} s{budget}) {}",
            c.id,
            c.title,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            outcome.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_config() -> Config {
    presets::tiny(&presets::tiny_corpus().unwrap().spec)
}

fn content_code_shapes() -> Outcome {
    let mut r = rng(1);
    let big = GeneratorConfig {
        image_size: 128,
        downsamples: 3,
        base_channels: 8,
        ..GeneratorConfig::default()
    };
    let (g, p) = Generator::new::<f32, _>(&big, &mut r).unwrap();
    let z = g.content_codes(&p, &Tensor::uniform(&[1, 3, 128, 128], -1.0, 1.0, &mut r)).unwrap();
    let desk = GeneratorConfig::default();
    let (g2, p2) = Generator::new::<f32, _>(&desk, &mut r).unwrap();
    let z2 = g2.content_codes(&p2, &Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut r)).unwrap();
    let ok = z.shape()[2..] == [16, 16] && z2.shape()[2..] == [8, 8] && desk.downsamples == 2;
    Outcome::new(ok, format!("128/d=3 -> {:?}, 32/d=2 -> {:?}", &z.shape()[2..], &z2.shape()[2..]))
}

fn adain_statistics() -> Outcome {
    let mut r = rng(2);
    let (b, c, s) = (250, 4, 8);
    let hw = s * s;
    let mut data = Vec::with_capacity(b * c * hw);
    for _ in 0..b * c {
        let m: f64 = r.random_range(-3.0..3.0);
        let sd: f64 = r.random_range(0.05..4.0);
        let base = Tensor::<f64>::randn(&[hw], 1.0, &mut r);
        data.extend(base.data().iter().map(|v| (m + sd * v) as f32));
    }
    let h = Tensor::from_vec(data, &[b, c, s, s]).unwrap();
    let scale = Tensor::<f32>::uniform(&[b, c], 0.1, 3.0, &mut r);
    let shift = Tensor::<f32>::uniform(&[b, c], -2.0, 2.0, &mut r);
    let out = adain(
        &Var::constant(h.clone()),
        &Var::constant(scale.clone()),
        &Var::constant(shift.clone()),
    )
    .unwrap();
    let (mut worst_mean, mut worst_std) = (0f64, 0f64);
    for i in 0..b * c {
        let src: Vec<f64> = h.data()[i * hw..(i + 1) * hw].iter().map(|&v| v as f64).collect();
        let dst: Vec<f64> = out.value().data()[i * hw..(i + 1) * hw].iter().map(|&v| v as f64).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let v = var(&src);
        let want_std = scale.data()[i] as f64 * (v / (v + 1e-5)).sqrt();
        worst_mean = worst_mean.max((mean(&dst) - shift.data()[i] as f64).abs());
        worst_std = worst_std.max((var(&dst).sqrt() - want_std).abs());
    }
    Outcome::new(
        worst_mean <= ADAIN_TOL && worst_std <= ADAIN_TOL,
        format!("1000 maps, max |mean err| {worst_mean:.2e}, max |std err| {worst_std:.2e}"),
    )
}

fn k_permutation_invariance() -> Outcome {
    let cfg = tiny_config();
    let mut r = rng(3);
    let (g, p) = Generator::new::<f32, _>(&cfg.generator, &mut r).unwrap();
    let s = cfg.generator.image_size;
    let mut mismatches = 0;
    for _ in 0..200 {
        let b = 2;
        let k = r.random_range(1..=6);
        let x = Tensor::<f32>::uniform(&[b, 3, s, s], -1.0, 1.0, &mut r);
        let ys = Tensor::<f32>::uniform(&[b * k, 3, s, s], -1.0, 1.0, &mut r);
        let mut order: Vec<usize> = Vec::new();
        for i in 0..b {
            let mut group: Vec<usize> = (i * k..(i + 1) * k).collect();
            group.shuffle(&mut r);
            order.extend(group);
        }
        let a = g.translate_tensor(&p, &x, &ys, k).unwrap();
        let bb = g.translate_tensor(&p, &x, &ys.select0(&order).unwrap(), k).unwrap();
        if !a.bits_eq(&bb) {
            mismatches += 1;
        }
    }
    Outcome::new(mismatches == 0, format!("{mismatches}/200 triples differ"))
}

/// Central differences on random parameter entries; at least `FD_PARAMS`
/// entries with non-negligible gradient are compared.
fn fd_check(store: &mut ParamStore<f64>, loss: &dyn Fn(&Params<f64>) -> Var<f64>, r: &mut ChaCha8Rng) -> (f64, usize) {
    let p = store.vars(true);
    let l = loss(&p);
    let grads = grad(&l, &p.as_refs(), false).unwrap();
    let sizes: Vec<usize> = store.tensors().iter().map(|t| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let (mut worst, mut checked, mut attempts) = (0f64, 0, 0);
    while checked < FD_PARAMS && attempts < 20_000 {
        attempts += 1;
        let mut flat = r.random_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let analytic = grads[ti].value().data()[flat];
        let orig = store.tensors()[ti].data()[flat];
        let mut eval_at = |v: f64| {
            store.tensors_mut()[ti].make_mut()[flat] = v;
            loss(&store.vars(false)).value().item()
        };
        let numeric = (eval_at(orig + FD_STEP) - eval_at(orig - FD_STEP)) / (2.0 * FD_STEP);
        store.tensors_mut()[ti].make_mut()[flat] = orig;
        let scale = analytic.abs().max(numeric.abs());
        if scale < FD_ZERO {
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / scale);
        checked += 1;
    }
    (worst, checked)
}

fn finite_difference_gradients() -> Outcome {
    let cfg = tiny_config();
    assert_eq!((cfg.generator.image_size, cfg.generator.base_channels), (8, 4));
    let mut r = rng(4);
    let n_classes = 4;
    let (g, mut gp) = Generator::new::<f64, _>(&cfg.generator, &mut r).unwrap();
    let (d, mut dp) = Discriminator::new::<f64, _>(&cfg.discriminator, 8, n_classes, &mut r).unwrap();
    let (b, k) = (2, 2);
    let x = Var::constant(Tensor::<f64>::uniform(&[b, 3, 8, 8], -1.0, 1.0, &mut r));
    let ys = Var::constant(Tensor::<f64>::uniform(&[b * k, 3, 8, 8], -1.0, 1.0, &mut r));
    let (c_x, c_y) = (vec![0, 2], vec![1, 3]);
    let fake = g.translate(&gp.vars(false), &x, &ys, k).unwrap().detach();
    let d_frozen = dp.clone();
    let g_frozen = gp.clone();

    let mut results = Vec::new();
    let mut record = |name: &str, (worst, n): (f64, usize)| results.push((name.to_owned(), worst, n));

    record(
        "generator",
        fd_check(&mut gp, &|p| g.translate(p, &x, &ys, k).unwrap().sum(), &mut r),
    );
    record(
        "discriminator",
        fd_check(&mut dp, &|p| d.discriminate(p, &x).unwrap().sum(), &mut r),
    );
    record(
        "adversarial (D side)",
        fd_check(
            &mut dp,
            &|p| {
                let sr = select_class_score(&d.discriminate(p, &x).unwrap(), &c_x).unwrap();
                let sf = select_class_score(&d.discriminate(p, &fake).unwrap(), &c_y).unwrap();
                let (a, bb) = losses::d_adv_loss(&sr, &sf, AdvForm::Hinge);
                a.add(&bb).unwrap()
            },
            &mut r,
        ),
    );
    let pd = d_frozen.vars(false);
    record(
        "adversarial (G side)",
        fd_check(
            &mut gp,
            &|p| {
                let out = g.translate(p, &x, &ys, k).unwrap();
                losses::g_adv_loss(
                    &select_class_score(&d.discriminate(&pd, &out).unwrap(), &c_y).unwrap(),
                    AdvForm::Hinge,
                )
            },
            &mut r,
        ),
    );
    record(
        "reconstruction",
        fd_check(
            &mut gp,
            &|p| losses::recon_loss(&x, &g.translate(p, &x, &x, 1).unwrap()).unwrap(),
            &mut r,
        ),
    );
    record(
        "feature matching",
        fd_check(
            &mut gp,
            &|p| {
                let out = g.translate(p, &x, &ys, k).unwrap();
                let ff = d.extract_features(&pd, &out).unwrap();
                let fy = d.extract_features(&pd, &ys).unwrap();
                losses::feature_matching_loss(&ff, &fy, k).unwrap()
            },
            &mut r,
        ),
    );
    record(
        "gradient penalty",
        fd_check(&mut dp, &|p| losses::r1_penalty(&d, p, &x, &c_x).unwrap(), &mut r),
    );
    let _ = g_frozen;
    let pass = results.iter().all(|(_, w, n)| *n >= FD_PARAMS && *w < FD_REL_TOL);
    let detail = results
        .iter()
        .map(|(name, w, n)| format!("{name} {w:.1e}/{n}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(pass, format!("max rel err per check: {detail}"))
}

fn class_isolation() -> Outcome {
    let cfg = tiny_config();
    let mut r = rng(5);
    let n_classes = 6;
    let (d, store) = Discriminator::new::<f32, _>(&cfg.discriminator, 8, n_classes, &mut r).unwrap();
    let mut leaks = Vec::new();
    let batches: [&[usize]; 3] = [&[2, 2, 2, 2], &[5, 5], &[0, 3, 3, 5]];
    for classes in batches {
        let b = classes.len();
        let real = Tensor::<f32>::uniform(&[b, 3, 8, 8], -1.0, 1.0, &mut r);
        let fake = Tensor::<f32>::uniform(&[b, 3, 8, 8], -1.0, 1.0, &mut r);
        let p = store.vars(true);
        let xr = Var::leaf(real.clone(), true);
        let sr = select_class_score(&d.discriminate(&p, &xr).unwrap(), classes).unwrap();
        let sf = select_class_score(&d.discriminate(&p, &Var::constant(fake)).unwrap(), classes).unwrap();
        let (a, bb) = losses::d_adv_loss(&sr, &sf, AdvForm::Hinge);
        let terms = [
            ("d_adv", a.add(&bb).unwrap()),
            ("g_adv", losses::g_adv_loss(&sf, AdvForm::Hinge)),
            ("r1", losses::r1_from_score(&sr, &xr).unwrap()),
        ];
        for (name, loss) in terms {
            let gr = grad(&loss, &p.as_refs(), false).unwrap();
            let w = gr[d.head_weight().0].value();
            let bias = gr[d.head_bias().0].value();
            let per_row = w.numel() / n_classes;
            for c in (0..n_classes).filter(|c| !classes.contains(c)) {
                let row = &w.data()[c * per_row..(c + 1) * per_row];
                if row.iter().any(|v| *v != 0.0) || bias.data()[c] != 0.0 {
                    leaks.push(format!("{name} class {c} in batch {classes:?}"));
                }
            }
            let selected_nonzero = classes
                .iter()
                .any(|&c| w.data()[c * per_row..(c + 1) * per_row].iter().any(|v| *v != 0.0));
            if !selected_nonzero {
                leaks.push(format!("{name}: selected rows have no gradient"));
            }
        }
    }
    Outcome::new(
        leaks.is_empty(),
        if leaks.is_empty() {
            "3 batches x 3 terms".into()
        } else {
            leaks.join("; ")
        },
    )
}

fn metric_oracles() -> Outcome {
    let mut r = rng(6);
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, pass: bool, value: String| {
        ok &= pass;
        notes.push(format!("{name}={value}{}", if pass { "" } else { " (FAIL)" }));
    };

    let a: Vec<Vec<f64>> = (0..300).map(|_| (0..16).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let self_fid = fid(&a, &a).unwrap();
    check("fid(A,A)", self_fid <= FID_SELF_TOL, format!("{self_fid:.1e}"));

    let one = DMatrix::from_element(1, 1, 1.0);
    let analytic = fid_from_moments(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 3.0), &one).unwrap();
    check("1-D fid", (analytic - 9.0).abs() <= FID_ANALYTIC_TOL, format!("{analytic:.9}"));

    let mut dist: Vec<f64> = (0..10).map(|_| r.random_range(0.1..1.0)).collect();
    let total: f64 = dist.iter().sum();
    dist.iter_mut().for_each(|v| *v /= total);
    let constant = vec![dist; 400];
    let is_const = inception_score(&constant, 1).unwrap();
    check("IS(const)", (is_const - 1.0).abs() <= IS_CONST_TOL, format!("{is_const:.12}"));

    let n = 7;
    let onehot: Vec<Vec<f64>> = (0..n * 30)
        .map(|i| (0..n).map(|c| if c == i % n { 1.0 } else { 0.0 }).collect())
        .collect();
    let is_hot = inception_score(&onehot, 1).unwrap();
    check("IS(one-hot x7)", (is_hot - n as f64).abs() <= IS_ONEHOT_TOL, format!("{is_hot:.9}"));

    let maps = Tensor::<f32>::uniform(&[6, 5, 4, 4], -1.0, 1.0, &mut r);
    let same = dipd(&maps, &maps).unwrap();
    check("dipd(a,a)", same == 0.0, format!("{same}"));

    let other = Tensor::<f32>::uniform(&[6, 5, 4, 4], -1.0, 1.0, &mut r);
    let scales: Vec<f32> = (0..5).map(|_| r.random_range(0.2..5.0)).collect();
    let shifts: Vec<f32> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
    let mut affine = other.clone();
    for (i, v) in affine.make_mut().iter_mut().enumerate() {
        let c = (i / 16) % 5;
        *v = *v * scales[c] + shifts[c];
    }
    let base = dipd(&maps, &other).unwrap();
    let moved = dipd(&maps, &affine).unwrap();
    let mut recolored = maps.clone();
    for (i, v) in recolored.make_mut().iter_mut().enumerate() {
        let c = (i / 16) % 5;
        *v = *v * scales[c] + shifts[c];
    }
    let self_affine = dipd(&maps, &recolored).unwrap();
    let shift_err = (base - moved).abs().max(self_affine);
    check("dipd affine drift", shift_err <= DIPD_AFFINE_TOL, format!("{shift_err:.1e}"));
    Outcome::new(ok, notes.join(", "))
}

fn ema_law() -> Outcome {
    let mut cfg = tiny_config();
    cfg.trainer.lr = 0.0;
    let w = 0.01;
    cfg.trainer.ema_weight = w;
    let corpus = presets::tiny_corpus().unwrap();
    let tr = Trainer::new(&cfg).unwrap();
    let mut st = tr.init_state().unwrap();
    let mut r = rng(7);
    for t in st.g_ema.tensors_mut() {
        for v in t.make_mut() {
            *v += r.random_range(-1.0f32..1.0);
        }
    }
    let gap0: Vec<f64> = gaps(&st.g_ema, &st.g);
    let n = 100;
    tr.run(&mut st, &corpus, n, |_, _| Ok(())).unwrap();
    let factor = (1.0 - w).powi(n as i32);
    let worst = gaps(&st.g_ema, &st.g)
        .iter()
        .zip(&gap0)
        .map(|(g, g0)| (g - factor * g0).abs())
        .fold(0.0, f64::max);
    Outcome::new(worst <= EMA_TOL, format!("w={w}, n={n}, max |gap - (1-w)^n gap0| = {worst:.2e}"))
}

fn gaps(a: &ParamStore<f32>, b: &ParamStore<f32>) -> Vec<f64> {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| *p as f64 - *q as f64)
                .collect::<Vec<_>>()
        })
        .collect()
}

fn determinism_and_resume() -> Outcome {
    let corpus = synthetic_corpus(8, 12, 16, 3).unwrap();
    let mut cfg = presets::tiny(&corpus.spec);
    cfg.dataset.image_size = 16;
    cfg.generator.image_size = 16;
    cfg.trainer.batch_size = 4;
    cfg.trainer.shots = 2;
    cfg.trainer.total_steps = 40;
    cfg.trainer.checkpoint_every = 20;
    let run = |dir: Option<PathBuf>| {
        train(
            &corpus,
            &cfg,
            TrainOptions {
                out_dir: dir,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let first = run(None);
    let second = run(None);
    let dir = tempfile::tempdir().unwrap();
    let with_ck = run(Some(dir.path().to_path_buf()));
    let trainer = Trainer::new(&cfg).unwrap();
    let mid = checkpoint::load(&checkpoint::step_dir(&dir.path().join("checkpoints"), 20), &trainer).unwrap();
    let resumed = train(
        &corpus,
        &cfg,
        TrainOptions {
            resume: Some(mid),
            ..Default::default()
        },
    )
    .unwrap();
    let bits = |log: &[LossRecord]| serde_json::to_string(log).unwrap();
    let rerun_same = bits(&first.log) == bits(&second.log) && first.state.bits_eq(&second.state);
    let resume_same = bits(&resumed.log) == bits(&first.log[20..]) && resumed.state.bits_eq(&first.state);
    let ck_same = bits(&with_ck.log) == bits(&first.log);
    Outcome::new(
        rerun_same && resume_same && ck_same,
        format!("rerun identical: {rerun_same}, resume from step 20 identical: {resume_same}, checkpointing transparent: {ck_same}"),
    )
}

// Desk-scale criteria.

fn desk_corpus() -> Corpus {
    synthetic_corpus(DESK_CLASSES, DESK_IMAGES_PER_CLASS, 32, 0).unwrap()
}

fn cache_dir() -> PathBuf {
    std::env::var_os("KSHOT_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

fn desk_config(corpus: &Corpus, setting: Ablation, seed: u64) -> Config {
    let mut cfg = setting.apply(&presets::desk(&corpus.spec));
    cfg.trainer.seed = seed;
    cfg.trainer.checkpoint_every = 500;
    cfg
}

/// Averaged generator of a default-length desk run, trained or resumed as
/// needed.
fn desk_model(corpus: &Corpus, setting: Ablation, seed: u64) -> (Trainer, ParamStore<f32>) {
    let cfg = desk_config(corpus, setting, seed);
    let out = cache_dir().join(format!("{}-seed{seed}", setting.name()));
    let trainer = Trainer::new(&cfg).unwrap();
    let resume = checkpoint::resolve(&out)
        .ok()
        .and_then(|dir| checkpoint::load(&dir, &trainer).ok())
        .filter(|s| s.step <= cfg.trainer.total_steps);
    let state = match resume {
        Some(s) if s.step == cfg.trainer.total_steps => s,
        resume => {
            train(
                corpus,
                &cfg,
                TrainOptions {
                    out_dir: Some(out),
                    evaluator: None,
                    resume,
                },
            )
            .unwrap()
            .state
        }
    };
    (trainer, state.g_ema)
}

fn desk_report(ev: &Evaluator, corpus: &Corpus, setting: Ablation, seed: u64, k: usize) -> MetricReport {
    let (trainer, g_ema) = desk_model(corpus, setting, seed);
    ev.evaluate(&GeneratorTranslator::new(&trainer.gen, &g_ema), k, cfg_steps(corpus))
        .unwrap()
}

fn cfg_steps(corpus: &Corpus) -> u64 {
    presets::desk(&corpus.spec).trainer.total_steps
}

fn desk_evaluator(corpus: &Corpus) -> Evaluator {
    Evaluator::prepare(corpus, &presets::desk(&corpus.spec).eval).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_end_to_end() -> Outcome {
    let corpus = desk_corpus();
    let ev = desk_evaluator(&corpus);
    let identity = ev.evaluate(&IdentityTranslator, 1, 0).unwrap();
    let reports: Vec<MetricReport> = DESK_SEEDS
        .iter()
        .map(|&s| desk_report(&ev, &corpus, Ablation::Full, s, 1))
        .collect();
    let top1 = mean(&reports.iter().map(|r| r.top1_test).collect::<Vec<_>>());
    let mfid = mean(&reports.iter().map(|r| r.mfid).collect::<Vec<_>>());
    let chance = 100.0 / corpus.spec.target_classes.len() as f64;
    let top1_ok = top1 >= CHANCE_MULTIPLE * chance;
    let mfid_ok = mfid <= (1.0 - MFID_IMPROVEMENT) * identity.mfid;
    Outcome::new(
        top1_ok && mfid_ok,
        format!(
            "mean top1_test {top1:.2}% (need >= {:.2}%), mean mFID {mfid:.3} vs identity {:.3} (need <= {:.3})",
            CHANCE_MULTIPLE * chance,
            identity.mfid,
            (1.0 - MFID_IMPROVEMENT) * identity.mfid
        ),
    )
}

fn ablation_direction() -> Outcome {
    let corpus = desk_corpus();
    let ev = desk_evaluator(&corpus);
    let mut degraded = 0;
    let mut notes = Vec::new();
    let mut fm_finite = true;
    for &seed in &DESK_SEEDS {
        let full = desk_report(&ev, &corpus, Ablation::Full, seed, 1);
        let no_gp = desk_report(&ev, &corpus, Ablation::NoGp, seed, 1);
        let no_fm = desk_report(&ev, &corpus, Ablation::NoFm, seed, 1);
        if no_gp.mfid > full.mfid {
            degraded += 1;
        }
        fm_finite &= [no_fm.top1_all, no_fm.dipd, no_fm.mfid, no_fm.is_all].iter().all(|v| v.is_finite());
        notes.push(format!(
            "seed {seed}: full {:.2} / no-gp {:.2} / no-fm {:.2}",
            full.mfid, no_gp.mfid, no_fm.mfid
        ));
    }
    Outcome::new(
        degraded >= 2 && fm_finite,
        format!(
            "mFID {}; no-gp worse on {degraded}/3 seeds, no-fm finite: {fm_finite}",
            notes.join("; ")
        ),
    )
}

fn k_monotonicity() -> Outcome {
    let corpus = desk_corpus();
    let ev = desk_evaluator(&corpus);
    let k1: Vec<f64> = DESK_SEEDS
        .iter()
        .map(|&s| desk_report(&ev, &corpus, Ablation::Full, s, 1).mfid)
        .collect();
    let k5: Vec<f64> = DESK_SEEDS
        .iter()
        .map(|&s| desk_report(&ev, &corpus, Ablation::Full, s, 5).mfid)
        .collect();
    let (m1, m5) = (mean(&k1), mean(&k5));
    Outcome::new(m5 <= m1, format!("mean mFID K=1 {m1:.3}, K=5 {m5:.3}"))
}

fn fewshot_augmentation() -> Outcome {
    let corpus = desk_corpus();
    let (trainer, g_ema) = desk_model(&corpus, Ablation::Full, DESK_SEEDS[0]);
    let start = Instant::now();
    let cfg = FewShotConfig {
        generated_counts: vec![0, 100],
        ..FewShotConfig::default()
    };
    let extractor = train_eval_classifier(&corpus, &corpus.spec.source_labels(), &presets::desk(&corpus.spec).eval.classifier).unwrap();
    let exp = FewShotExperiment::new(&corpus, &extractor, &cfg).unwrap();
    let tr = GeneratorTranslator::new(&trainer.gen, &g_ema);
    let report = exp.run(&tr).unwrap();
    let baseline = exp.baseline(&tr).unwrap();
    let (n0, n100) = (&report.rows[0], &report.rows[1]);
    let embed_ok = (n0.mean - baseline.mean).abs() <= FEWSHOT_BASELINE_TOL;
    let improve_ok = n100.mean >= baseline.mean;
    Outcome::new(
        embed_ok && improve_ok,
        format!(
            "baseline {:.2}%, N=0 row {:.2}%, N=100 {:.2}% (few-shot stage {:.0} s)",
            baseline.mean,
            n0.mean,
            n100.mean,
            start.elapsed().as_secs_f64()
        ),
    )
}
