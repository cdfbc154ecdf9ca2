mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kshot_core::checkpoint;
use kshot_core::dataset::{load_image, save_png};
use kshot_core::evaluator::classifier::train_eval_classifier;
use kshot_core::evaluator::tools::{export_class_codes, images_of, interpolate_class_codes, write_grid};
use kshot_core::evaluator::{Evaluator, GeneratorTranslator, IdentityTranslator, MetricReport, Translator};
use kshot_core::fewshot::FewShotExperiment;
use kshot_core::generator::Generator;
use kshot_core::tensor::{ParamStore, Tensor};
use kshot_core::trainer::{self, run_ablation, run_source_count_sweep, TrainOptions, Trainer};
use kshot_core::{presets, synth, Config, Corpus, Error, Result};
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "kshot", version, about = "Few-shot image-to-image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. `trainer.toggles.use_gp=false`.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct CheckpointArgs {
    /// Checkpoint step directory, checkpoint root or training output dir.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides applied to the config stored in the checkpoint.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a translator.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate every image in a directory into the class shown by K images.
    Translate {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        content: PathBuf,
        #[arg(long = "class")]
        class_dir: PathBuf,
        #[arg(long, short = 'k', default_value_t = 1)]
        shots: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (or the identity mapping) on the target classes.
    Evaluate {
        /// Omit together with `--identity` to score the identity baseline.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config for `--identity` runs.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        identity: bool,
        /// Comma-separated K values; defaults to `eval.shots`.
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a content image with class codes interpolated between two
    /// class images.
    Interpolate {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        class_a: PathBuf,
        #[arg(long)]
        class_b: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on nested subsets of the source classes.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model and the no-feature-matching and
    /// no-gradient-penalty variants.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// K used for scoring; defaults to the first of `eval.shots`.
        #[arg(long, short = 'k')]
        shots: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-shot classification of the target classes with translated
    /// training images.
    FewshotClassify {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the procedural shape corpus and a matching config.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the class code of every corpus image as CSV.
    ExportCodes {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<Config> {
    let cfg = Config::load(&args.config)?.with_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Averaged generator and its config from a checkpoint.
fn load_generator(args: &CheckpointArgs) -> Result<(Config, Generator, ParamStore<f32>)> {
    let (cfg, params) = checkpoint::load_inference(&args.checkpoint)?;
    let cfg = cfg.with_overrides(&args.overrides)?;
    cfg.validate()?;
    let trainer = Trainer::new(&cfg)?;
    let fresh = trainer.init_state()?.g;
    let gen = trainer.gen;
    if !fresh.congruent(&params) {
        return Err(Error::config("checkpoint generator does not match its config"));
    }
    Ok((cfg, gen, params))
}

/// Run `work` between writing the manifest and marking it finished.
fn with_manifest(m: RunManifest, work: impl FnOnce() -> Result<()>) -> Result<()> {
    m.write()?;
    let r = work();
    m.finish(r.is_ok())?;
    r
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::file(path, e))
}

fn write_table<'a>(path: &Path, lead: &[&str], rows: impl IntoIterator<Item = (Vec<String>, &'a MetricReport)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = lead.to_vec();
    header.extend(MetricReport::COLUMNS);
    w.write_record(&header)?;
    for (mut lead, report) in rows {
        lead.extend(report.row());
        w.write_record(&lead)?;
    }
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|_| Error::config(format!("image directory {} not found", dir.display())))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stack_files(files: &[PathBuf], size: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(files.len() * 3 * size * size);
    for f in files {
        data.extend(load_image(f, size)?);
    }
    Ok(Tensor::from_vec(data, &[files.len(), 3, size, size])?)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, out, resume } => {
            let config = load_config(&cfg)?;
            let m = RunManifest::new("train", &cfg.overrides, Some(&config), Some(config.trainer.seed), &out);
            with_manifest(m, || {
                let corpus = Corpus::load(&config.dataset)?;
                let evaluator = if config.trainer.eval_every > 0 {
                    Some(Evaluator::prepare(&corpus, &config.eval)?)
                } else {
                    None
                };
                let resume = match resume {
                    Some(p) => Some(checkpoint::load(&p, &Trainer::new(&config)?)?),
                    None => None,
                };
                let outcome = trainer::train(
                    &corpus,
                    &config,
                    TrainOptions {
                        out_dir: Some(out.clone()),
                        evaluator: evaluator.as_ref(),
                        resume,
                    },
                )?;
                log::info!("trained to step {}", outcome.state.step);
                Ok(())
            })
        }
        Command::Translate {
            ck,
            content,
            class_dir,
            shots,
            out,
        } => {
            let (config, gen, params) = load_generator(&ck)?;
            let size = config.dataset.image_size;
            let class_files = image_files(&class_dir)?;
            if shots == 0 || shots > class_files.len() {
                return Err(Error::config(format!(
                    "K={shots} but {} class images in {}",
                    class_files.len(),
                    class_dir.display()
                )));
            }
            let content_files = image_files(&content)?;
            if content_files.is_empty() {
                return Err(Error::config(format!("no content images in {}", content.display())));
            }
            let m = RunManifest::new("translate", &ck.overrides, Some(&config), None, &out);
            with_manifest(m, || {
                let ys = stack_files(&class_files[..shots], size)?;
                let tr = GeneratorTranslator::new(&gen, &params);
                let mut grid_rows: Vec<Vec<Vec<f32>>> = vec![images_of(&ys).iter().map(|s| s.to_vec()).collect()];
                for chunk in content_files.chunks(16) {
                    let x = stack_files(chunk, size)?;
                    let reps: Vec<Tensor<f32>> = (0..chunk.len()).map(|_| ys.clone()).collect();
                    let y = tr.translate(&x, &Tensor::cat0(&reps)?, shots)?;
                    for ((file, xi), yi) in chunk.iter().zip(images_of(&x)).zip(images_of(&y)) {
                        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                        save_png(yi, size, &out.join(format!("{stem}.png")))?;
                        grid_rows.push(vec![xi.to_vec(), yi.to_vec()]);
                    }
                }
                let rows: Vec<Vec<&[f32]>> = grid_rows.iter().map(|r| r.iter().map(Vec::as_slice).collect()).collect();
                write_grid(&rows, size, &out.join("grid.png"))
            })
        }
        Command::Evaluate {
            checkpoint: ck,
            config,
            overrides,
            identity,
            shots,
            out,
        } => {
            let mut step = 0;
            let (cfg, gen) = match (&ck, identity) {
                (Some(path), false) => {
                    step = checkpoint::read_manifest(&checkpoint::resolve(path)?)?.step;
                    let (cfg, gen, params) = load_generator(&CheckpointArgs {
                        checkpoint: path.clone(),
                        overrides: overrides.clone(),
                    })?;
                    (cfg, Some((gen, params)))
                }
                (None, true) => {
                    let path = config.ok_or_else(|| Error::config("--identity needs --config"))?;
                    let cfg = load_config(&ConfigArgs {
                        config: path,
                        overrides: overrides.clone(),
                    })?;
                    (cfg, None)
                }
                _ => return Err(Error::config("pass exactly one of --checkpoint or --identity")),
            };
            let mut eval_cfg = cfg.eval.clone();
            if !shots.is_empty() {
                eval_cfg.shots = shots;
            }
            eval_cfg.validate()?;
            let m = RunManifest::new("evaluate", &overrides, Some(&cfg), Some(eval_cfg.seed), &out);
            with_manifest(m, || {
                let corpus = Corpus::load(&cfg.dataset)?;
                let ev = Evaluator::prepare(&corpus, &eval_cfg)?;
                let tr: Box<dyn Translator + '_> = match &gen {
                    Some((g, p)) => Box::new(GeneratorTranslator::new(g, p)),
                    None => Box::new(IdentityTranslator),
                };
                let reports = ev.evaluate_all(tr.as_ref(), step)?;
                write_json(&out.join("reports.json"), &reports)?;
                write_table(
                    &out.join("reports.csv"),
                    &["translator"],
                    reports.iter().map(|r| (vec![r.translator.clone()], r)),
                )
            })
        }
        Command::Interpolate {
            ck,
            content,
            class_a,
            class_b,
            steps,
            out,
        } => {
            let (config, gen, params) = load_generator(&ck)?;
            let size = config.dataset.image_size;
            let m = RunManifest::new("interpolate", &ck.overrides, Some(&config), None, &out);
            with_manifest(m, || {
                let x = stack_files(&[content.clone()], size)?;
                let a = stack_files(&[class_a.clone()], size)?;
                let b = stack_files(&[class_b.clone()], size)?;
                let frames = interpolate_class_codes(&gen, &params, &x, &a, &b, steps)?;
                for (i, f) in frames.iter().enumerate() {
                    save_png(f.data(), size, &out.join(format!("frame_{i:02}.png")))?;
                }
                let mut row: Vec<&[f32]> = vec![a.data()];
                row.extend(frames.iter().map(|f| f.data()));
                row.push(b.data());
                write_grid(&[vec![x.data()], row], size, &out.join("interpolation.png"))
            })
        }
        Command::Sweep { cfg, counts, out } => {
            let config = load_config(&cfg)?;
            let m = RunManifest::new("sweep", &cfg.overrides, Some(&config), Some(config.trainer.seed), &out);
            with_manifest(m, || {
                let corpus = Corpus::load(&config.dataset)?;
                let ev = Evaluator::prepare(&corpus, &config.eval)?;
                let rows = run_source_count_sweep(&corpus, &config, &counts, &ev, Some(&out))?;
                write_json(&out.join("sweep.json"), &rows)?;
                write_table(
                    &out.join("sweep.csv"),
                    &["source_classes"],
                    rows.iter().map(|r| (vec![r.source_classes.to_string()], &r.report)),
                )
            })
        }
        Command::Ablate { cfg, seeds, shots, out } => {
            let config = load_config(&cfg)?;
            let k = shots.or(config.eval.shots.first().copied()).unwrap_or(1);
            let mut eval_cfg = config.eval.clone();
            if !eval_cfg.shots.contains(&k) {
                eval_cfg.shots = vec![k];
            }
            let m = RunManifest::new("ablate", &cfg.overrides, Some(&config), seeds.first().copied(), &out);
            with_manifest(m, || {
                let corpus = Corpus::load(&config.dataset)?;
                let ev = Evaluator::prepare(&corpus, &eval_cfg)?;
                let rows = run_ablation(&corpus, &config, &seeds, k, &ev, Some(&out))?;
                write_json(&out.join("ablation.json"), &rows)?;
                write_table(
                    &out.join("ablation.csv"),
                    &["setting", "seed"],
                    rows.iter()
                        .map(|r| (vec![r.setting.name().to_owned(), r.seed.to_string()], &r.report)),
                )
            })
        }
        Command::FewshotClassify { ck, out } => {
            let (config, gen, params) = load_generator(&ck)?;
            let m = RunManifest::new("fewshot-classify", &ck.overrides, Some(&config), Some(config.fewshot.seed), &out);
            with_manifest(m, || {
                let corpus = Corpus::load(&config.dataset)?;
                let extractor = train_eval_classifier(&corpus, &corpus.spec.source_labels(), &config.eval.classifier)?;
                let exp = FewShotExperiment::new(&corpus, &extractor, &config.fewshot)?;
                let report = exp.run(&GeneratorTranslator::new(&gen, &params))?;
                write_json(&out.join("fewshot.json"), &report)?;
                let path = out.join("fewshot.csv");
                let mut w = csv::Writer::from_path(&path)?;
                let mut header = vec!["generated".to_owned(), "multiplier".into(), "decay".into(), "mean".into()];
                header.extend(exp.splits.iter().map(|s| format!("split{}", s.split_id)));
                w.write_record(&header)?;
                for row in &report.rows {
                    let mut rec = vec![
                        row.generated.to_string(),
                        format!("{:e}", row.multiplier),
                        format!("{:e}", row.decay),
                        format!("{:.2}", row.mean),
                    ];
                    rec.extend(row.splits.iter().map(|s| format!("{:.2}+-{:.2}", s.mean, s.std)));
                    w.write_record(&rec)?;
                }
                w.flush().map_err(|e| Error::file(&path, e))?;
                Ok(())
            })
        }
        Command::SynthData {
            out,
            classes,
            per_class,
            size,
            seed,
        } => {
            let m = RunManifest::new("synth-data", &[], None, Some(seed), &out);
            with_manifest(m, || {
                let spec = synth::synthesize_corpus(&out, classes, per_class, size, seed)?;
                let mut cfg = presets::desk(&spec);
                if size != cfg.generator.image_size {
                    cfg.dataset.image_size = size;
                    cfg.generator.image_size = size;
                }
                let path = out.join("config.toml");
                std::fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::file(&path, e))
            })
        }
        Command::ExportCodes { ck, out } => {
            let (config, gen, params) = load_generator(&ck)?;
            let m = RunManifest::new("export-codes", &ck.overrides, Some(&config), None, &out);
            with_manifest(m, || {
                let corpus = Corpus::load(&config.dataset)?;
                let path = out.join("class_codes.csv");
                let file = std::fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
                let refs: Vec<_> = (0..corpus.spec.n_classes()).flat_map(|l| corpus.refs_of(l)).collect();
                let labels: Vec<usize> = refs.iter().map(|r| r.label).collect();
                let rows = export_class_codes(&gen, &params, &corpus.stack(&refs, None), &labels, std::io::BufWriter::new(file))?;
                log::info!("wrote {rows} class codes to {}", path.display());
                Ok(())
            })
        }
    }
}
