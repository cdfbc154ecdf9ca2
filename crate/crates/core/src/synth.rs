//! Procedural corpus: each class is a (shape, palette, texture) combination
//! and images within a class differ only in position, scale and rotation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{image_to_chw, Corpus, DatasetSpec, TrainingClasses};
use crate::error::{Error, Result};

pub const N_SHAPES: usize = 8;
pub const N_PALETTES: usize = 8;
pub const N_TEXTURES: usize = 4;

/// Foreground, accent and background colours.
const PALETTES: [[[u8; 3]; 3]; N_PALETTES] = [
    [[220, 40, 40], [250, 200, 60], [20, 30, 60]],
    [[40, 170, 60], [240, 240, 240], [70, 20, 40]],
    [[40, 80, 220], [120, 230, 250], [240, 220, 180]],
    [[240, 200, 30], [60, 40, 20], [30, 90, 90]],
    [[170, 60, 200], [250, 150, 220], [20, 60, 20]],
    [[250, 130, 20], [20, 20, 20], [180, 210, 240]],
    [[30, 200, 200], [10, 60, 120], [120, 40, 10]],
    [[235, 235, 235], [200, 30, 90], [50, 50, 50]],
];

/// Visual identity of class `i`.
pub fn class_recipe(i: usize) -> (usize, usize, usize) {
    (
        i % N_SHAPES,
        (i / N_SHAPES + i) % N_PALETTES,
        (i / (N_SHAPES * N_PALETTES) + i) % N_TEXTURES,
    )
}

pub fn class_name(i: usize) -> String {
    format!("class_{i:02}")
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    let r = u.hypot(v);
    match shape {
        0 => r < 1.0,
        1 => u.abs().max(v.abs()) < 0.8,
        2 => {
            // Equilateral triangle with circumradius 1.
            v > -0.5 && v < 1.0 - 3f64.sqrt() * u.abs()
        }
        3 => u.abs() + v.abs() < 1.0,
        4 => (u.abs() < 0.3 && v.abs() < 1.0) || (v.abs() < 0.3 && u.abs() < 1.0),
        5 => r > 0.55 && r < 1.0,
        6 => r < 0.55 + 0.45 * (5.0 * v.atan2(u)).cos(),
        _ => r < 1.0 && (u - 0.5).hypot(v) > 0.65,
    }
}

fn textured(texture: usize, u: f64, v: f64) -> bool {
    match texture {
        0 => false,
        1 => (u * 2.5 * PI).sin() > 0.0,
        2 => ((u * 2.0).floor() + (v * 2.0).floor()).rem_euclid(2.0) == 0.0,
        _ => {
            let (fu, fv) = ((u * 2.0).rem_euclid(1.0) - 0.5, (v * 2.0).rem_euclid(1.0) - 0.5);
            fu.hypot(fv) < 0.25
        }
    }
}

/// Render one image of class `class` with a pose drawn from `rng`.
pub fn render(class: usize, size: usize, rng: &mut impl Rng) -> RgbImage {
    let (shape, palette, texture) = class_recipe(class);
    let [fg, accent, bg] = PALETTES[palette];
    let s = size as f64;
    let cx = s * (0.5 + rng.random_range(-0.15..0.15));
    let cy = s * (0.5 + rng.random_range(-0.15..0.15));
    let radius = s * rng.random_range(0.26..0.4);
    let angle = rng.random_range(0.0..2.0 * PI);
    let (sin, cos) = angle.sin_cos();
    let shade = rng.random_range(-12.0..12.0);
    const SS: usize = 3;
    RgbImage::from_fn(size as u32, size as u32, |px, py| {
        let mut acc = [0f64; 3];
        for sy in 0..SS {
            for sx in 0..SS {
                let x = px as f64 + (sx as f64 + 0.5) / SS as f64 - cx;
                let y = py as f64 + (sy as f64 + 0.5) / SS as f64 - cy;
                let u = (cos * x + sin * y) / radius;
                let v = (-sin * x + cos * y) / radius;
                let c = if inside(shape, u, v) {
                    if textured(texture, u, v) {
                        accent
                    } else {
                        fg
                    }
                } else {
                    bg
                };
                for k in 0..3 {
                    acc[k] += c[k] as f64;
                }
            }
        }
        let n = (SS * SS) as f64;
        Rgb(acc.map(|a| (a / n + shade).round().clamp(0.0, 255.0) as u8))
    })
}

fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(class as u64);
    r
}

/// Split rule: the last `n_classes / 5` classes (at least one) are targets.
pub fn default_split(n_classes: usize) -> (Vec<String>, Vec<String>) {
    let n_tgt = (n_classes / 5).max(1);
    let names: Vec<String> = (0..n_classes).map(class_name).collect();
    let (s, t) = names.split_at(n_classes - n_tgt);
    (s.to_vec(), t.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCard {
    pub generator: String,
    pub seed: u64,
    pub n_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub source_classes: Vec<String>,
    pub target_classes: Vec<String>,
}

pub const CORPUS_CARD: &str = "corpus.toml";

fn check_args(n_classes: usize, per_class: usize, image_size: usize) -> Result<()> {
    if n_classes < 4 {
        return Err(Error::config("synthetic corpus needs at least 4 classes"));
    }
    if per_class == 0 || image_size < 4 {
        return Err(Error::config("synthetic corpus needs images of side >= 4 and >= 1 image per class"));
    }
    Ok(())
}

/// Write the corpus as PNGs under `root/<class>/` with a manifest, and
/// return the matching dataset section.
pub fn synthesize_corpus(root: &Path, n_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<DatasetSpec> {
    check_args(n_classes, per_class, image_size)?;
    let (source_classes, target_classes) = default_split(n_classes);
    for c in 0..n_classes {
        let dir = root.join(class_name(c));
        std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        let mut rng = class_rng(seed, c);
        for i in 0..per_class {
            let path = dir.join(format!("img_{i:04}.png"));
            render(c, image_size, &mut rng).save(&path)?;
        }
    }
    let card = CorpusCard {
        generator: "shape-palette-texture v1".into(),
        seed,
        n_classes,
        images_per_class: per_class,
        image_size,
        source_classes: source_classes.clone(),
        target_classes: target_classes.clone(),
    };
    let text = toml::to_string_pretty(&card).map_err(|e| Error::Toml(e.to_string()))?;
    let mpath = root.join(CORPUS_CARD);
    std::fs::write(&mpath, text).map_err(|e| Error::file(&mpath, e))?;
    Ok(DatasetSpec {
        root: root.to_path_buf(),
        source_classes,
        target_classes,
        image_size,
        training_classes: TrainingClasses::SourceOnly,
        flip: true,
    })
}

/// The same corpus rendered straight into memory.
pub fn synthetic_corpus(n_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Corpus> {
    check_args(n_classes, per_class, image_size)?;
    let (source_classes, target_classes) = default_split(n_classes);
    let spec = DatasetSpec {
        root: PathBuf::from("<memory>"),
        source_classes,
        target_classes,
        image_size,
        training_classes: TrainingClasses::SourceOnly,
        flip: true,
    };
    let images = (0..n_classes)
        .map(|c| {
            let mut rng = class_rng(seed, c);
            (0..per_class).map(|_| image_to_chw(&render(c, image_size, &mut rng))).collect()
        })
        .collect();
    Corpus::from_images(spec, images)
}
