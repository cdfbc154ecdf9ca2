//! Class-partitioned image corpora: scanning, decoding, normalisation and
//! sampling of training tuples.
//!
//! Layout on disk is one directory per class, `root/<class>/*.png|jpg`.
//! Global labels follow the declared order: source classes first, then
//! target classes. A source class's label is therefore also its
//! discriminator head index.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use kshot_tensor::{Float, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which classes feed adversarial training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingClasses {
    /// Few-shot setting: only source classes are seen during training.
    #[default]
    SourceOnly,
    /// Every declared class (source and target) is a training class.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub source_classes: Vec<String>,
    pub target_classes: Vec<String>,
    pub image_size: usize,
    pub training_classes: TrainingClasses,
    /// Random horizontal flips on training samples.
    pub flip: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/synth"),
            source_classes: Vec::new(),
            target_classes: Vec::new(),
            image_size: 32,
            training_classes: TrainingClasses::SourceOnly,
            flip: true,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let src: HashSet<&String> = self.source_classes.iter().collect();
        if src.len() != self.source_classes.len() {
            return Err(Error::config("duplicate source class"));
        }
        if let Some(c) = self.target_classes.iter().find(|c| src.contains(c)) {
            return Err(Error::config(format!("class `{c}` is both source and target")));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        Ok(())
    }

    pub fn all_classes(&self) -> impl Iterator<Item = &String> {
        self.source_classes.iter().chain(&self.target_classes)
    }

    pub fn n_classes(&self) -> usize {
        self.source_classes.len() + self.target_classes.len()
    }

    /// Global labels of the training classes.
    pub fn training_labels(&self) -> Vec<usize> {
        match self.training_classes {
            TrainingClasses::SourceOnly => (0..self.source_classes.len()).collect(),
            TrainingClasses::All => (0..self.n_classes()).collect(),
        }
    }

    pub fn source_labels(&self) -> Vec<usize> {
        (0..self.source_classes.len()).collect()
    }

    pub fn target_labels(&self) -> Vec<usize> {
        (self.source_classes.len()..self.n_classes()).collect()
    }

    /// Restrict training to the first `n` source classes.
    pub fn with_first_sources(&self, n: usize) -> Result<Self> {
        if n > self.source_classes.len() {
            return Err(Error::config(format!(
                "requested {n} source classes, only {} declared",
                self.source_classes.len()
            )));
        }
        let mut s = self.clone();
        s.source_classes.truncate(n);
        Ok(s)
    }
}

/// Files of one class in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassFiles {
    pub name: String,
    pub files: Vec<PathBuf>,
}

/// Decodable image files per declared class, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusIndex {
    pub classes: Vec<ClassFiles>,
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Index every declared class directory, dropping files that fail to decode.
pub fn scan_corpus(spec: &DatasetSpec) -> Result<CorpusIndex> {
    Ok(CorpusIndex {
        classes: scan_with_images(spec)?.into_iter().map(|(c, _)| c).collect(),
    })
}

fn scan_with_images(spec: &DatasetSpec) -> Result<Vec<(ClassFiles, Vec<RgbImage>)>> {
    if !spec.root.is_dir() {
        return Err(Error::config(format!("dataset root {} is not a directory", spec.root.display())));
    }
    let mut out = Vec::with_capacity(spec.n_classes());
    for name in spec.all_classes() {
        let dir = spec.root.join(name);
        if !dir.is_dir() {
            return Err(Error::config(format!("class directory {} is missing", dir.display())));
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::file(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        paths.sort();
        let mut files = Vec::with_capacity(paths.len());
        let mut images = Vec::with_capacity(paths.len());
        for p in paths {
            match image::open(&p) {
                Ok(img) => {
                    images.push(img.to_rgb8());
                    files.push(p);
                }
                Err(e) => log::warn!("skipping undecodable image {}: {e}", p.display()),
            }
        }
        if files.is_empty() {
            return Err(Error::config(format!("class `{name}` has no decodable images")));
        }
        out.push((ClassFiles { name: name.clone(), files }, images));
    }
    Ok(out)
}

/// `[0, 255] -> [-1, 1]`.
pub fn normalize_pixel(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// `[-1, 1] -> [0, 255]`, rounding and clamping.
pub fn denormalize_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// CHW planar values in `[-1, 1]` from an RGB image.
pub fn image_to_chw(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = normalize_pixel(px[c]);
        }
    }
    out
}

pub fn chw_to_image(values: &[f32], size: usize) -> RgbImage {
    let plane = size * size;
    ImageBuffer::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        Rgb([0, 1, 2].map(|c| denormalize_pixel(values[c * plane + i])))
    })
}

/// Decode, bilinearly resize and normalise one image file.
pub fn load_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb8();
    Ok(image_to_chw(&resize(img, size)))
}

fn resize(img: RgbImage, size: usize) -> RgbImage {
    if img.dimensions() == (size as u32, size as u32) {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    }
}

/// Write one CHW image with values in `[-1,1]` as a PNG.
pub fn save_png(values: &[f32], size: usize, path: &Path) -> Result<()> {
    chw_to_image(values, size).save(path)?;
    Ok(())
}

/// Reference to one image: `(global label, index within class)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRef {
    pub label: usize,
    pub index: usize,
}

/// A sampled `(content, K class images)` pair with its classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTuple {
    pub content: ImageRef,
    pub class_set: Vec<ImageRef>,
    pub c_x: usize,
    pub c_y: usize,
}

/// A batch ready for the networks. `class_images` is sample-major:
/// rows `b*K .. (b+1)*K` belong to sample `b`.
#[derive(Debug, Clone)]
pub struct TrainBatch<T: Float> {
    pub content: Tensor<T>,
    pub class_images: Tensor<T>,
    pub k: usize,
    pub c_x: Vec<usize>,
    pub c_y: Vec<usize>,
}

/// Decoded, normalised corpus held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: DatasetSpec,
    pub index: CorpusIndex,
    images: Vec<Vec<Vec<f32>>>,
}

impl Corpus {
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let scanned = scan_with_images(spec)?;
        let mut classes = Vec::with_capacity(scanned.len());
        let mut images = Vec::with_capacity(scanned.len());
        for (c, imgs) in scanned {
            images.push(imgs.into_iter().map(|i| image_to_chw(&resize(i, spec.image_size))).collect());
            classes.push(c);
        }
        Ok(Self {
            spec: spec.clone(),
            index: CorpusIndex { classes },
            images,
        })
    }

    /// Build from in-memory images (tests, tools). `images[label]` holds
    /// CHW vectors of side `spec.image_size`.
    pub fn from_images(spec: DatasetSpec, images: Vec<Vec<Vec<f32>>>) -> Result<Self> {
        spec.validate()?;
        if images.len() != spec.n_classes() {
            return Err(Error::contract("one image list per declared class required"));
        }
        let len = 3 * spec.image_size * spec.image_size;
        if images.iter().flatten().any(|i| i.len() != len) {
            return Err(Error::contract("image size does not match spec"));
        }
        let classes = spec
            .all_classes()
            .zip(&images)
            .map(|(n, imgs)| ClassFiles {
                name: n.clone(),
                files: (0..imgs.len()).map(|i| PathBuf::from(format!("{n}/{i}"))).collect(),
            })
            .collect();
        Ok(Self {
            spec,
            index: CorpusIndex { classes },
            images,
        })
    }

    /// Keep the first `n` source classes and every target class, relabelled
    /// in declaration order.
    pub fn with_first_sources(&self, n: usize) -> Result<Self> {
        let spec = self.spec.with_first_sources(n)?;
        let src = self.spec.source_classes.len();
        let keep: Vec<usize> = (0..n).chain(src..self.spec.n_classes()).collect();
        Ok(Self {
            spec,
            index: CorpusIndex {
                classes: keep.iter().map(|&i| self.index.classes[i].clone()).collect(),
            },
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
        })
    }

    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }

    pub fn class_len(&self, label: usize) -> usize {
        self.images[label].len()
    }

    pub fn image(&self, r: ImageRef) -> &[f32] {
        &self.images[r.label][r.index]
    }

    pub fn refs_of(&self, label: usize) -> Vec<ImageRef> {
        (0..self.class_len(label)).map(|index| ImageRef { label, index }).collect()
    }

    /// Stack referenced images into `[N,3,H,W]`, flipping those whose flag
    /// is set.
    pub fn stack<T: Float>(&self, refs: &[ImageRef], flips: Option<&[bool]>) -> Tensor<T> {
        let s = self.image_size();
        let mut data = Vec::with_capacity(refs.len() * 3 * s * s);
        for (i, r) in refs.iter().enumerate() {
            let img = self.image(*r);
            let flip = flips.is_some_and(|f| f[i]);
            for row in img.chunks(s) {
                if flip {
                    data.extend(row.iter().rev().map(|&v| T::from_f64_lossy(v as f64)));
                } else {
                    data.extend(row.iter().map(|&v| T::from_f64_lossy(v as f64)));
                }
            }
        }
        Tensor::from_vec(data, &[refs.len(), 3, s, s]).expect("stack shape")
    }

    /// Draw `(c_x, c_y)` distinct and uniform over `classes`, a content
    /// image uniform within `c_x`, and `k` class images uniform with
    /// replacement within `c_y`.
    pub fn sample_training_tuple<R: Rng + ?Sized>(&self, classes: &[usize], k: usize, rng: &mut R) -> Result<TrainingTuple> {
        if classes.len() < 2 {
            return Err(Error::config("sampling needs at least two training classes"));
        }
        if k == 0 {
            return Err(Error::contract("K must be at least 1"));
        }
        let i = rng.random_range(0..classes.len());
        let mut j = rng.random_range(0..classes.len() - 1);
        if j >= i {
            j += 1;
        }
        let (c_x, c_y) = (classes[i], classes[j]);
        let content = ImageRef {
            label: c_x,
            index: rng.random_range(0..self.class_len(c_x)),
        };
        let class_set = (0..k)
            .map(|_| ImageRef {
                label: c_y,
                index: rng.random_range(0..self.class_len(c_y)),
            })
            .collect();
        Ok(TrainingTuple {
            content,
            class_set,
            c_x,
            c_y,
        })
    }

    /// Sample `batch` tuples and materialise them. Flips (when `flip` is set)
    /// are drawn per image after the tuples.
    pub fn sample_batch<T: Float, R: Rng + ?Sized>(&self, classes: &[usize], batch: usize, k: usize, rng: &mut R) -> Result<TrainBatch<T>> {
        let tuples = (0..batch)
            .map(|_| self.sample_training_tuple(classes, k, rng))
            .collect::<Result<Vec<_>>>()?;
        let content: Vec<ImageRef> = tuples.iter().map(|t| t.content).collect();
        let class_refs: Vec<ImageRef> = tuples.iter().flat_map(|t| t.class_set.iter().copied()).collect();
        let cf = self.draw_flips(content.len(), rng);
        let yf = self.draw_flips(class_refs.len(), rng);
        Ok(TrainBatch {
            content: self.stack(&content, cf.as_deref()),
            class_images: self.stack(&class_refs, yf.as_deref()),
            k,
            c_x: tuples.iter().map(|t| t.c_x).collect(),
            c_y: tuples.iter().map(|t| t.c_y).collect(),
        })
    }

    /// Images drawn uniformly over classes then files, with labels.
    pub fn sample_images<T: Float, R: Rng + ?Sized>(&self, classes: &[usize], n: usize, rng: &mut R) -> (Tensor<T>, Vec<usize>) {
        let refs: Vec<ImageRef> = (0..n)
            .map(|_| {
                let label = classes[rng.random_range(0..classes.len())];
                ImageRef {
                    label,
                    index: rng.random_range(0..self.class_len(label)),
                }
            })
            .collect();
        let flips = self.draw_flips(n, rng);
        (self.stack(&refs, flips.as_deref()), refs.iter().map(|r| r.label).collect())
    }

    fn draw_flips<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Option<Vec<bool>> {
        self.spec.flip.then(|| (0..n).map(|_| rng.random_bool(0.5)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec_with(n_src: usize, n_tgt: usize) -> DatasetSpec {
        DatasetSpec {
            root: PathBuf::from("unused"),
            source_classes: (0..n_src).map(|i| format!("s{i}")).collect(),
            target_classes: (0..n_tgt).map(|i| format!("t{i}")).collect(),
            image_size: 4,
            training_classes: TrainingClasses::SourceOnly,
            flip: false,
        }
    }

    fn toy(n_src: usize, n_tgt: usize, per: usize) -> Corpus {
        let spec = spec_with(n_src, n_tgt);
        let images = (0..n_src + n_tgt)
            .map(|c| (0..per).map(|i| vec![(c * 10 + i) as f32 / 100.0; 48]).collect())
            .collect();
        Corpus::from_images(spec, images).unwrap()
    }

    #[test]
    fn pixel_roundtrip_within_one_level() {
        for p in 0..=255u8 {
            assert_eq!(denormalize_pixel(normalize_pixel(p)), p);
            let v = normalize_pixel(p);
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let mut s = spec_with(2, 1);
        s.target_classes = vec!["s0".into()];
        assert!(s.validate().is_err());
    }

    #[test]
    fn two_classes_always_swap() {
        let c = toy(2, 0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let t = c.sample_training_tuple(&[0, 1], 1, &mut rng).unwrap();
            assert_ne!(t.c_x, t.c_y);
            assert_eq!(t.content.label, t.c_x);
        }
    }

    #[test]
    fn fewer_than_two_classes_is_config_error() {
        let c = toy(2, 0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(c.sample_training_tuple(&[0], 1, &mut rng).unwrap_err().is_usage());
    }

    #[test]
    fn class_set_draws_with_replacement() {
        let c = toy(2, 0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = c.sample_training_tuple(&[0, 1], 5, &mut rng).unwrap();
        assert_eq!(t.class_set.len(), 5);
        assert!(t.class_set.iter().all(|r| r.label == t.c_y && r.index < 2));
    }

    #[test]
    fn content_class_frequency_is_uniform() {
        let c = toy(5, 0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[c.sample_training_tuple(&[0, 1, 2, 3, 4], 1, &mut rng).unwrap().c_x] += 1;
        }
        for n in counts {
            let f = n as f64 / 10_000.0;
            assert!((f - 0.2).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn source_only_never_returns_targets() {
        let c = toy(3, 2, 2);
        let classes = c.spec.training_labels();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100_000 {
            let t = c.sample_training_tuple(&classes, 1, &mut rng).unwrap();
            assert!(t.c_x < 3 && t.c_y < 3);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let c = toy(4, 0, 5);
        let a: TrainBatch<f32> = c.sample_batch(&[0, 1, 2, 3], 6, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b: TrainBatch<f32> = c.sample_batch(&[0, 1, 2, 3], 6, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(a.content.bits_eq(&b.content) && a.class_images.bits_eq(&b.class_images));
        assert_eq!((a.c_x, a.c_y), (b.c_x, b.c_y));
        assert_eq!(a.class_images.shape(), &[12, 3, 4, 4]);
    }

    #[test]
    fn flip_mirrors_rows() {
        let spec = spec_with(1, 0);
        let img: Vec<f32> = (0..48).map(|i| i as f32).collect();
        let c = Corpus::from_images(spec, vec![vec![img]]).unwrap();
        let r = ImageRef { label: 0, index: 0 };
        let t: Tensor<f32> = c.stack(&[r], Some(&[true]));
        assert_eq!(&t.data()[..4], &[3.0, 2.0, 1.0, 0.0]);
    }
}
