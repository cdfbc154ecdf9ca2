//! Checkpoint directories: parameter containers for G, D, the averaged G and
//! both optimisers, plus a plain-text manifest. A `latest` file names the
//! most recent step directory.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use kshot_tensor::io::{read_store, write_store};
use kshot_tensor::{ParamStore, RmsProp};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::trainer::{TrainState, Trainer};

pub const FORMAT_VERSION: u32 = 1;
pub const LATEST: &str = "latest";
pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub step: u64,
    pub opt_g_steps: u64,
    pub opt_d_steps: u64,
    /// Number of discriminator decision maps.
    pub disc_classes: usize,
    pub rng_seed: String,
    pub rng_stream: u64,
    /// Word position as a decimal string (128-bit).
    pub rng_word_pos: String,
    pub config: Config,
}

fn write_params(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(f);
    write_store(store, &mut w)?;
    std::io::Write::flush(&mut w).map_err(|e| Error::file(path, e))?;
    Ok(())
}

fn read_params(path: &Path) -> Result<ParamStore<f32>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    Ok(read_store(BufReader::new(f))?)
}

/// Optimiser accumulators as a store named after the parameters.
fn opt_store(names: &[String], opt: &RmsProp<f32>) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    for (n, t) in names.iter().zip(opt.state()) {
        s.add(n.clone(), t.clone());
    }
    s
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::contract(format!("malformed rng seed `{s}` in checkpoint"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

pub fn step_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step-{step:08}"))
}

/// Write the state under `root/step-XXXXXXXX` and point `latest` at it.
pub fn save(root: &Path, trainer: &Trainer, state: &TrainState) -> Result<PathBuf> {
    let dir = step_dir(root, state.step);
    std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    write_params(&dir.join("g.kspt"), &state.g)?;
    write_params(&dir.join("d.kspt"), &state.d)?;
    write_params(&dir.join("g_ema.kspt"), &state.g_ema)?;
    write_params(&dir.join("opt_g.kspt"), &opt_store(state.g.names(), &state.opt_g))?;
    write_params(&dir.join("opt_d.kspt"), &opt_store(state.d.names(), &state.opt_d))?;
    let manifest = CheckpointManifest {
        version: FORMAT_VERSION,
        step: state.step,
        opt_g_steps: state.opt_g.steps(),
        opt_d_steps: state.opt_d.steps(),
        disc_classes: trainer.disc.n_classes,
        rng_seed: hex(&state.rng.get_seed()),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        config: trainer.cfg.clone(),
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Toml(e.to_string()))?;
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, text).map_err(|e| Error::file(&mpath, e))?;
    let latest = root.join(LATEST);
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    std::fs::write(&latest, name).map_err(|e| Error::file(&latest, e))?;
    Ok(dir)
}

/// Resolve a checkpoint path: a step directory, or a root holding `latest`.
pub fn resolve(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST).is_file() {
        return Ok(path.to_path_buf());
    }
    let latest = path.join(LATEST);
    if latest.is_file() {
        let name = std::fs::read_to_string(&latest).map_err(|e| Error::file(&latest, e))?;
        return Ok(path.join(name.trim()));
    }
    let ck = path.join("checkpoints");
    if ck.join(LATEST).is_file() {
        return resolve(&ck);
    }
    Err(Error::config(format!("no checkpoint found at {}", path.display())))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::file(&mpath, e))?;
    let m: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?;
    if m.version != FORMAT_VERSION {
        return Err(Error::contract(format!("unsupported checkpoint version {}", m.version)));
    }
    Ok(m)
}

/// Load a full training state. The trainer must have been built from a
/// config with the same architecture and class set.
pub fn load(path: &Path, trainer: &Trainer) -> Result<TrainState> {
    let dir = resolve(path)?;
    let m = read_manifest(&dir)?;
    if m.disc_classes != trainer.disc.n_classes {
        return Err(Error::config(format!(
            "checkpoint has {} discriminator classes, config has {}",
            m.disc_classes, trainer.disc.n_classes
        )));
    }
    let fresh = trainer.init_state()?;
    let g = read_params(&dir.join("g.kspt"))?;
    let d = read_params(&dir.join("d.kspt"))?;
    let g_ema = read_params(&dir.join("g_ema.kspt"))?;
    for (what, a, b) in [
        ("generator", &g, &fresh.g),
        ("discriminator", &d, &fresh.d),
        ("averaged generator", &g_ema, &fresh.g),
    ] {
        if !a.congruent(b) {
            return Err(Error::config(format!(
                "checkpoint {what} does not match the configured architecture"
            )));
        }
    }
    let mut opt_g = fresh.opt_g.clone();
    opt_g.restore(read_params(&dir.join("opt_g.kspt"))?.tensors().to_vec(), m.opt_g_steps)?;
    let mut opt_d = fresh.opt_d.clone();
    opt_d.restore(read_params(&dir.join("opt_d.kspt"))?.tensors().to_vec(), m.opt_d_steps)?;
    let mut rng: ChaCha8Rng = rand::SeedableRng::from_seed(unhex(&m.rng_seed)?);
    rng.set_stream(m.rng_stream);
    rng.set_word_pos(
        m.rng_word_pos
            .parse::<u128>()
            .map_err(|_| Error::contract("malformed rng word position in checkpoint"))?,
    );
    Ok(TrainState {
        g,
        d,
        g_ema,
        opt_g,
        opt_d,
        step: m.step,
        rng,
    })
}

/// Only the averaged generator and the config, for inference commands.
pub fn load_inference(path: &Path) -> Result<(Config, ParamStore<f32>)> {
    let dir = resolve(path)?;
    let m = read_manifest(&dir)?;
    Ok((m.config, read_params(&dir.join("g_ema.kspt"))?))
}
