//! Run configuration: one TOML document with a section per module, plus
//! dotted-path overrides (`trainer.toggles.use_gp=false`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::fewshot::FewShotConfig;
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetSpec,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossWeights,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
    pub fewshot: FewShotConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::config(format!("config file {} not found", path.display())),
            _ => Error::file(path, e),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Apply `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Toml(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (path, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{raw}` is not of the form key=value")))?;
            let value = parse_literal(value.trim());
            set_path(&mut root, path.trim(), value)?;
        }
        root.try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("after overrides: {e}")))
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.losses.validate()?;
        self.trainer.validate()?;
        if self.generator.image_size != self.dataset.image_size {
            return Err(Error::config(format!(
                "generator.image_size {} differs from dataset.image_size {}",
                self.generator.image_size, self.dataset.image_size
            )));
        }
        self.discriminator.output_size(self.dataset.image_size)?;
        self.eval.validate()?;
        self.fewshot.validate()?;
        Ok(())
    }
}

fn parse_literal(s: &str) -> toml::Value {
    let doc = format!("v = {s}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(s.to_owned())),
        Err(_) => toml::Value::String(s.to_owned()),
    }
}

fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().ok_or_else(|| Error::config("empty override key"))?;
    let mut table = root;
    for k in parents {
        table = table
            .get_mut(*k)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::config(format!("unknown config section `{k}` in `{path}`")))?;
    }
    match table.get(*last) {
        None => Err(Error::config(format!("unknown config key `{path}`"))),
        Some(old) => {
            // Integers written for float fields stay floats.
            let value = match (old, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            table.insert((*last).to_owned(), value);
            Ok(())
        }
    }
}
