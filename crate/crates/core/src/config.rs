//! Pipeline configuration: one TOML file shared by every CLI verb, with
//! dotted-key overrides and a content-addressed run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{DatasetSpec, OodKind};
use crate::detector::DetectorConfig;
use crate::error::{config_err, Result};
use crate::evalharness::{AblationMode, Method};
use crate::inversion::InversionConfig;
use crate::smallnet::{ArchConfig, TrainHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { num_classes: 4, image_size: 16, channels: 3, samples_per_class: 2500, train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub block_channels: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = ArchConfig::default();
        Self { block_channels: a.block_channels, bn_momentum: a.bn_momentum, bn_eps: a.bn_eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ood_sets: Vec<String>,
    pub methods: Vec<String>,
    pub ablation_modes: Vec<String>,
    /// ID test images scored per run, spread evenly over classes.
    pub id_samples: usize,
    /// Images per OOD set.
    pub ood_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ood_sets: OodKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
            ablation_modes: AblationMode::ALL.iter().map(|m| m.name().to_string()).collect(),
            id_samples: 500,
            ood_samples: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub arch: ArchSection,
    pub train: TrainHyper,
    pub inversion: InversionConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
}

/// The part of the configuration that determines persisted stage outputs.
#[derive(Serialize)]
struct HashedPart<'a> {
    seed: u64,
    data: &'a DataConfig,
    arch: &'a ArchSection,
    train: &'a TrainHyper,
    inversion: &'a InversionConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config_err(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides; values use TOML syntax,
    /// bare words are taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| config_err(e.to_string()))?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{ov}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: Self = root.try_into().map_err(|e| config_err(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(config_err("data.train_fraction must lie in (0, 1)"));
        }
        self.arch_config().validate()?;
        self.train.validate()?;
        self.inversion.validate()?;
        self.detector.validate()?;
        self.ood_kinds()?;
        self.methods()?;
        self.ablation_modes()?;
        if self.eval.id_samples < self.data.num_classes || self.eval.ood_samples == 0 {
            return Err(config_err("eval sample counts too small"));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_classes: self.data.num_classes,
            image_size: self.data.image_size,
            channels: self.data.channels,
            samples_per_class: self.data.samples_per_class,
            seed: self.seed,
            ood_kind: None,
        }
    }

    pub fn ood_spec(&self, kind: OodKind) -> DatasetSpec {
        DatasetSpec { samples_per_class: self.eval.ood_samples, ood_kind: Some(kind), ..self.dataset_spec() }
    }

    pub fn arch_config(&self) -> ArchConfig {
        ArchConfig {
            block_channels: self.arch.block_channels.clone(),
            num_classes: self.data.num_classes,
            input_channels: self.data.channels,
            input_size: self.data.image_size,
            bn_momentum: self.arch.bn_momentum,
            bn_eps: self.arch.bn_eps,
        }
    }

    /// Inversion settings with the run seed applied.
    pub fn inversion_config(&self) -> InversionConfig {
        InversionConfig { seed: self.seed, ..self.inversion.clone() }
    }

    pub fn ood_kinds(&self) -> Result<Vec<OodKind>> {
        self.eval.ood_sets.iter().map(|s| OodKind::parse(s)).collect()
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.eval.methods.iter().map(|s| Method::parse(s)).collect()
    }

    pub fn ablation_modes(&self) -> Result<Vec<AblationMode>> {
        self.eval.ablation_modes.iter().map(|s| AblationMode::parse(s)).collect()
    }

    /// Hex digest of the settings that affect stage outputs. Detector and
    /// eval selections are excluded so they can vary within one run.
    pub fn hash(&self) -> String {
        let part = HashedPart {
            seed: self.seed,
            data: &self.data,
            arch: &self.arch,
            train: &self.train,
            inversion: &self.inversion,
        };
        let json = serde_json::to_vec(&part).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn run_dir(&self, out: &Path) -> PathBuf {
        out.join(format!("run-{}", &self.hash()[..16]))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for s in sections {
        table = match table.get_mut(*s) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(config_err(format!("unknown config section `{s}` in `{key}`"))),
        };
    }
    match table.get_mut(*last) {
        Some(slot) => {
            *slot = coerce(slot, value);
            Ok(())
        }
        None => Err(config_err(format!("unknown config key `{key}`"))),
    }
}

/// Lets `1` stand in for a float and `a,b` for a string list.
fn coerce(current: &toml::Value, value: toml::Value) -> toml::Value {
    use toml::Value as V;
    match (current, value) {
        (V::Float(_), V::Integer(i)) => V::Float(i as f64),
        (V::Array(_), V::String(s)) => V::Array(s.split(',').map(|p| V::String(p.trim().to_string())).collect()),
        (V::Array(_), v @ V::Integer(_)) => V::Array(vec![v]),
        (_, v) => v,
    }
}
