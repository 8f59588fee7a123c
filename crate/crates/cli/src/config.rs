//! Run configuration: a TOML file with `[data] [model] [train] [output]`
//! sections, command-line overrides on top, resolved once before any work.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use modfeat::data::{SplitPlan, SyntheticParams};
use modfeat::objective::{DiagNll, LossWeights};
use modfeat::trainer::{Method, ModelConfig, TrainConfig, TrainOutputs};

pub const SEED_ENV: &str = "MODFEAT_SEED";
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// External `domain_id,class_id,f0,...` file; generated data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    pub num_classes: usize,
    pub num_domains: usize,
    pub signal_dims: usize,
    pub noise_dims: usize,
    pub samples_per_class_per_domain: usize,
    pub class_sep: f64,
    pub domain_shift: f64,
    pub data_seed: u64,
    pub target_domain: usize,
    pub labels_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticParams::default();
        DataSection {
            csv: None,
            num_classes: s.num_classes,
            num_domains: s.num_domains,
            signal_dims: s.signal_dims,
            noise_dims: s.noise_dims,
            samples_per_class_per_domain: s.samples_per_class_per_domain,
            class_sep: s.class_sep,
            domain_shift: s.domain_shift,
            data_seed: s.seed,
            target_domain: 0,
            labels_per_class: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub residual: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            hidden_dims: m.hidden_dims,
            feature_dim: m.feature_dim,
            residual: m.residual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: String,
    pub epochs: usize,
    pub lr: f64,
    pub lr_modulator: f64,
    pub momentum: f64,
    pub tau: f64,
    pub mc_samples: usize,
    pub beta: f64,
    pub gamma: f64,
    pub nll: String,
    pub labeled_per_domain: usize,
    pub unlabeled_per_domain: usize,
    pub dropout: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    /// Falls back to `MODFEAT_SEED`, then to seeds 0..=4.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            mode: t.method.to_string(),
            epochs: t.epochs,
            lr: t.lr_main,
            lr_modulator: t.lr_modulator,
            momentum: t.momentum,
            tau: t.tau,
            mc_samples: t.mc_samples,
            beta: t.weights.beta,
            gamma: t.weights.gamma,
            nll: t.weights.nll.to_string(),
            labeled_per_domain: t.per_domain_labeled,
            unlabeled_per_domain: t.per_domain_unlabeled,
            dropout: t.dropout_p,
            max_grad_norm: t.max_grad_norm,
            seeds: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub dump_sar: bool,
    pub dump_modulator: bool,
    pub pseudo_labels: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/latest"),
            dump_sar: false,
            dump_modulator: false,
            pseudo_labels: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

/// Reads `path` (or starts from defaults), applies `key=value` overrides and
/// checks every value. Seeds are filled in from the environment if needed,
/// so the result is the complete record of what will run.
pub fn resolve(path: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>().with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig = Value::Table(table).try_into().context("invalid config")?;
    if cfg.train.seeds.is_none() {
        cfg.train.seeds = Some(match env_seed {
            Some(s) => vec![s
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?],
            None => DEFAULT_SEEDS.to_vec(),
        });
    }
    cfg.check()?;
    Ok(cfg)
}

/// Keys left out of the serialized defaults because they have no value.
const OPTIONAL_KEYS: [(&str, &str); 3] = [("data", "csv"), ("train", "max_grad_norm"), ("train", "seeds")];

/// Section owning a bare key, looked up in the default layout.
fn section_of(key: &str) -> Result<&'static str> {
    let defaults = Value::try_from(RunConfig::default()).expect("defaults serialize");
    let found: Vec<&'static str> = ["data", "model", "train", "output"]
        .into_iter()
        .filter(|&s| {
            defaults[s].as_table().is_some_and(|t| t.contains_key(key)) || OPTIONAL_KEYS.contains(&(s, key))
        })
        .collect();
    match found.as_slice() {
        [one] => Ok(one),
        [] => bail!("unknown config key {key:?}"),
        _ => bail!("config key {key:?} is ambiguous; use section.{key}"),
    }
}

/// `section.key=value` or `key=value`; the value is read as TOML and taken
/// as a plain string if that fails.
pub fn apply_override(table: &mut Table, text: &str) -> Result<()> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| anyhow!("override {text:?} is not key=value"))?;
    let key = key.trim().replace('-', "_");
    let (section, name) = match key.split_once('.') {
        Some((s, n)) => (s.to_string(), n.to_string()),
        None => (section_of(&key)?.to_string(), key.clone()),
    };
    let value = parse_value(raw.trim());
    let entry = table
        .entry(section.clone())
        .or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(t) = entry else {
        bail!("config entry {section:?} is not a section");
    };
    t.insert(name, value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn seeds(&self) -> &[u64] {
        self.train.seeds.as_deref().unwrap_or(&DEFAULT_SEEDS)
    }

    pub fn method(&self) -> Result<Method> {
        self.train.mode.parse().map_err(|e| anyhow!("train.mode: {e}"))
    }

    fn check(&self) -> Result<()> {
        self.method()?;
        self.train
            .nll
            .parse::<DiagNll>()
            .map_err(|e| anyhow!("train.nll: {e}"))?;
        if self.seeds().is_empty() {
            bail!("train.seeds is empty");
        }
        let mut sorted = self.seeds().to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds().len() {
            bail!("train.seeds has duplicates");
        }
        self.train_config(self.seeds()[0])?.validate()?;
        if self.data.csv.is_none() {
            if self.data.target_domain >= self.data.num_domains {
                bail!(
                    "data.target_domain {} but only {} domains",
                    self.data.target_domain,
                    self.data.num_domains
                );
            }
            if !(self.data.class_sep > 0.0 && self.data.domain_shift > 0.0) {
                bail!("data.class_sep and data.domain_shift must be positive");
            }
        }
        if self.data.labels_per_class == 0 {
            bail!("data.labels_per_class must be at least 1");
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            lr_main: t.lr,
            lr_modulator: t.lr_modulator,
            momentum: t.momentum,
            tau: t.tau,
            mc_samples: t.mc_samples,
            weights: LossWeights {
                beta: t.beta,
                gamma: t.gamma,
                nll: t.nll.parse()?,
            },
            per_domain_labeled: t.labeled_per_domain,
            per_domain_unlabeled: t.unlabeled_per_domain,
            dropout_p: t.dropout,
            max_grad_norm: t.max_grad_norm,
            seed,
            method: self.method()?,
            model: ModelConfig {
                hidden_dims: self.model.hidden_dims.clone(),
                feature_dim: self.model.feature_dim,
                residual: self.model.residual,
            },
        })
    }

    pub fn synthetic(&self) -> SyntheticParams {
        let d = &self.data;
        SyntheticParams {
            num_classes: d.num_classes,
            num_domains: d.num_domains,
            signal_dims: d.signal_dims,
            noise_dims: d.noise_dims,
            samples_per_class_per_domain: d.samples_per_class_per_domain,
            class_sep: d.class_sep,
            domain_shift: d.domain_shift,
            seed: d.data_seed,
        }
    }

    pub fn split_plan(&self, seed: u64) -> SplitPlan {
        SplitPlan {
            target_domain: self.data.target_domain,
            labels_per_class: self.data.labels_per_class,
            seed,
        }
    }

    pub fn outputs(&self, dir: PathBuf) -> TrainOutputs {
        TrainOutputs {
            run_dir: Some(dir),
            dump_sar: self.output.dump_sar,
            dump_modulator: self.output.dump_modulator,
            pseudo_label_log: self.output.pseudo_labels,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
