//! Flat `key = value` run configuration.
//!
//! `#` starts a comment. Every key must be known; a repeated key in one
//! file is rejected. [`RunConfig::to_text`] writes every key in a fixed
//! order and is what checkpoints store, so `parse(to_text(c)) == c`.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::DistanceMode;
use crate::model::{DamMode, ModelConfig};
use crate::ops::TemporalPadding;
use crate::preprocess::NormalizeMode;
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub normalize: NormalizeMode,
    pub distance: DistanceMode,
    /// Dataset root holding `manifest.csv`.
    pub dataset: Option<PathBuf>,
    /// Iteration count of the full-scale schedule this preset mirrors.
    /// Informational only; `iterations` is what runs.
    pub reference_iterations: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::three_block(),
            train: TrainConfig::default(),
            normalize: NormalizeMode::Crop,
            distance: DistanceMode::Concat,
            dataset: None,
            reference_iterations: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "in_channels",
    "channels",
    "pool_after",
    "strips",
    "embed_dim",
    "leaky_slope",
    "height",
    "width",
    "temporal_padding",
    "mode",
    "p",
    "k",
    "clip_len",
    "iterations",
    "optimizer",
    "lr",
    "momentum",
    "beta1",
    "beta2",
    "margin",
    "seed",
    "checkpoint_every",
    "normalize",
    "distance",
    "dataset",
    "reference_iterations",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn choice<T>(key: &str, v: &str, parsed: Option<T>, options: &str) -> Result<T> {
    parsed.ok_or_else(|| Error::Config(format!("{key}: {v:?} is not one of {options}")))
}

impl RunConfig {
    /// Set one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "in_channels" => m.in_channels = num(key, v)?,
            "channels" => m.stage_channels = list(key, v)?,
            "pool_after" => m.pool_after = list(key, v)?,
            "strips" => m.strips = num(key, v)?,
            "embed_dim" => m.embed_dim = num(key, v)?,
            "leaky_slope" => m.leaky_slope = num(key, v)?,
            "height" => m.input_size.0 = num(key, v)?,
            "width" => m.input_size.1 = num(key, v)?,
            "temporal_padding" => {
                m.temporal_padding = choice(
                    key,
                    v,
                    TemporalPadding::parse(v),
                    "zeros, replicate, circular",
                )?
            }
            "mode" => m.mode = choice(key, v, DamMode::parse(v), "both, gfe_only, dfe_only")?,
            "p" => t.p = num(key, v)?,
            "k" => t.k = num(key, v)?,
            "clip_len" => t.clip_len = num(key, v)?,
            "iterations" => t.iterations = num(key, v)?,
            "optimizer" => t.optimizer = choice(key, v, OptimizerKind::parse(v), "sgd, adam")?,
            "lr" => t.lr = num(key, v)?,
            "momentum" => t.momentum = num(key, v)?,
            "beta1" => t.adam_betas.0 = num(key, v)?,
            "beta2" => t.adam_betas.1 = num(key, v)?,
            "margin" => t.margin = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "normalize" => {
                self.normalize = choice(key, v, NormalizeMode::parse(v), "crop, resize")?
            }
            "distance" => {
                self.distance = choice(key, v, DistanceMode::parse(v), "concat, strip_sum")?
            }
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "reference_iterations" => {
                self.reference_iterations = (!v.is_empty()).then(|| num(key, v)).transpose()?
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {k:?}",
                    n + 1
                )));
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        Some(match key {
            "in_channels" => m.in_channels.to_string(),
            "channels" => join(&m.stage_channels),
            "pool_after" => join(&m.pool_after),
            "strips" => m.strips.to_string(),
            "embed_dim" => m.embed_dim.to_string(),
            "leaky_slope" => m.leaky_slope.to_string(),
            "height" => m.input_size.0.to_string(),
            "width" => m.input_size.1.to_string(),
            "temporal_padding" => m.temporal_padding.name().into(),
            "mode" => m.mode.name().into(),
            "p" => t.p.to_string(),
            "k" => t.k.to_string(),
            "clip_len" => t.clip_len.to_string(),
            "iterations" => t.iterations.to_string(),
            "optimizer" => t.optimizer.name().into(),
            "lr" => t.lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "beta1" => t.adam_betas.0.to_string(),
            "beta2" => t.adam_betas.1.to_string(),
            "margin" => t.margin.to_string(),
            "seed" => t.seed.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "normalize" => self.normalize.name().into(),
            "distance" => self.distance.name().into(),
            "dataset" => self
                .dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "reference_iterations" => self
                .reference_iterations
                .map(|i| i.to_string())
                .unwrap_or_default(),
            _ => return None,
        })
    }

    /// Canonical text: every key, schema order, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("schema key")))
            .collect()
    }
}
