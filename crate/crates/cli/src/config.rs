//! Flat `key = value` run configuration with `#` comments.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use selene_core::data::parse_fraction;
use selene_core::routing::RoutingConfig;
use selene_core::trainer::TrainConfig;

/// Every key accepted by a config file or by `train --set`.
pub const KEYS: &[&str] = &[
    "data",
    "val",
    "split",
    "fraction",
    "split_seed",
    "method",
    "strategy",
    "lambda0",
    "lambda1",
    "lambda2",
    "alpha",
    "lr0",
    "momentum",
    "poly_power",
    "epochs",
    "batch_labeled",
    "batch_unlabeled",
    "seed",
    "augment",
    "crop",
    "sup_loss",
    "consistency",
    "jigsaw_seed",
    "jigsaw_labels",
    "view_noise",
    "log_every",
    "num_layers",
    "base_channels",
    "num_classes",
    "num_permutations",
    "gate_threshold",
];

/// Everything `train` needs: the two core configurations plus dataset
/// locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub routing: RoutingConfig,
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub fraction: f64,
    /// Seed of the labeled/unlabeled shuffle; defaults to the run seed.
    pub split_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            routing: RoutingConfig::default(),
            data: None,
            val: None,
            split: None,
            fraction: 1.0,
            split_seed: None,
        }
    }
}

/// Parse `key = value` lines. Blank lines and text after `#` are ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got {raw:?}", n + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_pair(s: &str) -> Result<(String, String)> {
    match parse_pairs(s)?.as_slice() {
        [one] => Ok(one.clone()),
        _ => bail!("expected key=value, got {s:?}"),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow::anyhow!("{key} = {v:?}: {e}"))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("{key} = {v:?}: expected true or false"),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let r = &mut self.routing;
        match key {
            "data" => self.data = Some(PathBuf::from(v)),
            "val" => self.val = Some(PathBuf::from(v)),
            "split" => self.split = Some(PathBuf::from(v)),
            "fraction" => self.fraction = parse_fraction(v)?,
            "split_seed" => self.split_seed = Some(num(key, v)?),
            "method" => t.method = v.parse()?,
            "strategy" => t.strategy = v.parse()?,
            "lambda0" => t.lambda0 = num(key, v)?,
            "lambda1" => t.lambda1 = num(key, v)?,
            "lambda2" => t.lambda2 = if v == "default" { None } else { Some(num(key, v)?) },
            "alpha" => t.alpha = num(key, v)?,
            "lr0" => t.lr0 = num(key, v)?,
            "momentum" => t.momentum = num(key, v)?,
            "poly_power" => t.poly_power = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "batch_labeled" => t.batch_labeled = num(key, v)?,
            "batch_unlabeled" => t.batch_unlabeled = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "augment" => t.augment = boolean(key, v)?,
            "crop" => t.crop = num(key, v)?,
            "sup_loss" => t.sup_loss = v.parse()?,
            "consistency" => t.consistency = v.parse()?,
            "jigsaw_seed" => t.jigsaw_seed = num(key, v)?,
            "jigsaw_labels" => t.jigsaw_labels = boolean(key, v)?,
            "view_noise" => t.view_noise = num(key, v)?,
            "log_every" => t.log_every = num(key, v)?,
            "num_layers" => r.num_layers = num(key, v)?,
            "base_channels" => r.base_channels = num(key, v)?,
            "num_classes" => r.num_classes = num(key, v)?,
            "num_permutations" => r.num_permutations = num(key, v)?,
            "gate_threshold" => r.gate_threshold = num(key, v)?,
            _ => bail!("unknown config key {key:?}; known keys: {}", KEYS.join(", ")),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_pairs(&text).with_context(|| format!("in {}", path.display()))?)?;
        Ok(cfg)
    }

    /// Checks the core configurations and that every referenced path exists.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.routing.validate()?;
        let Some(data) = &self.data else {
            bail!("no dataset given; set data = <dir>");
        };
        for p in [Some(data), self.val.as_ref(), self.split.as_ref()].into_iter().flatten() {
            if !p.exists() {
                bail!("{} does not exist", p.display());
            }
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            bail!("fraction {} outside (0, 1]", self.fraction);
        }
        Ok(())
    }

    /// The resolved configuration in the same format it is read from.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let r = &self.routing;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines: Vec<(&str, Option<String>)> = vec![
            ("data", path(&self.data)),
            ("val", path(&self.val)),
            ("split", path(&self.split)),
            ("fraction", Some(self.fraction.to_string())),
            ("split_seed", self.split_seed.map(|s| s.to_string())),
        ];
        lines.extend([
            ("method", Some(t.method.to_string())),
            ("strategy", Some(t.strategy.to_string())),
            ("lambda0", Some(t.lambda0.to_string())),
            ("lambda1", Some(t.lambda1.to_string())),
            ("lambda2", Some(t.lambda2().to_string())),
            ("alpha", Some(t.alpha.to_string())),
            ("lr0", Some(t.lr0.to_string())),
            ("momentum", Some(t.momentum.to_string())),
            ("poly_power", Some(t.poly_power.to_string())),
            ("epochs", Some(t.epochs.to_string())),
            ("batch_labeled", Some(t.batch_labeled.to_string())),
            ("batch_unlabeled", Some(t.batch_unlabeled.to_string())),
            ("seed", Some(t.seed.to_string())),
            ("augment", Some(t.augment.to_string())),
            ("crop", Some(t.crop.to_string())),
            ("sup_loss", Some(t.sup_loss.to_string())),
            ("consistency", Some(t.consistency.to_string())),
            ("jigsaw_seed", Some(t.jigsaw_seed.to_string())),
            ("jigsaw_labels", Some(t.jigsaw_labels.to_string())),
            ("view_noise", Some(t.view_noise.to_string())),
            ("log_every", Some(t.log_every.to_string())),
            ("num_layers", Some(r.num_layers.to_string())),
            ("base_channels", Some(r.base_channels.to_string())),
            ("num_classes", Some(r.num_classes.to_string())),
            ("num_permutations", Some(r.num_permutations.to_string())),
            ("gate_threshold", Some(r.gate_threshold.to_string())),
        ]);
        lines
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| format!("{k} = {v}\n")))
            .collect()
    }
}
