//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use gcmc_core::codec::{ModelConfig, TransformVariant};
use gcmc_core::train::{Distortion, TrainConfig};

use crate::error::{Error, Result};

/// Ordered key/value pairs as read from a file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(format!("line {}: empty key", n + 1));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(format!("line {}: duplicate key {k}", n + 1));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|m| Error::format(path, m))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> std::result::Result<Option<T>, String> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| format!("{key}: cannot parse {v:?}")),
        }
    }
}

pub const MODEL_KEYS: &[&str] = &["n", "m", "kernel", "variant", "inverse_gdn", "context_layers", "gate_width", "context_kernel", "horizontal_residual"];

pub const TRAIN_KEYS: &[&str] = &["lambda", "lr_main", "lr_main_late", "lr_drop_epoch", "lr_context", "batch_size", "crop", "epochs", "max_steps", "seed", "distortion"];

fn variant_name(v: TransformVariant) -> &'static str {
    match v {
        TransformVariant::GdnResidual => "gdn-residual",
        TransformVariant::PlainRelu => "plain-relu",
    }
}

fn distortion_name(d: Distortion) -> &'static str {
    match d {
        Distortion::MsSsim => "ms-ssim",
        Distortion::Mse => "mse",
    }
}

macro_rules! apply {
    ($kv:expr, $($key:literal => $field:expr),* $(,)?) => {
        $(if let Some(v) = $kv.parsed($key)? { $field = v; })*
    };
}

/// Overrides `base` with the model keys present in `kv`.
pub fn model_config(kv: &KeyValues, base: ModelConfig) -> std::result::Result<ModelConfig, String> {
    let mut c = base;
    apply!(kv,
        "n" => c.n,
        "m" => c.m,
        "kernel" => c.kernel,
        "inverse_gdn" => c.inverse_gdn,
        "context_layers" => c.context.layers,
        "gate_width" => c.context.gate_width,
        "context_kernel" => c.context.kernel,
        "horizontal_residual" => c.context.horizontal_residual,
    );
    if let Some(v) = kv.get("variant") {
        c.variant = match v {
            "gdn-residual" => TransformVariant::GdnResidual,
            "plain-relu" => TransformVariant::PlainRelu,
            _ => return Err(format!("variant: expected gdn-residual or plain-relu, got {v:?}")),
        };
    }
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

/// Overrides `base` with the training keys present in `kv`.
pub fn train_config(kv: &KeyValues, base: TrainConfig) -> std::result::Result<TrainConfig, String> {
    let mut c = base;
    apply!(kv,
        "lambda" => c.lambda,
        "lr_main" => c.lr_main,
        "lr_main_late" => c.lr_main_late,
        "lr_drop_epoch" => c.lr_drop_epoch,
        "lr_context" => c.lr_context,
        "batch_size" => c.batch_size,
        "crop" => c.crop,
        "epochs" => c.epochs,
        "max_steps" => c.max_steps,
        "seed" => c.seed,
    );
    if let Some(v) = kv.get("distortion") {
        c.distortion = match v {
            "ms-ssim" => Distortion::MsSsim,
            "mse" => Distortion::Mse,
            _ => return Err(format!("distortion: expected ms-ssim or mse, got {v:?}")),
        };
    }
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

/// Rejects keys that are neither model nor training keys.
pub fn check_keys(kv: &KeyValues, extra: &[&str]) -> std::result::Result<(), String> {
    for k in kv.keys() {
        if !MODEL_KEYS.contains(&k) && !TRAIN_KEYS.contains(&k) && !extra.contains(&k) {
            return Err(format!("unknown key {k:?}"));
        }
    }
    Ok(())
}

pub fn model_pairs(c: &ModelConfig, kv: &mut KeyValues) {
    kv.set("n", c.n);
    kv.set("m", c.m);
    kv.set("kernel", c.kernel);
    kv.set("variant", variant_name(c.variant));
    kv.set("inverse_gdn", c.inverse_gdn);
    kv.set("context_layers", c.context.layers);
    kv.set("gate_width", c.context.gate_width);
    kv.set("context_kernel", c.context.kernel);
    kv.set("horizontal_residual", c.context.horizontal_residual);
}

pub fn train_pairs(c: &TrainConfig, kv: &mut KeyValues) {
    // `{:?}` keeps every bit of an f64 through a text roundtrip.
    kv.set("lambda", format!("{:?}", c.lambda));
    kv.set("lr_main", format!("{:?}", c.lr_main));
    kv.set("lr_main_late", format!("{:?}", c.lr_main_late));
    kv.set("lr_drop_epoch", c.lr_drop_epoch);
    kv.set("lr_context", format!("{:?}", c.lr_context));
    kv.set("batch_size", c.batch_size);
    kv.set("crop", c.crop);
    kv.set("epochs", c.epochs);
    kv.set("max_steps", c.max_steps);
    kv.set("seed", c.seed);
    kv.set("distortion", distortion_name(c.distortion));
}
