//! Run configuration and its flat `key = value` text form.
//!
//! Keys are dotted paths into [`RunConfig`]; values are JSON literals, with
//! bare words accepted as strings. A file starts from a named profile
//! (`profile = toy` or `paper`, default `paper`) and overrides keys.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::preprocess::PreprocessConfig;
use crate::synth::SynthConfig;
use crate::train::ScheduleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Cv5,
    Lodo,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub kind: Protocol,
    pub folds: usize,
    pub split_seed: u64,
    /// Validation share of the training pool for `single` runs.
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRunConfig {
    pub count: usize,
    pub dataset: String,
    #[serde(flatten)]
    pub params: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub synth: SynthRunConfig,
    pub protocol: ProtocolConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Published constants at 512x512.
    pub fn paper() -> Self {
        RunConfig {
            profile: "paper".into(),
            seed: 42,
            model: ModelConfig::paper(),
            preprocess: PreprocessConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            augment: AugmentConfig::default(),
            synth: SynthRunConfig {
                count: 68,
                dataset: "synth".into(),
                params: SynthConfig {
                    size: 512,
                    root_width: 8.0,
                    depth: 5,
                    ..SynthConfig::default()
                },
            },
            protocol: ProtocolConfig {
                kind: Protocol::Cv5,
                folds: 5,
                split_seed: 42,
                val_fraction: 0.25,
            },
            paths: PathsConfig {
                manifest: PathBuf::from("data/manifest.tsv"),
                out: PathBuf::from("runs"),
            },
        }
    }

    /// Desk-scale profile: 64x64 input, narrow channels, short schedule.
    pub fn toy() -> Self {
        let paper = Self::paper();
        RunConfig {
            profile: "toy".into(),
            model: ModelConfig::toy(),
            schedule: ScheduleConfig {
                cycle_len: 20.0,
                hem_start: 8,
                patience: 10,
                max_epochs: 40,
                max_steps: 400,
                ..ScheduleConfig::default()
            },
            synth: SynthRunConfig {
                count: 64,
                dataset: "synth".into(),
                params: SynthConfig::default(),
            },
            protocol: ProtocolConfig {
                kind: Protocol::Single,
                ..paper.protocol.clone()
            },
            ..paper
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::config(
                "profile",
                format!("unknown profile `{other}`"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        if self.preprocess.lab_clip <= 0.0 || self.preprocess.green_clip <= 0.0 {
            return Err(Error::config(
                "preprocess.lab_clip",
                "clip limits must be positive",
            ));
        }
        if self.preprocess.tiles.0 == 0 || self.preprocess.tiles.1 == 0 {
            return Err(Error::config(
                "preprocess.tiles",
                "tile grid must be positive",
            ));
        }
        if self.synth.params.size < 32 {
            return Err(Error::config("synth.size", "canvas must be at least 32"));
        }
        if !(self.synth.params.contrast > 0.0 && self.synth.params.contrast <= 1.0) {
            return Err(Error::config("synth.contrast", "must lie in (0, 1]"));
        }
        if self.synth.params.root_width < 1.0 {
            return Err(Error::config("synth.root_width", "must be at least 1"));
        }
        if self.protocol.folds < 2 {
            return Err(Error::config("protocol.folds", "need at least 2 folds"));
        }
        if !(self.protocol.val_fraction > 0.0 && self.protocol.val_fraction < 1.0) {
            return Err(Error::config("protocol.val_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Dotted keys and JSON values, sorted by key.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten(
            "",
            &serde_json::to_value(self).expect("config serialises"),
            &mut out,
        );
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let flat = self.to_flat();
        if let Some(p) = flat.get("profile") {
            s.push_str(&format!("profile = {}\n", render(p)));
        }
        for (k, v) in flat.iter().filter(|(k, _)| k.as_str() != "profile") {
            s.push_str(&format!("{k} = {}\n", render(v)));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", no + 1),
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let profile = pairs
            .iter()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| literal(v))
            .map(|v| v.as_str().map(str::to_string).unwrap_or_default())
            .unwrap_or_else(|| "paper".into());
        let defaults = Self::profile(&profile)?.to_flat();
        let mut flat = defaults.clone();
        for (k, v) in pairs {
            let Some(default) = flat.get(&k) else {
                return Err(Error::config(&k, "unknown key"));
            };
            let value = literal(&v);
            if !same_kind(default, &value) {
                return Err(Error::config(
                    &k,
                    format!("expected {}, got `{v}`", kind_name(default)),
                ));
            }
            flat.insert(k, value);
        }
        let cfg: RunConfig = serde_json::from_value(unflatten(&flat)).map_err(|e| {
            // name the first override that fails on its own
            let field = flat
                .iter()
                .filter(|(k, v)| defaults.get(*k) != Some(*v))
                .find(|(k, v)| {
                    let mut one = defaults.clone();
                    one.insert((*k).clone(), (*v).clone());
                    serde_json::from_value::<RunConfig>(unflatten(&one)).is_err()
                })
                .map(|(k, _)| k.clone())
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// FNV-1a hash of the canonical text form.
    pub fn hash(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(self.to_text().as_bytes());
        h.finish()
    }
}

fn literal(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) if literal(s) == *v && !s.is_empty() && !s.contains('#') => s.clone(),
        other => other.to_string(),
    }
}

fn same_kind(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.is_f64() || !y.is_f64(),
        // lengths are checked on deserialisation, so variable-length lists work
        (Value::Array(x), Value::Array(y)) => match x.first() {
            Some(p) => y.iter().all(|q| same_kind(p, q)),
            None => true,
        },
        _ => std::mem::discriminant(a) == std::mem::discriminant(b),
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Number(n) if n.is_f64() => "a number",
        Value::Number(_) => "an integer",
        Value::Bool(_) => "true or false",
        Value::String(_) => "a word",
        Value::Array(_) => "a list",
        _ => "a value",
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                flatten(&key(k), v, out);
            }
        }
        Value::Array(a) if a.iter().any(Value::is_object) => {
            for (i, v) in a.iter().enumerate() {
                flatten(&key(&i.to_string()), v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn insert_path(node: &mut Map<String, Value>, parts: &[&str], v: Value) {
    match parts {
        [last] => {
            node.insert(last.to_string(), v);
        }
        [head, rest @ ..] => {
            let child = node
                .entry(head.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = child {
                insert_path(m, rest, v);
            }
        }
        [] => {}
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        insert_path(&mut root, &k.split('.').collect::<Vec<_>>(), v.clone());
    }
    arrays_from_indices(Value::Object(root))
}

/// Turns objects keyed `0..n` back into arrays.
fn arrays_from_indices(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let indexed = !m.is_empty() && (0..m.len()).all(|i| m.contains_key(&i.to_string()));
            if indexed {
                let mut m = m;
                Value::Array(
                    (0..m.len())
                        .map(|i| arrays_from_indices(m.remove(&i.to_string()).expect("index")))
                        .collect(),
                )
            } else {
                Value::Object(
                    m.into_iter()
                        .map(|(k, v)| (k, arrays_from_indices(v)))
                        .collect(),
                )
            }
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for cfg in [RunConfig::paper(), RunConfig::toy()] {
            let text = cfg.to_text();
            assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn overrides_and_errors_name_the_key() {
        let cfg = RunConfig::parse("profile = toy\nschedule.lr_max = 0.002 # faster\n").unwrap();
        assert_eq!(cfg.schedule.lr_max, 0.002);
        assert_eq!(cfg.model, ModelConfig::toy());
        let e = RunConfig::parse("schedule.lr_maxx = 1").unwrap_err();
        assert!(e.to_string().contains("schedule.lr_maxx"));
        let e = RunConfig::parse("schedule.batch_size = 1.5").unwrap_err();
        assert!(e.to_string().contains("schedule.batch_size"));
        let e = RunConfig::parse("loss.w_dice = 0.5").unwrap_err();
        assert!(e.to_string().contains("loss.weights"));
    }
}
