//! Run configuration: a TOML file plus `key=value` overrides, validated as a
//! whole before any computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::evaluator::EvalSettings;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// Exported benchmark to load instead of generating one.
    pub data_dir: Option<PathBuf>,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub paths: PathsConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{spec}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key '{key}' is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates the result.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` if given, otherwise starts from defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let d = &self.data;
        let t = &self.train;
        let e = &self.eval;
        for (split, classes) in [
            ("source_train", d.source_train_classes),
            ("target_aux", d.target_aux_classes),
        ] {
            if classes < t.n_way {
                return Err(Error::config(format!(
                    "{split} has {classes} classes; {}-way training episodes are infeasible",
                    t.n_way
                )));
            }
        }
        if t.k_shot + t.m_query > d.source_train_per_class {
            return Err(Error::config(format!(
                "K + M = {} exceeds the {} images per source_train class",
                t.k_shot + t.m_query,
                d.source_train_per_class
            )));
        }
        if t.k_shot > d.target_aux_per_class {
            return Err(Error::config(format!(
                "K = {} exceeds the {} images per target_aux class",
                t.k_shot, d.target_aux_per_class
            )));
        }
        for (split, classes, per_class) in [
            ("target_test", d.target_test_classes, d.target_test_per_class),
            ("source_test", d.source_test_classes, d.source_test_per_class),
        ] {
            if classes < e.n_way || e.k_shot + e.m_query > per_class {
                return Err(Error::config(format!(
                    "{split} ({classes} classes x {per_class} images) cannot host {}-way {}-shot episodes with {} queries",
                    e.n_way, e.k_shot, e.m_query
                )));
            }
        }
        Ok(())
    }

    /// Digest of everything that determines training results.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.data).expect("serializes"));
        h.update(serde_json::to_vec(&self.train).expect("serializes"));
        hex::encode(&h.finalize()[..8])
    }
}
