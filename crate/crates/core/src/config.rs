//! Run configuration: a JSON file layered over defaults, plus dotted-path
//! `key=value` overrides. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::oracles::Task;
use crate::samplers::SamplerConfig;
use crate::trainer::TrainConfig;

/// Environment variable that overrides every other seed source.
pub const SEED_ENV: &str = "FLOWGUIDE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub task: Task,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            task: Task::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate_for(&self.task)?;
        self.sampler.validate()
    }

    /// Parses `text` over the defaults, applies `overrides` and validates.
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let file: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let mut merged = serde_json::to_value(RunConfig::default())?;
        merge(&mut merged, file, "")?;
        for o in overrides {
            apply_run_override(&mut merged, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file at `path` (or starts from defaults when `None`).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => "{}".to_string(),
        };
        Self::from_json_str(&text, overrides)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hash of the training config and task, the pair that identifies a
    /// trained model. Checkpoints carry the same pair, so artifacts produced
    /// from a checkpoint report the hash of the run that trained it.
    pub fn hash(&self) -> Result<String> {
        run_hash(&self.train, &self.task)
    }
}

pub fn run_hash(train: &TrainConfig, task: &Task) -> Result<String> {
    config_hash(&(train, task))
}

/// First 16 hex digits of the SHA-256 of the JSON encoding.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes))[..16].to_string())
}

/// Deep-merges `src` into `dst`. Objects merge key by key; a key absent from
/// `dst` is an error unless `dst` holds a tagged-enum object, whose variant
/// fields are replaced wholesale.
fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            let tag_changes = s.get("kind").is_some() && s.get("kind") != d.get("kind");
            if tag_changes {
                *d = s;
                return Ok(());
            }
            let tagged = d.contains_key("kind");
            for (k, v) in s {
                let p = join(path, &k);
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None if tagged => {
                        d.insert(k, v);
                    }
                    None => return Err(Error::Config(format!("unknown key {p:?}"))),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

const RUN_KEYS: [&str; 4] = ["train", "sampler", "task", "output_dir"];

/// Applies an override to a run config; keys that do not start with a
/// top-level section are looked up under `train`, so `guidance.w=2` means
/// `train.guidance.w=2`.
pub fn apply_run_override(root: &mut Value, spec: &str) -> Result<()> {
    let first = spec.split(['.', '=']).next().unwrap_or("").trim();
    if RUN_KEYS.contains(&first) || !spec.contains('=') {
        apply_override(root, spec)
    } else {
        apply_override(root, &format!("train.{}", spec.trim_start()))
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        slot = obj.get_mut(*part).expect("checked above");
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
    }
    unreachable!("split yields at least one part")
}

/// Seed precedence: `FLOWGUIDE_SEED` > command-line flag > config file.
pub fn resolve_seed(file_seed: u64, flag: Option<u64>) -> Result<u64> {
    resolve_seed_from(std::env::var(SEED_ENV).ok().as_deref(), file_seed, flag)
}

pub fn resolve_seed_from(env: Option<&str>, file_seed: u64, flag: Option<u64>) -> Result<u64> {
    match env {
        Some(s) if !s.trim().is_empty() => s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        _ => Ok(flag.unwrap_or(file_seed)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::from_json_str("{}", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let again = RunConfig::from_json_str(&c.to_json().unwrap(), &[]).unwrap();
        assert_eq!(again, c);
        assert_eq!(c.hash().unwrap(), again.hash().unwrap());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_json_str(
            r#"{"train": {"batch_size": 16}}"#,
            &["train.guidance.w=2.5".into(), "sampler.kind=euler".into(), "train.align.tap_layer=3".into()],
        )
        .unwrap();
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.guidance.w, 2.5);
        assert_eq!(c.sampler.kind, crate::samplers::SamplerKind::Euler);
        assert_eq!(c.train.align.tap_layer, Some(3));
        let short = RunConfig::from_json_str("{}", &["guidance.w=1.45".into(), "batch_size=16".into()]).unwrap();
        assert_eq!(short.train.guidance.w, 1.45);
        assert_eq!(short.train.batch_size, 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json_str(r#"{"trian": {}}"#, &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json_str(r#"{"train": {"lr2": 1}}"#, &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json_str("{}", &["train.nope=1".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json_str("{}", &["train.guidance.w".into()]), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json_str(r#"{"task": {"kind": "gaussian", "means": [[0, 0], [1, 1]], "sigma": 1, "cond_dim": 8, "extra": 1}}"#, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_errors_are_config_errors() {
        let e = RunConfig::from_json_str("{}", &["train.guidance.w=-1".into()]).unwrap_err();
        assert!(e.is_usage(), "{e}");
    }

    #[test]
    fn task_variants() {
        let c = RunConfig::from_json_str(r#"{"task": {"kind": "checkerboard", "cells": 4, "cond_dim": 8}}"#, &[]).unwrap();
        assert!(matches!(c.task, Task::Checkerboard(_)));
        let c = RunConfig::from_json_str(
            r#"{"task": {"means": [[1, 0], [0, 1]]}}"#,
            &[],
        )
        .unwrap();
        assert_eq!(c.task.k(), 2);
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed_from(Some("9"), 1, Some(5)).unwrap(), 9);
        assert_eq!(resolve_seed_from(None, 1, Some(5)).unwrap(), 5);
        assert_eq!(resolve_seed_from(None, 1, None).unwrap(), 1);
        assert_eq!(resolve_seed_from(Some(""), 1, None).unwrap(), 1);
        assert!(resolve_seed_from(Some("x"), 1, None).is_err());
    }
}
