//! Experiment configuration as a flat `key = value` document.
//!
//! Keys are dotted paths into [`ExperimentConfig`] (`train.tcn.channels = 16`,
//! `synth.seed = 3`); values are JSON literals, and anything that does not
//! parse as one is taken as a string. Training keys may drop their `train.`
//! prefix (`lambda_cl = 0`). Every key has a default, so an empty document is
//! valid.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use cluda_core::data::SynthConfig;
use cluda_core::experiment::desk_config;
use cluda_core::pipeline::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding `<split>.csv` and `<split>_labels.csv` for the six
    /// splits; unset means the synthetic benchmark is generated in memory.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        ExperimentConfig {
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            train: desk_config(synth.channels, synth.history),
            synth,
        }
    }
}

/// One `key = value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Splits a document into assignments. Blank lines and `#` comments are
/// skipped.
pub fn parse_document(text: &str, source: &str) -> Result<Vec<Assignment>, Vec<String>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_assignment(line, &format!("{source}:{}", i + 1)) {
            Ok(a) => out.push(a),
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

/// Parses `key=value` (also used for `--set`).
pub fn parse_assignment(text: &str, origin: &str) -> Result<Assignment, String> {
    let Some((key, value)) = text.split_once('=') else {
        return Err(format!("{origin}: expected `key = value`, got {text:?}"));
    };
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("{origin}: empty key"));
    }
    Ok(Assignment {
        key: key.to_string(),
        value: value.trim().to_string(),
        origin: origin.to_string(),
    })
}

fn parse_value(text: &str) -> Value {
    if text.is_empty() {
        return Value::Null;
    }
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

fn lookup<'a>(root: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(root, |v, k| v.as_object()?.get(*k))
}

fn lookup_mut<'a>(root: &'a mut Value, path: &[&str]) -> Option<&'a mut Value> {
    path.iter().try_fold(root, |v, k| v.as_object_mut()?.get_mut(*k))
}

/// Full dotted path of `key`, if it names a leaf of the configuration.
fn resolve_key(defaults: &Value, key: &str) -> Option<Vec<String>> {
    let is_leaf = |path: &[&str]| lookup(defaults, path).is_some_and(|v| !v.is_object());
    let path: Vec<&str> = key.split('.').collect();
    if is_leaf(&path) {
        return Some(path.iter().map(|s| s.to_string()).collect());
    }
    let mut prefixed = vec!["train"];
    prefixed.extend(&path);
    is_leaf(&prefixed).then(|| prefixed.iter().map(|s| s.to_string()).collect())
}

impl ExperimentConfig {
    /// Applies `assignments` in order on top of the defaults. Every problem
    /// (unknown key, ill-typed value, failed validation) is collected.
    pub fn resolve(assignments: &[Assignment]) -> Result<Self, Vec<String>> {
        let defaults = serde_json::to_value(ExperimentConfig::default()).expect("serializable");
        let mut value = defaults.clone();
        let mut errors = Vec::new();
        for a in assignments {
            let Some(path) = resolve_key(&defaults, &a.key) else {
                errors.push(format!("{}: unknown key {:?}", a.origin, a.key));
                continue;
            };
            let path: Vec<&str> = path.iter().map(String::as_str).collect();
            let slot = lookup_mut(&mut value, &path).expect("resolved against the same shape");
            let previous = std::mem::replace(slot, parse_value(&a.value));
            if let Err(e) = serde_json::from_value::<ExperimentConfig>(value.clone()) {
                errors.push(format!("{}: {} = {:?}: {e}", a.origin, path.join("."), a.value));
                *lookup_mut(&mut value, &path).expect("still there") = previous;
            }
        }
        let config: ExperimentConfig = match serde_json::from_value(value) {
            Ok(c) => c,
            Err(e) => {
                errors.push(e.to_string());
                return Err(errors);
            }
        };
        errors.extend(config.problems());
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(errors)
        }
    }

    /// Validation failures of the resolved configuration.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.train.validate() {
            out.push(format!("train: {e}"));
        }
        if let Err(e) = self.synth.validate() {
            out.push(format!("synth: {e}"));
        }
        if self.data_dir.is_none() && self.train.tcn.in_channels != self.synth.channels {
            out.push(format!(
                "train.tcn.in_channels = {} but synth.channels = {}",
                self.train.tcn.in_channels, self.synth.channels
            ));
        }
        out
    }

    /// The complete configuration, defaults included, one `key = value` per
    /// line in a stable order. Resolving it reproduces `self` exactly.
    pub fn to_document(&self) -> String {
        let value = serde_json::to_value(self).expect("serializable");
        let mut lines = Vec::new();
        flatten(&value, &mut String::new(), &mut lines);
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn flatten(value: &Value, prefix: &mut String, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => flatten_object(map, prefix, out),
        Value::Null => out.push((prefix.clone(), String::new())),
        other => out.push((prefix.clone(), other.to_string())),
    }
}

fn flatten_object(map: &Map<String, Value>, prefix: &mut String, out: &mut Vec<(String, String)>) {
    for (k, v) in map {
        let len = prefix.len();
        if !prefix.is_empty() {
            prefix.push('.');
        }
        prefix.push_str(k);
        flatten(v, prefix, out);
        prefix.truncate(len);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(items: &[&str]) -> Vec<Assignment> {
        items.iter().map(|s| parse_assignment(s, "--set").unwrap()).collect()
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::resolve(&parse_document("# nothing\n\n", "f").unwrap()).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn dotted_and_short_keys() {
        let c = ExperimentConfig::resolve(&sets(&[
            "lambda_cl=0",
            "train.tcn.channels = 8",
            "synth.class_freqs=[0.1, 0.2]",
            "task = ordinal-10",
            "data_dir = /tmp/x",
        ]))
        .unwrap();
        assert_eq!(c.train.lambda_cl, 0.0);
        assert_eq!(c.train.tcn.channels, 8);
        assert_eq!(c.synth.class_freqs, vec![0.1, 0.2]);
        assert_eq!(c.train.task, cluda_core::metrics::TaskKind::Ordinal10);
        assert_eq!(c.data_dir, Some(PathBuf::from("/tmp/x")));
    }

    #[test]
    fn all_problems_are_reported() {
        let errs = ExperimentConfig::resolve(&sets(&[
            "bogus=1",
            "train.momentum=fast",
            "train.tcn=3",
            "momentum=1.5",
        ]))
        .unwrap_err();
        assert_eq!(errs.len(), 4, "{errs:?}");
        assert!(errs[0].contains("unknown key"));
        assert!(errs[1].contains("train.momentum"));
        assert!(errs[2].contains("unknown key"), "objects are not leaves: {errs:?}");
        assert!(errs[3].contains("momentum"));
    }

    #[test]
    fn document_round_trips() {
        let c = ExperimentConfig::resolve(&sets(&["lambda_nncl=0.05", "synth.seed=9"])).unwrap();
        let doc = c.to_document();
        assert!(doc.contains("train.lambda_nncl = 0.05\n"));
        assert!(doc.contains("data_dir = \n"));
        let back = ExperimentConfig::resolve(&parse_document(&doc, "doc").unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_document("just words\n", "f").is_err());
        assert!(parse_assignment("=3", "x").is_err());
    }
}
