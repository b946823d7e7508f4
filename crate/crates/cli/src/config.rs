//! Experiment manifest parsing: a JSON document mirroring the harness
//! `RunConfig`, plus optional `sweep` and `output` blocks, with flat
//! `--set dotted.key=value` overrides applied before deserialization.

use std::path::Path;

use banditlab::{RunConfig, SweepAxis};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("bad override {0:?}: expected KEY=VALUE")]
    BadOverride(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub repeats: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_out_dir")]
    pub dir: String,
    #[serde(default)]
    pub emit_svg: bool,
}

fn default_out_dir() -> String {
    "out".into()
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: default_out_dir(), emit_svg: false }
    }
}

#[derive(Debug, Clone)]
pub struct CliConfig {
    pub run: RunConfig,
    pub sweep: Option<SweepBlock>,
    pub output: OutputBlock,
}

/// Parse `KEY=VALUE` pairs; values parse as JSON when possible and fall back
/// to plain strings.
fn parse_override(raw: &str) -> Result<(Vec<String>, serde_json::Value), ConfigError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(raw.to_string()))?;
    if key.is_empty() {
        return Err(ConfigError::BadOverride(raw.to_string()));
    }
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    let json = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    Ok((path, json))
}

fn set_path(root: &mut serde_json::Value, path: &[String], value: serde_json::Value) {
    let mut node = root;
    for key in &path[..path.len() - 1] {
        if !node.is_object() {
            *node = serde_json::Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .expect("coerced to object above")
            .entry(key.clone())
            .or_insert(serde_json::Value::Null);
    }
    if !node.is_object() {
        *node = serde_json::Value::Object(Default::default());
    }
    node.as_object_mut()
        .expect("coerced to object above")
        .insert(path.last().expect("non-empty path").clone(), value);
}

/// Load, override, and validate an experiment manifest.
pub fn load_config(
    path: &Path,
    overrides: &[String],
    out_dir: Option<&str>,
    seed: Option<u64>,
) -> Result<CliConfig, ConfigError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Read { path: display.clone(), source })?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError::Parse { path: display.clone(), message: e.to_string() })?;

    for raw in overrides {
        let (key_path, value) = parse_override(raw)?;
        set_path(&mut doc, &key_path, value);
    }
    if let Some(seed) = seed {
        set_path(&mut doc, &["seed".into()], serde_json::json!(seed));
    }

    let obj = doc.as_object_mut().ok_or_else(|| ConfigError::Parse {
        path: display.clone(),
        message: "top level must be a JSON object".into(),
    })?;
    let sweep_value = obj.remove("sweep");
    let output_value = obj.remove("output");

    let sweep = match sweep_value {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(deserialize_block::<SweepBlock>(&display, "sweep", v)?),
    };
    let mut output = match output_value {
        None | Some(serde_json::Value::Null) => OutputBlock::default(),
        Some(v) => deserialize_block::<OutputBlock>(&display, "output", v)?,
    };
    if let Some(dir) = out_dir {
        output.dir = dir.to_string();
    }

    let run: RunConfig = {
        let de = doc.clone();
        let mut track = serde_path_to_error::Track::new();
        let tracked = serde_path_to_error::Deserializer::new(&de, &mut track);
        RunConfig::deserialize(tracked).map_err(|e| ConfigError::Parse {
            path: display.clone(),
            message: format!("{}: {e}", track.path()),
        })?
    };
    run.validate().map_err(ConfigError::Invalid)?;

    if let Some(block) = &sweep {
        if block.values.is_empty() {
            return Err(ConfigError::Invalid(vec!["sweep.values: must be non-empty".into()]));
        }
        if block.repeats == 0 {
            return Err(ConfigError::Invalid(vec!["sweep.repeats: must be at least 1".into()]));
        }
    }

    Ok(CliConfig { run, sweep, output })
}

fn deserialize_block<T: serde::de::DeserializeOwned>(
    file: &str,
    block: &str,
    value: serde_json::Value,
) -> Result<T, ConfigError> {
    let mut track = serde_path_to_error::Track::new();
    let tracked = serde_path_to_error::Deserializer::new(&value, &mut track);
    T::deserialize(tracked).map_err(|e| ConfigError::Parse {
        path: file.to_string(),
        message: format!("{block}.{}: {e}", track.path()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use banditlab::Algorithm;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    const MINIMAL: &str = r#"{
        "seed": 7, "algorithm": "moful", "k": 3, "d": 2, "horizon": 20,
        "sigma": 1.0, "s_x": 1.5, "s_theta": 2.0
    }"#;

    #[test]
    fn minimal_config_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "c.json", MINIMAL);
        let cfg = load_config(&path, &[], None, None).unwrap();
        assert_eq!(cfg.run.algorithm, Algorithm::Moful);
        assert_eq!(cfg.run.lambda, 1.0);
        assert_eq!(cfg.run.delta, 0.05);
        assert!(cfg.sweep.is_none());
        assert_eq!(cfg.output.dir, "out");
    }

    #[test]
    fn overrides_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "c.json", MINIMAL);
        let cfg = load_config(
            &path,
            &["horizon=50".into(), "algorithm=eps_moful".into(), "l=2".into(),
              "offline_size=40".into()],
            Some("results"),
            Some(99),
        )
        .unwrap();
        assert_eq!(cfg.run.horizon, 50);
        assert_eq!(cfg.run.algorithm, Algorithm::EpsMoful);
        assert_eq!(cfg.run.seed, 99);
        assert_eq!(cfg.output.dir, "results");
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "c.json",
            r#"{"seed": 1, "algorithm": "moful", "k": 3, "d": 2, "horizon": 5,
                "sigma": 1.0, "s_x": 1.0, "s_theta": 1.0, "horizons": 9}"#,
        );
        let err = load_config(&path, &[], None, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("horizons"), "{msg}");
    }

    #[test]
    fn invalid_values_reported_with_field_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "c.json", MINIMAL);
        let err = load_config(&path, &["delta=2.0".into()], None, None).unwrap_err();
        match err {
            ConfigError::Invalid(msgs) => {
                assert!(msgs.iter().any(|m| m.starts_with("delta:")), "{msgs:?}")
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn sweep_block_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "c.json",
            r#"{"seed": 1, "algorithm": "eps_moful_ips", "k": 5, "d": 2, "horizon": 30,
                "n_ua": 0.2, "l": 2, "offline_size": 100,
                "sigma": 1.0, "s_x": 1.5, "s_theta": 2.0,
                "sweep": {"axis": "l", "values": [0, 2, 4], "repeats": 3},
                "output": {"dir": "o", "emit_svg": true}}"#,
        );
        let cfg = load_config(&path, &[], None, None).unwrap();
        let sweep = cfg.sweep.unwrap();
        assert_eq!(sweep.axis, SweepAxis::L);
        assert_eq!(sweep.values, vec![0.0, 2.0, 4.0]);
        assert_eq!(sweep.repeats, 3);
        assert!(cfg.output.emit_svg);
    }

    #[test]
    fn bad_override_shape_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "c.json", MINIMAL);
        assert!(matches!(
            load_config(&path, &["horizon".into()], None, None),
            Err(ConfigError::BadOverride(_))
        ));
    }
}
