//! Experiment configuration: a TOML file with `[data]` and `[train]`
//! sections, patched by dotted `key=value` overrides.

use std::fs;
use std::path::Path;

use cyclereg::synth::SynthConfig;
use cyclereg::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

/// Name of the resolved-config snapshot written beside every output.
pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub train: TrainConfig,
}

/// Parses an override value as a TOML literal, falling back to a bare string
/// so that `train.out_dir=runs/a` needs no quoting.
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (or starts empty), applies `overrides` in order and checks
/// the result against the known keys.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

pub fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(SNAPSHOT_FILE);
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cyclereg::synth::GridSize;
    use cyclereg::training::Regime;

    #[test]
    fn overrides_are_typed() {
        let cfg = resolve(
            None,
            &[
                "data.shape=16".into(),
                "train.lr=0.001".into(),
                "train.regime=m2m_semi".into(),
                "train.out_dir=runs/x".into(),
                "train.model.channels=[4, 8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.data.shape, GridSize::Cube(16));
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.regime, Regime::M2mSemi);
        assert_eq!(cfg.train.out_dir, Path::new("runs/x"));
        assert_eq!(cfg.train.model.channels, vec![4, 8]);
    }

    #[test]
    fn shipped_default_config_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        assert_eq!(resolve(Some(&path), &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["train.learning_rate=1", "extra.x=1", "data=3"] {
            assert!(
                matches!(resolve(None, &[bad.into()]), Err(CliError::Config(_))),
                "{bad}"
            );
        }
        assert!(resolve(None, &["no_equals_sign".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolve(None, &["data.seed=9".into(), "train.lambda_reg=0.25".into()]).unwrap();
        write_snapshot(&cfg, dir.path()).unwrap();
        let back = resolve(Some(&dir.path().join(SNAPSHOT_FILE)), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
