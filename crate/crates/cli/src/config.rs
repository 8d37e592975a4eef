//! Run configuration: one TOML document, validated before any compute.

use std::path::{Path, PathBuf};

use al4dvar::{GradientCheckOptions, ScalingOptions, TwinExperimentSpec, WorkersPolicy};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSection {
    pub k_list: Vec<usize>,
    /// `equal-to-k`, `fixed` (one worker) or `fixed:<n>`.
    pub workers_policy: String,
    pub repetitions: usize,
    pub solve_outer_iterations: usize,
}

impl Default for ScalingSection {
    fn default() -> Self {
        let opts = ScalingOptions::default();
        Self {
            k_list: vec![1, 2, 4],
            workers_policy: "equal-to-k".into(),
            repetitions: opts.repetitions,
            solve_outer_iterations: opts.solve_outer_iterations,
        }
    }
}

impl ScalingSection {
    pub fn policy(&self) -> Result<WorkersPolicy> {
        parse_policy(&self.workers_policy)
    }

    pub fn options(&self) -> ScalingOptions {
        ScalingOptions {
            repetitions: self.repetitions,
            solve_outer_iterations: self.solve_outer_iterations,
        }
    }
}

pub fn parse_policy(raw: &str) -> Result<WorkersPolicy> {
    let bad = || {
        CliError::Config(format!(
            "workers policy must be equal-to-k, fixed or fixed:<n>, got {raw:?}"
        ))
    };
    match raw {
        "equal-to-k" | "equal_to_k" => Ok(WorkersPolicy::EqualToK),
        "fixed" => Ok(WorkersPolicy::Fixed(1)),
        other => {
            let n: usize = other
                .strip_prefix("fixed:")
                .ok_or_else(bad)?
                .parse()
                .map_err(|_| bad())?;
            if n == 0 {
                return Err(CliError::Config("workers >= 1 violated".into()));
            }
            Ok(WorkersPolicy::Fixed(n))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: TwinExperimentSpec,
    pub workers: usize,
    pub out: PathBuf,
    pub gradient_check: GradientCheckOptions,
    pub scaling: ScalingSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: TwinExperimentSpec::default(),
            workers: 1,
            out: PathBuf::from("results"),
            gradient_check: GradientCheckOptions::default(),
            scaling: ScalingSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        if self.workers < 1 {
            return Err(CliError::Config("workers >= 1 violated".into()));
        }
        if self.scaling.k_list.is_empty() || self.scaling.k_list.contains(&0) {
            return Err(CliError::Config(
                "scaling.k_list entries must be >= 1".into(),
            ));
        }
        if self.scaling.repetitions < 1 {
            return Err(CliError::Config("scaling.repetitions >= 1 violated".into()));
        }
        self.scaling.policy()?;
        let g = &self.gradient_check;
        if g.directions < 1 || !(g.eps > 0.0) || !(g.mu > 0.0) || !(g.tolerance > 0.0) {
            return Err(CliError::Config(
                "gradient_check needs directions >= 1 and eps, mu, tolerance > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Parse a `key.path=value` override; the value is read as a TOML literal and
/// falls back to a bare string.
fn apply_override(doc: &mut toml::Table, raw: &str) -> Result<()> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {raw:?}")))?;
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));

    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), parsed);
    Ok(())
}

fn strip_nulls(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|_, x| !x.is_null());
            map.values_mut().for_each(strip_nulls);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

/// A JSON config is either a bare config document or a `report.json`, whose
/// `config` echo is replayed.
fn json_document(text: &str, path: &Path) -> Result<toml::Table> {
    let bad = |e: String| CliError::Config(format!("{}: {e}", path.display()));
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if value.get("command").is_some() {
        if let Some(cfg) = value.get_mut("config") {
            value = cfg.take();
        }
    }
    strip_nulls(&mut value);
    toml::Table::try_from(value).map_err(|e| bad(e.to_string()))
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            if p.extension().is_some_and(|e| e == "json") {
                json_document(&text, p)?
            } else {
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file() {
        let cfg = load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = load(
            None,
            &[
                "experiment.outer.rho=8".into(),
                "experiment.method=parallel".into(),
                "experiment.observed=[0, 2, 4]".into(),
                "scaling.workers_policy=fixed:2".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.experiment.outer.rho, 8.0);
        assert_eq!(cfg.experiment.method, al4dvar::Method::Parallel);
        assert_eq!(cfg.experiment.observed, Some(vec![0, 2, 4]));
        assert_eq!(cfg.scaling.policy().unwrap(), WorkersPolicy::Fixed(2));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(load(None, &["experiment.outer.rhoo=2".into()]).is_err());
        assert!(load(None, &["nonsense=1".into()]).is_err());
        assert!(load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn validation_names_the_invariant() {
        let cfg = load(None, &["experiment.outer.rho=0.5".into()]).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("rho > 1"), "{msg}");
    }

    #[test]
    fn policies() {
        assert_eq!(parse_policy("equal-to-k").unwrap(), WorkersPolicy::EqualToK);
        assert_eq!(parse_policy("fixed").unwrap(), WorkersPolicy::Fixed(1));
        assert_eq!(parse_policy("fixed:3").unwrap(), WorkersPolicy::Fixed(3));
        assert!(parse_policy("fixed:0").is_err());
        assert!(parse_policy("sometimes").is_err());
    }

    #[test]
    fn json_config_and_report_echo() {
        let cfg = load(None, &["experiment.method=hybrid".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bare = dir.path().join("cfg.json");
        std::fs::write(&bare, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(load(Some(&bare), &[]).unwrap(), cfg);
        let report = dir.path().join("report.json");
        let doc = serde_json::json!({ "command": "run", "rmse_analysis": 0.1, "config": cfg });
        std::fs::write(&report, doc.to_string()).unwrap();
        assert_eq!(load(Some(&report), &[]).unwrap(), cfg);
    }

    #[test]
    fn linear_model_from_toml() {
        let text = r#"
            [experiment.model]
            kind = "linear"
            matrix = [[-0.1, 1.0], [-1.0, -0.1]]
        "#;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        let cfg = load(Some(&p), &[]).unwrap();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }
}
