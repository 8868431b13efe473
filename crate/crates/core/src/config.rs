//! JSON scenario documents.
//!
//! Every physical quantity carries its unit in the key name. Any object may
//! contain `"include": "other.json"` (or a list of paths); the included
//! objects are merged underneath the local keys, paths resolve relative to
//! the including file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cem::CemConfig;
use crate::cutting::MaterialParams;
use crate::ego::EgoConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::policy::{BaselineConfig, StressConfig};
use crate::tool::ToolGeometry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    pub radius_mm: f64,
    /// Defaults to 2*pi / n_flutes.
    #[serde(default)]
    pub pitch_rad: Option<f64>,
    #[serde(default)]
    pub helix_rad: f64,
    pub n_flutes: usize,
    #[serde(default = "one")]
    pub n_discs: usize,
    /// One value for every element, or n_flutes * n_discs values.
    pub edge_length_mm: EdgeLengths,
    pub spindle_rpm: f64,
    #[serde(default)]
    pub non_uniform_pitch: bool,
    #[serde(default = "one_f")]
    pub disc_stack_sign: f64,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeLengths {
    Uniform(f64),
    PerElement(Vec<f64>),
}

impl Default for ToolConfig {
    /// Slitting saw used throughout the simulated case studies.
    fn default() -> Self {
        Self {
            radius_mm: 25.0,
            pitch_rad: None,
            helix_rad: 0.0,
            n_flutes: 50,
            n_discs: 1,
            edge_length_mm: EdgeLengths::Uniform(0.5),
            spindle_rpm: 1000.0,
            non_uniform_pitch: false,
            disc_stack_sign: 1.0,
        }
    }
}

impl ToolConfig {
    pub fn build(&self) -> Result<ToolGeometry> {
        let n = self.n_flutes * self.n_discs;
        let b = match &self.edge_length_mm {
            EdgeLengths::Uniform(v) => vec![*v; n],
            EdgeLengths::PerElement(v) => v.clone(),
        };
        let pitch = self.pitch_rad.unwrap_or(std::f64::consts::TAU / self.n_flutes.max(1) as f64);
        Ok(ToolGeometry::new(
            self.radius_mm,
            pitch,
            self.helix_rad,
            self.n_flutes,
            self.n_discs,
            b,
            self.spindle_rpm,
            self.non_uniform_pitch,
        )?
        .with_disc_stack_sign(self.disc_stack_sign))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub kc_n_per_mm2: [f64; 3],
    pub ke_n_per_mm: [f64; 3],
    #[serde(default = "yes")]
    pub allow_signed: bool,
}

fn yes() -> bool {
    true
}

impl MaterialConfig {
    pub fn build(&self) -> Result<MaterialParams> {
        MaterialParams::new(self.kc_n_per_mm2, self.ke_n_per_mm, self.allow_signed)
    }
}

impl From<MaterialParams> for MaterialConfig {
    fn from(m: MaterialParams) -> Self {
        Self { kc_n_per_mm2: m.kc.into(), ke_n_per_mm: m.ke.into(), allow_signed: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub n_trials: usize,
    /// Trial seeds are `seed_base + i`.
    pub seed_base: u64,
    /// Extra depth for the policy+doc-offset strategy.
    pub doc_offset_mm: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { n_trials: 20, seed_base: 10_000, doc_offset_mm: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub baseline: BaselineConfig,
    pub stress: StressConfig,
    pub train: CemConfig,
    pub ego: EgoConfig,
    pub compare: CompareConfig,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let value = load_with_includes(path, 0)?;
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        self.ego.validate()?;
        Ok(())
    }
}

const MAX_INCLUDE_DEPTH: usize = 16;

/// Read a JSON file and resolve `include` keys recursively.
pub fn load_with_includes(path: &Path, depth: usize) -> Result<Value> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(Error::InvalidConfig(format!("include nesting too deep at {}", path.display())));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    resolve(value, dir, depth)
}

fn resolve(value: Value, dir: &Path, depth: usize) -> Result<Value> {
    match value {
        Value::Object(mut map) => {
            let includes = match map.remove("include") {
                None => vec![],
                Some(Value::String(s)) => vec![s],
                Some(Value::Array(items)) => items
                    .into_iter()
                    .map(|v| match v {
                        Value::String(s) => Ok(s),
                        other => Err(Error::InvalidConfig(format!("include entries must be paths, got {other}"))),
                    })
                    .collect::<Result<_>>()?,
                Some(other) => return Err(Error::InvalidConfig(format!("include must be a path, got {other}"))),
            };
            let mut merged = Map::new();
            for inc in includes {
                match load_with_includes(&dir.join(&inc), depth + 1)? {
                    Value::Object(m) => merge(&mut merged, m),
                    _ => return Err(Error::InvalidConfig(format!("included file {inc} is not an object"))),
                }
            }
            let mut local = Map::new();
            for (k, v) in map {
                local.insert(k, resolve(v, dir, depth)?);
            }
            merge(&mut merged, local);
            Ok(Value::Object(merged))
        }
        Value::Array(items) => Ok(Value::Array(items.into_iter().map(|v| resolve(v, dir, depth)).collect::<Result<_>>()?)),
        other => Ok(other),
    }
}

fn merge(base: &mut Map<String, Value>, over: Map<String, Value>) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Object(b)), Value::Object(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tool_builds() {
        let t = ToolConfig::default().build().unwrap();
        assert_eq!(t.n_flutes(), 50);
        assert!((t.spindle_speed() - 1000.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ToolConfig>(
            r#"{"radius_mm": 25, "n_flutes": 4, "edge_length_mm": 1, "spindle_rpm": 100, "radius": 3}"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn includes_merge_under_local_keys() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tool.json"), r#"{"radius_mm": 10, "n_flutes": 4, "edge_length_mm": 1, "spindle_rpm": 100}"#)
            .unwrap();
        std::fs::write(dir.path().join("main.json"), r#"{"tool": {"include": "tool.json", "n_flutes": 8}}"#).unwrap();
        let v = load_with_includes(&dir.path().join("main.json"), 0).unwrap();
        let tool: ToolConfig = serde_json::from_value(v["tool"].clone()).unwrap();
        assert_eq!(tool.radius_mm, 10.0);
        assert_eq!(tool.n_flutes, 8);
    }
}
