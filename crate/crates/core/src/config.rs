//! Run configuration: a JSON object with flat dotted keys, e.g.
//! `{"seed": 3, "edges.runs": 20, "segment.compactness": 0.8}`.
//!
//! Values are layered as defaults, then the config file, then `VCC_SEED`,
//! then explicit `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::concepts::{DiscoveryConfig, PruningConfig};
use crate::error::{Result, VccError};
use crate::graph::BuildConfig;
use crate::itcav::{CavConfig, EdgeConfig, NullProtocol, SignConvention};
use crate::segment::SegmentConfig;
use crate::toylab::{ClassSpec, Color, Shape, TrainRecipe};

pub const SEED_ENV: &str = "VCC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Class names such as `red-circle`.
    pub classes: Vec<String>,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub pool_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            classes: vec!["red-circle".into(), "blue-square".into(), "green-triangle".into()],
            train_per_class: 40,
            eval_per_class: 50,
            pool_size: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildSection {
    pub class: usize,
    /// Target images per graph.
    pub images: usize,
    pub tap_layers: Option<Vec<usize>>,
}

impl Default for BuildSection {
    fn default() -> Self {
        Self {
            class: 0,
            images: 50,
            tap_layers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentSection {
    pub compactness: f32,
    pub max_k: usize,
    pub cells_per_cluster: usize,
    pub min_cells: usize,
    pub min_fraction: f64,
}

impl Default for SegmentSection {
    fn default() -> Self {
        let d = SegmentConfig::default();
        Self {
            compactness: d.compactness,
            max_k: d.max_k,
            cells_per_cluster: d.cells_per_cluster,
            min_cells: d.min_cells,
            min_fraction: d.min_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptSection {
    pub clusters: usize,
    pub pruning: PruningConfig,
}

impl Default for ConceptSection {
    fn default() -> Self {
        let d = DiscoveryConfig::default();
        Self {
            clusters: d.clusters,
            pruning: d.pruning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeSection {
    pub runs: usize,
    pub alpha: f64,
    pub negatives_per_run: usize,
    pub protocol: NullProtocol,
    pub sign: SignConvention,
    pub cav: CavConfig,
}

impl Default for EdgeSection {
    fn default() -> Self {
        let d = EdgeConfig::default();
        Self {
            runs: d.runs,
            alpha: d.alpha,
            negatives_per_run: d.negatives_per_run,
            protocol: d.protocol,
            sign: d.sign,
            cav: d.cav,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuppressSection {
    pub epsilons: Vec<f64>,
    pub seeds: usize,
}

impl Default for SuppressSection {
    fn default() -> Self {
        Self {
            epsilons: default_epsilons(),
            seeds: 5,
        }
    }
}

/// 11 evenly spaced magnitudes on `[0, 4]`.
pub fn default_epsilons() -> Vec<f64> {
    (0..=10).map(|i| 0.4 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    pub data: PathBuf,
    pub model: PathBuf,
    pub out: PathBuf,
}

impl Default for PathSection {
    fn default() -> Self {
        Self {
            data: "data".into(),
            model: "model".into(),
            out: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub train: TrainRecipe,
    pub build: BuildSection,
    pub segment: SegmentSection,
    pub concepts: ConceptSection,
    pub edges: EdgeSection,
    pub suppress: SuppressSection,
    pub paths: PathSection,
}

impl RunConfig {
    /// Defaults, then `file`, then `VCC_SEED`, then `overrides`.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut flat = Map::new();
        if let Some(path) = file {
            let text = fs::read(path).map_err(|e| VccError::Config(format!("cannot read {}: {e}", path.display())))?;
            let v: Value = serde_json::from_slice(&text)
                .map_err(|e| VccError::Config(format!("{} is not JSON: {e}", path.display())))?;
            let Value::Object(map) = v else {
                return Err(VccError::Config("config file must hold a JSON object".into()));
            };
            flat.extend(map);
        }
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| VccError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            flat.insert("seed".into(), seed.into());
        }
        for (k, v) in overrides {
            flat.insert(k.clone(), v.clone());
        }
        Self::from_flat(&flat)
    }

    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default())?;
        for (key, value) in flat {
            set_dotted(&mut tree, key, value.clone())?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| VccError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every leaf under its dotted key, in sorted order.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VccError::Config(m.into()));
        if self.build.images == 0 {
            return bad("build.images must be positive");
        }
        if self.edges.runs < 2 {
            return bad("edges.runs must be at least 2");
        }
        if !(self.edges.alpha > 0.0 && self.edges.alpha < 1.0) {
            return bad("edges.alpha must lie in (0, 1)");
        }
        if self.concepts.clusters == 0 {
            return bad("concepts.clusters must be positive");
        }
        if !(self.segment.compactness >= 0.0) {
            return bad("segment.compactness must be nonnegative");
        }
        let eps = &self.suppress.epsilons;
        if eps.len() < 2 || eps.iter().any(|e| !(*e >= 0.0)) || eps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("suppress.epsilons must be ≥ 2 nonnegative increasing values");
        }
        self.concepts.pruning.validate()?;
        self.classes()?;
        Ok(())
    }

    pub fn classes(&self) -> Result<Vec<ClassSpec>> {
        if self.data.classes.len() < 2 {
            return Err(VccError::Config("data.classes needs at least two classes".into()));
        }
        self.data.classes.iter().map(|n| parse_class(n)).collect()
    }

    pub fn build_config(&self) -> BuildConfig {
        BuildConfig {
            tap_layers: self.build.tap_layers.clone(),
            segment: SegmentConfig {
                compactness: self.segment.compactness,
                max_k: self.segment.max_k,
                cells_per_cluster: self.segment.cells_per_cluster,
                min_cells: self.segment.min_cells,
                min_fraction: self.segment.min_fraction,
                seed: 0,
            },
            discovery: DiscoveryConfig {
                clusters: self.concepts.clusters,
                pruning: self.concepts.pruning,
                seed: 0,
            },
            edges: EdgeConfig {
                runs: self.edges.runs,
                alpha: self.edges.alpha,
                negatives_per_run: self.edges.negatives_per_run,
                protocol: self.edges.protocol,
                sign: self.edges.sign,
                cav: self.edges.cav,
                seed: 0,
            },
            seed: self.seed,
        }
    }
}

/// Parses `color-shape`, e.g. `red-circle`.
pub fn parse_class(name: &str) -> Result<ClassSpec> {
    let (c, s) = name
        .split_once('-')
        .ok_or_else(|| VccError::Config(format!("class {name:?} is not color-shape")))?;
    let color = match c {
        "red" => Color::Red,
        "green" => Color::Green,
        "blue" => Color::Blue,
        _ => return Err(VccError::Config(format!("unknown color {c:?}"))),
    };
    let shape = match s {
        "circle" => Shape::Circle,
        "square" => Shape::Square,
        "triangle" => Shape::Triangle,
        _ => return Err(VccError::Config(format!("unknown shape {s:?}"))),
    };
    Ok(ClassSpec::new(shape, color))
}

/// Parses `key=value`; the value is JSON when it parses as such, else a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| VccError::Config(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| VccError::Config(format!("{key:?}: {:?} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(VccError::Config(format!("unknown config key {key:?}")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| VccError::Config(format!("unknown config key {key:?}")))?;
    }
    Err(VccError::Config("empty config key".into()))
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.build.images, 50);
        assert_eq!(c.edges.runs, 20);
        assert_eq!(c.edges.alpha, 0.05);
        assert_eq!(c.segment.compactness, 0.8);
        assert_eq!(c.concepts.clusters, 25);
        c.validate().unwrap();
    }

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 1, "edges.runs": 7, "segment.compactness": 0.5}"#).unwrap();
        let c = RunConfig::resolve(Some(&path), Some("9"), &[("edges.runs".into(), json!(11))]).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.edges.runs, 11);
        assert_eq!(c.segment.compactness, 0.5);
        let c = RunConfig::resolve(Some(&path), None, &[("seed".into(), json!(4))]).unwrap();
        assert_eq!(c.seed, 4);
    }

    #[test]
    fn flat_round_trip() {
        let mut c = RunConfig::default();
        c.build.tap_layers = Some(vec![4, 7]);
        c.edges.protocol = NullProtocol::RandomCavs;
        let back = RunConfig::from_flat(&c.to_flat()).unwrap();
        assert_eq!(back, c);
        assert!(c.to_flat().contains_key("concepts.pruning.nu"));
    }

    #[test]
    fn rejects_bad_configs() {
        let e = |k: &str, v: Value| RunConfig::resolve(None, None, &[(k.into(), v)]).unwrap_err();
        assert!(matches!(e("edges.rnus", json!(3)), VccError::Config(_)));
        assert!(matches!(e("edges.runs", json!("many")), VccError::Config(_)));
        assert!(matches!(e("edges.alpha", json!(1.5)), VccError::Config(_)));
        assert!(matches!(e("suppress.epsilons", json!([1.0, 0.5])), VccError::Config(_)));
        assert!(matches!(e("data.classes", json!(["red-blob", "blue-square"])), VccError::Config(_)));
        assert!(matches!(RunConfig::resolve(None, Some("x"), &[]), Err(VccError::Config(_))));
        assert_eq!(e("edges.runs", json!(1)).exit_code(), 2);
    }

    #[test]
    fn overrides_parse_json_or_string() {
        assert_eq!(parse_override("edges.runs=5").unwrap(), ("edges.runs".into(), json!(5)));
        assert_eq!(parse_override("paths.out=o/x").unwrap(), ("paths.out".into(), json!("o/x")));
        assert_eq!(
            parse_override("build.tap_layers=[4,7]").unwrap(),
            ("build.tap_layers".into(), json!([4, 7]))
        );
        assert!(parse_override("nokey").is_err());
    }

    #[test]
    fn class_names() {
        assert_eq!(parse_class("green-triangle").unwrap(), ClassSpec::new(Shape::Triangle, Color::Green));
        assert!(parse_class("green").is_err());
    }
}
