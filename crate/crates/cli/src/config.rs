//! Experiment configuration: JSON sections layered over a named preset.

use cswitch::disturbances::{Ar1Params, GarchParams, GbmParams, PriceModel};
use cswitch::duality::{Locate, Subsampling};
use cswitch::model::{EconomicParams, Mode};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const PRESETS: [&str; 5] = ["gbm-bs", "ar1", "wastage", "delivery", "garch"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown preset {0:?} (expected one of {list})", list = PRESETS.join(", "))]
    UnknownPreset(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Price dynamics without the step length, which comes from `economics`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSection {
    Gbm {
        mu: f64,
        sigma2: f64,
    },
    Ar1 {
        mu: f64,
        sigma2: f64,
        phi: f64,
    },
    Garch {
        kappa: f64,
        phi: f64,
        beta1: f64,
        beta2: f64,
        sigma2: f64,
        initial_sigma2: f64,
        initial_y2: f64,
    },
}

impl ModelSection {
    fn default_for(kind: &str) -> Option<Self> {
        let s = 0.08f64.sqrt();
        Some(match kind {
            "gbm" => ModelSection::Gbm { mu: 0.09, sigma2: 0.08 },
            "ar1" => ModelSection::Ar1 { mu: 0.09, sigma2: 0.08, phi: 1.0 },
            "garch" => ModelSection::Garch {
                kappa: 0.05,
                phi: 0.6,
                beta1: 0.8,
                beta2: 0.1,
                sigma2: s,
                initial_sigma2: s,
                initial_y2: 1.0,
            },
            _ => return None,
        })
    }

    pub fn price_model(&self, delta: f64) -> PriceModel {
        match *self {
            ModelSection::Gbm { mu, sigma2 } => PriceModel::Gbm(GbmParams { mu, sigma2, delta }),
            ModelSection::Ar1 { mu, sigma2, phi } => PriceModel::Ar1(Ar1Params { mu, sigma2, delta, phi }),
            ModelSection::Garch { kappa, phi, beta1, beta2, sigma2, initial_sigma2, initial_y2 } => {
                PriceModel::Garch(GarchParams { kappa, phi, beta1, beta2, sigma2, delta, initial_sigma2, initial_y2 })
            }
        }
    }

    /// Mean-reversion factor, where the model has one.
    pub fn phi_mut(&mut self) -> Option<&mut f64> {
        match self {
            ModelSection::Gbm { .. } => None,
            ModelSection::Ar1 { phi, .. } | ModelSection::Garch { phi, .. } => Some(phi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    /// `points` evenly spaced values of the (log) price on `[lo, hi]`.
    Equidistant,
    /// k-means centroids of states pooled from simulated paths.
    Stochastic,
    /// Points read from a grid CSV.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub kind: GridKind,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    /// Paths simulated for the clustering cloud.
    pub cloud_paths: usize,
    /// Spot price the cloud paths start from.
    pub cloud_z0: f64,
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    /// Number of equidistant normal quantiles.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub fast: bool,
    /// Neighbours searched per disturbed grid point in fast mode.
    pub neighbors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub t: usize,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub paths: usize,
    pub subsims: usize,
    /// Initial spot prices.
    pub z0: Vec<f64>,
    pub modes: Vec<Mode>,
    pub locate: Locate,
    pub subsampling: Subsampling,
    pub policy: PolicySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Short identifier used in CSV rows.
    pub name: String,
    pub seed: u64,
    pub model: ModelSection,
    pub economics: EconomicParams,
    pub grid: GridSection,
    pub sampling: SamplingSection,
    pub solver: SolverSection,
    pub diagnostics: DiagnosticsSection,
    pub output: OutputSection,
}

fn gbm_bs() -> Config {
    Config {
        name: "gbm".into(),
        seed: 1,
        model: ModelSection::default_for("gbm").unwrap(),
        economics: EconomicParams::default(),
        grid: GridSection {
            kind: GridKind::Equidistant,
            lo: 0.0,
            hi: 20.0,
            points: 4001,
            cloud_paths: 1000,
            cloud_z0: 1.0,
            file: None,
        },
        sampling: SamplingSection { size: 20_000 },
        solver: SolverSection { fast: true, neighbors: 1 },
        diagnostics: DiagnosticsSection {
            paths: 1000,
            subsims: 1000,
            z0: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            modes: vec![Mode::Opened, Mode::Closed],
            locate: Locate::Local(4),
            subsampling: Subsampling::Stratified,
            policy: PolicySection { t: 0, lo: 0.01, hi: 2.0, points: 2000 },
        },
        output: OutputSection { dir: "out".into() },
    }
}

fn ar1() -> Config {
    let mut c = gbm_bs();
    c.name = "ar1".into();
    c.model = ModelSection::default_for("ar1").unwrap();
    c.grid.lo = -5.0;
    c.grid.hi = 5.0;
    c.grid.points = 2000;
    c.sampling.size = 10_000;
    c.diagnostics.paths = 500;
    c.diagnostics.subsims = 500;
    c.diagnostics.z0 = vec![0.3, 0.4, 0.5];
    c
}

/// Built-in configuration by name.
pub fn preset(name: &str) -> Result<Config, ConfigError> {
    Ok(match name {
        "gbm-bs" => gbm_bs(),
        "ar1" => ar1(),
        "wastage" => {
            let mut c = ar1();
            c.name = "wastage".into();
            c.economics.wastage = 0.5;
            c
        }
        "delivery" => {
            let mut c = ar1();
            c.name = "delivery".into();
            c.economics.penalty = 1.0;
            c
        }
        "garch" => {
            let mut c = ar1();
            c.name = "garch".into();
            c.model = ModelSection::default_for("garch").unwrap();
            c.grid.kind = GridKind::Stochastic;
            c.grid.cloud_z0 = 0.4;
            c.grid.cloud_paths = 1000;
            c
        }
        other => return Err(ConfigError::UnknownPreset(other.to_string())),
    })
}

fn unknown_keys(template: &Value, user: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(t), Value::Object(u)) = (template, user) {
        for (k, v) in u {
            let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match t.get(k) {
                None => out.push(here),
                Some(tv) => unknown_keys(tv, v, &here, out),
            }
        }
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Manifests written by the runner keep the resolved config under this key,
/// so they can be fed back as configs.
pub const MANIFEST_CONFIG_KEY: &str = "resolved_config";

impl Config {
    /// Resolves a user document: optional `"preset"` (default `gbm-bs`),
    /// overridden section by section. Every key must be known.
    pub fn from_value(mut user: Value) -> Result<Config, ConfigError> {
        if let Some(inner) = user.get(MANIFEST_CONFIG_KEY) {
            user = inner.clone();
        }
        let Value::Object(mut doc) = user else {
            return Err(ConfigError::Invalid("top level must be a JSON object".into()));
        };
        let name = match doc.remove("preset") {
            None => "gbm-bs".to_string(),
            Some(Value::String(s)) => s,
            Some(_) => return Err(ConfigError::Invalid("preset must be a string".into())),
        };
        let base = preset(&name)?;
        let mut template = serde_json::to_value(&base)?;
        // Switching the model kind replaces the whole model section.
        if let Some(kind) = doc.get("model").and_then(|m| m.get("kind")) {
            let kind = kind.as_str().ok_or_else(|| ConfigError::Invalid("model.kind must be a string".into()))?;
            let section = ModelSection::default_for(kind)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown model kind {kind:?}")))?;
            template["model"] = serde_json::to_value(section)?;
        }
        let mut bad = Vec::new();
        let doc = Value::Object(std::mem::take(&mut doc));
        unknown_keys(&template, &doc, "", &mut bad);
        if !bad.is_empty() {
            return Err(ConfigError::UnknownKeys(bad));
        }
        // Tagged values are replaced whole, not merged field by field.
        if let Some(locate) = doc.pointer("/diagnostics/locate") {
            template["diagnostics"]["locate"] = locate.clone();
        }
        merge(&mut template, &doc);
        let cfg: Config = serde_json::from_value(template)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Config, ConfigError> {
        Config::from_value(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Config, ConfigError> {
        Config::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn price_model(&self) -> PriceModel {
        self.model.price_model(self.economics.delta)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.price_model().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.economics.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let g = &self.grid;
        match g.kind {
            GridKind::Equidistant => {
                if self.price_model().dim() != 2 {
                    return invalid("equidistant grids need a scalar price state".into());
                }
                if !(g.lo.is_finite() && g.hi.is_finite() && g.lo < g.hi) || g.points < 2 {
                    return invalid(format!("infeasible grid [{}, {}] x {}", g.lo, g.hi, g.points));
                }
            }
            GridKind::Stochastic => {
                if g.points == 0 || g.cloud_paths == 0 || !(g.cloud_z0 > 0.0) {
                    return invalid("stochastic grid needs points, cloud_paths >= 1 and cloud_z0 > 0".into());
                }
            }
            GridKind::File => {
                if g.file.is_none() {
                    return invalid("grid.file is required for file grids".into());
                }
            }
        }
        if self.sampling.size == 0 {
            return invalid("sampling.size must be at least 1".into());
        }
        if self.solver.neighbors == 0 {
            return invalid("solver.neighbors must be at least 1".into());
        }
        let d = &self.diagnostics;
        if d.paths == 0 || d.subsims == 0 {
            return invalid("diagnostics.paths and diagnostics.subsims must be at least 1".into());
        }
        if d.locate == Locate::Local(0) {
            return invalid("diagnostics.locate needs at least one neighbour".into());
        }
        if d.z0.iter().any(|&z| !(z.is_finite() && z > 0.0)) {
            return invalid("diagnostics.z0 prices must be positive".into());
        }
        let p = &d.policy;
        if p.t >= self.economics.horizon_steps() {
            return invalid(format!("policy.t must be below the horizon {}", self.economics.horizon_steps()));
        }
        if !(p.lo.is_finite() && p.hi.is_finite() && p.lo < p.hi) || p.points < 2 {
            return invalid("policy price scan needs lo < hi and at least 2 points".into());
        }
        if self.price_model().log_price() && p.lo <= 0.0 {
            return invalid("policy prices must be positive for log-price models".into());
        }
        if self.name.is_empty() || self.name.contains([',', '\n', '"']) {
            return invalid("name must be non-empty without commas or quotes".into());
        }
        Ok(())
    }

    /// Canonical JSON and its SHA-256.
    pub fn canonical(&self) -> (String, String) {
        let text = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        (text, hash)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Wraps a resolved config with run metadata.
pub fn manifest(cfg: &Config, command: &str, extra: Map<String, Value>) -> Value {
    let (_, hash) = cfg.canonical();
    let mut m = Map::new();
    m.insert("command".into(), Value::from(command));
    m.insert("version".into(), Value::from(env!("CARGO_PKG_VERSION")));
    m.insert("config_hash".into(), Value::from(hash));
    m.insert(MANIFEST_CONFIG_KEY.into(), cfg.to_value());
    m.extend(extra);
    Value::Object(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_validate() {
        for name in PRESETS {
            let c = Config::from_json(&format!(r#"{{"preset": "{name}"}}"#)).unwrap();
            assert_eq!(c, preset(name).unwrap());
        }
        let g = preset("garch").unwrap();
        assert_eq!(g.grid.points, 2000);
        assert_eq!(g.price_model().dim(), 4);
        assert_eq!(preset("gbm-bs").unwrap().grid.points, 4001);
    }

    #[test]
    fn overrides_merge_into_preset() {
        let c = Config::from_json(r#"{"preset":"ar1","model":{"phi":0.6},"economics":{"wastage":0.5},"seed":9}"#).unwrap();
        assert_eq!(c.model, ModelSection::Ar1 { mu: 0.09, sigma2: 0.08, phi: 0.6 });
        assert_eq!(c.economics.wastage, 0.5);
        assert_eq!(c.seed, 9);
        assert_eq!(c.grid.points, 2000);
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = Config::from_json(r#"{"grid":{"pionts":3},"bogus":1,"economics":{"delta":0.25,"x":2}}"#).unwrap_err();
        match err {
            ConfigError::UnknownKeys(keys) => {
                assert_eq!(keys, vec!["bogus".to_string(), "economics.x".into(), "grid.pionts".into()]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn switching_model_kind_replaces_section() {
        let c = Config::from_json(r#"{"model":{"kind":"ar1","phi":0.8}}"#).unwrap();
        assert_eq!(c.model, ModelSection::Ar1 { mu: 0.09, sigma2: 0.08, phi: 0.8 });
        assert!(matches!(
            Config::from_json(r#"{"model":{"kind":"gbm","phi":0.8}}"#),
            Err(ConfigError::UnknownKeys(_))
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            r#"{"grid":{"lo":3,"hi":1}}"#,
            r#"{"model":{"sigma2":-1}}"#,
            r#"{"preset":"nope"}"#,
            r#"{"diagnostics":{"paths":0}}"#,
            r#"[1,2]"#,
            r#"{"economics":{"wastage":2}}"#,
        ] {
            assert!(Config::from_json(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn manifest_round_trips() {
        let c = Config::from_json(r#"{"preset":"delivery","seed":3}"#).unwrap();
        let m = manifest(&c, "solve", Map::new());
        assert_eq!(Config::from_value(m).unwrap(), c);
        assert_eq!(c.canonical(), c.clone().canonical());
    }
}
