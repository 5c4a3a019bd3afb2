//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ptcmil::data::{SyntheticClassConfig, SyntheticSurvConfig, TaskKind};
use ptcmil::heads::PoolingMode;
use ptcmil::model::{ModelConfig, Task};
use ptcmil::train::{AdaptationPlan, TrainConfig};

pub const SEED_ENV: &str = "PTCMIL_SEED";

/// Every accepted key with its default; keys without one must be given
/// when a command needs them.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("task", None),
    ("seed", None),
    ("d_in", Some("16")),
    ("dim", Some("64")),
    ("clusters", Some("5")),
    ("heads", Some("8")),
    ("pooling", Some("pro+cls")),
    ("clustering", Some("on")),
    ("merging", Some("on")),
    ("classes", Some("2")),
    ("bins", Some("4")),
    ("alpha", Some("0.1")),
    ("theta", Some("0.9")),
    ("lr", Some("2e-4")),
    ("weight_decay", Some("1e-5")),
    ("epochs", Some("30")),
    ("bags_per_class", Some("175")),
    ("min_instances", Some("30")),
    ("max_instances", Some("80")),
    ("witness_rate", Some("0.05")),
    ("components", Some("3")),
    ("mean_scale", Some("1.0")),
    ("std", Some("1.0")),
    ("separation", Some("3.0")),
    ("patients", Some("300")),
    ("risk_spread", Some("1.0")),
    ("risk_strength", Some("1.5")),
    ("censor_rate", Some("0.3")),
    ("train_bags", Some("auto")),
    ("val_bags", Some("auto")),
    ("test_bags", Some("auto")),
    ("shots", Some("20")),
    ("adapt_epochs", Some("20")),
    ("adapt_lr", Some("1e-2")),
    ("adapt_prompts", Some("off")),
    ("gradcheck_instances", Some("12")),
];

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Syntax { line: usize, text: String },
    Duplicate { key: String, line: usize },
    Unknown(Vec<String>),
    Missing(Vec<String>),
    Invalid { key: String, value: String, reason: String },
    Io(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line, text } => write!(f, "line {line}: expected `key = value`, got {text:?}"),
            ConfigError::Duplicate { key, line } => write!(f, "line {line}: key `{key}` set twice"),
            ConfigError::Unknown(keys) => write!(f, "unknown keys: {}", keys.join(", ")),
            ConfigError::Missing(keys) => write!(f, "missing required keys: {}", keys.join(", ")),
            ConfigError::Invalid { key, value, reason } => write!(f, "invalid value {value:?} for `{key}`: {reason}"),
            ConfigError::Io(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    let mut lines_of: BTreeMap<String, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if lines_of.insert(k.to_string(), i + 1).is_some() {
            return Err(ConfigError::Duplicate {
                key: k.to_string(),
                line: i + 1,
            });
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

/// Resolved settings: file values, then overrides, then defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Layers `overrides` over the file at `path` (if any). The seed falls
    /// back to the environment. Unknown keys and all missing required keys
    /// are reported together.
    pub fn load(
        path: Option<&Path>,
        overrides: &[(String, String)],
        env_seed: Option<String>,
        required: &[&str],
    ) -> Result<Self, ConfigError> {
        let mut values = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Io(format!("cannot read config {}: {e}", p.display())))?;
                parse_text(&text)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            values.insert(k.clone(), v.clone());
        }
        let unknown: Vec<String> = values
            .keys()
            .filter(|k| !KEYS.iter().any(|(n, _)| n == k))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(ConfigError::Unknown(unknown));
        }
        if !values.contains_key("seed") {
            if let Some(s) = env_seed {
                values.insert("seed".into(), s);
            }
        }
        let missing: Vec<String> = required
            .iter()
            .filter(|k| !values.contains_key(**k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(ConfigError::Missing(missing));
        }
        for (k, d) in KEYS {
            if let Some(d) = d {
                values.entry(k.to_string()).or_insert_with(|| d.to_string());
            }
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> Result<&str, ConfigError> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ConfigError::Missing(vec![key.to_string()]))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(key)?;
        v.parse().map_err(|e: T::Err| ConfigError::Invalid {
            key: key.into(),
            value: v.into(),
            reason: e.to_string(),
        })
    }

    pub fn flag(&self, key: &str) -> Result<bool, ConfigError> {
        match self.raw(key)? {
            "on" | "true" | "yes" | "1" => Ok(true),
            "off" | "false" | "no" | "0" => Ok(false),
            v => Err(ConfigError::Invalid {
                key: key.into(),
                value: v.into(),
                reason: "expected on or off".into(),
            }),
        }
    }

    pub fn task(&self) -> Result<TaskKind, ConfigError> {
        self.get("task")
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.get("seed")
    }

    pub fn model(&self) -> Result<ModelConfig, ConfigError> {
        let task = match self.task()? {
            TaskKind::Classification => Task::Classification {
                classes: self.get("classes")?,
            },
            TaskKind::Survival => Task::Survival {
                bins: self.get("bins")?,
            },
        };
        let cfg = ModelConfig {
            d_in: self.get("d_in")?,
            dim: self.get("dim")?,
            clusters: self.get("clusters")?,
            heads: self.get("heads")?,
            pooling: self.get::<PoolingMode>("pooling")?,
            clustering: self.flag("clustering")?,
            merging: self.flag("merging")?,
            task,
            alpha: self.get("alpha")?,
            theta: self.get("theta")?,
        };
        cfg.validate().map_err(|e| self.invalid_from(&e.to_string()))?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        let cfg = TrainConfig {
            epochs: self.get("epochs")?,
            lr: self.get("lr")?,
            weight_decay: self.get("weight_decay")?,
            seed: self.seed()?,
        };
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(self.invalid("lr", "must be non-negative"));
        }
        if !(cfg.weight_decay >= 0.0 && cfg.weight_decay.is_finite()) {
            return Err(self.invalid("weight_decay", "must be non-negative"));
        }
        Ok(cfg)
    }

    pub fn adaptation(&self) -> Result<AdaptationPlan, ConfigError> {
        Ok(AdaptationPlan {
            shots: self.get("shots")?,
            train_prompts: self.flag("adapt_prompts")?,
            classes: None,
            epochs: self.get("adapt_epochs")?,
            lr: self.get("adapt_lr")?,
            seed: self.seed()?,
        })
    }

    pub fn class_data(&self) -> Result<SyntheticClassConfig, ConfigError> {
        let cfg = SyntheticClassConfig {
            bags_per_class: self.get("bags_per_class")?,
            min_instances: self.get("min_instances")?,
            max_instances: self.get("max_instances")?,
            dim: self.get("d_in")?,
            witness_rate: self.get("witness_rate")?,
            components: self.get("components")?,
            mean_scale: self.get("mean_scale")?,
            std: self.get("std")?,
            separation: self.get("separation")?,
            seed: self.seed()?,
        };
        cfg.validate().map_err(|e| self.invalid_from(&e.to_string()))?;
        Ok(cfg)
    }

    pub fn surv_data(&self) -> Result<SyntheticSurvConfig, ConfigError> {
        let cfg = SyntheticSurvConfig {
            patients: self.get("patients")?,
            min_instances: self.get("min_instances")?,
            max_instances: self.get("max_instances")?,
            dim: self.get("d_in")?,
            risk_direction: None,
            risk_spread: self.get("risk_spread")?,
            risk_strength: self.get("risk_strength")?,
            censor_rate: self.get("censor_rate")?,
            bins: self.get("bins")?,
            seed: self.seed()?,
        };
        cfg.validate().map_err(|e| self.invalid_from(&e.to_string()))?;
        Ok(cfg)
    }

    /// Split sizes; `auto` means 200/50/100 bags for classification and
    /// 60/20/20 % of patients for survival.
    pub fn split_sizes(&self, total: usize) -> Result<[usize; 3], ConfigError> {
        let auto = match self.task()? {
            TaskKind::Classification => [200, 50, 100],
            TaskKind::Survival => {
                let val = total / 5;
                [total - 2 * val, val, val]
            }
        };
        let mut out = [0; 3];
        for (i, key) in ["train_bags", "val_bags", "test_bags"].into_iter().enumerate() {
            out[i] = match self.raw(key)? {
                "auto" => auto[i],
                _ => self.get(key)?,
            };
        }
        if out.iter().sum::<usize>() > total {
            return Err(ConfigError::Invalid {
                key: "train_bags".into(),
                value: format!("{out:?}"),
                reason: format!("splits need more than the {total} generated bags"),
            });
        }
        Ok(out)
    }

    fn invalid(&self, key: &str, reason: &str) -> ConfigError {
        ConfigError::Invalid {
            key: key.into(),
            value: self.values.get(key).cloned().unwrap_or_default(),
            reason: reason.into(),
        }
    }

    /// Maps a library validation message of the form
    /// "invalid value for `key`: reason" back to the offending key.
    fn invalid_from(&self, msg: &str) -> ConfigError {
        let key = msg.split('`').nth(1).unwrap_or("config");
        let key = match key {
            "dim" if msg.contains("width") => "d_in",
            k => k,
        };
        ConfigError::Invalid {
            key: key.into(),
            value: self.values.get(key).cloned().unwrap_or_default(),
            reason: msg.split(": ").nth(1).unwrap_or(msg).into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, overrides: &[(&str, &str)], env: Option<&str>) -> Result<RunConfig, ConfigError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, text).unwrap();
        let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        RunConfig::load(Some(&p), &o, env.map(String::from), &["task", "seed"])
    }

    #[test]
    fn overrides_win_and_defaults_fill() {
        let c = load(
            "task = classification\nseed = 3\nepochs = 5 # short\n",
            &[("epochs", "7")],
            None,
        )
        .unwrap();
        assert_eq!(c.get::<usize>("epochs").unwrap(), 7);
        assert_eq!(c.get::<usize>("clusters").unwrap(), 5);
        assert_eq!(c.seed().unwrap(), 3);
    }

    #[test]
    fn missing_keys_are_reported_together() {
        assert_eq!(
            load("epochs = 3\n", &[], None).unwrap_err(),
            ConfigError::Missing(vec!["task".into(), "seed".into()])
        );
        assert_eq!(load("task = survival\n", &[], Some("9")).unwrap().seed().unwrap(), 9);
        assert_eq!(
            load("task = survival\nseed = 1\n", &[], Some("9"))
                .unwrap()
                .seed()
                .unwrap(),
            1
        );
    }

    #[test]
    fn unknown_and_malformed_keys() {
        assert_eq!(
            load("task = survival\nseed = 1\nbogus = 2\nalso = 3\n", &[], None).unwrap_err(),
            ConfigError::Unknown(vec!["also".into(), "bogus".into()])
        );
        assert!(matches!(
            load("task survival\n", &[], None),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            load("seed = 1\nseed = 2\n", &[], None),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn validation_names_the_key() {
        let c = load("task = classification\nseed = 1\nwitness_rate = 0\n", &[], None).unwrap();
        match c.class_data() {
            Err(ConfigError::Invalid { key, .. }) => assert_eq!(key, "witness_rate"),
            other => panic!("{other:?}"),
        }
        let c = load("task = classification\nseed = 1\nheads = 5\n", &[], None).unwrap();
        match c.model() {
            Err(ConfigError::Invalid { key, .. }) => assert_eq!(key, "heads"),
            other => panic!("{other:?}"),
        }
    }
}
