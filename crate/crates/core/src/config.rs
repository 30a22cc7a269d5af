//! Pruning hyperparameters, page-count presets and layered resolution
//! (explicit overrides > JSON config file > preset).

use std::path::Path;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::ctp::{CtpParams, Criterion};
use crate::error::{invalid, Result};
use crate::metrics::FlopsModel;

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "TOKPRUNE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub patch_size: usize,
    pub tau_e: f64,
    pub tau_bg: f64,
    /// BTP threshold for retrieval-stage pages.
    pub retrieval_tau_bg: f64,
    pub sigma: f64,
    pub tau_qst: f64,
    pub criterion: Criterion,
    /// May be infinite; serialized as `"inf"` / `"-inf"` in that case.
    #[serde(with = "extended_f64")]
    pub tau_comp: f64,
    pub tau_att: f64,
    /// Block side for mask coarsening; 1 disables it.
    pub block: usize,
    /// Inclusive layer window for the pruning-layer search.
    pub ctp_window: [usize; 2],
    pub pages: usize,
    pub flops: FlopsModel,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self::preset(1).expect("single-page preset")
    }
}

impl PruneConfig {
    /// Page counts with a tuned preset.
    pub const PRESET_PAGES: [usize; 3] = [1, 2, 4];

    pub fn preset(pages: usize) -> Result<Self> {
        let (retrieval_tau_bg, tau_bg, tau_qst, tau_comp, tau_att) = match pages {
            1 => (0.9, 0.9, 0.3, 65.0, 0.5),
            2 => (1.0, 1.0, 0.3, 60.0, 0.25),
            4 => (1.0, 0.8, 0.4, 45.0, 0.075),
            other => return Err(invalid("pages", format!("no preset for {other} pages (have 1, 2, 4)"))),
        };
        Ok(Self {
            patch_size: 28,
            tau_e: 1.0,
            tau_bg,
            retrieval_tau_bg,
            sigma: 1.0,
            tau_qst,
            criterion: Criterion::L2Norm,
            tau_comp,
            tau_att,
            block: 2,
            ctp_window: [15, 27],
            pages,
            flops: FlopsModel::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(name, format!("{v} (must lie in [0, 1])")))
            }
        };
        if self.patch_size == 0 {
            return Err(invalid("patch_size", "must be at least 1"));
        }
        if !(self.tau_e >= 0.0 && self.tau_e.is_finite()) {
            return Err(invalid("tau_e", format!("{} (must be finite and >= 0)", self.tau_e)));
        }
        unit("tau_bg", self.tau_bg)?;
        unit("retrieval_tau_bg", self.retrieval_tau_bg)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid("sigma", format!("{} (must be finite and >= 0)", self.sigma)));
        }
        unit("tau_qst", self.tau_qst)?;
        if self.tau_comp.is_nan() {
            return Err(invalid("tau_comp", "NaN"));
        }
        unit("tau_att", self.tau_att)?;
        if self.block == 0 {
            return Err(invalid("block", "must be at least 1"));
        }
        if self.ctp_window[0] > self.ctp_window[1] {
            return Err(invalid("ctp_window", format!("{:?} is reversed", self.ctp_window)));
        }
        if self.pages == 0 {
            return Err(invalid("pages", "must be at least 1"));
        }
        self.flops.encoder.validate()?;
        self.flops.decoder.validate()
    }

    pub fn ctp_params(&self) -> CtpParams {
        CtpParams {
            criterion: self.criterion,
            tau_comp: self.tau_comp,
            tau_att: self.tau_att,
            window: (self.ctp_window[0], self.ctp_window[1]),
        }
    }

    /// Resolve the effective config. `overrides` and the file contents are
    /// partial JSON objects; nested objects (e.g. `flops`) merge key by key.
    /// The preset is chosen by the `pages` value of the highest layer that
    /// sets one, defaulting to 1; page counts without a preset start from
    /// the single-page values.
    pub fn resolve(file: Option<&Path>, overrides: &Value) -> Result<Self, ConfigError> {
        Self::resolve_for_pages(file, overrides, 1)
    }

    /// [`PruneConfig::resolve`] with `default_pages` used when neither layer
    /// sets `pages`.
    pub fn resolve_for_pages(file: Option<&Path>, overrides: &Value, default_pages: usize) -> Result<Self, ConfigError> {
        let file_value = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                let v: Value = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
                    origin: path.display().to_string(),
                    source,
                })?;
                if !v.is_object() {
                    return Err(ConfigError::NotAnObject(path.display().to_string()));
                }
                v
            }
            None => Value::Object(Default::default()),
        };
        if !overrides.is_object() {
            return Err(ConfigError::NotAnObject("overrides".into()));
        }
        let pages = [overrides, &file_value]
            .iter()
            .find_map(|v| v.get("pages").and_then(Value::as_u64))
            .map_or(default_pages, |p| p as usize);
        let mut base = Self::preset(pages).unwrap_or_default();
        base.pages = pages;

        let mut merged = serde_json::to_value(&base).expect("config serializes");
        merge(&mut merged, &file_value);
        merge(&mut merged, overrides);
        let cfg: Self = serde_json::from_value(merged).map_err(|source| ConfigError::Json {
            origin: "merged config".into(),
            source,
        })?;
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) => *b = t.clone(),
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad config ({origin}): {source}")]
    Json { origin: String, source: serde_json::Error },
    #[error("config {0} is not a JSON object")]
    NotAnObject(String),
    #[error(transparent)]
    Invalid(crate::Error),
}

mod extended_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("expected a number or \"inf\", got {other:?}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_match_table() {
        let one = PruneConfig::default();
        assert_eq!((one.tau_bg, one.tau_e, one.tau_qst, one.tau_comp, one.tau_att), (0.9, 1.0, 0.3, 65.0, 0.5));
        let two = PruneConfig::preset(2).unwrap();
        assert_eq!((two.retrieval_tau_bg, two.tau_bg, two.tau_qst, two.tau_comp, two.tau_att), (1.0, 1.0, 0.3, 60.0, 0.25));
        let four = PruneConfig::preset(4).unwrap();
        assert_eq!((four.retrieval_tau_bg, four.tau_bg, four.tau_qst, four.tau_comp, four.tau_att), (1.0, 0.8, 0.4, 45.0, 0.075));
        assert!(PruneConfig::preset(3).is_err());
        for p in PruneConfig::PRESET_PAGES {
            PruneConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"tau_bg": 0.5, "tau_att": 0.2, "flops": {"text_tokens": 40}}"#).unwrap();

        let cfg = PruneConfig::resolve(Some(&path), &json!({"tau_att": 0.3})).unwrap();
        assert_eq!(cfg.tau_bg, 0.5);
        assert_eq!(cfg.tau_att, 0.3);
        assert_eq!(cfg.flops.text_tokens, 40);
        assert_eq!(cfg.flops.decoder.num_layers, 28);
        assert_eq!(cfg.tau_comp, 65.0);

        // Pages from the file pick the preset; the file still wins over it.
        std::fs::write(&path, r#"{"pages": 4, "tau_qst": 0.1}"#).unwrap();
        let cfg = PruneConfig::resolve(Some(&path), &json!({})).unwrap();
        assert_eq!((cfg.tau_bg, cfg.tau_qst, cfg.tau_comp), (0.8, 0.1, 45.0));
        let cfg = PruneConfig::resolve(Some(&path), &json!({"pages": 2})).unwrap();
        assert_eq!((cfg.tau_bg, cfg.tau_qst, cfg.tau_comp), (1.0, 0.1, 60.0));

        let cfg = PruneConfig::resolve_for_pages(None, &json!({}), 4).unwrap();
        assert_eq!((cfg.pages, cfg.tau_att), (4, 0.075));
        let cfg = PruneConfig::resolve_for_pages(None, &json!({}), 3).unwrap();
        assert_eq!((cfg.pages, cfg.tau_att), (3, 0.5));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PruneConfig::resolve(None, &json!({"tau_bg": 1.5})).is_err());
        assert!(PruneConfig::resolve(None, &json!({"no_such_key": 1})).is_err());
        assert!(PruneConfig::resolve(None, &json!({"ctp_window": [5, 2]})).is_err());
        assert!(PruneConfig::resolve(Some(Path::new("/nonexistent/cfg.json")), &json!({})).is_err());
    }

    #[test]
    fn infinite_tau_comp_roundtrips() {
        let cfg = PruneConfig::resolve(None, &json!({"tau_comp": "inf"})).unwrap();
        assert_eq!(cfg.tau_comp, f64::INFINITY);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains(r#""tau_comp":"inf""#));
        let back: PruneConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
