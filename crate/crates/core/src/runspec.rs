//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear in
//! any order, each at most once; unknown keys are rejected. Relative
//! `data.corpus_path` values resolve against the config file's directory.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::{AttentionConfig, DEFAULT_ROPE_BASE};
use crate::error::{Error, Result};
use crate::knocking::{KhaConfig, KhaInit, KhaKind, Sites};
use crate::model::{ModelConfig, BYTE_VOCAB};
use crate::tensor::DType;
use crate::trainer::TrainConfig;

/// Every accepted key with its default value.
pub const KEYS: [(&str, &str); 20] = [
    ("model.layers", "2"),
    ("model.d", "128"),
    ("model.n_heads", "8"),
    ("model.kv_groups", "2"),
    ("model.d_k", "16"),
    ("model.d_v", "16"),
    ("model.causal", "true"),
    ("model.qk_rmsnorm", "true"),
    ("model.rope", "true"),
    ("kha.kind", "none"),
    ("kha.sites", "qkv for linear, v otherwise"),
    ("kha.init", "diagonal"),
    ("kha.random_std", "1/sqrt(d_k)"),
    ("train.lr_peak", "0.003"),
    ("train.steps", "2000"),
    ("train.seq_len", "64"),
    ("train.batch_tokens", "256"),
    ("train.seed", "0"),
    ("train.elem_type", "f32"),
    ("data.corpus_path", "data/corpus.txt"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus_path: PathBuf,
}

struct Values {
    map: BTreeMap<String, String>,
}

impl Values {
    fn get<V: FromStr>(&self, key: &str, default: V) -> Result<V>
    where
        V::Err: Display,
    {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e: V::Err| Error::ConfigKey {
                key: key.to_string(),
                msg: format!("cannot parse `{raw}`: {e}"),
            }),
        }
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(raw) => Err(Error::ConfigKey {
                key: key.to_string(),
                msg: format!("expected true or false, got `{raw}`"),
            }),
        }
    }
}

fn key_err(key: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig(msg) => Error::ConfigKey {
            key: key.to_string(),
            msg,
        },
        other => other,
    }
}

impl RunSpec {
    /// Parses config text; `base_dir` anchors a relative corpus path.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(known, _)| *known == k) {
                return Err(Error::ConfigKey {
                    key: k.to_string(),
                    msg: "unknown key".into(),
                });
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::ConfigKey {
                    key: k.to_string(),
                    msg: "given more than once".into(),
                });
            }
        }
        let vals = Values { map };

        let attention = AttentionConfig {
            d: vals.get("model.d", 128)?,
            n_heads: vals.get("model.n_heads", 8)?,
            kv_groups: vals.get("model.kv_groups", 2)?,
            d_k: vals.get("model.d_k", 16)?,
            d_v: vals.get("model.d_v", 16)?,
            causal: vals.flag("model.causal", true)?,
            qk_rmsnorm: vals.flag("model.qk_rmsnorm", true)?,
            rope: vals.flag("model.rope", true)?,
            rope_base: DEFAULT_ROPE_BASE,
        };
        let culprit = if attention.d == 0 {
            "model.d"
        } else if attention.n_heads == 0 {
            "model.n_heads"
        } else if attention.d_k == 0 || (attention.rope && !attention.d_k.is_multiple_of(2)) {
            "model.d_k"
        } else if attention.d_v == 0 {
            "model.d_v"
        } else {
            "model.kv_groups"
        };
        attention.validate().map_err(|e| key_err(culprit, e))?;

        let kind: String = vals.get("kha.kind", "none".to_string())?;
        let kha = if kind == "none" {
            None
        } else {
            let kind: KhaKind = vals.get("kha.kind", KhaKind::Linear)?;
            let default_sites = if kind == KhaKind::Linear {
                Sites::QKV
            } else {
                Sites::V
            };
            let cfg = KhaConfig {
                kind,
                sites: vals.get("kha.sites", default_sites)?,
                init: vals.get("kha.init", KhaInit::Diagonal)?,
                random_std: vals
                    .get::<f64>("kha.random_std", f64::NAN)
                    .map(|s| (!s.is_nan()).then_some(s))?,
            };
            cfg.validate().map_err(|e| key_err("kha.random_std", e))?;
            if cfg.sites.is_empty() {
                return Err(key_err(
                    "kha.sites",
                    Error::InvalidConfig("no sites".into()),
                ));
            }
            Some(cfg)
        };

        let layers = vals.get("model.layers", 2)?;
        if layers == 0 {
            return Err(key_err(
                "model.layers",
                Error::InvalidConfig("must be at least 1".into()),
            ));
        }
        let mut model = ModelConfig::new(layers, attention);
        model.vocab = BYTE_VOCAB;
        model.kha = kha;

        let d = TrainConfig::default();
        let train = TrainConfig {
            lr_peak: vals.get("train.lr_peak", d.lr_peak)?,
            steps: vals.get("train.steps", d.steps)?,
            seq_len: vals.get("train.seq_len", d.seq_len)?,
            batch_tokens: vals.get("train.batch_tokens", d.batch_tokens)?,
            seed: vals.get("train.seed", d.seed)?,
            elem_type: vals.get::<DType>("train.elem_type", d.elem_type)?,
            ..d
        };
        if !(train.lr_peak > 0.0 && train.lr_peak.is_finite()) {
            return Err(key_err(
                "train.lr_peak",
                Error::InvalidConfig("must be positive".into()),
            ));
        }
        if train.seq_len == 0 {
            return Err(key_err(
                "train.seq_len",
                Error::InvalidConfig("must be positive".into()),
            ));
        }
        if train.batch_tokens < train.seq_len {
            return Err(key_err(
                "train.batch_tokens",
                Error::InvalidConfig("must be at least train.seq_len".into()),
            ));
        }

        let corpus: String = vals.get("data.corpus_path", "data/corpus.txt".to_string())?;
        let corpus = PathBuf::from(corpus);
        let corpus_path = if corpus.is_absolute() {
            corpus
        } else {
            base_dir.join(corpus)
        };

        Ok(Self {
            model,
            train,
            corpus_path,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }
}
