//! Layered `key = value` settings: built-in defaults, then a config file,
//! then command-line flags.

use std::collections::BTreeMap;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::datagen::{ClassSpec, CorpusConfig, Pattern, Shape};
use crate::model::ModelConfig;
use crate::pipeline::{FinetuneConfig, PretrainConfig};
use crate::weightspace::{hex, IwrConfig};

/// Bad flag, key or value; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn heldout_string(classes: &[ClassSpec]) -> String {
    classes.iter().map(|c| format!("{}:{}", c.shape.word(), c.pattern.word())).collect::<Vec<_>>().join(",")
}

fn parse_heldout(text: &str) -> Result<Vec<ClassSpec>, UsageError> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let bad = || UsageError(format!("corpus.heldout: {p:?} is not shape:pattern"));
            let (s, q) = p.trim().split_once(':').ok_or_else(bad)?;
            Ok(ClassSpec::new(Shape::from_word(s).ok_or_else(bad)?, Pattern::from_word(q).ok_or_else(bad)?))
        })
        .collect()
}

impl Settings {
    pub fn defaults() -> Self {
        let corpus = CorpusConfig::default();
        let model = ModelConfig::default();
        let pre = PretrainConfig::default();
        let fine = FinetuneConfig::default();
        let iwr = IwrConfig::default();
        let mut v = BTreeMap::new();
        let mut put = |k: &str, val: String| {
            v.insert(k.to_string(), val);
        };
        put("seed", "0".into());
        put("corpus.pretrain_per_shape", corpus.pretrain_per_shape.to_string());
        put("corpus.pretrain_test_per_shape", corpus.pretrain_test_per_shape.to_string());
        put("corpus.train_per_class", corpus.train_per_class.to_string());
        put("corpus.test_per_class", corpus.test_per_class.to_string());
        put("corpus.heldout_test_per_class", corpus.heldout_test_per_class.to_string());
        put("corpus.noise", corpus.noise.to_string());
        put("corpus.heldout", heldout_string(&corpus.heldout));
        put("model.dim", model.dim.to_string());
        put("model.heads", model.heads.to_string());
        put("model.layers", model.layers.to_string());
        put("model.mlp_hidden", model.mlp_hidden.to_string());
        put("model.embed_dim", model.embed_dim.to_string());
        for (prefix, t) in [("pretrain", &pre.train), ("finetune", &fine.iwr)] {
            put(&format!("{prefix}.lr"), t.lr.to_string());
            put(&format!("{prefix}.lr_floor"), t.lr_floor.to_string());
            put(&format!("{prefix}.warmup_epochs"), t.warmup_epochs.to_string());
            put(&format!("{prefix}.epochs"), t.epochs.to_string());
            put(&format!("{prefix}.batch_size"), t.batch_size.to_string());
            put(&format!("{prefix}.momentum"), t.momentum.to_string());
            put(&format!("{prefix}.grad_clip"), t.grad_clip.to_string());
        }
        put("finetune.window", fine.window.to_string());
        put("finetune.swa", fine.swa.to_string());
        put("finetune.swa_start", "auto".into());
        put("finetune.swa_cycle", "auto".into());
        put("finetune.train_text", fine.train_text.to_string());
        put("iwr.R", iwr.r.to_string());
        put("iwr.C", iwr.c.to_string());
        put("iwr.gamma", iwr.gamma.to_string());
        put("iwr.l2_anchor", iwr.l2_anchor.to_string());
        put("iwr.caption_at_theta", iwr.caption_at_theta.to_string());
        put("caption.backend", "stub".into());
        put("caption.endpoint", String::new());
        put("caption.model", String::new());
        put("caption.token_env", "VIDCLIP_CAPTION_TOKEN".into());
        put("caption.frames", "0".into());
        put("caption.max_in_flight", "4".into());
        put("caption.attempts", "3".into());
        put("caption.backoff_ms", "1000".into());
        put("eval.split", "zeroshot".into());
        put("eval.protocol", "ep2".into());
        put("eval.repeats", "auto".into());
        put("eval.window", fine.window.to_string());
        put("eval.views", "1".into());
        put("eval.ks", "1".into());
        put("sweep.lambda_grid", "0:1:0.1".into());
        put("interp.lambda", "0.5".into());
        Self { values: v }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<(), UsageError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| UsageError(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !self.values.contains_key(k) {
                return Err(UsageError(format!("line {}: unknown config key `{k}`", n + 1)));
            }
            self.values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(())
    }

    /// Overrides `key` when a value is present.
    pub fn set(&mut self, key: &str, value: Option<String>) {
        debug_assert!(self.values.contains_key(key), "undeclared setting {key}");
        if let Some(v) = value {
            self.values.insert(key.to_string(), v);
        }
    }

    fn raw(&self, key: &str) -> Result<&str, UsageError> {
        self.values.get(key).map(String::as_str).ok_or_else(|| UsageError(format!("unknown config key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, UsageError> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| UsageError(format!("config key `{key}`: cannot parse {raw:?} as {}", std::any::type_name::<T>())))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, UsageError> {
        match self.raw(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(UsageError(format!("config key `{key}`: expected true or false, got {other:?}"))),
        }
    }

    /// `auto` maps to `None`.
    pub fn get_auto<T: FromStr>(&self, key: &str) -> Result<Option<T>, UsageError> {
        if self.raw(key)? == "auto" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    fn selected<'a>(&'a self, prefixes: &'a [&str]) -> impl Iterator<Item = (&'a String, &'a String)> + 'a {
        self.values.iter().filter(move |(k, _)| {
            prefixes.iter().any(|p| if p.ends_with('.') { k.starts_with(p) } else { k.as_str() == *p })
        })
    }

    pub fn subset(&self, prefixes: &[&str]) -> BTreeMap<String, String> {
        self.selected(prefixes).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// The selected keys as a config file.
    pub fn render(&self, prefixes: &[&str]) -> String {
        self.selected(prefixes).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn digest(&self, prefixes: &[&str]) -> String {
        hex(&Sha256::digest(self.render(prefixes).as_bytes()))
    }

    pub fn corpus_config(&self) -> Result<CorpusConfig, UsageError> {
        Ok(CorpusConfig {
            pretrain_per_shape: self.get("corpus.pretrain_per_shape")?,
            pretrain_test_per_shape: self.get("corpus.pretrain_test_per_shape")?,
            train_per_class: self.get("corpus.train_per_class")?,
            test_per_class: self.get("corpus.test_per_class")?,
            heldout_test_per_class: self.get("corpus.heldout_test_per_class")?,
            noise: self.get("corpus.noise")?,
            heldout: parse_heldout(&self.get::<String>("corpus.heldout")?)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults_and_rejects_unknown_keys() {
        let mut s = Settings::defaults();
        s.apply_file("# comment\niwr.R = 0.6\n\nfinetune.swa = true  # trailing\n").unwrap();
        assert_eq!(s.get::<f64>("iwr.R").unwrap(), 0.6);
        assert!(s.get_bool("finetune.swa").unwrap());
        assert!(s.apply_file("iwr.bogus = 1").unwrap_err().0.contains("iwr.bogus"));
        assert!(s.apply_file("no equals sign").is_err());
    }

    #[test]
    fn type_errors_name_the_key() {
        let mut s = Settings::defaults();
        s.set("iwr.C", Some("half".into()));
        assert!(s.get::<f64>("iwr.C").unwrap_err().0.contains("iwr.C"));
        s.set("finetune.swa", Some("yes".into()));
        assert!(s.get_bool("finetune.swa").unwrap_err().0.contains("finetune.swa"));
    }

    #[test]
    fn corpus_defaults_round_trip() {
        assert_eq!(Settings::defaults().corpus_config().unwrap(), CorpusConfig::default());
    }

    #[test]
    fn render_then_apply_is_identity() {
        let mut s = Settings::defaults();
        s.set("seed", Some("9".into()));
        let mut t = Settings::defaults();
        t.apply_file(&s.render(&["seed", "corpus."])).unwrap();
        assert_eq!(s, t);
    }
}
