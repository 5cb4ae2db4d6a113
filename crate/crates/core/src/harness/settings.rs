//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Every key must be consumed by some reader, so typos surface as errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

use super::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    entries: BTreeMap<String, (String, usize)>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value, got {raw:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            if entries.insert(k.to_string(), (v.to_string(), line_no)).is_some() {
                return Err(Error::Config(format!("line {line_no}: duplicate key {k}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::fileio::read_text(path)
            .and_then(|t| Self::parse(&t))
            .map_err(|e| e.in_file(path))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {v:?}"))),
        }
    }

    /// Removes `key` as a raw string.
    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    /// Errors if any key was never taken.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::Config(format!("line {line}: unknown key {k}"))),
        }
    }

    /// Overrides fields of `cfg` from the model keys present.
    pub fn apply_model(&mut self, cfg: &mut ModelConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.take(stringify!($f))? {
                    cfg.$f = v;
                }
            )*};
        }
        set!(num_layers, d_model, num_heads, d_ff, vocab_size, max_seq_len, num_classes);
        cfg.validate()
    }

    /// Overrides fields of `cfg` from the training keys present.
    pub fn apply_train(&mut self, cfg: &mut TrainConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.take(stringify!($f))? {
                    cfg.$f = v;
                }
            )*};
        }
        set!(learning_rate, batch_size, epochs, beta1, beta2, epsilon, lora_scale);
        cfg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_applies() {
        let mut s = Settings::parse("# desk model\nnum_layers = 2\nd_model=32 # width\n\nlearning_rate = 0.01\n").unwrap();
        let mut m = ModelConfig::default();
        s.apply_model(&mut m).unwrap();
        assert_eq!((m.num_layers, m.d_model), (2, 32));
        let mut t = TrainConfig::default();
        s.apply_train(&mut t).unwrap();
        assert_eq!(t.learning_rate, 0.01);
        s.finish().unwrap();
    }

    #[test]
    fn reports_line_numbers() {
        let err = Settings::parse("a = 1\nnot an assignment\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let mut s = Settings::parse("epochs = many\n").unwrap();
        assert!(s.apply_train(&mut TrainConfig::default()).unwrap_err().to_string().contains("line 1"));
        let s = Settings::parse("\n\nbogus = 1\n").unwrap();
        assert!(s.finish().unwrap_err().to_string().contains("line 3"));
        assert!(Settings::parse("a=1\na=2").is_err());
    }
}
