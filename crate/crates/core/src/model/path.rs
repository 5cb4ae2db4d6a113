use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four adaptable projection kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Query,
    Key,
    Value,
    /// Feed-forward input projection (`d_model -> d_ff`).
    Dense,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [ModuleKind::Query, ModuleKind::Key, ModuleKind::Value, ModuleKind::Dense];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Query => "query",
            ModuleKind::Key => "key",
            ModuleKind::Value => "value",
            ModuleKind::Dense => "dense",
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }

    /// Parses a comma-separated list such as `q,k,v,d` or `query,value`.
    pub fn parse_list(s: &str) -> Result<Vec<ModuleKind>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" | "query" => Ok(ModuleKind::Query),
            "k" | "key" => Ok(ModuleKind::Key),
            "v" | "value" => Ok(ModuleKind::Value),
            "d" | "dense" => Ok(ModuleKind::Dense),
            other => Err(Error::InvalidArgument(format!("unknown module kind {other:?}"))),
        }
    }
}

/// One adaptable weight tensor: a kind at a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModulePath {
    pub kind: ModuleKind,
    pub layer: usize,
}

impl ModulePath {
    pub fn new(kind: ModuleKind, layer: usize) -> Self {
        Self { kind, layer }
    }

    /// Stable integer identity used to key random substreams.
    pub fn stream_key(self) -> u64 {
        ((self.kind.ordinal() as u64) << 32) | self.layer as u64
    }
}

impl fmt::Display for ModulePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer.{}.{}", self.layer, self.kind)
    }
}

impl FromStr for ModulePath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownModule(s.to_string());
        let mut parts = s.split('.');
        if parts.next() != Some("layer") {
            return Err(bad());
        }
        let layer = parts.next().and_then(|l| l.parse().ok()).ok_or_else(bad)?;
        let kind = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self { kind, layer })
    }
}

/// Kind-major (query, key, value, dense), then ascending layer.
pub fn list_modules(num_layers: usize, kinds: &[ModuleKind]) -> Result<Vec<ModulePath>> {
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("list_modules needs at least one kind".into()));
    }
    Ok(ModuleKind::ALL
        .iter()
        .filter(|k| kinds.contains(k))
        .flat_map(|&kind| (0..num_layers).map(move |layer| ModulePath { kind, layer }))
        .collect())
}
