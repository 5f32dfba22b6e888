use std::fmt;

use serde::{Deserialize, Serialize};

use super::PpnError;
use crate::graph::EdgeKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// Node features come from a fixed embedding table.
    Pretrained,
    /// Node features are a trainable per-token table.
    Learned,
}

impl EmbeddingMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrained" => Some(EmbeddingMode::Pretrained),
            "learned" => Some(EmbeddingMode::Learned),
            _ => None,
        }
    }
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingMode::Pretrained => "pretrained",
            EmbeddingMode::Learned => "learned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PpnConfig {
    pub input_dim: usize,
    /// Output width of each message-passing round.
    pub widths: Vec<usize>,
    pub heads: usize,
    pub mlp_hidden: Vec<usize>,
    pub embedding_mode: EmbeddingMode,
    pub concat_final: bool,
    pub edge_kinds: Vec<EdgeKind>,
    pub seed: u64,
}

impl Default for PpnConfig {
    fn default() -> Self {
        Self {
            input_dim: 300,
            widths: vec![256, 512],
            heads: 4,
            mlp_hidden: vec![256, 64],
            embedding_mode: EmbeddingMode::Pretrained,
            concat_final: true,
            edge_kinds: EdgeKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl PpnConfig {
    /// Widths `[base, 2·base, 2·base, ...]` for `rounds` rounds.
    pub fn round_widths(base: usize, rounds: usize) -> Vec<usize> {
        (0..rounds).map(|r| if r == 0 { base } else { 2 * base }).collect()
    }

    pub fn rounds(&self) -> usize {
        self.widths.len()
    }

    /// Width of the final node representation.
    pub fn final_dim(&self) -> usize {
        let last = self.widths.last().copied().unwrap_or(self.input_dim);
        if self.concat_final {
            self.input_dim + last
        } else {
            last
        }
    }

    pub fn validate(&self) -> Result<(), PpnError> {
        let bad = |m: String| Err(PpnError::Config(m));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.widths.is_empty() {
            return bad("at least one round is required".into());
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        if let Some(w) = self.widths.iter().find(|&&w| w == 0 || w % self.heads != 0) {
            return bad(format!("round width {w} is not a positive multiple of {} heads", self.heads));
        }
        if self.mlp_hidden.contains(&0) {
            return bad("mlp hidden widths must be positive".into());
        }
        if !self.edge_kinds.contains(&EdgeKind::Proximity) {
            return bad("proximity edges cannot be disabled".into());
        }
        Ok(())
    }

    /// `key=value` lines, the inverse of [`PpnConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("input_dim".into(), self.input_dim.to_string()),
            ("widths".into(), list(&self.widths)),
            ("heads".into(), self.heads.to_string()),
            ("mlp_hidden".into(), list(&self.mlp_hidden)),
            ("embedding_mode".into(), self.embedding_mode.to_string()),
            ("concat_final".into(), self.concat_final.to_string()),
            (
                "edge_kinds".into(),
                self.edge_kinds.iter().map(|k| k.to_string().to_ascii_lowercase()).collect::<Vec<_>>().join(","),
            ),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, PpnError> {
        let mut cfg = PpnConfig::default();
        for (key, value) in pairs {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PpnError> {
        let err = || PpnError::Config(format!("invalid value `{value}` for `{key}`"));
        let int = |v: &str| v.trim().parse::<usize>().map_err(|_| err());
        let list = |v: &str| -> Result<Vec<usize>, PpnError> {
            if v.trim().is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(int).collect()
        };
        match key {
            "input_dim" => self.input_dim = int(value)?,
            "widths" => self.widths = list(value)?,
            "heads" => self.heads = int(value)?,
            "mlp_hidden" => self.mlp_hidden = list(value)?,
            "embedding_mode" => self.embedding_mode = EmbeddingMode::parse(value.trim()).ok_or_else(err)?,
            "concat_final" => self.concat_final = value.trim().parse().map_err(|_| err())?,
            "edge_kinds" => {
                self.edge_kinds = value.split(',').map(|k| EdgeKind::parse(k).ok_or_else(err)).collect::<Result<_, _>>()?;
                self.edge_kinds.sort();
                self.edge_kinds.dedup();
            }
            "seed" => self.seed = value.trim().parse().map_err(|_| err())?,
            _ => return Err(PpnError::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }
}
