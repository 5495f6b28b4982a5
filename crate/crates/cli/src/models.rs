use std::fmt;
use std::str::FromStr;

use gradgate::coupling::{CouplingConfig, CouplingKind};
use gradgate::gating::{G2Config, LayerMode};
use serde::{Deserialize, Serialize};

/// Named model families: a coupling with or without gradient gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelId {
    Gcn,
    Gat,
    Sage,
    G2Gcn,
    G2Gat,
    G2Sage,
}

impl ModelId {
    pub const ALL: [ModelId; 6] =
        [ModelId::Gcn, ModelId::Gat, ModelId::Sage, ModelId::G2Gcn, ModelId::G2Gat, ModelId::G2Sage];

    pub fn kind(self) -> CouplingKind {
        match self {
            ModelId::Gcn | ModelId::G2Gcn => CouplingKind::Gcn,
            ModelId::Gat | ModelId::G2Gat => CouplingKind::Gat,
            ModelId::Sage | ModelId::G2Sage => CouplingKind::Sage,
        }
    }

    pub fn gated(self) -> bool {
        matches!(self, ModelId::G2Gcn | ModelId::G2Gat | ModelId::G2Sage)
    }

    pub fn mode(self) -> LayerMode {
        if self.gated() {
            LayerMode::G2
        } else {
            LayerMode::Plain
        }
    }

    pub fn plain(kind: CouplingKind) -> Self {
        match kind {
            CouplingKind::Gcn => ModelId::Gcn,
            CouplingKind::Gat => ModelId::Gat,
            CouplingKind::Sage => ModelId::Sage,
        }
    }

    pub fn g2(kind: CouplingKind) -> Self {
        match kind {
            CouplingKind::Gcn => ModelId::G2Gcn,
            CouplingKind::Gat => ModelId::G2Gat,
            CouplingKind::Sage => ModelId::G2Sage,
        }
    }

    /// Stack of `layers` layers of constant `width`, default hyperparameters.
    pub fn config(self, width: usize, layers: usize) -> G2Config {
        G2Config::new(self.mode(), CouplingConfig::new(self.kind(), width, width), layers)
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelId::Gcn => "gcn",
            ModelId::Gat => "gat",
            ModelId::Sage => "sage",
            ModelId::G2Gcn => "g2-gcn",
            ModelId::G2Gat => "g2-gat",
            ModelId::G2Sage => "g2-sage",
        })
    }
}

impl FromStr for ModelId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ModelId::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown model `{s}` (expected gcn, gat, sage, g2-gcn, g2-gat or g2-sage)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in ModelId::ALL {
            assert_eq!(m.to_string().parse::<ModelId>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{m}\""));
        }
        assert!("gin".parse::<ModelId>().is_err());
        assert_eq!(ModelId::g2(CouplingKind::Gat), ModelId::G2Gat);
        assert!(!ModelId::plain(CouplingKind::Sage).gated());
    }
}
