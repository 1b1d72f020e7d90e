//! Per-template tuning grids.

use serde::{Deserialize, Serialize};

use crate::fusion::{Segment, TemplateKind};

pub const DEFAULT_CHUNK_SIZES: [usize; 3] = [256, 1024, 4096];
pub const DEFAULT_TILES: [usize; 3] = [16, 32, 64];
pub const DEFAULT_STAGE_DEPTHS: [usize; 2] = [1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "template")]
pub enum ParamSetting {
    MiChain {
        chunk_size: usize,
    },
    CiMi {
        tile_m: usize,
        tile_n: usize,
        tile_k: usize,
    },
    CiCi {
        tile_m: usize,
        tile_n: usize,
        tile_k: usize,
        stage_depth: usize,
    },
}

impl ParamSetting {
    pub fn kind(&self) -> TemplateKind {
        match self {
            ParamSetting::MiChain { .. } => TemplateKind::MiChain,
            ParamSetting::CiMi { .. } => TemplateKind::CiMi,
            ParamSetting::CiCi { .. } => TemplateKind::CiCi,
        }
    }

    /// Used when a template's grid is empty.
    pub fn default_for(kind: TemplateKind) -> Self {
        match kind {
            TemplateKind::MiChain => ParamSetting::MiChain { chunk_size: 1024 },
            TemplateKind::CiMi => ParamSetting::CiMi {
                tile_m: 32,
                tile_n: 32,
                tile_k: 32,
            },
            TemplateKind::CiCi => ParamSetting::CiCi {
                tile_m: 32,
                tile_n: 32,
                tile_k: 32,
                stage_depth: 1,
            },
        }
    }

    /// Numeric coordinates, in declaration order.
    pub fn axes(&self) -> Vec<usize> {
        match *self {
            ParamSetting::MiChain { chunk_size } => vec![chunk_size],
            ParamSetting::CiMi {
                tile_m,
                tile_n,
                tile_k,
            } => vec![tile_m, tile_n, tile_k],
            ParamSetting::CiCi {
                tile_m,
                tile_n,
                tile_k,
                stage_depth,
            } => vec![tile_m, tile_n, tile_k, stage_depth],
        }
    }
}

/// Finite grid per template kind. Grids may be empty, in which case the
/// affected segments run on [`ParamSetting::default_for`] and are reported as
/// untuned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub mi_chain: Vec<ParamSetting>,
    pub ci_mi: Vec<ParamSetting>,
    pub ci_ci: Vec<ParamSetting>,
}

impl Default for ParamSpace {
    fn default() -> Self {
        Self::from_axes(
            &DEFAULT_CHUNK_SIZES,
            &DEFAULT_TILES,
            &DEFAULT_TILES,
            &DEFAULT_TILES,
            &DEFAULT_STAGE_DEPTHS,
        )
    }
}

impl ParamSpace {
    /// Cartesian grids over the given axis values.
    pub fn from_axes(
        chunks: &[usize],
        tm: &[usize],
        tn: &[usize],
        tk: &[usize],
        depths: &[usize],
    ) -> Self {
        let mut ci_mi = Vec::new();
        let mut ci_ci = Vec::new();
        for &tile_m in tm {
            for &tile_n in tn {
                for &tile_k in tk {
                    ci_mi.push(ParamSetting::CiMi {
                        tile_m,
                        tile_n,
                        tile_k,
                    });
                    for &stage_depth in depths {
                        ci_ci.push(ParamSetting::CiCi {
                            tile_m,
                            tile_n,
                            tile_k,
                            stage_depth,
                        });
                    }
                }
            }
        }
        Self {
            mi_chain: chunks
                .iter()
                .map(|&chunk_size| ParamSetting::MiChain { chunk_size })
                .collect(),
            ci_mi,
            ci_ci,
        }
    }

    pub fn empty() -> Self {
        Self {
            mi_chain: Vec::new(),
            ci_mi: Vec::new(),
            ci_ci: Vec::new(),
        }
    }

    pub fn grid(&self, kind: TemplateKind) -> &[ParamSetting] {
        match kind {
            TemplateKind::MiChain => &self.mi_chain,
            TemplateKind::CiMi => &self.ci_mi,
            TemplateKind::CiCi => &self.ci_ci,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSetting {
    pub segment: Segment,
    pub setting: ParamSetting,
}

/// Chosen setting per tuned segment, in chain order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamAssignment {
    pub entries: Vec<SegmentSetting>,
}

impl ParamAssignment {
    pub fn get(&self, segment: Segment) -> Option<&ParamSetting> {
        self.entries
            .iter()
            .find(|e| e.segment == segment)
            .map(|e| &e.setting)
    }

    pub fn insert(&mut self, segment: Segment, setting: ParamSetting) {
        match self.entries.iter_mut().find(|e| e.segment == segment) {
            Some(e) => e.setting = setting,
            None => {
                self.entries.push(SegmentSetting { segment, setting });
                self.entries.sort_by_key(|e| e.segment);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_sizes() {
        let p = ParamSpace::default();
        assert_eq!(p.mi_chain.len(), 3);
        assert_eq!(p.ci_mi.len(), 27);
        assert_eq!(p.ci_ci.len(), 54);
        assert!(p.ci_ci.iter().all(|s| s.kind() == TemplateKind::CiCi));
    }

    #[test]
    fn setting_json_is_tagged() {
        let s = ParamSetting::CiMi {
            tile_m: 16,
            tile_n: 32,
            tile_k: 64,
        };
        let v = serde_json::to_value(s).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"template": "CiMi", "tile_m": 16, "tile_n": 32, "tile_k": 64})
        );
        assert_eq!(serde_json::from_value::<ParamSetting>(v).unwrap(), s);
    }
}
