//! Run configuration: one TOML document per run.
//!
//! ```toml
//! seed = 42
//! units = "nats"
//!
//! [system]
//! family = "planar_affine_trig"
//!
//! [entropy]
//! stream_length = 1000000
//! n_max = 5
//! ```
//!
//! Every section except `[system]` is optional and every field has a
//! default. Family parameters default to the built-in constants, so
//! `family = "finite_chain"` alone gives the two-state chain.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coding::default_anchors;
use crate::entropy::Units;
use crate::error::{CmsError, Result};
use crate::measure::Binning;
use crate::system::{
    BernoulliParams, Certificates, Family, FiniteChainParams, MarkovSystem, PlanarParams, State,
};

/// Environment variable that overrides `workers`.
pub const WORKERS_ENV: &str = "CMS_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; there is no wall-clock default.
    pub seed: u64,
    #[serde(default)]
    pub units: Units,
    /// Worker threads; defaults to the available cores. Never affects results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub system: Family,
    /// Overrides the family's default certificates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificates: Option<Certificates>,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub validate: ValidateSection,
    #[serde(default)]
    pub contraction: ContractionSection,
    #[serde(default)]
    pub entropy: EntropySection,
    #[serde(default)]
    pub coding: CodingSection,
    #[serde(default)]
    pub lemma2: Lemma2Section,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub burn_in: u64,
    pub n_samples: u64,
    pub thinning: u64,
    /// Independent chains sharing `n_samples`; 1 means one long run.
    pub chains: u64,
    /// Defaults to the first coding anchor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<State>,
}

impl Default for ChainSection {
    fn default() -> Self {
        Self {
            burn_in: 10_000,
            n_samples: 100_000,
            thinning: 1,
            chains: 1,
            initial_state: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    /// States sampled per edge.
    pub samples: u64,
    /// Half-width of the sampling window for unbounded parts.
    pub radius: f64,
    pub tolerance: f64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            samples: 10_000,
            radius: 8.0,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContractionSection {
    pub pairs: u64,
    pub radius: f64,
}

impl Default for ContractionSection {
    fn default() -> Self {
        Self {
            pairs: 100_000,
            radius: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropySection {
    pub stream_length: usize,
    pub burn_in: usize,
    pub n_max: usize,
    /// Agreement needs `|formula - block| <= k * combined_se + bias_allowance`.
    pub k: f64,
    /// In nats.
    pub bias_allowance: f64,
}

impl Default for EntropySection {
    fn default() -> Self {
        Self {
            stream_length: 1_000_000,
            burn_in: 10_000,
            n_max: 5,
            k: 3.0,
            bias_allowance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodingSection {
    pub n_points: usize,
    pub max_window: usize,
    pub stride: usize,
    pub tolerance: f64,
    pub burn_in: usize,
    /// Windows used for the increment-decay diagnostic.
    pub decay_windows: usize,
    /// Defaults to the family's boundary anchors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<State>>,
}

impl Default for CodingSection {
    fn default() -> Self {
        Self {
            n_points: 10_000,
            max_window: 400,
            stride: 20,
            tolerance: 1e-10,
            burn_in: 10_000,
            decay_windows: 1_000,
            anchors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lemma2Section {
    pub past_length: usize,
    pub n_windows: usize,
    pub stride: usize,
    pub bins_per_coord: usize,
    pub min_per_bin: usize,
    pub tolerance: f64,
    pub binning: Binning,
    pub burn_in: usize,
}

impl Default for Lemma2Section {
    fn default() -> Self {
        Self {
            past_length: 400,
            n_windows: 100_000,
            stride: 1,
            bins_per_coord: 32,
            min_per_bin: 200,
            tolerance: 0.02,
            binning: Binning::BoundingBox,
            burn_in: 10_000,
        }
    }
}

/// Built-in family names accepted by [`RunConfig::builtin`].
pub const BUILTIN_FAMILIES: [&str; 3] = ["planar_affine_trig", "finite_chain", "bernoulli_ifs"];

pub fn builtin_family(name: &str) -> Result<Family> {
    match name {
        "planar_affine_trig" => Ok(Family::PlanarAffineTrig(PlanarParams::default())),
        "finite_chain" => Ok(Family::FiniteChain(FiniteChainParams::default())),
        "bernoulli_ifs" => Ok(Family::BernoulliIfs(BernoulliParams::default())),
        other => Err(CmsError::Config(format!(
            "unknown system `{other}`; expected one of {}",
            BUILTIN_FAMILIES.join(", ")
        ))),
    }
}

impl RunConfig {
    /// A built-in family with every section at its defaults.
    pub fn builtin(name: &str, seed: u64) -> Result<Self> {
        Ok(Self {
            seed,
            units: Units::Nats,
            workers: None,
            system: builtin_family(name)?,
            certificates: None,
            chain: ChainSection::default(),
            validate: ValidateSection::default(),
            contraction: ContractionSection::default(),
            entropy: EntropySection::default(),
            coding: CodingSection::default(),
            lemma2: Lemma2Section::default(),
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CmsError::Config(e.to_string()))
    }

    /// Reads a TOML config, or a JSON report whose `config` echo is reused.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CmsError::Config(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let parsed = if is_json {
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CmsError::Config(format!("{}: {e}", path.display())))?;
            let value = match value.get("config") {
                Some(c) if value.get("schema_version").is_some() => c.clone(),
                _ => value,
            };
            serde_json::from_value(value).map_err(|e| CmsError::Config(e.to_string()))
        } else {
            Self::from_toml_str(&text)
        };
        parsed.map_err(|e| match e {
            CmsError::Config(msg) => CmsError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CmsError::Config(e.to_string()))
    }

    pub fn build_system(&self) -> Result<MarkovSystem> {
        match self.certificates {
            Some(c) => MarkovSystem::new(self.system.clone(), c),
            None => MarkovSystem::with_default_certificates(self.system.clone()),
        }
    }

    /// Fills every optional field that has a system-dependent default.
    pub fn resolve(&mut self, system: &MarkovSystem) {
        self.certificates = Some(*system.certificates());
        let anchors = self
            .coding
            .anchors
            .get_or_insert_with(|| default_anchors(system));
        if self.chain.initial_state.is_none() {
            self.chain.initial_state = Some(anchors[0]);
        }
    }

    /// `CMS_WORKERS` when set, else the `workers` field.
    pub fn effective_workers(&self) -> Result<Option<usize>> {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .map(Some)
                .ok_or_else(|| {
                    CmsError::Config(format!("{WORKERS_ENV}={v} is not a positive integer"))
                }),
            Err(_) => Ok(self.workers),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg =
            RunConfig::from_toml_str("seed = 7\n[system]\nfamily = \"finite_chain\"\n").unwrap();
        assert_eq!(cfg, RunConfig::builtin("finite_chain", 7).unwrap());
        let s = cfg.build_system().unwrap();
        assert_eq!(s.edge_count(), 4);
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::from_toml_str("[system]\nfamily = \"finite_chain\"\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn errors_point_at_the_field() {
        let text = "seed = 1\n[system]\nfamily = \"finite_chain\"\n[entropy]\nn_max = \"five\"\n";
        let msg = RunConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(msg.contains("line 5"), "{msg}");
        assert!(msg.contains("n_max"), "{msg}");

        let typo = "seed = 1\n[system]\nfamily = \"finite_chain\"\n[chain]\nburnin = 3\n";
        let msg = RunConfig::from_toml_str(typo).unwrap_err().to_string();
        assert!(msg.contains("burnin"), "{msg}");

        let family = "seed = 1\n[system]\nfamily = \"tent_map\"\n";
        assert!(RunConfig::from_toml_str(family).is_err());
    }

    #[test]
    fn family_parameters_override_defaults() {
        let text =
            "seed = 1\n[system]\nfamily = \"finite_chain\"\nmatrix = [[0.5, 0.5], [0.2, 0.8]]\n";
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(
            cfg.system,
            Family::FiniteChain(FiniteChainParams {
                matrix: vec![vec![0.5, 0.5], vec![0.2, 0.8]]
            })
        );
    }

    #[test]
    fn resolved_config_round_trips() {
        for name in BUILTIN_FAMILIES {
            let mut cfg = RunConfig::builtin(name, 3).unwrap();
            let s = cfg.build_system().unwrap();
            cfg.resolve(&s);
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg, "{text}");
            let json = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_builtin() {
        assert!(RunConfig::builtin("tent_map", 1).is_err());
    }
}
