//! Versioned JSON report.
//!
//! Every floating-point result is a [`Num`]: either `{value, std_error}` or
//! `{value, exact: true}`. Counts are plain integers and always exact.
//! Timing lives outside the result payload so that reruns compare equal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chain::Provenance;
use crate::config::RunConfig;
use crate::entropy::Units;
use crate::error::Result;
use crate::graph::{EdgeId, StructureFlags};
use crate::measure::Binning;
use crate::stats::Estimate;
use crate::system::State;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Num {
    Estimate { value: f64, std_error: f64 },
    Exact { value: f64, exact: bool },
}

impl Num {
    pub fn exact(value: f64) -> Self {
        Num::Exact { value, exact: true }
    }

    /// A zero standard error is reported as exact.
    pub fn estimate(value: f64, std_error: f64) -> Self {
        if std_error == 0.0 {
            Self::exact(value)
        } else {
            Num::Estimate { value, std_error }
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Num::Estimate { value, .. } | Num::Exact { value, .. } => value,
        }
    }

    pub fn std_error(&self) -> f64 {
        match *self {
            Num::Estimate { std_error, .. } => std_error,
            Num::Exact { .. } => 0.0,
        }
    }
}

impl From<Estimate> for Num {
    fn from(e: Estimate) -> Self {
        Num::estimate(e.value, e.std_error)
    }
}

pub(crate) fn nums(es: &[Estimate]) -> Vec<Num> {
    es.iter().copied().map(Num::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    /// The run configuration with every default filled in.
    pub config: RunConfig,
    pub results: Results,
    pub verdict: Verdict,
    pub timing: Timing,
    pub versions: Versions,
}

impl Report {
    /// Results and verdict as compact JSON: the part that must be identical
    /// across reruns with the same config.
    pub fn payload(&self) -> Result<String> {
        Ok(serde_json::to_string(&(&self.results, &self.verdict))?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Results {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<ValidateResults>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contraction: Option<ContractionResults>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariant: Option<InvariantResults>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<EntropyResults>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coding: Option<CodingResults>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemma2: Option<Lemma2Results>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    /// Names of the sections whose check failed.
    pub failures: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    /// Wall-clock seconds per section plus `total`.
    pub seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub cms: String,
    pub schema: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            cms: env!("CARGO_PKG_VERSION").to_string(),
            schema: SCHEMA_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateResults {
    pub family: String,
    pub vertex_count: usize,
    pub edge_count: usize,
    pub structure: StructureFlags,
    pub period: Option<u64>,
    pub delta: Num,
    pub declared_rate: Num,
    pub lipschitz: Num,
    pub samples_per_edge: u64,
    pub samples_used: u64,
    pub normalization_max_error: Num,
    pub support_violations: u64,
    pub image_containment_violations: u64,
    pub delta_violations: u64,
    pub tolerance: Num,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionResults {
    pub pairs_sampled: u64,
    pub pairs_skipped: u64,
    pub max_ratio: Num,
    pub mean_ratio: Num,
    pub declared_rate: Num,
    pub tolerance: Num,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantResults {
    pub particles: usize,
    pub provenance: Provenance,
    pub part_masses: Vec<Num>,
    pub anchors: Vec<State>,
    /// The constant `C = sum_i integral_{K_i} d(x, x_i) d mu`.
    pub first_moment: Num,
    /// Part masses after one step of the chain from every particle.
    pub pushed_part_masses: Vec<Num>,
    pub push_max_z: Num,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRow {
    pub k: usize,
    pub h: Num,
    pub h_corrected: Num,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyResults {
    pub units: Units,
    pub formula: Num,
    pub formula_particles: u64,
    pub block_rate: Num,
    pub block_rate_corrected: Num,
    pub n_max: usize,
    pub stream_length: usize,
    pub blocks: Vec<BlockRow>,
    pub first_moment: Num,
    pub difference: Num,
    /// `k * combined_se + bias_allowance`, in the report units.
    pub threshold: Num,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingResults {
    pub window: usize,
    pub stride: usize,
    pub windows_attempted: u64,
    pub windows_dropped: u64,
    pub median_window: usize,
    pub max_increment: Num,
    pub tail_error_bound: Num,
    pub pushforward_part_masses: Vec<Num>,
    pub invariant_part_masses: Vec<Num>,
    pub part_mass_gap: Num,
    pub max_z: Num,
    pub moment_gaps: Vec<Num>,
    pub energy_distance: Num,
    pub energy_particles: usize,
    pub first_moment: Num,
    pub decay_windows: usize,
    pub decay_ratios: usize,
    pub decay_median_ratio: Option<Num>,
    pub converged_fraction: Num,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Results {
    pub past_length: usize,
    pub words: Vec<Vec<EdgeId>>,
    pub binning: Binning,
    pub n_windows: usize,
    pub windows_unconverged: usize,
    pub windows_excluded: usize,
    pub bins_used: usize,
    pub bins_excluded: usize,
    pub max_abs_gap: Num,
    pub max_z: Num,
    pub total_variation_gap: Num,
    pub tolerance: Num,
    pub passed: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn num_markers() {
        let e = serde_json::to_string(&Num::estimate(1.5, 0.25)).unwrap();
        assert_eq!(e, r#"{"value":1.5,"std_error":0.25}"#);
        let x = serde_json::to_string(&Num::estimate(2.0, 0.0)).unwrap();
        assert_eq!(x, r#"{"value":2.0,"exact":true}"#);
        let back: Num = serde_json::from_str(&e).unwrap();
        assert_eq!(back.std_error(), 0.25);
        assert_eq!(serde_json::from_str::<Num>(&x).unwrap().value(), 2.0);
    }
}
