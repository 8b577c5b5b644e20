//! Benchmark and ablation runner: stage orchestration, metrics and reports.

pub mod ablation;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub use ablation::{build_variant, run_ablation};
pub use layers::{emit_layer_comparison, write_layer_csv, LayerRow};
pub use metrics::{aupr_in, auroc, detection_accuracy, tnr_at_tpr, MetricSet};
pub use pipeline::{run_benchmark, RunPaths};
pub use report::{mean_report, MetricsReport, ReportCell};

/// Scoring methods compared in the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    C2ir,
    Msp,
    Energy,
    Odin,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::C2ir, Method::Msp, Method::Energy, Method::Odin];

    pub fn name(self) -> &'static str {
        match self {
            Method::C2ir => "c2ir",
            Method::Msp => "msp",
            Method::Energy => "energy",
            Method::Odin => "odin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err(format!("unknown method `{s}`")))
    }
}

/// Variants of the weighting and reference statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Gradient-derived `α` and `β`.
    Mgi,
    /// `α` one-hot on the last tapped layer.
    PenultimateOnly,
    /// `α = 1/L`, `β = 1/h_l`.
    UniformMean,
    /// Seeded uniform draws from the simplex for `α` and `β`.
    RandomWeights,
    /// Reference means taken from BN running means instead of impressions.
    BnStatsReference,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Mgi,
        AblationMode::PenultimateOnly,
        AblationMode::UniformMean,
        AblationMode::RandomWeights,
        AblationMode::BnStatsReference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Mgi => "mgi",
            AblationMode::PenultimateOnly => "penultimate_only",
            AblationMode::UniformMean => "uniform_mean",
            AblationMode::RandomWeights => "random_weights",
            AblationMode::BnStatsReference => "bn_stats_reference",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err(format!("unknown ablation mode `{s}`")))
    }
}
