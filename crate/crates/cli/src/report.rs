//! JSON experiment reports. Each criterion carries the number it was
//! judged on and the bound it was compared with, so every verdict can be
//! recomputed from the file alone.

use logitshift::attribution::{ComparisonReport, Region};
use logitshift::surgery::EquivalenceReport;
use serde::{Deserialize, Serialize};

pub const REPORT_FORMAT: &str = "logitshift-report";
pub const DEMO_FORMAT: &str = "logitshift-demo";
pub const REPORT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub tolerance: f64,
    pub passed: bool,
}

impl Criterion {
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            bound: Bound::AtMost,
            tolerance,
            passed: value <= tolerance,
        }
    }

    pub fn at_least(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            bound: Bound::AtLeast,
            tolerance,
            passed: value >= tolerance,
        }
    }

    /// Recompute the verdict from `value`, `bound` and `tolerance`.
    pub fn holds(&self) -> bool {
        match self.bound {
            Bound::AtMost => self.value <= self.tolerance,
            Bound::AtLeast => self.value >= self.tolerance,
        }
    }
}

pub fn failed_names(criteria: &[Criterion]) -> Vec<String> {
    criteria.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeEcho {
    Random {
        count: usize,
        seed: u64,
    },
    Dataset {
        dir: String,
        count: usize,
        seed: Option<u64>,
    },
    /// Blob images generated in memory by `demo`.
    Generated {
        count: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEcho {
    pub tap_layer: String,
    pub i0: usize,
    pub j0: usize,
    pub k: f64,
    /// Set for a single-class negative control.
    pub shifted_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub output: f64,
    pub postsoftmax_gradient: f64,
    pub parameter_gradient: f64,
    pub attribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub model: String,
    pub attacked: String,
    pub probes: ProbeEcho,
    /// `None` when the second model carries no attack stanza.
    pub attack: Option<AttackEcho>,
    pub gradcam_layer: String,
    pub attribution_probes: usize,
    pub ig_steps: usize,
    pub batch_size: usize,
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDeviation {
    pub method: String,
    pub variant: Option<String>,
    pub max_deviation: f64,
}

/// Post-softmax attribution maps of the two models, compared elementwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionInvariance {
    pub probe_count: usize,
    pub tolerance: f64,
    pub max_deviation: f64,
    pub methods: Vec<MethodDeviation>,
}

/// Descriptive statistics; not judged against any tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub probe: usize,
    pub class: usize,
    pub method: String,
    pub variant: Option<String>,
    pub score: String,
    /// Cells whose activations feed the tap; empty when the map is taken
    /// downstream of the tap.
    pub region: Region,
    pub metrics: ComparisonReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config: VerifyConfig,
    pub equivalence: EquivalenceReport,
    pub attribution: AttributionInvariance,
    pub comparisons: Vec<ComparisonEntry>,
    pub criteria: Vec<Criterion>,
    pub passed: bool,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    text
}
