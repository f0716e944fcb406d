//! Per-coefficient inference output shared by all procedures.

use serde::{Deserialize, Serialize};

use crate::data::Subset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wald,
    Naive,
    Split,
    Selfmade,
    Uvil,
    Postcaic,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Wald => "wald",
            Method::Naive => "naive",
            Method::Split => "split",
            Method::Selfmade => "selfmade",
            Method::Uvil => "uvil",
            Method::Postcaic => "postcaic",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wald" => Ok(Method::Wald),
            "naive" => Ok(Method::Naive),
            "split" => Ok(Method::Split),
            "selfmade" => Ok(Method::Selfmade),
            "uvil" => Ok(Method::Uvil),
            "postcaic" => Ok(Method::Postcaic),
            other => Err(crate::error::Error::Validation(format!("unknown method '{other}'"))),
        }
    }
}

/// What the reported intervals are meant to cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// Submodel projection `beta_M` of the true mean onto the selected columns.
    Projection,
    /// The full-model coefficient vector.
    Population,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEntry {
    pub column: usize,
    pub name: String,
    pub estimate: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Column belongs to the selected model.
    pub selected: bool,
    /// Inference failed for this coefficient; p-value and interval are placeholders.
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
}

impl CoefficientEntry {
    pub fn failed(column: usize, name: String, estimate: f64) -> Self {
        Self {
            column,
            name,
            estimate,
            p_value: 1.0,
            ci_lower: f64::NEG_INFINITY,
            ci_upper: f64::INFINITY,
            selected: true,
            failed: true,
            acceptance_rate: None,
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        !self.failed && self.ci_lower <= value && value <= self.ci_upper
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampled: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_clusters: Option<Vec<usize>>,
    /// Reasons for per-coefficient failures, one line each.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub method: Method,
    pub target: Target,
    pub alpha: f64,
    pub selected: Subset,
    pub entries: Vec<CoefficientEntry>,
    pub diagnostics: Diagnostics,
}

impl InferenceReport {
    pub fn entry(&self, column: usize) -> Option<&CoefficientEntry> {
        self.entries.iter().find(|e| e.column == column)
    }

    pub fn p_values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.p_value).collect()
    }
}
