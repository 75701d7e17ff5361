//! On-device deployment check: a model fits a handset when its size is
//! under 6% of the RAM and its latency and energy stay under the caps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest admissible model-size / RAM ratio (exclusive).
pub const MAX_RAM_FRACTION: f64 = 0.06;

#[derive(Debug, Error, PartialEq)]
pub enum FeasibilityError {
    #[error("`{field}` must be positive and finite, got {value}")]
    NonPositiveInput { field: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub ram_gb: f64,
    pub max_latency_ms: f64,
    pub max_energy_j: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub size_gb: f64,
    pub latency_ms: f64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilitySpec {
    pub device: Device,
    pub model: ModelProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub ram_ratio: f64,
    pub min_ram_gb: f64,
    pub reasons: Vec<String>,
}

/// Smallest RAM on which a model of `size_gb` is admissible (boundary excluded).
pub fn min_ram_gb(size_gb: f64) -> f64 {
    size_gb / MAX_RAM_FRACTION
}

pub fn feasibility(spec: &FeasibilitySpec) -> Result<FeasibilityReport, FeasibilityError> {
    let FeasibilitySpec { device: d, model: m } = spec;
    for (field, value) in [
        ("ram", d.ram_gb),
        ("latency", d.max_latency_ms),
        ("energy", d.max_energy_j),
        ("model-size", m.size_gb),
        ("model-latency", m.latency_ms),
        ("model-energy", m.energy_j),
    ] {
        if !(value.is_finite() && value > 0.0) {
            return Err(FeasibilityError::NonPositiveInput { field, value });
        }
    }
    let ram_ratio = m.size_gb / d.ram_gb;
    let mut reasons = Vec::new();
    if ram_ratio >= MAX_RAM_FRACTION {
        reasons.push(format!(
            "memory: model uses {:.4} of device RAM, limit is below {MAX_RAM_FRACTION}",
            ram_ratio
        ));
    }
    if m.latency_ms >= d.max_latency_ms {
        reasons.push(format!("latency: {} ms is not below the {} ms cap", m.latency_ms, d.max_latency_ms));
    }
    if m.energy_j >= d.max_energy_j {
        reasons.push(format!("energy: {} J is not below the {} J cap", m.energy_j, d.max_energy_j));
    }
    Ok(FeasibilityReport { feasible: reasons.is_empty(), ram_ratio, min_ram_gb: min_ram_gb(m.size_gb), reasons })
}
