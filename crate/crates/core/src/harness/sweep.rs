//! Grid search over the bias strengths.

use serde::Serialize;

use super::{evaluate_records, DatasetRecord, Engine, HarnessError, PipelineConfig};
use crate::decode::BiasSpec;

/// 0.0, 0.1, ..., 0.5 for both beta and gamma.
pub const DEFAULT_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub gamma: f64,
    pub em: f64,
    pub slot_f1: f64,
    pub avg_sis: f64,
    /// Mean softmax mass on the boosted tokens; `None` for text backends.
    pub bias_mass: Option<f64>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// First failing cell; rows computed before it are kept.
    pub error: Option<HarnessError>,
}

fn sorted_grid(name: &str, grid: &[f64]) -> Result<Vec<f64>, HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::Config(format!("{name} grid is empty")));
    }
    let mut g = grid.to_vec();
    if g.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(HarnessError::Config(format!("{name} grid values must be finite and non-negative")));
    }
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

/// One evaluation per (beta, gamma) cell, rows in (beta, gamma) order.
/// `on_row` sees each row as soon as it is computed.
pub fn sweep(
    engine: &Engine<'_>,
    records: &[DatasetRecord],
    cfg: &PipelineConfig,
    betas: &[f64],
    gammas: &[f64],
    workers: usize,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<SweepOutcome, HarnessError> {
    let betas = sorted_grid("beta", betas)?;
    let gammas = sorted_grid("gamma", gammas)?;
    let mut rows = Vec::with_capacity(betas.len() * gammas.len());
    for &beta in &betas {
        for &gamma in &gammas {
            let cell = PipelineConfig { bias: BiasSpec { beta, gamma, ..cfg.bias }, ..cfg.clone() };
            match evaluate_records(engine, records, &cell, workers) {
                Ok(run) => {
                    let row = SweepRow {
                        beta,
                        gamma,
                        em: run.report.em,
                        slot_f1: run.report.slot_f1,
                        avg_sis: run.report.avg_sis,
                        bias_mass: run.mean_bias_mass(),
                    };
                    on_row(&row);
                    rows.push(row);
                }
                Err(e) => return Ok(SweepOutcome { rows, error: Some(e) }),
            }
        }
    }
    Ok(SweepOutcome { rows, error: None })
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "beta,gamma,em,slot_f1,avg_sis,bias_mass";

    pub fn csv(&self) -> String {
        let mass = self.bias_mass.map(|m| format!("{m:.6}")).unwrap_or_default();
        format!("{:.2},{:.2},{:.4},{:.4},{:.4},{mass}", self.beta, self.gamma, self.em, self.slot_f1, self.avg_sis)
    }
}
