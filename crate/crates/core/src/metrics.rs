//! Continual-learning metrics over a skills × timesteps performance table.

use serde::{Deserialize, Serialize};

use crate::datamodel::PerformanceTable;
use crate::error::{Error, Result};

fn check_t(table: &PerformanceTable, t: usize) -> Result<()> {
    if t >= table.columns() {
        return Err(Error::TimestepOutOfRange {
            t,
            columns: table.columns(),
        });
    }
    Ok(())
}

/// Mean performance over skills at timestep `t`.
pub fn average_accuracy(table: &PerformanceTable, t: usize) -> Result<f64> {
    check_t(table, t)?;
    let v = table.values();
    Ok(v.iter().map(|row| row[t]).sum::<f64>() / v.len() as f64)
}

/// Mean of `value / upper_bound` over skills at `t`, in percent.
pub fn relative_gain(table: &PerformanceTable, upper_bounds: &[f64], t: usize) -> Result<f64> {
    check_t(table, t)?;
    if upper_bounds.len() != table.skills().len() {
        return Err(Error::Table(format!(
            "{} upper bounds for {} skills",
            upper_bounds.len(),
            table.skills().len()
        )));
    }
    let mut sum = 0.0;
    for ((row, &ub), skill) in table.values().iter().zip(upper_bounds).zip(table.skills()) {
        if !(ub.is_finite() && ub > 0.0) {
            return Err(Error::BadUpperBound(skill.clone()));
        }
        // scaling before dividing keeps integer-valued inputs exact
        sum += row[t] * 100.0 / ub;
    }
    Ok(sum / table.skills().len() as f64)
}

/// Per-skill maxima over all timesteps, for use as upper bounds.
pub fn per_skill_maxima(reference: &PerformanceTable) -> Vec<f64> {
    reference
        .values()
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroBaseline {
    pub skill: String,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    /// Average relative drop, percent, reported as a non-negative number.
    pub rate: f64,
    /// Transitions skipped because the previous value was 0.
    pub zero_baselines: Vec<ZeroBaseline>,
}

/// `|(1/(S·T)) Σ_s Σ_t min(P_t − P_{t−1}, 0) / P_{t−1}| × 100`.
pub fn forgetting_rate(table: &PerformanceTable) -> Forgetting {
    let transitions = table.columns() - 1;
    let mut zero_baselines = Vec::new();
    if transitions == 0 {
        return Forgetting {
            rate: 0.0,
            zero_baselines,
        };
    }
    let mut sum = 0.0;
    for (row, skill) in table.values().iter().zip(table.skills()) {
        for t in 1..=transitions {
            let prev = row[t - 1];
            if prev == 0.0 {
                zero_baselines.push(ZeroBaseline {
                    skill: skill.clone(),
                    t,
                });
                continue;
            }
            sum += (row[t] - prev).min(0.0) * 100.0 / prev;
        }
    }
    let s = table.skills().len() as f64;
    Forgetting {
        rate: (sum / (s * transitions as f64)).abs(),
        zero_baselines,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub skills: Vec<String>,
    pub timesteps: usize,
    pub average_accuracy: Vec<f64>,
    pub upper_bounds: Vec<f64>,
    pub relative_gain_final: f64,
    pub relative_gain: Vec<f64>,
    pub forgetting_rate: f64,
    pub zero_baselines: Vec<ZeroBaseline>,
}

/// All metrics for a table; upper bounds default to its per-skill maxima.
pub fn metrics_report(table: &PerformanceTable) -> Result<MetricsReport> {
    let bounds = table
        .upper_bounds()
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| per_skill_maxima(table));
    let cols = table.columns();
    let average_accuracy = (0..cols).map(|t| average_accuracy(table, t)).collect::<Result<Vec<_>>>()?;
    let relative_gain = (0..cols)
        .map(|t| relative_gain(table, &bounds, t))
        .collect::<Result<Vec<_>>>()?;
    let forgetting = forgetting_rate(table);
    Ok(MetricsReport {
        skills: table.skills().to_vec(),
        timesteps: cols,
        average_accuracy,
        relative_gain_final: relative_gain[cols - 1],
        relative_gain,
        upper_bounds: bounds,
        forgetting_rate: forgetting.rate,
        zero_baselines: forgetting.zero_baselines,
    })
}
