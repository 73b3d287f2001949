//! Search over open structural choices (gate-block widths, bias and
//! normalization-affine placement) for configurations reproducing reference
//! parameter totals.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::audit::{count_parameters_for_config, REFERENCE_SWEEP};
use super::config::{ArchitectureConfig, ParamLayout};
use super::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpace {
    /// Allowed width for every gate block.
    pub gateblock_widths: Vec<usize>,
    pub ending_channels: Vec<usize>,
    /// Toggle normalization affines on the conv and gate blocks.
    pub vary_affine: bool,
    /// Toggle biases per stage (conv blocks, gate-block depthwise and
    /// pointwise, collapse depthwise and pointwise, output).
    pub vary_bias: bool,
}

impl Default for CandidateSpace {
    fn default() -> Self {
        Self { gateblock_widths: vec![64, 128, 256], ending_channels: vec![256], vary_affine: true, vary_bias: true }
    }
}

/// `(ending gates, parameter total)` pairs from the reference table.
pub fn reference_totals() -> Vec<(usize, usize)> {
    REFERENCE_SWEEP.iter().map(|r| (r.0, r.1)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndingCheck {
    pub ending_channels: usize,
    /// Parameters added by one more ending gate group.
    pub delta: usize,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowDiscrepancy {
    pub gates: usize,
    pub target: usize,
    pub actual: usize,
    /// `actual − target`.
    pub diff: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target_delta: usize,
    pub ending_checks: Vec<EndingCheck>,
    /// Configurations matching every target exactly, most plausible first
    /// (non-decreasing widths, then fewest departures from the default
    /// layout).
    pub exact: Vec<ArchitectureConfig>,
    /// First exact match, else the candidate with the smallest total
    /// absolute discrepancy.
    pub best: ArchitectureConfig,
    pub rows: Vec<RowDiscrepancy>,
    pub candidates_evaluated: usize,
}

/// Parameters added per ending gate group for `ending_channels` = E: a 1×8
/// depthwise stage with bias (9E) and an E→2E pointwise stage with bias
/// (2E² + 2E).
pub fn ending_delta(base: &ArchitectureConfig, ending_channels: usize) -> Result<usize, ModelError> {
    let cfg = ArchitectureConfig { ending_channels, ..base.clone() };
    let one = count_parameters_for_config(&cfg.with_ending_gates(1))?;
    let two = count_parameters_for_config(&cfg.with_ending_gates(2))?;
    Ok(two - one)
}

/// Positive integer root of `2E² + 11E = delta`, if any.
pub fn solve_ending_channels(delta: usize) -> Option<usize> {
    let disc = 121.0 + 8.0 * delta as f64;
    let e = ((disc.sqrt() - 11.0) / 4.0).round() as usize;
    (e > 0 && 2 * e * e + 11 * e == delta).then_some(e)
}

fn plausibility(cfg: &ArchitectureConfig) -> (usize, usize, Vec<usize>) {
    let inversions = cfg.gateblock_filters.windows(2).filter(|w| w[1] < w[0]).count();
    let default = ParamLayout::default().flags();
    let departures = cfg.layout.flags().iter().zip(default).filter(|(a, b)| **a != *b).count();
    (inversions, departures, cfg.gateblock_filters.clone())
}

pub fn rows_for(config: &ArchitectureConfig, targets: &[(usize, usize)]) -> Result<Vec<RowDiscrepancy>, ModelError> {
    targets
        .iter()
        .map(|&(gates, target)| {
            let actual = count_parameters_for_config(&config.with_ending_gates(gates))?;
            Ok(RowDiscrepancy { gates, target, actual, diff: actual as i64 - target as i64 })
        })
        .collect()
}

pub fn calibrate_channels(
    base: &ArchitectureConfig,
    targets: &[(usize, usize)],
    space: &CandidateSpace,
) -> Result<Calibration, ModelError> {
    if space.gateblock_widths.is_empty() || space.ending_channels.is_empty() || targets.is_empty() {
        return Err(ModelError::Calibration("empty candidate space".into()));
    }
    let mut sorted = targets.to_vec();
    sorted.sort();
    let deltas: Vec<i64> = sorted
        .windows(2)
        .map(|w| (w[1].1 as i64 - w[0].1 as i64) / (w[1].0 as i64 - w[0].0 as i64).max(1))
        .collect();
    let target_delta = match deltas.first() {
        Some(&d) if deltas.iter().all(|&x| x == d) && d > 0 => d as usize,
        Some(_) => return Err(ModelError::Calibration("reference totals are not an arithmetic progression".into())),
        None => ending_delta(base, base.ending_channels)?,
    };

    let mut ending_checks = Vec::new();
    for &e in &space.ending_channels {
        let delta = ending_delta(base, e)?;
        ending_checks.push(EndingCheck { ending_channels: e, delta, accepted: delta == target_delta });
    }
    let accepted: Vec<usize> = ending_checks.iter().filter(|c| c.accepted).map(|c| c.ending_channels).collect();
    if accepted.is_empty() {
        let report = ending_checks
            .iter()
            .map(|c| format!("ending_channels={} gives delta {} ≠ {}", c.ending_channels, c.delta, target_delta))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(ModelError::Calibration(report));
    }

    let blocks = base.gateblock_filters.len();
    let flag_sets: Vec<[bool; 8]> = (0..256u32)
        .map(|bits| std::array::from_fn(|i| bits & (1 << i) != 0))
        .filter(|f: &[bool; 8]| {
            let d = ParamLayout::default().flags();
            (space.vary_affine || (f[0] == d[0] && f[1] == d[1])) && (space.vary_bias || f[2..] == d[2..])
        })
        .collect();

    // One reference row fixes the rest once the ending delta matches.
    let (anchor_gates, anchor_target) = sorted[0];
    let mut exact = Vec::new();
    let mut best: Option<(u64, ArchitectureConfig)> = None;
    let mut evaluated = 0;
    let mut widths = vec![0usize; blocks];
    let n_widths = space.gateblock_widths.len();
    for &e in &accepted {
        for combo in 0..n_widths.pow(blocks as u32) {
            let mut rest = combo;
            for w in widths.iter_mut() {
                *w = space.gateblock_widths[rest % n_widths];
                rest /= n_widths;
            }
            for flags in &flag_sets {
                let cfg = ArchitectureConfig {
                    gateblock_filters: widths.clone(),
                    ending_channels: e,
                    ending_gate_count: anchor_gates,
                    layout: ParamLayout::from_flags(*flags),
                    ..base.clone()
                };
                evaluated += 1;
                let count = count_parameters_for_config(&cfg)?;
                let anchor_diff = count.abs_diff(anchor_target) as u64;
                let total_diff = anchor_diff * sorted.len() as u64;
                let cfg = cfg.with_ending_gates(base.ending_gate_count);
                if anchor_diff == 0 {
                    exact.push(cfg.clone());
                }
                let better = match &best {
                    None => true,
                    Some((d, b)) => total_diff < *d || (total_diff == *d && plausibility(&cfg) < plausibility(b)),
                };
                if better {
                    best = Some((total_diff, cfg));
                }
            }
        }
    }
    exact.sort_by_key(plausibility);
    exact.retain(|c| rows_for(c, targets).map(|r| r.iter().all(|x| x.diff == 0)).unwrap_or(false));
    let best = exact.first().cloned().unwrap_or_else(|| best.expect("non-empty space").1);
    let rows = rows_for(&best, targets)?;
    Ok(Calibration { target_delta, ending_checks, exact, best, rows, candidates_evaluated: evaluated })
}

impl Calibration {
    pub fn is_exact(&self) -> bool {
        self.rows.iter().all(|r| r.diff == 0)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ending-gate delta target: {}", self.target_delta);
        for c in &self.ending_checks {
            let verdict = if c.accepted { "accepted" } else { "rejected" };
            let _ = writeln!(s, "  ending_channels={:<5} delta={:<8} {verdict}", c.ending_channels, c.delta);
        }
        let _ = writeln!(s, "candidates evaluated: {}", self.candidates_evaluated);
        let _ = writeln!(s, "exact matches: {}", self.exact.len());
        for cfg in &self.exact {
            let _ = writeln!(s, "  widths={:?} layout={:?}", cfg.gateblock_filters, cfg.layout);
        }
        let _ = writeln!(
            s,
            "selected: widths={:?} ending_channels={} layout={:?}",
            self.best.gateblock_filters, self.best.ending_channels, self.best.layout
        );
        let _ = writeln!(s, "{:<7}{:>12}{:>12}{:>10}", "gates", "target", "actual", "diff");
        for r in &self.rows {
            let _ = writeln!(s, "{:<7}{:>12}{:>12}{:>+10}", r.gates, r.target, r.actual, r.diff);
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("gates\ttarget\tactual\tdiff\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{:+}", r.gates, r.target, r.actual, r.diff);
        }
        s
    }
}

/// Signed per-row discrepancy of an arbitrary configuration against the
/// reference totals.
pub fn discrepancy_report(config: &ArchitectureConfig) -> Result<Vec<RowDiscrepancy>, ModelError> {
    rows_for(config, &reference_totals())
}
