//! Parameter and receptive-field accounting over a layer list.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{ArchitectureConfig, MAX_ENDING_GATES};
use super::layers::{build_layer_specs, LayerSpec};
use super::ModelError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParams {
    pub layer: String,
    pub kind: String,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub total: usize,
    pub per_layer: Vec<LayerParams>,
}

pub fn count_parameters(layers: &[LayerSpec]) -> ParameterReport {
    let per_layer: Vec<LayerParams> = layers
        .iter()
        .map(|l| LayerParams { layer: l.name.clone(), kind: l.kind_label().into(), params: l.param_count() })
        .collect();
    ParameterReport { total: per_layer.iter().map(|l| l.params).sum(), per_layer }
}

pub fn count_parameters_for_config(config: &ArchitectureConfig) -> Result<usize, ModelError> {
    Ok(build_layer_specs(config)?.iter().map(LayerSpec::param_count).sum())
}

/// Receptive field and cumulative stride ("jump") after a layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldRow {
    pub layer: String,
    pub kind: String,
    pub params: usize,
    pub r_v: usize,
    pub r_h: usize,
    pub j_v: usize,
    pub j_h: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub vertical: usize,
    pub horizontal: usize,
    pub trace: Vec<FieldRow>,
}

/// Per axis, `r ← r + (k − 1)·j` then `j ← j·s`, in layer order.
pub fn receptive_field(layers: &[LayerSpec]) -> ReceptiveField {
    let (mut rv, mut rh, mut jv, mut jh) = (1usize, 1usize, 1usize, 1usize);
    let mut trace = Vec::with_capacity(layers.len());
    for l in layers {
        let (kh, kw) = l.kernel();
        let (sh, sw) = l.stride();
        rv += (kh - 1) * jv;
        rh += (kw - 1) * jh;
        jv *= sh;
        jh *= sw;
        trace.push(FieldRow {
            layer: l.name.clone(),
            kind: l.kind_label().into(),
            params: l.param_count(),
            r_v: rv,
            r_h: rh,
            j_v: jv,
            j_h: jh,
        });
    }
    ReceptiveField { vertical: rv, horizontal: rh, trace }
}

/// Convolution layer tallies under the two possible conventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvolutionTally {
    /// A separable convolution counts once.
    pub composite: usize,
    /// Depthwise and pointwise stages count separately.
    pub split: usize,
}

pub fn convolution_tally(layers: &[LayerSpec]) -> ConvolutionTally {
    let conv = layers.iter().filter(|l| matches!(l.kind, super::LayerKind::Conv { .. })).count();
    let dsc = layers.iter().filter(|l| matches!(l.kind, super::LayerKind::Dsc { .. })).count();
    ConvolutionTally { composite: conv + dsc, split: conv + 2 * dsc }
}

/// Reference rows for ending-gate counts 1..=6: `(gates, parameters,
/// vertical field, horizontal field)`.
pub const REFERENCE_SWEEP: [(usize, usize, usize, usize); 6] = [
    (6, 1_375_792, 196, 240),
    (5, 1_241_904, 196, 212),
    (4, 1_108_016, 196, 184),
    (3, 974_128, 196, 156),
    (2, 840_240, 196, 128),
    (1, 706_352, 196, 100),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gates: usize,
    pub params: usize,
    pub delta_from_previous: Option<i64>,
    pub r_v: usize,
    pub r_h: usize,
    pub reference_params: Option<usize>,
    pub reference_field: Option<(usize, usize)>,
}

/// Audits `config` at every ending-gate count from 1 to 6.
pub fn ending_gate_sweep(config: &ArchitectureConfig) -> Result<Vec<SweepRow>, ModelError> {
    let mut rows: Vec<SweepRow> = Vec::with_capacity(MAX_ENDING_GATES);
    for gates in 1..=MAX_ENDING_GATES {
        let layers = build_layer_specs(&config.with_ending_gates(gates))?;
        let params = count_parameters(&layers).total;
        let rf = receptive_field(&layers);
        let reference = REFERENCE_SWEEP.iter().find(|r| r.0 == gates);
        rows.push(SweepRow {
            gates,
            params,
            delta_from_previous: rows.last().map(|p| params as i64 - p.params as i64),
            r_v: rf.vertical,
            r_h: rf.horizontal,
            reference_params: reference.map(|r| r.1),
            reference_field: reference.map(|r| (r.2, r.3)),
        });
    }
    Ok(rows)
}

/// Full audit of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureAudit {
    pub parameters: ParameterReport,
    pub field: ReceptiveField,
    pub tally: ConvolutionTally,
    pub sweep: Vec<SweepRow>,
}

impl ArchitectureAudit {
    pub fn new(config: &ArchitectureConfig) -> Result<Self, ModelError> {
        let layers = build_layer_specs(config)?;
        Ok(Self {
            parameters: count_parameters(&layers),
            field: receptive_field(&layers),
            tally: convolution_tally(&layers),
            sweep: ending_gate_sweep(config)?,
        })
    }

    /// Aligned-column layer table, totals and the ending-gate sweep.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18}{:<11}{:>10}{:>7}{:>7}{:>6}{:>6}", "layer", "kind", "params", "r_v", "r_h", "j_v", "j_h");
        for r in &self.field.trace {
            let _ = writeln!(
                s,
                "{:<18}{:<11}{:>10}{:>7}{:>7}{:>6}{:>6}",
                r.layer, r.kind, r.params, r.r_v, r.r_h, r.j_v, r.j_h
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "total parameters: {}", self.parameters.total);
        let _ = writeln!(s, "receptive field (v, h): ({}, {})", self.field.vertical, self.field.horizontal);
        let _ = writeln!(
            s,
            "convolution layers: {} (separable counted once), {} (depthwise and pointwise counted separately)",
            self.tally.composite, self.tally.split
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<7}{:>11}{:>10}{:>12}{:>13}{:>14}",
            "gates", "params", "delta", "field", "ref params", "ref field"
        );
        for r in &self.sweep {
            let delta = r.delta_from_previous.map_or("-".into(), |d| d.to_string());
            let rp = r.reference_params.map_or("-".into(), |v| v.to_string());
            let rf = r.reference_field.map_or("-".into(), |(v, h)| format!("({v}, {h})"));
            let _ = writeln!(
                s,
                "{:<7}{:>11}{:>10}{:>12}{:>13}{:>14}",
                r.gates,
                r.params,
                delta,
                format!("({}, {})", r.r_v, r.r_h),
                rp,
                rf
            );
        }
        s
    }

    /// Machine-readable rows: `layer kind params r_v r_h j_v j_h`, then one
    /// `sweep` row per ending-gate count and a `total` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("layer\tkind\tparams\tr_v\tr_h\tj_v\tj_h\n");
        for r in &self.field.trace {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}\t{}", r.layer, r.kind, r.params, r.r_v, r.r_h, r.j_v, r.j_h);
        }
        let _ = writeln!(
            s,
            "total\t-\t{}\t{}\t{}\t-\t-",
            self.parameters.total, self.field.vertical, self.field.horizontal
        );
        for r in &self.sweep {
            let _ = writeln!(
                s,
                "sweep\tgates={}\t{}\t{}\t{}\tdelta={}\t-",
                r.gates,
                r.params,
                r.r_v,
                r.r_h,
                r.delta_from_previous.map_or("-".into(), |d| d.to_string())
            );
        }
        s
    }
}
