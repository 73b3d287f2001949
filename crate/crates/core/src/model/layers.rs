use serde::{Deserialize, Serialize};

use super::config::ArchitectureConfig;
use super::ModelError;
use crate::tensor::{Activation, ConvGeometry, NormKind, Padding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Noise { std: f64 },
    Conv { kernel: (usize, usize), geom: ConvGeometry, bias: bool },
    /// Depthwise stage (kernel, stride, padding) then 1×1 pointwise.
    Dsc { kernel: (usize, usize), geom: ConvGeometry, depthwise_bias: bool, pointwise_bias: bool },
    Activation(Activation),
    Norm { kind: NormKind, affine: bool },
    MaxPool { kernel: (usize, usize) },
    Gate,
    Dropout { p: f64 },
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn kind_label(&self) -> &'static str {
        match self.kind {
            LayerKind::Noise { .. } => "noise",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Dsc { .. } => "dsc",
            LayerKind::Activation(_) => "activation",
            LayerKind::Norm { .. } => "norm",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Gate => "gate",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Spatial footprint; element-wise layers report 1×1.
    pub fn kernel(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv { kernel, .. } | LayerKind::Dsc { kernel, .. } | LayerKind::MaxPool { kernel } => kernel,
            _ => (1, 1),
        }
    }

    pub fn stride(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv { geom, .. } | LayerKind::Dsc { geom, .. } => geom.stride,
            LayerKind::MaxPool { kernel } => kernel,
            _ => (1, 1),
        }
    }

    /// Standard convolutions and composite separable convolutions.
    pub fn is_convolution(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Dsc { .. })
    }

    /// `(suffix, shape)` of every trainable tensor, in allocation order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (cin, cout) = (self.in_channels, self.out_channels);
        match self.kind {
            LayerKind::Conv { kernel: (kh, kw), bias, .. } => {
                let mut v = vec![("weight", vec![cout, cin, kh, kw])];
                if bias {
                    v.push(("bias", vec![cout]));
                }
                v
            }
            LayerKind::Dsc { kernel: (kh, kw), depthwise_bias, pointwise_bias, .. } => {
                let mut v = vec![("depthwise.weight", vec![cin, 1, kh, kw])];
                if depthwise_bias {
                    v.push(("depthwise.bias", vec![cin]));
                }
                v.push(("pointwise.weight", vec![cout, cin, 1, 1]));
                if pointwise_bias {
                    v.push(("pointwise.bias", vec![cout]));
                }
                v
            }
            LayerKind::Norm { affine: true, .. } => vec![("gamma", vec![cin]), ("beta", vec![cin])],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
    channels: usize,
    height: usize,
}

impl Builder {
    fn push(&mut self, name: String, kind: LayerKind, out_channels: usize) {
        self.layers.push(LayerSpec { name, kind, in_channels: self.channels, out_channels });
        self.channels = out_channels;
    }

    fn same(&mut self, name: String, kind: LayerKind) {
        let c = self.channels;
        self.push(name, kind, c);
    }
}

fn same_3x3() -> ConvGeometry {
    ConvGeometry::new((1, 1), Padding::symmetric(1, 1))
}

/// Expands a configuration into the ordered layer list.
pub fn build_layer_specs(config: &ArchitectureConfig) -> Result<Vec<LayerSpec>, ModelError> {
    config.validate()?;
    let layout = config.layout;
    let mut b = Builder { layers: Vec::new(), channels: 1, height: config.input_height };
    b.same("noise".into(), LayerKind::Noise { std: config.noise_std });

    for (i, &c) in config.convblock_filters.iter().enumerate() {
        let p = format!("cb{}", i + 1);
        let conv = LayerKind::Conv { kernel: (3, 3), geom: same_3x3(), bias: layout.conv_bias };
        b.push(format!("{p}.conv1"), conv.clone(), c);
        b.same(format!("{p}.relu1"), LayerKind::Activation(Activation::Relu));
        b.push(format!("{p}.conv2"), conv, c);
        b.same(format!("{p}.relu2"), LayerKind::Activation(Activation::Relu));
        b.same(
            format!("{p}.norm"),
            LayerKind::Norm { kind: config.norm_kind, affine: layout.convblock_norm_affine },
        );
        b.same(format!("{p}.dropout"), LayerKind::Dropout { p: config.dropout_p });
    }

    for (i, &c) in config.gateblock_filters.iter().enumerate() {
        let p = format!("gb{}", i + 1);
        let pool = if i < 2 { (2, 2) } else { (2, 1) };
        let dsc = LayerKind::Dsc {
            kernel: (3, 3),
            geom: same_3x3(),
            depthwise_bias: layout.gateblock_depthwise_bias,
            pointwise_bias: layout.gateblock_pointwise_bias,
        };
        b.push(format!("{p}.dsc1"), dsc.clone(), c);
        b.same(format!("{p}.relu1"), LayerKind::Activation(Activation::Relu));
        b.push(format!("{p}.dsc2"), dsc, 2 * c);
        b.same(format!("{p}.relu2"), LayerKind::Activation(Activation::Relu));
        b.same(
            format!("{p}.norm"),
            LayerKind::Norm { kind: config.norm_kind, affine: layout.gateblock_norm_affine },
        );
        if b.height < 2 {
            return Err(ModelError::HeightSchedule {
                layer: format!("{p}.pool"),
                height: b.height,
                reason: "cannot pool a height below 2".into(),
            });
        }
        b.height /= 2;
        b.same(format!("{p}.pool"), LayerKind::MaxPool { kernel: pool });
        b.push(format!("{p}.gate"), LayerKind::Gate, c);
        b.same(format!("{p}.dropout"), LayerKind::Dropout { p: config.dropout_p });
    }

    if b.height != 2 {
        return Err(ModelError::HeightSchedule {
            layer: "collapse.dsc".into(),
            height: b.height,
            reason: format!(
                "the 2x1 collapse needs height 2; {} gate blocks leave {} from input height {}",
                config.gateblock_filters.len(),
                b.height,
                config.input_height
            ),
        });
    }
    b.push(
        "collapse.dsc".into(),
        LayerKind::Dsc {
            kernel: (2, 1),
            geom: ConvGeometry::default(),
            depthwise_bias: layout.collapse_depthwise_bias,
            pointwise_bias: layout.collapse_pointwise_bias,
        },
        config.ending_channels,
    );
    b.height = 1;

    for j in 0..config.ending_gate_count {
        let p = format!("end{}", j + 1);
        b.push(
            format!("{p}.dsc"),
            LayerKind::Dsc {
                kernel: (1, 8),
                geom: ConvGeometry::new((1, 1), Padding::same(1, 8)),
                depthwise_bias: true,
                pointwise_bias: true,
            },
            2 * config.ending_channels,
        );
        b.push(format!("{p}.gate"), LayerKind::Gate, config.ending_channels);
        b.same(format!("{p}.dropout"), LayerKind::Dropout { p: config.dropout_p });
    }

    b.push(
        "output.conv".into(),
        LayerKind::Conv { kernel: (1, 1), geom: ConvGeometry::default(), bias: layout.output_bias },
        config.classes(),
    );
    b.same("output.softmax".into(), LayerKind::Softmax);
    Ok(b.layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_twenty_two_convolutions() {
        let specs = build_layer_specs(&ArchitectureConfig::default()).unwrap();
        assert_eq!(specs.iter().filter(|l| l.is_convolution()).count(), 22);
    }

    #[test]
    fn ending_gate_groups_differ_by_construction() {
        let base = ArchitectureConfig::default();
        let one = build_layer_specs(&base.with_ending_gates(1)).unwrap();
        let six = build_layer_specs(&base.with_ending_gates(6)).unwrap();
        assert_eq!(six.len() - one.len(), 5 * 3);
        let names = |v: &[LayerSpec]| v.iter().filter(|l| l.name.starts_with("end")).count();
        assert_eq!(names(&six) - names(&one), 15);
    }

    #[test]
    fn wrong_schedule_names_collapse_layer() {
        let cfg = ArchitectureConfig { gateblock_filters: vec![64, 128, 128, 256], ..Default::default() };
        let err = build_layer_specs(&cfg).unwrap_err();
        assert!(err.to_string().contains("collapse.dsc"), "{err}");
        let cfg = ArchitectureConfig { gateblock_filters: vec![8; 4], input_height: 8, ..Default::default() };
        let err = build_layer_specs(&cfg).unwrap_err();
        assert!(err.to_string().contains("gb3.pool") || err.to_string().contains("gb4.pool"), "{err}");
    }

    #[test]
    fn gates_halve_channels() {
        for l in build_layer_specs(&ArchitectureConfig::default()).unwrap() {
            if l.kind == LayerKind::Gate {
                assert_eq!(l.in_channels, 2 * l.out_channels, "{}", l.name);
            }
        }
    }
}
