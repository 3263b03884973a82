use std::fmt;

use super::{layer_plan, LayerKind, ModelConfig, Stage};

/// Trainable parameters of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub stage: Stage,
    pub name: String,
    pub shape: String,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub layers: Vec<LayerCount>,
    pub bcnn: usize,
    pub rpm: usize,
    pub scnn: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.bcnn + self.rpm + self.scnn
    }
}

/// Counts weights, biases, gamma and beta. Running statistics are buffers,
/// not parameters, and are excluded.
pub fn count_parameters(cfg: &ModelConfig) -> ParamCount {
    let mut out = ParamCount {
        layers: Vec::new(),
        bcnn: 0,
        rpm: 0,
        scnn: 0,
    };
    for spec in layer_plan(cfg) {
        let (shape, params) = match spec.kind {
            LayerKind::Conv {
                cin,
                cout,
                kernel,
                dilation,
            } => (
                format!("conv {kernel}x{kernel} {cin}->{cout} d{dilation}"),
                cout * cin * kernel * kernel + cout,
            ),
            LayerKind::BatchNorm { channels } => (format!("batchnorm {channels}"), 2 * channels),
            LayerKind::InstanceNorm { channels } => (format!("instancenorm {channels}"), 2 * channels),
        };
        *match spec.stage {
            Stage::Bcnn => &mut out.bcnn,
            Stage::Rpm => &mut out.rpm,
            Stage::Scnn => &mut out.scnn,
        } += params;
        out.layers.push(LayerCount {
            stage: spec.stage,
            name: spec.name,
            shape,
            params,
        });
    }
    out
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:<30} {:>10}", "layer", "shape", "params")?;
        for l in &self.layers {
            writeln!(f, "{:<14} {:<30} {:>10}", l.name, l.shape, l.params)?;
        }
        writeln!(f, "{:<45} {:>10}", "bcnn total", self.bcnn)?;
        writeln!(f, "{:<45} {:>10}", "rpm total", self.rpm)?;
        writeln!(f, "{:<45} {:>10}", "scnn total", self.scnn)?;
        write!(f, "{:<45} {:>10}", "total", self.total())
    }
}
