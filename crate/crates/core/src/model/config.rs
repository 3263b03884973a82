use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults give the full-size network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Feature maps of every backbone convolution in both networks.
    pub backbone_width: usize,
    /// Convolutions between the background network's head and tail.
    pub bcnn_deep_layers: usize,
    /// Convolutions between the segmentation network's head and the concat.
    pub scnn_deep_layers: usize,
    /// A normalization follows every `norm_interval`-th deep convolution.
    pub norm_interval: usize,
    pub kernel_size: usize,
    pub rpm_dilations: Vec<usize>,
    /// Feature maps per dilated branch.
    pub rpm_width: usize,
    pub rpm_dropout_rate: f64,
    pub pool_window: usize,
    pub bn_momentum: f64,
    pub norm_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            backbone_width: 64,
            bcnn_deep_layers: 15,
            scnn_deep_layers: 14,
            norm_interval: 3,
            kernel_size: 3,
            rpm_dilations: vec![4, 8, 16, 32],
            rpm_width: 8,
            rpm_dropout_rate: 0.25,
            pool_window: 4,
            bn_momentum: 0.9,
            norm_epsilon: 1e-5,
        }
    }
}

impl ModelConfig {
    /// A scaled-down variant sharing every other default.
    pub fn reduced(width: usize, deep_layers: usize, rpm_width: usize) -> Self {
        ModelConfig {
            backbone_width: width,
            bcnn_deep_layers: deep_layers,
            scnn_deep_layers: deep_layers,
            rpm_width,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("input_channels", self.input_channels),
            ("backbone_width", self.backbone_width),
            ("norm_interval", self.norm_interval),
            ("rpm_width", self.rpm_width),
            ("pool_window", self.pool_window),
        ] {
            if v == 0 {
                return fail(format!("model.{name} must be >= 1"));
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("model.kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.rpm_dilations.is_empty() || self.rpm_dilations.contains(&0) {
            return fail(format!(
                "model.rpm_dilations must be a non-empty list of rates >= 1, got {:?}",
                self.rpm_dilations
            ));
        }
        if !(0.0..1.0).contains(&self.rpm_dropout_rate) {
            return fail(format!(
                "model.rpm_dropout_rate must lie in [0, 1), got {}",
                self.rpm_dropout_rate
            ));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return fail(format!("model.bn_momentum must lie in [0, 1), got {}", self.bn_momentum));
        }
        if !(self.norm_epsilon > 0.0) {
            return fail(format!("model.norm_epsilon must be > 0, got {}", self.norm_epsilon));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::reduced(8, 3, 2).validate().unwrap();
    }

    #[test]
    fn invalid_fields_rejected() {
        let bad = [
            ModelConfig { kernel_size: 4, ..Default::default() },
            ModelConfig { backbone_width: 0, ..Default::default() },
            ModelConfig { norm_interval: 0, ..Default::default() },
            ModelConfig { rpm_dilations: vec![], ..Default::default() },
            ModelConfig { rpm_dilations: vec![4, 0], ..Default::default() },
            ModelConfig { rpm_dropout_rate: 1.0, ..Default::default() },
            ModelConfig { norm_epsilon: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
