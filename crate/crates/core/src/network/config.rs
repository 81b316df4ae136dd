use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};

/// One encoder stage: `convs` 3×3 conv/BN/ReLU blocks followed by a 2×2
/// max pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub convs: usize,
}

/// Output widths of the four convolutions of one decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLayerSpec {
    pub conv_e: usize,
    pub conv_d: usize,
    pub conv_1: usize,
    pub conv_2: usize,
}

impl DecoderLayerSpec {
    const fn new(conv_e: usize, conv_d: usize, conv_1: usize, conv_2: usize) -> Self {
        DecoderLayerSpec {
            conv_e,
            conv_d,
            conv_1,
            conv_2,
        }
    }
}

/// Declarative description of the whole network.
///
/// `decoder[0]` is layer 1, the shallowest and highest-resolution layer;
/// it consumes the skip feature of `backbone[0]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub backbone: Vec<StageSpec>,
    pub decoder: Vec<DecoderLayerSpec>,
    pub residual: bool,
    pub attention: AttentionKind,
    /// Kernel size of every `conv_e`.
    pub conv_e_size: usize,
}

pub const CONV_E_SIZES: [usize; 4] = [1, 3, 5, 7];

impl NetworkConfig {
    /// Desk-scale default backbone and decoder.
    pub fn tiny() -> Self {
        let stage = |channels| StageSpec { channels, convs: 2 };
        NetworkConfig {
            in_channels: 3,
            backbone: vec![stage(8), stage(16), stage(32), stage(32), stage(32)],
            decoder: vec![
                DecoderLayerSpec::new(16, 16, 32, 32),
                DecoderLayerSpec::new(16, 16, 32, 32),
                DecoderLayerSpec::new(8, 8, 16, 16),
                DecoderLayerSpec::new(4, 4, 8, 8),
                DecoderLayerSpec::new(4, 4, 8, 8),
            ],
            residual: true,
            attention: AttentionKind::Ogam,
            conv_e_size: 3,
        }
    }

    /// VGG16 convolution blocks with the full-width decoder.
    pub fn vgg16_shape() -> Self {
        let stage = |channels, convs| StageSpec { channels, convs };
        NetworkConfig {
            in_channels: 3,
            backbone: vec![stage(64, 2), stage(128, 2), stage(256, 3), stage(512, 3), stage(512, 3)],
            decoder: vec![
                DecoderLayerSpec::new(128, 128, 256, 256),
                DecoderLayerSpec::new(128, 128, 256, 256),
                DecoderLayerSpec::new(64, 64, 128, 128),
                DecoderLayerSpec::new(32, 32, 64, 64),
                DecoderLayerSpec::new(32, 32, 64, 64),
            ],
            residual: true,
            attention: AttentionKind::Ogam,
            conv_e_size: 3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "vgg16-shape" => Ok(Self::vgg16_shape()),
            _ => Err(Error::InvalidConfig(format!("unknown preset {name:?}"))),
        }
    }

    /// Number of decoder layers and side outputs.
    pub fn layers(&self) -> usize {
        self.decoder.len()
    }

    /// Input extents must be multiples of this.
    pub fn stride(&self) -> usize {
        1 << self.backbone.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.backbone.is_empty() {
            return bad("backbone needs at least one stage".into());
        }
        if self.backbone.len() > 16 {
            return bad("backbone has too many stages".into());
        }
        if self.decoder.len() != self.backbone.len() {
            return bad(format!(
                "{} decoder rows for {} encoder stages",
                self.decoder.len(),
                self.backbone.len()
            ));
        }
        for (i, s) in self.backbone.iter().enumerate() {
            if s.channels == 0 || s.convs == 0 {
                return bad(format!("stage {} needs positive channels and convs", i + 1));
            }
        }
        for (i, d) in self.decoder.iter().enumerate() {
            if [d.conv_e, d.conv_d, d.conv_1, d.conv_2].contains(&0) {
                return bad(format!("decoder row {} has a zero channel count", i + 1));
            }
        }
        if !CONV_E_SIZES.contains(&self.conv_e_size) {
            return bad(format!("conv_e_size must be one of 1, 3, 5, 7 (got {})", self.conv_e_size));
        }
        Ok(())
    }

    /// Canonical text form, used for checkpoint config echoes.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [NetworkConfig::tiny(), NetworkConfig::vgg16_shape()] {
            cfg.validate().unwrap();
            assert_eq!(NetworkConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
            assert_eq!(cfg.stride(), 32);
            assert_eq!(cfg.layers(), 5);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = NetworkConfig::tiny();
        c.conv_e_size = 2;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.decoder.pop();
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.backbone[2].channels = 0;
        assert!(c.validate().is_err());
        assert!(NetworkConfig::preset("resnet").is_err());
    }
}
