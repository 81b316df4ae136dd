//! Run configuration: a TOML file plus command-line overrides.
//!
//! ```toml
//! preset = "tiny"        # or a full [network] table
//! size = 96              # square training resolution
//! stage1_iters = 500     # default: a quarter of train.max_iter
//!
//! [train]
//! initial_lr = 1e-4
//! max_iter = 2000
//!
//! [loss]
//! alpha = [50, 4, 4, 4, 4]
//! beta_w = 25
//! beta_sq = 0.3
//! ```

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::NetworkConfig;
use crate::pipeline::TrainConfig;

/// Resolution used when neither the command line, the config nor the
/// manifest names one.
pub const DEFAULT_SIZE: usize = 96;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub network: Option<NetworkConfig>,
    pub size: Option<usize>,
    pub stage1_iters: Option<usize>,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if cfg.preset.is_some() && cfg.network.is_some() {
            return Err(Error::InvalidConfig("give either preset or [network], not both".into()));
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        match (&self.network, &self.preset) {
            (Some(n), _) => {
                n.validate()?;
                Ok(n.clone())
            }
            (None, Some(p)) => NetworkConfig::preset(p),
            (None, None) => Ok(NetworkConfig::tiny()),
        }
    }

    /// Stage-1 budget: explicit, or a quarter of stage 2's.
    pub fn stage1_iters(&self) -> usize {
        self.stage1_iters.unwrap_or((self.train.max_iter / 4).max(1))
    }

    pub fn resolve_size(&self, flag: Option<usize>, manifest: Option<usize>) -> Result<usize> {
        let size = flag.or(self.size).or(manifest).unwrap_or(DEFAULT_SIZE);
        if size == 0 {
            return Err(Error::InvalidArgument("size must be positive".into()));
        }
        Ok(size)
    }
}
