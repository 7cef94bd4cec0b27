//! Run configuration files: a `[network]` table, a `[train]` table and an
//! optional skeleton file path.
//!
//! ```toml
//! skeleton = "skeleton.toml"   # relative to this file; default topology if absent
//!
//! [network]
//! architecture = "graphsh"
//! stacks = 4
//! channels = 64
//! conv_kind = "preaggr"
//!
//! [train]
//! learning_rate = 1e-4
//! batch_size = 256
//! max_iterations = 100000
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::skeleton::{build_default_skeleton, SkeletonSpec};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub skeleton: Option<PathBuf>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// Reads a file; a relative `skeleton` path is resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(sk), Some(dir)) = (&cfg.skeleton, path.parent()) {
            if sk.is_relative() {
                cfg.skeleton = Some(dir.join(sk));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn skeleton_spec(&self) -> Result<SkeletonSpec> {
        match &self.skeleton {
            Some(p) => SkeletonSpec::load(p),
            None => Ok(build_default_skeleton()),
        }
    }
}
