use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuse::FuseConfig;
use crate::meta::MetaConfig;
use crate::nn::OptimConfig;
use crate::rng::derive_seed;
use crate::split::SplitConfig;
use crate::synthdata::DatasetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 4,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Order in which an open split is streamed through online updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamOrder {
    Manifest,
    Shuffled { seed: u64 },
}

impl StreamOrder {
    /// Parses `manifest` or `shuffled:<seed>`.
    pub fn parse(s: &str) -> Result<StreamOrder> {
        if s == "manifest" {
            return Ok(StreamOrder::Manifest);
        }
        s.strip_prefix("shuffled:")
            .and_then(|n| n.parse().ok())
            .map(|seed| StreamOrder::Shuffled { seed })
            .ok_or_else(|| Error::Config(format!("bad stream order {s:?} (manifest or shuffled:<seed>)")))
    }

    pub fn indices(self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if let StreamOrder::Shuffled { seed } = self {
            use rand::seq::SliceRandom;
            order.shuffle(&mut crate::rng::stream(seed, "stream-order", 0));
        }
        order
    }
}

/// Which parts of the staged protocol [`run_protocol`](super::run_protocol)
/// executes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Train the source-only reference model.
    pub source_only: bool,
    /// Third stage with MAML; plain fuse training otherwise.
    pub maml: bool,
    pub stream_order: StreamOrder,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            source_only: true,
            maml: true,
            stream_order: StreamOrder::Manifest,
        }
    }
}

/// Everything a run needs. Serialized next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub cluster: ClusterConfig,
    pub optim: OptimConfig,
    /// Also drives the source-only reference run.
    pub split: SplitConfig,
    pub fuse: FuseConfig,
    pub meta: MetaConfig,
    pub protocol: ProtocolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetSpec::default(),
            cluster: ClusterConfig::default(),
            optim: OptimConfig::default(),
            split: SplitConfig::default(),
            fuse: FuseConfig::default(),
            meta: MetaConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

/// The desk preset shipped as `configs/desk.toml`.
pub const DESK_TOML: &str = include_str!("../../../../configs/desk.toml");

impl ExperimentConfig {
    /// Small networks trained from scratch for a few hundred iterations
    /// need a larger step than the default 2.5e-4; everything else keeps
    /// its default.
    pub fn desk() -> Self {
        let mut c = ExperimentConfig::default();
        c.optim.lr = 0.01;
        c.split.iters = 300;
        c.fuse.iters = 100;
        c.meta.iters = 100;
        c.meta.inner_lr = 0.001;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.cluster.k == 0 {
            return bad("cluster.k must be positive");
        }
        if self.split.source_batch < 2 || self.split.target_batch < 2 {
            return bad("split batches need at least 2 images for batch statistics");
        }
        if self.fuse.source_batch < 2 {
            return bad("fuse.source_batch needs at least 2 images");
        }
        if !(self.optim.lr > 0.0) || !(self.optim.disc_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.meta.inner_lr >= 0.0) || !(self.meta.delta >= 0.0) {
            return bad("meta.inner_lr and meta.delta must be non-negative");
        }
        if !(self.fuse.temperature > 0.0) {
            return bad("fuse.temperature must be positive");
        }
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::new(self.seed)
    }
}

/// Per-stage seeds split off the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub master: u64,
    pub data: u64,
    pub cluster: u64,
    /// Network initialization, shared by the source-only and split runs.
    pub init: u64,
    /// Batch sampling of the source-only and split stages.
    pub split: u64,
    pub fuse: u64,
}

impl StageSeeds {
    pub fn new(master: u64) -> Self {
        StageSeeds {
            master,
            data: derive_seed(master, "stage-data", 0),
            cluster: derive_seed(master, "stage-cluster", 0),
            init: derive_seed(master, "stage-init", 0),
            split: derive_seed(master, "stage-split", 0),
            fuse: derive_seed(master, "stage-fuse", 0),
        }
    }

    pub fn rows(&self) -> [(&'static str, u64); 6] {
        [
            ("master", self.master),
            ("data", self.data),
            ("cluster", self.cluster),
            ("init", self.init),
            ("split", self.split),
            ("fuse", self.fuse),
        ]
    }
}
