//! Run configuration read from TOML.
//!
//! Every section is optional; missing keys take their defaults and unknown
//! keys are rejected. The fully resolved configuration is written back out as
//! the run's `config.echo`.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! hidden_dim = 16
//!
//! [train]
//! sigma = 0.05
//!
//! [curriculum]
//! preset = "desk"
//!
//! [eval]
//! topologies = ["star10", "er"]
//! policies = ["lgs", "full"]
//! checkpoints = { full = "runs/train/checkpoints/full.ckpt" }
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ExperimentSpec, PolicyEntry, PolicyKind};
use crate::graph::Topology;
use crate::models::ModelConfig;
use crate::train::{default_curriculum, desk_curriculum, smoke_curriculum, CurriculumPhase, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generate: GenerateConfig,
    pub simulate: SimulateConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generate: GenerateConfig::default(),
            simulate: SimulateConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            curriculum: CurriculumConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parse a topology name, optionally overriding its vertex count.
pub fn resolve_topology(name: &str, n: Option<usize>) -> Result<Topology> {
    let t: Topology = name.parse()?;
    let t = match n {
        Some(n) => t.with_n(n),
        None => t,
    };
    t.validate()?;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub topology: String,
    pub n: Option<usize>,
    pub count: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { topology: "er".into(), n: None, count: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub topology: String,
    pub n: Option<usize>,
    pub mu: f64,
    pub horizon: usize,
    pub policy: PolicyKind,
    pub checkpoint: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { topology: "er".into(), n: None, mu: 0.07, horizon: 64, policy: PolicyKind::Lgs, checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub name: String,
    pub families: Vec<String>,
    pub epochs: usize,
    pub graphs_per_epoch: usize,
    pub mus: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// `default`, `desk` or `smoke`; ignored when `phases` is non-empty.
    pub preset: String,
    pub phases: Vec<PhaseConfig>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self { preset: "default".into(), phases: Vec::new() }
    }
}

impl CurriculumConfig {
    pub fn resolve(&self) -> Result<Vec<CurriculumPhase>> {
        if !self.phases.is_empty() {
            return self
                .phases
                .iter()
                .map(|p| {
                    let families = p.families.iter().map(|f| f.parse()).collect::<Result<_>>()?;
                    let phase = CurriculumPhase::new(&p.name, families, p.epochs, p.graphs_per_epoch, p.mus.clone());
                    phase.validate()?;
                    Ok(phase)
                })
                .collect();
        }
        match self.preset.as_str() {
            "default" => Ok(default_curriculum()),
            "desk" => Ok(desk_curriculum()),
            "smoke" => Ok(smoke_curriculum()),
            other => Err(Error::Config(format!("unknown curriculum preset `{other}` (expected default, desk or smoke)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub topologies: Vec<String>,
    pub instances: usize,
    pub horizon: usize,
    pub mus: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    /// Checkpoint path per learned policy id.
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let spec = ExperimentSpec::default();
        Self {
            topologies: vec!["star10".into(), "er".into()],
            instances: spec.instances,
            horizon: spec.horizon,
            mus: spec.mus,
            policies: vec![PolicyKind::Lgs],
            checkpoints: BTreeMap::new(),
            bootstrap_resamples: spec.bootstrap_resamples,
            confidence: spec.confidence,
        }
    }
}

impl EvalConfig {
    /// Build an experiment, loading every referenced checkpoint.
    pub fn to_spec(&self, seed: u64) -> Result<ExperimentSpec> {
        let topologies = self.topologies.iter().map(|t| t.parse()).collect::<Result<_>>()?;
        for key in self.checkpoints.keys() {
            let kind: PolicyKind = key.parse()?;
            if !self.policies.contains(&kind) {
                return Err(Error::Config(format!("checkpoint given for `{key}`, which is not an evaluated policy")));
            }
        }
        let policies = self
            .policies
            .iter()
            .map(|&kind| match (kind, self.checkpoints.get(kind.id())) {
                (PolicyKind::Lgs, _) => Ok(PolicyEntry::lgs()),
                (kind, Some(path)) => PolicyEntry::from_checkpoint_file(kind, path),
                (kind, None) => Err(Error::Config(format!("policy `{}` needs a checkpoint", kind.id()))),
            })
            .collect::<Result<_>>()?;
        Ok(ExperimentSpec {
            topologies,
            instances: self.instances,
            horizon: self.horizon,
            mus: self.mus.clone(),
            policies,
            base_seed: seed,
            bootstrap_resamples: self.bootstrap_resamples,
            confidence: self.confidence,
            ..ExperimentSpec::default()
        })
    }
}
