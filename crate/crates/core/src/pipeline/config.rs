//! Versioned run configuration and per-stage content hashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::exec::{BenchmarkConfig, ExecPolicy};
use crate::sim::{EnvParams, ExpertGains, TaskId};
use crate::verdata::VerdataConfig;
use crate::verifier::{Ablation, VerifierConfig, VerifierTrainConfig};
use crate::wam::{WamConfig, WamTrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub tasks: Vec<TaskId>,
    pub per_task: usize,
    /// Demo `i` of every task uses env seed `seed_base + i`.
    pub seed_base: u64,
    /// Every `missed_grasp_every`-th demo (0: none) closes too early once
    /// and recovers.
    pub missed_grasp_every: usize,
    /// Range of the early-close radius, drawn per demo.
    pub missed_grasp_radius: [f64; 2],
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { tasks: TaskId::ALL.to_vec(), per_task: 100, seed_base: 0, missed_grasp_every: 4, missed_grasp_radius: [0.05, 0.07] }
    }
}

/// Everything a run depends on. Omitted sections take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub env: EnvParams,
    pub expert: ExpertGains,
    pub demos: DemoConfig,
    pub wam: WamConfig,
    pub wam_train: WamTrainConfig,
    pub verdata: VerdataConfig,
    pub verifier: VerifierConfig,
    pub verifier_train: VerifierTrainConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out: PathBuf::from("runs/default"),
            env: EnvParams::default(),
            expert: ExpertGains::default(),
            demos: DemoConfig::default(),
            wam: WamConfig::default(),
            wam_train: WamTrainConfig::default(),
            verdata: VerdataConfig::default(),
            verifier: VerifierConfig::default(),
            verifier_train: VerifierTrainConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Schema(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        if self.demos.per_task == 0 || self.demos.tasks.is_empty() {
            return bad("demos need at least one task and one episode per task".into());
        }
        let [lo, hi] = self.demos.missed_grasp_radius;
        if !(lo > crate::sim::GRASP_RADIUS + self.expert.max_speed && lo <= hi) {
            return bad(format!("missed-grasp radius [{lo}, {hi}] must exceed the grasp radius plus one step"));
        }
        self.wam.validate().map_err(|e| PipelineError::Schema(e.to_string()))?;
        self.verdata.validate().map_err(|e| PipelineError::Schema(e.to_string()))?;
        self.verifier.validate().map_err(|e| PipelineError::Schema(e.to_string()))?;
        if self.verifier.ratio != self.wam.ratio || self.verifier.n_semantic != self.wam.n_semantic {
            return bad(format!(
                "verifier (r={}, n_L={}) must match the model (r={}, n_L={})",
                self.verifier.ratio, self.verifier.n_semantic, self.wam.ratio, self.wam.n_semantic
            ));
        }
        if self.verifier.k > self.wam.horizon {
            return bad(format!("k={} exceeds H={}", self.verifier.k, self.wam.horizon));
        }
        for p in &self.benchmark.policies {
            p.validate(self.wam.horizon).map_err(|e| PipelineError::Schema(e.to_string()))?;
            if let ExecPolicy::Adaptive { k, .. } = p {
                if *k != self.verifier.k {
                    return bad(format!("adaptive policy k={k} differs from verifier k={}", self.verifier.k));
                }
            }
        }
        Ok(())
    }

    /// Config of the verifier variant trained for `ablation`.
    pub fn verifier_for(&self, ablation: Ablation) -> VerifierConfig {
        VerifierConfig { ablation, ..self.verifier.clone() }
    }

    fn hash_parts(parts: &[serde_json::Value]) -> String {
        let text = serde_json::to_string(parts).expect("hash input serializes");
        crate::sha256_hex(text.as_bytes())
    }

    pub fn demos_hash(&self) -> String {
        Self::hash_parts(&[
            serde_json::json!(self.version),
            serde_json::to_value(self.env).expect("serializes"),
            serde_json::to_value(self.expert).expect("serializes"),
            serde_json::to_value(&self.demos).expect("serializes"),
        ])
    }

    pub fn wam_hash(&self) -> String {
        Self::hash_parts(&[
            serde_json::json!(self.demos_hash()),
            serde_json::json!(self.seed),
            serde_json::to_value(&self.wam).expect("serializes"),
            serde_json::to_value(&self.wam_train).expect("serializes"),
        ])
    }

    pub fn verdata_hash(&self) -> String {
        Self::hash_parts(&[
            serde_json::json!(self.wam_hash()),
            serde_json::json!(self.verifier.k),
            serde_json::to_value(&self.verdata).expect("serializes"),
        ])
    }

    pub fn verifier_hash(&self, ablation: Ablation) -> String {
        Self::hash_parts(&[
            serde_json::json!(self.verdata_hash()),
            serde_json::to_value(self.verifier_for(ablation)).expect("serializes"),
            serde_json::to_value(&self.verifier_train).expect("serializes"),
        ])
    }

    pub fn benchmark_hash(&self, ablation: Ablation) -> String {
        Self::hash_parts(&[serde_json::json!(self.verifier_hash(ablation)), serde_json::to_value(&self.benchmark).expect("serializes")])
    }
}
