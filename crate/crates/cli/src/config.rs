//! Run configuration, loaded from a JSON file.

use std::path::{Path, PathBuf};

use metainfluence::experiments::DegradationConfig;
use metainfluence::{
    Activation, HessianMethod, Keep, Learner, MlpSpec, SignConvention, TaskDistributionSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

/// Rotated copies added to every task of a taskset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub copies: usize,
    pub transform_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksetConfig {
    pub regular: TaskDistributionSpec,
    pub regular_count: usize,
    #[serde(default)]
    pub noise: Option<TaskDistributionSpec>,
    #[serde(default)]
    pub noise_count: usize,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub mix_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HessianConfig {
    pub method: HessianMethod,
    /// Directions retained by the pseudo-inverse.
    pub keep: Keep,
    /// Column budget of the Gauss-Newton factor.
    pub capacity: usize,
    pub dense_cap: usize,
}

impl Default for HessianConfig {
    fn default() -> Self {
        Self {
            method: HessianMethod::Exact,
            keep: Keep::Threshold(1e-6),
            capacity: 1024,
            dense_cap: metainfluence::hessian::DEFAULT_DENSE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfluenceConfig {
    pub sign: SignConvention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationExperiment {
    #[serde(flatten)]
    pub grid: DegradationConfig,
    /// Also run against a second inverse of the stored Hessian.
    #[serde(default)]
    pub baseline_keep: Option<Keep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactVsGnExperiment {
    pub keeps: Vec<usize>,
    pub capacities: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentsConfig {
    pub self_rank: bool,
    pub degradation: Option<DegradationExperiment>,
    pub distribution: bool,
    pub exact_vs_gn: Option<ExactVsGnExperiment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the initial meta-parameters.
    pub seed: u64,
    pub model: ModelConfig,
    pub learner: Learner,
    pub train_tasks: TasksetConfig,
    #[serde(default)]
    pub test_tasks: Option<TasksetConfig>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub hessian: HessianConfig,
    #[serde(default)]
    pub influence: InfluenceConfig,
    #[serde(default)]
    pub experiments: ExperimentsConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn check_taskset(name: &str, t: &TasksetConfig, dim: usize, classes: Option<usize>) -> Result<(), UsageError> {
    let mut specs = vec![&t.regular];
    if let Some(n) = &t.noise {
        specs.push(n);
    } else if t.noise_count > 0 {
        return Err(UsageError(format!("{name}: noise_count set without a noise distribution")));
    }
    for s in specs {
        s.validate().map_err(|e| UsageError(format!("{name}: {e}")))?;
        if s.dim() != dim {
            return Err(UsageError(format!(
                "{name}: feature dimension {} does not match the model input {dim}",
                s.dim()
            )));
        }
        if let Some(c) = classes {
            if s.n_ways() != c {
                return Err(UsageError(format!(
                    "{name}: {} classes per task but the model has {c} outputs",
                    s.n_ways()
                )));
            }
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| UsageError(format!("bad config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn mlp_spec(&self) -> Result<MlpSpec, UsageError> {
        MlpSpec::new(self.model.layer_widths.clone(), self.model.activation).map_err(|e| UsageError(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let spec = self.mlp_spec()?;
        let classes = match self.learner {
            Learner::Maml { .. } => Some(spec.output_dim()),
            Learner::ProtoNet => None,
        };
        check_taskset("train_tasks", &self.train_tasks, spec.input_dim(), classes)?;
        if let Some(t) = &self.test_tasks {
            check_taskset("test_tasks", t, spec.input_dim(), classes)?;
        }
        if self.hessian.capacity == 0 {
            return Err(UsageError("hessian.capacity must be positive".into()));
        }
        Ok(())
    }
}
