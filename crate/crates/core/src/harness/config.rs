use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::generate::{generate_instance, random_policies, InstanceSpec};
use crate::model::{CmdpModel, PolicySet};
use crate::rng::{Purpose, StreamKey};
use crate::selector::Algorithm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyGenerator {
    pub count: usize,
    pub seed: u64,
}

fn default_algorithms() -> Vec<Algorithm> {
    Algorithm::ALL.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Replicated experiment over a grid of iteration counts and horizons.
///
/// The instance comes either from `model` (plus `policies` or
/// `policy_generator`) or from an inline `instance` spec. Relative paths are
/// resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub policies: Option<PathBuf>,
    #[serde(default)]
    pub policy_generator: Option<PolicyGenerator>,
    #[serde(default)]
    pub instance: Option<InstanceSpec>,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    pub k: f64,
    pub n_schedule: Vec<u64>,
    /// Extra regret sample points at `ceil(1/min_gap) * m` for each listed `m`.
    #[serde(default)]
    pub gap_multiples: Vec<u64>,
    pub h_schedule: Vec<usize>,
    pub epsilons: Vec<f64>,
    /// Slack in the regret bounds; `1/N` when unset.
    #[serde(default)]
    pub delta: Option<f64>,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub write_traces: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.model, &mut c.policies].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if c.output_dir.is_relative() {
            c.output_dir = base.join(&c.output_dir);
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(format!("experiment config: {m}")));
        if self.n_schedule.is_empty() || self.h_schedule.is_empty() || self.epsilons.is_empty() {
            return bad("N, H and epsilon schedules must be nonempty".into());
        }
        if self.algorithms.is_empty() {
            return bad("no algorithms selected".into());
        }
        if self.replications < 1 {
            return bad("replications must be at least 1".into());
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad(format!("K must be positive, got {}", self.k));
        }
        if self.n_schedule.contains(&0) || self.gap_multiples.contains(&0) {
            return bad("iteration counts must be positive".into());
        }
        if self.h_schedule.contains(&0) {
            return bad("horizons must be positive".into());
        }
        if self.delta.is_some_and(|d| !(d >= 0.0)) {
            return bad("delta must be nonnegative".into());
        }
        match (&self.model, &self.instance) {
            (Some(_), None) => {
                if self.policies.is_some() == self.policy_generator.is_some() {
                    return bad("give exactly one of policies or policy_generator".into());
                }
            }
            (None, Some(_)) => {
                if self.policies.is_some() || self.policy_generator.is_some() {
                    return bad("an inline instance brings its own policies".into());
                }
            }
            _ => return bad("give exactly one of model or instance".into()),
        }
        Ok(())
    }

    pub fn load_instance(&self) -> Result<(CmdpModel, PolicySet)> {
        if let Some(spec) = &self.instance {
            let inst = generate_instance(spec)?;
            return Ok((inst.model, inst.policies));
        }
        let model = CmdpModel::load(self.model.as_ref().expect("validated"))?;
        let policies = match (&self.policies, &self.policy_generator) {
            (Some(path), _) => PolicySet::load(path)?,
            (None, Some(g)) => {
                let mut rng = StreamKey::new(g.seed, 0, Purpose::Generation, 1, 0).stream();
                random_policies(&model, g.count, &mut rng)?
            }
            (None, None) => unreachable!("validated"),
        };
        policies.validate_for(&model)?;
        Ok((model, policies))
    }
}
