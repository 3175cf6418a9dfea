//! Random instance generation with optional rejection on oracle properties.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CmdpModel, DisturbanceSegment, Policy, PolicySet};
use crate::oracle::OracleReport;
use crate::rng::{Purpose, StreamKey};

fn default_attempts() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub num_states: usize,
    pub actions_per_state: usize,
    pub segments_per_action: usize,
    pub gamma: f64,
    pub beta: f64,
    pub num_policies: usize,
    pub seed: u64,
    /// Reject instances until some policy is 0-feasible for this budget `K`.
    #[serde(default)]
    pub force_feasible: Option<f64>,
    /// Reject instances until every pair of exact values differs by at least this margin.
    #[serde(default)]
    pub distinct_values: Option<f64>,
    /// With `force_feasible`, also reject until every exact cost is at least
    /// this far from `K`.
    #[serde(default)]
    pub cost_margin: Option<f64>,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

impl InstanceSpec {
    pub fn new(
        num_states: usize,
        actions_per_state: usize,
        segments_per_action: usize,
        num_policies: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_states,
            actions_per_state,
            segments_per_action,
            gamma: 0.8,
            beta: 0.8,
            num_policies,
            seed,
            force_feasible: None,
            distinct_values: None,
            cost_margin: None,
            max_attempts: default_attempts(),
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Precondition(format!("instance spec: {m}")));
        if self.num_states == 0
            || self.actions_per_state == 0
            || self.segments_per_action == 0
            || self.num_policies == 0
            || self.max_attempts == 0
        {
            return bad("all counts must be positive");
        }
        if self.distinct_values.is_some_and(|m| !(m >= 0.0)) || self.cost_margin.is_some_and(|m| !(m >= 0.0)) {
            return bad("margins must be nonnegative");
        }
        if self.cost_margin.is_some() && self.force_feasible.is_none() {
            return bad("cost_margin requires force_feasible");
        }
        let maps = (self.actions_per_state as f64).powi(self.num_states as i32);
        if (self.num_policies as f64) > maps {
            return bad("more policies requested than distinct action maps exist");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub model: CmdpModel,
    pub policies: PolicySet,
    /// Zero-based index of the accepted attempt.
    pub attempt: usize,
}

impl Instance {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(dir.join("model.json"))?;
        self.policies.save(dir.join("policies.json"))
    }
}

fn random_model<R: Rng>(spec: &InstanceSpec, rng: &mut R) -> CmdpModel {
    let n = spec.num_states;
    let m = spec.segments_per_action;
    let actions: Vec<Vec<u32>> = (0..n).map(|_| (0..spec.actions_per_state as u32).collect()).collect();
    let dynamics = (0..n)
        .map(|_| {
            (0..spec.actions_per_state)
                .map(|_| {
                    // Stick breaking: m-1 sorted uniform cut points, redrawn on ties.
                    let cuts = loop {
                        let mut c: Vec<f64> = (0..m - 1).map(|_| rng.gen::<f64>()).collect();
                        c.sort_by(f64::total_cmp);
                        c.insert(0, 0.0);
                        c.push(1.0);
                        if c.windows(2).all(|w| w[0] < w[1]) {
                            break c;
                        }
                    };
                    cuts.windows(2)
                        .map(|w| {
                            DisturbanceSegment::new(w[0], w[1], rng.gen_range(0..n), rng.gen(), rng.gen())
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    CmdpModel {
        num_states: n,
        actions,
        dynamics,
        gamma: spec.gamma,
        beta: spec.beta,
        r_max: 1.0,
        c_max: 1.0,
        initial_state: 0,
    }
    .normalize()
}

/// Draws `count` distinct policies uniformly over admissible action maps.
pub fn random_policies<R: Rng>(model: &CmdpModel, count: usize, rng: &mut R) -> Result<PolicySet> {
    let maps: f64 = model.actions.iter().map(|a| a.len() as f64).product();
    if count as f64 > maps {
        return Err(Error::Precondition(format!(
            "{count} policies requested but only {maps} action maps exist"
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p = Policy::new(
            model
                .actions
                .iter()
                .map(|acts| acts[rng.gen_range(0..acts.len())])
                .collect(),
        );
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    PolicySet::new(out)
}

fn rejection_reason(spec: &InstanceSpec, report: &OracleReport) -> Option<&'static str> {
    if let Some(k) = spec.force_feasible {
        if report.feasible_set(k, 0.0).is_empty() {
            return Some("no 0-feasible policy");
        }
        if let Some(margin) = spec.cost_margin {
            if report.costs().iter().any(|c| (c - k).abs() < margin) {
                return Some("a cost lies within cost_margin of K");
            }
        }
    }
    if let Some(margin) = spec.distinct_values {
        let v = report.values();
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                if (v[i] - v[j]).abs() < margin {
                    return Some("two policy values closer than the margin");
                }
            }
        }
    }
    None
}

/// Generates a normalized instance; deterministic in `spec`.
pub fn generate_instance(spec: &InstanceSpec) -> Result<Instance> {
    spec.check()?;
    let mut last = "";
    for attempt in 0..spec.max_attempts {
        let mut rng = StreamKey::new(spec.seed, attempt as u64, Purpose::Generation, 0, 0).stream();
        let model = random_model(spec, &mut rng);
        let policies = random_policies(&model, spec.num_policies, &mut rng)?;
        let report = OracleReport::build(&model, &policies, &[])?;
        match rejection_reason(spec, &report) {
            None => {
                return Ok(Instance {
                    model,
                    policies,
                    attempt,
                })
            }
            Some(reason) => last = reason,
        }
    }
    Err(Error::AttemptCapExceeded {
        attempts: spec.max_attempts,
        reason: last.to_string(),
    })
}
