//! Finite constrained MDP with disturbance-driven dynamics.
//!
//! Transitions, rewards and costs are piecewise-constant functions of a
//! disturbance `w` drawn uniformly from `[0, 1)`: for each state/action pair
//! the unit interval is cut into half-open segments, and each segment carries
//! a next state, a one-period reward and a one-period cost. Segment lengths
//! are therefore transition probabilities, which is what lets the exact
//! oracle evaluate policies by linear algebra.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ActionId = u32;
pub type StateId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSegment {
    pub lo: f64,
    pub hi: f64,
    pub next_state: StateId,
    pub reward: f64,
    pub cost: f64,
}

impl DisturbanceSegment {
    pub fn new(lo: f64, hi: f64, next_state: StateId, reward: f64, cost: f64) -> Self {
        Self {
            lo,
            hi,
            next_state,
            reward,
            cost,
        }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, w: f64) -> bool {
        self.lo <= w && w < self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmdpModel {
    pub num_states: usize,
    /// `actions[x]` is the admissible set A(x).
    pub actions: Vec<Vec<ActionId>>,
    /// `dynamics[x][k]` is the segment table of `(x, actions[x][k])`.
    pub dynamics: Vec<Vec<Vec<DisturbanceSegment>>>,
    pub gamma: f64,
    pub beta: f64,
    pub r_max: f64,
    pub c_max: f64,
    pub initial_state: StateId,
}

/// One broken model invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoStates,
    ShapeMismatch { table: &'static str, len: usize },
    EmptyActionSet { state: StateId },
    DuplicateAction { state: StateId, action: ActionId },
    NotPartition { state: StateId, action: ActionId },
    EmptySegment { state: StateId, action: ActionId, index: usize },
    NextStateOutOfRange { state: StateId, action: ActionId, next_state: StateId },
    RewardOutOfRange { state: StateId, action: ActionId, reward: f64 },
    CostOutOfRange { state: StateId, action: ActionId, cost: f64 },
    Gamma(f64),
    Beta(f64),
    RewardBound(f64),
    CostBound(f64),
    InitialState(StateId),
}

impl Violation {
    /// Short invariant name, stable across releases.
    pub fn invariant(&self) -> &'static str {
        match self {
            Violation::NoStates => "num_states",
            Violation::ShapeMismatch { .. } => "shape",
            Violation::EmptyActionSet { .. } => "nonempty_actions",
            Violation::DuplicateAction { .. } => "distinct_actions",
            Violation::NotPartition { .. } => "partition",
            Violation::EmptySegment { .. } => "segment_order",
            Violation::NextStateOutOfRange { .. } => "next_state",
            Violation::RewardOutOfRange { .. } => "reward_range",
            Violation::CostOutOfRange { .. } => "cost_range",
            Violation::Gamma(_) => "gamma",
            Violation::Beta(_) => "beta",
            Violation::RewardBound(_) => "r_max",
            Violation::CostBound(_) => "c_max",
            Violation::InitialState(_) => "initial_state",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoStates => write!(f, "model must have at least one state"),
            Violation::ShapeMismatch { table, len } => {
                write!(f, "{table} has {len} entries, expected one per state")
            }
            Violation::EmptyActionSet { state } => write!(f, "A(x) is empty for state {state}"),
            Violation::DuplicateAction { state, action } => {
                write!(f, "action {action} listed twice in A({state})")
            }
            Violation::NotPartition { state, action } => write!(
                f,
                "segments do not partition [0,1) (state {state}, action {action})"
            ),
            Violation::EmptySegment {
                state,
                action,
                index,
            } => write!(
                f,
                "segment {index} of (state {state}, action {action}) has lo >= hi"
            ),
            Violation::NextStateOutOfRange {
                state,
                action,
                next_state,
            } => write!(
                f,
                "next_state {next_state} out of range (state {state}, action {action})"
            ),
            Violation::RewardOutOfRange {
                state,
                action,
                reward,
            } => write!(
                f,
                "reward {reward} outside [0, r_max] (state {state}, action {action})"
            ),
            Violation::CostOutOfRange {
                state,
                action,
                cost,
            } => write!(
                f,
                "cost {cost} outside [0, c_max] (state {state}, action {action})"
            ),
            Violation::Gamma(g) => write!(f, "gamma must lie in (0,1), got {g}"),
            Violation::Beta(b) => write!(f, "beta must lie in (0,1), got {b}"),
            Violation::RewardBound(r) => write!(f, "r_max must be finite and >= 0, got {r}"),
            Violation::CostBound(c) => write!(f, "c_max must be finite and >= 0, got {c}"),
            Violation::InitialState(x) => write!(f, "initial_state {x} out of range"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidModel(self.violations))
        }
    }
}

/// Result of one step of the system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next_state: StateId,
    pub reward: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSample {
    pub value_sum: f64,
    pub cost_sum: f64,
    pub horizon: usize,
}

fn open_unit(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl CmdpModel {
    /// Checks every model invariant and reports all violations found.
    pub fn validate(&self) -> ValidationReport {
        let mut v = Vec::new();
        if self.num_states == 0 {
            v.push(Violation::NoStates);
        }
        if !open_unit(self.gamma) {
            v.push(Violation::Gamma(self.gamma));
        }
        if !open_unit(self.beta) {
            v.push(Violation::Beta(self.beta));
        }
        if !(self.r_max.is_finite() && self.r_max >= 0.0) {
            v.push(Violation::RewardBound(self.r_max));
        }
        if !(self.c_max.is_finite() && self.c_max >= 0.0) {
            v.push(Violation::CostBound(self.c_max));
        }
        if self.initial_state >= self.num_states {
            v.push(Violation::InitialState(self.initial_state));
        }
        if self.actions.len() != self.num_states {
            v.push(Violation::ShapeMismatch {
                table: "actions",
                len: self.actions.len(),
            });
        }
        if self.dynamics.len() != self.num_states {
            v.push(Violation::ShapeMismatch {
                table: "dynamics",
                len: self.dynamics.len(),
            });
        }
        if !v.iter().any(|x| matches!(x, Violation::ShapeMismatch { .. })) {
            for x in 0..self.num_states {
                self.validate_state(x, &mut v);
            }
        }
        ValidationReport { violations: v }
    }

    fn validate_state(&self, x: StateId, v: &mut Vec<Violation>) {
        let acts = &self.actions[x];
        if acts.is_empty() {
            v.push(Violation::EmptyActionSet { state: x });
        }
        let mut seen = HashSet::new();
        for &a in acts {
            if !seen.insert(a) {
                v.push(Violation::DuplicateAction { state: x, action: a });
            }
        }
        if self.dynamics[x].len() != acts.len() {
            v.push(Violation::ShapeMismatch {
                table: "dynamics row",
                len: self.dynamics[x].len(),
            });
            return;
        }
        for (&a, segs) in acts.iter().zip(&self.dynamics[x]) {
            let mut partition = !segs.is_empty()
                && segs[0].lo == 0.0
                && segs[segs.len() - 1].hi == 1.0
                && segs.windows(2).all(|p| p[0].hi == p[1].lo);
            for (i, s) in segs.iter().enumerate() {
                if !(s.lo < s.hi) {
                    partition = false;
                    v.push(Violation::EmptySegment {
                        state: x,
                        action: a,
                        index: i,
                    });
                }
                if s.next_state >= self.num_states {
                    v.push(Violation::NextStateOutOfRange {
                        state: x,
                        action: a,
                        next_state: s.next_state,
                    });
                }
                if !(s.reward >= 0.0 && s.reward <= self.r_max) {
                    v.push(Violation::RewardOutOfRange {
                        state: x,
                        action: a,
                        reward: s.reward,
                    });
                }
                if !(s.cost >= 0.0 && s.cost <= self.c_max) {
                    v.push(Violation::CostOutOfRange {
                        state: x,
                        action: a,
                        cost: s.cost,
                    });
                }
            }
            if !partition {
                v.push(Violation::NotPartition { state: x, action: a });
            }
        }
    }

    /// Rescales rewards by `(1-gamma)/r_max` and costs by `(1-beta)/c_max`,
    /// after which every discounted sample lies in `[0, 1]`. A zero bound
    /// leaves the corresponding table untouched.
    pub fn normalize(&self) -> CmdpModel {
        let mut out = self.clone();
        let rs = if self.r_max > 0.0 {
            out.r_max = 1.0 - self.gamma;
            Some((1.0 - self.gamma) / self.r_max)
        } else {
            None
        };
        let cs = if self.c_max > 0.0 {
            out.c_max = 1.0 - self.beta;
            Some((1.0 - self.beta) / self.c_max)
        } else {
            None
        };
        for seg in out.dynamics.iter_mut().flatten().flatten() {
            if let Some(s) = rs {
                // Clamp guards the bound against the last ulp of rounding.
                seg.reward = (seg.reward * s).min(out.r_max);
            }
            if let Some(s) = cs {
                seg.cost = (seg.cost * s).min(out.c_max);
            }
        }
        out
    }

    /// Segment table of `(state, action)`.
    pub fn segments(&self, state: StateId, action: ActionId) -> Result<&[DisturbanceSegment]> {
        let k = self
            .actions
            .get(state)
            .and_then(|acts| acts.iter().position(|&a| a == action))
            .ok_or(Error::InadmissibleAction { state, action })?;
        Ok(&self.dynamics[state][k])
    }

    pub fn step(&self, state: StateId, action: ActionId, w: f64) -> Result<Transition> {
        Ok(lookup(self.segments(state, action)?, w))
    }

    /// Resolves a policy into per-state segment tables for fast rollouts.
    pub fn table<'m>(&'m self, policy: &Policy) -> Result<PolicyTable<'m>> {
        if policy.action_of.len() != self.num_states {
            return Err(Error::InvalidPolicySet(format!(
                "policy assigns {} states, model has {}",
                policy.action_of.len(),
                self.num_states
            )));
        }
        let rows = policy
            .action_of
            .iter()
            .enumerate()
            .map(|(x, &a)| self.segments(x, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(PolicyTable { model: self, rows })
    }

    /// One sample of the `horizon`-step discounted reward and cost sums from
    /// the initial state. Consumes exactly `horizon` draws from `rng`.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        policy: &Policy,
        horizon: usize,
        rng: &mut R,
    ) -> Result<RolloutSample> {
        Ok(self.table(policy)?.rollout(horizon, rng))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: CmdpModel = serde_json::from_str(text)?;
        m.validate().into_result()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

fn lookup(segs: &[DisturbanceSegment], w: f64) -> Transition {
    // First segment whose right end exceeds w; segments are ordered and
    // the last one ends at 1, so w in [0,1) always lands somewhere.
    let i = segs.partition_point(|s| s.hi <= w).min(segs.len() - 1);
    let s = &segs[i];
    Transition {
        next_state: s.next_state,
        reward: s.reward,
        cost: s.cost,
    }
}

/// A policy bound to a model: `rows[x]` is the segment table of `(x, pi(x))`.
#[derive(Debug, Clone)]
pub struct PolicyTable<'m> {
    model: &'m CmdpModel,
    rows: Vec<&'m [DisturbanceSegment]>,
}

impl<'m> PolicyTable<'m> {
    pub fn rows(&self) -> &[&'m [DisturbanceSegment]] {
        &self.rows
    }

    pub fn step(&self, state: StateId, w: f64) -> Transition {
        lookup(self.rows[state], w)
    }

    pub fn rollout<R: Rng + ?Sized>(&self, horizon: usize, rng: &mut R) -> RolloutSample {
        let (gamma, beta) = (self.model.gamma, self.model.beta);
        let mut x = self.model.initial_state;
        let (mut gt, mut bt) = (1.0, 1.0);
        let (mut value_sum, mut cost_sum) = (0.0, 0.0);
        for _ in 0..horizon {
            let w: f64 = rng.gen();
            let t = self.step(x, w);
            value_sum += gt * t.reward;
            cost_sum += bt * t.cost;
            gt *= gamma;
            bt *= beta;
            x = t.next_state;
        }
        RolloutSample {
            value_sum,
            cost_sum,
            horizon,
        }
    }
}

/// Deterministic stationary policy: `action_of[x]` is the action taken in `x`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy {
    pub action_of: Vec<ActionId>,
}

impl Policy {
    pub fn new(action_of: Vec<ActionId>) -> Self {
        Self { action_of }
    }

    pub fn is_valid_for(&self, model: &CmdpModel) -> bool {
        self.action_of.len() == model.num_states
            && self
                .action_of
                .iter()
                .zip(&model.actions)
                .all(|(a, acts)| acts.contains(a))
    }
}

/// Indexed, nonempty collection of distinct policies. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicySetFile", into = "PolicySetFile")]
pub struct PolicySet {
    policies: Vec<Policy>,
}

#[derive(Serialize, Deserialize)]
struct PolicySetFile {
    policies: Vec<Policy>,
}

impl TryFrom<PolicySetFile> for PolicySet {
    type Error = Error;

    fn try_from(f: PolicySetFile) -> Result<Self> {
        PolicySet::new(f.policies)
    }
}

impl From<PolicySet> for PolicySetFile {
    fn from(p: PolicySet) -> Self {
        PolicySetFile {
            policies: p.policies,
        }
    }
}

impl PolicySet {
    pub fn new(policies: Vec<Policy>) -> Result<Self> {
        if policies.is_empty() {
            return Err(Error::InvalidPolicySet("policy set is empty".into()));
        }
        let mut seen = HashSet::new();
        for (i, p) in policies.iter().enumerate() {
            if !seen.insert(p) {
                return Err(Error::InvalidPolicySet(format!(
                    "policy {i} duplicates an earlier policy"
                )));
            }
        }
        Ok(Self { policies })
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn get(&self, i: usize) -> &Policy {
        &self.policies[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Policy> {
        self.policies.iter()
    }

    pub fn validate_for(&self, model: &CmdpModel) -> Result<()> {
        for (i, p) in self.policies.iter().enumerate() {
            if !p.is_valid_for(model) {
                return Err(Error::InvalidPolicySet(format!(
                    "policy {i} is not admissible for the model"
                )));
            }
        }
        Ok(())
    }

    pub fn tables<'m>(&self, model: &'m CmdpModel) -> Result<Vec<PolicyTable<'m>>> {
        self.policies.iter().map(|p| model.table(p)).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy set serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

impl<'a> IntoIterator for &'a PolicySet {
    type Item = &'a Policy;
    type IntoIter = std::slice::Iter<'a, Policy>;

    fn into_iter(self) -> Self::IntoIter {
        self.policies.iter()
    }
}
