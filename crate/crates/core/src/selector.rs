//! Follow-the-awake-leader (FTAL) and awake-upper-estimated-reward (AUER)
//! selection over a finite policy set.
//!
//! Each iteration first re-estimates the feasible set from running means of
//! simulated discounted costs (one cost rollout per policy), then treats the
//! estimated-feasible policies as the awake experts/arms:
//!
//! * FTAL picks the awake policy with the best value sample mean and then
//!   simulates every awake policy once.
//! * AUER picks the awake policy maximizing `mean + sqrt(8 ln n / tau)` and
//!   simulates only that policy.
//!
//! In both, an awake policy that was never value-simulated is picked first
//! (lowest index), ties go to the lowest index, and an empty feasible set
//! falls back to policy 0 with the iteration flagged infeasible.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CmdpModel, PolicySet, PolicyTable};
use crate::rng::{Purpose, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ftal,
    Auer,
}

impl Algorithm {
    pub const ALL: [Algorithm; 2] = [Algorithm::Ftal, Algorithm::Auer];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ftal => "ftal",
            Algorithm::Auer => "auer",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ftal" => Ok(Algorithm::Ftal),
            "auer" => Ok(Algorithm::Auer),
            other => Err(Error::Precondition(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// Folds one more sample into a running mean; `count_after` includes it.
pub fn update_running_mean(prev_mean: f64, count_after: u64, sample: f64) -> f64 {
    debug_assert!(count_after >= 1);
    let n = count_after as f64;
    ((n - 1.0) * prev_mean + sample) / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorState {
    /// Index of the next iteration to run, starting at 1.
    pub n: u64,
    cost_mean: Vec<f64>,
    value_mean: Vec<f64>,
    tau: Vec<u64>,
    feasible_now: Vec<usize>,
}

impl SelectorState {
    pub fn new(num_policies: usize) -> Self {
        Self {
            n: 1,
            cost_mean: vec![0.0; num_policies],
            value_mean: vec![0.0; num_policies],
            tau: vec![0; num_policies],
            feasible_now: Vec::new(),
        }
    }

    /// Builds a state from explicit statistics, e.g. for testing selection rules.
    pub fn from_parts(
        n: u64,
        cost_mean: Vec<f64>,
        value_mean: Vec<f64>,
        tau: Vec<u64>,
        feasible_now: Vec<usize>,
    ) -> Self {
        assert_eq!(cost_mean.len(), value_mean.len());
        assert_eq!(cost_mean.len(), tau.len());
        Self {
            n,
            cost_mean,
            value_mean,
            tau,
            feasible_now,
        }
    }

    pub fn num_policies(&self) -> usize {
        self.tau.len()
    }

    pub fn cost_means(&self) -> &[f64] {
        &self.cost_mean
    }

    pub fn cost_mean(&self, policy: usize) -> f64 {
        self.cost_mean[policy]
    }

    /// `None` until the policy has been value-simulated at least once.
    pub fn value_mean(&self, policy: usize) -> Option<f64> {
        (self.tau[policy] > 0).then(|| self.value_mean[policy])
    }

    pub fn tau(&self) -> &[u64] {
        &self.tau
    }

    pub fn feasible_now(&self) -> &[usize] {
        &self.feasible_now
    }

    fn record_value(&mut self, policy: usize, sample: f64) {
        self.tau[policy] += 1;
        self.value_mean[policy] = update_running_mean(self.value_mean[policy], self.tau[policy], sample);
    }
}

/// Estimated feasible set: policies whose cost mean is at most `k`.
pub fn estimate_feasible_set(state: &SelectorState, k: f64) -> Vec<usize> {
    state
        .cost_mean
        .iter()
        .enumerate()
        .filter(|(_, &c)| c <= k)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub policy: usize,
    /// The feasible set was empty and `policy` is the fallback.
    pub infeasible: bool,
}

fn select_by<F>(state: &SelectorState, index: F) -> Selection
where
    F: Fn(usize) -> f64,
{
    let awake = &state.feasible_now;
    if awake.is_empty() {
        return Selection {
            policy: 0,
            infeasible: true,
        };
    }
    if let Some(&p) = awake.iter().filter(|&&p| state.tau[p] == 0).min() {
        return Selection {
            policy: p,
            infeasible: false,
        };
    }
    let mut best = awake[0];
    let mut best_index = index(best);
    for &p in &awake[1..] {
        let v = index(p);
        if v > best_index || (v == best_index && p < best) {
            best = p;
            best_index = v;
        }
    }
    Selection {
        policy: best,
        infeasible: false,
    }
}

pub fn ftal_select(state: &SelectorState) -> Selection {
    select_by(state, |p| state.value_mean[p])
}

/// At `n = 1` every awake arm is untried, so the `ln n = 0` bonus is never
/// evaluated there.
pub fn auer_select(state: &SelectorState) -> Selection {
    let log_n = (state.n as f64).ln();
    select_by(state, |p| {
        state.value_mean[p] + (8.0 * log_n / state.tau[p] as f64).sqrt()
    })
}

/// One row of a run trace.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub n: u64,
    pub feasible: Vec<usize>,
    pub chosen: usize,
    /// Value mean of the chosen policy after this iteration's updates.
    pub chosen_value_mean: Option<f64>,
    pub infeasible: bool,
}

fn cost_step(state: &mut SelectorState, tables: &[PolicyTable<'_>], k: f64, horizon: usize, streams: &Streams) {
    let n = state.n;
    for (p, table) in tables.iter().enumerate() {
        let sample = table.rollout(horizon, &mut streams.stream(Purpose::CostRollout, p, n));
        state.cost_mean[p] = update_running_mean(state.cost_mean[p], n, sample.cost_sum);
    }
    state.feasible_now = estimate_feasible_set(state, k);
}

fn value_sample(table: &PolicyTable<'_>, policy: usize, n: u64, horizon: usize, streams: &Streams) -> f64 {
    table
        .rollout(horizon, &mut streams.stream(Purpose::ValueRollout, policy, n))
        .value_sum
}

fn finish(state: &mut SelectorState, sel: Selection) -> IterationRecord {
    let rec = IterationRecord {
        n: state.n,
        feasible: state.feasible_now.clone(),
        chosen: sel.policy,
        chosen_value_mean: state.value_mean(sel.policy),
        infeasible: sel.infeasible,
    };
    state.n += 1;
    rec
}

/// One FTAL iteration: cost update, feasible-set estimate, selection, then a
/// value rollout for every awake policy.
pub fn ftal_iteration(
    state: &mut SelectorState,
    tables: &[PolicyTable<'_>],
    k: f64,
    horizon: usize,
    streams: &Streams,
) -> IterationRecord {
    cost_step(state, tables, k, horizon, streams);
    let sel = ftal_select(state);
    let n = state.n;
    for i in 0..state.feasible_now.len() {
        let p = state.feasible_now[i];
        let v = value_sample(&tables[p], p, n, horizon, streams);
        state.record_value(p, v);
    }
    finish(state, sel)
}

/// One AUER iteration: as FTAL, but only the chosen policy is value-simulated.
pub fn auer_iteration(
    state: &mut SelectorState,
    tables: &[PolicyTable<'_>],
    k: f64,
    horizon: usize,
    streams: &Streams,
) -> IterationRecord {
    cost_step(state, tables, k, horizon, streams);
    let sel = auer_select(state);
    if !sel.infeasible {
        let v = value_sample(&tables[sel.policy], sel.policy, state.n, horizon, streams);
        state.record_value(sel.policy, v);
    }
    finish(state, sel)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub k: f64,
    pub iterations: u64,
    pub horizon: usize,
    pub seed: u64,
    pub replication: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub config: RunConfig,
    pub num_policies: usize,
    pub records: Vec<IterationRecord>,
    pub terminal: SelectorState,
}

/// Runs `iterations` rounds of the configured algorithm. Streams are keyed by
/// iteration, so a shorter run is exactly a prefix of a longer one.
pub fn run(model: &CmdpModel, policies: &PolicySet, config: &RunConfig) -> Result<RunTrace> {
    if config.iterations < 1 {
        return Err(Error::Precondition("N must be at least 1".into()));
    }
    if config.horizon < 1 {
        return Err(Error::Precondition("H must be at least 1".into()));
    }
    if !config.k.is_finite() {
        return Err(Error::Precondition(format!("K must be finite, got {}", config.k)));
    }
    model.validate().into_result()?;
    policies.validate_for(model)?;
    let tables = policies.tables(model)?;
    let streams = Streams::new(config.seed, config.replication);
    let mut state = SelectorState::new(policies.len());
    let step = match config.algorithm {
        Algorithm::Ftal => ftal_iteration,
        Algorithm::Auer => auer_iteration,
    };
    let records = (0..config.iterations)
        .map(|_| step(&mut state, &tables, config.k, config.horizon, &streams))
        .collect();
    Ok(RunTrace {
        config: config.clone(),
        num_policies: policies.len(),
        records,
        terminal: state,
    })
}

impl RunTrace {
    pub fn chosen_sequence(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.chosen).collect()
    }

    /// Estimated feasible set after the last iteration.
    pub fn final_feasible(&self) -> &[usize] {
        &self.terminal.feasible_now
    }

    pub const CSV_HEADER: [&'static str; 5] =
        ["n", "feasible", "chosen", "chosen_value_mean", "infeasible"];

    /// Writes one row per iteration. `feasible` is a 0/1 string with policy 0 first.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::CSV_HEADER)?;
        for r in &self.records {
            let mut mask = vec![b'0'; self.num_policies];
            for &p in &r.feasible {
                mask[p] = b'1';
            }
            out.write_record([
                r.n.to_string(),
                String::from_utf8(mask).expect("ascii"),
                r.chosen.to_string(),
                r.chosen_value_mean.map(|v| v.to_string()).unwrap_or_default(),
                u8::from(r.infeasible).to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<trace csv>", e))?;
        Ok(())
    }
}

/// Checks simulation bookkeeping against the trace: under FTAL each policy's
/// count equals the iterations it was awake; under AUER the counts sum to the
/// iterations with a nonempty feasible set.
pub fn accounting_holds(trace: &RunTrace) -> bool {
    let tau = trace.terminal.tau();
    match trace.config.algorithm {
        Algorithm::Ftal => (0..trace.num_policies).all(|p| {
            let awake = trace.records.iter().filter(|r| r.feasible.contains(&p)).count();
            tau[p] == awake as u64
        }),
        Algorithm::Auer => {
            let nonempty = trace.records.iter().filter(|r| !r.feasible.is_empty()).count();
            tau.iter().sum::<u64>() == nonempty as u64
        }
    }
}

/// True iff the estimated feasible set was empty at every one of the last
/// `window` iterations.
pub fn insolvability_check(records: &[IterationRecord], window: usize) -> Result<bool> {
    if window == 0 || window > records.len() {
        return Err(Error::Precondition(format!(
            "window {window} must lie in 1..={}",
            records.len()
        )));
    }
    Ok(records[records.len() - window..]
        .iter()
        .all(|r| r.feasible.is_empty()))
}
