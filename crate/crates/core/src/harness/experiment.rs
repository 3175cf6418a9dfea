//! Replicated experiment driver and CSV reports.
//!
//! For every `(algorithm, H)` cell and replication one run of length
//! `max N` is simulated; because streams are keyed by iteration, the state
//! after `N` iterations of that run is exactly what a run of length `N`
//! would produce, so every `N` in the schedule is read off the same trace.
//! Replications run in parallel and are collected in index order, so all
//! output is a pure function of the config.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::bounds::{
    gap_structure, rate_check, rate_constant, regret_bound_rhs, theorem1_bound, theorem2_bound,
    truncation_constants, MeanEstimate, RateCheck, RateModel,
};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::model::{CmdpModel, PolicySet};
use crate::oracle::OracleReport;
use crate::selector::{accounting_holds, run, Algorithm, RunConfig, RunTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichRow {
    pub epsilon: f64,
    pub n: u64,
    pub h: usize,
    pub replications: usize,
    pub frequency: MeanEstimate,
    /// Clamped sandwich bound; `None` when `epsilon <= alpha_H`.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub n: u64,
    pub h: usize,
    /// Frequency of the final choice being an exact 0-feasible optimum.
    pub frequency: MeanEstimate,
    /// Mean over replications of the clamped selection bound, where defined.
    pub theorem2_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretRow {
    pub algorithm: Algorithm,
    pub n: u64,
    pub h: usize,
    pub avg_best: f64,
    pub avg_chosen: f64,
    /// Regret across replications whose metric is defined.
    pub regret: MeanEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitRow {
    pub algorithm: Algorithm,
    pub h: usize,
    pub model: RateModel,
    pub outcome: std::result::Result<RateCheck, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsRow {
    pub n: u64,
    pub h: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub replications: usize,
    pub alpha_h: f64,
    pub r_h: f64,
    pub theorem1_raw: Option<f64>,
    pub theorem1: Option<f64>,
    pub rate_constant: f64,
    pub ftal_rhs: f64,
    pub auer_rhs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub oracle: Option<OracleReport>,
    pub sandwich: Vec<SandwichRow>,
    pub selection: Vec<SelectionRow>,
    pub regret: Vec<RegretRow>,
    pub fits: Vec<FitRow>,
    pub bounds: Vec<BoundsRow>,
    /// `(algorithm, H, replication, message)` for every failed run.
    pub failures: Vec<(Algorithm, usize, u64, String)>,
    /// Runs whose simulation counters disagree with their trace.
    pub accounting_violations: usize,
    pub runs: usize,
}

/// Per-replication measurements at every scheduled `N`.
struct Replication {
    /// Indexed `[epsilon][n_schedule]`.
    sandwich: Vec<Vec<bool>>,
    selection: Vec<bool>,
    theorem2: Vec<Vec<Option<f64>>>,
    /// Indexed like the regret points; `(avg_best, avg_chosen)` or `None`.
    regret: Vec<Option<(f64, f64)>>,
    accounting_ok: bool,
}

struct Cell<'a> {
    config: &'a ExperimentConfig,
    oracle: &'a OracleReport,
    model: &'a CmdpModel,
    policies: &'a PolicySet,
    h: usize,
    values_h: Vec<f64>,
    regret_points: Vec<u64>,
    n_max: u64,
}

impl Cell<'_> {
    fn measure(&self, trace: &RunTrace) -> Replication {
        let c = self.config;
        let k = c.k;
        let optimum = self.oracle.feasible_optimal(k);
        let values = self.oracle.values();
        let consts = truncation_constants(self.model, self.h);
        let at = |n: u64| &trace.records[n as usize - 1];
        let sandwich = c
            .epsilons
            .iter()
            .map(|&eps| {
                let lower = self.oracle.feasible_set(k, -eps);
                let upper = self.oracle.feasible_set(k, eps);
                c.n_schedule
                    .iter()
                    .map(|&n| {
                        let est = &at(n).feasible;
                        lower.iter().all(|p| est.contains(p)) && est.iter().all(|p| upper.contains(p))
                    })
                    .collect()
            })
            .collect();
        let selection = c
            .n_schedule
            .iter()
            .map(|&n| {
                let r = at(n);
                !r.infeasible && optimum.policies().contains(&r.chosen)
            })
            .collect();
        let theorem2 = c
            .epsilons
            .iter()
            .map(|&eps| {
                c.n_schedule
                    .iter()
                    .map(|&n| {
                        theorem2_bound(&values, &at(n).feasible, eps, consts, n)
                            .ok()
                            .map(|b| b.product.clamped)
                    })
                    .collect()
            })
            .collect();

        let mut regret = Vec::with_capacity(self.regret_points.len());
        let (mut best, mut chosen, mut counted) = (0.0, 0.0, 0usize);
        let mut next = self.regret_points.iter().peekable();
        for r in &trace.records {
            if !r.infeasible {
                best += r
                    .feasible
                    .iter()
                    .map(|&p| self.values_h[p])
                    .fold(f64::NEG_INFINITY, f64::max);
                chosen += self.values_h[r.chosen];
                counted += 1;
            }
            while next.peek() == Some(&&r.n) {
                next.next();
                regret.push((counted > 0).then(|| (best / counted as f64, chosen / counted as f64)));
            }
        }
        Replication {
            sandwich,
            selection,
            theorem2,
            regret,
            accounting_ok: accounting_holds(trace),
        }
    }
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs the full experiment in memory. Traces are written when
/// `write_traces` is set; see [`write_reports`] for the aggregate CSVs.
pub fn run_experiment_in_memory(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let (model, policies) = config.load_instance()?;
    let oracle = OracleReport::build(&model, &policies, &config.h_schedule)?;
    if config.write_traces {
        std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    }
    let mut out = ExperimentOutput::default();
    let r_count = config.replications;

    for &h in &config.h_schedule {
        let values_h = oracle.values_at(h)?;
        let gaps = gap_structure(&values_h, 0.0);
        let mut points: BTreeSet<u64> = config.n_schedule.iter().copied().collect();
        if let Some(t) = gaps.rate_threshold() {
            points.extend(config.gap_multiples.iter().map(|m| t.max(1) * m));
        }
        let regret_points: Vec<u64> = points.into_iter().collect();
        let n_max = *regret_points.last().expect("nonempty schedule");
        let cell = Cell {
            config,
            oracle: &oracle,
            model: &model,
            policies: &policies,
            h,
            values_h,
            regret_points,
            n_max,
        };
        let consts = truncation_constants(&model, h);

        for (ai, &algo) in config.algorithms.iter().enumerate() {
            let results: Vec<std::result::Result<Replication, String>> = (0..r_count as u64)
                .into_par_iter()
                .map(|r| {
                    let rc = RunConfig {
                        algorithm: algo,
                        k: config.k,
                        iterations: cell.n_max,
                        horizon: h,
                        seed: config.seed,
                        replication: r,
                    };
                    let trace = run(cell.model, cell.policies, &rc).map_err(|e| e.to_string())?;
                    if config.write_traces {
                        let path = config.output_dir.join(format!("trace_{algo}_h{h}_r{r}.csv"));
                        write_file(&path, |w| trace.write_csv(w)).map_err(|e| e.to_string())?;
                    }
                    Ok(cell.measure(&trace))
                })
                .collect();
            out.runs += results.len();
            let mut reps = Vec::with_capacity(results.len());
            for (r, res) in results.into_iter().enumerate() {
                match res {
                    Ok(rep) => {
                        if !rep.accounting_ok {
                            out.accounting_violations += 1;
                        }
                        reps.push(rep);
                    }
                    Err(msg) => out.failures.push((algo, h, r as u64, msg)),
                }
            }
            if reps.is_empty() {
                continue;
            }

            // The sandwich only depends on cost streams, which all algorithms share.
            if ai == 0 {
                for (ei, &eps) in config.epsilons.iter().enumerate() {
                    for (ni, &n) in config.n_schedule.iter().enumerate() {
                        let hits = reps.iter().filter(|x| x.sandwich[ei][ni]).count();
                        out.sandwich.push(SandwichRow {
                            epsilon: eps,
                            n,
                            h,
                            replications: reps.len(),
                            frequency: MeanEstimate::binomial(hits, reps.len()),
                            bound: theorem1_bound(policies.len(), eps, consts.alpha_h, n)
                                .ok()
                                .map(|b| b.clamped),
                        });
                    }
                }
            }
            for (ei, &eps) in config.epsilons.iter().enumerate() {
                for (ni, &n) in config.n_schedule.iter().enumerate() {
                    let hits = reps.iter().filter(|x| x.selection[ni]).count();
                    out.selection.push(SelectionRow {
                        algorithm: algo,
                        epsilon: eps,
                        n,
                        h,
                        frequency: MeanEstimate::binomial(hits, reps.len()),
                        theorem2_bound: mean_of(reps.iter().filter_map(|x| x.theorem2[ei][ni])),
                    });
                }
            }
            let mut curve = Vec::new();
            for (pi, &n) in cell.regret_points.iter().enumerate() {
                let defined: Vec<(f64, f64)> = reps.iter().filter_map(|x| x.regret[pi]).collect();
                if defined.is_empty() {
                    continue;
                }
                let regrets: Vec<f64> = defined.iter().map(|(b, c)| b - c).collect();
                let row = RegretRow {
                    algorithm: algo,
                    n,
                    h,
                    avg_best: mean_of(defined.iter().map(|x| x.0)).unwrap_or(f64::NAN),
                    avg_chosen: mean_of(defined.iter().map(|x| x.1)).unwrap_or(f64::NAN),
                    regret: MeanEstimate::from_samples(&regrets),
                };
                curve.push((n, row.regret.mean));
                out.regret.push(row);
            }
            for model_kind in [RateModel::InverseN, RateModel::LogNOverN] {
                out.fits.push(FitRow {
                    algorithm: algo,
                    h,
                    model: model_kind,
                    outcome: rate_check(&curve, model_kind, gaps.min_positive_gap).map_err(|e| e.to_string()),
                });
            }
        }

        for &n in &config.n_schedule {
            for &eps in &config.epsilons {
                let delta = config.delta.unwrap_or(1.0 / n as f64);
                let t1 = theorem1_bound(policies.len(), eps, consts.alpha_h, n).ok();
                out.bounds.push(BoundsRow {
                    n,
                    h,
                    epsilon: eps,
                    delta,
                    replications: r_count,
                    alpha_h: consts.alpha_h,
                    r_h: consts.r_h,
                    theorem1_raw: t1.map(|b| b.raw),
                    theorem1: t1.map(|b| b.clamped),
                    rate_constant: rate_constant(eps, consts.alpha_h),
                    ftal_rhs: regret_bound_rhs(&gaps, delta, n, RateModel::InverseN).value,
                    auer_rhs: regret_bound_rhs(&gaps, delta, n, RateModel::LogNOverN).value,
                });
            }
        }
    }
    out.oracle = Some(oracle);
    Ok(out)
}

/// Runs the experiment and writes every aggregate CSV to `output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let out = run_experiment_in_memory(config)?;
    write_reports(&out, &config.output_dir)?;
    Ok(out)
}

fn write_file<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    body(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_file<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    write_file(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(header)?;
        for row in rows {
            out.write_record(row)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    })
}

pub const SANDWICH_HEADER: [&str; 7] = ["epsilon", "n", "h", "replications", "frequency", "stderr", "bound"];
pub const SELECTION_HEADER: [&str; 8] =
    ["algo", "epsilon", "n", "h", "replications", "frequency", "stderr", "theorem2_bound"];
pub const REGRET_HEADER: [&str; 8] =
    ["algo", "n", "h", "replications", "avg_best", "avg_chosen", "regret", "stderr"];
pub const FITS_HEADER: [&str; 8] = ["algo", "h", "model", "status", "c", "residual", "points", "violation"];
pub const BOUNDS_HEADER: [&str; 12] = [
    "n",
    "h",
    "epsilon",
    "delta",
    "replications",
    "alpha_h",
    "r_h",
    "theorem1_raw",
    "theorem1",
    "rate_constant",
    "ftal_rhs",
    "auer_rhs",
];

pub fn write_reports(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(oracle) = &out.oracle {
        write_file(&dir.join("oracle.csv"), |w| oracle.write_csv(w))?;
    }
    csv_file(
        &dir.join("sandwich.csv"),
        &SANDWICH_HEADER,
        out.sandwich.iter().map(|r| {
            vec![
                r.epsilon.to_string(),
                r.n.to_string(),
                r.h.to_string(),
                r.replications.to_string(),
                r.frequency.mean.to_string(),
                r.frequency.stderr.to_string(),
                opt(r.bound),
            ]
        }),
    )?;
    csv_file(
        &dir.join("selection.csv"),
        &SELECTION_HEADER,
        out.selection.iter().map(|r| {
            vec![
                r.algorithm.to_string(),
                r.epsilon.to_string(),
                r.n.to_string(),
                r.h.to_string(),
                r.frequency.count.to_string(),
                r.frequency.mean.to_string(),
                r.frequency.stderr.to_string(),
                opt(r.theorem2_bound),
            ]
        }),
    )?;
    csv_file(
        &dir.join("regret.csv"),
        &REGRET_HEADER,
        out.regret.iter().map(|r| {
            vec![
                r.algorithm.to_string(),
                r.n.to_string(),
                r.h.to_string(),
                r.regret.count.to_string(),
                r.avg_best.to_string(),
                r.avg_chosen.to_string(),
                r.regret.mean.to_string(),
                r.regret.stderr.to_string(),
            ]
        }),
    )?;
    csv_file(
        &dir.join("fits.csv"),
        &FITS_HEADER,
        out.fits.iter().map(|r| {
            let (status, c, residual, points, violation) = match &r.outcome {
                Ok(RateCheck::Fit {
                    c,
                    residual,
                    points,
                    violation,
                    ..
                }) => (
                    "ok".to_string(),
                    c.to_string(),
                    residual.to_string(),
                    points.to_string(),
                    u8::from(*violation).to_string(),
                ),
                Ok(RateCheck::Skipped) => ("skipped".into(), String::new(), String::new(), String::new(), String::new()),
                Err(_) => (
                    "insufficient".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ),
            };
            vec![
                r.algorithm.to_string(),
                r.h.to_string(),
                r.model.name().to_string(),
                status,
                c,
                residual,
                points,
                violation,
            ]
        }),
    )?;
    csv_file(
        &dir.join("bounds.csv"),
        &BOUNDS_HEADER,
        out.bounds.iter().map(|r| {
            vec![
                r.n.to_string(),
                r.h.to_string(),
                r.epsilon.to_string(),
                r.delta.to_string(),
                r.replications.to_string(),
                r.alpha_h.to_string(),
                r.r_h.to_string(),
                opt(r.theorem1_raw),
                opt(r.theorem1),
                r.rate_constant.to_string(),
                r.ftal_rhs.to_string(),
                r.auer_rhs.to_string(),
            ]
        }),
    )?;
    Ok(())
}
