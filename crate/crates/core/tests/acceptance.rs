//! Desk-scale acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use sleeping_cmdp::bounds::{gap_structure, rate_check, truncation_constants, RateCheck, RateModel};
use sleeping_cmdp::harness::experiment::run_experiment_in_memory;
use sleeping_cmdp::harness::{generate_instance, run_experiment, ExperimentConfig, ExperimentOutput, InstanceSpec};
use sleeping_cmdp::oracle::{build_chain, exact_cost, exact_finite_cost, exact_finite_value, exact_value, OracleReport};
use sleeping_cmdp::rng::{Purpose, Streams};
use sleeping_cmdp::selector::{
    auer_select, ftal_select, insolvability_check, update_running_mean, SelectorState,
};
use sleeping_cmdp::{Algorithm, CmdpModel, PolicySet, RunConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self::new(false, format!("error: {e}"))
    }
}

fn config(name: &str) -> sleeping_cmdp::Result<ExperimentConfig> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    ExperimentConfig::load(path)
}

/// Shared tally for the budget-accounting criterion.
#[derive(Default)]
struct Accounting {
    runs: usize,
    violations: usize,
}

impl Accounting {
    fn add(&mut self, out: &ExperimentOutput) {
        self.runs += out.runs;
        self.violations += out.accounting_violations;
    }
}

fn random_instances() -> Vec<(CmdpModel, PolicySet)> {
    (0..20u64)
        .map(|i| {
            let states = 2 + (i as usize % 9);
            let actions = 2 + (i as usize % 3);
            let segments = 1 + (i as usize % 4);
            let maps = (actions as f64).powi(states as i32);
            let policies = (5 + (i as usize * 7) % 16).min(maps as usize);
            let mut spec = InstanceSpec::new(states, actions, segments, policies, 1000 + i);
            spec.gamma = [0.5, 0.8, 0.9][i as usize % 3];
            spec.beta = [0.9, 0.6, 0.8][i as usize % 3];
            let inst = generate_instance(&spec).expect("unconstrained generation");
            (inst.model, inst.policies)
        })
        .collect()
}

/// Monte Carlo means of 1e5 rollouts inside the 99.99% Hoeffding band.
fn oracle_consistency(instances: &[(CmdpModel, PolicySet)]) -> Outcome {
    const SAMPLES: usize = 100_000;
    let band = ((2.0f64 / 1e-4).ln() / (2.0 * SAMPLES as f64)).sqrt();
    let start = Instant::now();
    let jobs: Vec<(usize, usize, usize)> = instances
        .iter()
        .enumerate()
        .flat_map(|(i, (_, p))| (0..p.len()).flat_map(move |j| [10, 50].map(|h| (i, j, h))))
        .collect();
    let results: Vec<sleeping_cmdp::Result<f64>> = jobs
        .par_iter()
        .map(|&(i, j, h)| {
            let (model, policies) = &instances[i];
            let chain = build_chain(model, policies.get(j))?;
            let x0 = model.initial_state;
            let v = exact_finite_value(&chain, model.gamma, h)[x0];
            let c = exact_finite_cost(&chain, model.beta, h)[x0];
            let table = model.table(policies.get(j))?;
            let mut rng = Streams::new(17, i as u64).stream(Purpose::Evaluation, j, h as u64);
            let (mut sv, mut sc) = (0.0, 0.0);
            for _ in 0..SAMPLES {
                let s = table.rollout(h, &mut rng);
                sv += s.value_sum;
                sc += s.cost_sum;
            }
            let n = SAMPLES as f64;
            Ok(((sv / n) - v).abs().max(((sc / n) - c).abs()))
        })
        .collect();
    let mut worst: f64 = 0.0;
    for r in results {
        match r {
            Ok(d) => worst = worst.max(d),
            Err(e) => return Outcome::error(e),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst <= band && secs < 120.0,
        format!(
            "{} policy/horizon cells, worst |MC - exact| = {worst:.5} vs band {band:.5}, {secs:.1}s",
            jobs.len()
        ),
    )
}

/// Truncated values within r_H and costs within alpha_H for H = 1..100.
/// The 1e-12 slack absorbs floating-point rounding where the tail itself
/// underflows below machine precision.
fn truncation(instances: &[(CmdpModel, PolicySet)]) -> Outcome {
    let mut checks = 0usize;
    let mut violations = 0usize;
    for (model, policies) in instances {
        for policy in policies.iter() {
            let chain = match build_chain(model, policy) {
                Ok(c) => c,
                Err(e) => return Outcome::error(e),
            };
            let x0 = model.initial_state;
            let v = exact_value(&chain, model.gamma)[x0];
            let c = exact_cost(&chain, model.beta)[x0];
            for h in 1..=100 {
                let t = truncation_constants(model, h);
                let dv = (exact_finite_value(&chain, model.gamma, h)[x0] - v).abs();
                let dc = (exact_finite_cost(&chain, model.beta, h)[x0] - c).abs();
                checks += 2;
                violations += usize::from(dv > t.r_h + 1e-12) + usize::from(dc > t.alpha_h + 1e-12);
            }
        }
    }
    Outcome::new(
        violations == 0,
        format!("{violations} violations in {checks} checks over {} instances", instances.len()),
    )
}

fn with_output(mut c: ExperimentConfig, dir: &Path) -> ExperimentConfig {
    c.output_dir = dir.to_path_buf();
    c
}

fn sandwich(tmp: &Path, acct: &mut Accounting) -> Outcome {
    let start = Instant::now();
    let mut c = match config("desk.toml") {
        Ok(c) => with_output(c, &tmp.join("sandwich")),
        Err(e) => return Outcome::error(e),
    };
    c.replications = 200;
    c.gap_multiples.clear();
    c.algorithms = vec![Algorithm::Ftal];
    c.epsilons = vec![0.1];
    let alpha = match c.load_instance() {
        Ok((m, _)) => truncation_constants(&m, c.h_schedule[0]).alpha_h,
        Err(e) => return Outcome::error(e),
    };
    if alpha > 0.02 {
        return Outcome::new(false, format!("alpha_H = {alpha} exceeds 0.02"));
    }
    let out = match run_experiment(&c) {
        Ok(o) => o,
        Err(e) => return Outcome::error(e),
    };
    acct.add(&out);
    let mut pass = out.failures.is_empty() && out.sandwich.len() == 3;
    let mut parts = Vec::new();
    for row in &out.sandwich {
        let b = row.bound.unwrap_or(0.0);
        let threshold = b - 3.0 * (b * (1.0 - b) / row.replications as f64).sqrt();
        pass &= row.frequency.mean >= threshold;
        parts.push(format!("N={} freq={:.3} need>={:.4}", row.n, row.frequency.mean, threshold));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    Outcome::new(pass, format!("alpha_H={alpha:.4}; {}; {secs:.1}s", parts.join(", ")))
}

fn selection(tmp: &Path, acct: &mut Accounting) -> Outcome {
    let c = match config("selection.toml") {
        Ok(c) => with_output(c, &tmp.join("selection")),
        Err(e) => return Outcome::error(e),
    };
    let (model, policies) = match c.load_instance() {
        Ok(x) => x,
        Err(e) => return Outcome::error(e),
    };
    let alpha = truncation_constants(&model, c.h_schedule[0]).alpha_h;
    let values = match OracleReport::build(&model, &policies, &[]) {
        Ok(r) => r.values(),
        Err(e) => return Outcome::error(e),
    };
    let mut margin = f64::INFINITY;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            margin = margin.min((values[i] - values[j]).abs());
        }
    }
    if alpha > 0.01 || margin < 0.05 {
        return Outcome::new(false, format!("instance outside regime: alpha_H={alpha}, margin={margin}"));
    }
    let out = match run_experiment(&c) {
        Ok(o) => o,
        Err(e) => return Outcome::error(e),
    };
    acct.add(&out);
    let Some(row) = out.selection.iter().find(|r| r.algorithm == Algorithm::Ftal && r.n == 5000) else {
        return Outcome::new(false, "no FTAL row at N=5000");
    };
    let b = row.theorem2_bound.unwrap_or(0.0);
    let sigma = (b * (1.0 - b) / row.frequency.count as f64).sqrt();
    let need = 0.95f64.max(b - 3.0 * sigma);
    Outcome::new(
        out.failures.is_empty() && row.frequency.mean >= need,
        format!(
            "freq={:.3} need>={need:.4} (bound {b:.6}), alpha_H={alpha:.4}, min value gap {margin:.4}",
            row.frequency.mean
        ),
    )
}

fn rate_shapes(tmp: &Path, acct: &mut Accounting) -> Outcome {
    let c = match config("desk.toml") {
        Ok(c) => with_output(c, &tmp.join("rates")),
        Err(e) => return Outcome::error(e),
    };
    let h = c.h_schedule[0];
    let out = match run_experiment(&c) {
        Ok(o) => o,
        Err(e) => return Outcome::error(e),
    };
    acct.add(&out);
    let values_h = match out.oracle.as_ref().map(|o| o.values_at(h)) {
        Some(Ok(v)) => v,
        _ => return Outcome::new(false, "oracle missing"),
    };
    let gaps = gap_structure(&values_h, 0.0);
    let Some(t) = gaps.rate_threshold() else {
        return Outcome::new(false, "no positive gap between policy values");
    };
    let points: Vec<u64> = [1, 2, 4, 8, 16].iter().map(|m| t * m).collect();
    let curve = |algo: Algorithm| -> Vec<(u64, f64, f64)> {
        points
            .iter()
            .filter_map(|&n| {
                out.regret
                    .iter()
                    .find(|r| r.algorithm == algo && r.n == n)
                    .map(|r| (n, r.regret.mean, r.regret.stderr))
            })
            .collect()
    };
    let (ftal, auer) = (curve(Algorithm::Ftal), curve(Algorithm::Auer));
    if ftal.len() != 5 || auer.len() != 5 {
        return Outcome::new(false, "missing regret points");
    }
    let fit = |c: &[(u64, f64, f64)], model| {
        let pts: Vec<(u64, f64)> = c.iter().map(|&(n, r, _)| (n, r)).collect();
        rate_check(&pts, model, gaps.min_positive_gap)
    };
    let describe = |f: &sleeping_cmdp::Result<RateCheck>| match f {
        Ok(RateCheck::Fit { c, violation, .. }) => (!violation, format!("C={c:.4} within 2C: {}", !violation)),
        Ok(RateCheck::Skipped) => (false, "skipped".to_string()),
        Err(e) => (false, e.to_string()),
    };
    let (ftal_ok, ftal_msg) = describe(&fit(&ftal, RateModel::InverseN));
    let (auer_ok, auer_msg) = describe(&fit(&auer, RateModel::LogNOverN));
    let mut order_ok = true;
    for i in 3..5 {
        let (_, rf, sf) = ftal[i];
        let (_, ra, sa) = auer[i];
        order_ok &= ra - rf >= -2.0 * (sa * sa + sf * sf).sqrt();
    }
    Outcome::new(
        out.failures.is_empty() && ftal_ok && auer_ok && order_ok,
        format!(
            "N in {points:?}; FTAL 1/N {ftal_msg}; AUER lnN/N {auer_msg}; AUER>=FTAL at two largest N: {order_ok}"
        ),
    )
}

fn insolvability(acct: &mut Accounting) -> Outcome {
    let c = match config("insolvable.toml") {
        Ok(c) => c,
        Err(e) => return Outcome::error(e),
    };
    let h = c.h_schedule[0];
    let (model, policies) = match c.load_instance() {
        Ok(x) => x,
        Err(e) => return Outcome::error(e),
    };
    let alpha = truncation_constants(&model, h).alpha_h;
    let report = match OracleReport::build(&model, &policies, &[]) {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    if !report.feasible_set(c.k, 2.0 * alpha).is_empty() {
        return Outcome::new(false, "constructed instance has a (2 alpha_H)-feasible policy");
    }
    let n = 2000u64;
    let results: Vec<sleeping_cmdp::Result<(bool, bool)>> = (0..c.replications as u64)
        .into_par_iter()
        .map(|r| {
            let trace = sleeping_cmdp::run(
                &model,
                &policies,
                &RunConfig {
                    algorithm: Algorithm::Ftal,
                    k: c.k,
                    iterations: n,
                    horizon: h,
                    seed: c.seed,
                    replication: r,
                },
            )?;
            let flagged = insolvability_check(&trace.records, (n / 2) as usize)?;
            Ok((flagged, sleeping_cmdp::selector::accounting_holds(&trace)))
        })
        .collect();
    let mut hits = 0;
    for r in &results {
        match r {
            Ok((flagged, acct_ok)) => {
                hits += usize::from(*flagged);
                acct.runs += 1;
                acct.violations += usize::from(!acct_ok);
            }
            Err(e) => return Outcome::error(e),
        }
    }
    Outcome::new(
        hits * 100 >= 99 * results.len(),
        format!("detected in {hits}/{} replications (N={n}, window {})", results.len(), n / 2),
    )
}

fn properties(tmp: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures: Vec<String> = Vec::new();

    // Running mean against batch mean.
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..500);
        let xs: Vec<f64> = (0..len).map(|_| rng.gen::<f64>()).collect();
        let mut m = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            m = update_running_mean(m, i as u64 + 1, x);
        }
        worst = worst.max((m - xs.iter().sum::<f64>() / len as f64).abs());
    }
    if worst > 1e-12 {
        failures.push(format!("running mean off by {worst}"));
    }

    // Ties go to the lowest index; a constant shift of all means changes nothing.
    for _ in 0..1000 {
        let m = rng.gen_range(2..12);
        let levels = [0.2, 0.5, 0.7];
        let means: Vec<f64> = (0..m).map(|_| levels[rng.gen_range(0..3)]).collect();
        let tau: Vec<u64> = (0..m).map(|_| rng.gen_range(1..50)).collect();
        let awake: Vec<usize> = (0..m).filter(|_| rng.gen_bool(0.7)).collect();
        if awake.is_empty() {
            continue;
        }
        let n = tau.iter().sum::<u64>() + 1;
        let state = |shift: f64| {
            SelectorState::from_parts(
                n,
                vec![0.0; m],
                means.iter().map(|v| v + shift).collect(),
                tau.clone(),
                awake.clone(),
            )
        };
        let best = awake.iter().map(|&p| means[p]).fold(f64::MIN, f64::max);
        let expected = *awake.iter().find(|&&p| means[p] == best).unwrap();
        if ftal_select(&state(0.0)).policy != expected {
            failures.push("FTAL tie-break".into());
            break;
        }
        let shift = rng.gen_range(-0.5..0.5);
        if ftal_select(&state(shift)).policy != expected
            || auer_select(&state(shift)).policy != auer_select(&state(0.0)).policy
        {
            failures.push("shift invariance".into());
            break;
        }
    }

    // Feasible sets grow with epsilon.
    for _ in 0..1000 {
        let costs: Vec<f64> = (0..rng.gen_range(1..15)).map(|_| rng.gen::<f64>()).collect();
        let k = rng.gen::<f64>();
        let (e1, e2) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let small = sleeping_cmdp::oracle::exact_feasible_set(&costs, k, lo);
        let large = sleeping_cmdp::oracle::exact_feasible_set(&costs, k, hi);
        if !small.iter().all(|p| large.contains(p)) {
            failures.push("feasible-set monotonicity".into());
            break;
        }
    }

    // Identical config and seed give byte-identical CSVs.
    match determinism(tmp) {
        Ok(true) => {}
        Ok(false) => failures.push("experiment output differs between identical runs".into()),
        Err(e) => failures.push(format!("determinism run failed: {e}")),
    }

    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "running mean, tie-breaking, shift invariance, monotonicity, determinism".to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn determinism(tmp: &Path) -> sleeping_cmdp::Result<bool> {
    let mut c = config("desk.toml")?;
    c.n_schedule = vec![10, 40];
    c.gap_multiples.clear();
    c.replications = 3;
    c.write_traces = true;
    let dirs: Vec<PathBuf> = ["det_a", "det_b"].iter().map(|d| tmp.join(d)).collect();
    for d in &dirs {
        run_experiment(&with_output(c.clone(), d))?;
    }
    let mut names: Vec<_> = std::fs::read_dir(&dirs[0])
        .map_err(|e| sleeping_cmdp::Error::Precondition(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.file_name()))
        .collect();
    names.sort();
    let in_memory = run_experiment_in_memory(&c)?;
    Ok(names.len() > 6
        && !in_memory.regret.is_empty()
        && names.iter().all(|n| {
            let a = std::fs::read(dirs[0].join(n)).ok();
            a.is_some() && a == std::fs::read(dirs[1].join(n)).ok()
        }))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let instances = random_instances();
    let mut acct = Accounting::default();
    let mut report: Vec<(u32, &str, Outcome)> = Vec::new();

    report.push((1, "oracle consistency", oracle_consistency(&instances)));
    let mut all = instances.clone();
    for name in ["desk.toml", "selection.toml", "insolvable.toml"] {
        if let Ok(inst) = config(name).and_then(|c| c.load_instance()) {
            all.push(inst);
        }
    }
    report.push((2, "truncation bounds", truncation(&all)));
    report.push((3, "feasible-set sandwich", sandwich(tmp.path(), &mut acct)));
    report.push((4, "FTAL selection", selection(tmp.path(), &mut acct)));
    report.push((5, "rate shapes", rate_shapes(tmp.path(), &mut acct)));
    let insolvable = insolvability(&mut acct);
    report.push((
        6,
        "budget accounting",
        Outcome::new(
            acct.runs > 0 && acct.violations == 0,
            format!("{} violations across {} runs", acct.violations, acct.runs),
        ),
    ));
    report.push((7, "insolvability detection", insolvable));
    report.push((8, "unit and property suites", properties(tmp.path())));

    let mut failed = 0;
    for (id, name, o) in &report {
        println!(
            "criterion {id} [{name}]: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
