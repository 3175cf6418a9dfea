use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sleeping_cmdp::bounds::{
    gap_structure, rate_constant, regret_bound_rhs, theorem1_bound, theorem1_min_n, truncation_tail,
    RateModel,
};
use sleeping_cmdp::harness::{generate_instance, run_experiment, ExperimentConfig, InstanceSpec};
use sleeping_cmdp::oracle::OracleReport;
use sleeping_cmdp::{Algorithm, CmdpModel, Error, PolicySet, Result, RunConfig};

#[derive(Parser)]
#[command(name = "sleeping-cmdp", version, about = "Simulation-based feasible policy selection for finite CMDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random normalized instance (model.json, policies.json).
    Generate(GenerateArgs),
    /// Exact values and costs of every policy, as CSV.
    Oracle(OracleArgs),
    /// A single FTAL or AUER run, as a trace CSV.
    Run(RunArgs),
    /// Replicated experiment from a TOML config; writes aggregate CSVs.
    Experiment(ExperimentArgs),
    /// Print bound quantities for given parameters.
    Bounds(BoundsArgs),
    /// Validate model and policy files.
    Check(CheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML instance spec; individual flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    policies: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Reject instances until some policy is 0-feasible for this K.
    #[arg(long)]
    force_feasible: Option<f64>,
    /// Reject instances until all exact values differ by at least this margin.
    #[arg(long)]
    distinct_values: Option<f64>,
    #[arg(long)]
    cost_margin: Option<f64>,
    #[arg(long)]
    max_attempts: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    policies: PathBuf,
    /// Finite horizons to report alongside the infinite-horizon columns.
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<usize>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    policies: PathBuf,
    #[arg(long)]
    algorithm: Algorithm,
    #[arg(long)]
    k: f64,
    #[arg(long)]
    iterations: u64,
    #[arg(long)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    replication: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Restrict to one algorithm.
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    write_traces: bool,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    epsilon: f64,
    /// Cost truncation constant; derived from --model and --horizon when omitted.
    #[arg(long = "alphaH")]
    alpha_h: Option<f64>,
    /// Number of policies |Π|.
    #[arg(long)]
    policies: Option<usize>,
    #[arg(long = "N")]
    n: u64,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Policy file; enables gap structure and regret bound quantities.
    #[arg(long)]
    policy_file: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Slack in the regret bounds; defaults to 1/N.
    #[arg(long)]
    delta: Option<f64>,
    /// Target probability for the minimal N satisfying the sandwich bound.
    #[arg(long)]
    target: Option<f64>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    policies: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            report(&e);
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn report(e: &Error) {
    match e {
        Error::InvalidModel(violations) => {
            eprintln!("error: invalid model");
            for v in violations {
                eprintln!("  [{}] {v}", v.invariant());
            }
        }
        other => eprintln!("error: {other}"),
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Generate(a) => generate(a),
        Command::Oracle(a) => oracle(a),
        Command::Run(a) => run(a),
        Command::Experiment(a) => experiment(a),
        Command::Bounds(a) => bounds(a),
        Command::Check(a) => check(a),
    }
}

fn load_pair(model: &Path, policies: &Path) -> Result<(CmdpModel, PolicySet)> {
    let model = CmdpModel::load(model)?;
    let policies = PolicySet::load(policies)?;
    policies.validate_for(&model)?;
    Ok((model, policies))
}

fn with_output<F>(path: Option<&Path>, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    match path {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| io_err(p, e))?);
            body(&mut f)?;
            f.flush().map_err(|e| io_err(p, e))
        }
        None => body(&mut std::io::stdout().lock()),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str(&text)?
        }
        None => {
            let need = |v: Option<usize>, name: &str| {
                v.ok_or_else(|| Error::Precondition(format!("--{name} is required without --config")))
            };
            InstanceSpec::new(
                need(a.states, "states")?,
                need(a.actions, "actions")?,
                need(a.segments, "segments")?,
                need(a.policies, "policies")?,
                a.seed.unwrap_or(0),
            )
        }
    };
    macro_rules! override_field {
        ($($flag:ident => $field:ident),*) => {$(
            if let Some(v) = a.$flag { spec.$field = v; }
        )*};
    }
    override_field!(states => num_states, actions => actions_per_state, segments => segments_per_action,
        policies => num_policies, seed => seed, gamma => gamma, beta => beta, max_attempts => max_attempts);
    if a.force_feasible.is_some() {
        spec.force_feasible = a.force_feasible;
    }
    if a.distinct_values.is_some() {
        spec.distinct_values = a.distinct_values;
    }
    if a.cost_margin.is_some() {
        spec.cost_margin = a.cost_margin;
    }
    let inst = generate_instance(&spec)?;
    inst.save(&a.out)?;
    println!(
        "wrote {} and {} (attempt {})",
        a.out.join("model.json").display(),
        a.out.join("policies.json").display(),
        inst.attempt
    );
    Ok(ExitCode::SUCCESS)
}

fn oracle(a: OracleArgs) -> Result<ExitCode> {
    let (model, policies) = load_pair(&a.model, &a.policies)?;
    let report = OracleReport::build(&model, &policies, &a.horizons)?;
    with_output(a.output.as_deref(), |w| report.write_csv(w))?;
    Ok(ExitCode::SUCCESS)
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let (model, policies) = load_pair(&a.model, &a.policies)?;
    let trace = sleeping_cmdp::run(
        &model,
        &policies,
        &RunConfig {
            algorithm: a.algorithm,
            k: a.k,
            iterations: a.iterations,
            horizon: a.horizon,
            seed: a.seed,
            replication: a.replication,
        },
    )?;
    with_output(a.output.as_deref(), |w| trace.write_csv(w))?;
    Ok(ExitCode::SUCCESS)
}

fn experiment(a: ExperimentArgs) -> Result<ExitCode> {
    let mut config = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(r) = a.replications {
        config.replications = r;
    }
    if let Some(d) = a.output_dir {
        config.output_dir = d;
    }
    if let Some(alg) = a.algorithm {
        config.algorithms = vec![alg];
    }
    if let Some(k) = a.k {
        config.k = k;
    }
    config.write_traces |= a.write_traces;
    let out = run_experiment(&config)?;
    println!("{} runs, output in {}", out.runs, config.output_dir.display());
    if out.accounting_violations > 0 {
        eprintln!("error: {} runs violated budget accounting", out.accounting_violations);
    }
    for (algo, h, r, msg) in &out.failures {
        eprintln!("error: run {algo} H={h} replication {r} failed: {msg}");
    }
    Ok(if out.failures.is_empty() && out.accounting_violations == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn bounds(a: BoundsArgs) -> Result<ExitCode> {
    let model = a.model.as_deref().map(CmdpModel::load).transpose()?;
    let policies = a.policy_file.as_deref().map(PolicySet::load).transpose()?;
    let alpha_h = match (a.alpha_h, &model, a.horizon) {
        (Some(x), _, _) => x,
        (None, Some(m), Some(h)) => truncation_tail(m.beta, m.c_max, h),
        _ => return Err(Error::Precondition("give --alphaH or both --model and --horizon".into())),
    };
    let num_policies = match (a.policies, &policies) {
        (Some(p), _) => p,
        (None, Some(p)) => p.len(),
        _ => return Err(Error::Precondition("give --policies or --policy-file".into())),
    };
    let t1 = theorem1_bound(num_policies, a.epsilon, alpha_h, a.n)?;
    println!("alpha_h = {alpha_h}");
    println!("theorem1_raw = {}", t1.raw);
    println!("theorem1 = {}", t1.clamped);
    println!("rate_constant = {}", rate_constant(a.epsilon, alpha_h));
    if let Some(target) = a.target {
        println!("theorem1_min_n = {}", theorem1_min_n(num_policies, a.epsilon, alpha_h, target)?);
    }
    if let (Some(m), Some(h)) = (&model, a.horizon) {
        println!("r_h = {}", truncation_tail(m.gamma, m.r_max, h));
    }
    if let (Some(m), Some(p), Some(h)) = (&model, &policies, a.horizon) {
        p.validate_for(m)?;
        let report = OracleReport::build(m, p, &[h])?;
        let gaps = gap_structure(&report.values_at(h)?, 0.0);
        let delta = a.delta.unwrap_or(1.0 / a.n as f64);
        match gaps.min_positive_gap {
            Some(g) => println!("min_positive_gap = {g}"),
            None => println!("min_positive_gap = none"),
        }
        if let Some(t) = gaps.rate_threshold() {
            println!("rate_threshold_n = {t}");
        }
        for (name, kind) in [("ftal_rhs", RateModel::InverseN), ("auer_rhs", RateModel::LogNOverN)] {
            let rhs = regret_bound_rhs(&gaps, delta, a.n, kind);
            println!("{name} = {}", rhs.value);
            if !rhs.flagged.is_empty() {
                println!("{name}_flagged_positions = {:?}", rhs.flagged);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn check(a: CheckArgs) -> Result<ExitCode> {
    let model = CmdpModel::load(&a.model)?;
    if let Some(p) = &a.policies {
        PolicySet::load(p)?.validate_for(&model)?;
    }
    println!("ok");
    Ok(ExitCode::SUCCESS)
}
