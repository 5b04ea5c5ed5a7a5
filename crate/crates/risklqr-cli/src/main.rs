//! `risklqr` — synthesize, certify, and validate risk-constrained LQR
//! policies from a JSON run configuration.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 infeasible budget,
//! 3 numerical failure.

mod artifacts;
mod config;

use std::path::PathBuf;
use std::process::exit;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;

use artifacts::{csv, fnum, kkt_json, parse_policy, policy_json, stats_json};
use config::{Budget, RunConfig};
use risklqr::model::DEFAULT_HAUTUS_TOL;
use risklqr::{
    backward_pass, empirical_cdf, epsilon_bar, estimate, kkt_certificate, lqr_cost, noise_stats,
    risk_value, rollout, solve_risk_constrained, solve_with_eps_bar, spectral_radius,
    steady_state, validate, AffinePolicy, CostSpec, Error, KktReport, KktTolerances, NoiseSpec,
    NoiseStats, Solution, SolveStatus, SystemModel, Trajectory,
};

#[derive(Parser)]
#[command(
    name = "risklqr",
    about = "Risk-constrained LQR synthesis, certification, and Monte Carlo validation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the noise statistics (mean, W, M3, m4) implied by the config.
    Moments(CommonArgs),
    /// Solve for a policy and write policy.json and solution.json.
    Synthesize(CommonArgs),
    /// Load a policy file and write its cost, risk, and KKT report.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Policy JSON produced by synthesize.
        #[arg(long)]
        policy: PathBuf,
    },
    /// Monte Carlo rollouts: estimate, summary, trajectory, and CDF files.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Policy JSON to simulate; synthesized from the budget if omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Number of leading rollouts dumped stage-by-stage.
        #[arg(long, default_value_t = 1)]
        trajectories: usize,
    },
    /// Sweep the multiplier and write the (mu, J, J_R, spectral radius)
    /// frontier.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 1e-4)]
        mu_min: f64,
        #[arg(long, default_value_t = 1e2)]
        mu_max: f64,
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output.dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Simulation seed; overrides the config's `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Dimension(_) | Error::InvalidInput(_) => 1,
            Error::Numerical(_) | Error::Convergence { .. } => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<String> for Failure {
    fn from(message: String) -> Self {
        Failure { code: 1, message }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                exit(0);
            }
            eprintln!("{e}");
            exit(1);
        }
    };
    init_threads();
    match run(cli.command) {
        Ok(code) => exit(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            exit(f.code);
        }
    }
}

/// RISKLQR_THREADS caps the rayon pool used by the simulator; results do not
/// depend on it.
fn init_threads() {
    if let Ok(raw) = std::env::var("RISKLQR_THREADS") {
        match raw.parse::<usize>() {
            Ok(k) if k >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build_global();
            }
            _ => eprintln!("warning: ignoring invalid RISKLQR_THREADS value {raw:?}"),
        }
    }
}

fn run(command: Command) -> Result<i32, Failure> {
    match command {
        Command::Moments(common) => cmd_moments(&common),
        Command::Synthesize(common) => cmd_synthesize(&common),
        Command::Evaluate { common, policy } => cmd_evaluate(&common, &policy),
        Command::Simulate {
            common,
            policy,
            trajectories,
        } => cmd_simulate(&common, policy.as_deref(), trajectories),
        Command::Sweep {
            common,
            mu_min,
            mu_max,
            points,
        } => cmd_sweep(&common, mu_min, mu_max, points),
    }
}

struct Loaded {
    config: RunConfig,
    model: SystemModel,
    cost: CostSpec,
    spec: NoiseSpec,
    stats: NoiseStats,
    outdir: PathBuf,
    seed: u64,
}

fn load(common: &CommonArgs) -> Result<Loaded, Failure> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", common.config.display())))?;
    let config = RunConfig::parse(&text)?;
    let model = config.model()?;
    let cost = config.cost()?;
    let spec = config.noise()?;
    let stats = noise_stats(&spec, &cost.qc)?;
    let outdir = common
        .output
        .clone()
        .or_else(|| config.output.as_ref().map(|o| PathBuf::from(&o.dir)))
        .unwrap_or_else(|| PathBuf::from("."));
    let seed = common.seed.unwrap_or(config.sim.seed);
    Ok(Loaded {
        config,
        model,
        cost,
        spec,
        stats,
        outdir,
        seed,
    })
}

fn write_file(ld: &Loaded, name: &str, content: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(&ld.outdir)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", ld.outdir.display())))?;
    let path = ld.outdir.join(name);
    std::fs::write(&path, content)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn check_assumptions(ld: &Loaded) -> Result<(), Failure> {
    let report = validate(&ld.model, &ld.cost, DEFAULT_HAUTUS_TOL)?;
    if !report.all_ok() {
        return Err(Failure::usage(format!(
            "model/cost validation failed: {}",
            report.messages.join("; ")
        )));
    }
    Ok(())
}

fn budget(ld: &Loaded) -> Result<Budget, Failure> {
    ld.config
        .budget
        .as_ref()
        .ok_or_else(|| Failure::usage("this command requires a `budget` section"))?
        .resolve()
        .map_err(Failure::from)
}

fn status_name(status: SolveStatus) -> &'static str {
    match status {
        SolveStatus::OptimalInterior => "optimal_interior",
        SolveStatus::OptimalActive => "optimal_active",
        SolveStatus::Infeasible => "infeasible",
    }
}

#[allow(clippy::too_many_arguments)]
fn solution_json(
    mu_star: f64,
    status: &str,
    j: f64,
    jr: f64,
    eps_bar: f64,
    kkt: Option<&KktReport>,
    trace: &[(f64, f64)],
) -> String {
    let kkt_text = kkt.map_or_else(|| "null".to_string(), |k| kkt_json(k, "  "));
    let rows: Vec<String> = trace
        .iter()
        .map(|(mu, value)| format!("[{}, {}]", fnum(*mu), fnum(*value)))
        .collect();
    format!
        ("{{\n  \"mu_star\": {},\n  \"status\": \"{status}\",\n  \"j\": {},\n  \"jr\": {},\n  \"eps_bar\": {},\n  \"kkt\": {kkt_text},\n  \"trace\": [{}]\n}}\n",
        fnum(mu_star),
        fnum(j),
        fnum(jr),
        fnum(eps_bar),
        rows.join(", "),
    )
}

/// KKT gaps of an explicitly assembled candidate (direct-μ synthesis and
/// evaluate, where no solver ran).
fn certify_candidate(
    ld: &Loaded,
    policy: &AffinePolicy,
    mu: f64,
    j: f64,
    jr: f64,
    eps_bar: f64,
) -> Result<KktReport, Failure> {
    let solution = Solution {
        mu_star: mu,
        policy: policy.clone(),
        j,
        jr,
        eps_bar,
        status: SolveStatus::OptimalActive,
        kkt: KktReport {
            stationarity_gap: 0.0,
            primal_feasibility: 0.0,
            complementary_slackness: 0.0,
            passed: false,
        },
        trace: Vec::new(),
    };
    kkt_certificate(
        &ld.model,
        &ld.cost,
        &ld.stats,
        &solution,
        &KktTolerances::default(),
    )
    .map_err(Failure::from)
}

fn cmd_moments(common: &CommonArgs) -> Result<i32, Failure> {
    let ld = load(common)?;
    print!("{}", stats_json(&ld.stats));
    Ok(0)
}

/// Synthesize the policy the config asks for. Returns the policy, its cost
/// and risk, the effective ε̄, a status label, the certificate (absent for
/// stationary policies, whose finite-horizon certificate would only measure
/// the value-iteration tail), and the solver trace.
type Synthesis = (
    AffinePolicy,
    f64,
    f64,
    f64,
    &'static str,
    Option<KktReport>,
    Vec<(f64, f64)>,
);

fn synthesize_policy(ld: &Loaded) -> Result<Synthesis, Failure> {
    check_assumptions(ld)?;
    let solver = &ld.config.solver;
    match budget(ld)? {
        Budget::Mu(mu) => {
            let horizon = ld.model.require_horizon()?;
            if solver.steady {
                let steady =
                    steady_state(&ld.model, &ld.cost, &ld.stats, mu, solver.tol, solver.max_iter)?;
                let policy = steady.expand(horizon);
                let j = lqr_cost(&policy, &ld.model, &ld.stats, &ld.cost)?;
                let jr = risk_value(&policy, &ld.model, &ld.stats, &ld.cost.qc)?.jr;
                Ok((policy, j, jr, jr, "direct", None, vec![(mu, jr)]))
            } else {
                let policy = backward_pass(&ld.model, &ld.cost, &ld.stats, mu)?;
                let j = lqr_cost(&policy, &ld.model, &ld.stats, &ld.cost)?;
                let jr = risk_value(&policy, &ld.model, &ld.stats, &ld.cost.qc)?.jr;
                // With μ given directly the budget is whatever the policy
                // achieves; the certificate then checks stationarity alone.
                let kkt = certify_candidate(ld, &policy, mu, j, jr, jr)?;
                Ok((policy, j, jr, jr, "direct", Some(kkt), vec![(mu, jr)]))
            }
        }
        form => {
            if solver.steady {
                return Err(Failure::usage(
                    "solver.steady requires a direct multiplier budget (`mu`)",
                ));
            }
            let options = solver.bisection();
            let solution = match form {
                Budget::Epsilon(_) => {
                    solve_risk_constrained(&ld.model, &ld.cost, &ld.stats, &options)?
                }
                Budget::EpsilonBar(eb) => {
                    solve_with_eps_bar(&ld.model, &ld.cost, &ld.stats, eb, &options)?
                }
                Budget::Mu(_) => unreachable!("handled above"),
            };
            Ok((
                solution.policy,
                solution.j,
                solution.jr,
                solution.eps_bar,
                status_name(solution.status),
                Some(solution.kkt),
                solution.trace,
            ))
        }
    }
}

fn cmd_synthesize(common: &CommonArgs) -> Result<i32, Failure> {
    let ld = load(common)?;
    let (policy, j, jr, eps_bar, status, kkt, trace) = synthesize_policy(&ld)?;
    write_file(&ld, "policy.json", &policy_json(&policy))?;
    write_file(
        &ld,
        "solution.json",
        &solution_json(policy.mu, status, j, jr, eps_bar, kkt.as_ref(), &trace),
    )?;
    Ok(if status == "infeasible" { 2 } else { 0 })
}

fn cmd_evaluate(common: &CommonArgs, policy_path: &std::path::Path) -> Result<i32, Failure> {
    let ld = load(common)?;
    let text = std::fs::read_to_string(policy_path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", policy_path.display())))?;
    let policy = parse_policy(&text)?;
    policy.check_against(&ld.model)?;
    let j = lqr_cost(&policy, &ld.model, &ld.stats, &ld.cost)?;
    let jr = risk_value(&policy, &ld.model, &ld.stats, &ld.cost.qc)?.jr;
    let eps_bar = match ld.config.budget.as_ref().map(|b| b.resolve()).transpose()? {
        Some(Budget::Epsilon(e)) => epsilon_bar(e, policy.horizon(), &ld.stats, &ld.cost.qc)?,
        Some(Budget::EpsilonBar(eb)) => eb,
        // Without an explicit budget the constraint is anchored at the
        // achieved risk, so the report reduces to the stationarity check.
        Some(Budget::Mu(_)) | None => jr,
    };
    let kkt = certify_candidate(&ld, &policy, policy.mu, j, jr, eps_bar)?;
    let content = format!(
        "{{\n  \"mu\": {},\n  \"j\": {},\n  \"jr\": {},\n  \"eps_bar\": {},\n  \"kkt\": {}\n}}\n",
        fnum(policy.mu),
        fnum(j),
        fnum(jr),
        fnum(eps_bar),
        kkt_json(&kkt, "  "),
    );
    write_file(&ld, "evaluation.json", &content)?;
    Ok(0)
}

fn trajectory_csv(trajectories: &[Trajectory], n: usize, p: usize) -> String {
    let mut header = String::from("rollout,t");
    for i in 1..=n {
        header.push_str(&format!(",x_{i}"));
    }
    for j in 1..=p {
        header.push_str(&format!(",u_{j}"));
    }
    header.push_str(",stage_penalty,delta");

    let zero_input = DVector::zeros(p);
    let mut rows = Vec::new();
    for (r, traj) in trajectories.iter().enumerate() {
        let n_stages = traj.inputs.len();
        for t in 0..=n_stages {
            let mut row = vec![r.to_string(), t.to_string()];
            row.extend(traj.states[t].iter().map(|x| fnum(*x)));
            // The terminal stage has no input and the initial state no
            // prediction error; both columns read 0 there.
            let input = if t < n_stages { &traj.inputs[t] } else { &zero_input };
            row.extend(input.iter().map(|u| fnum(*u)));
            row.push(fnum(traj.stage_penalties[t]));
            row.push(fnum(if t == 0 { 0.0 } else { traj.pred_errors[t - 1] }));
            rows.push(row);
        }
    }
    csv(&header, rows.into_iter())
}

fn cmd_simulate(
    common: &CommonArgs,
    policy_path: Option<&std::path::Path>,
    trajectories: usize,
) -> Result<i32, Failure> {
    let ld = load(common)?;
    let policy = match policy_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            let policy = parse_policy(&text)?;
            policy.check_against(&ld.model)?;
            policy
        }
        None => {
            let (policy, _, _, _, status, _, _) = synthesize_policy(&ld)?;
            if status == "infeasible" {
                return Err(Failure {
                    code: 2,
                    message: "budget is infeasible; synthesize first to inspect the trace".into(),
                });
            }
            policy
        }
    };

    let n_rollouts = ld.config.sim.n_rollouts;
    let report = estimate(&policy, &ld.model, &ld.spec, &ld.cost, ld.seed, n_rollouts)?;
    let estimate_text = format!(
        "{{\n  \"j_hat\": {},\n  \"j_se\": {},\n  \"jr_raw_hat\": {},\n  \"jr_raw_se\": {},\n  \"n_rollouts\": {},\n  \"seed\": {}\n}}\n",
        fnum(report.j_hat),
        fnum(report.j_se),
        fnum(report.jr_raw_hat),
        fnum(report.jr_raw_se),
        report.n_rollouts,
        report.seed,
    );
    write_file(&ld, "estimate.json", &estimate_text)?;

    let per_rollout: Vec<Trajectory> = (0..n_rollouts)
        .into_par_iter()
        .map(|r| rollout(&policy, &ld.model, &ld.spec, &ld.cost, ld.seed, r as u64))
        .collect::<risklqr::Result<_>>()?;

    let summary = csv(
        "rollout,total_cost,sum_sq_pred_error",
        per_rollout.iter().enumerate().map(|(r, traj)| {
            vec![
                r.to_string(),
                fnum(traj.stage_penalties.iter().sum::<f64>()),
                fnum(traj.pred_errors.iter().map(|d| d * d).sum::<f64>()),
            ]
        }),
    );
    write_file(&ld, "summary.csv", &summary)?;

    let pooled: Vec<f64> = per_rollout
        .iter()
        .flat_map(|traj| traj.stage_penalties.iter().copied())
        .collect();
    let cdf = empirical_cdf(&pooled)?;
    let cdf_text = csv(
        "value,fraction",
        cdf.iter().map(|(v, f)| vec![fnum(*v), fnum(*f)]),
    );
    write_file(&ld, "stage_penalty_cdf.csv", &cdf_text)?;

    let dumped = trajectories.min(n_rollouts);
    write_file(
        &ld,
        "trajectories.csv",
        &trajectory_csv(
            &per_rollout[..dumped],
            ld.model.state_dim(),
            ld.model.input_dim(),
        ),
    )?;
    Ok(0)
}

fn cmd_sweep(common: &CommonArgs, mu_min: f64, mu_max: f64, points: usize) -> Result<i32, Failure> {
    let ld = load(common)?;
    check_assumptions(&ld)?;
    if !(mu_min > 0.0 && mu_min.is_finite() && mu_max >= mu_min && mu_max.is_finite()) {
        return Err(Failure::usage("need 0 < mu-min <= mu-max, both finite"));
    }
    if points == 0 {
        return Err(Failure::usage("need at least one sweep point"));
    }
    let grid: Vec<f64> = if points == 1 {
        vec![mu_min]
    } else {
        let (lo, hi) = (mu_min.log10(), mu_max.log10());
        (0..points)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (points - 1) as f64))
            .collect()
    };
    let mut rows = Vec::with_capacity(grid.len());
    for mu in grid {
        let policy = backward_pass(&ld.model, &ld.cost, &ld.stats, mu)?;
        let j = lqr_cost(&policy, &ld.model, &ld.stats, &ld.cost)?;
        let jr = risk_value(&policy, &ld.model, &ld.stats, &ld.cost.qc)?.jr;
        let rho = spectral_radius(&(&ld.model.a + &ld.model.b * &policy.gains[0]))?;
        rows.push(vec![fnum(mu), fnum(j), fnum(jr), fnum(rho)]);
    }
    write_file(
        &ld,
        "frontier.csv",
        &csv("mu,J,J_R,spectral_radius", rows.into_iter()),
    )?;
    Ok(0)
}
