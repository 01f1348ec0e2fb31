use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mvbsde::config::RunConfig;
use mvbsde::engine::{
    refine_epsilon, solve_random_horizon, subdiff_test, MultivaluedSolution, Problem, TestPath,
};
use mvbsde::generator::DriverKind;
use mvbsde::oracle::{linear_closed_form, tree_solve, TreeConfig, TreeSolution};
use mvbsde::sim::{martingale_pair, simulate, Clock, PairMethod, PathEnsemble};
use mvbsde::suites::{mollifier_suite, prox_suite, smooth_demo};
use mvbsde::verify::{
    check_apriori, check_def1, check_terminal, ito_residual, standard_martingales, Candidate,
};
use mvbsde::{io, Error, Exec, Result};

#[derive(Parser, Debug)]
#[command(
    name = "mvbsde",
    version,
    about = "Penalized and multivalued BSDE experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `numerics.seed` (or the suite seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reference solution reported next to the estimate.
    #[arg(long, global = true, value_enum, default_value_t = OracleKind::None)]
    oracle: OracleKind,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "MVBSDE_THREADS")]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OracleKind {
    Tree,
    Closed,
    None,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Proximal map identities over the convex catalog.
    ProxSuite {
        /// Repeat the suite with eps fixed to each entry.
        #[arg(long, value_delimiter = ',')]
        eps_list: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Mollifier bounds over the driver catalog.
    MollifierSuite {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        nodes: usize,
    },
    /// Solve along the eps schedule and write the solution.
    Solve,
    /// Print the eps refinement table; succeeds iff the Cauchy surrogate met the tolerance.
    Converge,
    /// Run the configured checks against a solved artifact.
    Verify {
        /// `summary.json` written by `solve`.
        #[arg(long)]
        solution: PathBuf,
    },
    /// Exponential smoothing convergence table.
    SmoothDemo {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.1, 0.05])]
        eps_list: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let c = &cli.common;
    let exec = Exec::Parallel;
    match &cli.cmd {
        Cmd::ProxSuite {
            eps_list,
            samples,
            inject_fault,
        } => {
            let seed = c.seed.unwrap_or(1);
            let rep = prox_suite(eps_list, *samples, seed, *inject_fault);
            print!("{}", rep.table());
            let echo = vec![
                format!("eps_list = {eps_list:?}"),
                format!("samples = {samples}"),
                format!("seed = {seed}"),
            ];
            if let Some(dir) = &c.out {
                io::ensure_dir(dir)?;
                io::write_json(&dir.join("prox_suite.json"), "prox-suite", &echo, &rep)?;
            }
            Ok(rep.pass())
        }
        Cmd::MollifierSuite { samples, nodes } => {
            let seed = c.seed.unwrap_or(1);
            let rep = mollifier_suite(*samples, seed, *nodes)?;
            print!("{}", rep.table());
            let echo = vec![
                format!("samples = {samples}"),
                format!("nodes = {nodes}"),
                format!("seed = {seed}"),
            ];
            if let Some(dir) = &c.out {
                io::ensure_dir(dir)?;
                io::write_json(
                    &dir.join("mollifier_suite.json"),
                    "mollifier-suite",
                    &echo,
                    &rep,
                )?;
            }
            Ok(rep.pass())
        }
        Cmd::Solve => {
            let cfg = load_config(c, true)?;
            let (ens, prob, sol) = solve(&cfg, exec)?;
            let dir = out_dir(c, &cfg);
            let (oracle, tree) = oracle_reference(c.oracle, &cfg, &prob, &ens, &sol, exec)?;
            print_solution(&sol);
            if let Some(o) = &oracle {
                println!("oracle: {o}");
            }
            io::ensure_dir(&dir)?;
            if let Some(tree) = &tree {
                io::write_tree_csv(&dir.join("tree.csv"), &cfg.echo(), tree)?;
            }
            io::write_solution_csv(&dir.join("solution.csv"), &cfg.echo(), &sol, cfg.csv_paths)?;
            let result = json!({ "summary": sol.summary(), "oracle": oracle });
            io::write_json(&dir.join("summary.json"), "solve", &cfg.echo(), &result)?;
            Ok(true)
        }
        Cmd::Converge => {
            let cfg = load_config(c, true)?;
            let (_, _, sol) = solve(&cfg, exec)?;
            println!(
                "{:>10} {:>14} {:>16} {:>12}",
                "eps", "residual", "penalty energy", "Y0"
            );
            for (j, eps) in sol.eps_schedule.iter().enumerate() {
                let res = if j == 0 {
                    "-".to_string()
                } else {
                    format!("{:.6e}", sol.cauchy_residuals[j - 1])
                };
                println!(
                    "{eps:>10} {res:>14} {:>16.6e} {:>12.6}",
                    sol.penalty_energy[j], sol.y0_by_eps[j]
                );
            }
            println!("converged: {}", sol.converged);
            let dir = out_dir(c, &cfg);
            io::ensure_dir(&dir)?;
            io::write_json(
                &dir.join("converge.json"),
                "converge",
                &cfg.echo(),
                &sol.summary(),
            )?;
            Ok(sol.converged)
        }
        Cmd::Verify { solution } => {
            let cfg = load_config(c, true)?;
            if !solution.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("solution artifact {} not found", solution.display()),
                )));
            }
            let art = io::read_json(solution)?;
            verify(&cfg, &art, &out_dir(c, &cfg), exec)
        }
        Cmd::SmoothDemo { eps_list } => {
            let cfg = load_config(c, false)?;
            let rep = smooth_demo(&cfg.grid, eps_list, cfg.opts.degree, exec)?;
            print!("{}", rep.table());
            println!(
                "decreasing: {}  sup bound: {}",
                rep.decreasing, rep.bound_pass
            );
            if c.out.is_some() || c.config.is_some() {
                let dir = out_dir(c, &cfg);
                io::ensure_dir(&dir)?;
                let mut echo = cfg.echo();
                echo.push(format!("smooth.eps_list = {eps_list:?}"));
                io::write_json(&dir.join("smooth.json"), "smooth-demo", &echo, &rep)?;
            }
            Ok(rep.pass())
        }
    }
}

fn load_config(c: &Common, required: bool) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(
                io.kind(),
                format!("{}: {io}", p.display()),
            )),
            other => other,
        })?,
        None if required => {
            return Err(Error::InvalidSpec(
                "--config is required for this command".into(),
            ))
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set("numerics.seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir))
}

fn solve(cfg: &RunConfig, exec: Exec) -> Result<(PathEnsemble, Problem, MultivaluedSolution)> {
    let prob = cfg.problem()?;
    let mut ens = simulate(&cfg.grid, exec)?;
    ens.compute_weights(&prob.gen, cfg.p, cfg.lambda)?;
    let opts = cfg.solver_opts(exec);
    let sol = if cfg.grid.exit.is_some() {
        solve_random_horizon(&ens, &prob, &cfg.eps_schedule, cfg.tol, &opts)?
    } else {
        refine_epsilon(&ens, &prob, &cfg.eps_schedule, cfg.tol, &opts)?
    };
    Ok((ens, prob, sol))
}

fn print_solution(sol: &MultivaluedSolution) {
    for a in 0..sol.m {
        println!(
            "Y0[{a}] = {:.6} +/- {:.6} (SE, projected)",
            sol.y0[a], sol.y0_se[a]
        );
        println!(
            "Y0[{a}] = {:.6} (penalized, eps = {})",
            sol.last.y0[a], sol.last.eps
        );
    }
    for (j, r) in sol.cauchy_residuals.iter().enumerate() {
        println!(
            "residual eps {} -> {}: {r:.6e}",
            sol.eps_schedule[j],
            sol.eps_schedule[j + 1]
        );
    }
}

fn tree_supported(cfg: &RunConfig) -> Result<()> {
    if cfg.grid.state_dim != 1
        || cfg.grid.brownian_dim != 1
        || cfg.grid.clock != Clock::None
        || cfg.grid.exit.is_some()
    {
        return Err(Error::Unsupported(
            "the tree oracle needs m = k = 1, no clock and a fixed horizon".into(),
        ));
    }
    Ok(())
}

fn oracle_reference(
    kind: OracleKind,
    cfg: &RunConfig,
    prob: &Problem,
    ens: &PathEnsemble,
    sol: &MultivaluedSolution,
    exec: Exec,
) -> Result<(Option<Value>, Option<TreeSolution>)> {
    let y0 = sol.y0[0];
    match kind {
        OracleKind::None => Ok((None, None)),
        OracleKind::Tree => {
            tree_supported(cfg)?;
            let tc = TreeConfig::new(cfg.tree_steps, cfg.grid.horizon)?;
            let tree = tree_solve(tc, &prob.gen, &prob.phi, &prob.eta, exec)?;
            let v = json!({
                "kind": "tree",
                "steps": cfg.tree_steps,
                "reference": tree.root_y(),
                "reference_push": tree.root_k(),
                "difference": y0 - tree.root_y(),
                "difference_penalized": sol.last.y0[0] - tree.root_y(),
                "std_err": sol.y0_se[0],
            });
            Ok((Some(v), Some(tree)))
        }
        OracleKind::Closed => {
            let rho = match &prob.gen.f {
                DriverKind::Zero => 0.0,
                DriverKind::Affine {
                    slope,
                    intercept,
                    z_gain,
                } if *intercept == 0.0 && *z_gain == 0.0 => -slope,
                other => {
                    return Err(Error::Unsupported(format!(
                        "no closed form for driver {other}"
                    )))
                }
            };
            if prob.has_penalty() || cfg.grid.clock != Clock::None {
                return Err(Error::Unsupported(
                    "closed form needs zero obstacles and no clock".into(),
                ));
            }
            let cf = linear_closed_form(rho, &prob.eta, ens)?;
            let v = json!({
                "kind": "closed",
                "reference": cf[0],
                "difference": y0 - cf[0],
                "std_err": sol.y0_se[0],
            });
            Ok((Some(v), None))
        }
    }
}

fn verify(cfg: &RunConfig, art: &Value, dir: &Path, exec: Exec) -> Result<bool> {
    let mut verdicts = Vec::new();
    let mut all = true;
    let mut verdict = |name: &str, pass: bool, detail: Value| {
        println!("{name:<12} {}", if pass { "PASS" } else { "FAIL" });
        all &= pass;
        verdicts.push(json!({ "check": name, "pass": pass, "detail": detail }));
    };

    let echo_ok = art["config"] == json!(cfg.echo()) && art["command"] == "solve";
    let (ens, prob, sol) = solve(cfg, exec)?;
    let y0_ok = art["result"]["summary"]["y0"] == serde_json::to_value(&sol.y0)?;
    verdict(
        "artifact",
        echo_ok && y0_ok,
        json!({ "config_matches": echo_ok, "y0_matches": y0_ok }),
    );

    let steps = ens.steps();
    let windows = [(0, steps), (0, steps / 2), (steps / 2, steps)];
    let c = Candidate::from_solution(&sol);
    let degree = cfg.opts.degree;
    let pair = martingale_pair(&prob.eta, &ens, PairMethod::ClosedForm, degree, exec)?;
    let mts = standard_martingales(&c, &ens, &prob, &pair, 0.1, degree, exec)?;
    if cfg.checks.variational {
        let rep = check_def1(
            &c,
            &ens,
            &prob,
            &cfg.checks.p_list,
            &mts,
            &cfg.checks.deltas,
            &windows,
            exec,
        )?;
        verdict("variational", rep.pass(), serde_json::to_value(&rep)?);
    }
    if cfg.checks.terminal {
        let rep = check_terminal(&c, &ens, &pair, cfg.p);
        verdict("terminal", rep.pass, serde_json::to_value(&rep)?);
    }
    if cfg.checks.apriori {
        let reps: Vec<_> = cfg
            .checks
            .p_list
            .iter()
            .map(|&p| check_apriori(&c, &ens, &prob, p))
            .collect();
        let pass = reps.iter().all(|r| r.finite);
        verdict("apriori", pass, serde_json::to_value(&reps)?);
    }
    if cfg.checks.subdiff && prob.has_penalty() {
        let tests = [TestPath::Constant(mts[0].m_at(0, 0).to_vec())];
        let rep = subdiff_test(&sol, &ens, &prob, &tests, &windows, exec);
        verdict("subdiff", rep.pass(), serde_json::to_value(&rep)?);
    }
    if cfg.checks.ito {
        let delta = if cfg.p < 2.0 { 0.01 } else { 0.0 };
        let rep = ito_residual(&c, &ens, cfg.p, delta, exec)?;
        verdict("ito", rep.residual.is_finite(), serde_json::to_value(&rep)?);
    }
    io::ensure_dir(dir)?;
    io::write_json(
        &dir.join("verify.json"),
        "verify",
        &cfg.echo(),
        &json!({ "pass": all, "checks": verdicts }),
    )?;
    Ok(all)
}
