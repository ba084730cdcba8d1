use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use membrane_core::config::{ExperimentConfig, Preset};
use membrane_core::degenerate::{
    delta_sweep, empirical_lambda0, solve_linear, verify_energy_inequality, write_energy_csv, AuditConfig, Lemma,
};
use membrane_core::grid::{write_fields_binary, Field, FieldBundle, Grid2D};
use membrane_core::nash_moser::{linear_start, perturbed_start, uniqueness_check, ConvergenceReport, Driver, RunStatus};
use membrane_core::oracle::{compare, direct_solve, write_diagnostics_csv, Clock, DirectSolver, OracleConfig, Scheme};
use membrane_core::rescale::{data_backward, from_w, reconstruct_history, rescale_backward};
use membrane_core::LabError;

#[derive(Parser)]
#[command(name = "membrane-lab", version, about = "Small-amplitude membrane experiments on the torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Direct integration of the rescaled problem; trajectory and constraint series.
    Simulate,
    /// Nash-Moser iteration with a per-level convergence report.
    NashMoser,
    /// Energy inequality audit on the linearized toy problem.
    EnergyCheck,
    /// Nash-Moser signature fit together with the regularization sweep.
    ConvergenceReport,
    /// Rescaled solve mapped back against a direct long-horizon solve.
    RescaleCompare,
    /// Two admissible starts iterated to their limits and compared.
    Uniqueness,
}

#[derive(Args)]
struct Opts {
    /// one of nondegenerate-small, nondegenerate-stiff, degenerate-zero, degenerate-tiny, relaxed-levi
    #[arg(long, global = true)]
    preset: Option<String>,
    /// TOML experiment file; mutually exclusive with --preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    grid: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    dt: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    levels: Option<usize>,
    /// regularization: sets both the Nash-Moser delta0 and the toy-problem delta
    #[arg(long, global = true, allow_negative_numbers = true)]
    delta: Option<f64>,
    /// positive number or "auto"
    #[arg(long, global = true)]
    lambda: Option<String>,
    /// energy lemma: 2.3, 2.4, 2.5 or 2.6
    #[arg(long, global = true)]
    lemma: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

enum Failure {
    Config(String),
    Solver(String),
    Divergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Divergence(_) => 4,
        }
    }
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(_) | LabError::InvalidArgument(_) => Failure::Config(e.to_string()),
            LabError::Divergence { .. } | LabError::BallExit { .. } => Failure::Divergence(e.to_string()),
            _ => Failure::Solver(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Solver(format!("io: {e}"))
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(o: &Opts) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match (&o.config, &o.preset) {
        (Some(_), Some(_)) => return Err(Failure::Config("--config and --preset are mutually exclusive".into())),
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => name.parse::<Preset>()?.config(),
        (None, None) => Preset::NondegenerateSmall.config(),
    };
    if let Some(n) = o.grid {
        cfg.problem.grid = n;
    }
    if let Some(dt) = o.dt {
        cfg.solver.dt = dt;
    }
    if let Some(eps) = o.epsilon {
        cfg.problem.epsilon = eps;
    }
    if let Some(l) = o.levels {
        cfg.solver.levels = l;
    }
    if let Some(d) = o.delta {
        cfg.solver.delta0 = d;
        cfg.energy.delta = d;
    }
    if let Some(l) = &o.lambda {
        cfg.energy.lambda = l.clone();
    }
    if let Some(l) = &o.lemma {
        cfg.energy.lemma = l.clone();
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> std::result::Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Outcome {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Failure::Solver(e.to_string()))?;
    writeln!(f)?;
    Ok(())
}

fn dump(dir: &Path, name: &str, grid: &Grid2D, b: &FieldBundle) -> Outcome {
    let fields: Vec<&Field> = b.components.iter().collect();
    write_fields_binary(create(dir, name)?, grid, &fields)?;
    Ok(())
}

fn run_nash_moser(cfg: &ExperimentConfig, dir: &Path) -> std::result::Result<ConvergenceReport, Failure> {
    let p = cfg.membrane_problem()?;
    let s = cfg.schedule()?;
    let nm = cfg.nash_moser(&p.grid);
    let driver = Driver::new(&p, &s, &nm)?;
    let (state, report) = driver.run(None)?;
    fs::write(dir.join("levels.csv"), report.to_csv())?;
    let v = from_w(&state.w, &p.v0, &p.v1)?;
    dump(dir, "final_v.bin", &p.grid, v.at(v.len() - 1))?;
    Ok(report)
}

fn status_outcome(report: &ConvergenceReport) -> Outcome {
    match report.status {
        RunStatus::Divergence | RunStatus::BallExit => Err(Failure::Divergence(format!(
            "iteration stopped with {:?} at level {:?}",
            report.status, report.failure_level
        ))),
        _ => Ok(()),
    }
}

fn simulate(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let p = cfg.membrane_problem()?;
    let sol = direct_solve(&p, cfg.solver.dt, Scheme::Rk4)?;
    let residual = DirectSolver::new(&p.grid, &p.u0)?.discrete_residual(&sol);
    write_diagnostics_csv(create(dir, "constraint.csv")?, &sol)?;
    let mut traj = create(dir, "trajectory.csv")?;
    writeln!(traj, "t,v_l2,v_sup,U_l2")?;
    for i in 0..sol.v.len() {
        let v = sol.v.at(i);
        writeln!(
            traj,
            "{},{:e},{:e},{:e}",
            sol.v.time(i),
            membrane_core::grid::bundle_l2(&p.grid, v),
            v.max_abs(),
            membrane_core::grid::bundle_l2(&p.grid, sol.big_u.at(i))
        )?;
    }
    let last = sol.v.len() - 1;
    dump(dir, "final_v.bin", &p.grid, sol.v.at(last))?;
    dump(dir, "final_U.bin", &p.grid, sol.big_u.at(last))?;
    let summary = json!({
        "command": "simulate",
        "preset": cfg.problem.preset.name(),
        "outside_hypotheses": cfg.problem.preset.outside_hypotheses(),
        "dt": sol.v.dt(),
        "steps": last,
        "cfl_limit": sol.cfl_limit,
        "max_constraint": sol.max_constraint(),
        "hamiltonian_drift": sol.hamiltonian_drift(),
        "discrete_residual": residual,
    });
    write_json(dir, "simulate.json", &summary)?;
    println!(
        "simulate: {} steps, max constraint {:.3e}, hamiltonian drift {:.3e}",
        last,
        sol.max_constraint(),
        sol.hamiltonian_drift()
    );
    Ok(())
}

fn nash_moser(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let report = run_nash_moser(cfg, dir)?;
    write_json(dir, "convergence_report.json", &json!(report))?;
    println!(
        "nash-moser: {:?} after {} level(s), last residual {:.3e}, d_fit {:.3}",
        report.status,
        report.levels.len() - 1,
        report.levels.last().map(|r| r.norm_e).unwrap_or(f64::NAN),
        report.d_fit
    );
    status_outcome(&report)
}

fn energy_check(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let toy = cfg.toy_problem()?;
    let sol = solve_linear(&toy, cfg.energy.dt)?;
    let lemma: Lemma = cfg.energy.lemma.parse()?;
    let audit = AuditConfig { constant: cfg.energy.constant, sobolev: cfg.energy.sobolev, ..AuditConfig::default() };
    let (lambda, lambda0) = if cfg.energy.lambda == "auto" {
        let l0 = empirical_lambda0(&toy, &sol, lemma, &audit, 1e-3, 1e3)?;
        (if l0.is_finite() { l0 * (1.0 + 1e-6) } else { 1e3 }, Some(l0))
    } else {
        (cfg.energy.lambda.parse::<f64>().map_err(|e| Failure::Config(e.to_string()))?, None)
    };
    let report = verify_energy_inequality(&toy, &sol, lemma, lambda, &audit)?;
    write_energy_csv(create(dir, "energy.csv")?, &toy, &sol, lambda)?;
    write_json(
        dir,
        "energy_report.json",
        &json!({
            "preset": cfg.problem.preset.name(),
            "lambda0": lambda0.map(|l| if l.is_finite() { json!(l) } else { json!("infinite") }),
            "report": report,
        }),
    )?;
    println!("energy-check: lemma {:?} at lambda {:.4}, pass = {}", lemma, lambda, report.pass);
    Ok(())
}

fn convergence_report(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let report = run_nash_moser(cfg, dir)?;
    let toy = cfg.base_toy_problem()?;
    let deltas = [1e-1, 1e-2, 1e-3, 1e-4];
    let sweep = delta_sweep(&toy, &deltas, cfg.energy.dt)?;
    let monotone = sweep.windows(2).all(|w| w[1].1 < w[0].1);
    let mut csv = create(dir, "delta_sweep.csv")?;
    writeln!(csv, "delta,difference_l2")?;
    for (d, n) in &sweep {
        writeln!(csv, "{d:e},{n:e}")?;
    }
    let above = report.above_floor().len();
    write_json(
        dir,
        "convergence_summary.json",
        &json!({
            "preset": cfg.problem.preset.name(),
            "status": report.status,
            "levels_above_floor": above,
            "slope_fit": report.slope_fit,
            "target_slope": std::f64::consts::LN_2,
            "d_fit": report.d_fit,
            "delta_sweep": sweep,
            "delta_sweep_monotone": monotone,
            "report": report,
        }),
    )?;
    println!(
        "convergence-report: {above} level(s) above the floor, slope {:.3} (target {:.3}), delta sweep monotone = {monotone}",
        report.slope_fit,
        std::f64::consts::LN_2
    );
    status_outcome(&report)
}

fn rescale_compare(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let p = cfg.membrane_problem()?;
    let s = cfg.schedule()?;
    let nm = cfg.nash_moser(&p.grid);
    let (state, report) = Driver::new(&p, &s, &nm)?.run(None)?;
    status_outcome(&report)?;
    let v = from_w(&state.w, &p.v0, &p.v1)?;
    let back = rescale_backward(&v, p.epsilon)?;
    let dt = back.dt() * cfg.solver.oracle_step_ratio;
    let horizon = back.end_time();
    let steps = (horizon / dt).round() as usize;
    let (v0, v1) = data_backward(&p.v0, &p.v1, p.epsilon);
    let oracle = DirectSolver::new(&p.grid, &p.u0)?;
    let mut ocfg = OracleConfig::new(dt, steps, Clock::Original);
    ocfg.seed = cfg.seed;
    let (bounded, cmp, sol) = match oracle.solve(&v0, &v1, &ocfg) {
        Ok(sol) => (true, Some(compare(&p.grid, &back, &sol.v)?), Some(sol)),
        Err(LabError::BlowUp { t }) => {
            println!("rescale-compare: direct solve blew up at t = {t}");
            (false, None, None)
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(c) = &cmp {
        let mut csv = create(dir, "rescale_compare.csv")?;
        writeln!(csv, "t,l2,h1,sup,rel_l2")?;
        for e in &c.snapshots {
            writeln!(csv, "{},{:e},{:e},{:e},{:e}", e.t, e.l2, e.h1, e.sup, e.rel_l2)?;
        }
        let u = reconstruct_history(&p.u0, &back)?;
        dump(dir, "final_u.bin", &p.grid, u.at(u.len() - 1))?;
    }
    write_json(
        dir,
        "rescale_compare.json",
        &json!({
            "preset": cfg.problem.preset.name(),
            "epsilon": p.epsilon,
            "original_horizon": horizon,
            "bounded": bounded,
            "relative_l2": cmp.as_ref().map(|c| c.relative_l2),
            "interpolated": cmp.as_ref().map(|c| c.interpolated),
            "max_constraint": sol.as_ref().map(|s| s.max_constraint()),
            "comparison": cmp,
        }),
    )?;
    match &cmp {
        Some(c) => println!("rescale-compare: relative L2 {:.3e} over [0, {horizon:.3}]", c.relative_l2),
        None => return Err(Failure::Solver("direct solve blew up".into())),
    }
    Ok(())
}

fn uniqueness(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let p = cfg.membrane_problem()?;
    let s = cfg.schedule()?;
    let nm = cfg.nash_moser(&p.grid);
    let wa = linear_start(&p, nm.dt)?;
    let wb = perturbed_start(&p.grid, &wa, 0.1, cfg.seed)?;
    let (_, _, rep) = uniqueness_check(&p, &s, &nm, Some(wa), Some(wb), 1e-6)?;
    write_json(dir, "uniqueness.json", &json!(rep))?;
    println!("uniqueness: relative difference {:.3e}, agree = {}", rep.relative_difference, rep.agree);
    status_outcome(&rep.report_a)?;
    status_outcome(&rep.report_b)
}

fn execute(cli: &Cli) -> Outcome {
    let cfg = load_config(&cli.opts)?;
    let dir = &cli.opts.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    if cfg.problem.preset.outside_hypotheses() {
        println!("note: preset {} lies outside the theorem's hypotheses", cfg.problem.preset.name());
    }
    match cli.command {
        Command::Simulate => simulate(&cfg, dir),
        Command::NashMoser => nash_moser(&cfg, dir),
        Command::EnergyCheck => energy_check(&cfg, dir),
        Command::ConvergenceReport => convergence_report(&cfg, dir),
        Command::RescaleCompare => rescale_compare(&cfg, dir),
        Command::Uniqueness => uniqueness(&cfg, dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Config(m) if m.starts_with("config error") => m.clone(),
                Failure::Config(m) => format!("config error: {m}"),
                Failure::Solver(m) => format!("solver failure: {m}"),
                Failure::Divergence(m) => format!("divergence: {m}"),
            };
            eprintln!("{msg}");
            ExitCode::from(f.code())
        }
    }
}
