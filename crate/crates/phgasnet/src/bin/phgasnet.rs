//! Command-line front end: run scenarios, build reduced bases, train
//! quadrature rules, run reduced models, and compare trajectories.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid configuration or input
//! data, 3 numerical failure (divergence, rank deficiency, infeasible
//! accuracy target).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use phgasnet::diagnostics::{
    balance_report, ph_condition_error, projection_error, structure_report, trajectory_error,
    write_balance_csv,
};
use phgasnet::error::Error;
use phgasnet::hyper::{assemble_complexity_reduced, deim_reduce, learn_weights, QuadBudget};
use phgasnet::io::{
    load_matrix, load_snapshots, preset, save_matrix, save_snapshots, ScenarioConfig, PRESET_NAMES,
};
use phgasnet::mor::{
    check_compatibility, galerkin_reduce, parity_warnings, reduce_network, space_ops,
    RankSpec, ReductionBasis, ReductionMode,
};
use phgasnet::network::{EffortMaps, QuadratureRule};
use phgasnet::solver::simulate;

#[derive(Parser)]
#[command(name = "phgasnet", version, about = "Structure-preserving gas network simulation and model reduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Scenario source: a JSON file or a built-in preset.
#[derive(Args)]
struct ScenarioArg {
    /// Scenario JSON file.
    #[arg(long, conflicts_with = "preset")]
    scenario: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long, value_parser = PRESET_NAMES)]
    preset: Option<String>,
    /// Override the element count of every pipe.
    #[arg(long)]
    elements: Option<usize>,
    /// Override the time step.
    #[arg(long)]
    tau: Option<f64>,
    /// Override the final time.
    #[arg(long)]
    t_f: Option<f64>,
}

impl ScenarioArg {
    fn load(&self) -> Result<ScenarioConfig, Error> {
        let mut cfg = match (&self.scenario, &self.preset) {
            (Some(path), None) => ScenarioConfig::load(path)?,
            (None, Some(name)) => preset(name)?,
            _ => {
                return Err(Error::InvalidConfig(
                    "pass exactly one of --scenario or --preset".into(),
                ))
            }
        };
        if let Some(n) = self.elements {
            for p in &mut cfg.pipes {
                p.n_elements = n;
            }
        }
        if let Some(tau) = self.tau {
            cfg.solver.tau = tau;
        }
        if let Some(t_f) = self.t_f {
            cfg.solver.t_f = t_f;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full-order model and store the trajectory.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Output trajectory directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write a per-step balance CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Density-space proper orthogonal decomposition of a trajectory:
    /// prints the weighted singular values.
    Pod {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Trajectory directory with training snapshots.
        #[arg(long)]
        snapshots: PathBuf,
        /// Number of singular values to print (all when omitted).
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Build a compatibility-preserving reduced basis from a trajectory.
    Reduce {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Trajectory directory with training snapshots.
        #[arg(long)]
        snapshots: PathBuf,
        /// Density rank (network mode), e.g. `--rank 8`.
        #[arg(long, conflicts_with = "per_pipe_rank")]
        rank: Option<usize>,
        /// Per-pipe density ranks, e.g. `--per-pipe-rank 6,4,4,4,4,6`.
        #[arg(long, value_delimiter = ',')]
        per_pipe_rank: Option<Vec<usize>>,
        /// Skip the energy-equation augmentation of the density snapshots.
        #[arg(long)]
        no_energy_augment: bool,
        /// Output basis directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn an empirical quadrature rule for the nonlinear terms.
    EqTrain {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Trajectory directory with training snapshots.
        #[arg(long)]
        snapshots: PathBuf,
        /// Basis directory (from `reduce`).
        #[arg(long)]
        basis: PathBuf,
        /// Global element budget.
        #[arg(long, conflicts_with = "per_pipe_budget")]
        budget: Option<usize>,
        /// Per-pipe element budgets, e.g. `--per-pipe-budget 12,9,9,9,9,12`.
        #[arg(long, value_delimiter = ',')]
        per_pipe_budget: Option<Vec<usize>>,
        /// Relative training-residual target.
        #[arg(long, default_value_t = 1e-4)]
        delta: f64,
        /// Output file for the weights.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a reduced model and store the lifted trajectory.
    RunRom {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Basis directory (from `reduce`).
        #[arg(long)]
        basis: PathBuf,
        /// Quadrature-rule file (from `eq-train`) for a complexity-reduced
        /// run.
        #[arg(long)]
        rule: Option<PathBuf>,
        /// Replace the nonlinear terms by discrete empirical interpolation
        /// of this rank (trained on the given trajectory).
        #[arg(long, requires = "train", conflicts_with = "rule")]
        deim: Option<usize>,
        /// Training trajectory for the interpolation baseline.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Output trajectory directory (lifted, full-dimensional states).
        #[arg(long)]
        out: PathBuf,
        /// Also write a per-step balance CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Validate a scenario file and report the model dimensions.
    Validate {
        #[command(flatten)]
        scenario: ScenarioArg,
    },
    /// Compare two trajectories of the same scenario.
    Compare {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Reference trajectory directory.
        #[arg(long)]
        reference: PathBuf,
        /// Approximate trajectory directory.
        #[arg(long)]
        approx: PathBuf,
        /// Basis directory: additionally report the projection error of the
        /// reduced space and the reduced-space structural defect.
        #[arg(long)]
        basis: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successes; everything else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Maps library errors to process exit codes: configuration/input problems
/// are 2, numerical failures are 3.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidTopology(_)
        | Error::DimensionMismatch(_)
        | Error::Format(_)
        | Error::Io(_)
        | Error::Json(_) => 2,
        Error::NonPhysicalState(_)
        | Error::BoundaryDegeneracy(_)
        | Error::NewtonDivergence { .. }
        | Error::LinearSolve(_)
        | Error::InconsistentInitialData(_)
        | Error::RankDeficiency(_)
        | Error::StructureViolation(_)
        | Error::AccuracyInfeasible { .. } => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { scenario, out, csv } => {
            let cfg = scenario.load()?;
            let (sys, y0) = cfg.build()?;
            let start = Instant::now();
            let snaps = simulate(&sys, &y0, &cfg.solver)?;
            let wall = start.elapsed();
            save_snapshots(&out, &cfg, &snaps)?;
            let report = balance_report(&sys, &snaps, &EffortMaps::identity(), None)?;
            if let Some(path) = csv {
                write_balance_csv(&report, std::fs::File::create(path)?)?;
            }
            println!(
                "simulated '{}': {} unknowns, {} steps, {:.3}s wall",
                cfg.name,
                sys.layout.dim,
                snaps.times.len() - 1,
                wall.as_secs_f64()
            );
            println!(
                "max mass defect {:.3e}, min dissipation {:.3e}",
                report.max_mass_defect, report.min_dissipation
            );
            Ok(())
        }
        Command::Pod { scenario, snapshots, rank } => {
            let cfg = scenario.load()?;
            let (sys, _) = cfg.build()?;
            let snaps = load_snapshots(&snapshots, Some(&cfg))?;
            let ops = space_ops(&sys, &(0..sys.n_pipes()).collect::<Vec<_>>());
            let s_rho = snaps.states.rows(0, sys.layout.n_rho).into_owned();
            // Weighted singular spectrum: scale the rows by the square roots
            // of the diagonal density mass matrix.
            let mut y = s_rho;
            for j in 0..y.nrows() {
                let w = ops.m_rho_diag[j].sqrt();
                for c in 0..y.ncols() {
                    y[(j, c)] *= w;
                }
            }
            let sv = y.singular_values();
            let show = rank.unwrap_or(sv.len()).min(sv.len());
            println!("density singular values ({} of {}):", show, sv.len());
            for (k, s) in sv.iter().take(show).enumerate() {
                println!("{:4}  {:.6e}", k + 1, s);
            }
            Ok(())
        }
        Command::Reduce {
            scenario,
            snapshots,
            rank,
            per_pipe_rank,
            no_energy_augment,
            out,
        } => {
            let cfg = scenario.load()?;
            let (sys, _) = cfg.build()?;
            let snaps = load_snapshots(&snapshots, Some(&cfg))?;
            let spec = match (rank, per_pipe_rank) {
                (Some(r), None) => RankSpec::Network(r),
                (None, Some(rs)) => RankSpec::PerPipe(rs),
                _ => {
                    return Err(Error::InvalidConfig(
                        "pass exactly one of --rank or --per-pipe-rank".into(),
                    ))
                }
            };
            for warning in parity_warnings(&sys, &spec) {
                eprintln!("warning: {warning}");
            }
            let (basis, rom) = reduce_network(&sys, &snaps.states, &spec, !no_energy_augment)?;
            let report = check_compatibility(&basis, &sys);
            save_basis(&out, &cfg, &basis)?;
            println!(
                "reduced {} -> {} unknowns (density {}, flux {}, energy {})",
                sys.layout.dim,
                rom.dim_reduced(),
                basis.r_rho(),
                basis.r_m(),
                basis.r_e()
            );
            println!("compatibility defect {:.3e}", report.max_defect());
            Ok(())
        }
        Command::EqTrain {
            scenario,
            snapshots,
            basis,
            budget,
            per_pipe_budget,
            delta,
            out,
        } => {
            let cfg = scenario.load()?;
            let (sys, _) = cfg.build()?;
            let snaps = load_snapshots(&snapshots, Some(&cfg))?;
            let basis = load_basis(&basis, &cfg)?;
            let budget = match (budget, per_pipe_budget) {
                (Some(n), None) => QuadBudget::Network(n),
                (None, Some(ns)) => QuadBudget::PerPipe(ns),
                _ => {
                    return Err(Error::InvalidConfig(
                        "pass exactly one of --budget or --per-pipe-budget".into(),
                    ))
                }
            };
            let rule = learn_weights(&sys, &basis, &snaps.states, delta, &budget)?;
            save_matrix(
                &out,
                &DMatrix::from_iterator(rule.weights.len(), 1, rule.weights.iter().copied()),
            )?;
            println!(
                "learned rule: {} of {} elements active",
                rule.active_elements(),
                sys.layout.n_rho
            );
            Ok(())
        }
        Command::RunRom { scenario, basis, rule, deim, train, out, csv } => {
            let cfg = scenario.load()?;
            let (sys, y0) = cfg.build()?;
            let basis = load_basis(&basis, &cfg)?;
            let rule = rule
                .map(|p| -> Result<QuadratureRule, Error> {
                    let w = load_matrix(p)?;
                    Ok(QuadratureRule {
                        weights: DVector::from_iterator(w.len(), w.iter().copied()),
                    })
                })
                .transpose()?;
            let start = Instant::now();
            let (snaps_lifted, maps, rule_used) = match deim {
                Some(r) => {
                    let train_dir = train.expect("clap enforces --train with --deim");
                    let train_snaps = load_snapshots(&train_dir, Some(&cfg))?;
                    let model = deim_reduce(&sys, basis, &train_snaps.states, r)?;
                    let y0_r = model.rom.project_state(&y0);
                    let red = simulate(&model, &y0_r, &cfg.solver)?;
                    (model.rom.lift_snapshots(&red), model.rom.effort_maps().clone(), None)
                }
                None => {
                    let rom = match rule {
                        Some(rule) => assemble_complexity_reduced(&sys, basis, rule)?,
                        None => galerkin_reduce(&sys, basis)?,
                    };
                    let y0_r = rom.project_state(&y0);
                    let red = simulate(&rom, &y0_r, &cfg.solver)?;
                    (rom.lift_snapshots(&red), rom.effort_maps().clone(), rom.rule.clone())
                }
            };
            let wall = start.elapsed();
            save_snapshots(&out, &cfg, &snaps_lifted)?;
            let report = balance_report(&sys, &snaps_lifted, &maps, rule_used.as_ref())?;
            if let Some(path) = csv {
                write_balance_csv(&report, std::fs::File::create(path)?)?;
            }
            println!(
                "reduced run '{}': {} steps, {:.3}s wall, max mass defect {:.3e}",
                cfg.name,
                snaps_lifted.times.len() - 1,
                wall.as_secs_f64(),
                report.max_mass_defect
            );
            Ok(())
        }
        Command::Validate { scenario } => {
            let cfg = scenario.load()?;
            let (sys, y0) = cfg.build()?;
            let rep = structure_report(
                &sys,
                &y0,
                0.0,
                &EffortMaps::identity(),
                None,
                None,
            )?;
            println!(
                "'{}' is valid: {} pipes, {} nodes, {} unknowns",
                cfg.name,
                sys.n_pipes(),
                sys.graph.node_ids.len(),
                sys.layout.dim
            );
            println!(
                "initial structure: skew defect {:.3e}, min dissipation eig {:.3e}, \
                 gradient defect {:.3e}",
                rep.skew_defect, rep.min_dissipation_eig, rep.gradient_defect
            );
            Ok(())
        }
        Command::Compare { scenario, reference, approx, basis } => {
            let cfg = scenario.load()?;
            let (sys, _) = cfg.build()?;
            let refs = load_snapshots(&reference, Some(&cfg))?;
            let apx = load_snapshots(&approx, Some(&cfg))?;
            let err = trajectory_error(&sys, &refs, &apx)?;
            println!("trajectory error {:.6e}", err.max);
            if let Some(dir) = basis {
                let basis = load_basis(&dir, &cfg)?;
                let rom = galerkin_reduce(&sys, basis)?;
                let proj = projection_error(&rom, &refs)?;
                println!("projection error {:.6e}", proj.max);
                let defect = ph_condition_error(
                    &sys,
                    &apx,
                    rom.effort_maps(),
                    None,
                    Some(rom.lift_matrix()),
                )?;
                println!("reduced gradient defect {:.6e}", defect);
            }
            Ok(())
        }
    }
}

/// Writes a basis directory: the three block matrices, the density
/// singular values, and a metadata file binding it to the scenario.
fn save_basis(dir: &Path, cfg: &ScenarioConfig, basis: &ReductionBasis) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    save_matrix(dir.join("v_rho.bin"), &basis.v_rho)?;
    save_matrix(dir.join("v_m.bin"), &basis.v_m)?;
    save_matrix(dir.join("v_e.bin"), &basis.v_e)?;
    save_matrix(
        dir.join("sv.bin"),
        &DMatrix::from_iterator(basis.singular_values.len(), 1, basis.singular_values.iter().copied()),
    )?;
    let meta = serde_json::json!({
        "version": 1,
        "mode": match basis.mode {
            ReductionMode::Network => "network",
            ReductionMode::PerPipe => "per_pipe",
        },
        "config_sha256": cfg.hash()?,
    });
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Loads a basis directory written by [`save_basis`], rejecting bases from
/// a different scenario.
fn load_basis(dir: &Path, cfg: &ScenarioConfig) -> Result<ReductionBasis, Error> {
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    if meta["config_sha256"] != serde_json::Value::String(cfg.hash()?) {
        return Err(Error::InvalidConfig(
            "basis was built for a different scenario".into(),
        ));
    }
    let mode = match meta["mode"].as_str() {
        Some("network") => ReductionMode::Network,
        Some("per_pipe") => ReductionMode::PerPipe,
        other => {
            return Err(Error::Format(format!("unknown basis mode {other:?}")));
        }
    };
    let sv = load_matrix(dir.join("sv.bin"))?;
    Ok(ReductionBasis {
        v_rho: load_matrix(dir.join("v_rho.bin"))?,
        v_m: load_matrix(dir.join("v_m.bin"))?,
        v_e: load_matrix(dir.join("v_e.bin"))?,
        mode,
        singular_values: sv.iter().copied().collect(),
    })
}
