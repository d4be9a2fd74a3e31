//! Command-line surface: `equilibrium`, `simulate`, `verify`, and
//! `experiment` subcommands over a JSON run configuration.
//!
//! Exit codes are a stable contract: 0 success, 1 usage/config/IO error,
//! 2 numerical or verification failure. Outputs are byte-identical across
//! reruns of the same config and seeds.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{
    convergence_report, run_deterministic, run_stochastic_opts, SpendingMatrix, StochasticOptions,
    Trajectory,
};
use crate::equilibrium::{solve_tome, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::experiments::{
    build_experiment_setup, cluster_users, load_groups, load_preferences, run_experiment_seed,
    aggregate_trajectories, ExperimentParams, GroupAssignment, LoadOptions, PositionWeights,
    RankingStrategy,
};
use crate::fileio::{
    fmt_float, write_aggregate_csv, write_convergence_csv, write_events_csv,
    write_experiment_csv, write_trajectory_csv, ExperimentSection, Mode, RunFile, VerifySection,
};
use crate::market::PurchaseLedger;
use crate::stats::quartiles;
use crate::verify::{run_verification, VerifyOptions};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;

#[derive(Parser)]
#[command(
    name = "tomarket",
    version,
    about = "Trial-offer market equilibria, influence dynamics, and ranking-strategy experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the market equilibrium and write tome.json.
    Equilibrium(CommonArgs),
    /// Run the deterministic dynamic or multi-seed stochastic simulations.
    Simulate(CommonArgs),
    /// Run the numerical identity battery and write verify.json.
    Verify(VerifyArgs),
    /// Run the ranking-strategy pipeline over a preference dataset.
    Experiment(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed list, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Max parallel per-seed jobs (default: rayon's core count).
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the solver tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Self-test hook: corrupt the analytic gradient so the battery must
    /// fail with exit code 2.
    #[arg(long, hide = true)]
    corrupt_gradient_self_test: bool,
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Equilibrium(args) => cmd_equilibrium(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::Experiment(args) => cmd_experiment(&args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NoConvergence { .. } => ExitCode::from(EXIT_NUMERIC),
                _ => ExitCode::from(EXIT_CONFIG),
            }
        }
    }
}

struct Ctx {
    run: RunFile,
    /// Directory of the run file; input paths resolve against it.
    base: PathBuf,
    out: PathBuf,
}

fn load_ctx(args: &CommonArgs, allowed: &[Mode]) -> Result<Ctx> {
    let run = RunFile::load(&args.config)?;
    if !allowed.contains(&run.mode) {
        return Err(Error::InvalidConfig(format!(
            "run file mode {:?} does not match this subcommand",
            run.mode
        )));
    }
    let base = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let out = args
        .output
        .clone()
        .or_else(|| run.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)?;
    Ok(Ctx { run, base, out })
}

fn resolved_seeds(args: &CommonArgs, run: &RunFile) -> Result<Vec<u64>> {
    let seeds = args
        .seeds
        .clone()
        .or_else(|| run.seeds.clone())
        .unwrap_or_default();
    if seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "`seeds`: this mode needs at least one seed (config field or --seeds)".into(),
        ));
    }
    Ok(seeds)
}

fn required_steps(run: &RunFile) -> Result<u64> {
    run.steps
        .ok_or_else(|| Error::InvalidConfig("run file is missing the `steps` field".into()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match jobs {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
        _ => f(),
    }
}

fn cmd_equilibrium(args: &CommonArgs) -> Result<u8> {
    let ctx = load_ctx(args, &[Mode::Equilibrium])?;
    let cfg = ctx.run.resolve_market(&ctx.base)?;
    let tol = args.tol.or(ctx.run.tol).unwrap_or(DEFAULT_TOL);
    let path = ctx.out.join("tome.json");

    match solve_tome(&cfg, tol) {
        Ok(tome) => {
            write_json(&path, &tome)?;
            println!(
                "tome: method={:?} residual={:.3e} iterations={} -> {}",
                tome.method,
                tome.residual,
                tome.iterations,
                path.display()
            );
            Ok(EXIT_OK)
        }
        Err(Error::NoConvergence { best, residual, .. }) => {
            write_json(&path, best.as_ref())?;
            eprintln!(
                "no convergence: best residual {residual:.3e} > tol {tol:.3e}; best iterate written to {}",
                path.display()
            );
            Ok(EXIT_NUMERIC)
        }
        Err(e) => Err(e),
    }
}

/// Quartile aggregation used when the equilibrium target is unavailable (or
/// there is a single seed): distance and gap columns stay empty.
fn write_plain_aggregate(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    use std::io::Write;
    writeln!(
        w,
        "t,dist_p25,dist_p50,dist_p75,gap_p25,gap_p50,gap_p75,eff_p25,eff_p50,eff_p75,ent_p25,ent_p50,ent_p75"
    )?;
    let times: Vec<u64> = trajectories[0].records.iter().map(|r| r.time).collect();
    for (k, &t) in times.iter().enumerate() {
        let eff: Vec<f64> = trajectories.iter().map(|tr| tr.records[k].efficiency).collect();
        let ent: Vec<f64> = trajectories.iter().map(|tr| tr.records[k].entropy).collect();
        let e = quartiles(&eff);
        let h = quartiles(&ent);
        writeln!(
            w,
            "{t},,,,,,,{},{},{},{},{},{}",
            fmt_float(e[0]),
            fmt_float(e[1]),
            fmt_float(e[2]),
            fmt_float(h[0]),
            fmt_float(h[1]),
            fmt_float(h[2]),
        )?;
    }
    Ok(())
}

fn cmd_simulate(args: &CommonArgs) -> Result<u8> {
    let ctx = load_ctx(args, &[Mode::Deterministic, Mode::Stochastic])?;
    let cfg = ctx.run.resolve_market(&ctx.base)?;
    let tol = args.tol.or(ctx.run.tol).unwrap_or(DEFAULT_TOL);
    let steps = required_steps(&ctx.run)?;
    let record_every = ctx.run.record_every.unwrap_or(1000);

    if ctx.run.mode == Mode::Deterministic {
        let trajectory =
            run_deterministic(&cfg, &SpendingMatrix::uniform(&cfg), steps, record_every)?;
        let path = ctx.out.join("trajectory_deterministic.csv");
        write_trajectory_csv(BufWriter::new(File::create(&path)?), &trajectory)?;
        let last = trajectory.final_record();
        println!(
            "deterministic: {} steps, final residual {:.3e} -> {}",
            steps,
            last.residual,
            path.display()
        );
        return Ok(if last.residual <= tol { EXIT_OK } else { EXIT_NUMERIC });
    }

    let seeds = resolved_seeds(args, &ctx.run)?;
    let opts = StochasticOptions {
        record_every,
        record_events: ctx.run.record_events.unwrap_or(false),
        ..StochasticOptions::default()
    };
    let d0 = PurchaseLedger::ones(cfg.num_items());
    let trajectories: Vec<Trajectory> = in_pool(args.jobs, || {
        seeds
            .par_iter()
            .map(|&seed| run_stochastic_opts(&cfg, &d0, steps, seed, &opts))
            .collect::<Result<Vec<_>>>()
    })?;

    for (seed, trajectory) in seeds.iter().zip(&trajectories) {
        let path = ctx.out.join(format!("trajectory_seed{seed}.csv"));
        write_trajectory_csv(BufWriter::new(File::create(&path)?), trajectory)?;
        if let Some(events) = &trajectory.events {
            let path = ctx.out.join(format!("events_seed{seed}.csv"));
            write_events_csv(BufWriter::new(File::create(&path)?), events)?;
        }
    }

    let aggregate_path = ctx.out.join("aggregate.csv");
    let target = solve_tome(&cfg, tol).ok();
    match (&target, trajectories.len() >= 2) {
        (Some(tome), true) => {
            let report = convergence_report(&cfg, &trajectories, tome)?;
            write_convergence_csv(BufWriter::new(File::create(&aggregate_path)?), &report)?;
            let final_median = report.rows.last().map(|r| r.distance_l1[1]).unwrap_or(f64::NAN);
            println!(
                "stochastic: {} seeds x {} purchases, final median L1 distance to equilibrium {:.6e} -> {}",
                seeds.len(),
                steps,
                final_median,
                aggregate_path.display()
            );
        }
        _ => {
            write_plain_aggregate(&aggregate_path, &trajectories)?;
            println!(
                "stochastic: {} seeds x {} purchases (no equilibrium target) -> {}",
                seeds.len(),
                steps,
                aggregate_path.display()
            );
        }
    }
    Ok(EXIT_OK)
}

fn cmd_verify(args: &VerifyArgs) -> Result<u8> {
    let ctx = load_ctx(&args.common, &[Mode::Verify])?;
    let cfg = ctx.run.resolve_market(&ctx.base)?;
    let section = ctx.run.verify.clone().unwrap_or_else(VerifySection::default);
    let opts = VerifyOptions {
        random_markets: section.random_markets.unwrap_or(20),
        seed: section.seed.unwrap_or(0),
        corrupt_gradient: args.corrupt_gradient_self_test,
    };

    let report = run_verification(&cfg, &opts)?;
    let path = ctx.out.join("verify.json");
    write_json(&path, &report)?;

    for check in &report.checks {
        match (&check.skipped, check.passed) {
            (Some(reason), _) => println!("SKIP {} ({reason})", check.name),
            (None, true) => println!(
                "PASS {} (max deviation {:.3e} <= {:.0e}, {} markets)",
                check.name,
                check.max_deviation.unwrap_or(0.0),
                check.tolerance,
                check.markets
            ),
            (None, false) => println!(
                "FAIL {} (max deviation {:.3e} > {:.0e})",
                check.name,
                check.max_deviation.unwrap_or(f64::NAN),
                check.tolerance
            ),
        }
    }
    if report.all_passed {
        println!("verify: all checks passed -> {}", path.display());
        Ok(EXIT_OK)
    } else {
        eprintln!("verify: FAILED checks: {}", report.failed_names().join(", "));
        Ok(EXIT_NUMERIC)
    }
}

#[derive(Serialize)]
struct ExperimentManifest<'a> {
    schema: &'a str,
    preferences: String,
    format: &'a str,
    mask: Option<String>,
    normalize: bool,
    num_users: usize,
    num_items: usize,
    num_groups: usize,
    homogeneous: bool,
    groups_source: String,
    feedback: f64,
    steps: u64,
    record_every: u64,
    window: u64,
    unseen_only: bool,
    strategies: Vec<&'a str>,
    seeds: &'a [u64],
    iota_source: String,
    iota_cutoff: usize,
    iota: &'a [f64],
    kept_items: &'a [usize],
    pruned_items: &'a [usize],
    visibility_empty_cells: usize,
    quality_empty_cells: usize,
}

fn cmd_experiment(args: &CommonArgs) -> Result<u8> {
    let ctx = load_ctx(args, &[Mode::Experiment])?;
    let section: &ExperimentSection = ctx.run.experiment.as_ref().ok_or_else(|| {
        Error::InvalidConfig("run file is missing the `experiment` section".into())
    })?;
    let seeds = resolved_seeds(args, &ctx.run)?;
    let steps = required_steps(&ctx.run)?;

    let pref_path = ctx.base.join(&section.preferences);
    let load_opts = LoadOptions {
        mask_path: section.mask.as_ref().map(|m| ctx.base.join(m)),
        normalize: section.normalize.unwrap_or(false),
    };
    let data = load_preferences(&pref_path, section.format.into(), &load_opts)?;

    let (groups, groups_source) = match (&section.groups, section.num_groups) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig(
                "`groups` and `num_groups` are mutually exclusive".into(),
            ))
        }
        (Some(path), None) => {
            let full = ctx.base.join(path);
            (load_groups(&full, data.num_users())?, format!("file:{}", path.display()))
        }
        (None, Some(1)) => (
            GroupAssignment::single_group(data.num_users()),
            "single-group".into(),
        ),
        (None, Some(m)) => {
            let seed = section.cluster_seed.unwrap_or(0);
            (cluster_users(&data, m, seed)?, format!("kmeans(m={m}, seed={seed})"))
        }
        (None, None) => {
            return Err(Error::InvalidConfig(
                "experiment section needs `groups` or `num_groups`".into(),
            ))
        }
    };

    let setup = build_experiment_setup(&data, &groups)?;
    if !setup.visibility_empty_cells.is_empty() || !setup.quality_empty_cells.is_empty() {
        eprintln!(
            "warning: {} visibility and {} quality (group, item) cells had no source entries and defaulted to 0",
            setup.visibility_empty_cells.len(),
            setup.quality_empty_cells.len()
        );
    }
    if !setup.pruned_items.is_empty() {
        eprintln!(
            "warning: pruned {} item(s) with zero visibility*quality for every group: {:?}",
            setup.pruned_items.len(),
            setup.pruned_items
        );
    }

    let n_items = setup.kept_items.len();
    let cutoff = section.iota_cutoff.unwrap_or(50);
    let (iota, iota_source) = match &section.iota {
        Some(path) => {
            let full = ctx.base.join(path);
            (
                PositionWeights::from_file(&full, n_items)?,
                format!("file:{}", path.display()),
            )
        }
        None => (
            PositionWeights::reciprocal(n_items, cutoff),
            "reciprocal-default".into(),
        ),
    };

    let params = ExperimentParams {
        feedback: section.feedback,
        steps,
        record_every: ctx.run.record_every.unwrap_or(1000),
        window: section.window.unwrap_or(1000),
        unseen_only: section.unseen_only.unwrap_or(false),
    };
    let strategies: Vec<RankingStrategy> = section
        .strategies
        .clone()
        .map(|names| names.into_iter().map(RankingStrategy::from).collect())
        .unwrap_or_else(|| {
            vec![
                RankingStrategy::Random,
                RankingStrategy::Popularity,
                RankingStrategy::Quality,
            ]
        });

    let mut aggregate_rows = Vec::new();
    for &strategy in &strategies {
        let runs = in_pool(args.jobs, || {
            seeds
                .par_iter()
                .map(|&seed| run_experiment_seed(&setup, &iota, strategy, &params, seed))
                .collect::<Result<Vec<_>>>()
        })?;
        for run in &runs {
            let path = ctx
                .out
                .join(format!("experiment_{}_seed{}.csv", strategy.name(), run.seed));
            write_experiment_csv(BufWriter::new(File::create(&path)?), run)?;
        }
        aggregate_rows.extend(aggregate_trajectories(&runs)?);
        println!(
            "experiment[{}]: {} seeds x {} arrivals done",
            strategy.name(),
            seeds.len(),
            steps
        );
    }

    let aggregate_path = ctx.out.join("aggregate.csv");
    write_aggregate_csv(BufWriter::new(File::create(&aggregate_path)?), &aggregate_rows)?;

    let manifest = ExperimentManifest {
        schema: "tomarket.experiment-manifest/1",
        preferences: section.preferences.display().to_string(),
        format: match section.format {
            crate::fileio::FormatName::Dense => "dense",
            crate::fileio::FormatName::Triplet => "triplet",
        },
        mask: section.mask.as_ref().map(|m| m.display().to_string()),
        normalize: load_opts.normalize,
        num_users: data.num_users(),
        num_items: data.num_items(),
        num_groups: groups.num_groups(),
        homogeneous: groups.num_groups() == 1,
        groups_source,
        feedback: params.feedback,
        steps,
        record_every: params.record_every,
        window: params.window,
        unseen_only: params.unseen_only,
        strategies: strategies.iter().map(|s| s.name()).collect(),
        seeds: &seeds,
        iota_source,
        iota_cutoff: iota.cutoff(),
        iota: iota.iota(),
        kept_items: &setup.kept_items,
        pruned_items: &setup.pruned_items,
        visibility_empty_cells: setup.visibility_empty_cells.len(),
        quality_empty_cells: setup.quality_empty_cells.len(),
    };
    write_json(&ctx.out.join("manifest.json"), &manifest)?;
    println!(
        "experiment: aggregate -> {}, manifest -> {}",
        aggregate_path.display(),
        ctx.out.join("manifest.json").display()
    );
    Ok(EXIT_OK)
}
