//! Experiment harness around the crt-records library: tree fixture
//! generation and the statistical verification suites, with deterministic
//! seeding and structured CSV/JSON output.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crt_records::analytics;
use crt_records::crt_sampler::{sample_excursion_tree, sample_spanned_tree, Params};
use crt_records::randkit::{ks_critical_99, ks_statistic, SeedSpec};
use crt_records::record_process::{
    coupled_convergence, martingale_checks, rayleigh_check, simulate_halfline,
};
use crt_records::removed_mass::{
    asymptotics_sweep, girsanov_mass_check, removal_replicate, theta_identities,
};

const BUILD_ID: &str = concat!("crt-records-", env!("CARGO_PKG_VERSION"));

#[derive(Parser)]
#[command(name = "crt-records", version, about = "Record-process simulation and verification on the Brownian continuum random tree")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a tree fixture: a nested spanned tree (with --n) or an
    /// excursion-grid tree (with --grid).
    SampleTree(SampleArgs),
    /// Run one verification suite and report pass/fail.
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Branching parameter alpha.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Total tree mass r.
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    /// Master seed; every replicate derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Leaf count of the spanned tree.
    #[arg(long, conflicts_with = "grid")]
    n: Option<usize>,
    /// Step count of the excursion grid.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum)]
    suite: Suite,
    /// Leaf count where the suite samples spanned trees.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Excursion grid steps where the suite needs grid trees.
    #[arg(long, default_value_t = 20_000)]
    grid: usize,
    #[arg(long, default_value_t = 200)]
    replicates: usize,
    /// Multiplies every statistical threshold; > 1 loosens, < 1 tightens.
    #[arg(long, default_value_t = 1.0)]
    threshold_scale: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Debug)]
enum Suite {
    Rayleigh,
    Moments,
    Convergence,
    Stickbreak,
    Masses,
    Analytics,
}

/// Everything a report needs to be reproduced.
#[derive(Serialize, Clone)]
struct RunConfig {
    alpha: f64,
    r: f64,
    n: usize,
    grid: usize,
    replicates: usize,
    seed: u64,
    suite: String,
    threshold_scale: f64,
    build: &'static str,
}

#[derive(Serialize)]
struct SuiteReport {
    config: RunConfig,
    pass: bool,
    checks: Vec<Check>,
}

#[derive(Serialize)]
struct Check {
    name: String,
    value: f64,
    target: f64,
    tolerance: f64,
    pass: bool,
}

impl Check {
    fn within(name: &str, value: f64, target: f64, tolerance: f64) -> Self {
        Check {
            name: name.to_string(),
            value,
            target,
            tolerance,
            pass: (value - target).abs() <= tolerance,
        }
    }

    fn below(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.to_string(),
            value,
            target: 0.0,
            tolerance: limit,
            pass: value <= limit,
        }
    }

    fn flag(name: &str, value: bool) -> Self {
        Check {
            name: name.to_string(),
            value: value as u8 as f64,
            target: 1.0,
            tolerance: 0.0,
            pass: value,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("CRT_RECORDS_THREADS") {
        match threads.parse::<usize>() {
            Ok(k) if k >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
            _ => {
                eprintln!("error: CRT_RECORDS_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::SampleTree(args) => {
            let text = cmd_sample_tree(&args)?;
            emit(&args.common, &text)?;
            Ok(true)
        }
        Cmd::Verify(args) => {
            let params = Params::new(args.common.alpha, args.common.r)?;
            guard_power(&args)?;
            let config = RunConfig {
                alpha: args.common.alpha,
                r: args.common.r,
                n: args.n,
                grid: args.grid,
                replicates: args.replicates,
                seed: args.common.seed,
                suite: format!("{:?}", args.suite).to_lowercase(),
                threshold_scale: args.threshold_scale,
                build: BUILD_ID,
            };
            let (checks, csv) = match args.suite {
                Suite::Rayleigh => suite_rayleigh(params, &args)?,
                Suite::Moments => suite_moments(params, &args)?,
                Suite::Convergence => suite_convergence(params, &args)?,
                Suite::Stickbreak => suite_stickbreak(params, &args)?,
                Suite::Masses => suite_masses(params, &args)?,
                Suite::Analytics => suite_analytics(params, &args)?,
            };
            let pass = checks.iter().all(|c| c.pass);
            let text = match args.common.format {
                Format::Json => {
                    let report = SuiteReport { config, pass, checks };
                    serde_json::to_string_pretty(&report)? + "\n"
                }
                Format::Csv => csv,
            };
            emit(&args.common, &text)?;
            Ok(pass)
        }
    }
}

fn emit(common: &CommonArgs, text: &str) -> anyhow::Result<()> {
    match &common.out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Refuse configurations whose statistical power is too low for the
/// suite's thresholds to mean anything.
fn guard_power(args: &VerifyArgs) -> anyhow::Result<()> {
    let min = match args.suite {
        Suite::Rayleigh => 100,
        Suite::Convergence | Suite::Masses => 20,
        Suite::Moments => 1_000,
        Suite::Stickbreak => 1_000,
        Suite::Analytics => 1,
    };
    if args.replicates < min {
        bail!(
            "suite {:?} is underpowered with {} replicates (needs at least {min})",
            args.suite,
            args.replicates
        );
    }
    if !(args.threshold_scale > 0.0) {
        bail!("--threshold-scale must be positive");
    }
    Ok(())
}

fn cmd_sample_tree(args: &SampleArgs) -> anyhow::Result<String> {
    let params = Params::new(args.common.alpha, args.common.r)?;
    let seed = SeedSpec::new(args.common.seed, 0);
    match (args.n, args.grid) {
        (Some(n), None) => {
            if n == 0 {
                bail!("--n must be at least 1");
            }
            let sample = sample_spanned_tree(params, n, seed)?;
            match args.common.format {
                Format::Json => {
                    #[derive(Serialize)]
                    struct Fixture<'a> {
                        alpha: f64,
                        r: f64,
                        n: usize,
                        seed: u64,
                        build: &'static str,
                        neveu: String,
                        eta: &'a [f64],
                    }
                    Ok(serde_json::to_string_pretty(&Fixture {
                        alpha: params.alpha,
                        r: params.r,
                        n,
                        seed: args.common.seed,
                        build: BUILD_ID,
                        neveu: sample.tree.to_neveu_string(),
                        eta: &sample.eta,
                    })? + "\n")
                }
                Format::Csv => Ok(sample.tree.to_neveu_string()),
            }
        }
        (None, Some(grid)) => {
            if grid < 2 {
                bail!("--grid must be at least 2");
            }
            let tree = sample_excursion_tree(params, grid, seed)?;
            match args.common.format {
                Format::Json => {
                    #[derive(Serialize)]
                    struct Fixture<'a> {
                        alpha: f64,
                        r: f64,
                        grid: usize,
                        seed: u64,
                        build: &'static str,
                        step_mass: f64,
                        heights: &'a [f64],
                    }
                    Ok(serde_json::to_string_pretty(&Fixture {
                        alpha: params.alpha,
                        r: params.r,
                        grid,
                        seed: args.common.seed,
                        build: BUILD_ID,
                        step_mass: tree.step_mass,
                        heights: &tree.heights,
                    })? + "\n")
                }
                Format::Csv => {
                    let mut out = String::from("index,height\n");
                    for (i, h) in tree.heights.iter().enumerate() {
                        writeln!(out, "{i},{h}").unwrap();
                    }
                    Ok(out)
                }
            }
        }
        _ => bail!("sample-tree needs exactly one of --n or --grid"),
    }
}

fn suite_rayleigh(params: Params, args: &VerifyArgs) -> anyhow::Result<(Vec<Check>, String)> {
    let ks_limit = 0.05 * args.threshold_scale;
    let report = rayleigh_check(params, args.n, args.replicates, args.common.seed, ks_limit)?;
    let m1 = analytics::theta_moment_exact(params, 1)?;
    let m2 = analytics::theta_moment_exact(params, 2)?;
    let s = args.threshold_scale;
    let checks = vec![
        Check::below("ks_distance_rayleigh", report.ks_distance, ks_limit),
        Check::within("mean_theta_hat", report.mean_theta, m1, 3.0 * s * report.se_theta),
        Check::within(
            "mean_theta_hat_sq",
            report.mean_theta_sq,
            m2,
            3.0 * s * report.se_theta_sq,
        ),
    ];
    let mut csv =
        String::from("replicate,n,L_n,h_root,theta_m,x_star,theta_hat,z\n");
    for row in &report.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.replicate, row.n, row.l_n, row.h_root, row.theta_m, row.x_star, row.theta_hat, row.z
        )
        .unwrap();
    }
    Ok((checks, csv))
}

fn suite_moments(params: Params, args: &VerifyArgs) -> anyhow::Result<(Vec<Check>, String)> {
    // one fixed tree fixture from the seed, moments over mark realizations
    let n = args.n.min(64).max(2);
    let sample = sample_spanned_tree(params, n, SeedSpec::new(args.common.seed, u64::MAX))?;
    let leaves = sample.tree.leaves();
    let e1 = analytics::conditional_moment(&sample.tree, &leaves, params, 1)?;
    let e2 = analytics::conditional_moment(&sample.tree, &leaves, params, 2)?;
    let ((m1, s1), (m2, s2)) =
        analytics::conditional_moment_mc(&sample.tree, params, args.replicates, args.common.seed)?;
    let s = args.threshold_scale;
    let checks = vec![
        Check::within("conditional_mean_order_1", m1, e1, 3.0 * s * s1),
        Check::within("conditional_mean_order_2", m2, e2, 3.0 * s * s2),
    ];
    let csv = checks_csv(&checks);
    Ok((checks, csv))
}

fn suite_convergence(params: Params, args: &VerifyArgs) -> anyhow::Result<(Vec<Check>, String)> {
    let checkpoints: Vec<usize> = [256usize, 1024, 4096]
        .into_iter()
        .filter(|&c| c <= args.n.max(256))
        .collect();
    let points = coupled_convergence(params, &checkpoints, args.replicates, args.common.seed)?;
    let mut checks = Vec::new();
    for w in points.windows(2) {
        checks.push(Check::flag(
            &format!("median_gap_decreasing_{}_{}", w[0].n, w[1].n),
            w[1].median_gap < w[0].median_gap,
        ));
    }
    let last = points.last().unwrap();
    checks.push(Check::below(
        &format!("median_gap_at_{}", last.n),
        last.median_gap,
        0.10 * args.threshold_scale,
    ));
    let mut csv = String::from("n,median_gap,mean_scaled_x\n");
    for p in &points {
        writeln!(csv, "{},{},{}", p.n, p.median_gap, p.mean_scaled_x).unwrap();
    }
    Ok((checks, csv))
}

fn suite_stickbreak(params: Params, args: &VerifyArgs) -> anyhow::Result<(Vec<Check>, String)> {
    let s = args.threshold_scale;
    let mut checks = Vec::new();
    for &q0 in &[0.5, 1.0, 4.0] {
        let points = martingale_checks(
            params,
            &[0.5, 1.0, 2.0],
            q0,
            0,
            args.replicates,
            args.common.seed,
        )?;
        for p in &points {
            checks.push(Check::within(
                &format!("martingale_N_q0_{q0}_x_{}", p.x),
                p.mean_n,
                0.0,
                3.0 * s * p.se_n,
            ));
            checks.push(Check::within(
                &format!("martingale_M_q0_{q0}_x_{}", p.x),
                p.mean_m,
                0.0,
                3.0 * s * p.se_m,
            ));
        }
    }
    // stick-breaking: the first record value is uniform on (0, q0)
    let q0 = 1.0;
    let mut firsts: Vec<f64> = (0..args.replicates as u64)
        .filter_map(|i| {
            simulate_halfline(params, 50.0, Some(q0), 0, SeedSpec::new(args.common.seed, i))
                .ok()
                .and_then(|p| p.jumps.first().map(|j| j.1 / q0))
        })
        .collect();
    firsts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let d = ks_statistic(&firsts, |x| x.clamp(0.0, 1.0))?;
    checks.push(Check::below(
        "first_jump_uniformity_ks",
        d,
        ks_critical_99(firsts.len()) * s,
    ));
    let csv = checks_csv(&checks);
    Ok((checks, csv))
}

fn suite_masses(params: Params, args: &VerifyArgs) -> anyhow::Result<(Vec<Check>, String)> {
    let s = args.threshold_scale;
    let mut checks = Vec::new();
    let mut csv = String::from("replicate,theta_i,sigma_i\n");
    let mut worst_rel = 0.0f64;
    let mut worst_mass = 0.0f64;
    for i in 0..args.replicates as u64 {
        let events = removal_replicate(params, args.grid, args.common.seed, i)?;
        let idr = theta_identities(&events)?;
        worst_rel = worst_rel.max(idr.max_rel_error);
        worst_mass = worst_mass.max(idr.mass_defect / params.r);
        for &(t, m) in &events.events {
            writeln!(csv, "{i},{t},{m}").unwrap();
        }
    }
    checks.push(Check::below("theta_identity_rel_error", worst_rel, 1e-9));
    checks.push(Check::below("mass_conservation_rel_error", worst_mass, 1e-9));
    let n_grid = [16usize, 256];
    for (tag, grid) in [("", args.grid), ("_grid2x", 2 * args.grid)] {
        let pts = asymptotics_sweep(
            params,
            grid,
            &n_grid,
            args.replicates,
            args.common.seed + 1,
        )?;
        let fine = pts.last().unwrap();
        checks.push(Check::within(
            &format!("a_ratio_n256{tag}"),
            fine.a_ratio,
            1.0,
            0.2 * s,
        ));
        checks.push(Check::within(
            &format!("b_ratio_n256{tag}"),
            fine.b_ratio,
            1.0,
            0.2 * s,
        ));
        let coarse = &pts[0];
        checks.push(Check::flag(
            &format!("ratios_improve_with_n{tag}"),
            (fine.a_ratio - 1.0).abs() <= (coarse.a_ratio - 1.0).abs()
                && (fine.b_ratio - 1.0).abs() <= (coarse.b_ratio - 1.0).abs(),
        ));
    }
    let g = girsanov_mass_check(
        params.alpha,
        1.0,
        1.0,
        args.grid.min(4000),
        args.replicates.max(1000),
        args.common.seed + 2,
        s,
    )?;
    checks.push(Check::within(
        "girsanov_mu_1_q_1",
        g.estimate,
        g.target,
        3.0 * s * g.se + 0.02 * s * g.target,
    ));
    Ok((checks, csv))
}

fn suite_analytics(params: Params, _args: &VerifyArgs) -> anyhow::Result<(Vec<Check>, String)> {
    let mut checks = Vec::new();
    for &mu in &[0.5, 1.0, 2.0] {
        for &lambda in &[0.5, 1.0, 2.0] {
            let lp = analytics::LaplaceParams::new(lambda, mu, params.alpha)?;
            let id = analytics::laplace_sigma_theta(lp)?;
            checks.push(Check::below(
                &format!("laplace_mixing_mu_{mu}_lambda_{lambda}"),
                id.rel_error,
                1e-6,
            ));
            for &q in &[0.5, 1.0, 2.0] {
                checks.push(Check::below(
                    &format!("int_ff_residual_q_{q}_mu_{mu}_lambda_{lambda}"),
                    analytics::int_ff_residual(q, lp)?.abs(),
                    1e-8,
                ));
            }
        }
    }
    let lr = analytics::lap_rayleigh_identity(1.0, 1.0)?;
    checks.push(Check::below("lap_rayleigh_identity", lr.rel_error, 1e-8));
    let exp = analytics::f_expansion_check(1.0, 1.0, params.alpha)?;
    checks.push(Check::below("f_expansion_first_derivative", exp.err_first, 1e-6));
    checks.push(Check::below("f_expansion_second_derivative", exp.err_second, 1e-4));
    let mut encadrement = true;
    for i in 1..=20 {
        for j in 1..=20 {
            let q = 0.1 * i as f64;
            let r = 0.1 * j as f64;
            let pr = Params::new(params.alpha, r)?;
            let h = analytics::h_function(q, pr)?;
            let gap = q * r - h;
            let cap =
                0.5 * (std::f64::consts::PI * params.alpha).sqrt() * q * q * r.powf(1.5);
            encadrement &= gap > 0.0 && gap <= cap * (1.0 + 1e-12);
        }
    }
    checks.push(Check::flag("h_function_encadrement_grid", encadrement));
    let big = analytics::h0_moment(10_000, 2.0, params)?;
    let asym = (params.r / params.alpha) / 10_000.0 * 0.25 * 2.0;
    checks.push(Check::within("h0_moment_asymptotic", big / asym, 1.0, 0.01));
    let csv = checks_csv(&checks);
    Ok((checks, csv))
}

fn checks_csv(checks: &[Check]) -> String {
    let mut csv = String::from("name,value,target,tolerance,pass\n");
    for c in checks {
        writeln!(csv, "{},{},{},{},{}", c.name, c.value, c.target, c.tolerance, c.pass).unwrap();
    }
    csv
}
