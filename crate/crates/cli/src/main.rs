//! Command-line front end for the learning-coefficient toolkit: exact
//! rational tables, posterior sweeps over `(n, replication)` grids,
//! sweep-versus-sweep comparison reports, and the brute-force
//! volume-scaling oracle.
//!
//! Exit codes: 0 on success, 2 on validation or I/O errors, 3 when more
//! than 20% of a sweep's records were flagged by convergence diagnostics
//! (the artifacts are still written in that case).

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcbm_slt::error::Error;
use pcbm_slt::experiment::{
    estimate_rlct_slope_from_sweep, estimate_rlct_wbic_for_config, run_compare, run_sweep,
    ExperimentConfig,
};
use pcbm_slt::model::make_ground_truth;
use pcbm_slt::rational::Rational;
use pcbm_slt::rlct::{
    gen_error_gap_lower, rlct_cbm, rlct_pcbm_upper, rlct_pcbm_upper_categorical, rlct_rrr,
};
use pcbm_slt::seed::{mix_seed, stream};
use pcbm_slt::shape::{CategoricalShape, PcbmShape, RrrShape};
use pcbm_slt::svg::{line_plot, Axes, Series, PALETTE};
use pcbm_slt::volume::{volume_scaling_lambda, VolumeErrorFn, VolumeScalingReport};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pcbm-slt",
    version,
    about = "Learning coefficients and Bayesian generalization experiments \
             for linear concept bottleneck models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the exact learning-coefficient table for one shape
    Rlct(RlctArgs),
    /// Run (or resume) the sweep described by a JSON config file
    Sweep(SweepArgs),
    /// Compare a partially supervised sweep against a fully supervised one
    Compare(CompareArgs),
    /// Estimate a learning coefficient by Monte-Carlo volume scaling
    Oracle(OracleArgs),
    /// Fit the learning coefficient from an existing sweep
    EstimateRlct(EstimateRlctArgs),
}

#[derive(Args)]
struct RlctArgs {
    /// Input dimension N
    #[arg(long)]
    n: usize,
    /// Unsupervised (tacit) hidden units H1
    #[arg(long)]
    h1: usize,
    /// Supervised hidden units H2
    #[arg(long)]
    h2: usize,
    /// Output dimension M
    #[arg(long)]
    m: usize,
    /// Rank of the tacit block of the generator
    #[arg(long, default_value_t = 0)]
    rank: usize,
    /// Levels of a categorical output block (simplex-constrained); 0 = none
    #[arg(long, default_value_t = 0)]
    m_cat: usize,
    /// Categorical concept units in addition to the real ones; 0 = none
    #[arg(long, default_value_t = 0)]
    h2_cat: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON config file (see README for the schema)
    #[arg(long)]
    config: PathBuf,
    /// Cap on concurrently running (n, replication) cells
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Config of the finished partially supervised sweep
    #[arg(long)]
    pcbm: PathBuf,
    /// Config of the finished fully supervised sweep (h1 = 0)
    #[arg(long)]
    cbm: PathBuf,
    /// Directory for compare.json and compare.svg
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ErrorFnArg {
    /// Averaged error of the model itself
    #[value(name = "K")]
    K,
    /// Separated upper-bound surrogate
    #[value(name = "K_bar")]
    KBar,
    /// Pure reduced-rank error (no supervised units)
    #[value(name = "rrr")]
    Rrr,
}

#[derive(Args)]
struct OracleArgs {
    /// Error function to probe
    #[arg(long = "error-fn", value_enum)]
    error_fn: ErrorFnArg,
    /// Input dimension N
    #[arg(long)]
    n: usize,
    /// Hidden units H (rrr error function only)
    #[arg(long)]
    h: Option<usize>,
    /// Tacit hidden units H1 (K and K_bar)
    #[arg(long)]
    h1: Option<usize>,
    /// Supervised hidden units H2 (K and K_bar)
    #[arg(long)]
    h2: Option<usize>,
    /// Output dimension M
    #[arg(long)]
    m: usize,
    /// Rank of the generator's (tacit) product block
    #[arg(long, default_value_t = 0)]
    rank: usize,
    /// Scale of the generator weights
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Half-width of the sampling box (must contain the generator)
    #[arg(long, default_value_t = 4.0)]
    box_half_width: f64,
    /// Uniform samples drawn from the box
    #[arg(long, default_value_t = 20_000_000)]
    samples: u64,
    /// Largest threshold; the rest descend by decades
    #[arg(long, default_value_t = 1e-4)]
    top_threshold: f64,
    /// Number of decade-spaced thresholds
    #[arg(long, default_value_t = 5)]
    levels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for oracle.json and oracle.svg
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    /// Weighted least squares of n * G_hat(n) on the sweep grid
    Slope,
    /// Two-temperature contrast of tempered posterior means
    Wbic,
}

#[derive(Args)]
struct EstimateRlctArgs {
    /// Config of the sweep to estimate from
    #[arg(long)]
    config: PathBuf,
    /// Estimation method
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Sample size for the wbic method (default: largest grid entry)
    #[arg(long)]
    n: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::TooManyFlagged { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: &Command) -> Result<(), Error> {
    match command {
        Command::Rlct(a) => cmd_rlct(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::EstimateRlct(a) => cmd_estimate_rlct(a),
    }
}

fn print_row(label: &str, value: Rational) {
    println!("{label:<30} {:<8} = {:.3}", value.to_string(), value.to_f64());
}

fn cmd_rlct(a: &RlctArgs) -> Result<(), Error> {
    let shape = PcbmShape::new(a.n, a.h1, a.h2, a.m, a.rank)?;
    println!("{:<30} {}", "shape", shape.id());
    if a.h1 > 0 {
        let tacit = RrrShape::new(a.n, a.h1, a.m, a.rank)?;
        print_row("lambda_R (tacit block)", rlct_rrr(&tacit));
    } else {
        println!("{:<30} {:<8} = 0.000 (no tacit units)", "lambda_R (tacit block)", 0);
    }
    print_row("lambda_C (same total width)", rlct_cbm(a.n, shape.hidden_total(), a.m)?);
    print_row("lambda_P upper bound", rlct_pcbm_upper(&shape));
    print_row("gap lower coefficient", gen_error_gap_lower(&shape));
    if a.m_cat > 0 || a.h2_cat > 0 {
        let cat =
            CategoricalShape::new(a.n, a.h1, a.h2, a.h2_cat, a.m, a.m_cat, a.rank)?;
        print_row(
            "lambda_P bound (categorical)",
            rlct_pcbm_upper_categorical(&cat),
        );
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), Error> {
    let config = ExperimentConfig::from_path(&a.config)?;
    let outcome = run_sweep(&config, a.jobs)?;
    let s = &outcome.summary;
    println!("sweep {} -> {}", s.shape_id, config.out_dir.display());
    println!(
        "cells: {} computed, {} resumed; {} excluded as flagged ({:.1}%)",
        outcome.computed,
        outcome.records.len() - outcome.computed,
        s.excluded_total,
        100.0 * s.flagged_fraction
    );
    println!(
        "lambda_P bound {} | lambda_C same width {} | gap coefficient {}",
        s.lambda_pcbm_bound, s.lambda_cbm_same_width, s.gap_lower_coefficient
    );
    println!("{:>6} {:>5} {:>12} {:>12} {:>12}", "n", "used", "mean_g", "stderr", "n*mean_g");
    for p in &s.per_n {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.6}"),
            None => "-".to_string(),
        };
        println!(
            "{:>6} {:>5} {:>12} {:>12} {:>12}",
            p.n,
            p.replications_used,
            fmt(p.mean_g),
            fmt(p.stderr),
            fmt(p.n_times_mean_g)
        );
    }
    match &s.lambda_slope {
        Some(fit) => println!(
            "lambda_hat (slope fit) = {:.4} +/- {:.4}{}",
            fit.lambda_hat,
            fit.std_err,
            if fit.reliable { "" } else { "  [unreliable]" }
        ),
        None => println!("lambda_hat (slope fit) unavailable (need 3+ usable grid points)"),
    }
    if let Some(err) = outcome.flag_threshold_error() {
        return Err(err);
    }
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<(), Error> {
    let report = run_compare(&a.pcbm, &a.cbm, &a.out)?;
    println!(
        "compare {} (bound {}) vs {} (lambda_C {}), gap coefficient {}",
        report.pcbm_shape_id,
        report.lambda_pcbm_bound,
        report.cbm_shape_id,
        report.lambda_cbm,
        report.gap_lower_coefficient
    );
    println!(
        "{:>6} {:>12} {:>12} {:>12} {:>12} {:>9} {:>9}",
        "n", "g_pcbm", "g_cbm", "difference", "bound/n", "ordering", "gap"
    );
    for row in &report.per_n {
        println!(
            "{:>6} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>9} {:>9}",
            row.n,
            row.mean_g_pcbm,
            row.mean_g_cbm,
            row.difference,
            row.bound_over_n,
            if row.pcbm_not_above_cbm { "pass" } else { "FAIL" },
            if row.gap_meets_bound { "pass" } else { "FAIL" },
        );
    }
    println!(
        "all checks {} -> {}",
        if report.all_pass { "pass" } else { "FAIL" },
        a.out.join("compare.json").display()
    );
    Ok(())
}

/// What `oracle.json` records besides the raw report.
#[derive(Serialize)]
struct OracleOutput {
    error_fn: String,
    shape_id: String,
    /// Closed-form value the slope should approach.
    lambda_reference: Rational,
    /// "exact" when the formula gives the error function's own coefficient
    /// (rrr, K_bar); "upper_bound" for K, whose exact value is open.
    reference_kind: &'static str,
    report: VolumeScalingReport,
}

fn cmd_oracle(a: &OracleArgs) -> Result<(), Error> {
    let need = |v: Option<usize>, flag: &str| {
        v.ok_or_else(|| {
            Error::validation(format!("--{flag} is required for --error-fn {}", match a.error_fn {
                ErrorFnArg::K => "K",
                ErrorFnArg::KBar => "K_bar",
                ErrorFnArg::Rrr => "rrr",
            }))
        })
    };
    let (error_fn, shape) = match a.error_fn {
        ErrorFnArg::Rrr => {
            let h = need(a.h, "h")?;
            (VolumeErrorFn::Rrr, PcbmShape::new(a.n, h, 0, a.m, a.rank)?)
        }
        kind => {
            let h1 = need(a.h1, "h1")?;
            let h2 = need(a.h2, "h2")?;
            let error_fn = if kind == ErrorFnArg::K {
                VolumeErrorFn::K
            } else {
                VolumeErrorFn::KBar
            };
            (error_fn, PcbmShape::new(a.n, h1, h2, a.m, a.rank)?)
        }
    };
    if a.levels < 2 {
        return Err(Error::validation("--levels must be at least 2"));
    }
    let thresholds: Vec<f64> = (0..a.levels)
        .map(|i| a.top_threshold * 10f64.powi(-(i as i32)))
        .collect();
    let truth = make_ground_truth(shape, a.scale, mix_seed(a.seed, &[stream::TRUTH]))?;
    let report = volume_scaling_lambda(
        error_fn,
        &truth,
        a.box_half_width,
        a.samples,
        &thresholds,
        a.seed,
    )?;

    let (lambda_reference, reference_kind) = match error_fn {
        VolumeErrorFn::Rrr => {
            let tacit = RrrShape::new(shape.n_in, shape.h1, shape.m_out, shape.r_prime)?;
            (rlct_rrr(&tacit), "exact")
        }
        VolumeErrorFn::KBar => (rlct_pcbm_upper(&shape), "exact"),
        VolumeErrorFn::K => (rlct_pcbm_upper(&shape), "upper_bound"),
    };
    let out = OracleOutput {
        error_fn: match a.error_fn {
            ErrorFnArg::K => "K",
            ErrorFnArg::KBar => "K_bar",
            ErrorFnArg::Rrr => "rrr",
        }
        .to_string(),
        shape_id: shape.id(),
        lambda_reference,
        reference_kind,
        report,
    };

    std::fs::create_dir_all(&a.out)?;
    let json_path = a.out.join("oracle.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&out)?)?;
    let svg_path = a.out.join("oracle.svg");
    std::fs::write(&svg_path, oracle_svg(&out))?;

    println!(
        "lambda_vol = {:.4} (reference {} = {:.4}, {}), fit r2 {:.4}{}",
        out.report.lambda_vol,
        out.lambda_reference,
        out.lambda_reference.to_f64(),
        out.reference_kind,
        out.report.fit_r2,
        if out.report.curvature_warning {
            "  [curvature warning: slope still bending]"
        } else {
            ""
        }
    );
    println!("wrote {} and {}", json_path.display(), svg_path.display());
    Ok(())
}

/// Log-log scatter of the measured volumes with the fitted slope overlaid.
fn oracle_svg(out: &OracleOutput) -> String {
    let xs: Vec<f64> = out.report.thresholds.iter().map(|t| t.ln()).collect();
    let points: Vec<(f64, f64)> = xs
        .iter()
        .copied()
        .zip(out.report.log_volume.iter().copied())
        .collect();
    let n = points.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = out.report.log_volume.iter().sum::<f64>() / n;
    let ends = [xs[0], xs[xs.len() - 1]];
    let fit: Vec<(f64, f64)> = ends
        .iter()
        .map(|&x| (x, ym + out.report.lambda_vol * (x - xm)))
        .collect();
    let title = format!(
        "{} volume scaling, slope {:.3} (reference {:.3})",
        out.shape_id,
        out.report.lambda_vol,
        out.lambda_reference.to_f64()
    );
    line_plot(
        Axes {
            title: &title,
            x_label: "ln t",
            y_label: "ln V(t)",
        },
        &[
            Series {
                label: "measured".to_string(),
                color: PALETTE[0].to_string(),
                points,
            },
            Series {
                label: format!("fit, slope {:.3}", out.report.lambda_vol),
                color: PALETTE[1].to_string(),
                points: fit,
            },
        ],
        &[],
    )
}

fn cmd_estimate_rlct(a: &EstimateRlctArgs) -> Result<(), Error> {
    let config = ExperimentConfig::from_path(&a.config)?;
    let estimate = match a.method {
        MethodArg::Slope => {
            if a.n.is_some() {
                return Err(Error::validation(
                    "--n only applies to --method wbic; the slope fit uses the whole grid",
                ));
            }
            estimate_rlct_slope_from_sweep(&config)?
        }
        MethodArg::Wbic => estimate_rlct_wbic_for_config(&config, a.n)?,
    };
    println!("{}", serde_json::to_string_pretty(&estimate)?);
    Ok(())
}
