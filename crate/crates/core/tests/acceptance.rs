//! Numbered acceptance checks gating a release.
//!
//! The crate makes seven falsifiable promises: exact closed forms for the
//! learning coefficient, an upper-bound chain from the partially to the
//! fully supervised model, agreement between those closed forms and a
//! brute-force volume oracle, and a posterior pipeline whose measured
//! generalization errors scale as
//!
//! ```text
//!     E[G_n] ~ lambda / n,
//! ```
//!
//! plus baseline numerical hygiene. Each check prints one PASS/FAIL line
//! with its measured values (visible under `--nocapture`), and the test
//! fails if any check does.
//!
//! Budgets assume a single core: checks 1-2 are exact arithmetic over the
//! full shape grid (< 1 s each), check 3 draws up to 1e9 oracle samples per
//! instance (a few minutes), and checks 4-6 each run a 200-cell sweep.

use std::time::Instant;

use pcbm_slt::estimators::{estimate_gen_error, log_predictive};
use pcbm_slt::experiment::{run_sweep, ExperimentConfig, SweepSummary, FLAGGED_FRACTION_LIMIT};
use pcbm_slt::model::{
    averaged_error_k, averaged_error_upper, log_density_point, make_ground_truth,
    neg_log_likelihood, neg_log_likelihood_grad, sample_dataset, Weights,
};
use pcbm_slt::rlct::{rlct_cbm, rlct_pcbm_upper, rlct_rrr};
use pcbm_slt::sampler::{
    grad_log_posterior, log_posterior_unnorm, run_chains, ChainDraws, InitStrategy,
    PosteriorDraws, PriorKind, PriorSpec, SamplerConfig,
};
use pcbm_slt::seed::{mix_seed, stream};
use pcbm_slt::shape::{PcbmShape, RrrShape};
use pcbm_slt::volume::{volume_scaling_lambda, VolumeErrorFn};
use pcbm_slt::Rational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn rat(num: i64, den: i64) -> Rational {
    Rational::new(num, den).expect("literal rational")
}

#[test]
fn acceptance_criteria() {
    let mut failures: Vec<String> = Vec::new();
    let mut report = |idx: usize, name: &str, started: Instant, result: Check| {
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {idx} ({name}): PASS - {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("criterion {idx} ({name}): FAIL - {detail} [{secs:.1}s]");
                failures.push(format!("criterion {idx} ({name}): {detail}"));
            }
        }
    };

    let t = Instant::now();
    report(1, "closed-form suite", t, closed_form_suite());
    let t = Instant::now();
    report(2, "upper-bound chain", t, upper_bound_chain());
    let t = Instant::now();
    report(3, "volume-oracle agreement", t, volume_oracle_agreement());
    let t = Instant::now();
    report(4, "calibration sweep", t, calibration_sweep());

    // Criteria 5 and 6 share the partially supervised sweep.
    let t = Instant::now();
    let pcbm = bound_sweep_summary();
    report(5, "bound sweep", t, pcbm.clone().and_then(check_bound_sweep));
    let t = Instant::now();
    report(6, "supervision ordering", t, supervision_ordering(pcbm));

    let t = Instant::now();
    report(7, "numerical hygiene", t, numerical_hygiene());

    assert!(
        failures.is_empty(),
        "failed acceptance criteria:\n{}",
        failures.join("\n")
    );
}

// ---------------------------------------------------------------------------
// criterion 1: closed-form suite

/// Pinned values plus structural properties of `rlct_rrr` over the full
/// grid `N, M, H <= 12`, `r <= min(N, M, H)`: the four regimes partition
/// the grid, the value is symmetric in `N <-> M`, nondecreasing in the true
/// rank, and the regime formulas agree on their shared boundaries.
fn closed_form_suite() -> Check {
    let started = Instant::now();

    let pinned: [(usize, usize, usize, usize, Rational); 5] = [
        (1, 1, 1, 1, rat(1, 2)),
        (1, 1, 1, 0, rat(1, 2)),
        (1, 1, 3, 1, rat(3, 2)),
        (2, 1, 4, 0, rat(1, 1)),
        (1, 3, 1, 1, rat(1, 2)),
    ];
    for &(n, h, m, r, want) in &pinned {
        let shape = RrrShape::new(n, h, m, r).map_err(|e| e.to_string())?;
        let got = rlct_rrr(&shape);
        if got != want {
            return Err(format!(
                "pinned value mismatch at (N={n}, H={h}, M={m}, r={r}): \
                 got {got}, want {want}"
            ));
        }
    }

    // Independent regime formulas, written out once more so boundary
    // agreement is checked as algebra rather than by re-calling the
    // implementation's selector.
    let balanced = |n: i64, h: i64, m: i64, r: i64| {
        let core = 2 * (h + r) * (n + m) - (n - m) * (n - m) - (h + r) * (h + r);
        rat(core + (n + m + h + r).rem_euclid(2), 8)
    };
    let output_heavy = |n: i64, h: i64, m: i64, r: i64| rat(h * n + r * (m - h), 2);
    let input_heavy = |n: i64, h: i64, m: i64, r: i64| rat(h * m + r * (n - h), 2);
    let hidden_heavy = |n: i64, m: i64| rat(n * m, 2);

    let mut instances = 0usize;
    let mut boundaries = 0usize;
    for n in 1..=12usize {
        for h in 1..=12usize {
            for m in 1..=12usize {
                for r in 0..=n.min(m).min(h) {
                    instances += 1;
                    let shape = RrrShape::new(n, h, m, r).map_err(|e| e.to_string())?;
                    let lam = rlct_rrr(&shape);
                    let (ni, hi, mi, ri) = (n as i64, h as i64, m as i64, r as i64);

                    // Exactly one regime: the three strict conditions are
                    // pairwise incompatible under r <= min(N, M, H).
                    let strict = [ni + hi < mi + ri, mi + hi < ni + ri, ni + mi < hi + ri];
                    let hot = strict.iter().filter(|&&b| b).count();
                    if hot > 1 {
                        return Err(format!(
                            "regimes overlap at (N={n}, H={h}, M={m}, r={r})"
                        ));
                    }
                    let expected = match strict {
                        [true, _, _] => output_heavy(ni, hi, mi, ri),
                        [_, true, _] => input_heavy(ni, hi, mi, ri),
                        [_, _, true] => hidden_heavy(ni, mi),
                        _ => balanced(ni, hi, mi, ri),
                    };
                    if lam != expected {
                        return Err(format!(
                            "regime formula mismatch at (N={n}, H={h}, M={m}, r={r}): \
                             got {lam}, want {expected}"
                        ));
                    }

                    // N <-> M symmetry.
                    let mirrored = RrrShape::new(m, h, n, r).map_err(|e| e.to_string())?;
                    if rlct_rrr(&mirrored) != lam {
                        return Err(format!(
                            "asymmetric under N<->M at (N={n}, H={h}, M={m}, r={r})"
                        ));
                    }

                    // Monotone in the true rank.
                    if r + 1 <= n.min(m).min(h) {
                        let next = RrrShape::new(n, h, m, r + 1).map_err(|e| e.to_string())?;
                        if rlct_rrr(&next) < lam {
                            return Err(format!(
                                "not monotone in r at (N={n}, H={h}, M={m}, r={r})"
                            ));
                        }
                    }

                    // Regime boundaries: the balanced formula must agree with
                    // each neighbor where the strict condition turns into
                    // equality (all three boundaries have even parity).
                    if ni + hi == mi + ri {
                        boundaries += 1;
                        if balanced(ni, hi, mi, ri) != output_heavy(ni, hi, mi, ri) {
                            return Err(format!(
                                "discontinuous at N+H = M+r, (N={n}, H={h}, M={m}, r={r})"
                            ));
                        }
                    }
                    if mi + hi == ni + ri {
                        boundaries += 1;
                        if balanced(ni, hi, mi, ri) != input_heavy(ni, hi, mi, ri) {
                            return Err(format!(
                                "discontinuous at M+H = N+r, (N={n}, H={h}, M={m}, r={r})"
                            ));
                        }
                    }
                    if hi + ri == ni + mi {
                        boundaries += 1;
                        if balanced(ni, hi, mi, ri) != hidden_heavy(ni, mi) {
                            return Err(format!(
                                "discontinuous at H+r = N+M, (N={n}, H={h}, M={m}, r={r})"
                            ));
                        }
                    }
                }
            }
        }
    }

    let secs = started.elapsed().as_secs_f64();
    if secs >= 1.0 {
        return Err(format!("grid checks took {secs:.2}s, budget is 1s"));
    }
    Ok(format!(
        "5 pinned values exact; {instances} grid instances partitioned, \
         symmetric, monotone in r; {boundaries} boundary agreements"
    ))
}

// ---------------------------------------------------------------------------
// criterion 2: upper-bound chain

/// `rlct_pcbm_upper(shape) <= rlct_cbm(N, H1+H2, M)` exactly on the full
/// grid, with equality whenever no hidden unit is tacit.
fn upper_bound_chain() -> Check {
    let started = Instant::now();
    let mut instances = 0usize;
    let mut equalities = 0usize;
    for n in 1..=12usize {
        for m in 1..=12usize {
            for h1 in 0..=12usize {
                for h2 in 0..=(12 - h1) {
                    if h1 + h2 == 0 {
                        continue;
                    }
                    for rp in 0..=n.min(h1).min(m) {
                        instances += 1;
                        let shape =
                            PcbmShape::new(n, h1, h2, m, rp).map_err(|e| e.to_string())?;
                        let upper = rlct_pcbm_upper(&shape);
                        let cbm = rlct_cbm(n, h1 + h2, m).map_err(|e| e.to_string())?;
                        if upper > cbm {
                            return Err(format!(
                                "bound exceeds the fully supervised value at {}: \
                                 {upper} > {cbm}",
                                shape.id()
                            ));
                        }
                        if h1 == 0 {
                            equalities += 1;
                            if upper != cbm {
                                return Err(format!(
                                    "no-tacit shape {} should collapse to the \
                                     fully supervised value: {upper} != {cbm}",
                                    shape.id()
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 1.0 {
        return Err(format!("grid checks took {secs:.2}s, budget is 1s"));
    }
    Ok(format!(
        "{instances} shapes obey the chain; {equalities} no-tacit shapes \
         collapse to equality"
    ))
}

// ---------------------------------------------------------------------------
// criterion 3: volume-oracle agreement

/// Monte-Carlo volume scaling reproduces the closed forms within 0.15 on
/// every reduced-rank instance with at most six parameters whose deepest
/// threshold is reachable by uniform sampling, and the separated surrogate
/// dominates the averaged error pointwise.
///
/// Reachability: with thresholds spanning four decades and a 100-hit floor
/// at the bottom one, the required sample count grows like
///
/// ```text
///     samples >~ 100 / (c * t_bottom^lambda),    t_bottom = 1e-4 * t_top,
/// ```
///
/// and `t_top` must stay well below the error's curvature scale or the
/// fitted slope bends. Rank-zero truths evade the floor because their error
/// is homogeneous -- the box can shrink onto the singularity -- but a
/// positive-rank truth pins the box scale, so instances whose zero set has
/// codimension >= 3 (lambda >= 3/2 at positive rank) would need >= 1e11
/// draws; measured at (N=1, H=1, M=3, r=1): P(K < 1e-4) = 4.6e-7. Those
/// instances are skipped and counted in the PASS line.
fn volume_oracle_agreement() -> Check {
    let started = Instant::now();
    let lam_one = rat(1, 1);
    let lam_three_half = rat(3, 2);

    let mut included = 0usize;
    let mut skipped = 0usize;
    let mut max_dev = 0.0f64;
    let mut worst = String::new();

    for h in 1..=3usize {
        for n in 1..=5usize {
            for m in 1..=5usize {
                if h * (n + m) > 6 {
                    continue;
                }
                for r in 0..=n.min(m).min(h) {
                    let rrr = RrrShape::new(n, h, m, r).map_err(|e| e.to_string())?;
                    let lam = rlct_rrr(&rrr);
                    if r > 0 && lam >= lam_three_half {
                        skipped += 1;
                        continue;
                    }

                    // Budgets frozen per hit-rate class (rank, lambda, dim).
                    let params = h * (n + m);
                    let (scale, floor, top, samples): (f64, f64, f64, u64) = if r == 0 {
                        if lam == lam_three_half {
                            (0.05, 0.3, 1e-3, 1_000_000_000)
                        } else if lam == lam_one {
                            (0.05, 0.5, 1e-3, 150_000_000)
                        } else {
                            (0.05, 0.5, 1e-3, 5_000_000)
                        }
                    } else if lam < lam_one {
                        // codimension-1 sheet: deep thresholds are cheap
                        (1.0, 2.5, 1e-4, 40_000_000)
                    } else if params <= 4 {
                        // Codimension-2 curve around the rank-one truth. The
                        // wide-input mirror's curve runs through a slower
                        // gradient region, so its clean power-law window sits
                        // a decade and a half deeper than the wide-output one.
                        if n > m {
                            (1.0, 2.0, 1e-3, 800_000_000)
                        } else {
                            (1.0, 2.0, 3e-2, 400_000_000)
                        }
                    } else {
                        (0.5, 1.5, 1e-2, 200_000_000)
                    };

                    let shape = PcbmShape::new(n, h, 0, m, r).map_err(|e| e.to_string())?;
                    let truth = make_ground_truth(shape, scale, mix_seed(1, &[stream::TRUTH]))
                        .map_err(|e| e.to_string())?;
                    let max_entry = truth
                        .weights()
                        .flat()
                        .iter()
                        .fold(0.0f64, |a, v| a.max(v.abs()));
                    let half = floor.max(1.3 * max_entry);
                    let thresholds: Vec<f64> =
                        (0..5).map(|i| top * 10f64.powi(-i)).collect();

                    let report = volume_scaling_lambda(
                        VolumeErrorFn::Rrr,
                        &truth,
                        half,
                        samples,
                        &thresholds,
                        1,
                    )
                    .map_err(|e| {
                        format!("oracle failed at (N={n}, H={h}, M={m}, r={r}): {e}")
                    })?;
                    included += 1;

                    let dev = (report.lambda_vol - lam.to_f64()).abs();
                    if dev > max_dev {
                        max_dev = dev;
                        worst = format!("(N={n}, H={h}, M={m}, r={r})");
                    }
                    if dev >= 0.15 {
                        return Err(format!(
                            "oracle disagrees at (N={n}, H={h}, M={m}, r={r}): \
                             lambda_vol {:.4} vs exact {lam} ({:.4})",
                            report.lambda_vol,
                            lam.to_f64()
                        ));
                    }
                }
            }
        }
    }
    if skipped != 12 {
        return Err(format!(
            "expected 12 positive-rank instances below the hit floor, found {skipped}"
        ));
    }

    // Pointwise domination of the averaged error by its separated surrogate.
    let mut shapes_checked = 0usize;
    for n in 1..=3usize {
        for m in 1..=3usize {
            for h1 in 0..=2usize {
                for h2 in 0..=2usize {
                    if h1 + h2 == 0 {
                        continue;
                    }
                    for rp in 0..=n.min(h1).min(m) {
                        let shape =
                            PcbmShape::new(n, h1, h2, m, rp).map_err(|e| e.to_string())?;
                        let truth = make_ground_truth(
                            shape,
                            1.0,
                            mix_seed(40, &[shapes_checked as u64]),
                        )
                        .map_err(|e| e.to_string())?;
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                            41,
                            &[shapes_checked as u64],
                        ));
                        let dim = shape.param_count();
                        let mut flat = vec![0.0f64; dim];
                        for _ in 0..100_000 {
                            for v in flat.iter_mut() {
                                *v = rng.random_range(-3.0..3.0);
                            }
                            let w = Weights::from_flat(shape, &flat)
                                .map_err(|e| e.to_string())?;
                            let k = averaged_error_k(&w, &truth);
                            let kbar = averaged_error_upper(&w, &truth);
                            if k > kbar * (1.0 + 1e-12) + 1e-12 {
                                return Err(format!(
                                    "surrogate fails to dominate at {}: K = {k:.6e} \
                                     > K_bar = {kbar:.6e}",
                                    shape.id()
                                ));
                            }
                        }
                        shapes_checked += 1;
                    }
                }
            }
        }
    }

    let secs = started.elapsed().as_secs_f64();
    if secs >= 300.0 {
        return Err(format!("oracle checks took {secs:.0}s, budget is 300s"));
    }
    Ok(format!(
        "{included} instances within 0.15 (max dev {max_dev:.3} at {worst}); \
         {skipped} positive-rank instances below the 100-hit floor skipped; \
         surrogate dominates on 1e5 points x {shapes_checked} shapes"
    ))
}

// ---------------------------------------------------------------------------
// criteria 4-6: posterior sweeps

/// Shared sweep protocol: 50 replications over n in {100, 200, 400, 800},
/// two chains per cell started at the truth under a unit Gaussian prior.
/// The unit prior keeps the posterior's flat directions short so desk-scale
/// chains mix; the learning coefficient itself does not depend on the
/// prior's scale where the density is positive and bounded.
fn sweep_config(shape: PcbmShape, n_steps: usize, burn_in: usize, out_dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        shape,
        truth_scale: 1.0,
        n_grid: vec![100, 200, 400, 800],
        replications: 50,
        sampler: SamplerConfig {
            n_chains: 2,
            n_steps,
            burn_in,
            thin: if n_steps >= 5000 { 3 } else { 2 },
            step_size: 0.1,
            seed: 0,
            init: InitStrategy::Truth,
            ..Default::default()
        },
        prior: PriorSpec {
            kind: PriorKind::Gaussian,
            sigma: 1.0,
            ..Default::default()
        },
        n_test: 4000,
        out_dir: out_dir.to_path_buf(),
        master_seed: 7,
    }
}

fn run_sweep_summary(shape: (usize, usize, usize, usize, usize), n_steps: usize, burn_in: usize) -> Result<SweepSummary, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let shape = PcbmShape::new(shape.0, shape.1, shape.2, shape.3, shape.4)
        .map_err(|e| e.to_string())?;
    let config = sweep_config(shape, n_steps, burn_in, dir.path());
    let outcome = run_sweep(&config, None).map_err(|e| e.to_string())?;
    if outcome.summary.flagged_fraction > FLAGGED_FRACTION_LIMIT {
        return Err(format!(
            "{:.0}% of sweep cells flagged for non-convergence",
            100.0 * outcome.summary.flagged_fraction
        ));
    }
    Ok(outcome.summary)
}

/// A per-n row: (n, mean G, stderr of the mean).
fn per_n_rows(summary: &SweepSummary) -> Result<Vec<(usize, f64, f64)>, String> {
    summary
        .per_n
        .iter()
        .map(|row| {
            let g = row.mean_g.ok_or("per-n mean missing")?;
            let se = row.stderr.ok_or("per-n stderr missing")?;
            Ok((row.n, g, se))
        })
        .collect()
}

/// Criterion 4: the fully supervised single-unit model has learning
/// coefficient exactly 1, so the slope fit must land in [0.7, 1.3].
fn calibration_sweep() -> Check {
    let summary = run_sweep_summary((1, 0, 1, 1, 0), 3000, 1000)?;
    if summary.lambda_cbm_same_width != rat(1, 1) {
        return Err(format!(
            "expected exact coefficient 1, formulas give {}",
            summary.lambda_cbm_same_width
        ));
    }
    let est = summary.lambda_slope.as_ref().ok_or("slope fit missing")?;
    if !(0.7..=1.3).contains(&est.lambda_hat) {
        return Err(format!(
            "slope fit {:.4} +/- {:.4} outside [0.7, 1.3]",
            est.lambda_hat, est.std_err
        ));
    }
    Ok(format!(
        "slope fit {:.3} +/- {:.3} against exact 1; {:.0}% flagged",
        est.lambda_hat,
        est.std_err,
        100.0 * summary.flagged_fraction
    ))
}

fn bound_sweep_summary() -> Result<SweepSummary, String> {
    run_sweep_summary((2, 1, 1, 2, 0), 5000, 2000)
}

/// Criterion 5: for N = M = 2, H1 = H2 = 1, r' = 0 the upper bound is 3,
/// so `n * mean G` must stay below 3 at every n and so must the slope fit,
/// each within two standard errors. One-sided by design: only the upper
/// bound is exact.
fn check_bound_sweep(summary: SweepSummary) -> Check {
    if summary.lambda_pcbm_bound != rat(3, 1) {
        return Err(format!(
            "expected bound 3, formulas give {}",
            summary.lambda_pcbm_bound
        ));
    }
    let bound = 3.0;
    let mut shown = Vec::new();
    for (n, g, se) in per_n_rows(&summary)? {
        let scaled = n as f64 * g;
        let slack = 2.0 * n as f64 * se;
        shown.push(format!("{scaled:.2}"));
        if scaled > bound + slack {
            return Err(format!(
                "n*G = {scaled:.3} exceeds {bound} + 2se = {:.3} at n = {n}",
                bound + slack
            ));
        }
    }
    let est = summary.lambda_slope.as_ref().ok_or("slope fit missing")?;
    if est.lambda_hat > bound + 2.0 * est.std_err {
        return Err(format!(
            "slope fit {:.3} +/- {:.3} exceeds the bound 3",
            est.lambda_hat, est.std_err
        ));
    }
    Ok(format!(
        "n*G = [{}] <= 3 + 2se; slope fit {:.3} +/- {:.3} <= 3",
        shown.join(", "),
        est.lambda_hat,
        est.std_err
    ))
}

/// Criterion 6: at matched total width (N = M = 2, H = 2), leaving one
/// hidden unit tacit must not cost generalization: mean G(partial) stays at
/// or below mean G(full) at every n, and the observed gap clears the 1/n
/// lower bound, each within two combined standard errors.
fn supervision_ordering(pcbm: Result<SweepSummary, String>) -> Check {
    let pcbm = pcbm.map_err(|e| format!("matched sweep unavailable: {e}"))?;
    let cbm = run_sweep_summary((2, 0, 2, 2, 0), 5000, 2000)?;
    if cbm.lambda_pcbm_bound != rat(4, 1) || cbm.lambda_cbm_same_width != pcbm.lambda_cbm_same_width
    {
        return Err("matched sweeps disagree on the fully supervised coefficient".into());
    }
    if pcbm.gap_lower_coefficient != rat(1, 1) {
        return Err(format!(
            "expected gap coefficient 1, formulas give {}",
            pcbm.gap_lower_coefficient
        ));
    }

    let rows_p = per_n_rows(&pcbm)?;
    let rows_c = per_n_rows(&cbm)?;
    if rows_p.len() != rows_c.len() {
        return Err("sweeps cover different grids".into());
    }
    let mut gaps = Vec::new();
    for (&(n, gp, sep), &(nc, gc, sec)) in rows_p.iter().zip(&rows_c) {
        if n != nc {
            return Err("sweeps cover different grids".into());
        }
        let sigma = sep.hypot(sec);
        if gp > gc + 2.0 * sigma {
            return Err(format!(
                "partial supervision generalizes worse at n = {n}: \
                 {gp:.5} > {gc:.5} + 2 sigma"
            ));
        }
        let gap = gc - gp;
        let floor = 1.0 / n as f64;
        gaps.push(format!("{:.1}/n", gap * n as f64));
        if gap < floor - 2.0 * sigma {
            return Err(format!(
                "gap {gap:.5} at n = {n} falls short of 1/n = {floor:.5} - 2 sigma"
            ));
        }
    }
    Ok(format!(
        "G(partial) <= G(full) at every n; gaps [{}] clear the 1/n floor",
        gaps.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// criterion 7: numerical hygiene

/// Log-mean-exp with Neumaier-compensated summation over ascending terms;
/// reference for `log_predictive`.
fn log_mean_exp_reference(vals: &[f64]) -> f64 {
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut terms: Vec<f64> = vals.iter().map(|v| (v - mx).exp()).collect();
    terms.sort_by(|a, b| a.partial_cmp(b).expect("finite exp terms"));
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for t in terms {
        let next = sum + t;
        comp += if sum.abs() >= t.abs() {
            (sum - next) + t
        } else {
            (t - next) + sum
        };
        sum = next;
    }
    mx + (sum + comp).ln() - (vals.len() as f64).ln()
}

fn numerical_hygiene() -> Check {
    // (a) analytic gradients against central differences.
    let shapes = [(1, 0, 1, 1, 0), (2, 1, 1, 2, 0), (3, 2, 2, 2, 1)];
    let prior = PriorSpec {
        kind: PriorKind::Gaussian,
        sigma: 1.5,
        ..Default::default()
    };
    let beta = 0.7;
    let mut max_rel = 0.0f64;
    for (idx, &(n, h1, h2, m, rp)) in shapes.iter().enumerate() {
        let shape = PcbmShape::new(n, h1, h2, m, rp).map_err(|e| e.to_string())?;
        let truth = make_ground_truth(shape, 1.0, mix_seed(70, &[idx as u64]))
            .map_err(|e| e.to_string())?;
        let data = sample_dataset(&truth, 20, mix_seed(71, &[idx as u64]))
            .map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(72, &[idx as u64]));
        let mut flat = truth.weights().flat();
        for v in flat.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
        let w = Weights::from_flat(shape, &flat).map_err(|e| e.to_string())?;

        let (_, grad_nll) = neg_log_likelihood_grad(&w, &data).map_err(|e| e.to_string())?;
        let (_, grad_post) =
            grad_log_posterior(&w, &data, &prior, beta).map_err(|e| e.to_string())?;
        let grad_nll = grad_nll.flat();
        let grad_post = grad_post.flat();

        let h_step = 1e-5;
        for i in 0..flat.len() {
            let mut probe = flat.clone();
            probe[i] += h_step;
            let wp = Weights::from_flat(shape, &probe).map_err(|e| e.to_string())?;
            probe[i] -= 2.0 * h_step;
            let wm = Weights::from_flat(shape, &probe).map_err(|e| e.to_string())?;

            let fd_nll = (neg_log_likelihood(&wp, &data).map_err(|e| e.to_string())?
                - neg_log_likelihood(&wm, &data).map_err(|e| e.to_string())?)
                / (2.0 * h_step);
            let rel = (fd_nll - grad_nll[i]).abs() / grad_nll[i].abs().max(1.0);
            max_rel = max_rel.max(rel);
            if rel > 1e-4 {
                return Err(format!(
                    "likelihood gradient off by {rel:.2e} at {} coordinate {i}",
                    shape.id()
                ));
            }

            let fd_post = (log_posterior_unnorm(&wp, &data, &prior, beta)
                .map_err(|e| e.to_string())?
                - log_posterior_unnorm(&wm, &data, &prior, beta).map_err(|e| e.to_string())?)
                / (2.0 * h_step);
            let rel = (fd_post - grad_post[i]).abs() / grad_post[i].abs().max(1.0);
            max_rel = max_rel.max(rel);
            if rel > 1e-4 {
                return Err(format!(
                    "posterior gradient off by {rel:.2e} at {} coordinate {i}",
                    shape.id()
                ));
            }
        }
    }

    // (b) log_predictive against compensated summation.
    let shape = PcbmShape::new(2, 1, 1, 2, 0).map_err(|e| e.to_string())?;
    let truth = make_ground_truth(shape, 1.0, mix_seed(73, &[])).map_err(|e| e.to_string())?;
    let data = sample_dataset(&truth, 60, mix_seed(74, &[])).map_err(|e| e.to_string())?;
    let cfg = SamplerConfig {
        n_chains: 2,
        n_steps: 600,
        burn_in: 200,
        thin: 2,
        step_size: 0.1,
        seed: 5,
        init: InitStrategy::Truth,
        ..Default::default()
    };
    let prior1 = PriorSpec {
        kind: PriorKind::Gaussian,
        sigma: 1.0,
        ..Default::default()
    };
    let draws =
        run_chains(&data, shape, &prior1, &cfg, Some(&truth)).map_err(|e| e.to_string())?;
    let test = sample_dataset(&truth, 5, mix_seed(75, &[])).map_err(|e| e.to_string())?;
    let mut max_lp_err = 0.0f64;
    for t in 0..test.n() {
        let x: Vec<f64> = test.x().row(t).iter().cloned().collect();
        let y: Vec<f64> = test.y().row(t).iter().cloned().collect();
        let c: Vec<f64> = test.c().row(t).iter().cloned().collect();
        let got = log_predictive(&draws, &x, &y, &c).map_err(|e| e.to_string())?;
        let vals: Vec<f64> = draws
            .iter_samples()
            .map(|w| log_density_point(w, &x, &y, &c))
            .collect();
        let want = log_mean_exp_reference(&vals);
        let err = (got - want).abs();
        max_lp_err = max_lp_err.max(err);
        if err > 1e-8 {
            return Err(format!(
                "log_predictive off by {err:.2e} from compensated summation"
            ));
        }
    }

    // (c) a point mass at the truth generalizes perfectly.
    let samples = vec![truth.weights().clone(); 40];
    let nll_truth = neg_log_likelihood(truth.weights(), &data).map_err(|e| e.to_string())?;
    let chain = ChainDraws {
        samples,
        nll: vec![nll_truth; 40],
        accept_rate: 1.0,
        epsilon_final: 0.1,
    };
    let point_mass = PosteriorDraws {
        chains: vec![chain.clone(), chain],
        accept_rate: 1.0,
        rhat_max: 1.0,
        ess_min: 80.0,
        beta: 1.0,
        n: data.n(),
    };
    let est = estimate_gen_error(&point_mass, &truth, 20_000, mix_seed(76, &[]))
        .map_err(|e| e.to_string())?;
    if !est.std_err.is_finite() || est.g_hat.abs() > 3.0 * est.std_err {
        return Err(format!(
            "point mass at the truth gives G = {:.3e} +/- {:.3e}, not 0 within 3 sigma",
            est.g_hat, est.std_err
        ));
    }

    Ok(format!(
        "gradients match differences (max rel {max_rel:.1e}); log_predictive \
         within {max_lp_err:.1e} of compensated summation; point mass gives \
         G = {:.1e} +/- {:.1e}",
        est.g_hat, est.std_err
    ))
}
