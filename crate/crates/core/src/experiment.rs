//! Config-driven experiment sweeps and reports.
//!
//! A sweep runs the full pipeline — ground truth, dataset, posterior
//! chains at `beta = 1`, generalization-error estimate — over a grid of
//! sample sizes and replications. Every cell derives its own seeds from
//! `(master_seed, stream, n, replication)`, so the artifacts are
//! reproducible byte for byte (except wall-clock columns) regardless of
//! scheduling, and interrupted sweeps resume by skipping finished cells.

use crate::diagnostics::RHAT_FLAG_THRESHOLD;
use crate::error::{Error, Result};
use crate::estimators::{estimate_gen_error, estimate_lambda_wbic, fit_lambda_slope, RlctEstimate};
use crate::model::{make_ground_truth, sample_dataset, GroundTruth};
use crate::rational::Rational;
use crate::rlct::{gen_error_gap_lower, rlct_cbm, rlct_pcbm_upper};
use crate::sampler::{run_chains, PriorSpec, SamplerConfig};
use crate::seed::{mix_seed, stream};
use crate::shape::PcbmShape;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Sweeps whose flagged fraction exceeds this are reported with a
/// dedicated exit code by the CLI.
pub const FLAGGED_FRACTION_LIMIT: f64 = 0.20;

pub const SWEEP_CSV_HEADER: &str =
    "shape_id,n,replication,g_hat,std_err,accept_rate,rhat_max,flagged,wall_time_ms";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub shape: PcbmShape,
    pub truth_scale: f64,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub sampler: SamplerConfig,
    pub prior: PriorSpec,
    pub n_test: usize,
    pub out_dir: PathBuf,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        // Deserialization bypasses the shape constructor, so re-check.
        PcbmShape::new(
            self.shape.n_in,
            self.shape.h1,
            self.shape.h2,
            self.shape.m_out,
            self.shape.r_prime,
        )?;
        if !(self.truth_scale > 0.0 && self.truth_scale.is_finite()) {
            return Err(Error::validation(format!(
                "truth_scale must be positive and finite, got {}",
                self.truth_scale
            )));
        }
        if self.n_grid.is_empty() {
            return Err(Error::validation("n_grid must not be empty"));
        }
        if self.n_grid[0] < 2 {
            return Err(Error::validation("n_grid entries must be at least 2"));
        }
        if !self.n_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation("n_grid must be strictly increasing"));
        }
        if self.replications == 0 {
            return Err(Error::validation("replications must be at least 1"));
        }
        self.sampler.validate()?;
        if self.sampler.beta != 1.0 {
            return Err(Error::validation(format!(
                "sweeps sample the untempered posterior; set sampler.beta to 1, got {}",
                self.sampler.beta
            )));
        }
        self.prior.validate()?;
        if self.n_test < 2 {
            return Err(Error::validation("n_test must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub shape_id: String,
    pub n: usize,
    pub replication: usize,
    pub g_hat: f64,
    pub std_err: f64,
    pub accept_rate: f64,
    pub rhat_max: f64,
    pub flagged: bool,
    pub wall_time_ms: u64,
}

/// Per-`n` aggregate over unflagged replications. Means are absent when
/// fewer than one record survives, standard errors when fewer than two.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerN {
    pub n: usize,
    pub replications_used: usize,
    pub excluded: usize,
    pub mean_g: Option<f64>,
    pub stderr: Option<f64>,
    pub n_times_mean_g: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub shape: PcbmShape,
    pub shape_id: String,
    /// Bound on the model's RLCT from the separated upper model.
    pub lambda_pcbm_bound: Rational,
    /// RLCT of the fully supervised model with the same total width.
    pub lambda_cbm_same_width: Rational,
    /// Coefficient of the 1/n lower bound on the CBM-minus-PCBM gap.
    pub gap_lower_coefficient: Rational,
    pub n_test: usize,
    pub replications: usize,
    pub per_n: Vec<PerN>,
    pub lambda_slope: Option<RlctEstimate>,
    pub excluded_total: usize,
    pub flagged_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    pub summary: SweepSummary,
    /// Cells computed in this invocation (the rest were resumed).
    pub computed: usize,
}

impl SweepOutcome {
    /// The error the CLI maps to exit code 3, if the flag rate is too high.
    pub fn flag_threshold_error(&self) -> Option<Error> {
        if self.summary.flagged_fraction > FLAGGED_FRACTION_LIMIT {
            Some(Error::TooManyFlagged {
                fraction: 100.0 * self.summary.flagged_fraction,
            })
        } else {
            None
        }
    }
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

pub fn write_sweep_csv(records: &[SweepRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.shape_id,
            r.n,
            r.replication,
            r.g_hat,
            r.std_err,
            r.accept_rate,
            r.rhat_max,
            fmt_bool(r.flagged),
            r.wall_time_ms
        )?;
    }
    Ok(())
}

pub fn read_sweep_csv(r: impl std::io::Read) -> Result<Vec<SweepRecord>> {
    let mut lines = std::io::BufReader::new(r).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty sweep csv".into()))??;
    if header != SWEEP_CSV_HEADER {
        return Err(Error::Parse(format!(
            "unexpected sweep csv header: {header}"
        )));
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Parse(format!(
                "sweep csv line {}: expected 9 fields, got {}",
                idx + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: {what}: {e}", idx + 2)))
        };
        let parse_u = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|e| Error::Parse(format!("line {}: {what}: {e}", idx + 2)))
        };
        let flagged = match fields[7] {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Parse(format!(
                    "line {}: flagged must be true/false, got {other}",
                    idx + 2
                )))
            }
        };
        records.push(SweepRecord {
            shape_id: fields[0].to_string(),
            n: parse_u(fields[1], "n")? as usize,
            replication: parse_u(fields[2], "replication")? as usize,
            g_hat: parse_f(fields[3], "g_hat")?,
            std_err: parse_f(fields[4], "std_err")?,
            accept_rate: parse_f(fields[5], "accept_rate")?,
            rhat_max: parse_f(fields[6], "rhat_max")?,
            flagged,
            wall_time_ms: parse_u(fields[8], "wall_time_ms")?,
        });
    }
    Ok(records)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Mean/stderr aggregates per sample size over unflagged records.
pub fn aggregate_per_n(n_grid: &[usize], records: &[SweepRecord]) -> Vec<PerN> {
    n_grid
        .iter()
        .map(|&n| {
            let used: Vec<f64> = records
                .iter()
                .filter(|r| r.n == n && !r.flagged)
                .map(|r| r.g_hat)
                .collect();
            let excluded = records.iter().filter(|r| r.n == n && r.flagged).count();
            let k = used.len();
            let mean = (k >= 1).then(|| used.iter().sum::<f64>() / k as f64);
            let stderr = (k >= 2).then(|| {
                let m = mean.expect("mean exists when k >= 2");
                let var = used.iter().map(|g| (g - m) * (g - m)).sum::<f64>()
                    / (k - 1) as f64;
                (var / k as f64).sqrt()
            });
            PerN {
                n,
                replications_used: k,
                excluded,
                mean_g: mean,
                stderr,
                n_times_mean_g: mean.map(|m| n as f64 * m),
            }
        })
        .collect()
}

/// Builds the summary from raw records; every number here is a pure
/// function of the CSV rows and the config.
pub fn summarize(config: &ExperimentConfig, records: &[SweepRecord]) -> SweepSummary {
    let shape = &config.shape;
    let per_n = aggregate_per_n(&config.n_grid, records);
    let points: Vec<(usize, f64, f64)> = per_n
        .iter()
        .filter_map(|p| match (p.mean_g, p.stderr) {
            (Some(m), Some(se)) if se > 0.0 => Some((p.n, m, se)),
            _ => None,
        })
        .collect();
    let lambda_slope = fit_lambda_slope(&points).ok();
    let excluded_total = records.iter().filter(|r| r.flagged).count();
    let flagged_fraction = if records.is_empty() {
        0.0
    } else {
        excluded_total as f64 / records.len() as f64
    };
    SweepSummary {
        shape: *shape,
        shape_id: shape.id(),
        lambda_pcbm_bound: rlct_pcbm_upper(shape),
        lambda_cbm_same_width: rlct_cbm(shape.n_in, shape.hidden_total(), shape.m_out)
            .expect("valid shape has positive dims"),
        gap_lower_coefficient: gen_error_gap_lower(shape),
        n_test: config.n_test,
        replications: config.replications,
        per_n,
        lambda_slope,
        excluded_total,
        flagged_fraction,
    }
}

fn run_cell(
    config: &ExperimentConfig,
    truth: &GroundTruth,
    n: usize,
    replication: usize,
) -> Result<SweepRecord> {
    let start = Instant::now();
    let ms = config.master_seed;
    let cell = [n as u64, replication as u64];
    let data = sample_dataset(
        truth,
        n,
        mix_seed(ms, &[stream::DATASET, cell[0], cell[1]]),
    )?;
    let cell_cfg = SamplerConfig {
        seed: mix_seed(ms, &[stream::CHAINS, cell[0], cell[1]]),
        ..config.sampler
    };
    let draws = run_chains(&data, config.shape, &config.prior, &cell_cfg, Some(truth))?;
    let est = estimate_gen_error(
        &draws,
        truth,
        config.n_test,
        mix_seed(ms, &[stream::TEST_SET, cell[0], cell[1]]),
    )?;
    Ok(SweepRecord {
        shape_id: config.shape.id(),
        n,
        replication,
        g_hat: est.g_hat,
        std_err: est.std_err,
        accept_rate: draws.accept_rate,
        rhat_max: draws.rhat_max,
        flagged: !(draws.rhat_max < RHAT_FLAG_THRESHOLD),
        wall_time_ms: start.elapsed().as_millis() as u64,
    })
}

fn load_existing_records(
    config: &ExperimentConfig,
    csv_path: &Path,
) -> Result<Vec<SweepRecord>> {
    if !csv_path.exists() {
        return Ok(Vec::new());
    }
    let file = std::fs::File::open(csv_path)?;
    let records = read_sweep_csv(file)?;
    let id = config.shape.id();
    let mut seen = BTreeSet::new();
    for r in &records {
        if r.shape_id != id {
            return Err(Error::validation(format!(
                "existing sweep.csv was produced for shape {}, config says {}; \
                 use a fresh out_dir",
                r.shape_id, id
            )));
        }
        if !config.n_grid.contains(&r.n) || r.replication >= config.replications {
            return Err(Error::validation(format!(
                "existing sweep.csv cell (n={}, replication={}) is outside the \
                 configured grid; use a fresh out_dir",
                r.n, r.replication
            )));
        }
        if !seen.insert((r.n, r.replication)) {
            return Err(Error::validation(format!(
                "existing sweep.csv has duplicate cell (n={}, replication={})",
                r.n, r.replication
            )));
        }
    }
    Ok(records)
}

/// Runs (or resumes) the sweep described by `config`, writing `sweep.csv`,
/// `summary.json`, and `config.echo.json` into `config.out_dir`.
/// `jobs` bounds cell-level parallelism; results do not depend on it.
pub fn run_sweep(config: &ExperimentConfig, jobs: Option<usize>) -> Result<SweepOutcome> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let csv_path = config.out_dir.join("sweep.csv");

    let truth = make_ground_truth(
        config.shape,
        config.truth_scale,
        mix_seed(config.master_seed, &[stream::TRUTH]),
    )?;

    let mut records = load_existing_records(config, &csv_path)?;
    let done: BTreeSet<(usize, usize)> =
        records.iter().map(|r| (r.n, r.replication)).collect();
    let cells: Vec<(usize, usize)> = config
        .n_grid
        .iter()
        .flat_map(|&n| (0..config.replications).map(move |rep| (n, rep)))
        .filter(|cell| !done.contains(cell))
        .collect();

    let compute = || -> Result<Vec<SweepRecord>> {
        cells
            .par_iter()
            .map(|&(n, rep)| run_cell(config, &truth, n, rep))
            .collect()
    };
    let new_records = match jobs {
        Some(j) => {
            if j == 0 {
                return Err(Error::validation("jobs must be at least 1"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| Error::validation(format!("thread pool: {e}")))?
                .install(compute)
        }
        None => compute(),
    }?;

    let computed = new_records.len();
    records.extend(new_records);
    records.sort_by_key(|r| (r.n, r.replication));

    let mut csv = String::new();
    {
        let mut buf = Vec::new();
        write_sweep_csv(&records, &mut buf)?;
        csv.push_str(std::str::from_utf8(&buf).expect("csv is utf-8"));
    }
    write_atomic(&csv_path, &csv)?;

    let summary = summarize(config, &records);
    write_atomic(
        &config.out_dir.join("summary.json"),
        &format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )?;
    write_atomic(
        &config.out_dir.join("config.echo.json"),
        &format!("{}\n", serde_json::to_string_pretty(config)?),
    )?;

    Ok(SweepOutcome {
        records,
        summary,
        computed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparePerN {
    pub n: usize,
    pub mean_g_pcbm: f64,
    pub stderr_pcbm: f64,
    pub mean_g_cbm: f64,
    pub stderr_cbm: f64,
    /// `mean_g_cbm - mean_g_pcbm`.
    pub difference: f64,
    pub se_difference: f64,
    /// Gap lower-bound coefficient divided by this `n`.
    pub bound_over_n: f64,
    /// `mean_g_pcbm <= mean_g_cbm + 2 se` — the ordering check.
    pub pcbm_not_above_cbm: bool,
    /// `difference >= bound_over_n - 2 se` — the gap check.
    pub gap_meets_bound: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub pcbm_shape_id: String,
    pub cbm_shape_id: String,
    pub pcbm_shape: PcbmShape,
    pub cbm_shape: PcbmShape,
    pub lambda_pcbm_bound: Rational,
    pub lambda_cbm: Rational,
    pub gap_lower_coefficient: Rational,
    pub per_n: Vec<ComparePerN>,
    pub all_pass: bool,
}

fn load_summary(config: &ExperimentConfig) -> Result<SweepSummary> {
    let path = config.out_dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::validation(format!(
            "cannot read {} (run the sweep first): {e}",
            path.display()
        ))
    })?;
    Ok(serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?)
}

/// Compares a partially supervised sweep against a fully supervised one on
/// the same (inputs, total width, outputs), writing `compare.json` and
/// `compare.svg` into `out_dir`.
pub fn run_compare(
    pcbm_config_path: &Path,
    cbm_config_path: &Path,
    out_dir: &Path,
) -> Result<CompareReport> {
    let pcbm_cfg = ExperimentConfig::from_path(pcbm_config_path)?;
    let cbm_cfg = ExperimentConfig::from_path(cbm_config_path)?;
    let (p, c) = (&pcbm_cfg.shape, &cbm_cfg.shape);
    if c.h1 != 0 {
        return Err(Error::validation(format!(
            "the reference model must supervise all hidden units (h1 = 0), got h1 = {}",
            c.h1
        )));
    }
    if p.n_in != c.n_in || p.m_out != c.m_out || p.hidden_total() != c.hidden_total() {
        return Err(Error::validation(format!(
            "shape mismatch: {} vs {} (inputs, total width, and outputs must agree)",
            p.id(),
            c.id()
        )));
    }
    if pcbm_cfg.n_grid != cbm_cfg.n_grid {
        return Err(Error::validation(
            "the two sweeps must share the same n_grid",
        ));
    }

    let pcbm_sum = load_summary(&pcbm_cfg)?;
    let cbm_sum = load_summary(&cbm_cfg)?;
    let bound = gen_error_gap_lower(p);
    let bound_f = bound.to_f64();

    let mut per_n = Vec::new();
    for (pp, cc) in pcbm_sum.per_n.iter().zip(&cbm_sum.per_n) {
        let take = |p: &PerN, side: &str| -> Result<(f64, f64)> {
            match (p.mean_g, p.stderr) {
                (Some(m), Some(se)) => Ok((m, se)),
                _ => Err(Error::validation(format!(
                    "{side} sweep has fewer than 2 usable replications at n = {}",
                    p.n
                ))),
            }
        };
        let (mp, sp) = take(pp, "partially supervised")?;
        let (mc, sc) = take(cc, "fully supervised")?;
        let se_diff = (sp * sp + sc * sc).sqrt();
        let difference = mc - mp;
        let bound_over_n = bound_f / pp.n as f64;
        per_n.push(ComparePerN {
            n: pp.n,
            mean_g_pcbm: mp,
            stderr_pcbm: sp,
            mean_g_cbm: mc,
            stderr_cbm: sc,
            difference,
            se_difference: se_diff,
            bound_over_n,
            pcbm_not_above_cbm: mp <= mc + 2.0 * se_diff,
            gap_meets_bound: difference >= bound_over_n - 2.0 * se_diff,
        });
    }
    let all_pass = per_n
        .iter()
        .all(|r| r.pcbm_not_above_cbm && r.gap_meets_bound);

    let report = CompareReport {
        pcbm_shape_id: p.id(),
        cbm_shape_id: c.id(),
        pcbm_shape: *p,
        cbm_shape: *c,
        lambda_pcbm_bound: rlct_pcbm_upper(p),
        lambda_cbm: rlct_cbm(c.n_in, c.hidden_total(), c.m_out)?,
        gap_lower_coefficient: bound,
        per_n,
        all_pass,
    };

    std::fs::create_dir_all(out_dir)?;
    write_atomic(
        &out_dir.join("compare.json"),
        &format!("{}\n", serde_json::to_string_pretty(&report)?),
    )?;

    let to_points = |per_n: &[ComparePerN], pick: fn(&ComparePerN) -> f64| -> Vec<(f64, f64)> {
        per_n
            .iter()
            .map(|r| (r.n as f64, r.n as f64 * pick(r)))
            .collect()
    };
    let svg = crate::svg::line_plot(
        crate::svg::Axes {
            title: "n x mean generalization error vs n",
            x_label: "n",
            y_label: "n x mean G",
        },
        &[
            crate::svg::Series {
                label: format!("partial ({})", report.pcbm_shape_id),
                color: crate::svg::PALETTE[0].into(),
                points: to_points(&report.per_n, |r| r.mean_g_pcbm),
            },
            crate::svg::Series {
                label: format!("full ({})", report.cbm_shape_id),
                color: crate::svg::PALETTE[1].into(),
                points: to_points(&report.per_n, |r| r.mean_g_cbm),
            },
        ],
        &[
            (
                report.lambda_pcbm_bound.to_f64(),
                format!("lambda_P bound = {}", report.lambda_pcbm_bound),
            ),
            (
                report.lambda_cbm.to_f64(),
                format!("lambda_C = {}", report.lambda_cbm),
            ),
        ],
    );
    write_atomic(&out_dir.join("compare.svg"), &svg)?;
    Ok(report)
}

/// Slope-fit RLCT estimate from an existing sweep's CSV rows.
pub fn estimate_rlct_slope_from_sweep(config: &ExperimentConfig) -> Result<RlctEstimate> {
    let path = config.out_dir.join("sweep.csv");
    let file = std::fs::File::open(&path).map_err(|e| {
        Error::validation(format!(
            "cannot read {} (run the sweep first): {e}",
            path.display()
        ))
    })?;
    let records = read_sweep_csv(file)?;
    let per_n = aggregate_per_n(&config.n_grid, &records);
    let points: Vec<(usize, f64, f64)> = per_n
        .iter()
        .filter_map(|p| match (p.mean_g, p.stderr) {
            (Some(m), Some(se)) if se > 0.0 => Some((p.n, m, se)),
            _ => None,
        })
        .collect();
    fit_lambda_slope(&points)
}

/// Two-temperature RLCT estimate on a fresh dataset drawn from the sweep's
/// ground truth at sample size `n` (default: the largest grid entry).
pub fn estimate_rlct_wbic_for_config(
    config: &ExperimentConfig,
    n_override: Option<usize>,
) -> Result<RlctEstimate> {
    config.validate()?;
    let n = n_override.unwrap_or(*config.n_grid.last().expect("validated nonempty"));
    if n < 3 {
        return Err(Error::validation("two-temperature estimation needs n >= 3"));
    }
    let truth = make_ground_truth(
        config.shape,
        config.truth_scale,
        mix_seed(config.master_seed, &[stream::TRUTH]),
    )?;
    let data = sample_dataset(
        &truth,
        n,
        mix_seed(config.master_seed, &[stream::DATASET, n as u64, 0]),
    )?;
    let cfg = SamplerConfig {
        seed: mix_seed(config.master_seed, &[stream::CHAINS, n as u64, 0]),
        ..config.sampler
    };
    // The sweep's generator is known, so warm-start the tempered chains at
    // its weights; see `estimate_lambda_wbic` for why a cold start is risky.
    estimate_lambda_wbic(&data, config.shape, &config.prior, &cfg, Some(truth.weights()))
}
