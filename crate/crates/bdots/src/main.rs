//! Command-line front end: fit curves to long-format CSV data, run the
//! group-difference tests, adjust p-value series, and execute simulation
//! scenarios.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use bdots::curves::{CurveModel, CurveSpec};
use bdots::fitting::{fit_subject, FitOptions, SubjectFit, SubjectSeries};
use bdots::harness::{run_scenario, HarnessError, SimReport, SimScenario};
use bdots::inference::{
    adjust_alpha, estimate_rho, intervals_from_mask, p_adjust, significant_intervals,
    AdjustedAlpha,
};
use bdots::permutation::{permutation_test, PermError, PermOptions};
use bdots::resampling::{
    diff_test_stats, het_bootstrap, hom_bootstrap, paired_diff_bootstrap, GroupFits,
    ResampleError, StatMethod, TestStatSeries,
};

#[derive(Parser)]
#[command(name = "bdots", version, about = "Detects time windows where two groups' series differ")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TestMethod {
    Homboot,
    Hetboot,
    Perm,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a curve family to every subject in a long-format CSV.
    Fit {
        input: PathBuf,
        #[arg(long, default_value = "logistic4")]
        curve: String,
        /// Model AR(1) autocorrelation in the residuals (default on).
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        ar1: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a two-group difference test on a fit file.
    Test {
        fits: PathBuf,
        #[arg(long, value_enum)]
        method: TestMethod,
        #[arg(long, default_value_t = false)]
        paired: bool,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Bootstrap sample count.
        #[arg(long = "B", alias = "boots", default_value_t = 1000)]
        bootstrap_samples: usize,
        /// Permutation count.
        #[arg(long = "P", alias = "perms", default_value_t = 1000)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo scenario described by a JSON config.
    Sim {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adjust a CSV column of p-values for correlated repeated tests.
    Padjust {
        input: PathBuf,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::new(1, e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("BDOTS_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit {
            input,
            curve,
            ar1,
            out,
        } => cmd_fit(&input, &curve, ar1, &out),
        Command::Test {
            fits,
            method,
            paired,
            alpha,
            bootstrap_samples,
            permutations,
            seed,
            out,
        } => cmd_test(
            &fits,
            method,
            paired,
            alpha,
            bootstrap_samples,
            permutations,
            seed,
            &out,
        ),
        Command::Sim { scenario, out } => cmd_sim(&scenario, &out),
        Command::Padjust {
            input,
            rho,
            alpha,
            out,
        } => cmd_padjust(&input, rho, alpha, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

#[derive(Debug, Deserialize)]
struct LongRow {
    subject: String,
    group: String,
    #[serde(default)]
    pair_id: Option<String>,
    time: f64,
    value: f64,
}

/// Fit-file schema shared by `fit` (writer) and `test` (reader).
#[derive(Serialize, Deserialize)]
struct FitFile {
    schema_version: u32,
    curve: String,
    ar1: bool,
    /// Union of observed time points across subjects; the analysis grid.
    times: Vec<f64>,
    subjects: Vec<FitEntry>,
    warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FitEntry {
    subject_id: String,
    group: String,
    pair_id: Option<String>,
    fit: SubjectFit,
}

fn read_long_csv(path: &Path) -> Result<Vec<SubjectSeries>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::new(2, format!("cannot read {}: {e}", path.display())))?;
    let mut order: Vec<String> = Vec::new();
    let mut by_subject: HashMap<String, SubjectSeries> = HashMap::new();
    for record in reader.deserialize::<LongRow>() {
        let row = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e
                    .position()
                    .map(|p| p.line().to_string())
                    .unwrap_or_else(|| "?".into());
                return Err(CliError::new(2, format!("malformed CSV at line {line}: {e}")));
            }
        };
        if !row.time.is_finite() || !row.value.is_finite() {
            return Err(CliError::new(
                2,
                format!("non-finite time or value for subject {}", row.subject),
            ));
        }
        let pair_id = row.pair_id.filter(|p| !p.is_empty());
        let entry = by_subject.entry(row.subject.clone()).or_insert_with(|| {
            order.push(row.subject.clone());
            SubjectSeries {
                subject_id: row.subject.clone(),
                group: row.group.clone(),
                pair_id: pair_id.clone(),
                times: Vec::new(),
                values: Vec::new(),
            }
        });
        if entry.group != row.group {
            return Err(CliError::new(
                2,
                format!(
                    "subject {} appears in groups {} and {}",
                    row.subject, entry.group, row.group
                ),
            ));
        }
        if entry.times.contains(&row.time) {
            return Err(CliError::new(
                2,
                format!(
                    "duplicate (subject, time) = ({}, {}) at line {}",
                    row.subject,
                    row.time,
                    reader.position().line()
                ),
            ));
        }
        entry.times.push(row.time);
        entry.values.push(row.value);
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut s = by_subject.remove(&id).expect("collected above");
        let mut idx: Vec<usize> = (0..s.times.len()).collect();
        idx.sort_by(|&a, &b| s.times[a].total_cmp(&s.times[b]));
        s.times = idx.iter().map(|&i| s.times[i]).collect();
        s.values = idx.iter().map(|&i| s.values[i]).collect();
        out.push(s);
    }
    Ok(out)
}

fn cmd_fit(input: &Path, curve: &str, ar1: bool, out: &Path) -> CliResult {
    let spec =
        CurveSpec::by_name(curve).map_err(|e| CliError::new(2, e.to_string()))?;
    let series = read_long_csv(input)?;
    if series.is_empty() {
        return Err(CliError::new(2, "input contains no observations"));
    }
    let mut times: Vec<f64> = series.iter().flat_map(|s| s.times.iter().copied()).collect();
    times.sort_by(|a, b| a.total_cmp(b));
    times.dedup();

    let opts = FitOptions::default();
    let mut subjects = Vec::new();
    let mut warnings = Vec::new();
    for s in &series {
        match fit_subject(s, &spec, ar1, &opts) {
            Ok(fit) => {
                if !fit.converged {
                    warnings.push(format!("subject {} did not converge", s.subject_id));
                }
                subjects.push(FitEntry {
                    subject_id: s.subject_id.clone(),
                    group: s.group.clone(),
                    pair_id: s.pair_id.clone(),
                    fit,
                });
            }
            Err(e) => warnings.push(format!("subject {}: {e}", s.subject_id)),
        }
    }
    let converged = subjects.iter().filter(|e| e.fit.converged).count();
    if converged == 0 {
        return Err(CliError::new(3, "no subject fits converged"));
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let file = FitFile {
        schema_version: 1,
        curve: spec.name().to_string(),
        ar1,
        times,
        subjects,
        warnings,
    };
    fs::write(out, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

#[derive(Serialize)]
struct PermSection {
    threshold: f64,
    p_value_max: f64,
}

#[derive(Serialize)]
struct TestReport {
    schema_version: u32,
    method: String,
    paired: bool,
    alpha: f64,
    seed: u64,
    stats: TestStatSeries,
    adjusted: Option<AdjustedAlpha>,
    permutation: Option<PermSection>,
    threshold: f64,
    mask: Vec<bool>,
    intervals: Vec<[f64; 2]>,
}

fn split_groups(file: &FitFile, paired: bool) -> Result<(GroupFits, GroupFits), CliError> {
    let mut names: Vec<&str> = Vec::new();
    for e in &file.subjects {
        if !names.contains(&e.group.as_str()) {
            names.push(&e.group);
        }
    }
    if names.len() != 2 {
        return Err(CliError::new(
            2,
            format!("fit file must contain exactly 2 groups, found {}", names.len()),
        ));
    }
    let build = |name: &str| -> Result<GroupFits, CliError> {
        let entries: Vec<&FitEntry> = file
            .subjects
            .iter()
            .filter(|e| e.group == name && e.fit.converged)
            .collect();
        let pair_ids = if paired {
            let ids: Vec<String> = entries.iter().filter_map(|e| e.pair_id.clone()).collect();
            if ids.len() != entries.len() {
                return Err(CliError::new(
                    4,
                    format!("--paired requested but group {name} is missing pair ids"),
                ));
            }
            Some(ids)
        } else {
            None
        };
        Ok(GroupFits {
            group: name.to_string(),
            fits: entries.iter().map(|e| e.fit.clone()).collect(),
            pair_ids,
        })
    };
    Ok((build(names[0])?, build(names[1])?))
}

fn resample_code(e: &ResampleError) -> u8 {
    match e {
        ResampleError::ZeroVariance(_) => 5,
        ResampleError::MissingPairIds | ResampleError::UnpairedSubject(_) => 4,
        _ => 1,
    }
}

fn perm_code(e: &PermError) -> u8 {
    match e {
        PermError::ZeroVariance(_) => 5,
        PermError::Resample(inner) => resample_code(inner),
        _ => 1,
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_test(
    fits_path: &Path,
    method: TestMethod,
    paired: bool,
    alpha: f64,
    b: usize,
    p_count: usize,
    seed: u64,
    out: &Path,
) -> CliResult {
    let text = fs::read_to_string(fits_path)?;
    let file: FitFile =
        serde_json::from_str(&text).map_err(|e| CliError::new(2, format!("bad fit file: {e}")))?;
    let spec = CurveSpec::by_name(&file.curve).map_err(|e| CliError::new(2, e.to_string()))?;
    if paired && method == TestMethod::Homboot {
        return Err(CliError::new(
            2,
            "the homogeneous bootstrap has no paired variant",
        ));
    }
    let (g1, g2) = split_groups(&file, paired)?;
    let times = &file.times;

    let report = match method {
        TestMethod::Homboot | TestMethod::Hetboot => {
            let run = || -> Result<TestStatSeries, ResampleError> {
                match method {
                    TestMethod::Homboot => {
                        let s1 = hom_bootstrap(&g1, &spec, times, b, seed ^ 0x1)?;
                        let s2 = hom_bootstrap(&g2, &spec, times, b, seed ^ 0x2)?;
                        diff_test_stats(&s1, &s2, StatMethod::Homogeneous, false)
                    }
                    TestMethod::Hetboot if paired => {
                        paired_diff_bootstrap(&g1, &g2, &spec, times, b, seed)
                    }
                    _ => {
                        let s1 = het_bootstrap(&g1, &spec, times, b, seed ^ 0x1, None)?;
                        let s2 = het_bootstrap(&g2, &spec, times, b, seed ^ 0x2, None)?;
                        diff_test_stats(&s1, &s2, StatMethod::Heterogeneous, false)
                    }
                }
            };
            let stats = run().map_err(|e| CliError::new(resample_code(&e), e.to_string()))?;
            let rho = estimate_rho(&stats).map_err(|e| CliError::new(2, e.to_string()))?;
            let adj = adjust_alpha(alpha, rho, times.len())
                .map_err(|e| CliError::new(2, e.to_string()))?;
            let sig = significant_intervals(&stats, &adj);
            TestReport {
                schema_version: 1,
                method: if method == TestMethod::Homboot {
                    "homboot".into()
                } else {
                    "hetboot".into()
                },
                paired,
                alpha,
                seed,
                stats,
                adjusted: Some(adj),
                permutation: None,
                threshold: sig.threshold,
                mask: sig.mask,
                intervals: sig.intervals,
            }
        }
        TestMethod::Perm => {
            let opts = PermOptions {
                paired,
                ..PermOptions::default()
            };
            let result = permutation_test(&g1, &g2, &spec, times, p_count, alpha, seed, &opts)
                .map_err(|e| CliError::new(perm_code(&e), e.to_string()))?;
            TestReport {
                schema_version: 1,
                method: "perm".into(),
                paired,
                alpha,
                seed,
                intervals: intervals_from_mask(times, &result.significant),
                threshold: result.threshold,
                mask: result.significant.clone(),
                adjusted: None,
                permutation: Some(PermSection {
                    threshold: result.threshold,
                    p_value_max: result.p_value_max,
                }),
                stats: result.observed,
            }
        }
    };

    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    let csv_path = out.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["time", "stat", "significant"])?;
    for i in 0..report.stats.times.len() {
        w.write_record([
            report.stats.times[i].to_string(),
            report.stats.stats[i].to_string(),
            report.mask[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_sim_csvs(report: &SimReport, dir: &Path) -> CliResult {
    let mut w = csv::Writer::from_path(dir.join("per_time.csv"))?;
    let mut header = vec!["time".to_string()];
    header.extend(report.methods.iter().map(|m| m.method.label().to_string()));
    w.write_record(&header)?;
    for (i, t) in report.times.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(report.methods.iter().map(|m| m.per_time_rate[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("replicates.csv"))?;
    w.write_record([
        "replicate",
        "method",
        "any_null_detection",
        "any_effect_detection",
        "onset",
    ])?;
    for row in &report.replicate_rows {
        w.write_record([
            row.replicate.to_string(),
            row.method.label().to_string(),
            row.any_null_detection.to_string(),
            row.any_effect_detection.to_string(),
            row.onset.map(|o| o.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sim(scenario_path: &Path, out: &Path) -> CliResult {
    let text = fs::read_to_string(scenario_path)?;
    let scenario: SimScenario = serde_json::from_str(&text)
        .map_err(|e| CliError::new(2, format!("bad scenario config: {e}")))?;
    let report = run_scenario(&scenario).map_err(|e| match e {
        HarnessError::Config(_) => CliError::new(2, e.to_string()),
        other => CliError::new(1, other.to_string()),
    })?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_sim_csvs(&report, out)?;
    Ok(())
}

fn cmd_padjust(input: &Path, rho: f64, alpha: f64, out: Option<&Path>) -> CliResult {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(input)
        .map_err(|e| CliError::new(2, format!("cannot read {}: {e}", input.display())))?;
    let headers = reader.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == "p")
        .ok_or_else(|| CliError::new(2, "input needs a 'p' column"))?;
    let mut pvals = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| CliError::new(2, format!("malformed CSV: {e}")))?;
        let raw = record.get(col).unwrap_or("");
        let p: f64 = raw
            .parse()
            .map_err(|_| CliError::new(2, format!("bad p-value {raw:?}")))?;
        pvals.push(p);
    }
    let adjusted = p_adjust(&pvals, rho).map_err(|e| CliError::new(2, e.to_string()))?;
    let mut buffer = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buffer);
        w.write_record(["p", "p_adj", "significant"])?;
        for (p, a) in pvals.iter().zip(&adjusted) {
            w.write_record([p.to_string(), a.to_string(), (*a <= alpha).to_string()])?;
        }
        w.flush()?;
    }
    match out {
        Some(path) => fs::write(path, buffer)?,
        None => print!("{}", String::from_utf8(buffer).expect("csv output is utf8")),
    }
    Ok(())
}
