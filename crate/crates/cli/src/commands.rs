//! The four subcommands. Each writes its outputs under
//! `config.output_dir` with a manifest next to every file and returns a
//! short human-readable summary.

use std::fmt::Write as _;

use cfl_core::experiment::{
    aggregate_cell, evaluate_cell, percentile, request_arms, run_arm, sample_epoch_times, summarize, Arm, ArmRun,
    CellReport, CellRequest, Histogram, Instance, SeedStreams,
};
use cfl_core::netsim::{build_profiles, HeterogeneityConfig};
use cfl_core::planner::{LoadPlan, Planner};
use cfl_core::DeviceProfile;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Mode};
use crate::output::{write_csv, write_json, write_manifest};
use crate::CliError;

pub const PLAN_FILE: &str = "plan.json";
pub const TRAIN_FILE: &str = "train.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Profiles for the rank assignment that `seed` produces, without
/// synthesizing data.
fn seeded_profiles(
    population: &HeterogeneityConfig,
    seed: u64,
) -> Result<(Vec<DeviceProfile>, DeviceProfile), CliError> {
    let config = HeterogeneityConfig {
        assignment_seed: SeedStreams::new(seed).assignment_seed(),
        ..population.clone()
    };
    Ok(build_profiles(&config)?)
}

fn fmt_deadline(t: f64) -> String {
    if t.is_finite() {
        format!("{t:.4} s")
    } else {
        "none".into()
    }
}

#[derive(Debug, Serialize)]
pub struct FixedPlan {
    pub delta: f64,
    pub plan: LoadPlan,
}

#[derive(Debug, Serialize)]
pub struct SeedPlans {
    pub seed: u64,
    pub joint: LoadPlan,
    pub fixed: Vec<FixedPlan>,
}

/// Joint plan under the parity cap and one plan per grid redundancy, for
/// every seed's device assignment.
pub fn run_plan(config: &ExperimentConfig) -> Result<String, CliError> {
    let planner = Planner::with_tolerance(config.tolerance);
    let cap = config.parity_cap();
    let mut plans = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (profiles, server) = seeded_profiles(&config.population, seed)?;
        let joint = planner.plan(&profiles, &server, cap)?;
        let fixed = config
            .delta_grid
            .iter()
            .map(|&delta| {
                Ok(FixedPlan {
                    delta,
                    plan: planner.plan_with_fixed_delta(&profiles, &server, delta)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        plans.push(SeedPlans { seed, joint, fixed });
    }

    let path = config.output_dir.join(PLAN_FILE);
    write_json(&path, &plans)?;
    write_manifest("plan", &path, config, ())?;

    let mut out = String::new();
    for p in &plans {
        let j = &p.joint;
        let _ = writeln!(
            out,
            "seed {}: joint plan delta {:.4}, c {}, deadline {}, expected return {:.2} of {} (cap {})",
            p.seed,
            j.redundancy_delta,
            j.server_parity_count,
            fmt_deadline(j.epoch_deadline),
            j.expected_aggregate_return,
            j.total_points,
            j.parity_cap
        );
        for f in &p.fixed {
            let _ = writeln!(
                out,
                "  delta {}: c {}, deadline {}, loads {:?}",
                f.delta,
                f.plan.server_parity_count,
                fmt_deadline(f.plan.epoch_deadline),
                f.plan.per_device_load
            );
        }
    }
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(out)
}

fn config_arms(config: &ExperimentConfig) -> Result<Vec<Arm>, CliError> {
    let coded = config.coded_deltas();
    let arms = match config.mode {
        Mode::Both => request_arms(&coded),
        Mode::Uncoded => vec![Arm::Uncoded],
        Mode::Coded => coded.iter().map(|&delta| Arm::Coded { delta }).collect(),
    };
    if arms.is_empty() {
        return Err(CliError::Config("coded mode needs a positive delta".into()));
    }
    Ok(arms)
}

fn cell_request(config: &ExperimentConfig, population: HeterogeneityConfig) -> CellRequest {
    CellRequest {
        config: population,
        noise: config.noise(),
        training: config.training(),
        deltas: config.coded_deltas(),
        seeds: config.seeds.clone(),
        targets: config.nmse_targets.clone(),
        tolerance: config.tolerance,
    }
}

fn run_id(run: &ArmRun) -> String {
    match run.arm {
        Arm::Uncoded => format!("seed{}-uncoded", run.seed),
        Arm::Coded { delta } => format!("seed{}-coded-{delta}", run.seed),
    }
}

#[derive(Debug, Serialize)]
struct TraceRow<'a> {
    run_id: &'a str,
    mode: &'static str,
    delta: f64,
    nu_comp: f64,
    nu_link: f64,
    epoch: usize,
    cumulative_time_s: f64,
    nmse: f64,
    returns: usize,
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    run_id: &'a str,
    mode: &'static str,
    delta: f64,
    seed: u64,
    parity_rows: usize,
    deadline_s: Option<f64>,
    upload_time_s: f64,
    epochs_run: usize,
    final_nmse: f64,
    nmse_target: f64,
    convergence_time_s: f64,
    total_bits: Option<f64>,
}

/// NMSE against cumulative simulated time for every (seed, arm) run.
pub fn run_train(config: &ExperimentConfig) -> Result<String, CliError> {
    let arms = config_arms(config)?;
    let request = cell_request(config, config.population.clone());
    let instances: Vec<Instance> = config
        .seeds
        .par_iter()
        .map(|&seed| Instance::build(&request.config, request.noise, seed))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, Arm)> = (0..instances.len())
        .flat_map(|i| arms.iter().map(move |&arm| (i, arm)))
        .collect();
    let runs: Vec<ArmRun> = jobs
        .par_iter()
        .map(|&(i, arm)| run_arm(&instances[i], arm, &request.training, request.tolerance))
        .collect::<Result<_, _>>()?;

    let ids: Vec<String> = runs.iter().map(run_id).collect();
    let (nu_comp, nu_link) = (config.population.nu_comp, config.population.nu_link);
    let mut trace_rows = Vec::new();
    let mut summary_rows = Vec::new();
    let mut summaries = Vec::with_capacity(runs.len());
    for ((run, id), &(i, _)) in runs.iter().zip(&ids).zip(&jobs) {
        let mode = run.arm.label();
        let delta = run.arm.delta();
        trace_rows.extend(run.traces.iter().map(|t| TraceRow {
            run_id: id,
            mode,
            delta,
            nu_comp,
            nu_link,
            epoch: t.epoch,
            cumulative_time_s: t.cumulative_time,
            nmse: t.nmse,
            returns: t.returns,
        }));
        let summary = summarize(run, &instances[i], &config.nmse_targets);
        for (k, &target) in config.nmse_targets.iter().enumerate() {
            summary_rows.push(SummaryRow {
                run_id: id,
                mode,
                delta,
                seed: run.seed,
                parity_rows: summary.parity_rows,
                deadline_s: summary.deadline,
                upload_time_s: summary.upload_time,
                epochs_run: summary.epochs_run,
                final_nmse: summary.final_nmse,
                nmse_target: target,
                convergence_time_s: summary.convergence_times[k],
                total_bits: summary.communication[k].map(|c| c.total()),
            });
        }
        summaries.push(summary);
    }

    let dir = &config.output_dir;
    let trace_path = dir.join(TRAIN_FILE);
    write_csv(&trace_path, &trace_rows)?;
    write_manifest("train", &trace_path, config, ())?;
    let summary_path = dir.join(TRAIN_SUMMARY_FILE);
    write_csv(&summary_path, &summary_rows)?;
    write_manifest("train", &summary_path, config, ())?;

    let mut out = String::new();
    for row in &summary_rows {
        let _ = writeln!(
            out,
            "{} target {:e}: {:.1} s after {} epochs",
            row.run_id, row.nmse_target, row.convergence_time_s, row.epochs_run
        );
    }
    if config.mode == Mode::Both {
        let report = aggregate_cell(&request, &arms, summaries);
        let report_path = dir.join(TRAIN_REPORT_FILE);
        write_json(&report_path, &report)?;
        write_manifest("train", &report_path, config, ())?;
        out.push_str(&describe_cell(&report));
    }
    let _ = writeln!(out, "wrote {}", trace_path.display());
    Ok(out)
}

fn describe_cell(report: &CellReport) -> String {
    let mut out = String::new();
    for (k, target) in report.targets.iter().enumerate() {
        let _ = write!(
            out,
            "({}, {}) target {:e}: uncoded {:.1} s",
            report.nu_comp, report.nu_link, target, report.uncoded.median_times[k]
        );
        for c in &report.comparisons {
            let _ = write!(out, ", delta {} gain {:.3}", c.delta, c.gains[k]);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize)]
struct HistogramRow {
    bin_lo: f64,
    bin_hi: f64,
    uncoded_count: usize,
    coded_count: usize,
}

#[derive(Debug, Serialize)]
pub struct HistogramDetails {
    pub delta: f64,
    pub epochs_per_seed: usize,
    pub deadlines: Vec<f64>,
    pub parity_rows: Vec<usize>,
    pub uncoded_median: f64,
    pub uncoded_p95: f64,
    pub coded_median: f64,
    pub coded_p95: f64,
}

/// Per-epoch time to collect `m` gradient points: uncoded epochs wait for
/// every device, coded epochs for `m − c` systematic points. Uses the first
/// positive redundancy of the grid.
pub fn run_histogram(config: &ExperimentConfig) -> Result<String, CliError> {
    let delta = *config
        .coded_deltas()
        .first()
        .ok_or_else(|| CliError::Config("histogram needs a positive delta".into()))?;
    let planner = Planner::with_tolerance(config.tolerance);
    let samples = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let instance = Instance::build(&config.population, config.noise(), seed)?;
            let plan = planner.plan_with_fixed_delta(&instance.profiles, &instance.server, delta)?;
            Ok(sample_epoch_times(&instance, &plan, config.histogram_epochs)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let uncoded: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.uncoded_durations.iter().copied())
        .collect();
    let coded: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.coded_receive_times.iter().copied())
        .collect();
    let hi = uncoded
        .iter()
        .chain(&coded)
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let bins = config.histogram_bins;
    let u = Histogram::with_edges(&uncoded, 0.0, hi, bins);
    let c = Histogram::with_edges(&coded, 0.0, hi, bins);
    let mut rows: Vec<HistogramRow> = (0..bins)
        .map(|b| HistogramRow {
            bin_lo: u.edges[b],
            bin_hi: u.edges[b + 1],
            uncoded_count: u.counts[b],
            coded_count: c.counts[b],
        })
        .collect();
    rows.push(HistogramRow {
        bin_lo: hi,
        bin_hi: f64::INFINITY,
        uncoded_count: u.overflow,
        coded_count: c.overflow,
    });

    let details = HistogramDetails {
        delta,
        epochs_per_seed: config.histogram_epochs,
        deadlines: samples.iter().map(|s| s.deadline).collect(),
        parity_rows: samples.iter().map(|s| s.parity_rows).collect(),
        uncoded_median: percentile(&uncoded, 0.5),
        uncoded_p95: percentile(&uncoded, 0.95),
        coded_median: percentile(&coded, 0.5),
        coded_p95: percentile(&coded, 0.95),
    };
    let path = config.output_dir.join(HISTOGRAM_FILE);
    write_csv(&path, &rows)?;
    let summary = format!(
        "delta {}: uncoded median {:.3} s, p95 {:.3} s; coded median {:.3} s, p95 {:.3} s; deadlines {:?}\nwrote {}\n",
        delta,
        details.uncoded_median,
        details.uncoded_p95,
        details.coded_median,
        details.coded_p95,
        details.deadlines,
        path.display()
    );
    write_manifest("histogram", &path, config, details)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    nu_comp: f64,
    nu_link: f64,
    nmse_target: f64,
    delta: f64,
    uncoded_time_s: f64,
    coded_time_s: f64,
    gain: f64,
    load_ratio: Option<f64>,
    best: bool,
}

/// File name of one sweep cell's report.
pub fn cell_file_name(nu_comp: f64, nu_link: f64) -> String {
    format!("cell_{nu_comp}_{nu_link}.json")
}

/// Coding gain and communication load over the heterogeneity grid. Both
/// arms always run; `mode` is ignored. Each cell's report is written as soon
/// as it finishes.
pub fn run_sweep(config: &ExperimentConfig) -> Result<String, CliError> {
    if config.coded_deltas().is_empty() {
        return Err(CliError::Config("sweep needs a positive delta".into()));
    }
    let cells: Vec<(f64, f64)> = config
        .sweep
        .nu_comp
        .iter()
        .flat_map(|&c| config.sweep.nu_link.iter().map(move |&l| (c, l)))
        .collect();
    let dir = &config.output_dir;
    let reports: Vec<CellReport> = cells
        .par_iter()
        .map(|&(nu_comp, nu_link)| {
            let population = config.population.clone().with_heterogeneity(nu_comp, nu_link);
            let request = cell_request(config, population);
            let report = evaluate_cell(&request)?;
            let path = dir.join(cell_file_name(nu_comp, nu_link));
            write_json(&path, &report)?;
            write_manifest("sweep", &path, config, &request)?;
            log::info!("cell ({nu_comp}, {nu_link}) done");
            Ok(report)
        })
        .collect::<Result<_, CliError>>()?;

    let mut rows = Vec::new();
    let mut out = String::new();
    for report in &reports {
        for (k, &target) in report.targets.iter().enumerate() {
            for (comparison, stats) in report.comparisons.iter().zip(&report.coded) {
                rows.push(SweepRow {
                    nu_comp: report.nu_comp,
                    nu_link: report.nu_link,
                    nmse_target: target,
                    delta: comparison.delta,
                    uncoded_time_s: report.uncoded.median_times[k],
                    coded_time_s: stats.median_times[k],
                    gain: comparison.gains[k],
                    load_ratio: comparison.load_ratios[k],
                    best: report.best_delta[k] == Some(comparison.delta),
                });
            }
        }
        out.push_str(&describe_cell(report));
    }
    let path = dir.join(SWEEP_FILE);
    write_csv(&path, &rows)?;
    write_manifest("sweep", &path, config, &cells)?;
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(out)
}
