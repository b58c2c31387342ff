//! Seeded multi-run experiments: convergence times, coding gain and
//! communication load per heterogeneity cell.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay_model::DeviceProfile;
use crate::netsim::{
    build_profiles, communication_bits, run_coded, run_uncoded, sample_arrivals, synthesize_problem, time_to_receive,
    CommunicationTally, EpochTrace, HeterogeneityConfig, NoiseSpec, SimError, SyntheticProblem, Training,
};
use crate::planner::{LoadPlan, PlanError, Planner};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

const DATA_STREAM: u64 = 0;
const DELAY_STREAM: u64 = 1;
const ENCODING_STREAM: u64 = 2;
const ASSIGNMENT_STREAM: u64 = 3;

/// Independent ChaCha streams derived from one seed, so that changing how
/// much randomness one consumer draws never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    pub seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }

    pub fn data(&self) -> ChaCha8Rng {
        self.stream(DATA_STREAM)
    }

    pub fn delays(&self) -> ChaCha8Rng {
        self.stream(DELAY_STREAM)
    }

    pub fn encoding(&self) -> ChaCha8Rng {
        self.stream(ENCODING_STREAM)
    }

    /// Seed for dealing heterogeneity ranks to devices.
    pub fn assignment_seed(&self) -> u64 {
        self.stream(ASSIGNMENT_STREAM).next_u64()
    }
}

/// One seeded population and dataset.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub config: HeterogeneityConfig,
    pub problem: SyntheticProblem,
    pub profiles: Vec<DeviceProfile>,
    pub server: DeviceProfile,
}

impl Instance {
    /// The rank assignment comes from the seed; `config.assignment_seed`
    /// is overwritten.
    pub fn build(config: &HeterogeneityConfig, noise: NoiseSpec, seed: u64) -> Result<Self, SimError> {
        let streams = SeedStreams::new(seed);
        let config = HeterogeneityConfig {
            assignment_seed: streams.assignment_seed(),
            ..config.clone()
        };
        let (profiles, server) = build_profiles(&config)?;
        let problem = synthesize_problem(
            config.n_devices,
            config.points_per_device,
            config.model_dim,
            noise,
            &mut streams.data(),
        )?;
        Ok(Self {
            seed,
            config,
            problem,
            profiles,
            server,
        })
    }

    pub fn plan(&self, arm: Arm, tolerance: f64) -> Result<LoadPlan, PlanError> {
        match arm {
            Arm::Uncoded => Ok(LoadPlan::uncoded(&self.profiles)),
            Arm::Coded { delta } => {
                Planner::with_tolerance(tolerance).plan_with_fixed_delta(&self.profiles, &self.server, delta)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Arm {
    Uncoded,
    Coded { delta: f64 },
}

impl Arm {
    pub fn delta(self) -> f64 {
        match self {
            Self::Uncoded => 0.0,
            Self::Coded { delta } => delta,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Uncoded => "uncoded",
            Self::Coded { .. } => "coded",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub plan: LoadPlan,
    pub traces: Vec<EpochTrace>,
}

/// Uncoded and coded arms of one seed share the delay stream.
pub fn run_arm(instance: &Instance, arm: Arm, training: &Training, tolerance: f64) -> Result<ArmRun, ExperimentError> {
    let plan = instance.plan(arm, tolerance)?;
    let streams = SeedStreams::new(instance.seed);
    let traces = match arm {
        Arm::Uncoded => run_uncoded(&instance.problem, &instance.profiles, training, &mut streams.delays())?,
        Arm::Coded { .. } => run_coded(
            &instance.problem,
            &instance.profiles,
            &plan,
            training,
            &mut streams.delays(),
            &mut streams.encoding(),
        )?,
    };
    Ok(ArmRun {
        arm,
        seed: instance.seed,
        plan,
        traces,
    })
}

/// First time NMSE reaches `target`, interpolating linearly in NMSE
/// between the bracketing epochs.
pub fn convergence_time(traces: &[EpochTrace], target: f64) -> Option<f64> {
    let hit = traces.iter().position(|t| t.nmse <= target)?;
    if hit == 0 {
        return Some(traces[0].cumulative_time);
    }
    let (before, after) = (&traces[hit - 1], &traces[hit]);
    let frac = (before.nmse - target) / (before.nmse - after.nmse);
    Some(before.cumulative_time + frac * (after.cumulative_time - before.cumulative_time))
}

/// Median with infinities allowed; `NaN` for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 || sorted[mid].is_infinite() {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Linear-interpolation percentile, `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-target outcome of one arm on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub seed: u64,
    pub parity_rows: usize,
    pub deadline: Option<f64>,
    pub upload_time: f64,
    pub epochs_run: usize,
    pub final_nmse: f64,
    /// Infinite when the target was not reached.
    pub convergence_times: Vec<f64>,
    pub communication: Vec<Option<CommunicationTally>>,
}

pub fn summarize(run: &ArmRun, instance: &Instance, targets: &[f64]) -> ArmSummary {
    let last = run.traces.last().expect("a run has an epoch-0 record");
    ArmSummary {
        arm: run.arm,
        seed: run.seed,
        parity_rows: run.plan.server_parity_count,
        deadline: run.plan.epoch_deadline.is_finite().then_some(run.plan.epoch_deadline),
        upload_time: run.traces[0].cumulative_time,
        epochs_run: last.epoch,
        final_nmse: last.nmse,
        convergence_times: targets
            .iter()
            .map(|&t| convergence_time(&run.traces, t).unwrap_or(f64::INFINITY))
            .collect(),
        communication: targets
            .iter()
            .map(|&t| {
                communication_bits(
                    &run.traces,
                    &instance.profiles,
                    &instance.config,
                    run.plan.server_parity_count,
                    t,
                )
            })
            .collect(),
    }
}

/// A heterogeneity cell evaluated over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRequest {
    pub config: HeterogeneityConfig,
    pub noise: NoiseSpec,
    pub training: Training,
    /// Coded redundancies; zero entries are skipped (the uncoded arm always
    /// runs).
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub targets: Vec<f64>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub arm: Arm,
    /// Per target, median over seeds.
    pub median_times: Vec<f64>,
    /// Per target, median over seeds of total bits, counting a seed that
    /// fell short as infinite; `None` when the median is infinite.
    pub median_bits: Vec<Option<f64>>,
    pub median_deadline: Option<f64>,
    pub median_upload_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodedComparison {
    pub delta: f64,
    /// Uncoded over coded median convergence time, per target.
    pub gains: Vec<f64>,
    /// Coded over uncoded median bits, per target.
    pub load_ratios: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub nu_comp: f64,
    pub nu_link: f64,
    pub targets: Vec<f64>,
    pub seeds: Vec<u64>,
    pub uncoded: ArmStats,
    pub coded: Vec<ArmStats>,
    pub comparisons: Vec<CodedComparison>,
    /// Per target, the coded delta with the largest gain.
    pub best_delta: Vec<Option<f64>>,
    pub best_gain: Vec<f64>,
    pub summaries: Vec<ArmSummary>,
}

impl CellReport {
    pub fn comparison(&self, delta: f64) -> Option<&CodedComparison> {
        self.comparisons.iter().find(|c| (c.delta - delta).abs() < 1e-12)
    }

    pub fn target_index(&self, target: f64) -> Option<usize> {
        self.targets
            .iter()
            .position(|&t| (t - target).abs() <= 1e-12 * target.abs())
    }
}

fn arm_stats(arm: Arm, summaries: &[&ArmSummary], n_targets: usize) -> ArmStats {
    let median_times = (0..n_targets)
        .map(|k| median(&summaries.iter().map(|s| s.convergence_times[k]).collect::<Vec<_>>()))
        .collect();
    let median_bits = (0..n_targets)
        .map(|k| {
            let bits: Vec<f64> = summaries
                .iter()
                .map(|s| s.communication[k].map_or(f64::INFINITY, |c| c.total()))
                .collect();
            Some(median(&bits)).filter(|b| b.is_finite())
        })
        .collect();
    let deadlines: Vec<f64> = summaries.iter().filter_map(|s| s.deadline).collect();
    ArmStats {
        arm,
        median_times,
        median_bits,
        median_deadline: (!deadlines.is_empty()).then(|| median(&deadlines)),
        median_upload_time: median(&summaries.iter().map(|s| s.upload_time).collect::<Vec<_>>()),
    }
}

/// Runs every (seed, arm) job on the rayon pool; results do not depend on
/// scheduling.
pub fn evaluate_cell(request: &CellRequest) -> Result<CellReport, ExperimentError> {
    if request.seeds.is_empty() {
        return Err(ExperimentError::Invalid("no seeds".into()));
    }
    if request.targets.is_empty() {
        return Err(ExperimentError::Invalid("no NMSE targets".into()));
    }
    if let Some(bad) = request.deltas.iter().find(|d| !(0.0..1.0).contains(*d)) {
        return Err(ExperimentError::Invalid(format!("delta {bad} outside [0, 1)")));
    }
    let arms = request_arms(&request.deltas);
    let instances: Vec<Instance> = request
        .seeds
        .par_iter()
        .map(|&seed| Instance::build(&request.config, request.noise, seed))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, Arm)> = (0..instances.len())
        .flat_map(|i| arms.iter().map(move |&arm| (i, arm)))
        .collect();
    let summaries: Vec<ArmSummary> = jobs
        .par_iter()
        .map(|&(i, arm)| {
            let instance = &instances[i];
            log::debug!("seed {} arm {:?}", instance.seed, arm);
            let run = run_arm(instance, arm, &request.training, request.tolerance)?;
            Ok(summarize(&run, instance, &request.targets))
        })
        .collect::<Result<_, ExperimentError>>()?;

    Ok(aggregate_cell(request, &arms, summaries))
}

/// The arms a request runs: uncoded first, then each positive delta.
pub fn request_arms(deltas: &[f64]) -> Vec<Arm> {
    let mut arms = vec![Arm::Uncoded];
    arms.extend(deltas.iter().filter(|&&d| d > 0.0).map(|&delta| Arm::Coded { delta }));
    arms
}

/// Medians, gains and load ratios from per-seed summaries. `arms[0]` must
/// be the uncoded arm.
pub fn aggregate_cell(request: &CellRequest, arms: &[Arm], summaries: Vec<ArmSummary>) -> CellReport {
    let n_targets = request.targets.len();
    let stats_for = |arm: Arm| {
        let mine: Vec<&ArmSummary> = summaries.iter().filter(|s| s.arm == arm).collect();
        arm_stats(arm, &mine, n_targets)
    };
    let uncoded = stats_for(Arm::Uncoded);
    let coded: Vec<ArmStats> = arms[1..].iter().map(|&arm| stats_for(arm)).collect();
    let comparisons: Vec<CodedComparison> = coded
        .iter()
        .map(|stats| CodedComparison {
            delta: stats.arm.delta(),
            gains: (0..n_targets)
                .map(|k| uncoded.median_times[k] / stats.median_times[k])
                .collect(),
            load_ratios: (0..n_targets)
                .map(|k| Some(stats.median_bits[k]? / uncoded.median_bits[k]?))
                .collect(),
        })
        .collect();
    let mut best_delta = vec![None; n_targets];
    let mut best_gain = vec![f64::NAN; n_targets];
    for k in 0..n_targets {
        for c in &comparisons {
            let g = c.gains[k];
            if !g.is_nan() && (best_delta[k].is_none() || g > best_gain[k]) {
                best_delta[k] = Some(c.delta);
                best_gain[k] = g;
            }
        }
    }
    CellReport {
        nu_comp: request.config.nu_comp,
        nu_link: request.config.nu_link,
        targets: request.targets.clone(),
        seeds: request.seeds.clone(),
        uncoded,
        coded,
        comparisons,
        best_delta,
        best_gain,
        summaries,
    }
}

/// Epoch timing without training: uncoded epoch durations and, for the
/// coded plan, the time until `m − c` systematic points have arrived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTimeSamples {
    pub uncoded_durations: Vec<f64>,
    pub coded_receive_times: Vec<f64>,
    pub deadline: f64,
    pub parity_rows: usize,
}

pub fn sample_epoch_times(instance: &Instance, plan: &LoadPlan, epochs: usize) -> Result<EpochTimeSamples, SimError> {
    let streams = SeedStreams::new(instance.seed);
    let full: Vec<usize> = instance.profiles.iter().map(|p| p.local_points).collect();
    let mut rng = streams.delays();
    let mut uncoded = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let arrivals = sample_arrivals(&instance.profiles, &full, f64::INFINITY, &mut rng)?;
        uncoded.push(arrivals.iter().map(|a| a.delay).fold(0.0, f64::max));
    }
    let needed = plan.total_points.saturating_sub(plan.server_parity_count);
    let mut rng = streams.delays();
    let mut coded = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let arrivals = sample_arrivals(&instance.profiles, &plan.per_device_load, plan.epoch_deadline, &mut rng)?;
        coded.push(time_to_receive(&arrivals, needed));
    }
    Ok(EpochTimeSamples {
        uncoded_durations: uncoded,
        coded_receive_times: coded,
        deadline: plan.epoch_deadline,
        parity_rows: plan.server_parity_count,
    })
}

/// Equal-width bins over `[lo, hi]`; values above `hi` (including
/// infinities) land in `overflow`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub overflow: usize,
}

impl Histogram {
    pub fn with_edges(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        let mut overflow = 0;
        for &v in values {
            if v.is_nan() || v > hi {
                overflow += 1;
                continue;
            }
            let idx = if width > 0.0 {
                (((v - lo) / width).floor() as usize).min(bins - 1)
            } else {
                0
            };
            counts[idx] += 1;
        }
        Self {
            edges,
            counts,
            overflow,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(epoch: usize, time: f64, nmse: f64) -> EpochTrace {
        EpochTrace {
            epoch,
            deadline: None,
            arrivals: Vec::new(),
            epoch_duration: 0.0,
            cumulative_time: time,
            nmse,
            returns: 0,
            gradient_error: None,
        }
    }

    #[test]
    fn convergence_time_interpolates() {
        let traces = [trace(0, 0.0, 1.0), trace(1, 2.0, 0.5), trace(2, 4.0, 0.1)];
        assert_eq!(convergence_time(&traces, 1.0), Some(0.0));
        assert_eq!(convergence_time(&traces, 0.5), Some(2.0));
        assert!((convergence_time(&traces, 0.3).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(convergence_time(&traces, 0.01), None);
    }

    #[test]
    fn median_and_percentile() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]), f64::INFINITY);
        assert_eq!(median(&[1.0, 2.0, f64::INFINITY, f64::INFINITY]), f64::INFINITY);
        assert_eq!(median(&[1.0, 2.0, 3.0, f64::INFINITY]), 2.5);
        assert!(median(&[]).is_nan());
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 95.0);
        assert_eq!(percentile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn streams_are_distinct_and_stable() {
        let s = SeedStreams::new(5);
        let a = s.delays().next_u64();
        assert_eq!(a, SeedStreams::new(5).delays().next_u64());
        assert_ne!(a, s.encoding().next_u64());
        assert_ne!(a, s.data().next_u64());
        assert_ne!(a, SeedStreams::new(6).delays().next_u64());
    }

    #[test]
    fn histogram_bins_and_overflow() {
        let h = Histogram::with_edges(&[0.0, 0.5, 1.0, 2.0, f64::INFINITY], 0.0, 1.0, 2);
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(h.overflow, 2);
    }

    #[test]
    fn small_cell_runs_and_is_deterministic() {
        let config = HeterogeneityConfig {
            n_devices: 6,
            model_dim: 20,
            points_per_device: 40,
            ..HeterogeneityConfig::paper()
        };
        let request = CellRequest {
            config,
            noise: NoiseSpec::default(),
            training: Training::new(0.5, 400, Some(0.02)),
            deltas: vec![0.0, 0.1, 0.2],
            seeds: vec![1, 2, 3],
            targets: vec![0.1, 0.02],
            tolerance: 1.0,
        };
        let a = evaluate_cell(&request).unwrap();
        let b = evaluate_cell(&request).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(a.coded.len(), 2);
        assert!(a.uncoded.median_times.iter().all(|t| t.is_finite()));
        assert_eq!(a.summaries.len(), 9);
        assert!(a.best_delta[0].is_some());
        let uncoded_upload = a.uncoded.median_upload_time;
        assert_eq!(uncoded_upload, 0.0);
        assert!(a.coded.iter().all(|c| c.median_upload_time > 0.0));
    }
}
