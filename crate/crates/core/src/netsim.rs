//! Epoch-synchronous simulation of coded and uncoded federated training
//! over a heterogeneous device population.
//!
//! Uncoded epochs end when the slowest device returns. Coded epochs last
//! exactly the planned deadline, after a one-off parity upload.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay_model::{DelayError, DeviceProfile};
use crate::encoder::{
    accumulate_parity, build_weights, encode_local, select_systematic_set, CompositeParity, EncodeError,
    GeneratorFamily, LocalDataset,
};
use crate::planner::LoadPlan;
use crate::trainer::{
    aggregate_and_step, check_divergence, least_squares_gradient, nmse, parity_gradient, systematic_gradient,
    ModelState, PartialGradient, TrainError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("plan does not match the population: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl SimError {
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Self::Train(TrainError::Diverged { .. }) | Self::Train(TrainError::NonFinite { .. })
        )
    }
}

/// Population and link parameters. Device ranked `i` (0 = fastest) has MAC
/// rate `(1 − nu_comp)^i · base_mac_rate` and link rate
/// `(1 − nu_link)^i · base_link_rate`; ranks are dealt to devices by two
/// independent seeded permutations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeterogeneityConfig {
    pub n_devices: usize,
    pub nu_comp: f64,
    pub nu_link: f64,
    /// MAC/s of the fastest device.
    pub base_mac_rate: f64,
    /// bits/s of the fastest link.
    pub base_link_rate: f64,
    pub model_dim: usize,
    pub points_per_device: usize,
    pub erasure_prob: f64,
    pub header_overhead: f64,
    pub bits_per_value: u32,
    pub server_mac_multiplier: f64,
    pub assignment_seed: u64,
}

impl HeterogeneityConfig {
    pub fn paper() -> Self {
        Self {
            n_devices: 24,
            nu_comp: 0.2,
            nu_link: 0.2,
            base_mac_rate: 1536e3,
            base_link_rate: 216e3,
            model_dim: 500,
            points_per_device: 300,
            erasure_prob: 0.1,
            header_overhead: 0.1,
            bits_per_value: 32,
            server_mac_multiplier: 10.0,
            assignment_seed: 0,
        }
    }

    pub fn with_heterogeneity(mut self, nu_comp: f64, nu_link: f64) -> Self {
        self.nu_comp = nu_comp;
        self.nu_link = nu_link;
        self
    }

    pub fn total_points(&self) -> usize {
        self.n_devices * self.points_per_device
    }

    /// Bits in one gradient or model packet, header included.
    pub fn packet_bits(&self) -> f64 {
        (1.0 + self.header_overhead) * f64::from(self.bits_per_value) * self.model_dim as f64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |what: String| Err(SimError::Config(what));
        if self.n_devices == 0 {
            return bad("n_devices must be positive".into());
        }
        if self.model_dim == 0 {
            return bad("model_dim must be positive".into());
        }
        for (name, nu) in [("nu_comp", self.nu_comp), ("nu_link", self.nu_link)] {
            if !(0.0..1.0).contains(&nu) {
                return bad(format!("{name} must lie in [0, 1), got {nu}"));
            }
        }
        for (name, v) in [
            ("base_mac_rate", self.base_mac_rate),
            ("base_link_rate", self.base_link_rate),
            ("server_mac_multiplier", self.server_mac_multiplier),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.erasure_prob) {
            return bad(format!("erasure_prob must lie in [0, 1), got {}", self.erasure_prob));
        }
        if !(self.header_overhead >= 0.0 && self.header_overhead.is_finite()) {
            return bad(format!(
                "header_overhead must be nonnegative, got {}",
                self.header_overhead
            ));
        }
        if self.bits_per_value == 0 {
            return bad("bits_per_value must be positive".into());
        }
        Ok(())
    }
}

impl Default for HeterogeneityConfig {
    fn default() -> Self {
        Self::paper()
    }
}

/// Client profiles in device order plus the server pseudo-device, whose
/// parity cap is `m`.
pub fn build_profiles(config: &HeterogeneityConfig) -> Result<(Vec<DeviceProfile>, DeviceProfile), SimError> {
    config.validate()?;
    let n = config.n_devices;
    let d = config.model_dim as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.assignment_seed);
    let mut comp_rank: Vec<usize> = (0..n).collect();
    comp_rank.shuffle(&mut rng);
    let mut link_rank: Vec<usize> = (0..n).collect();
    link_rank.shuffle(&mut rng);

    let mut profiles = Vec::with_capacity(n);
    for id in 0..n {
        let mac_rate = (1.0 - config.nu_comp).powi(comp_rank[id] as i32) * config.base_mac_rate;
        let link_rate = (1.0 - config.nu_link).powi(link_rank[id] as i32) * config.base_link_rate;
        let a = d / mac_rate;
        profiles.push(DeviceProfile::client(
            id,
            a,
            2.0 / a,
            config.packet_bits() / link_rate,
            config.erasure_prob,
            config.points_per_device,
        )?);
    }
    let a_server = d / (config.server_mac_multiplier * config.base_mac_rate);
    let server = DeviceProfile::server(n, a_server, 2.0 / a_server, config.total_points())?;
    Ok((profiles, server))
}

/// Which power the SNR compares the noise against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnrReference {
    /// Noise variance `‖β‖²/snr`: the power of one noiseless label `x·β`.
    PerSample,
    /// Noise variance `‖β‖²/(d·snr)`: the average power of one model
    /// coefficient.
    #[default]
    PerFeature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// `None` means noiseless labels.
    pub snr_db: Option<f64>,
    pub reference: SnrReference,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            snr_db: None,
            reference: SnrReference::default(),
        }
    }

    pub fn new(snr_db: f64, reference: SnrReference) -> Self {
        Self {
            snr_db: Some(snr_db),
            reference,
        }
    }

    pub fn noise_variance(&self, beta: ArrayView1<'_, f64>) -> f64 {
        let Some(db) = self.snr_db else { return 0.0 };
        let signal = beta.dot(&beta);
        let linear = 10f64.powf(db / 10.0);
        match self.reference {
            SnrReference::PerSample => signal / linear,
            SnrReference::PerFeature => signal / (beta.len() as f64 * linear),
        }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::new(0.0, SnrReference::default())
    }
}

/// `y = Xβ + z` with the rows split contiguously across devices.
#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    pub features: Array2<f64>,
    pub labels: Array1<f64>,
    pub beta_true: Array1<f64>,
    pub noise: Array1<f64>,
    pub noise_spec: NoiseSpec,
    pub datasets: Vec<LocalDataset>,
}

impl SyntheticProblem {
    pub fn total_points(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.beta_true.len()
    }

    /// `‖Xβ‖² / ‖z‖²`; infinite when noiseless.
    pub fn realized_snr(&self) -> f64 {
        let signal = self.features.dot(&self.beta_true);
        signal.dot(&signal) / self.noise.dot(&self.noise)
    }

    /// Gradient of `(1/2)‖Xβ − y‖²`, summed device by device.
    pub fn full_gradient(&self, beta: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut total = Array1::zeros(beta.len());
        for data in &self.datasets {
            total += &least_squares_gradient(data.features.view(), data.labels.view(), beta);
        }
        total
    }
}

/// Draws `X` (row-major), then `β`, then `z`.
pub fn synthesize_problem<R: Rng + ?Sized>(
    n_devices: usize,
    points_per_device: usize,
    d: usize,
    noise_spec: NoiseSpec,
    rng: &mut R,
) -> Result<SyntheticProblem, SimError> {
    if n_devices == 0 || d == 0 {
        return Err(SimError::Config("problem dimensions must be positive".into()));
    }
    let m = n_devices * points_per_device;
    let features = Array2::from_shape_simple_fn((m, d), || rng.sample(StandardNormal));
    let beta_true: Array1<f64> = Array1::from_shape_simple_fn(d, || rng.sample(StandardNormal));
    let variance = noise_spec.noise_variance(beta_true.view());
    let noise = if variance > 0.0 {
        let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| SimError::Config(e.to_string()))?;
        Array1::from_shape_simple_fn(m, || rng.sample(normal))
    } else {
        Array1::zeros(m)
    };
    let labels = features.dot(&beta_true) + &noise;
    let datasets = (0..n_devices)
        .map(|i| {
            let (lo, hi) = (i * points_per_device, (i + 1) * points_per_device);
            LocalDataset::new(
                i,
                features.slice(s![lo..hi, ..]).to_owned(),
                labels.slice(s![lo..hi]).to_owned(),
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(SyntheticProblem {
        features,
        labels,
        beta_true,
        noise,
        noise_spec,
        datasets,
    })
}

/// One device's outcome in one epoch. Devices with no systematic load do
/// not take part and are recorded with zero delay and no transmissions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub device_id: usize,
    pub load: usize,
    pub delay: f64,
    pub transmissions: u32,
    pub returned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    /// Epoch 0 is the state before the first update; for coded runs its
    /// duration is the parity upload.
    pub epoch: usize,
    /// `None` when the server waits for every device.
    pub deadline: Option<f64>,
    pub arrivals: Vec<Arrival>,
    pub epoch_duration: f64,
    pub cumulative_time: f64,
    pub nmse: f64,
    pub returns: usize,
    /// `‖∇ − ∇_full‖ / ‖∇_full‖`, when tracked.
    pub gradient_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub max_epochs: usize,
    pub nmse_target: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Training {
    pub learning_rate: f64,
    pub stop: StopRule,
    pub generator: GeneratorFamily,
    pub track_gradient_error: bool,
}

impl Training {
    pub fn new(learning_rate: f64, max_epochs: usize, nmse_target: Option<f64>) -> Self {
        Self {
            learning_rate,
            stop: StopRule {
                max_epochs,
                nmse_target,
            },
            generator: GeneratorFamily::default(),
            track_gradient_error: false,
        }
    }
}

/// Samples every participating device's delay, in device order.
pub fn sample_arrivals<R: Rng + ?Sized>(
    profiles: &[DeviceProfile],
    loads: &[usize],
    deadline: f64,
    rng: &mut R,
) -> Result<Vec<Arrival>, SimError> {
    profiles
        .iter()
        .zip(loads)
        .map(|(profile, &load)| {
            if load == 0 {
                return Ok(Arrival {
                    device_id: profile.device_id,
                    load,
                    delay: 0.0,
                    transmissions: 0,
                    returned: false,
                });
            }
            let sample = profile.sample_delay(load, rng)?;
            Ok(Arrival {
                device_id: profile.device_id,
                load,
                delay: sample.total,
                transmissions: sample.transmissions(),
                returned: sample.total <= deadline,
            })
        })
        .collect()
}

/// Elapsed time until the returned loads, taken in order of arrival, add
/// up to `points`. Infinite if they never do.
pub fn time_to_receive(arrivals: &[Arrival], points: usize) -> f64 {
    if points == 0 {
        return 0.0;
    }
    let mut order: Vec<&Arrival> = arrivals.iter().filter(|a| a.load > 0).collect();
    order.sort_by(|a, b| a.delay.total_cmp(&b.delay));
    let mut received = 0;
    for a in order {
        received += a.load;
        if received >= points {
            return a.delay;
        }
    }
    f64::INFINITY
}

/// One-off cost of shipping every device's `c x (d+1)` parity shard,
/// uploads running in parallel and inflated by `1/(1 − p)` for
/// retransmissions.
pub fn parity_upload_delay(c: usize, d: usize, profiles: &[DeviceProfile]) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let rows = c as f64 * (d as f64 + 1.0) / d as f64;
    profiles
        .iter()
        .filter(|p| p.local_points > 0)
        .map(|p| rows * p.packet_time / (1.0 - p.erasure_prob))
        .fold(0.0, f64::max)
}

/// Server-side view of an encoded population.
#[derive(Debug, Clone)]
pub struct CodedPopulation {
    pub composite: CompositeParity,
    /// Per device, the rows it processes itself.
    pub systematic: Vec<LocalDataset>,
    pub loads: Vec<usize>,
}

impl CodedPopulation {
    /// All data systematic, no parity.
    pub fn uncoded(problem: &SyntheticProblem) -> Self {
        Self {
            composite: CompositeParity::empty(problem.dim()),
            systematic: problem.datasets.clone(),
            loads: problem.datasets.iter().map(LocalDataset::len).collect(),
        }
    }
}

fn check_plan(problem: &SyntheticProblem, profiles: &[DeviceProfile], plan: &LoadPlan) -> Result<(), SimError> {
    let mismatch = |why: String| Err(SimError::PlanMismatch(why));
    if profiles.len() != problem.datasets.len() {
        return mismatch(format!(
            "{} profiles for {} datasets",
            profiles.len(),
            problem.datasets.len()
        ));
    }
    if plan.per_device_load.len() != profiles.len() {
        return mismatch(format!(
            "{} loads for {} devices",
            plan.per_device_load.len(),
            profiles.len()
        ));
    }
    if plan.total_points != problem.total_points() {
        return mismatch(format!(
            "plan covers {} points, data has {}",
            plan.total_points,
            problem.total_points()
        ));
    }
    for ((profile, data), &load) in profiles.iter().zip(&problem.datasets).zip(&plan.per_device_load) {
        if profile.local_points != data.len() {
            return mismatch(format!(
                "device {} profile has {} points, dataset has {}",
                profile.device_id,
                profile.local_points,
                data.len()
            ));
        }
        if load > data.len() {
            return mismatch(format!(
                "device {} assigned {load} of {} points",
                profile.device_id,
                data.len()
            ));
        }
    }
    if plan.server_parity_count > 0 && !plan.epoch_deadline.is_finite() {
        return mismatch("coded plan without a finite deadline".into());
    }
    Ok(())
}

/// Selects systematic sets, weights and encodes every device, then sums
/// the shards. Devices are processed in order from one stream.
pub fn encode_population<R: Rng + ?Sized>(
    problem: &SyntheticProblem,
    profiles: &[DeviceProfile],
    plan: &LoadPlan,
    family: GeneratorFamily,
    rng: &mut R,
) -> Result<CodedPopulation, SimError> {
    check_plan(problem, profiles, plan)?;
    let c = plan.server_parity_count;
    if c == 0 {
        return Ok(CodedPopulation::uncoded(problem));
    }
    let mut shards = Vec::with_capacity(profiles.len());
    let mut systematic = Vec::with_capacity(profiles.len());
    for ((profile, data), &load) in profiles.iter().zip(&problem.datasets).zip(&plan.per_device_load) {
        let set = select_systematic_set(data.len(), load, rng);
        let rows = LocalDataset::new(
            data.device_id,
            data.features.select(ndarray::Axis(0), &set),
            data.labels.select(ndarray::Axis(0), &set),
        )?;
        if !data.is_empty() {
            let weights = build_weights(profile, load, plan.epoch_deadline, &set)?;
            let (shard, _private) = encode_local(data, weights, set, c, family, rng)?;
            shards.push(shard);
        }
        systematic.push(rows);
    }
    Ok(CodedPopulation {
        composite: accumulate_parity(&shards)?,
        systematic,
        loads: plan.per_device_load.clone(),
    })
}

/// Systematic gradients of the returned devices and the parity gradient.
pub fn epoch_gradients(
    population: &CodedPopulation,
    arrivals: &[Arrival],
    beta: ArrayView1<'_, f64>,
) -> Result<(Vec<PartialGradient>, PartialGradient), SimError> {
    let mut received = Vec::new();
    for (data, arrival) in population.systematic.iter().zip(arrivals) {
        if arrival.returned {
            let all: Vec<usize> = (0..data.len()).collect();
            received.push(systematic_gradient(data, &all, beta)?);
        }
    }
    Ok((received, parity_gradient(&population.composite, beta)))
}

fn run_engine<R: Rng + ?Sized>(
    problem: &SyntheticProblem,
    profiles: &[DeviceProfile],
    population: &CodedPopulation,
    deadline: f64,
    start_time: f64,
    training: &Training,
    rng: &mut R,
) -> Result<Vec<EpochTrace>, SimError> {
    let m = problem.total_points();
    let mut state = ModelState::zeros(problem.dim(), training.learning_rate)?;
    let record_deadline = deadline.is_finite().then_some(deadline);
    let initial = nmse(state.beta.view(), problem.beta_true.view())?;
    let mut traces = vec![EpochTrace {
        epoch: 0,
        deadline: record_deadline,
        arrivals: Vec::new(),
        epoch_duration: start_time,
        cumulative_time: start_time,
        nmse: initial,
        returns: 0,
        gradient_error: None,
    }];
    let reached = |value: f64| training.stop.nmse_target.is_some_and(|t| value <= t);
    if reached(initial) {
        return Ok(traces);
    }
    let mut clock = start_time;
    while state.epoch < training.stop.max_epochs {
        let arrivals = sample_arrivals(profiles, &population.loads, deadline, rng)?;
        let duration = if deadline.is_finite() {
            deadline
        } else {
            arrivals.iter().map(|a| a.delay).fold(0.0, f64::max)
        };
        let (received, parity) = epoch_gradients(population, &arrivals, state.beta.view())?;
        let full = training
            .track_gradient_error
            .then(|| problem.full_gradient(state.beta.view()));
        let gradient = aggregate_and_step(&mut state, &received, &parity, m)?;
        let gradient_error = full.map(|f| {
            let diff = &gradient - &f;
            (diff.dot(&diff) / f.dot(&f)).sqrt()
        });
        let value = nmse(state.beta.view(), problem.beta_true.view())?;
        check_divergence(state.epoch, value)?;
        clock += duration;
        traces.push(EpochTrace {
            epoch: state.epoch,
            deadline: record_deadline,
            returns: received.len(),
            arrivals,
            epoch_duration: duration,
            cumulative_time: clock,
            nmse: value,
            gradient_error,
        });
        if reached(value) {
            break;
        }
    }
    Ok(traces)
}

/// Every device processes all its data; each epoch waits for the slowest.
pub fn run_uncoded<R: Rng + ?Sized>(
    problem: &SyntheticProblem,
    profiles: &[DeviceProfile],
    training: &Training,
    delay_rng: &mut R,
) -> Result<Vec<EpochTrace>, SimError> {
    let plan = LoadPlan::uncoded(profiles);
    check_plan(problem, profiles, &plan)?;
    let population = CodedPopulation::uncoded(problem);
    run_engine(problem, profiles, &population, f64::INFINITY, 0.0, training, delay_rng)
}

/// Encodes with `encoding_rng`, charges the parity upload, then runs
/// epochs of exactly `t*`. The server's parity gradient enters every
/// epoch; the plan sized it to meet the deadline.
pub fn run_coded<R: Rng + ?Sized, S: Rng + ?Sized>(
    problem: &SyntheticProblem,
    profiles: &[DeviceProfile],
    plan: &LoadPlan,
    training: &Training,
    delay_rng: &mut R,
    encoding_rng: &mut S,
) -> Result<Vec<EpochTrace>, SimError> {
    let population = encode_population(problem, profiles, plan, training.generator, encoding_rng)?;
    let start = parity_upload_delay(plan.server_parity_count, problem.dim(), profiles);
    run_engine(
        problem,
        profiles,
        &population,
        plan.epoch_deadline,
        start,
        training,
        delay_rng,
    )
}

/// Index of the first trace at or below `target`.
pub fn first_epoch_reaching(traces: &[EpochTrace], target: f64) -> Option<usize> {
    traces.iter().position(|t| t.nmse <= target)
}

/// Bits moved up to and including the first epoch that reaches the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommunicationTally {
    pub parity_bits: f64,
    pub exchange_bits: f64,
    pub epochs: usize,
}

impl CommunicationTally {
    pub fn total(&self) -> f64 {
        self.parity_bits + self.exchange_bits
    }
}

/// Parity shards at `c(d+1)` values per device with data, inflated by
/// `1/(1 − p)`, plus every model download and gradient upload attempt.
pub fn communication_bits(
    traces: &[EpochTrace],
    profiles: &[DeviceProfile],
    config: &HeterogeneityConfig,
    parity_rows: usize,
    target: f64,
) -> Option<CommunicationTally> {
    let last = first_epoch_reaching(traces, target)?;
    let value_bits = (1.0 + config.header_overhead) * f64::from(config.bits_per_value);
    let shard_values = parity_rows as f64 * (config.model_dim as f64 + 1.0);
    let parity_bits = profiles
        .iter()
        .filter(|p| p.local_points > 0)
        .map(|p| shard_values * value_bits / (1.0 - p.erasure_prob))
        .sum();
    let transmissions: u64 = traces[..=last]
        .iter()
        .flat_map(|t| &t.arrivals)
        .map(|a| u64::from(a.transmissions))
        .sum();
    Some(CommunicationTally {
        parity_bits,
        exchange_bits: transmissions as f64 * config.packet_bits(),
        epochs: last,
    })
}

/// Coded over uncoded bits to reach `target`; `None` if either run fell
/// short.
pub fn communication_load(
    plan: &LoadPlan,
    profiles: &[DeviceProfile],
    config: &HeterogeneityConfig,
    coded: &[EpochTrace],
    uncoded: &[EpochTrace],
    target: f64,
) -> Option<f64> {
    let coded = communication_bits(coded, profiles, config, plan.server_parity_count, target)?;
    let uncoded = communication_bits(uncoded, profiles, config, 0, target)?;
    Some(coded.total() / uncoded.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::plan_with_fixed_delta;

    fn small_config() -> HeterogeneityConfig {
        HeterogeneityConfig {
            n_devices: 6,
            model_dim: 20,
            points_per_device: 40,
            ..HeterogeneityConfig::paper()
        }
    }

    fn small_problem(config: &HeterogeneityConfig, seed: u64) -> SyntheticProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synthesize_problem(
            config.n_devices,
            config.points_per_device,
            config.model_dim,
            NoiseSpec::new(20.0, SnrReference::PerSample),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn homogeneous_population_is_identical() {
        let config = HeterogeneityConfig::paper().with_heterogeneity(0.0, 0.0);
        let (profiles, _) = build_profiles(&config).unwrap();
        assert_eq!(profiles.len(), 24);
        for p in &profiles {
            assert_eq!(p.compute_per_point, profiles[0].compute_per_point);
            assert_eq!(p.packet_time, profiles[0].packet_time);
        }
    }

    #[test]
    fn fastest_device_constants() {
        let (profiles, server) = build_profiles(&HeterogeneityConfig::paper()).unwrap();
        let a_min = profiles
            .iter()
            .map(|p| p.compute_per_point)
            .fold(f64::INFINITY, f64::min);
        let tau_min = profiles.iter().map(|p| p.packet_time).fold(f64::INFINITY, f64::min);
        assert!((a_min - 500.0 / 1_536_000.0).abs() < 1e-15);
        assert!((a_min - 3.255e-4).abs() < 1e-7);
        assert!((tau_min - 1.1 * 32.0 * 500.0 / 216_000.0).abs() < 1e-15);
        assert!((tau_min - 0.0815).abs() < 1e-4);
        for p in &profiles {
            assert_eq!(p.memory_access_rate, 2.0 / p.compute_per_point);
            assert_eq!(p.erasure_prob, 0.1);
        }
        assert!((server.compute_per_point - a_min / 10.0).abs() < 1e-18);
        assert_eq!(server.packet_time, 0.0);
        assert_eq!(server.erasure_prob, 0.0);
        assert_eq!(server.local_points, 7200);
    }

    #[test]
    fn ranks_form_a_permutation() {
        let config = HeterogeneityConfig::paper();
        let (profiles, _) = build_profiles(&config).unwrap();
        let mut ranks: Vec<i32> = profiles
            .iter()
            .map(|p| {
                let mac = 500.0 / p.compute_per_point;
                ((mac / config.base_mac_rate).ln() / (0.8f64).ln()).round() as i32
            })
            .collect();
        ranks.sort_unstable();
        assert_eq!(ranks, (0..24).collect::<Vec<_>>());
        let other = build_profiles(&HeterogeneityConfig {
            assignment_seed: 1,
            ..config
        })
        .unwrap()
        .0;
        assert_ne!(profiles, other);
    }

    #[test]
    fn invalid_config_rejected() {
        let config = HeterogeneityConfig::paper().with_heterogeneity(1.0, 0.0);
        assert!(matches!(build_profiles(&config), Err(SimError::Config(_))));
    }

    #[test]
    fn synthetic_labels_and_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean = synthesize_problem(2, 10, 4, NoiseSpec::noiseless(), &mut rng).unwrap();
        assert!(clean.noise.iter().all(|&v| v == 0.0));
        assert_eq!(clean.labels, clean.features.dot(&clean.beta_true));
        assert_eq!(clean.datasets[1].features.row(0), clean.features.row(10));

        let noisy = synthesize_problem(10, 100, 100, NoiseSpec::new(0.0, SnrReference::PerSample), &mut rng).unwrap();
        assert_eq!(noisy.labels, noisy.features.dot(&noisy.beta_true) + &noisy.noise);
        let snr = noisy.realized_snr();
        assert!((0.9..=1.1).contains(&snr), "realized SNR {snr}");

        let per_feature = synthesize_problem(10, 100, 100, NoiseSpec::default(), &mut rng).unwrap();
        let var = per_feature.noise.dot(&per_feature.noise) / 1000.0;
        let expected = per_feature.beta_true.dot(&per_feature.beta_true) / 100.0;
        assert!((var / expected - 1.0).abs() < 0.1);
    }

    #[test]
    fn single_lossless_device_epochs() {
        let config = HeterogeneityConfig {
            n_devices: 1,
            erasure_prob: 0.0,
            ..small_config()
        };
        let (profiles, _) = build_profiles(&config).unwrap();
        let problem = small_problem(&config, 4);
        let training = Training::new(0.1, 30, None);
        let traces = run_uncoded(&problem, &profiles, &training, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let p = &profiles[0];
        let floor = 40.0 * p.compute_per_point + 2.0 * p.packet_time;
        assert_eq!(traces.len(), 31);
        for t in &traces[1..] {
            assert_eq!(t.arrivals[0].transmissions, 2);
            assert_eq!(t.epoch_duration, t.arrivals[0].delay);
            assert!(t.epoch_duration >= floor);
        }
    }

    #[test]
    fn near_deterministic_delays_are_nearly_constant() {
        let profiles: Vec<_> = (0..8)
            .map(|i| DeviceProfile::client(i, 1e-3, 1e9, 0.05, 0.0, 40).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let loads = vec![40; 8];
        let durations: Vec<f64> = (0..500)
            .map(|_| {
                sample_arrivals(&profiles, &loads, f64::INFINITY, &mut rng)
                    .unwrap()
                    .iter()
                    .map(|a| a.delay)
                    .fold(0.0, f64::max)
            })
            .collect();
        let mean = durations.iter().sum::<f64>() / 500.0;
        let sd = (durations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 499.0).sqrt();
        assert!(sd / mean < 0.1);
    }

    #[test]
    fn zero_parity_plan_matches_uncoded_run() {
        let config = small_config();
        let (profiles, server) = build_profiles(&config).unwrap();
        let problem = small_problem(&config, 7);
        let plan = plan_with_fixed_delta(&profiles, &server, 0.0, 1.0).unwrap();
        let training = Training::new(0.5, 40, None);
        let uncoded = run_uncoded(&problem, &profiles, &training, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let coded = run_coded(
            &problem,
            &profiles,
            &plan,
            &training,
            &mut ChaCha8Rng::seed_from_u64(8),
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        assert_eq!(uncoded, coded);
    }

    #[test]
    fn coded_epochs_last_the_deadline() {
        let config = small_config();
        let (profiles, server) = build_profiles(&config).unwrap();
        let problem = small_problem(&config, 9);
        let plan = plan_with_fixed_delta(&profiles, &server, 0.2, 1.0).unwrap();
        let training = Training::new(0.5, 50, None);
        let traces = run_coded(
            &problem,
            &profiles,
            &plan,
            &training,
            &mut ChaCha8Rng::seed_from_u64(10),
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        let upload = parity_upload_delay(plan.server_parity_count, 20, &profiles);
        assert!(upload > 0.0);
        assert_eq!(traces[0].cumulative_time, upload);
        for pair in traces.windows(2) {
            assert_eq!(pair[1].epoch_duration, plan.epoch_deadline);
            assert!(pair[1].cumulative_time >= pair[0].cumulative_time);
        }
        for t in &traces[1..] {
            for a in &t.arrivals {
                assert_eq!(a.returned, a.load > 0 && a.delay <= plan.epoch_deadline);
            }
            assert_eq!(t.returns, t.arrivals.iter().filter(|a| a.returned).count());
        }
        assert!(traces.last().unwrap().nmse < traces[0].nmse);
    }

    #[test]
    fn runs_are_reproducible() {
        let config = small_config();
        let (profiles, server) = build_profiles(&config).unwrap();
        let plan = plan_with_fixed_delta(&profiles, &server, 0.1, 1.0).unwrap();
        let training = Training::new(0.5, 20, None);
        let run = || {
            let problem = small_problem(&config, 12);
            run_coded(
                &problem,
                &profiles,
                &plan,
                &training,
                &mut ChaCha8Rng::seed_from_u64(13),
                &mut ChaCha8Rng::seed_from_u64(14),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stops_at_target_and_detects_divergence() {
        let config = small_config();
        let (profiles, _) = build_profiles(&config).unwrap();
        let problem = small_problem(&config, 15);
        let traces = run_uncoded(
            &problem,
            &profiles,
            &Training::new(0.5, 10_000, Some(0.05)),
            &mut ChaCha8Rng::seed_from_u64(16),
        )
        .unwrap();
        let last = traces.last().unwrap();
        assert!(last.nmse <= 0.05);
        assert!(traces[traces.len() - 2].nmse > 0.05);

        let err = run_uncoded(
            &problem,
            &profiles,
            &Training::new(50.0, 1000, None),
            &mut ChaCha8Rng::seed_from_u64(16),
        )
        .unwrap_err();
        assert!(err.is_divergence(), "{err}");
    }

    #[test]
    fn plan_mismatch_is_fatal() {
        let config = small_config();
        let (profiles, server) = build_profiles(&config).unwrap();
        let problem = small_problem(&config, 17);
        let mut plan = plan_with_fixed_delta(&profiles, &server, 0.1, 1.0).unwrap();
        plan.per_device_load.pop();
        let err = run_coded(
            &problem,
            &profiles,
            &plan,
            &Training::new(0.5, 5, None),
            &mut ChaCha8Rng::seed_from_u64(1),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap_err();
        assert!(matches!(err, SimError::PlanMismatch(_)));
    }

    #[test]
    fn receive_time_is_an_order_statistic() {
        let arrival = |id, load, delay| Arrival {
            device_id: id,
            load,
            delay,
            transmissions: 2,
            returned: true,
        };
        let arrivals = [
            arrival(0, 10, 3.0),
            arrival(1, 5, 1.0),
            arrival(2, 0, 0.0),
            arrival(3, 10, 2.0),
        ];
        assert_eq!(time_to_receive(&arrivals, 0), 0.0);
        assert_eq!(time_to_receive(&arrivals, 5), 1.0);
        assert_eq!(time_to_receive(&arrivals, 15), 2.0);
        assert_eq!(time_to_receive(&arrivals, 25), 3.0);
        assert_eq!(time_to_receive(&arrivals, 26), f64::INFINITY);
    }

    #[test]
    fn upload_delay_formula() {
        let (profiles, _) = build_profiles(&HeterogeneityConfig::paper()).unwrap();
        let c = 936;
        let expected = profiles
            .iter()
            .map(|p| {
                let link = 1.1 * 32.0 * 500.0 / p.packet_time;
                c as f64 * 501.0 * 32.0 * 1.1 / link / 0.9
            })
            .fold(0.0, f64::max);
        assert!((parity_upload_delay(c, 500, &profiles) / expected - 1.0).abs() < 1e-12);
        assert_eq!(parity_upload_delay(0, 500, &profiles), 0.0);
    }

    #[test]
    fn communication_ratio_is_one_without_parity() {
        let config = small_config();
        let (profiles, server) = build_profiles(&config).unwrap();
        let problem = small_problem(&config, 18);
        let plan = plan_with_fixed_delta(&profiles, &server, 0.0, 1.0).unwrap();
        let training = Training::new(0.5, 500, Some(0.05));
        let a = run_uncoded(&problem, &profiles, &training, &mut ChaCha8Rng::seed_from_u64(19)).unwrap();
        let ratio = communication_load(&plan, &profiles, &config, &a, &a, 0.05).unwrap();
        assert_eq!(ratio, 1.0);
        let tally = communication_bits(&a, &profiles, &config, 0, 0.05).unwrap();
        let sends: u32 = a.iter().flat_map(|t| &t.arrivals).map(|x| x.transmissions).sum();
        assert_eq!(tally.exchange_bits, f64::from(sends) * 1.1 * 32.0 * 20.0);
        assert!(communication_load(&plan, &profiles, &config, &a, &a, 1e-30).is_none());
    }

    #[test]
    fn gradient_error_is_tracked_on_request() {
        let config = small_config();
        let (profiles, _) = build_profiles(&config).unwrap();
        let problem = small_problem(&config, 20);
        let mut training = Training::new(0.5, 3, None);
        training.track_gradient_error = true;
        let traces = run_uncoded(&problem, &profiles, &training, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        for t in &traces[1..] {
            assert_eq!(t.gradient_error, Some(0.0));
        }
    }
}
