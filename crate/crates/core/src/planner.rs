//! Load and redundancy planning.
//!
//! Each device `i` that processes `l` points returns `l` points by time `t`
//! with probability `Pr{T_i <= t}`. For a candidate epoch deadline `t`
//! every device (and the server, on parity rows) picks the load that
//! maximizes its expected return. The plan's deadline is the smallest `t`
//! at which the summed expected return covers all `m` raw points.
//!
//! The search brackets `t` by doubling and then bisects; the aggregate
//! expected return is continuous and nondecreasing in `t`, which the
//! search checks at every probe.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::delay_model::DeviceProfile;

/// Default tolerance on the aggregate return, in data points.
pub const DEFAULT_TOLERANCE: f64 = 1.0;
/// Default bisection resolution on the deadline, in seconds.
pub const DEFAULT_DEADLINE_RESOLUTION: f64 = 1e-3;
/// Relative shortfall below `m` still accepted as reaching `m`. Without a
/// server the aggregate only approaches `m` as `t` grows.
const ASYMPTOTIC_SLACK: f64 = 1e-9;
const MAX_DEADLINE: f64 = 1e15;
const MAX_REFINEMENTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("no device holds any data")]
    NoData,
    #[error("tolerance must be finite and nonnegative, got {0}")]
    InvalidTolerance(f64),
    #[error("redundancy must lie in [0, 1), got {0}")]
    InvalidDelta(f64),
    #[error(
        "expected return never reaches {required} points (best {reachable:.3} at t = {deadline:e} s); \
         binding cap: {capacity} points across devices and server"
    )]
    Infeasible {
        required: f64,
        reachable: f64,
        deadline: f64,
        capacity: usize,
    },
    #[error("aggregate return decreased between t = {lower} s and t = {upper} s")]
    NonMonotone { lower: f64, upper: f64 },
}

/// Output of the planner: systematic loads per device, the number of parity
/// rows processed at the server, and the epoch deadline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPlan {
    pub per_device_load: Vec<usize>,
    pub server_parity_count: usize,
    /// `null` in JSON when the plan waits for every device.
    #[serde(serialize_with = "ser_deadline", deserialize_with = "de_deadline")]
    pub epoch_deadline: f64,
    pub tolerance: f64,
    pub parity_cap: usize,
    pub expected_aggregate_return: f64,
    pub redundancy_delta: f64,
    pub total_points: usize,
}

fn ser_deadline<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    if value.is_finite() {
        serializer.serialize_some(value)
    } else {
        serializer.serialize_none()
    }
}

fn de_deadline<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(deserializer)?.unwrap_or(f64::INFINITY))
}

impl LoadPlan {
    /// Uncoded federated learning: every device processes all its data and
    /// the server waits for all of them.
    pub fn uncoded(profiles: &[DeviceProfile]) -> Self {
        let per_device_load: Vec<usize> = profiles.iter().map(|p| p.local_points).collect();
        let total_points = per_device_load.iter().sum();
        Self {
            per_device_load,
            server_parity_count: 0,
            epoch_deadline: f64::INFINITY,
            tolerance: 0.0,
            parity_cap: 0,
            expected_aggregate_return: total_points as f64,
            redundancy_delta: 0.0,
            total_points,
        }
    }

    pub fn is_uncoded(&self) -> bool {
        self.server_parity_count == 0
    }

    /// Expected return in excess of `m`.
    pub fn overshoot(&self) -> f64 {
        self.expected_aggregate_return - self.total_points as f64
    }
}

/// Expected return of one device over a grid of loads at a fixed deadline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnCurve {
    pub device_id: usize,
    pub deadline: f64,
    pub load_values: Vec<usize>,
    pub expected_returns: Vec<f64>,
}

impl ReturnCurve {
    pub fn new(profile: &DeviceProfile, deadline: f64, loads: impl IntoIterator<Item = usize>) -> Self {
        let load_values: Vec<usize> = loads.into_iter().collect();
        let expected_returns = load_values
            .iter()
            .map(|&load| expected_return(profile, load, deadline))
            .collect();
        Self {
            device_id: profile.device_id,
            deadline,
            load_values,
            expected_returns,
        }
    }

    /// Load with the largest expected return; the first one on ties.
    pub fn peak(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (&load, &value) in self.load_values.iter().zip(&self.expected_returns) {
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((load, value));
            }
        }
        best
    }

    /// True when the curve rises (weakly) to a single maximum and then
    /// falls (weakly), up to `tol`.
    pub fn is_single_peaked(&self, tol: f64) -> bool {
        let values = &self.expected_returns;
        let mut descending = false;
        for pair in values.windows(2) {
            let step = pair[1] - pair[0];
            if step < -tol {
                descending = true;
            } else if step > tol && descending {
                return false;
            }
        }
        true
    }
}

/// `E[R(t; load)] = load · Pr{T <= t}`.
pub fn expected_return(profile: &DeviceProfile, load: usize, deadline: f64) -> f64 {
    if load == 0 {
        return 0.0;
    }
    load as f64 * profile.return_probability(load, deadline)
}

/// Exhaustive scan of `0..=cap`; returns the best load and its expected
/// return. Ties go to the smaller load.
pub fn best_response(profile: &DeviceProfile, deadline: f64, cap: usize) -> (usize, f64) {
    let mut best = (0, 0.0);
    for load in 1..=cap {
        let value = expected_return(profile, load, deadline);
        if value > best.1 {
            best = (load, value);
        }
    }
    best
}

pub fn optimal_device_load(profile: &DeviceProfile, deadline: f64, cap: usize) -> usize {
    best_response(profile, deadline, cap).0
}

/// Planner knobs. `Default` uses a 1-point tolerance and 1 ms resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Planner {
    pub tolerance: f64,
    pub deadline_resolution: f64,
}

impl Default for Planner {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            deadline_resolution: DEFAULT_DEADLINE_RESOLUTION,
        }
    }
}

/// How the server's expected return enters the aggregate.
#[derive(Debug, Clone, Copy)]
enum ServerLoad {
    /// Server picks its best load in `0..=cap`.
    Optimized { cap: usize },
    /// Server always processes exactly this many parity rows.
    Fixed(usize),
}

impl Planner {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }

    /// Jointly picks the deadline, the per-device loads and the number of
    /// parity rows (at most `parity_cap`).
    pub fn plan(
        &self,
        profiles: &[DeviceProfile],
        server: &DeviceProfile,
        parity_cap: usize,
    ) -> Result<LoadPlan, PlanError> {
        self.solve(profiles, server, ServerLoad::Optimized { cap: parity_cap })
    }

    /// As [`Planner::plan`] but with `c = round(delta · m)` parity rows.
    /// `delta = 0` gives the uncoded plan.
    pub fn plan_with_fixed_delta(
        &self,
        profiles: &[DeviceProfile],
        server: &DeviceProfile,
        delta: f64,
    ) -> Result<LoadPlan, PlanError> {
        if !(0.0..1.0).contains(&delta) {
            return Err(PlanError::InvalidDelta(delta));
        }
        let m = total_points(profiles)?;
        let parity = (delta * m as f64).round() as usize;
        if parity == 0 {
            self.check_tolerance()?;
            return Ok(LoadPlan::uncoded(profiles));
        }
        self.solve(profiles, server, ServerLoad::Fixed(parity))
    }

    fn check_tolerance(&self) -> Result<(), PlanError> {
        if self.tolerance >= 0.0 && self.tolerance.is_finite() {
            Ok(())
        } else {
            Err(PlanError::InvalidTolerance(self.tolerance))
        }
    }

    fn solve(
        &self,
        profiles: &[DeviceProfile],
        server: &DeviceProfile,
        server_load: ServerLoad,
    ) -> Result<LoadPlan, PlanError> {
        self.check_tolerance()?;
        let m = total_points(profiles)?;
        let required = m as f64;
        let target = required * (1.0 - ASYMPTOTIC_SLACK);

        let server_response = |t: f64| match server_load {
            ServerLoad::Optimized { cap } => best_response(server, t, cap),
            ServerLoad::Fixed(c) => (c, expected_return(server, c, t)),
        };
        let aggregate = |t: f64| {
            server_response(t).1
                + profiles
                    .iter()
                    .map(|p| best_response(p, t, p.local_points).1)
                    .sum::<f64>()
        };

        let mut lo = 0.0;
        let mut f_lo = aggregate(lo);
        let mut hi = 1.0;
        let mut f_hi = aggregate(hi);
        while f_hi < target {
            if f_hi + ASYMPTOTIC_SLACK * required < f_lo {
                return Err(PlanError::NonMonotone { lower: lo, upper: hi });
            }
            if hi >= MAX_DEADLINE {
                let parity_cap = match server_load {
                    ServerLoad::Optimized { cap } => cap,
                    ServerLoad::Fixed(c) => c,
                };
                return Err(PlanError::Infeasible {
                    required,
                    reachable: f_hi,
                    deadline: hi,
                    capacity: m + parity_cap,
                });
            }
            lo = hi;
            f_lo = f_hi;
            hi *= 2.0;
            f_hi = aggregate(hi);
        }

        let mut refinements = 0;
        loop {
            // Adjacent floats near very large deadlines can be further apart
            // than the resolution.
            let splittable = hi - lo > 4.0 * f64::EPSILON * hi;
            let wide = hi - lo > self.deadline_resolution && splittable;
            let overshooting = f_hi > required + self.tolerance && refinements < MAX_REFINEMENTS && splittable;
            if !wide && !overshooting {
                break;
            }
            refinements += usize::from(!wide);
            let mid = 0.5 * (lo + hi);
            let f_mid = aggregate(mid);
            let slack = ASYMPTOTIC_SLACK * required;
            if f_mid + slack < f_lo || f_mid > f_hi + slack {
                return Err(PlanError::NonMonotone { lower: lo, upper: hi });
            }
            if f_mid >= target {
                hi = mid;
                f_hi = f_mid;
            } else {
                lo = mid;
                f_lo = f_mid;
            }
        }

        let deadline = hi;
        let per_device_load = profiles
            .iter()
            .map(|p| optimal_device_load(p, deadline, p.local_points))
            .collect();
        let (parity, _) = server_response(deadline);
        let parity_cap = match server_load {
            ServerLoad::Optimized { cap } => cap,
            ServerLoad::Fixed(c) => c,
        };
        Ok(LoadPlan {
            per_device_load,
            server_parity_count: parity,
            epoch_deadline: deadline,
            tolerance: self.tolerance,
            parity_cap,
            expected_aggregate_return: f_hi,
            redundancy_delta: parity as f64 / required,
            total_points: m,
        })
    }
}

fn total_points(profiles: &[DeviceProfile]) -> Result<usize, PlanError> {
    let m: usize = profiles.iter().map(|p| p.local_points).sum();
    if m == 0 {
        Err(PlanError::NoData)
    } else {
        Ok(m)
    }
}

/// Plans with the default planner and the given tolerance.
pub fn plan(
    profiles: &[DeviceProfile],
    server: &DeviceProfile,
    parity_cap: usize,
    tolerance: f64,
) -> Result<LoadPlan, PlanError> {
    Planner::with_tolerance(tolerance).plan(profiles, server, parity_cap)
}

pub fn plan_with_fixed_delta(
    profiles: &[DeviceProfile],
    server: &DeviceProfile,
    delta: f64,
    tolerance: f64,
) -> Result<LoadPlan, PlanError> {
    Planner::with_tolerance(tolerance).plan_with_fixed_delta(profiles, server, delta)
}

/// Sum over devices and server of the best expected return at `deadline`.
pub fn aggregate_expected_return(
    profiles: &[DeviceProfile],
    server: &DeviceProfile,
    parity_cap: usize,
    deadline: f64,
) -> f64 {
    best_response(server, deadline, parity_cap).1
        + profiles
            .iter()
            .map(|p| best_response(p, deadline, p.local_points).1)
            .sum::<f64>()
}
