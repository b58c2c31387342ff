//! Round-trip delay of one device in one epoch.
//!
//! A device that processes `load` points needs
//!
//! ```text
//! T = load·a + Exp(rate = mu / load) + (N_down + N_up)·tau
//! ```
//!
//! where `N_down` and `N_up` are independent retransmission counts, each
//! geometric on {1, 2, ...} with success probability `1 - p`. Downlink and
//! uplink share `tau` and `p`.
//!
//! The analytic CDF conditions on `K = N_down + N_up`, which is negative
//! binomial: `Pr{K = k} = (k - 1)·p^(k-2)·(1 - p)^2` for `k >= 2`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Negative-binomial terms below this mass (past the mode) end the CDF sum.
const NEGLIGIBLE_MASS: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DelayError {
    #[error("invalid profile for device {device_id}: {reason}")]
    InvalidProfile { device_id: usize, reason: String },
    #[error("device {device_id} was assigned {load} points but holds only {available}")]
    LoadExceedsData {
        device_id: usize,
        load: usize,
        available: usize,
    },
}

/// Whether a profile describes an edge client or the server's own
/// parity computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceRole {
    #[default]
    Client,
    Server,
}

/// Compute and link parameters of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: usize,
    pub role: DeviceRole,
    /// Deterministic compute time per data point, in seconds.
    pub compute_per_point: f64,
    /// Memory access rate in 1/s. The stochastic compute term for `load`
    /// points is exponential with rate `memory_access_rate / load`.
    pub memory_access_rate: f64,
    /// Time to move one model or gradient packet across the link, in seconds.
    pub packet_time: f64,
    /// Per-transmission erasure probability of the link.
    pub erasure_prob: f64,
    /// Raw points held locally. For the server this is the parity capacity.
    pub local_points: usize,
}

/// One draw of a device's round-trip delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaySample {
    pub compute_fixed: f64,
    pub compute_stochastic: f64,
    pub n_down: u32,
    pub n_up: u32,
    pub total: f64,
}

impl DelaySample {
    pub fn transmissions(&self) -> u32 {
        self.n_down + self.n_up
    }
}

impl DeviceProfile {
    pub fn client(
        device_id: usize,
        compute_per_point: f64,
        memory_access_rate: f64,
        packet_time: f64,
        erasure_prob: f64,
        local_points: usize,
    ) -> Result<Self, DelayError> {
        let profile = Self {
            device_id,
            role: DeviceRole::Client,
            compute_per_point,
            memory_access_rate,
            packet_time,
            erasure_prob,
            local_points,
        };
        profile.validate()?;
        Ok(profile)
    }

    /// The server pseudo-device: its parity gradients never cross a
    /// wireless link, so `tau = 0` and `p = 0`.
    pub fn server(
        device_id: usize,
        compute_per_point: f64,
        memory_access_rate: f64,
        parity_capacity: usize,
    ) -> Result<Self, DelayError> {
        let profile = Self {
            device_id,
            role: DeviceRole::Server,
            compute_per_point,
            memory_access_rate,
            packet_time: 0.0,
            erasure_prob: 0.0,
            local_points: parity_capacity,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), DelayError> {
        let fail = |reason: &str| {
            Err(DelayError::InvalidProfile {
                device_id: self.device_id,
                reason: reason.to_string(),
            })
        };
        if !(self.compute_per_point > 0.0 && self.compute_per_point.is_finite()) {
            return fail("per-point compute time must be positive and finite");
        }
        if !(self.memory_access_rate > 0.0 && self.memory_access_rate.is_finite()) {
            return fail("memory access rate must be positive and finite");
        }
        if !(self.packet_time >= 0.0 && self.packet_time.is_finite()) {
            return fail("packet time must be nonnegative and finite");
        }
        if !(0.0..1.0).contains(&self.erasure_prob) {
            return fail("erasure probability must lie in [0, 1)");
        }
        Ok(())
    }

    /// Rate of the exponential compute term, `None` for an empty load.
    pub fn compute_rate(&self, load: usize) -> Option<f64> {
        (load > 0).then(|| self.memory_access_rate / load as f64)
    }

    /// Draws one round-trip delay. With `load = 0` only the communication
    /// part is sampled.
    pub fn sample_delay<R: Rng + ?Sized>(&self, load: usize, rng: &mut R) -> Result<DelaySample, DelayError> {
        if self.role == DeviceRole::Client && load > self.local_points {
            return Err(DelayError::LoadExceedsData {
                device_id: self.device_id,
                load,
                available: self.local_points,
            });
        }
        let compute_fixed = load as f64 * self.compute_per_point;
        let compute_stochastic = match self.compute_rate(load) {
            Some(rate) => Exp::new(rate)
                .expect("validated profile has a positive rate")
                .sample(rng),
            None => 0.0,
        };
        let attempts = Geometric::new(1.0 - self.erasure_prob).expect("validated erasure probability");
        let n_down = 1 + attempts.sample(rng) as u32;
        let n_up = 1 + attempts.sample(rng) as u32;
        let total = compute_fixed + compute_stochastic + f64::from(n_down + n_up) * self.packet_time;
        Ok(DelaySample {
            compute_fixed,
            compute_stochastic,
            n_down,
            n_up,
            total,
        })
    }

    /// Mean round-trip delay, `load·(a + 1/mu) + 2·tau/(1 - p)`.
    pub fn expected_delay(&self, load: usize) -> f64 {
        load as f64 * (self.compute_per_point + 1.0 / self.memory_access_rate)
            + 2.0 * self.packet_time / (1.0 - self.erasure_prob)
    }

    /// `Pr{T <= deadline}` for the given load, from the negative-binomial
    /// convolution of the shifted-exponential compute time.
    pub fn return_probability(&self, load: usize, deadline: f64) -> f64 {
        if deadline == f64::INFINITY {
            return 1.0;
        }
        let slack = deadline - load as f64 * self.compute_per_point;
        if slack.is_nan() || slack < 0.0 {
            return 0.0;
        }
        let rate = self.compute_rate(load);
        let compute_cdf = |x: f64| match rate {
            Some(rate) => -(-rate * x).exp_m1(),
            None => 1.0,
        };
        let tau = self.packet_time;
        if tau == 0.0 {
            return compute_cdf(slack);
        }
        if slack < 2.0 * tau {
            return 0.0;
        }

        let p = self.erasure_prob;
        let success_sq = (1.0 - p) * (1.0 - p);
        let mut total = 0.0;
        let mut p_pow = 1.0;
        let mut k = 2u64;
        loop {
            let residual = slack - k as f64 * tau;
            if residual < 0.0 {
                break;
            }
            let mass = (k - 1) as f64 * p_pow * success_sq;
            total += mass * compute_cdf(residual);
            let past_mode = (k as f64) * (1.0 - p) > 1.0;
            if p == 0.0 || (past_mode && mass < NEGLIGIBLE_MASS) {
                break;
            }
            p_pow *= p;
            k += 1;
        }
        total.min(1.0)
    }
}
