//! Differential privacy: per-client clipping, the Gaussian mechanism on the
//! aggregate, and a Rényi-DP accountant for the Poisson-subsampled Gaussian.

mod mechanism;
mod rdp;

pub use mechanism::{clip_factor, clip_l2, gaussian_noise_sum};
pub use rdp::{
    calibrate_sigma, default_orders, epsilon_for, rdp_subsampled_gaussian, rdp_to_dp, Calibration,
    RdpAccountant,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    /// Per-client inclusion probability of Poisson cohort sampling.
    pub sampling_rate: f64,
    pub rounds: usize,
    /// L2 radius each client's wire payload is clipped to.
    pub clip_radius: f64,
    /// Noise multiplier: per-coordinate noise std on the sum is
    /// `noise_sigma * clip_radius`. Zero disables privacy.
    pub noise_sigma: f64,
    pub rdp_orders: Vec<f64>,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::config("sampling_rate", "must lie in (0, 1]"));
        }
        if !(self.clip_radius > 0.0 && self.clip_radius.is_finite()) {
            return Err(Error::config("clip_radius", "must be positive and finite"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        if self.rdp_orders.is_empty() || self.rdp_orders.iter().any(|&a| !(a > 1.0)) {
            return Err(Error::config("rdp_orders", "orders must all be greater than 1"));
        }
        Ok(())
    }

    pub fn privacy_off(&self) -> bool {
        self.noise_sigma == 0.0
    }

    /// Advisory messages that do not prevent a run.
    pub fn warnings(&self, population: usize) -> Vec<String> {
        let mut out = Vec::new();
        if population > 0 && self.delta >= 1.0 / population as f64 {
            out.push(format!(
                "delta {} is not below 1/population = {}",
                self.delta,
                1.0 / population as f64
            ));
        }
        if self.privacy_off() {
            out.push("noise_sigma is 0: privacy is off".into());
        }
        out
    }
}
