//! EWMA and one-sided CUSUM monitors for sudden drops in ratings.
//! Alarms are advisory; nothing here rolls anything back.

use serde::{Deserialize, Serialize};

use super::{mean, variance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    pub lambda: f64,
    /// EWMA control-limit width in standard deviations.
    pub l: f64,
    /// CUSUM allowance.
    pub k: f64,
    /// CUSUM decision interval.
    pub h: f64,
}

/// Monitor settings expressed relative to the calibrated σ₀.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub lambda: f64,
    pub l: f64,
    pub k_sigma: f64,
    pub h_sigma: f64,
    /// Lower bound on σ₀ so a near-constant calibration window does not
    /// make every later rating an alarm.
    pub sigma_floor: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            lambda: 0.2,
            l: 3.0,
            k_sigma: 0.5,
            h_sigma: 4.0,
            sigma_floor: 0.5,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(format!("drift lambda {} outside (0, 1]", self.lambda));
        }
        if self.l <= 0.0 || self.k_sigma < 0.0 || self.h_sigma <= 0.0 || self.sigma_floor <= 0.0 {
            return Err("drift L, h and sigma floor must be positive, k non-negative".into());
        }
        Ok(())
    }

    /// Calibrates `(μ₀, σ₀)` from a full rating window.
    pub fn calibrate(&self, window: &[u8]) -> DriftMonitorState {
        let xs: Vec<f64> = window.iter().map(|&r| f64::from(r)).collect();
        let mu0 = mean(&xs);
        let sd = if xs.len() > 1 { variance(&xs).sqrt() } else { 0.0 };
        let sigma0 = sd.max(self.sigma_floor);
        DriftMonitorState::new(
            DriftParams {
                lambda: self.lambda,
                l: self.l,
                k: self.k_sigma * sigma0,
                h: self.h_sigma * sigma0,
            },
            mu0,
            sigma0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftMonitorState {
    pub ewma_value: f64,
    pub cusum_pos: f64,
    pub cusum_neg: f64,
    pub params: DriftParams,
    pub mu0: f64,
    pub sigma0: f64,
    pub ewma_alarm: bool,
    pub cusum_alarm: bool,
}

impl DriftMonitorState {
    pub fn new(params: DriftParams, mu0: f64, sigma0: f64) -> Self {
        DriftMonitorState {
            ewma_value: mu0,
            cusum_pos: 0.0,
            cusum_neg: 0.0,
            params,
            mu0,
            sigma0,
            ewma_alarm: false,
            cusum_alarm: false,
        }
    }

    pub fn alarm(&self) -> bool {
        self.ewma_alarm || self.cusum_alarm
    }

    pub fn ewma_limit(&self) -> f64 {
        let lambda = self.params.lambda;
        self.mu0 - self.params.l * self.sigma0 * (lambda / (2.0 - lambda)).sqrt()
    }

    pub fn ewma_update(mut self, r: u8) -> Self {
        let lambda = self.params.lambda;
        self.ewma_value = lambda * f64::from(r) + (1.0 - lambda) * self.ewma_value;
        self.ewma_alarm = self.ewma_value < self.ewma_limit();
        self
    }

    pub fn cusum_update(mut self, r: u8) -> Self {
        let r = f64::from(r);
        let k = self.params.k;
        self.cusum_neg = (self.cusum_neg + (self.mu0 - k) - r).max(0.0);
        self.cusum_pos = (self.cusum_pos + r - (self.mu0 + k)).max(0.0);
        self.cusum_alarm = self.cusum_neg > self.params.h;
        self
    }

    pub fn update(self, r: u8) -> Self {
        self.ewma_update(r).cusum_update(r)
    }
}
