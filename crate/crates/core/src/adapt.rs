//! Feedback policy: turns per-class scores into class sampling
//! probabilities and broadcasts them to producers.
//!
//! `p_c = floor + (1 - K*floor) * softmax_c(tau * (1 - score_c))`, where the
//! scores are exponentially smoothed across steps.

use thiserror::Error;

use crate::channel::{ChannelError, ControlMsg, ControlServer};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeedback {
    /// One score in [0, 1] per class, e.g. per-class AP.
    pub scores: Vec<f64>,
    pub step: u64,
}

impl ClassFeedback {
    pub fn new(scores: Vec<f64>, step: u64) -> Self {
        ClassFeedback { scores, step }
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.scores.is_empty() {
            return Err(AdaptError::InvalidFeedback("no classes".into()));
        }
        if let Some(s) = self.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(AdaptError::InvalidFeedback(format!("score {s} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptPolicy {
    pub temperature: f64,
    pub floor: f64,
    /// Weight of the previous smoothed score.
    pub smoothing: f64,
}

impl Default for AdaptPolicy {
    fn default() -> Self {
        AdaptPolicy {
            temperature: 1.0,
            floor: 0.05,
            smoothing: 0.5,
        }
    }
}

impl AdaptPolicy {
    pub fn validate(&self, k: usize) -> Result<(), AdaptError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(AdaptError::InvalidPolicy("temperature must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err(AdaptError::InvalidPolicy("smoothing must be in [0, 1]".into()));
        }
        if !(self.floor >= 0.0 && self.floor * k as f64 <= 1.0 - 1e-12) {
            return Err(AdaptError::InvalidPolicy(format!(
                "floor {} must satisfy floor * {k} < 1",
                self.floor
            )));
        }
        Ok(())
    }
}

/// Maps scores to class probabilities. Low scores get more mass.
pub fn update_class_probs(fb: &ClassFeedback, pol: &AdaptPolicy) -> Result<Vec<f64>, AdaptError> {
    fb.validate()?;
    let k = fb.scores.len();
    pol.validate(k)?;
    let logits: Vec<f64> = fb.scores.iter().map(|s| pol.temperature * (1.0 - s)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mass = 1.0 - k as f64 * pol.floor;
    let mut p: Vec<f64> = exps.iter().map(|e| pol.floor + mass * e / z).collect();
    // Remove rounding drift so the vector sums to 1 as closely as f64 allows.
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    Ok(p)
}

/// Consumer-side feedback state.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub policy: AdaptPolicy,
    smoothed: Option<Vec<f64>>,
    probs: Vec<f64>,
    steps: u64,
}

impl AdaptState {
    pub fn new(k: usize, policy: AdaptPolicy) -> Result<Self, AdaptError> {
        if k == 0 {
            return Err(AdaptError::InvalidPolicy("need at least one class".into()));
        }
        policy.validate(k)?;
        Ok(AdaptState {
            policy,
            smoothed: None,
            probs: vec![1.0 / k as f64; k],
            steps: 0,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn smoothed(&self) -> Option<&[f64]> {
        self.smoothed.as_deref()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Folds new scores into the smoothed scores and recomputes the probabilities.
    pub fn observe(&mut self, fb: &ClassFeedback) -> Result<&[f64], AdaptError> {
        fb.validate()?;
        if fb.scores.len() != self.probs.len() {
            return Err(AdaptError::InvalidFeedback(format!(
                "expected {} scores, got {}",
                self.probs.len(),
                fb.scores.len()
            )));
        }
        let a = self.policy.smoothing;
        let s = match &self.smoothed {
            None => fb.scores.clone(),
            Some(prev) => prev.iter().zip(&fb.scores).map(|(p, x)| a * p + (1.0 - a) * x).collect(),
        };
        self.probs = update_class_probs(&ClassFeedback::new(s.clone(), fb.step), &self.policy)?;
        self.smoothed = Some(s);
        self.steps += 1;
        Ok(&self.probs)
    }
}

/// One feedback step: update the state and broadcast `set_class_probs`.
/// Returns the number of producers the message reached.
pub fn feedback_step(
    server: &ControlServer,
    state: &mut AdaptState,
    fb: &ClassFeedback,
) -> Result<usize, AdaptError> {
    let probs = state.observe(fb)?.to_vec();
    Ok(server.send(&ControlMsg::set_class_probs(&probs)?)?)
}
