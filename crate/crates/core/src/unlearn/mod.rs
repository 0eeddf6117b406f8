//! Unlearning objectives and the epoch loop that applies them.
//!
//! Baselines update every parameter. KLUE attributes each forget batch to
//! FFN neurons, subtracts the attribution those neurons also earn on
//! mismatched questions with the same answer, keeps the global top
//! fraction, and updates only their parameter image under the GA_ret loss.

mod attribution;
mod losses;
mod run;
mod selection;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::AutogradError;
use crate::evalkit::EvalError;
use crate::microlm::{ModelConfig, ModelError};

pub use crate::microlm::NeuronMask;
pub use attribution::{attribute, attribute_items, regularize, regularize_with, AttributionMap};
pub use losses::{
    loss_for_method, make_loss_items, rmu_direction, LossItem, MethodLoss, ReferenceModel,
};
pub use run::{
    read_history, unlearn_run, unlearn_run_with, write_history, EpochRecord, NumericDiagnostic,
    RunHistory,
};
pub use selection::{neuron_count, random_mask, select_neurons, select_unforgotten};

#[derive(Debug, Error)]
pub enum UnlearnError {
    #[error("invalid unlearning config: {0}")]
    Config(String),
    #[error("attribution batch is empty")]
    EmptyBatch,
    #[error("method {0} needs a reference model")]
    MissingReference(Method),
    #[error("neuron scores contain NaN")]
    NanScore,
    #[error("non-finite loss or gradient at epoch {}, step {} (loss {})", .0.epoch, .0.step, .0.loss)]
    NonFinite(Box<NumericDiagnostic>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = UnlearnError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ga,
    GaRet,
    DpoMis,
    DpoRej,
    Npo,
    Rmu,
    Klue,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ga,
        Method::GaRet,
        Method::DpoMis,
        Method::DpoRej,
        Method::Npo,
        Method::Rmu,
        Method::Klue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ga => "ga",
            Method::GaRet => "ga_ret",
            Method::DpoMis => "dpo_mis",
            Method::DpoRej => "dpo_rej",
            Method::Npo => "npo",
            Method::Rmu => "rmu",
            Method::Klue => "klue",
        }
    }

    pub fn needs_reference(self) -> bool {
        matches!(
            self,
            Method::DpoMis | Method::DpoRej | Method::Npo | Method::Rmu
        )
    }

    pub fn uses_retain(self) -> bool {
        self != Method::Ga
    }

    /// Learning rate picked by the grid sweep on the default world.
    pub fn default_lr(self) -> f64 {
        match self {
            Method::Ga => 0.003,
            Method::GaRet => 0.03,
            Method::DpoMis | Method::DpoRej => 0.1,
            Method::Npo => 0.03,
            Method::Rmu => 0.03,
            Method::Klue => 0.7,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = UnlearnError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| UnlearnError::Config(format!("unknown method {s:?}")))
    }
}

/// How KLUE picks the neurons it may update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronSelection {
    /// Regularized attribution, recomputed per batch.
    Attribution,
    /// Uniformly random neurons of the same count, redrawn per batch.
    Random,
    /// The same mask for every step.
    Fixed(NeuronMask),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub method: Method,
    pub lr: f64,
    pub forget_weight: f64,
    pub retain_weight: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Percent; the run stops once UA is at or below it.
    pub ua_stop_threshold: f64,
    pub alpha: f64,
    pub n_mismatch: usize,
    pub neuron_ratio: f64,
    pub beta_pref: f64,
    pub rmu_c: f64,
    pub rmu_layer: usize,
    pub seed: u64,
    /// Skip forget items that are already not memorized.
    pub sample_selection: bool,
    pub neuron_selection: NeuronSelection,
    pub momentum: f64,
    /// Rescale the gradient to at most this norm before each step.
    pub clip_norm: Option<f64>,
}

impl UnlearnConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            lr: method.default_lr(),
            forget_weight: 0.7,
            retain_weight: 1.0,
            batch_size: 4,
            max_epochs: 150,
            ua_stop_threshold: 33.34,
            alpha: 10.0,
            n_mismatch: 5,
            neuron_ratio: 0.05,
            beta_pref: 0.1,
            rmu_c: 20.0,
            rmu_layer: 1,
            seed,
            sample_selection: method == Method::Klue,
            neuron_selection: NeuronSelection::Attribution,
            momentum: 0.0,
            clip_norm: None,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |msg: String| Err(UnlearnError::Config(msg));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(self.forget_weight >= 0.0) || !(self.retain_weight >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.neuron_ratio > 0.0 && self.neuron_ratio <= 1.0) {
            return bad(format!(
                "neuron_ratio must be in (0, 1], got {}",
                self.neuron_ratio
            ));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if !(self.beta_pref > 0.0) {
            return bad(format!(
                "beta_pref must be positive, got {}",
                self.beta_pref
            ));
        }
        if self.rmu_layer >= model.n_layers {
            return bad(format!(
                "rmu_layer {} out of range for {} layers",
                self.rmu_layer, model.n_layers
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if let NeuronSelection::Fixed(mask) = &self.neuron_selection {
            if let Some(&(l, n)) = mask
                .selected
                .iter()
                .find(|&&(l, n)| l >= model.n_layers || n >= model.d_ffn)
            {
                return Err(ModelError::NeuronOutOfRange {
                    layer: l,
                    neuron: n,
                }
                .into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
