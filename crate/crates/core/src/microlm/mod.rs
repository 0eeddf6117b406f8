//! A tiny pre-norm decoder-only transformer over atomic entity tokens.
//!
//! Weights follow the `(out, in)` layout, so a linear map is `x · Wᵀ`. A
//! neuron is one FFN hidden unit; its parameter image is row `i` of the FFN
//! input weight, entry `i` of the FFN input bias and column `i` of the FFN
//! output weight of its layer.

mod checkpoint;
mod forward;
mod train;

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{AutogradError, Precision, Real, Tape, Tensor, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, AnyModel, CHECKPOINT_VERSION};
pub use forward::{
    answer_log_probs, bind_params, forward, ActivationRecord, CandidateQuery, Forward, ForwardSpec,
    Intervention,
};
pub use train::{
    candidate_argmax, memorized_fraction, train_memorization, EpochStats, TrainConfig, TrainReport,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    UnknownToken { token: usize, vocab: usize },
    #[error("empty question")]
    EmptyQuestion,
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("missing gradients")]
    MissingGradients,
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("neuron ({layer}, {neuron}) outside the model")]
    NeuronOutOfRange { layer: usize, neuron: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            d_ffn: 256,
            max_seq_len: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn total_neurons(&self) -> usize {
        self.n_layers * self.d_ffn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    TokenEmbedding,
    PositionEmbedding,
    AttnNormGain,
    AttnNormBias,
    Query,
    Key,
    Value,
    AttnOut,
    AttnOutBias,
    FfnNormGain,
    FfnNormBias,
    FfnIn,
    FfnInBias,
    FfnOut,
    FfnOutBias,
    FinalNormGain,
    FinalNormBias,
    Head,
}

const LAYER_ROLES: [ParamRole; 13] = [
    ParamRole::AttnNormGain,
    ParamRole::AttnNormBias,
    ParamRole::Query,
    ParamRole::Key,
    ParamRole::Value,
    ParamRole::AttnOut,
    ParamRole::AttnOutBias,
    ParamRole::FfnNormGain,
    ParamRole::FfnNormBias,
    ParamRole::FfnIn,
    ParamRole::FfnInBias,
    ParamRole::FfnOut,
    ParamRole::FfnOutBias,
];

impl ParamRole {
    fn as_str(self) -> &'static str {
        match self {
            ParamRole::TokenEmbedding => "tok_emb",
            ParamRole::PositionEmbedding => "pos_emb",
            ParamRole::AttnNormGain => "ln1.gain",
            ParamRole::AttnNormBias => "ln1.bias",
            ParamRole::Query => "attn.q",
            ParamRole::Key => "attn.k",
            ParamRole::Value => "attn.v",
            ParamRole::AttnOut => "attn.out",
            ParamRole::AttnOutBias => "attn.out_bias",
            ParamRole::FfnNormGain => "ln2.gain",
            ParamRole::FfnNormBias => "ln2.bias",
            ParamRole::FfnIn => "ffn.in",
            ParamRole::FfnInBias => "ffn.in_bias",
            ParamRole::FfnOut => "ffn.out",
            ParamRole::FfnOutBias => "ffn.out_bias",
            ParamRole::FinalNormGain => "ln_f.gain",
            ParamRole::FinalNormBias => "ln_f.bias",
            ParamRole::Head => "head",
        }
    }
}

/// Parameter identity: `layer` is `None` for embeddings, final norm and head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub layer: Option<usize>,
    pub role: ParamRole,
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer{l}.{}", self.role.as_str()),
            None => f.write_str(self.role.as_str()),
        }
    }
}

/// Canonical parameter order and shapes for `config`.
pub fn param_layout(config: &ModelConfig) -> Vec<(ParamKey, Vec<usize>)> {
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ffn);
    let global = |role| ParamKey { layer: None, role };
    let mut out = vec![
        (global(ParamRole::TokenEmbedding), vec![v, d]),
        (
            global(ParamRole::PositionEmbedding),
            vec![config.max_seq_len, d],
        ),
    ];
    for layer in 0..config.n_layers {
        for role in LAYER_ROLES {
            let shape = match role {
                ParamRole::Query | ParamRole::Key | ParamRole::Value | ParamRole::AttnOut => {
                    vec![d, d]
                }
                ParamRole::FfnIn => vec![f, d],
                ParamRole::FfnInBias => vec![f],
                ParamRole::FfnOut => vec![d, f],
                _ => vec![d],
            };
            out.push((
                ParamKey {
                    layer: Some(layer),
                    role,
                },
                shape,
            ));
        }
    }
    out.push((global(ParamRole::FinalNormGain), vec![d]));
    out.push((global(ParamRole::FinalNormBias), vec![d]));
    out.push((global(ParamRole::Head), vec![v, d]));
    out
}

/// Index of `key` in [`param_layout`] order.
pub fn param_index(config: &ModelConfig, key: ParamKey) -> usize {
    let per_layer = LAYER_ROLES.len();
    match key.layer {
        Some(l) => {
            let r = LAYER_ROLES
                .iter()
                .position(|&x| x == key.role)
                .expect("layer role");
            2 + l * per_layer + r
        }
        None => match key.role {
            ParamRole::TokenEmbedding => 0,
            ParamRole::PositionEmbedding => 1,
            ParamRole::FinalNormGain => 2 + config.n_layers * per_layer,
            ParamRole::FinalNormBias => 3 + config.n_layers * per_layer,
            ParamRole::Head => 4 + config.n_layers * per_layer,
            other => panic!("{other:?} is a per-layer role"),
        },
    }
}

/// Selected FFN neurons as `(layer, neuron)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronMask {
    pub selected: BTreeSet<(usize, usize)>,
    /// Hash of the attribution map the mask was built from; empty if none.
    pub origin: String,
}

impl NeuronMask {
    pub fn new(
        selected: impl IntoIterator<Item = (usize, usize)>,
        origin: impl Into<String>,
    ) -> Self {
        Self {
            selected: selected.into_iter().collect(),
            origin: origin.into(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, layer: usize, neuron: usize) -> bool {
        self.selected.contains(&(layer, neuron))
    }
}

/// Parameters, optimizer-free SGD state and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Real> {
    pub config: ModelConfig,
    params: Vec<(ParamKey, Tensor<T>)>,
    pub step: u64,
    grads: Option<Vec<Vec<T>>>,
    velocity: Option<Vec<Vec<T>>>,
}

/// Seeded initialization; `(config, seed)` fixes every bit of the result.
pub fn init_model<T: Real>(config: &ModelConfig) -> Result<ModelState<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let params = param_layout(config)
        .into_iter()
        .map(|(key, shape)| {
            let n: usize = shape.iter().product();
            let std = match key.role {
                ParamRole::TokenEmbedding | ParamRole::PositionEmbedding => Some(0.1),
                ParamRole::Query
                | ParamRole::Key
                | ParamRole::Value
                | ParamRole::FfnIn
                | ParamRole::Head => Some(1.0 / (shape[1] as f64).sqrt()),
                ParamRole::AttnOut | ParamRole::FfnOut => {
                    Some(resid_scale / (shape[1] as f64).sqrt())
                }
                _ => None,
            };
            let data: Vec<T> = match std {
                Some(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::c(normal.sample(&mut rng))).collect()
                }
                None if matches!(
                    key.role,
                    ParamRole::AttnNormGain | ParamRole::FfnNormGain | ParamRole::FinalNormGain
                ) =>
                {
                    vec![T::one(); n]
                }
                None => vec![T::zero(); n],
            };
            (
                key,
                Tensor::new(shape, data).expect("layout shapes are valid"),
            )
        })
        .collect();
    Ok(ModelState {
        config: config.clone(),
        params,
        step: 0,
        grads: None,
        velocity: None,
    })
}

impl<T: Real> ModelState<T> {
    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<(ParamKey, Tensor<T>)>,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len()
            || layout
                .iter()
                .zip(&params)
                .any(|((k, s), (pk, t))| k != pk || s.as_slice() != t.shape())
        {
            return Err(ModelError::Checkpoint(
                "parameter layout does not match config".into(),
            ));
        }
        Ok(Self {
            config,
            params,
            step,
            grads: None,
            velocity: None,
        })
    }

    pub fn params(&self) -> &[(ParamKey, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, key: ParamKey) -> &Tensor<T> {
        &self.params[param_index(&self.config, key)].1
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor<T> {
        let i = param_index(&self.config, key);
        &mut self.params[i].1
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over every parameter's little-endian bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (_, t) in &self.params {
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_precision<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, t)| (*k, t.to_precision()))
                .collect(),
            step: self.step,
            grads: None,
            velocity: None,
        }
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn grads(&self) -> Option<&[Vec<T>]> {
        self.grads.as_deref()
    }

    pub fn has_grads(&self) -> bool {
        self.grads.is_some()
    }

    pub fn clear_grads(&mut self) {
        self.grads = None;
    }

    /// Replaces the gradient buffers; `grads` follows [`param_layout`] order.
    pub fn set_grads(&mut self, grads: Vec<Vec<T>>) -> Result<()> {
        if grads.len() != self.params.len()
            || grads
                .iter()
                .zip(&self.params)
                .any(|(g, (_, p))| g.len() != p.numel())
        {
            return Err(ModelError::Config(
                "gradient buffers do not match the parameter layout".into(),
            ));
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Reads parameter gradients from a tape the params were bound to with
    /// [`bind_params`]; unreached parameters get zeros.
    pub fn collect_grads(&mut self, tape: &Tape<T>, vars: &[Var]) -> Result<()> {
        let grads = vars
            .iter()
            .zip(&self.params)
            .map(|(&v, (_, p))| {
                tape.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); p.numel()])
            })
            .collect();
        self.set_grads(grads)
    }

    /// Euclidean norm over all gradient buffers.
    pub fn grad_norm(&self) -> Result<f64> {
        let g = self.grads.as_ref().ok_or(ModelError::MissingGradients)?;
        Ok(g.iter()
            .flatten()
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt())
    }

    /// Rescales gradients so their norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> Result<f64> {
        let norm = self.grad_norm()?;
        if norm > max_norm && norm > 0.0 {
            let s = T::c(max_norm / norm);
            for v in self.grads.as_mut().expect("checked").iter_mut().flatten() {
                *v = *v * s;
            }
        }
        Ok(norm)
    }

    /// Plain SGD step `p -= lr * g`. With a mask, only the parameter image
    /// of the selected neurons moves; everything else stays bitwise equal.
    pub fn apply_gradients(&mut self, lr: f64, mask: Option<&NeuronMask>) -> Result<()> {
        self.apply_gradients_with_momentum(lr, 0.0, mask)
    }

    /// SGD with heavy-ball momentum `v = μv + g; p -= lr * v`. Velocity is
    /// only read or written where the update is allowed.
    pub fn apply_gradients_with_momentum(
        &mut self,
        lr: f64,
        momentum: f64,
        mask: Option<&NeuronMask>,
    ) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(ModelError::BadLearningRate(lr));
        }
        let grads = self.grads.take().ok_or(ModelError::MissingGradients)?;
        if let Some(mask) = mask {
            for &(layer, neuron) in &mask.selected {
                if layer >= self.config.n_layers || neuron >= self.config.d_ffn {
                    self.grads = Some(grads);
                    return Err(ModelError::NeuronOutOfRange { layer, neuron });
                }
            }
        }
        if momentum != 0.0 && self.velocity.is_none() {
            self.velocity = Some(
                self.params
                    .iter()
                    .map(|(_, p)| vec![T::zero(); p.numel()])
                    .collect(),
            );
        }
        let (lr_t, mu) = (T::c(lr), T::c(momentum));
        let d_ffn = self.config.d_ffn;
        let d_model = self.config.d_model;
        for (i, (key, p)) in self.params.iter_mut().enumerate() {
            let g = &grads[i];
            let mut vel = self.velocity.as_mut().map(|v| &mut v[i]);
            let mut update = |j: usize, data: &mut [T]| {
                let step = match vel.as_deref_mut() {
                    Some(v) if momentum != 0.0 => {
                        v[j] = mu * v[j] + g[j];
                        v[j]
                    }
                    _ => g[j],
                };
                data[j] = data[j] - lr_t * step;
            };
            let data = p.data_mut();
            match (mask, key.layer) {
                (None, _) => (0..data.len()).for_each(|j| update(j, data)),
                (Some(mask), Some(layer)) => {
                    let neurons = mask
                        .selected
                        .range((layer, 0)..(layer + 1, 0))
                        .map(|&(_, n)| n);
                    match key.role {
                        ParamRole::FfnIn => {
                            for n in neurons {
                                (n * d_model..(n + 1) * d_model).for_each(|j| update(j, data));
                            }
                        }
                        ParamRole::FfnInBias => neurons.for_each(|n| update(n, data)),
                        ParamRole::FfnOut => {
                            for n in neurons {
                                (0..d_model).for_each(|r| update(r * d_ffn + n, data));
                            }
                        }
                        _ => {}
                    }
                }
                (Some(_), None) => {}
            }
        }
        self.step += 1;
        Ok(())
    }
}
