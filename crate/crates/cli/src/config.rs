//! Flat `key = value` run configuration.
//!
//! Every key has a registered default; files and flags may only set
//! registered keys. Values stay strings until a typed view is requested, so
//! a resolved config can be echoed back verbatim.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use unlearnlab::microlm::{ModelConfig, TrainConfig};
use unlearnlab::rng::{derive_seed, EVAL, MODEL, UNLEARN, WORLD};
use unlearnlab::unlearn::{Method, NeuronMask, NeuronSelection, UnlearnConfig};
use unlearnlab::worldgen::{GraphConfig, WorldConfig};

use crate::CliError;

pub struct Key {
    pub name: &'static str,
    pub default: String,
    pub help: &'static str,
}

fn key(name: &'static str, default: impl ToString, help: &'static str) -> Key {
    Key {
        name,
        default: default.to_string(),
        help,
    }
}

/// All recognized keys with their defaults, in echo order.
pub fn registry() -> Vec<Key> {
    let w = WorldConfig::default();
    let g = GraphConfig::default();
    let m = ModelConfig::new(0, 0);
    let t = TrainConfig::default();
    let u = UnlearnConfig::new(Method::Klue, 0);
    vec![
        key(
            "seed",
            0,
            "root seed; world, model, unlearn and eval streams derive from it",
        ),
        key("data_dir", "data", "dataset directory written by gen"),
        key(
            "checkpoint",
            "",
            "memorized checkpoint; empty means <data_dir>/model.ckpt",
        ),
        key(
            "out_dir",
            "out",
            "output directory for unlearn, eval and sweep",
        ),
        key("precision", "f32", "f32 or f64"),
        // world
        key("n_famous", g.n_famous, "famous entities"),
        key("n_background", g.n_background, "background entities"),
        key("n_relations", g.n_relations, "relation types"),
        key(
            "chain_density",
            g.chain_density,
            "fraction of famous objects that get an outgoing triple",
        ),
        key(
            "max_famous_triples",
            g.max_famous_triples,
            "max triples per famous entity",
        ),
        key(
            "object_fraction",
            g.object_fraction,
            "share of background entities reserved as objects",
        ),
        key(
            "max_background_triples",
            g.max_background_triples,
            "max triples per background subject",
        ),
        key(
            "shared_object_bias",
            g.shared_object_bias,
            "chance a background triple reuses a famous object",
        ),
        key(
            "templates_per_relation",
            w.templates_per_relation,
            "surface templates per relation",
        ),
        key(
            "same_answer_cap",
            w.same_answer_cap,
            "max same-answer items per cluster",
        ),
        key(
            "forget_fraction",
            w.fractions[0],
            "share of clusters in the forget split",
        ),
        key(
            "retain_fraction",
            w.fractions[1],
            "share of clusters in the retain split",
        ),
        key(
            "test_fraction",
            w.fractions[2],
            "share of clusters in the test split",
        ),
        // model
        key("d_model", m.d_model, "residual width"),
        key("n_layers", m.n_layers, "transformer blocks"),
        key("n_heads", m.n_heads, "attention heads"),
        key("d_ffn", m.d_ffn, "FFN hidden units per layer"),
        key("max_seq_len", m.max_seq_len, "longest question in tokens"),
        // memorization training
        key("train_lr", t.lr, "Adam learning rate"),
        key("train_batch_size", t.batch_size, "training batch size"),
        key("train_max_epochs", t.max_epochs, "epoch cap"),
        key(
            "target_accuracy",
            t.target_accuracy,
            "base-item memorization target, as a fraction",
        ),
        key(
            "consolidation_epochs",
            t.consolidation_epochs,
            "extra epochs after the target is reached",
        ),
        key(
            "label_smoothing",
            t.label_smoothing,
            "uniform mass in the training target",
        ),
        key(
            "train_clip_norm",
            t.clip_norm,
            "gradient norm clip during training",
        ),
        key("resume", "", "checkpoint to continue training from"),
        // unlearning
        key(
            "method",
            u.method,
            "ga, ga_ret, dpo_mis, dpo_rej, npo, rmu or klue",
        ),
        key(
            "lr",
            "auto",
            "unlearning learning rate; auto picks the method default",
        ),
        key(
            "forget_weight",
            u.forget_weight,
            "weight of the forget term",
        ),
        key(
            "retain_weight",
            u.retain_weight,
            "weight of the retain term",
        ),
        key("batch_size", u.batch_size, "forget items per step"),
        key("max_epochs", u.max_epochs, "unlearning epoch cap"),
        key(
            "ua_stop_threshold",
            u.ua_stop_threshold,
            "stop once UA is at or below this percent",
        ),
        key("alpha", u.alpha, "mismatched-attribution penalty"),
        key(
            "n_mismatch",
            u.n_mismatch,
            "mismatched questions per forget item",
        ),
        key(
            "neuron_ratio",
            u.neuron_ratio,
            "fraction of FFN neurons KLUE updates; 0 updates none",
        ),
        key("beta_pref", u.beta_pref, "DPO and NPO temperature"),
        key("rmu_c", u.rmu_c, "RMU steering scale"),
        key("rmu_layer", u.rmu_layer, "RMU residual layer"),
        key(
            "sample_selection",
            "auto",
            "skip already-forgotten items: true, false or auto (klue only)",
        ),
        key("neuron_selection", "attribution", "attribution or random"),
        key("momentum", u.momentum, "SGD momentum"),
        key("clip_norm", "none", "unlearning gradient clip, or none"),
        key(
            "checkpoint_every",
            0,
            "write an unlearning checkpoint every k epochs; 0 disables",
        ),
        key(
            "eval_checkpoint",
            "",
            "model to evaluate against checkpoint; empty evaluates checkpoint itself",
        ),
        // sweep
        key("sweep_key", "neuron_ratio", "key varied by sweep"),
        key(
            "sweep_values",
            "0.01,0.05,0.1,0.5",
            "comma-separated values for sweep_key",
        ),
    ]
}

/// Resolved configuration: defaults overlaid by a file and then by flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    order: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let reg = registry();
        Self {
            order: reg.iter().map(|k| k.name.to_string()).collect(),
            values: reg
                .into_iter()
                .map(|k| (k.name.to_string(), k.default))
                .collect(),
        }
    }
}

/// Seeds of the named streams under one root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct Seeds {
    pub root: u64,
    pub world: u64,
    pub model: u64,
    pub unlearn: u64,
    pub eval: u64,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
    }

    pub fn with(mut self, key: &str, value: &str) -> Result<Self, CliError> {
        self.set(key, value)?;
        Ok(self)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{origin} line {}: expected key = value", i + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Config(format!("{origin} line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `--config FILE`, `--key value` and `--key=value` arguments.
    /// The config file is applied first wherever it appears, so flags
    /// always win.
    pub fn from_args(args: &[String]) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::Config(format!("expected --key, got {arg:?}")))?;
            let (k, v) = match name.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| CliError::Config(format!("--{name} needs a value")))?;
                    (name.to_string(), v.clone())
                }
            };
            pairs.push((k, v));
        }
        let mut cfg = Self::default();
        for (_, path) in pairs.iter().filter(|(k, _)| k == "config") {
            cfg.apply_file(Path::new(path))?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "config") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Every key in registry order, loadable with [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in &self.order {
            let _ = writeln!(s, "{k} = {}", self.values[k]);
        }
        s
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("{key} = {raw:?}: {e}")))
    }

    fn parse_bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        match self.get(key) {
            "auto" => Ok(None),
            "true" | "1" | "yes" => Ok(Some(true)),
            "false" | "0" | "no" => Ok(Some(false)),
            other => Err(CliError::Config(format!(
                "{key} = {other:?}: expected true, false or auto"
            ))),
        }
    }

    pub fn seeds(&self) -> Result<Seeds, CliError> {
        let root = self.parse("seed")?;
        Ok(Seeds {
            root,
            world: derive_seed(root, WORLD),
            model: derive_seed(root, MODEL),
            unlearn: derive_seed(root, UNLEARN),
            eval: derive_seed(root, EVAL),
        })
    }

    pub fn precision(&self) -> Result<Precision, CliError> {
        match self.get("precision") {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(CliError::Config(format!(
                "precision = {other:?}: expected f32 or f64"
            ))),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data_dir"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match self.get("checkpoint") {
            "" => self.data_dir().join("model.ckpt"),
            p => PathBuf::from(p),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    pub fn world_config(&self) -> Result<WorldConfig, CliError> {
        let graph = GraphConfig {
            n_famous: self.parse("n_famous")?,
            n_background: self.parse("n_background")?,
            n_relations: self.parse("n_relations")?,
            chain_density: self.parse("chain_density")?,
            max_famous_triples: self.parse("max_famous_triples")?,
            object_fraction: self.parse("object_fraction")?,
            max_background_triples: self.parse("max_background_triples")?,
            shared_object_bias: self.parse("shared_object_bias")?,
        };
        Ok(WorldConfig {
            graph,
            templates_per_relation: self.parse("templates_per_relation")?,
            same_answer_cap: self.parse("same_answer_cap")?,
            fractions: [
                self.parse("forget_fraction")?,
                self.parse("retain_fraction")?,
                self.parse("test_fraction")?,
            ],
        })
    }

    /// Model shape for a vocabulary; the init seed comes from the model
    /// stream.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, CliError> {
        let seeds = self.seeds()?;
        let cfg = ModelConfig {
            vocab_size,
            d_model: self.parse("d_model")?,
            n_layers: self.parse("n_layers")?,
            n_heads: self.parse("n_heads")?,
            d_ffn: self.parse("d_ffn")?,
            max_seq_len: self.parse("max_seq_len")?,
            seed: derive_seed(seeds.model, "init"),
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            lr: self.parse("train_lr")?,
            batch_size: self.parse("train_batch_size")?,
            max_epochs: self.parse("train_max_epochs")?,
            target_accuracy: self.parse("target_accuracy")?,
            consolidation_epochs: self.parse("consolidation_epochs")?,
            label_smoothing: self.parse("label_smoothing")?,
            clip_norm: self.parse("train_clip_norm")?,
            ..TrainConfig::default()
        };
        if !(0.0..=1.0).contains(&cfg.target_accuracy) {
            return Err(CliError::Config(format!(
                "target_accuracy must be a fraction in [0, 1], got {}",
                cfg.target_accuracy
            )));
        }
        Ok(cfg)
    }

    /// Unlearning config seeded from the unlearn stream. `neuron_ratio = 0`
    /// becomes an empty fixed mask, so KLUE steps change nothing.
    pub fn unlearn_config(&self) -> Result<UnlearnConfig, CliError> {
        let method: Method = self.parse("method")?;
        let mut cfg = UnlearnConfig::new(method, self.seeds()?.unlearn);
        if self.get("lr") != "auto" {
            cfg.lr = self.parse("lr")?;
        }
        cfg.forget_weight = self.parse("forget_weight")?;
        cfg.retain_weight = self.parse("retain_weight")?;
        cfg.batch_size = self.parse("batch_size")?;
        cfg.max_epochs = self.parse("max_epochs")?;
        cfg.ua_stop_threshold = self.parse("ua_stop_threshold")?;
        cfg.alpha = self.parse("alpha")?;
        cfg.n_mismatch = self.parse("n_mismatch")?;
        cfg.beta_pref = self.parse("beta_pref")?;
        cfg.rmu_c = self.parse("rmu_c")?;
        cfg.rmu_layer = self.parse("rmu_layer")?;
        cfg.momentum = self.parse("momentum")?;
        if let Some(b) = self.parse_bool("sample_selection")? {
            cfg.sample_selection = b;
        }
        cfg.clip_norm = match self.get("clip_norm") {
            "none" | "" => None,
            _ => Some(self.parse("clip_norm")?),
        };
        let ratio: f64 = self.parse("neuron_ratio")?;
        cfg.neuron_selection = match self.get("neuron_selection") {
            "attribution" => NeuronSelection::Attribution,
            "random" => NeuronSelection::Random,
            other => {
                return Err(CliError::Config(format!(
                    "neuron_selection = {other:?}: expected attribution or random"
                )))
            }
        };
        if ratio == 0.0 {
            cfg.neuron_selection = NeuronSelection::Fixed(NeuronMask::new([], "empty"));
        } else {
            cfg.neuron_ratio = ratio;
        }
        Ok(cfg)
    }

    pub fn sweep_values(&self) -> Vec<String> {
        self.get("sweep_values")
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(String::from)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}
