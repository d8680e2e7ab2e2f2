//! Flat `key = value` settings with dotted sections, and the typed model and
//! training configurations resolved from them.
//!
//! Every known key has a default; unknown keys are rejected so a typo cannot
//! silently fall back to a default.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionKind;
use crate::distill::FgdConfig;
use crate::error::{Error, Result};
use crate::neuron::IeLifParams;
use crate::quant::QuantSpec;

/// Known keys, defaults and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.kind", "mnist-idx", "mnist-idx | cifar10-bin | synthetic"),
    ("data.train_limit", "0", "use at most this many training samples (0 = all)"),
    ("data.test_limit", "0", "use at most this many test samples (0 = all)"),
    ("data.synthetic.train", "512", "synthetic training samples"),
    ("data.synthetic.test", "256", "synthetic test samples"),
    ("data.synthetic.classes", "4", "synthetic class count"),
    ("data.synthetic.size", "16", "synthetic image side length"),
    ("data.synthetic.noise", "1.0", "synthetic per-pixel noise std"),
    ("model.in_channels", "1", "input channels (set from the dataset)"),
    ("model.height", "28", "input height (set from the dataset)"),
    ("model.width", "28", "input width (set from the dataset)"),
    ("model.classes", "10", "output classes (set from the dataset)"),
    ("model.stem_channels", "16", "stem convolution width"),
    ("model.conv_dims", "32", "comma-separated widths of the downsampling conv stages"),
    ("model.dim", "64", "token width of the transformer stage"),
    ("model.blocks", "2", "transformer blocks"),
    ("model.heads", "4", "attention heads"),
    ("model.mlp_ratio", "4", "channel-MLP expansion"),
    ("model.attention", "spike", "spike | softmax"),
    ("attention.mprf", "true", "rectify q/k/v membranes (otherwise a plain bias)"),
    ("attention.scale", "0.125", "attention scale, a power of two"),
    ("quant.bits", "4", "weight bits, 0 keeps full precision"),
    ("neuron.kind", "ielif", "ielif | relu"),
    ("neuron.bits", "4", "activity levels b of the IE-LIF neuron"),
    ("neuron.tau", "0.5", "membrane decay used between time steps"),
    ("time.train", "1", "training time steps"),
    ("loss.lambda", "2.0", "distillation weight"),
    ("loss.smoothing", "0.1", "label smoothing"),
    ("optim.kind", "sgd", "sgd | lamb"),
    ("optim.lr", "0.2", "peak learning rate"),
    ("optim.momentum", "0.9", "SGD momentum / first LAMB moment"),
    ("optim.weight_decay", "0.0005", "decay on weights only"),
    ("train.epochs", "3", "student epochs"),
    ("train.batch_size", "16", "mini-batch size"),
    ("train.seed", "1", "seed for init, shuffling and synthetic data"),
    ("teacher.bits", "0", "teacher weight bits (0 = full precision)"),
    ("teacher.epochs", "6", "maximum teacher epochs"),
    ("teacher.patience", "2", "stop after this many epochs without validation improvement"),
    ("teacher.val_fraction", "0.1", "held-out share of the training set"),
    ("eval.batch_size", "100", "evaluation batch size"),
];

/// Resolved key/value settings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    /// Defaults overlaid with the contents of a settings file.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::config(format!("unknown setting `{key}`"))),
        }
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{kv}` is not `key=value`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::config(format!("`{key} = {raw}` does not parse")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::config(format!("`{key} = {other}` is not a boolean"))),
        }
    }
}

impl fmt::Display for Settings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronKind {
    IeLif,
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub stem_channels: usize,
    pub conv_dims: Vec<usize>,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionKind,
    pub mprf: bool,
    pub weight_bits: Option<u8>,
    /// Weight bits of the distillation teacher built by [`teacher`](Self::teacher).
    pub teacher_bits: Option<u8>,
    pub neuron: NeuronKind,
    pub bits: u8,
    pub tau: f64,
    pub t_train: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::from_settings(&Settings::default()).expect("defaults are valid")
    }
}

impl ModelConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let conv_dims = s
            .raw("model.conv_dims")
            .split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(|x| x.parse().map_err(|_| Error::config(format!("bad conv width `{x}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let attention = match s.raw("model.attention") {
            "spike" => AttentionKind::Spike {
                scale: s.get("attention.scale")?,
            },
            "softmax" => AttentionKind::Softmax,
            o => return Err(Error::config(format!("unknown attention kind `{o}`"))),
        };
        let neuron = match s.raw("neuron.kind") {
            "ielif" => NeuronKind::IeLif,
            "relu" => NeuronKind::Relu,
            o => return Err(Error::config(format!("unknown neuron kind `{o}`"))),
        };
        let wb: u8 = s.get("quant.bits")?;
        let cfg = Self {
            in_channels: s.get("model.in_channels")?,
            height: s.get("model.height")?,
            width: s.get("model.width")?,
            classes: s.get("model.classes")?,
            stem_channels: s.get("model.stem_channels")?,
            conv_dims,
            dim: s.get("model.dim")?,
            blocks: s.get("model.blocks")?,
            heads: s.get("model.heads")?,
            mlp_ratio: s.get("model.mlp_ratio")?,
            attention,
            mprf: s.get_bool("attention.mprf")?,
            weight_bits: (wb != 0).then_some(wb),
            teacher_bits: {
                let tb: u8 = s.get("teacher.bits")?;
                (tb != 0).then_some(tb)
            },
            neuron,
            bits: s.get("neuron.bits")?,
            tau: s.get("neuron.tau")?,
            t_train: s.get("time.train")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write this configuration back into `s`.
    pub fn store(&self, s: &mut Settings) -> Result<()> {
        let dims: Vec<String> = self.conv_dims.iter().map(|d| d.to_string()).collect();
        let (attn, scale) = match self.attention {
            AttentionKind::Spike { scale } => ("spike", scale),
            AttentionKind::Softmax => ("softmax", 0.125),
        };
        let pairs = [
            ("model.in_channels", self.in_channels.to_string()),
            ("model.height", self.height.to_string()),
            ("model.width", self.width.to_string()),
            ("model.classes", self.classes.to_string()),
            ("model.stem_channels", self.stem_channels.to_string()),
            ("model.conv_dims", dims.join(",")),
            ("model.dim", self.dim.to_string()),
            ("model.blocks", self.blocks.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.mlp_ratio", self.mlp_ratio.to_string()),
            ("model.attention", attn.to_string()),
            ("attention.scale", scale.to_string()),
            ("attention.mprf", self.mprf.to_string()),
            ("quant.bits", self.weight_bits.unwrap_or(0).to_string()),
            ("teacher.bits", self.teacher_bits.unwrap_or(0).to_string()),
            (
                "neuron.kind",
                match self.neuron {
                    NeuronKind::IeLif => "ielif",
                    NeuronKind::Relu => "relu",
                }
                .to_string(),
            ),
            ("neuron.bits", self.bits.to_string()),
            ("neuron.tau", self.tau.to_string()),
            ("time.train", self.t_train.to_string()),
        ];
        for (k, v) in pairs {
            s.set(k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.in_channels", self.in_channels),
            ("model.classes", self.classes),
            ("model.stem_channels", self.stem_channels),
            ("model.dim", self.dim),
            ("model.heads", self.heads),
            ("model.mlp_ratio", self.mlp_ratio),
            ("time.train", self.t_train),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{k} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "{} heads do not divide width {}",
                self.heads, self.dim
            )));
        }
        if self.conv_dims.contains(&0) {
            return Err(Error::config("conv stage widths must be positive"));
        }
        let (h, w) = self.token_grid();
        if h == 0 || w == 0 {
            return Err(Error::config(format!("input {}x{} is too small", self.height, self.width)));
        }
        for b in self.weight_bits.iter().chain(&self.teacher_bits) {
            QuantSpec::<f64>::new(*b, 1.0)?;
        }
        IeLifParams::new(self.bits)?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config(format!("neuron.tau must be in (0, 1], got {}", self.tau)));
        }
        if let AttentionKind::Spike { scale } = self.attention {
            if !(scale > 0.0 && scale.log2().fract() == 0.0) {
                return Err(Error::config(format!("attention.scale must be a power of two, got {scale}")));
            }
            if self.neuron == NeuronKind::Relu {
                return Err(Error::config("spike attention needs spiking neurons"));
            }
        }
        Ok(())
    }

    /// Downsampling convolutions: the stem, the conv stages, the embedding.
    pub fn downsamplings(&self) -> usize {
        self.conv_dims.len() + 2
    }

    /// Token grid after all stride-2 convolutions (kernel 3, pad 1).
    pub fn token_grid(&self) -> (usize, usize) {
        let mut hw = (self.height, self.width);
        for _ in 0..self.downsamplings() {
            hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
        }
        hw
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }

    /// Virtual binary steps per sample at inference: each training step
    /// expands into `b` of them.
    pub fn t_infer(&self) -> usize {
        self.t_train * self.bits as usize
    }

    /// The softmax/ReLU twin used as the distillation teacher; full precision
    /// unless `teacher.bits` is set.
    pub fn teacher(&self) -> Self {
        Self {
            attention: AttentionKind::Softmax,
            mprf: true,
            weight_bits: self.teacher_bits,
            neuron: NeuronKind::Relu,
            t_train: 1,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Lamb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub fgd: FgdConfig,
    pub smoothing: f64,
    pub seed: u64,
    pub teacher_epochs: usize,
    pub teacher_patience: usize,
    pub val_fraction: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::from_settings(&Settings::default()).expect("defaults are valid")
    }
}

impl TrainConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let optim = match s.raw("optim.kind") {
            "sgd" => OptimKind::Sgd,
            "lamb" => OptimKind::Lamb,
            o => return Err(Error::config(format!("unknown optimizer `{o}`"))),
        };
        let cfg = Self {
            epochs: s.get("train.epochs")?,
            batch_size: s.get("train.batch_size")?,
            optim,
            lr: s.get("optim.lr")?,
            momentum: s.get("optim.momentum")?,
            weight_decay: s.get("optim.weight_decay")?,
            fgd: FgdConfig::new(s.get("loss.lambda")?)?,
            smoothing: s.get("loss.smoothing")?,
            seed: s.get("train.seed")?,
            teacher_epochs: s.get("teacher.epochs")?,
            teacher_patience: s.get("teacher.patience")?,
            val_fraction: s.get("teacher.val_fraction")?,
            eval_batch: s.get("eval.batch_size")?,
        };
        if cfg.batch_size == 0 || cfg.eval_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(Error::config(format!("optim.lr must be positive, got {}", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.momentum) || cfg.weight_decay < 0.0 {
            return Err(Error::config("momentum must be in [0, 1) and weight decay non-negative"));
        }
        if !(0.0..1.0).contains(&cfg.smoothing) {
            return Err(Error::config(format!("loss.smoothing must be in [0, 1), got {}", cfg.smoothing)));
        }
        if !(0.0..1.0).contains(&cfg.val_fraction) {
            return Err(Error::config("teacher.val_fraction must be in [0, 1)"));
        }
        Ok(cfg)
    }
}
