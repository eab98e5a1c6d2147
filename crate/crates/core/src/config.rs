//! Model and training configuration, parsed from `key=value` text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use brainformer_tensor::Precision;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of segmentation classes: background, NCR/NET, ED, ET.
pub const CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    /// Heads mixed by trainable logic and weight maps.
    #[default]
    Fusion,
    /// Plain multi-head attention (the head mixes are omitted).
    MultiHead,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Fusion => "fhsa",
            AttentionMode::MultiHead => "mhsa",
        }
    }
}

impl FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fhsa" | "fusion" => Ok(AttentionMode::Fusion),
            "mhsa" | "multihead" => Ok(AttentionMode::MultiHead),
            _ => Err(format!("unknown attention mode `{s}` (expected fhsa or mhsa)")),
        }
    }
}

/// Pair of modules run at every decoder stage: `T' = A(T)`, `T'' = T' + B(T')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CascadeMode {
    RbmRbm,
    IdftmIdftm,
    #[default]
    IdftmRbm,
}

impl CascadeMode {
    pub fn name(self) -> &'static str {
        match self {
            CascadeMode::RbmRbm => "rbm+rbm",
            CascadeMode::IdftmIdftm => "idftm+idftm",
            CascadeMode::IdftmRbm => "idftm+rbm",
        }
    }
}

impl FromStr for CascadeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rbm+rbm" => Ok(CascadeMode::RbmRbm),
            "idftm+idftm" => Ok(CascadeMode::IdftmIdftm),
            "idftm+rbm" => Ok(CascadeMode::IdftmRbm),
            _ => Err(format!(
                "unknown cascade `{s}` (expected rbm+rbm, idftm+idftm or idftm+rbm)"
            )),
        }
    }
}

/// Architecture hyperparameters. Every field is fixed at model construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input modalities C.
    pub in_channels: usize,
    /// Block extents (H, W, D) the model is built for.
    pub block: [usize; 3],
    /// Cubic patch size p.
    pub patch: usize,
    /// Embedding width k.
    pub width: usize,
    /// Encoder layers L.
    pub layers: usize,
    /// Encoder taps / decoder scales n.
    pub taps: usize,
    /// Encoder heads n_h.
    pub heads: usize,
    /// MLP hidden width as a multiple of k.
    pub mlp_ratio: usize,
    pub attention: AttentionMode,
    /// Decoder attention heads n_h'.
    pub decoder_heads: usize,
    /// Base channel count ρ; stage b has ρ / 2^(n-b) channels.
    pub base_channels: usize,
    pub cascade: CascadeMode,
    /// Kernel size of the decoder attention q/k/v convolutions.
    pub idftm_kernel: usize,
    /// Divide decoder attention intensities by √c.
    pub scaled_idftm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 4,
            block: [16, 16, 16],
            patch: 4,
            width: 32,
            layers: 2,
            taps: 2,
            heads: 2,
            mlp_ratio: 4,
            attention: AttentionMode::Fusion,
            decoder_heads: 2,
            base_channels: 16,
            cascade: CascadeMode::IdftmRbm,
            idftm_kernel: 3,
            scaled_idftm: false,
        }
    }
}

impl ModelConfig {
    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Token grid (H/p, W/p, D/p).
    pub fn grid(&self) -> [usize; 3] {
        self.block.map(|e| e / self.patch)
    }

    pub fn tokens(&self) -> usize {
        self.grid().iter().product()
    }

    /// Channels C_b of decoder stage `b` (1-based, `b = n` is the deepest).
    pub fn stage_channels(&self, b: usize) -> usize {
        self.base_channels >> (self.taps - b)
    }

    /// Spatial extents of decoder stage `b`.
    pub fn stage_extents(&self, b: usize) -> [usize; 3] {
        self.grid().map(|g| g << (self.taps - b))
    }

    /// Upsampling factor from stage 1 to the input resolution.
    pub fn final_upsample(&self) -> usize {
        self.patch >> (self.taps - 1)
    }

    /// Rejects every inconsistent combination before any tensor is built.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("patch", self.patch),
            ("width", self.width),
            ("layers", self.layers),
            ("taps", self.taps),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("decoder_heads", self.decoder_heads),
            ("base_channels", self.base_channels),
            ("idftm_kernel", self.idftm_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width k={} is not divisible by heads n_h={}",
                self.width, self.heads
            )));
        }
        if self.layers % self.taps != 0 {
            return Err(Error::Config(format!(
                "layers L={} is not divisible by taps n={}",
                self.layers, self.taps
            )));
        }
        if self.taps > 16 {
            return Err(Error::Config(format!("taps n={} is too large", self.taps)));
        }
        let halvings = 1usize << (self.taps - 1);
        if self.base_channels % halvings != 0 {
            return Err(Error::Config(format!(
                "base_channels ρ={} is not divisible by 2^(n-1)={halvings}",
                self.base_channels
            )));
        }
        for b in 1..=self.taps {
            let c = self.stage_channels(b);
            if c % self.decoder_heads != 0 {
                return Err(Error::Config(format!(
                    "stage {b}: channels C_b={c} not divisible by decoder_heads n_h'={}",
                    self.decoder_heads
                )));
            }
        }
        for (axis, &e) in ["H", "W", "D"].iter().zip(&self.block) {
            if e == 0 || e % self.patch != 0 {
                return Err(Error::Config(format!(
                    "block extent {axis}={e} is not a positive multiple of patch p={}",
                    self.patch
                )));
            }
        }
        if self.patch % halvings != 0 {
            return Err(Error::Config(format!(
                "patch p={} is not divisible by 2^(n-1)={halvings}; the decoder cannot restore the input resolution",
                self.patch
            )));
        }
        if self.idftm_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "idftm_kernel={} must be odd to preserve extents",
                self.idftm_kernel
            )));
        }
        Ok(())
    }
}

/// Everything `train` needs: optimizer, schedule, data and the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decoupled_decay: bool,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            decoupled_decay: false,
            batch_size: 2,
            steps: 100,
            seed: 0,
            checkpoint_every: 0,
            precision: Precision::F64,
        }
    }
}

/// Recognized keys, in the order they are echoed.
pub const KEYS: &[&str] = &[
    "learning_rate",
    "weight_decay",
    "decoupled_decay",
    "batch_size",
    "steps",
    "seed",
    "checkpoint_every",
    "precision",
    "in_channels",
    "block",
    "patch",
    "width",
    "layers",
    "taps",
    "heads",
    "mlp_ratio",
    "attention",
    "decoder_heads",
    "base_channels",
    "cascade",
    "idftm_kernel",
    "scaled_idftm",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}={value}: {e}")))
}

fn parse_block(value: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = value.split('x').collect();
    let bad = || Error::Config(format!("block={value}: expected HxWxD, e.g. 16x16x16"));
    match parts.as_slice() {
        [one] => {
            let e = one.parse().map_err(|_| bad())?;
            Ok([e; 3])
        }
        [h, w, d] => Ok([
            h.parse().map_err(|_| bad())?,
            w.parse().map_err(|_| bad())?,
            d.parse().map_err(|_| bad())?,
        ]),
        _ => Err(bad()),
    }
}

impl TrainConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "decoupled_decay" => self.decoupled_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            "in_channels" => m.in_channels = parse(key, value)?,
            "block" => m.block = parse_block(value)?,
            "patch" => m.patch = parse(key, value)?,
            "width" | "k" => m.width = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "taps" => m.taps = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "attention" => m.attention = parse(key, value)?,
            "decoder_heads" => m.decoder_heads = parse(key, value)?,
            "base_channels" | "rho" => m.base_channels = parse(key, value)?,
            "cascade" => m.cascade = parse(key, value)?,
            "idftm_kernel" => m.idftm_kernel = parse(key, value)?,
            "scaled_idftm" => m.scaled_idftm = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies an assignment written as `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Applies `key=value` lines in order. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let m = &self.model;
        match key {
            "learning_rate" => self.learning_rate.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "decoupled_decay" => self.decoupled_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "precision" => self.precision.name().to_string(),
            "in_channels" => m.in_channels.to_string(),
            "block" => format!("{}x{}x{}", m.block[0], m.block[1], m.block[2]),
            "patch" => m.patch.to_string(),
            "width" => m.width.to_string(),
            "layers" => m.layers.to_string(),
            "taps" => m.taps.to_string(),
            "heads" => m.heads.to_string(),
            "mlp_ratio" => m.mlp_ratio.to_string(),
            "attention" => m.attention.name().to_string(),
            "decoder_heads" => m.decoder_heads.to_string(),
            "base_channels" => m.base_channels.to_string(),
            "cascade" => m.cascade.name().to_string(),
            "idftm_kernel" => m.idftm_kernel.to_string(),
            "scaled_idftm" => m.scaled_idftm.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// Canonical text: every key in [`KEYS`] order. Parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.value_of(key));
        }
        out
    }

    /// Hash of the architecture keys only; optimizer settings may change
    /// between runs that share a checkpoint.
    pub fn model_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for key in &KEYS[KEYS.iter().position(|k| *k == "in_channels").unwrap()..] {
            hasher.update(format!("{key}={}\n", self.value_of(key)));
        }
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set_pair("cascade=rbm+rbm").unwrap();
        cfg.set_pair("block=8x16x8").unwrap();
        cfg.set_pair("learning_rate=0.0003").unwrap();
        let back = TrainConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = TrainConfig::parse_text("# toy\n\nsteps = 7  # short\n").unwrap();
        assert_eq!(cfg.steps, 7);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = TrainConfig::parse_text("stepz=3").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn divisibility_violations_are_rejected() {
        let cases = [
            ("heads", "3"),
            ("layers", "3"),
            ("decoder_heads", "3"),
            ("block", "18x16x16"),
            ("base_channels", "15"),
            ("idftm_kernel", "2"),
            ("patch", "6"),
        ];
        for (k, v) in cases {
            let mut cfg = TrainConfig::default();
            cfg.set(k, v).unwrap();
            assert!(
                matches!(cfg.validate(), Err(Error::Config(_))),
                "{k}={v} should be rejected"
            );
        }
    }

    #[test]
    fn model_hash_ignores_optimizer_keys() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.learning_rate = 0.5;
        b.steps = 1;
        assert_eq!(a.model_hash(), b.model_hash());
        b.model.width = 64;
        assert_ne!(a.model_hash(), b.model_hash());
    }

    #[test]
    fn stage_schedule() {
        let m = ModelConfig {
            taps: 3,
            base_channels: 32,
            patch: 8,
            block: [32, 32, 32],
            ..ModelConfig::default()
        };
        assert_eq!(
            (1..=3).map(|b| m.stage_channels(b)).collect::<Vec<_>>(),
            [8, 16, 32]
        );
        assert_eq!(m.stage_extents(3), [4, 4, 4]);
        assert_eq!(m.stage_extents(1), [16, 16, 16]);
        assert_eq!(m.final_upsample(), 2);
    }
}
