//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Every key has a default, so an
//! empty file is a valid config. Unknown keys and malformed values are
//! rejected with an error that names the key.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gazenet::GazeConfig;
use crate::policynet::{ModelConfig, Variant};
use crate::simenv::SimConfig;

/// Which of the two configured learning rates a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrChoice {
    Desk,
    Reference,
}

impl LrChoice {
    pub fn name(self) -> &'static str {
        match self {
            LrChoice::Desk => "desk",
            LrChoice::Reference => "reference",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_desk: f64,
    /// Desk rate of the gaze trainer.
    pub gaze_lr_desk: f64,
    /// Gaze training resamples each gripper angle above this many degrees
    /// uniformly between it and the recorded angle; 0 disables.
    pub gaze_grip_jitter_deg: f64,
    pub lr_reference: f64,
    pub lr_choice: LrChoice,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Wall-clock budget in seconds; training stops after the epoch that
    /// crosses it.
    pub time_budget_s: f64,
    pub batch_size: usize,
    /// Fraction of episodes used for training; the rest is validation.
    pub train_fraction: f64,
    pub normalize_actions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_desk: 1e-4,
            gaze_lr_desk: 3e-3,
            gaze_grip_jitter_deg: 10.0,
            lr_reference: 1e-5,
            lr_choice: LrChoice::Desk,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            time_budget_s: 1200.0,
            batch_size: 64,
            train_fraction: 0.9,
            normalize_actions: true,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        match self.lr_choice {
            LrChoice::Desk => self.lr_desk,
            LrChoice::Reference => self.lr_reference,
        }
    }

    /// The settings the gaze trainer runs with.
    pub fn for_gaze(&self) -> TrainConfig {
        TrainConfig {
            lr_desk: self.gaze_lr_desk,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Residual mixing in attention rollout.
    pub rollout_residual: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 24,
            rollout_residual: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub gaze: GazeConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            sim: SimConfig::default(),
            gaze: GazeConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Every accepted key with a one-line description, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "base seed for initialization, data order and dropout"),
    ("image_size", "global image side in pixels"),
    ("fovea_size", "foveated crop side in pixels"),
    ("sim.grasp_radius", "max effector-object distance for a grasp"),
    ("sim.step_clamp", "max planar displacement per step"),
    ("sim.yaw_clamp", "max yaw change per step, radians"),
    ("sim.max_steps", "episode step limit"),
    ("sim.corner_threshold", "push success: max top-corner error"),
    ("sim.tilt_threshold_deg", "push success: max tilt, degrees"),
    ("sim.gaze_noise", "std of synthetic gaze noise"),
    ("sim.color_jitter", "randomize object colors"),
    ("gaze.channels", "gaze conv channels, comma separated"),
    ("gaze.hidden", "gaze hidden layer width"),
    ("gaze.components", "mixture components"),
    ("gaze.coord_channels", "append coordinate planes to the input of every gaze conv block"),
    ("policy.variant", "transformer, baseline or baseline-gap"),
    ("policy.d_model", "token width"),
    ("policy.layers", "encoder layers"),
    ("policy.heads", "attention heads"),
    ("policy.ffn_dim", "encoder feed-forward width"),
    ("policy.mlp_hidden", "output MLP hidden width"),
    ("policy.channels", "fovea conv channels, comma separated"),
    ("policy.dropout", "encoder dropout rate"),
    ("policy.action_mean", "action delta offsets, comma separated (set by train-policy)"),
    ("policy.action_scale", "action delta scales, comma separated (set by train-policy)"),
    ("train.lr_desk", "desk learning rate"),
    ("train.gaze_lr_desk", "desk learning rate of the gaze trainer"),
    ("train.gaze_grip_jitter_deg", "gaze training: open gripper angles are resampled down to this, degrees (0 = off)"),
    ("train.lr_reference", "reference learning rate"),
    ("train.lr_choice", "desk or reference"),
    ("train.beta1", "RAdam beta1"),
    ("train.beta2", "RAdam beta2"),
    ("train.eps", "RAdam epsilon"),
    ("train.epochs", "max epochs"),
    ("train.time_budget_s", "wall-clock budget per training run, seconds"),
    ("train.batch_size", "minibatch size"),
    ("train.train_fraction", "fraction of episodes used for training"),
    ("train.normalize_actions", "standardize action deltas per dimension on the training split"),
    ("eval.episodes", "evaluation episodes"),
    ("eval.rollout_residual", "residual-aware attention rollout"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!(
            "config key `{key}`: cannot parse {value:?} as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_floats(key: &str, value: &str) -> Result<Vec<f64>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "image_size" => {
                let v = parse(key, value)?;
                self.sim.image_size = v;
                self.gaze.global_size = v;
            }
            "fovea_size" => self.model.fovea_size = parse(key, value)?,
            "sim.grasp_radius" => self.sim.grasp_radius = parse(key, value)?,
            "sim.step_clamp" => self.sim.step_clamp = parse(key, value)?,
            "sim.yaw_clamp" => self.sim.yaw_clamp = parse(key, value)?,
            "sim.max_steps" => self.sim.max_steps = parse(key, value)?,
            "sim.corner_threshold" => self.sim.corner_threshold = parse(key, value)?,
            "sim.tilt_threshold_deg" => self.sim.tilt_threshold_deg = parse(key, value)?,
            "sim.gaze_noise" => self.sim.gaze_noise = parse(key, value)?,
            "sim.color_jitter" => self.sim.color_jitter = parse(key, value)?,
            "gaze.channels" => self.gaze.channels = parse_list(key, value)?,
            "gaze.hidden" => self.gaze.hidden = parse(key, value)?,
            "gaze.components" => self.gaze.components = parse(key, value)?,
            "gaze.coord_channels" => self.gaze.coord_channels = parse(key, value)?,
            "policy.variant" => {
                self.model.variant = Variant::parse(value)
                    .map_err(|_| Error::Config(format!("config key `{key}`: unknown variant {value:?}")))?
            }
            "policy.d_model" => self.model.d_model = parse(key, value)?,
            "policy.layers" => self.model.layers = parse(key, value)?,
            "policy.heads" => self.model.heads = parse(key, value)?,
            "policy.ffn_dim" => self.model.ffn_dim = parse(key, value)?,
            "policy.mlp_hidden" => self.model.mlp_hidden = parse(key, value)?,
            "policy.channels" => self.model.channels = parse_list(key, value)?,
            "policy.dropout" => self.model.dropout = parse(key, value)?,
            "policy.action_mean" => self.model.action_mean = parse_floats(key, value)?,
            "policy.action_scale" => self.model.action_scale = parse_floats(key, value)?,
            "train.lr_desk" => self.train.lr_desk = parse(key, value)?,
            "train.gaze_lr_desk" => self.train.gaze_lr_desk = parse(key, value)?,
            "train.gaze_grip_jitter_deg" => self.train.gaze_grip_jitter_deg = parse(key, value)?,
            "train.lr_reference" => self.train.lr_reference = parse(key, value)?,
            "train.lr_choice" => {
                self.train.lr_choice = match value {
                    "desk" => LrChoice::Desk,
                    "reference" => LrChoice::Reference,
                    _ => {
                        return Err(Error::Config(format!(
                            "config key `{key}`: expected desk or reference, got {value:?}"
                        )))
                    }
                }
            }
            "train.beta1" => self.train.beta1 = parse(key, value)?,
            "train.beta2" => self.train.beta2 = parse(key, value)?,
            "train.eps" => self.train.eps = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.time_budget_s" => self.train.time_budget_s = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.train_fraction" => self.train.train_fraction = parse(key, value)?,
            "train.normalize_actions" => self.train.normalize_actions = parse(key, value)?,
            "eval.episodes" => self.eval.episodes = parse(key, value)?,
            "eval.rollout_residual" => self.eval.rollout_residual = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of every key, in `KEYS` order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.sim;
        let m = &self.model;
        let t = &self.train;
        let values = [
            self.seed.to_string(),
            s.image_size.to_string(),
            m.fovea_size.to_string(),
            format!("{:?}", s.grasp_radius),
            format!("{:?}", s.step_clamp),
            format!("{:?}", s.yaw_clamp),
            s.max_steps.to_string(),
            format!("{:?}", s.corner_threshold),
            format!("{:?}", s.tilt_threshold_deg),
            format!("{:?}", s.gaze_noise),
            s.color_jitter.to_string(),
            list(&self.gaze.channels),
            self.gaze.hidden.to_string(),
            self.gaze.components.to_string(),
            self.gaze.coord_channels.to_string(),
            m.variant.name().to_string(),
            m.d_model.to_string(),
            m.layers.to_string(),
            m.heads.to_string(),
            m.ffn_dim.to_string(),
            m.mlp_hidden.to_string(),
            list(&m.channels),
            format!("{:?}", m.dropout),
            floats(&m.action_mean),
            floats(&m.action_scale),
            format!("{:?}", t.lr_desk),
            format!("{:?}", t.gaze_lr_desk),
            format!("{:?}", t.gaze_grip_jitter_deg),
            format!("{:?}", t.lr_reference),
            t.lr_choice.name().to_string(),
            format!("{:?}", t.beta1),
            format!("{:?}", t.beta2),
            format!("{:?}", t.eps),
            t.epochs.to_string(),
            format!("{:?}", t.time_budget_s),
            t.batch_size.to_string(),
            format!("{:?}", t.train_fraction),
            t.normalize_actions.to_string(),
            self.eval.episodes.to_string(),
            self.eval.rollout_residual.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// Parses config text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1)));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("config key `{key}` given twice")));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(Error::Usage(format!("override {o:?} is not key=value")));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// One `key = value` line per key, in canonical order.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        if self.model.fovea_size > self.sim.image_size {
            return Err(Error::Config(format!(
                "config key `fovea_size`: {} exceeds image_size {}",
                self.model.fovea_size, self.sim.image_size
            )));
        }
        let g = &self.gaze;
        if g.components == 0 || g.hidden == 0 || g.channels.is_empty() {
            return Err(Error::Config("config keys `gaze.*`: widths must be positive".into()));
        }
        if self.sim.image_size % (1 << g.channels.len()) != 0 {
            return Err(Error::Config(format!(
                "config key `image_size`: {} is not divisible by 2^{}",
                self.sim.image_size,
                g.channels.len()
            )));
        }
        let t = &self.train;
        for (key, v) in [
            ("train.lr_desk", t.lr_desk),
            ("train.gaze_lr_desk", t.gaze_lr_desk),
            ("train.lr_reference", t.lr_reference),
            ("train.eps", t.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("config key `{key}` must be positive, got {v}")));
            }
        }
        if !(t.gaze_grip_jitter_deg >= 0.0 && t.gaze_grip_jitter_deg.is_finite()) {
            return Err(Error::Config(format!(
                "config key `train.gaze_grip_jitter_deg` must be non-negative, got {}",
                t.gaze_grip_jitter_deg
            )));
        }
        for (key, v) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("config key `{key}` must lie in [0, 1), got {v}")));
            }
        }
        if t.batch_size == 0 {
            return Err(Error::Config("config key `train.batch_size` must be positive".into()));
        }
        if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "config key `train.train_fraction` must lie in (0, 1), got {}",
                t.train_fraction
            )));
        }
        if !(t.time_budget_s > 0.0) {
            return Err(Error::Config("config key `train.time_budget_s` must be positive".into()));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_text() {
        let c = RunConfig::default();
        let back = RunConfig::parse_text(&c.canonical_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.entries().len(), KEYS.len());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_and_bad_keys_are_named() {
        let e = RunConfig::parse_text("train.lr = 3").unwrap_err().to_string();
        assert!(e.contains("`train.lr`"), "{e}");
        let e = RunConfig::parse_text("train.epochs = many").unwrap_err().to_string();
        assert!(e.contains("`train.epochs`"), "{e}");
        let e = RunConfig::parse_text("seed = 1\nseed = 2").unwrap_err().to_string();
        assert!(e.contains("`seed`"), "{e}");
        assert!(matches!(RunConfig::parse_text("nonsense"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_and_comments() {
        let mut c = RunConfig::parse_text("# desk\n\n train.epochs = 3 \npolicy.channels = 4, 8\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.channels, vec![4, 8]);
        c.apply_overrides(&["train.lr_choice=reference".into(), "image_size=64".into()]).unwrap();
        assert_eq!(c.train.lr(), 1e-5);
        assert_eq!(c.gaze.global_size, 64);
        assert_ne!(c.hash(), RunConfig::default().hash());
        assert!(c.apply_overrides(&["oops".into()]).is_err());
    }

    #[test]
    fn gaze_trainer_rates() {
        let mut c = RunConfig::default();
        assert_eq!(c.train.for_gaze().lr(), c.train.gaze_lr_desk);
        assert_eq!(c.train.lr(), c.train.lr_desk);
        c.train.lr_choice = LrChoice::Reference;
        assert_eq!(c.train.for_gaze().lr(), c.train.lr_reference);
        c.train.gaze_grip_jitter_deg = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("train.gaze_grip_jitter_deg"));
    }

    #[test]
    fn validation_names_key() {
        let mut c = RunConfig::default();
        c.train.train_fraction = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("train.train_fraction"));
        let mut c = RunConfig::default();
        c.model.fovea_size = 128;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_is_hex_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
