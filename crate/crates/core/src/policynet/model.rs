//! Transformer policy and the two baselines.

use rand::RngCore;

use super::state::{tokenize_state, ACTION_DIM, OUTPUT_DIM, SEQ_LEN, STATE_DIM, TOKEN_DIM};
use crate::attnlab::AttentionStack;
use crate::diffcore::{derive_seed, seeded, ConvStack, EncoderLayer, Linear, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Weight of the gripper cross-entropy term in the imitation loss.
pub const GRIP_LOSS_WEIGHT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Transformer,
    Baseline,
    BaselineGap,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Transformer, Variant::Baseline, Variant::BaselineGap];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Transformer => "transformer",
            Variant::Baseline => "baseline",
            Variant::BaselineGap => "baseline-gap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Variant::Transformer),
            "baseline" => Ok(Variant::Baseline),
            "baseline-gap" | "baseline_gap" => Ok(Variant::BaselineGap),
            _ => Err(Error::Usage(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Hidden width of the output MLP (transformer, baseline) or of every
    /// hidden layer (baseline-gap).
    pub mlp_hidden: usize,
    pub fovea_size: usize,
    pub channels: Vec<usize>,
    pub dropout: f64,
    /// Per-dimension offset and scale of the action deltas. The network
    /// regresses `(delta − mean) / scale`; empty means identity.
    pub action_mean: Vec<f64>,
    pub action_scale: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Transformer,
            d_model: 64,
            layers: 3,
            heads: 4,
            ffn_dim: 256,
            mlp_hidden: 200,
            fovea_size: 32,
            channels: vec![8, 16, 16, 32, 64],
            dropout: 0.1,
            action_mean: Vec::new(),
            action_scale: Vec::new(),
        }
    }
}

fn conv_params(channels: &[usize]) -> usize {
    let mut cin = 3;
    let mut total = 0;
    for &c in channels {
        total += c * cin * 9 + c;
        cin = c;
    }
    total
}

impl ModelConfig {
    fn conv_extent(&self) -> Result<usize> {
        let mut e = self.fovea_size;
        for _ in &self.channels {
            if e == 0 || e % 2 != 0 {
                return Err(Error::Config(format!(
                    "fovea size {} is not divisible by 2^{}",
                    self.fovea_size,
                    self.channels.len()
                )));
            }
            e /= 2;
        }
        Ok(e)
    }

    fn image_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&3)
    }

    /// Network-space regression target for a raw action delta.
    pub fn normalize_action(&self, delta: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        if self.action_mean.is_empty() {
            return *delta;
        }
        std::array::from_fn(|k| (delta[k] - self.action_mean[k]) / self.action_scale[k])
    }

    /// Raw action delta for a network-space output.
    pub fn denormalize_action(&self, out: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        if self.action_mean.is_empty() {
            return *out;
        }
        std::array::from_fn(|k| out[k] * self.action_scale[k] + self.action_mean[k])
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("policy needs at least one conv block".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        match (self.action_mean.len(), self.action_scale.len()) {
            (0, 0) => {}
            (ACTION_DIM, ACTION_DIM) => {
                if self.action_mean.iter().any(|m| !m.is_finite())
                    || self.action_scale.iter().any(|&s| !(s.is_finite() && s > 0.0))
                {
                    return Err(Error::Config("action normalization must be finite with positive scales".into()));
                }
            }
            (m, s) => {
                return Err(Error::Config(format!(
                    "action normalization needs {ACTION_DIM} means and scales, got {m} and {s}"
                )))
            }
        }
        self.conv_extent()?;
        if self.variant == Variant::Transformer {
            if self.heads == 0 || self.d_model % self.heads != 0 {
                return Err(Error::Config(format!(
                    "d_model {} not divisible by {} heads",
                    self.d_model, self.heads
                )));
            }
            if self.image_channels() != self.d_model {
                return Err(Error::Config(format!(
                    "image embedding width {} differs from d_model {}",
                    self.image_channels(),
                    self.d_model
                )));
            }
            if self.layers == 0 || self.ffn_dim == 0 {
                return Err(Error::Config("transformer needs layers and an FFN width".into()));
            }
        }
        Ok(())
    }

    /// Width of the baseline's flattened conv features.
    pub fn flat_features(&self) -> Result<usize> {
        let e = self.conv_extent()?;
        Ok(self.image_channels() * e * e)
    }

    /// Exact trainable parameter count.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let conv = conv_params(&self.channels);
        let h = self.mlp_hidden;
        let head = h * OUTPUT_DIM + OUTPUT_DIM;
        Ok(conv
            + head
            + match self.variant {
                Variant::Transformer => {
                    let d = self.d_model;
                    TOKEN_DIM * d + d
                        + self.layers * EncoderLayer::num_params(d, self.ffn_dim)
                        + SEQ_LEN * d * h
                        + h
                }
                Variant::Baseline => (self.flat_features()? + STATE_DIM) * h + h,
                Variant::BaselineGap => (self.image_channels() + STATE_DIM) * h + h + 3 * (h * h + h),
            })
    }
}

/// Result of [`match_param_counts`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMatch {
    pub config: ModelConfig,
    pub reference_params: usize,
    pub target_params: usize,
    /// True when the relative difference is at most 5%.
    pub within_tolerance: bool,
}

pub const PARAM_MATCH_TOLERANCE: f64 = 0.05;

/// Picks the hidden width of `target` whose parameter count is closest to
/// that of `reference`.
pub fn match_param_counts(reference: &ModelConfig, target: &ModelConfig) -> Result<ParamMatch> {
    if reference.variant != Variant::Transformer {
        return Err(Error::Config("parameter matching reference must be the transformer".into()));
    }
    let want = reference.param_count()?;
    let count_at = |h: usize| {
        let mut c = target.clone();
        c.mlp_hidden = h;
        c.param_count()
    };
    let best = if target == reference {
        target.mlp_hidden
    } else {
        // counts grow strictly with the width: bisect for the first width at or above `want`
        let (mut lo, mut hi) = (1usize, 1usize);
        while count_at(hi)? < want {
            hi *= 2;
            if hi > 1 << 24 {
                return Err(Error::Config("no hidden width reaches the reference size".into()));
            }
        }
        while lo < hi {
            let mid = (lo + hi) / 2;
            if count_at(mid)? < want {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        if lo > 1 && want.abs_diff(count_at(lo - 1)?) <= want.abs_diff(count_at(lo)?) {
            lo - 1
        } else {
            lo
        }
    };
    let mut config = target.clone();
    config.mlp_hidden = best;
    let got = config.param_count()?;
    Ok(ParamMatch {
        config,
        reference_params: want,
        target_params: got,
        within_tolerance: want.abs_diff(got) as f64 / want as f64 <= PARAM_MATCH_TOLERANCE,
    })
}

/// Predicted action: 14 deltas `[left(7), right(7)]` and two gripper logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyOutput {
    pub delta: [f64; ACTION_DIM],
    pub grip_logits: [f64; 2],
}

impl PolicyOutput {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != OUTPUT_DIM {
            return Err(Error::Dimension(format!("policy output has {} values", v.len())));
        }
        let mut delta = [0.0; ACTION_DIM];
        delta.copy_from_slice(&v[..ACTION_DIM]);
        Ok(PolicyOutput {
            delta,
            grip_logits: [v[14], v[15]],
        })
    }
}

/// One policy input: the foveated crop `[3, f, f]` in [0, 1] and the state.
#[derive(Clone, Debug)]
pub struct PolicyInput<'a> {
    pub fovea: &'a Tensor,
    pub state: [f64; STATE_DIM],
}

#[derive(Clone, Debug)]
enum Arch {
    Transformer {
        proj: Linear,
        layers: Vec<EncoderLayer>,
        hidden: Linear,
        out: Linear,
    },
    Baseline {
        hidden: Linear,
        out: Linear,
    },
    BaselineGap {
        fcs: Vec<Linear>,
    },
}

/// Graph nodes of one batched forward pass.
pub struct Forward {
    /// `[B, 16]`.
    pub output: Var,
    /// Attention nodes per encoder layer (transformer only).
    pub attention: Vec<Var>,
    /// Encoder output `[B, 23, d_model]` (transformer only).
    pub encoded: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    conv: ConvStack,
    arch: Arch,
}

impl PolicyNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive_seed(seed, 0x9011));
        let mut store = ParamStore::new();
        let conv = ConvStack::new(&mut store, "policy.conv", 3, &config.channels, &mut rng);
        let h = config.mlp_hidden;
        let arch = match config.variant {
            Variant::Transformer => {
                let d = config.d_model;
                let proj = Linear::new(&mut store, "policy.token_proj", TOKEN_DIM, d, &mut rng);
                let layers = (0..config.layers)
                    .map(|i| {
                        EncoderLayer::new(
                            &mut store,
                            &format!("policy.encoder.{i}"),
                            d,
                            config.heads,
                            config.ffn_dim,
                            &mut rng,
                        )
                    })
                    .collect::<Result<_>>()?;
                Arch::Transformer {
                    proj,
                    layers,
                    hidden: Linear::new(&mut store, "policy.mlp.hidden", SEQ_LEN * d, h, &mut rng),
                    out: Linear::new(&mut store, "policy.mlp.out", h, OUTPUT_DIM, &mut rng),
                }
            }
            Variant::Baseline => Arch::Baseline {
                hidden: Linear::new(&mut store, "policy.mlp.hidden", config.flat_features()? + STATE_DIM, h, &mut rng),
                out: Linear::new(&mut store, "policy.mlp.out", h, OUTPUT_DIM, &mut rng),
            },
            Variant::BaselineGap => {
                let widths = [config.image_channels() + STATE_DIM, h, h, h, h, OUTPUT_DIM];
                Arch::BaselineGap {
                    fcs: widths
                        .windows(2)
                        .enumerate()
                        .map(|(i, w)| Linear::new(&mut store, &format!("policy.fc.{i}"), w[0], w[1], &mut rng))
                        .collect(),
                }
            }
        };
        let net = PolicyNet {
            config,
            store,
            conv,
            arch,
        };
        debug_assert_eq!(net.store.num_params(), net.config.param_count()?);
        Ok(net)
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Zeroes the last layer so every output is exactly zero.
    pub fn zero_head(&mut self) {
        let last = match &self.arch {
            Arch::Transformer { out, .. } | Arch::Baseline { out, .. } => out,
            Arch::BaselineGap { fcs } => fcs.last().expect("five layers"),
        };
        last.zero(&mut self.store);
    }

    /// Zeroes the shared token projection (transformer only).
    pub fn zero_token_projection(&mut self) {
        if let Arch::Transformer { proj, .. } = &self.arch {
            proj.zero(&mut self.store);
        }
    }

    /// Records the batched forward pass. Dropout is applied only when `train`
    /// carries a generator and the configured rate is positive.
    pub fn forward(&self, tape: &mut Tape, inputs: &[PolicyInput], mut train: Option<&mut Rng>) -> Result<Forward> {
        let b = inputs.len();
        if b == 0 {
            return Err(Error::Dimension("empty policy batch".into()));
        }
        let f = self.config.fovea_size;
        let mut images = Vec::with_capacity(b * 3 * f * f);
        for inp in inputs {
            if inp.fovea.shape() != [3, f, f] {
                return Err(Error::Config(format!(
                    "policy expects a 3×{f}×{f} fovea, got {:?}",
                    inp.fovea.shape()
                )));
            }
            images.extend_from_slice(inp.fovea.data());
        }
        let x = tape.leaf(&Tensor::new(&[b, 3, f, f], images)?, false)?;
        let feat = self.conv.forward(tape, &self.store, x)?;
        let states: Vec<f64> = inputs.iter().flat_map(|i| i.state).collect();
        let mut attention = Vec::new();
        let mut encoded = None;
        let output = match &self.arch {
            Arch::Transformer {
                proj,
                layers,
                hidden,
                out,
            } => {
                let d = self.config.d_model;
                let img = tape.global_avg_pool(feat)?;
                let img = tape.reshape(img, &[b, 1, d])?;
                let tokens: Vec<f64> = inputs.iter().flat_map(|i| tokenize_state(&i.state)).collect();
                let tokens = tape.constant(&[b, STATE_DIM, TOKEN_DIM], tokens)?;
                let emb = proj.forward(tape, &self.store, tokens)?;
                let mut seq = tape.concat(&[img, emb], 1)?;
                let p = self.config.dropout;
                for layer in layers {
                    let drop = match train.as_deref_mut() {
                        Some(r) if p > 0.0 => Some((p, r as &mut dyn RngCore)),
                        _ => None,
                    };
                    let (z, a) = layer.forward(tape, &self.store, seq, drop)?;
                    seq = z;
                    attention.push(a);
                }
                encoded = Some(seq);
                let flat = tape.reshape(seq, &[b, SEQ_LEN * d])?;
                let h = hidden.forward(tape, &self.store, flat)?;
                let h = tape.relu(h)?;
                out.forward(tape, &self.store, h)?
            }
            Arch::Baseline { hidden, out } => {
                let n = self.config.flat_features()?;
                let flat = tape.reshape(feat, &[b, n])?;
                let s = tape.constant(&[b, STATE_DIM], states)?;
                let h = tape.concat(&[flat, s], 1)?;
                let h = hidden.forward(tape, &self.store, h)?;
                let h = tape.relu(h)?;
                out.forward(tape, &self.store, h)?
            }
            Arch::BaselineGap { fcs } => {
                let img = tape.global_avg_pool(feat)?;
                let s = tape.constant(&[b, STATE_DIM], states)?;
                let mut h = tape.concat(&[img, s], 1)?;
                for (i, fc) in fcs.iter().enumerate() {
                    h = fc.forward(tape, &self.store, h)?;
                    if i + 1 < fcs.len() {
                        h = tape.relu(h)?;
                    }
                }
                h
            }
        };
        Ok(Forward {
            output,
            attention,
            encoded,
        })
    }

    /// Head-averaged attention stacks, one per batch element.
    pub fn attention_stacks(&self, tape: &Tape, fwd: &Forward) -> Result<Vec<AttentionStack>> {
        if fwd.attention.is_empty() {
            return Ok(Vec::new());
        }
        let per_layer: Vec<Tensor> = fwd
            .attention
            .iter()
            .map(|&a| tape.attention_probs(a).ok_or_else(|| Error::Usage("not an attention node".into())))
            .collect::<Result<_>>()?;
        let &[b, heads, t, _] = per_layer[0].shape() else {
            return Err(Error::Dimension("attention probabilities must be 4-d".into()));
        };
        (0..b)
            .map(|bi| {
                let layers = per_layer
                    .iter()
                    .map(|p| {
                        let mut avg = vec![0.0; t * t];
                        for h in 0..heads {
                            let off = (bi * heads + h) * t * t;
                            for (a, v) in avg.iter_mut().zip(&p.data()[off..off + t * t]) {
                                *a += v / heads as f64;
                            }
                        }
                        avg
                    })
                    .collect();
                AttentionStack::new(t, layers)
            })
            .collect()
    }

    /// Inference without dropout. Deltas are mapped back to raw units.
    pub fn predict(&self, inputs: &[PolicyInput]) -> Result<Vec<(PolicyOutput, Option<AttentionStack>)>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, inputs, None)?;
        let stacks = self.attention_stacks(&tape, &fwd)?;
        let mut stacks = stacks.into_iter();
        tape.data(fwd.output)
            .chunks(OUTPUT_DIM)
            .map(|row| {
                let mut out = PolicyOutput::from_slice(row)?;
                out.delta = self.config.denormalize_action(&out.delta);
                Ok((out, stacks.next()))
            })
            .collect()
    }
}

/// `MSE(delta) + 0.01 · BCE(grip logits)` averaged over the batch.
pub fn behavior_clone_loss(tape: &mut Tape, output: Var, deltas: &[[f64; ACTION_DIM]], flags: &[[f64; 2]]) -> Result<Var> {
    let b = deltas.len();
    if tape.shape(output) != [b, OUTPUT_DIM] || flags.len() != b {
        return Err(Error::Dimension(format!(
            "output {:?} for {b} targets and {} flags",
            tape.shape(output),
            flags.len()
        )));
    }
    let pred = tape.slice(output, 1, 0, ACTION_DIM)?;
    let target = tape.constant(&[b, ACTION_DIM], deltas.iter().flatten().copied().collect())?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    let mse = tape.mean_all(sq)?;
    let logits = tape.slice(output, 1, ACTION_DIM, 2)?;
    let bce = tape.bce_with_logits(logits, &flags.iter().flatten().copied().collect::<Vec<_>>())?;
    let bce = tape.scale(bce, GRIP_LOSS_WEIGHT)?;
    tape.add(mse, bce)
}
