//! Parameter storage and the layers the models are assembled from.

use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// Identifies one parameter inside one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u32,
    index: u32,
}

/// Named parameters in registration order. The order is part of the
/// checkpoint format. Clones share ids with the original, so the same layer
/// handles work on a copy.
#[derive(Clone, Debug)]
pub struct ParamStore {
    id: u32,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let t = if t.requires_grad() { t } else { t.with_grad() };
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId {
            store: self.id,
            index: (self.tensors.len() - 1) as u32,
        }
    }

    fn check(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.id, "parameter belongs to another store");
        id.index as usize
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[self.check(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        let i = self.check(id);
        &mut self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Euclidean norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Flat copy of every parameter value, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Replaces parameter values, keeping the registered shapes.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for ((name, t), (own_name, own)) in named.into_iter().zip(self.names.iter().zip(&mut self.tensors)) {
            if &name != own_name || t.shape() != own.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} {:?} does not match {own_name} {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
            own.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Kaiming-uniform initialization with negative slope √5:
/// U(−b, b) with b = sqrt(6 / ((1 + 5)·fan_in)) = 1 / sqrt(fan_in).
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches element count")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(&[inputs, outputs], inputs, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        tape.linear(x, w, Some(b))
    }

    pub fn num_params(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    /// Zeroes weight and bias, making the layer output identically zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.weight, self.bias] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain)?;
        let b = tape.param(store, self.bias)?;
        tape.layer_norm(x, g, b)
    }
}

/// Normalized x and y coordinate planes, `[2, h, w]` row-major, spanning
/// [−1, 1] across each axis.
pub fn coord_planes(h: usize, w: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(2 * h * w);
    for _y in 0..h {
        data.extend((0..w).map(|x| coord(x, w)));
    }
    for y in 0..h {
        data.extend(std::iter::repeat_n(coord(y, h), w));
    }
    data
}

/// Stack of conv blocks: 3×3 conv (stride 1, padding 1) → ReLU → 2×2 max-pool.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub blocks: Vec<(ParamId, ParamId)>,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    /// Every block input gets two extra coordinate channels.
    pub coord_planes: bool,
}

impl ConvStack {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, channels: &[usize], rng: &mut impl Rng) -> Self {
        Self::build(store, name, in_channels, channels, false, rng)
    }

    /// Like [`ConvStack::new`], with [`coord_planes`] appended to the input of
    /// every block.
    pub fn with_coord_planes(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        Self::build(store, name, in_channels, channels, true, rng)
    }

    fn build(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        channels: &[usize],
        coord_planes: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let extra = if coord_planes { 2 } else { 0 };
        let mut blocks = Vec::with_capacity(channels.len());
        let mut cin = in_channels + extra;
        for (i, &cout) in channels.iter().enumerate() {
            let w = store.add(
                format!("{name}.{i}.weight"),
                kaiming_uniform(&[cout, cin, 3, 3], cin * 9, rng),
            );
            let b = store.add(format!("{name}.{i}.bias"), Tensor::zeros(&[cout]));
            blocks.push((w, b));
            cin = cout + extra;
        }
        ConvStack {
            blocks,
            in_channels,
            channels: channels.to_vec(),
            coord_planes,
        }
    }

    /// Spatial extent after all blocks, or `None` if some block would see an
    /// odd extent.
    pub fn output_extent(&self, mut extent: usize) -> Option<usize> {
        for _ in &self.channels {
            if extent == 0 || extent % 2 != 0 {
                return None;
            }
            extent /= 2;
        }
        Some(extent)
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    pub fn num_params(&self) -> usize {
        let extra = if self.coord_planes { 2 } else { 0 };
        let mut cin = self.in_channels + extra;
        let mut total = 0;
        for &c in &self.channels {
            total += c * cin * 9 + c;
            cin = c + extra;
        }
        total
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for &(w, b) in &self.blocks {
            if self.coord_planes {
                x = append_coord_planes(tape, x)?;
            }
            let wv = tape.param(store, w)?;
            let bv = tape.param(store, b)?;
            let y = tape.conv2d(x, wv, Some(bv), 1)?;
            let y = tape.relu(y)?;
            x = tape.max_pool_2x2(y)?;
        }
        Ok(x)
    }
}

/// `[B, C, H, W]` → `[B, C + 2, H, W]` with [`coord_planes`] appended.
fn append_coord_planes(tape: &mut Tape, x: Var) -> Result<Var> {
    let &[b, _, h, w] = tape.shape(x) else {
        return Err(Error::Dimension(format!(
            "coordinate planes need a [B, C, H, W] input, got {:?}",
            tape.shape(x)
        )));
    };
    let planes = coord_planes(h, w);
    let data = (0..b).flat_map(|_| planes.iter().copied()).collect();
    let c = tape.constant(&[b, 2, h, w], data)?;
    tape.concat(&[x, c], 1)
}

/// Multi-head self-attention with input/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, rng),
            heads,
        })
    }

    /// `x` is `[batch, seq, width]`. Returns the projected output (same shape)
    /// and the attention node, whose probabilities are `[batch, heads, seq, seq]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!("attention input {shape:?}")));
        }
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let attn = tape.attention(q, k, v, shape[0], self.heads)?;
        let out = self.output.forward(tape, store, attn)?;
        Ok((out, attn))
    }

    pub fn num_params(&self) -> usize {
        4 * self.query.num_params()
    }
}

/// Post-norm encoder layer: `LN(x + Attn(x))` then `LN(y + FFN(y))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ffn: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(EncoderLayer {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), width, ffn, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), ffn, width, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> Result<(Var, Var)> {
        let (a, attn) = self.attention.forward(tape, store, x)?;
        let mut rng = dropout;
        let a = match rng.as_mut() {
            Some((p, r)) => tape.dropout(a, *p, r)?,
            None => a,
        };
        let y = tape.add(x, a)?;
        let y = self.norm1.forward(tape, store, y)?;
        let f = self.ffn_in.forward(tape, store, y)?;
        let f = tape.relu(f)?;
        let f = self.ffn_out.forward(tape, store, f)?;
        let f = match rng.as_mut() {
            Some((p, r)) => tape.dropout(f, *p, r)?,
            None => f,
        };
        let z = tape.add(y, f)?;
        let z = self.norm2.forward(tape, store, z)?;
        Ok((z, attn))
    }

    pub fn num_params(width: usize, ffn: usize) -> usize {
        4 * (width * width + width) + 2 * 2 * width + (width * ffn + ffn) + (ffn * width + width)
    }
}
