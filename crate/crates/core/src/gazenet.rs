//! Gaze prediction with a mixture density network.
//!
//! The network sees the global image (plus two coordinate channels) and both
//! gripper angles, and outputs a mixture of `N` bivariate Gaussians over the
//! gaze point in normalized image coordinates.

use std::f64::consts::PI;

use crate::diffcore::{derive_seed, seeded, ConvStack, Linear, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 7.0;
pub const RHO_SCALE: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct GazeConfig {
    pub global_size: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub components: usize,
    /// Append normalized x/y coordinate planes to the input of every conv
    /// block.
    pub coord_channels: bool,
}

impl Default for GazeConfig {
    fn default() -> Self {
        GazeConfig {
            global_size: 96,
            channels: vec![8, 16, 16, 32, 64],
            hidden: 128,
            components: 8,
            coord_channels: true,
        }
    }
}

impl GazeConfig {
    /// Raw output width: μ (2N), log σ (2N), ρ (N), logits (N).
    pub fn raw_outputs(&self) -> usize {
        6 * self.components
    }
}

/// Mixture parameters for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub mu: Vec<[f64; 2]>,
    pub sigma: Vec<[f64; 2]>,
    pub rho: Vec<f64>,
    pub p: Vec<f64>,
}

impl GmmParams {
    pub fn components(&self) -> usize {
        self.p.len()
    }

    /// Maps raw network outputs (layout of [`GazeConfig::raw_outputs`]) to
    /// valid mixture parameters.
    pub fn from_raw(raw: &[f64], n: usize) -> Result<Self> {
        if raw.len() != 6 * n || n == 0 {
            return Err(Error::Dimension(format!("{} raw values for {n} components", raw.len())));
        }
        let mu = (0..n).map(|i| [raw[i].tanh(), raw[n + i].tanh()]).collect();
        let sig = |v: f64| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp();
        let sigma = (0..n).map(|i| [sig(raw[2 * n + i]), sig(raw[3 * n + i])]).collect();
        let rho = (0..n).map(|i| RHO_SCALE * raw[4 * n + i].tanh()).collect();
        let logits = &raw[5 * n..6 * n];
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(GmmParams {
            mu,
            sigma,
            rho,
            p: e.into_iter().map(|v| v / z).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.p.len();
        if n == 0 || self.mu.len() != n || self.sigma.len() != n || self.rho.len() != n {
            return Err(Error::Dimension("inconsistent mixture component counts".into()));
        }
        for i in 0..n {
            let [sx, sy] = self.sigma[i];
            if !(sx > 0.0 && sy > 0.0 && sx.is_finite() && sy.is_finite()) {
                return Err(Error::Domain(format!("component {i} has sigma {sx}, {sy}")));
            }
            if !(self.rho[i].abs() < 1.0) {
                return Err(Error::Domain(format!("component {i} has rho {}", self.rho[i])));
            }
            if !(self.p[i] > 0.0) {
                return Err(Error::Domain(format!("component {i} has weight {}", self.p[i])));
            }
        }
        let total: f64 = self.p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("mixture weights sum to {total}")));
        }
        Ok(())
    }

    /// log N(e; μᵢ, Σᵢ) for component `i`.
    pub fn component_log_density(&self, i: usize, e: [f64; 2]) -> f64 {
        let [sx, sy] = self.sigma[i];
        let r = self.rho[i];
        let zx = (e[0] - self.mu[i][0]) / sx;
        let zy = (e[1] - self.mu[i][1]) / sy;
        let z = zx * zx - 2.0 * r * zx * zy + zy * zy;
        let one_m = 1.0 - r * r;
        -(2.0 * PI).ln() - (sx * sy).ln() - 0.5 * one_m.ln() - z / (2.0 * one_m)
    }

    /// Mixture log-density at `e`.
    pub fn log_density(&self, e: [f64; 2]) -> f64 {
        let terms: Vec<f64> = (0..self.p.len())
            .map(|i| self.p[i].ln() + self.component_log_density(i, e))
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }
}

/// Negative log-likelihood of `target` under the mixture.
pub fn mdn_nll(params: &GmmParams, target: [f64; 2]) -> Result<f64> {
    params.validate()?;
    Ok(-params.log_density(target))
}

/// Mean of the most probable component. Ties go to the lowest index.
pub fn select_gaze(params: &GmmParams) -> [f64; 2] {
    let mut best = 0;
    for i in 1..params.p.len() {
        if params.p[i] > params.p[best] {
            best = i;
        }
    }
    params.mu[best]
}

/// Top-left pixel of a `fovea`-sized window centered on `gaze` along one axis.
pub fn fovea_origin(gaze: f64, size: usize, fovea: usize) -> usize {
    let center = (gaze + 1.0) / 2.0 * size as f64;
    let start = (center - fovea as f64 / 2.0).round();
    start.clamp(0.0, (size - fovea) as f64) as usize
}

/// Crops a `[C, H, W]` image around `gaze` (x first, then y).
pub fn crop_fovea(image: &Tensor, gaze: [f64; 2], fovea: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Dimension(format!("image shape {:?}", image.shape())));
    };
    if fovea == 0 || fovea > h || fovea > w {
        return Err(Error::Dimension(format!("fovea {fovea} does not fit a {h}×{w} image")));
    }
    let x0 = fovea_origin(gaze[0], w, fovea);
    let y0 = fovea_origin(gaze[1], h, fovea);
    let mut out = Vec::with_capacity(c * fovea * fovea);
    for ch in 0..c {
        for y in y0..y0 + fovea {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&image.data()[row + x0..row + x0 + fovea]);
        }
    }
    Tensor::new(&[c, fovea, fovea], out)
}

/// Differentiable mean mixture NLL over a batch of raw outputs `[B, 6N]`.
pub fn mdn_nll_tape(tape: &mut Tape, raw: Var, targets: &[[f64; 2]], n: usize) -> Result<Var> {
    let shape = tape.shape(raw).to_vec();
    if shape.len() != 2 || shape[1] != 6 * n || shape[0] != targets.len() {
        return Err(Error::Dimension(format!(
            "raw outputs {shape:?} for {} targets and {n} components",
            targets.len()
        )));
    }
    let b = shape[0];
    let part = |tape: &mut Tape, k: usize| tape.slice(raw, 1, k * n, n);
    let mux = part(tape, 0)?;
    let mux = tape.tanh(mux)?;
    let muy = part(tape, 1)?;
    let muy = tape.tanh(muy)?;
    let lsx = part(tape, 2)?;
    let lsx = tape.clamp(lsx, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    let lsy = part(tape, 3)?;
    let lsy = tape.clamp(lsy, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    let rho = part(tape, 4)?;
    let rho = tape.tanh(rho)?;
    let rho = tape.scale(rho, RHO_SCALE)?;
    let logits = part(tape, 5)?;
    let logp = tape.log_softmax(logits)?;

    let spread = |k: usize| targets.iter().flat_map(|t| std::iter::repeat_n(t[k], n)).collect::<Vec<_>>();
    let ex = tape.constant(&[b, n], spread(0))?;
    let ey = tape.constant(&[b, n], spread(1))?;
    let sx = tape.exp(lsx)?;
    let sy = tape.exp(lsy)?;
    let dx = tape.sub(ex, mux)?;
    let zx = tape.div(dx, sx)?;
    let dy = tape.sub(ey, muy)?;
    let zy = tape.div(dy, sy)?;
    let zx2 = tape.square(zx)?;
    let zy2 = tape.square(zy)?;
    let cross = tape.mul(zx, zy)?;
    let cross = tape.mul(cross, rho)?;
    let cross = tape.scale(cross, -2.0)?;
    let z = tape.add(zx2, zy2)?;
    let z = tape.add(z, cross)?;
    let r2 = tape.square(rho)?;
    let one_m = tape.scale(r2, -1.0)?;
    let one_m = tape.add_scalar(one_m, 1.0)?;
    let quad = tape.div(z, one_m)?;
    let quad = tape.scale(quad, -0.5)?;
    let log_det = tape.log(one_m)?;
    let log_det = tape.scale(log_det, -0.5)?;
    let mut logn = tape.add(quad, log_det)?;
    logn = tape.sub(logn, lsx)?;
    logn = tape.sub(logn, lsy)?;
    logn = tape.add_scalar(logn, -(2.0 * PI).ln())?;
    let joint = tape.add(logn, logp)?;
    let ll = tape.logsumexp(joint)?;
    let mean = tape.mean_all(ll)?;
    tape.scale(mean, -1.0)
}

/// One network input: image `[3, H, W]` in [0, 1] and the two gripper angles.
#[derive(Clone, Debug)]
pub struct GazeInput<'a> {
    pub image: &'a Tensor,
    pub grippers: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct GazeNet {
    pub config: GazeConfig,
    pub store: ParamStore,
    pub conv: ConvStack,
    pub hidden: Linear,
    pub head: Linear,
}

impl GazeNet {
    pub fn new(config: GazeConfig, seed: u64) -> Result<Self> {
        if config.components == 0 || config.channels.is_empty() {
            return Err(Error::Config("gaze net needs components and conv channels".into()));
        }
        let mut rng = seeded(derive_seed(seed, 0x6A2E));
        let mut store = ParamStore::new();
        let conv = if config.coord_channels {
            ConvStack::with_coord_planes(&mut store, "gaze.conv", 3, &config.channels, &mut rng)
        } else {
            ConvStack::new(&mut store, "gaze.conv", 3, &config.channels, &mut rng)
        };
        if conv.output_extent(config.global_size).is_none() {
            return Err(Error::Config(format!(
                "global size {} is not divisible by 2^{}",
                config.global_size,
                config.channels.len()
            )));
        }
        let hidden = Linear::new(&mut store, "gaze.hidden", conv.out_channels() + 2, config.hidden, &mut rng);
        let head = Linear::new(&mut store, "gaze.head", config.hidden, config.raw_outputs(), &mut rng);
        Ok(GazeNet {
            config,
            store,
            conv,
            hidden,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Batched images with pixels shifted to [−0.5, 0.5], and gripper angles.
    fn stack_inputs(&self, inputs: &[GazeInput]) -> Result<(Tensor, Tensor)> {
        let g = self.config.global_size;
        let mut images = Vec::with_capacity(inputs.len() * 3 * g * g);
        let mut grips = Vec::with_capacity(inputs.len() * 2);
        for inp in inputs {
            if inp.image.shape() != [3, g, g] {
                return Err(Error::Dimension(format!(
                    "gaze net expects a 3×{g}×{g} image, got {:?}",
                    inp.image.shape()
                )));
            }
            images.extend(inp.image.data().iter().map(|v| v - 0.5));
            grips.extend_from_slice(&inp.grippers);
        }
        Ok((
            Tensor::new(&[inputs.len(), 3, g, g], images)?,
            Tensor::new(&[inputs.len(), 2], grips)?,
        ))
    }

    /// Raw outputs `[B, 6N]` recorded on `tape`.
    pub fn forward_raw(&self, tape: &mut Tape, inputs: &[GazeInput]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Dimension("empty gaze batch".into()));
        }
        let (images, grips) = self.stack_inputs(inputs)?;
        let x = tape.leaf(&images, false)?;
        let feat = self.conv.forward(tape, &self.store, x)?;
        let feat = tape.global_avg_pool(feat)?;
        let g = tape.leaf(&grips, false)?;
        let h = tape.concat(&[feat, g], 1)?;
        let h = self.hidden.forward(tape, &self.store, h)?;
        let h = tape.relu(h)?;
        self.head.forward(tape, &self.store, h)
    }

    /// Mixture parameters for each input.
    pub fn predict(&self, inputs: &[GazeInput]) -> Result<Vec<GmmParams>> {
        let mut tape = Tape::new();
        let raw = self.forward_raw(&mut tape, inputs)?;
        let n = self.config.components;
        tape.data(raw).chunks(6 * n).map(|r| GmmParams::from_raw(r, n)).collect()
    }

    /// Mean NLL over a batch, ready for `backward`.
    pub fn loss(&self, tape: &mut Tape, inputs: &[GazeInput], targets: &[[f64; 2]]) -> Result<Var> {
        let raw = self.forward_raw(tape, inputs)?;
        mdn_nll_tape(tape, raw, targets, self.config.components)
    }
}
