//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. Nodes only ever
//! reference earlier nodes, so reverse iteration over the tape is a valid
//! topological order for the backward pass.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, gemm, View};
use super::nn::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: Var,
        n: usize,
    },
    LogSoftmax {
        x: Var,
        n: usize,
    },
    LogSumExp {
        x: Var,
        n: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Slice {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
        stride: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
        plane: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        d: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of forward operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_cache: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was on the path.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.node_grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's buffers. Parameters not on
    /// the loss path receive nothing, so their (zeroed) buffers stay zero.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                let t = store.get_mut(id);
                if let Some(dst) = t.grad_mut() {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / last.max(1), last)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    /// Per-head attention probabilities `[batch, heads, seq, seq]` stored by an
    /// [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention {
                batch,
                seq,
                heads,
                probs,
                ..
            } => Some(
                Tensor::new(&[*batch, *heads, *seq, *seq], probs.clone())
                    .expect("attention probs are well formed"),
            ),
            _ => None,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{name} (value {bad})")));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (or tracked, when `track` is set) input.
    pub fn leaf(&mut self, t: &Tensor, track: bool) -> Result<Var> {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, track)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "constant of shape {shape:?} with {} values",
                data.len()
            )));
        }
        self.push("constant", shape.to_vec(), data, Op::Leaf, false)
    }

    /// Loads a parameter. Repeated loads of the same id return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(&id) {
            return Ok(v);
        }
        let t = store.get(id);
        let v = self.push("param", t.shape().to_vec(), t.data().to_vec(), Op::Param, true)?;
        self.params.push((id, v));
        self.param_cache.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, needs)
    }

    /// `x[..., k] · w[k, n] + b[n]` applied over all leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (rows, k) = rows_of(&sx);
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::Dimension(format!("linear: input {sx:?}, weight {sw:?}")));
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::Dimension(format!(
                    "linear: bias {:?} for {n} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut out = kernels::matmul(self.data(x), self.data(w), rows, k, n);
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("linear", shape, out, Op::Linear { x, w, b, rows, k, n }, needs)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(name, self.shape(a).to_vec(), out, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, name: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        self.push(name, self.shape(x).to_vec(), out, op, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "add_scalar", |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log", f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, "clamp", |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = rows_of(self.shape(x));
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let needs = self.needs(x);
        self.push("softmax", self.shape(x).to_vec(), out, Op::Softmax { x, n }, needs)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = rows_of(self.shape(x));
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let needs = self.needs(x);
        self.push("log_softmax", self.shape(x).to_vec(), out, Op::LogSoftmax { x, n }, needs)
    }

    /// Log-sum-exp over the last axis; the axis is removed.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, n) = rows_of(&shape);
        let out: Vec<f64> = self.data(x).chunks(n).map(logsumexp).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(x);
        self.push("logsumexp", out_shape, out, Op::LogSumExp { x, n }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push("sum", vec![1], vec![s], Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let needs = self.needs(x);
        self.push("mean", vec![1], vec![s], Op::MeanAll(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), needs)
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, axis_len, inner) = Self::axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_len * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(x);
        self.push(
            "slice",
            out_shape,
            out,
            Op::Slice {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
            needs,
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!("concat axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension(format!("concat {s:?} with {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = Self::axis_split(&first, axis);
        let widths: Vec<(Var, usize)> = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, w) in &widths {
                let src = self.data(p);
                out.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat",
            out_shape,
            out,
            Op::Concat {
                parts: widths,
                outer,
                inner,
            },
            needs,
        )
    }

    /// 3×3 cross-correlation with padding 1 over `[C,H,W]` or `[N,C,H,W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("conv2d stride {stride} (must be 1 or 2)")));
        }
        let (batch, cin, h, wd) = match sx.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(Error::Dimension(format!("conv2d input {sx:?}"))),
        };
        if sw.len() != 4 || sw[1] != cin || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::Dimension(format!(
                "conv2d weight {sw:?} for {cin} input channels (expects [out, {cin}, 3, 3])"
            )));
        }
        let cout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Dimension(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let (ho, wo) = (kernels::conv_out(h, stride), kernels::conv_out(wd, stride));
        let plane = ho * wo;
        let kdim = cin * 9;
        let mut out = vec![0.0; batch * cout * plane];
        let mut cols = vec![0.0; kdim * plane];
        let xs = self.data(x);
        let ws = self.data(w);
        for n in 0..batch {
            kernels::im2col(&xs[n * cin * h * wd..(n + 1) * cin * h * wd], cin, h, wd, stride, &mut cols);
            gemm(
                cout,
                kdim,
                plane,
                1.0,
                View::rows(ws, kdim),
                View::rows(&cols, plane),
                0.0,
                &mut out,
                n * cout * plane,
                plane,
            );
        }
        if let Some(b) = b {
            let bias = self.data(b);
            for img in out.chunks_mut(cout * plane) {
                for (c, ch) in img.chunks_mut(plane).enumerate() {
                    ch.iter_mut().for_each(|v| *v += bias[c]);
                }
            }
        }
        let shape = if sx.len() == 3 {
            vec![cout, ho, wo]
        } else {
            vec![batch, cout, ho, wo]
        };
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            "conv2d",
            shape,
            out,
            Op::Conv2d {
                x,
                w,
                b,
                batch,
                cin,
                h,
                wd,
                cout,
                stride,
            },
            needs,
        )
    }

    /// 2×2 max pooling with stride 2 over the last two axes.
    pub fn max_pool_2x2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 3 {
            return Err(Error::Dimension(format!("max_pool_2x2 input {sx:?}")));
        }
        let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("max_pool_2x2 needs even extents, got {h}x{w}")));
        }
        let planes: usize = sx[..sx.len() - 2].iter().product();
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = sx;
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let needs = self.needs(x);
        self.push("max_pool_2x2", shape, out, Op::MaxPool { x, argmax }, needs)
    }

    /// Mean over the last two axes: `[..., H, W] -> [...]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 3 {
            return Err(Error::Dimension(format!("global_avg_pool input {sx:?}")));
        }
        let plane = sx[sx.len() - 2] * sx[sx.len() - 1];
        let out: Vec<f64> = self
            .data(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let shape = sx[..sx.len() - 2].to_vec();
        let needs = self.needs(x);
        self.push("global_avg_pool", shape, out, Op::GlobalAvgPool { x, plane }, needs)
    }

    /// Layer normalization over the last axis (population variance, eps 1e-5).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (_, d) = rows_of(&sx);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!("layer_norm affine for width {d}")));
        }
        let src = self.data(x);
        let g = self.data(gain);
        let bv = self.data(bias);
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(src.len() / d);
        for (r, row) in src.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            sx,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Scaled dot-product attention over per-head slices of `q`, `k`, `v`,
    /// each laid out as `[batch·seq, heads·head_dim]`. Returns the
    /// concatenated head outputs in the same layout; probabilities (rows =
    /// queries) are kept on the node, see [`Tape::attention_probs`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, d) = rows_of(&sq);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
        }
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Dimension(format!("{rows} rows for batch {batch}")));
        }
        let seq = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    View::rows(qd, d).at(off),
                    View::transposed(kd, d).at(off),
                    0.0,
                    &mut probs,
                    p_off,
                    seq,
                );
                for row in probs[p_off..p_off + seq * seq].chunks_mut(seq) {
                    softmax_in_place(row);
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    1.0,
                    View::rows(&probs, seq).at(p_off),
                    View::rows(vd, d).at(off),
                    0.0,
                    &mut out,
                    off,
                    d,
                );
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            sq,
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            needs,
        )
    }

    /// Inverted dropout: zeroes elements with probability `p` and rescales the rest.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p}")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let needs = self.needs(x);
        self.push("dropout", self.shape(x).to_vec(), out, Op::Dropout { x, mask }, needs)
    }

    /// Mean binary cross-entropy of `logits` against constant 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let l = self.data(logits);
        if l.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "bce: {} logits, {} targets",
                l.len(),
                targets.len()
            )));
        }
        let loss = l
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / l.len() as f64;
        let needs = self.needs(logits);
        self.push(
            "bce_with_logits",
            vec![1],
            vec![loss],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            node_grads: grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.data;
        // Accumulates `f(i)` for every element of `v`'s gradient.
        macro_rules! acc {
            ($v:expr, |$i:tt| $f:expr) => {{
                let v: Var = $v;
                if self.needs(v) {
                    let len = self.nodes[v.0].data.len();
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                    for ($i, slot) in buf.iter_mut().enumerate() {
                        *slot += $f;
                    }
                }
            }};
        }
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].data.len();
                grads[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let bd = self.data(b);
                    gemm(m, n, k, 1.0, View::rows(g, n), View::transposed(bd, n), 1.0, buf!(a), 0, k);
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    gemm(k, m, n, 1.0, View::transposed(ad, k), View::rows(g, n), 1.0, buf!(b), 0, n);
                }
            }
            &Op::Linear { x, w, b, rows, k, n } => {
                if self.needs(x) {
                    let wd = self.data(w);
                    gemm(rows, n, k, 1.0, View::rows(g, n), View::transposed(wd, n), 1.0, buf!(x), 0, k);
                }
                if self.needs(w) {
                    let xd = self.data(x);
                    gemm(k, rows, n, 1.0, View::transposed(xd, k), View::rows(g, n), 1.0, buf!(w), 0, n);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let db = buf!(b);
                        for row in g.chunks(n) {
                            for (d, s) in db.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                acc!(a, |i| g[i]);
                acc!(b, |i| g[i]);
            }
            &Op::Sub(a, b) => {
                acc!(a, |i| g[i]);
                acc!(b, |i| -g[i]);
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc!(a, |i| g[i] * bd[i]);
                acc!(b, |i| g[i] * ad[i]);
            }
            &Op::Div(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc!(a, |i| g[i] / bd[i]);
                acc!(b, |i| -g[i] * ad[i] / (bd[i] * bd[i]));
            }
            &Op::Scale(x, c) => acc!(x, |i| g[i] * c),
            &Op::AddScalar(x) | &Op::Reshape(x) => acc!(x, |i| g[i]),
            &Op::Relu(x) => acc!(x, |i| if out[i] > 0.0 { g[i] } else { 0.0 }),
            &Op::Tanh(x) => acc!(x, |i| g[i] * (1.0 - out[i] * out[i])),
            &Op::Sigmoid(x) => acc!(x, |i| g[i] * out[i] * (1.0 - out[i])),
            &Op::Exp(x) => acc!(x, |i| g[i] * out[i]),
            &Op::Log(x) => {
                let xd = self.data(x);
                acc!(x, |i| g[i] / xd[i]);
            }
            &Op::Square(x) => {
                let xd = self.data(x);
                acc!(x, |i| 2.0 * xd[i] * g[i]);
            }
            &Op::Clamp { x, lo, hi } => {
                let xd = self.data(x);
                acc!(x, |i| if xd[i] > lo && xd[i] < hi { g[i] } else { 0.0 });
            }
            &Op::Softmax { x, n } => {
                if self.needs(x) {
                    let dx = buf!(x);
                    for ((y, gy), d) in out.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { x, n } => {
                if self.needs(x) {
                    let dx = buf!(x);
                    for ((y, gy), d) in out.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let total: f64 = gy.iter().sum();
                        for j in 0..n {
                            d[j] += gy[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            &Op::LogSumExp { x, n } => {
                if self.needs(x) {
                    let xd = self.data(x);
                    let dx = buf!(x);
                    for (r, (xr, d)) in xd.chunks(n).zip(dx.chunks_mut(n)).enumerate() {
                        for j in 0..n {
                            d[j] += g[r] * (xr[j] - out[r]).exp();
                        }
                    }
                }
            }
            &Op::SumAll(x) => acc!(x, |_| g[0]),
            &Op::MeanAll(x) => {
                let len = self.data(x).len() as f64;
                acc!(x, |_| g[0] / len);
            }
            &Op::Slice {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => {
                if self.needs(x) {
                    let dx = buf!(x);
                    for o in 0..outer {
                        let dst = o * axis_len * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            dx[dst + j] += g[src + j];
                        }
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut col = 0;
                for &(p, w) in parts {
                    if self.needs(p) {
                        let dp = buf!(p);
                        for o in 0..*outer {
                            let src = (o * total + col) * inner;
                            let dst = o * w * inner;
                            for j in 0..w * inner {
                                dp[dst + j] += g[src + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            &Op::Conv2d {
                x,
                w,
                b,
                batch,
                cin,
                h,
                wd,
                cout,
                stride,
            } => {
                let (ho, wo) = (kernels::conv_out(h, stride), kernels::conv_out(wd, stride));
                let plane = ho * wo;
                let kdim = cin * 9;
                let xs = self.data(x);
                let ws = self.data(w);
                let mut cols = vec![0.0; kdim * plane];
                let mut dcols = vec![0.0; kdim * plane];
                let need_x = self.needs(x);
                let need_w = self.needs(w);
                for n in 0..batch {
                    let gn = &g[n * cout * plane..(n + 1) * cout * plane];
                    if need_w {
                        kernels::im2col(&xs[n * cin * h * wd..(n + 1) * cin * h * wd], cin, h, wd, stride, &mut cols);
                        gemm(
                            cout,
                            plane,
                            kdim,
                            1.0,
                            View::rows(gn, plane),
                            View::transposed(&cols, plane),
                            1.0,
                            buf!(w),
                            0,
                            kdim,
                        );
                    }
                    if need_x {
                        gemm(
                            kdim,
                            cout,
                            plane,
                            1.0,
                            View::transposed(ws, kdim),
                            View::rows(gn, plane),
                            0.0,
                            &mut dcols,
                            0,
                            plane,
                        );
                        let dx = buf!(x);
                        kernels::col2im(
                            &dcols,
                            cin,
                            h,
                            wd,
                            stride,
                            &mut dx[n * cin * h * wd..(n + 1) * cin * h * wd],
                        );
                    }
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let db = buf!(b);
                        for img in g.chunks(cout * plane) {
                            for (c, ch) in img.chunks(plane).enumerate() {
                                db[c] += ch.iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let dx = buf!(*x);
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                }
            }
            &Op::GlobalAvgPool { x, plane } => {
                let inv = 1.0 / plane as f64;
                acc!(x, |i| g[i / plane] * inv);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                if self.needs(*gain) {
                    let dg = buf!(*gain);
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if self.needs(*bias) {
                    let db = buf!(*bias);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let gv = self.data(*gain);
                    let dx = buf!(*x);
                    for (r, ((gr, xr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dr[j] += rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *batch, *seq, *heads, probs, g, grads),
            Op::Dropout { x, mask } => acc!(*x, |i| g[i] * mask[i]),
            Op::BceWithLogits { logits, targets } => {
                let l = self.data(*logits);
                let inv = 1.0 / l.len() as f64;
                acc!(*logits, |i| g[0] * (sigmoid(l[i]) - targets[i]) * inv);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = *self.shape(q).last().unwrap();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let rows = batch * seq;
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut ds = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                let p = &probs[p_off..p_off + seq * seq];
                // dV = Pᵀ·dO
                gemm(seq, seq, dh, 1.0, View::transposed(p, seq), View::rows(g, d).at(off), 0.0, &mut dv, off, d);
                // dP = dO·Vᵀ
                gemm(seq, dh, seq, 1.0, View::rows(g, d).at(off), View::transposed(vd, d).at(off), 0.0, &mut ds, 0, seq);
                for (pr, dr) in p.chunks(seq).zip(ds.chunks_mut(seq)) {
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                gemm(seq, seq, dh, 1.0, View::rows(&ds, seq), View::rows(kd, d).at(off), 0.0, &mut dq, off, d);
                gemm(seq, seq, dh, 1.0, View::transposed(&ds, seq), View::rows(qd, d).at(off), 0.0, &mut dk, off, d);
            }
        }
        for (var, src) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                let len = self.nodes[var.0].data.len();
                let buf = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
                for (d, s) in buf.iter_mut().zip(&src) {
                    *d += s;
                }
            }
        }
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
