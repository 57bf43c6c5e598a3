//! Finite-difference checks of every differentiable op and of the full
//! models, shared by the `gradcheck` command and the test suites.

use crate::diffcore::gradcheck::{finite_diff_check, finite_diff_check_at, rel_error, FD_STEP};
use crate::diffcore::{seeded, uniform, EncoderLayer, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::gazenet::{mdn_nll_tape, GazeConfig, GazeInput, GazeNet};
use crate::policynet::{behavior_clone_loss, ModelConfig, PolicyInput, PolicyNet, Variant, ACTION_DIM, STATE_DIM};

/// Maximum relative error accepted by the suite.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, -1.0, 1.0, &mut seeded(seed))
}

type OpFn<'a> = dyn Fn(&mut Tape, Var) -> Result<Var> + 'a;

/// d(sum(f(x) ⊙ r))/dx against central differences, with a fixed random `r`.
fn check_op(x: &Tensor, seed: u64, f: &OpFn) -> Result<f64> {
    let probe = {
        let mut tape = Tape::new();
        let v = tape.leaf(x, false)?;
        let y = f(&mut tape, v)?;
        tape.value(y)
    };
    let r = rand_t(probe.shape(), seed ^ 0xABCD);
    let loss = |tape: &mut Tape, v: Var| -> Result<Var> {
        let y = f(tape, v)?;
        let rv = tape.leaf(&r, false)?;
        let p = tape.mul(y, rv)?;
        tape.sum_all(p)
    };
    let mut value = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t, false)?;
        let l = loss(&mut tape, v)?;
        Ok(tape.scalar(l))
    };
    let mut grad = |t: &Tensor| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = tape.leaf(t, true)?;
        let l = loss(&mut tape, v)?;
        let g = tape.backward(l)?;
        Ok(g.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
    };
    finite_diff_check(&mut value, &mut grad, x)
}

struct Acc(Vec<CheckResult>);

impl Acc {
    fn record(&mut self, name: &str, err: f64) {
        match self.0.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                c.points += 1;
                c.max_rel_error = c.max_rel_error.max(err);
            }
            None => self.0.push(CheckResult {
                name: name.into(),
                points: 1,
                max_rel_error: err,
            }),
        }
    }
}

fn elementwise_ops(acc: &mut Acc, seed: u64) -> Result<()> {
    let x = uniform(&[3, 4], 0.2, 2.0, &mut seeded(100 + seed));
    let other = uniform(&[3, 4], 0.5, 1.5, &mut seeded(200 + seed));
    let cases: Vec<(&str, Box<OpFn>)> = vec![
        ("tanh", Box::new(|t, v| t.tanh(v))),
        ("sigmoid", Box::new(|t, v| t.sigmoid(v))),
        ("exp", Box::new(|t, v| t.exp(v))),
        ("log", Box::new(|t, v| t.log(v))),
        ("square", Box::new(|t, v| t.square(v))),
        ("scale", Box::new(|t, v| t.scale(v, -1.7))),
        ("add_scalar", Box::new(|t, v| t.add_scalar(v, 0.3))),
        ("clamp", Box::new(|t, v| t.clamp(v, 0.1, 10.0))),
        ("softmax", Box::new(|t, v| t.softmax(v))),
        ("log_softmax", Box::new(|t, v| t.log_softmax(v))),
        ("logsumexp", Box::new(|t, v| t.logsumexp(v))),
        ("sum", Box::new(|t, v| t.sum_all(v))),
        ("mean", Box::new(|t, v| t.mean_all(v))),
        ("reshape", Box::new(|t, v| t.reshape(v, &[2, 6]))),
        ("slice", Box::new(|t, v| t.slice(v, 1, 1, 2))),
        (
            "concat",
            Box::new(|t, v| {
                let a = t.slice(v, 1, 0, 1)?;
                t.concat(&[v, a], 1)
            }),
        ),
        (
            "add",
            Box::new(|t, v| {
                let o = t.leaf(&other, false)?;
                t.add(v, o)
            }),
        ),
        (
            "div",
            Box::new(|t, v| {
                let o = t.leaf(&other, false)?;
                let a = t.div(v, o)?;
                let b = t.div(o, v)?;
                t.add(a, b)
            }),
        ),
        (
            "sub_mul",
            Box::new(|t, v| {
                let o = t.leaf(&other, false)?;
                let a = t.sub(v, o)?;
                t.mul(a, v)
            }),
        ),
        (
            "relu",
            Box::new(|t, v| {
                let s = t.add_scalar(v, -1.0)?;
                t.relu(s)
            }),
        ),
    ];
    for (name, f) in &cases {
        acc.record(name, check_op(&x, seed, f.as_ref())?);
    }
    Ok(())
}

fn structured_ops(acc: &mut Acc, seed: u64) -> Result<()> {
    let w = rand_t(&[4, 2, 3, 3], 300 + seed);
    let bias = rand_t(&[4], 350 + seed);
    let x = rand_t(&[2, 2, 6, 6], 400 + seed);
    acc.record(
        "conv2d input",
        check_op(&x, seed, &|t, v| {
            let wv = t.leaf(&w, false)?;
            let bv = t.leaf(&bias, false)?;
            t.conv2d(v, wv, Some(bv), 1)
        })?,
    );
    acc.record(
        "conv2d weight",
        check_op(&w, seed, &|t, wv| {
            let xv = t.leaf(&x, false)?;
            t.conv2d(xv, wv, None, 2)
        })?,
    );
    acc.record(
        "conv2d bias",
        check_op(&bias, seed, &|t, bv| {
            let xv = t.leaf(&x, false)?;
            let wv = t.leaf(&w, false)?;
            t.conv2d(xv, wv, Some(bv), 1)
        })?,
    );
    acc.record("max_pool_2x2", check_op(&x, seed, &|t, v| t.max_pool_2x2(v))?);
    acc.record("global_avg_pool", check_op(&x, seed, &|t, v| t.global_avg_pool(v))?);

    let a = rand_t(&[3, 5], 500 + seed);
    let b = rand_t(&[5, 2], 550 + seed);
    acc.record(
        "matmul lhs",
        check_op(&a, seed, &|t, v| {
            let bv = t.leaf(&b, false)?;
            t.matmul(v, bv)
        })?,
    );
    acc.record(
        "matmul rhs",
        check_op(&b, seed, &|t, v| {
            let av = t.leaf(&a, false)?;
            t.matmul(av, v)
        })?,
    );
    let lw = rand_t(&[5, 3], 600 + seed);
    let lb = rand_t(&[3], 650 + seed);
    let xs = rand_t(&[2, 4, 5], 700 + seed);
    acc.record(
        "linear input",
        check_op(&xs, seed, &|t, v| {
            let wv = t.leaf(&lw, false)?;
            let bv = t.leaf(&lb, false)?;
            t.linear(v, wv, Some(bv))
        })?,
    );
    acc.record(
        "linear weight",
        check_op(&lw, seed, &|t, wv| {
            let xv = t.leaf(&xs, false)?;
            let bv = t.leaf(&lb, false)?;
            t.linear(xv, wv, Some(bv))
        })?,
    );
    acc.record(
        "linear bias",
        check_op(&lb, seed, &|t, bv| {
            let xv = t.leaf(&xs, false)?;
            let wv = t.leaf(&lw, false)?;
            t.linear(xv, wv, Some(bv))
        })?,
    );

    let g = uniform(&[5], 0.5, 1.5, &mut seeded(750 + seed));
    let bb = rand_t(&[5], 800 + seed);
    acc.record(
        "layer_norm input",
        check_op(&xs, seed, &|t, v| {
            let gv = t.leaf(&g, false)?;
            let bv = t.leaf(&bb, false)?;
            t.layer_norm(v, gv, bv)
        })?,
    );
    acc.record(
        "layer_norm gain",
        check_op(&g, seed, &|t, gv| {
            let xv = t.leaf(&xs, false)?;
            let bv = t.leaf(&bb, false)?;
            t.layer_norm(xv, gv, bv)
        })?,
    );
    acc.record(
        "layer_norm bias",
        check_op(&bb, seed, &|t, bv| {
            let xv = t.leaf(&xs, false)?;
            let gv = t.leaf(&g, false)?;
            t.layer_norm(xv, gv, bv)
        })?,
    );

    let qkv = rand_t(&[2 * 5, 3 * 6], 850 + seed);
    acc.record(
        "attention",
        check_op(&qkv, seed, &|t, v| {
            let q = t.slice(v, 1, 0, 6)?;
            let k = t.slice(v, 1, 6, 6)?;
            let val = t.slice(v, 1, 12, 6)?;
            t.attention(q, k, val, 2, 2)
        })?,
    );

    let logits = rand_t(&[6], 900 + seed);
    let targets: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    acc.record(
        "bce_with_logits",
        check_op(&logits, seed, &|t, v| t.bce_with_logits(v, &targets))?,
    );

    let raw = rand_t(&[2, 18], 950 + seed);
    let gaze_targets = [[0.3, -0.2], [-0.5, 0.1]];
    acc.record(
        "mdn_nll",
        check_op(&raw, seed, &|t, v| mdn_nll_tape(t, v, &gaze_targets, 3))?,
    );
    Ok(())
}

/// Checks every parameter tensor of `store` at up to `per_tensor` evenly
/// spaced coordinates. Parameters whose gradient is identically zero by
/// construction (attention key biases) must come out as exact zeros.
fn check_store(
    acc: &mut Acc,
    name: &str,
    store: &ParamStore,
    loss: &dyn Fn(&ParamStore, &mut Tape) -> Result<Var>,
    per_tensor: usize,
) -> Result<()> {
    let mut analytic_store = store.clone();
    let mut tape = Tape::new();
    let l = loss(store, &mut tape)?;
    analytic_store.zero_grad();
    tape.backward(l)?.accumulate_into(&mut analytic_store);
    let mut worst: f64 = 0.0;
    for pi in 0..store.len() {
        let t = &analytic_store.tensors_mut()[pi];
        let analytic = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let theta = store.iter().nth(pi).map(|(_, t)| t.clone()).expect("index in range");
        if store.names()[pi].ends_with("key.bias") {
            // adds the same amount to every score of a query; softmax cancels it
            let m = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            worst = worst.max(if m < 1e-12 { 0.0 } else { f64::INFINITY });
            continue;
        }
        let mut f = |t: &Tensor| -> Result<f64> {
            let mut s = store.clone();
            s.tensors_mut()[pi].data_mut().copy_from_slice(t.data());
            let mut tape = Tape::new();
            let l = loss(&s, &mut tape)?;
            Ok(tape.scalar(l))
        };
        let coords: Vec<usize> = (0..theta.numel())
            .step_by((theta.numel() / per_tensor).max(1))
            .collect();
        for i in coords {
            let mut e = finite_diff_check_at(&mut f, &analytic, &theta, &[i])?;
            if e > TOLERANCE {
                // a ReLU or max-pool switch inside [θ−h, θ+h] breaks the central difference
                // there; a wrong backward rule still disagrees at the shorter step
                let h = FD_STEP / 10.0;
                let mut probe = theta.clone();
                probe.data_mut()[i] += h;
                let up = f(&probe)?;
                probe.data_mut()[i] -= 2.0 * h;
                let down = f(&probe)?;
                e = rel_error(analytic[i], (up - down) / (2.0 * h));
            }
            worst = worst.max(e);
        }
    }
    acc.record(name, worst);
    Ok(())
}

fn encoder_layer(acc: &mut Acc, seed: u64) -> Result<()> {
    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(&mut store, "enc", 8, 2, 16, &mut seeded(1000 + seed))?;
    let x = rand_t(&[2, 4, 8], 1100 + seed);
    let r = rand_t(&[2, 4, 8], 1200 + seed);
    let loss = |store: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let xv = tape.leaf(&x, false)?;
        let (y, _) = layer.forward(tape, store, xv, None)?;
        let rv = tape.leaf(&r, false)?;
        let p = tape.mul(y, rv)?;
        tape.sum_all(p)
    };
    check_store(acc, "encoder layer", &store, &loss, 10)
}

/// Small gaze network: the full MDN loss through conv, pooling and MLP.
fn gaze_model(acc: &mut Acc, seed: u64) -> Result<()> {
    let cfg = GazeConfig {
        global_size: 8,
        channels: vec![3, 4],
        hidden: 6,
        components: 3,
        coord_channels: true,
    };
    let net = GazeNet::new(cfg, 1300 + seed)?;
    let images: Vec<Tensor> = (0..2).map(|i| uniform(&[3, 8, 8], 0.0, 1.0, &mut seeded(1400 + 10 * seed + i))).collect();
    let targets = [[0.2, -0.4], [-0.6, 0.5]];
    let loss = |store: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let mut n = net.clone();
        n.store = store.clone();
        let inputs: Vec<GazeInput> = images
            .iter()
            .enumerate()
            .map(|(i, image)| GazeInput {
                image,
                grippers: [0.1 * i as f64, 1.0],
            })
            .collect();
        n.loss(tape, &inputs, &targets)
    };
    check_store(acc, "gaze model", &net.store, &loss, 6)
}

/// Small policy of each variant: d_model 8, one encoder layer, 8×8 fovea.
fn policy_model(acc: &mut Acc, variant: Variant, seed: u64) -> Result<()> {
    let cfg = ModelConfig {
        variant,
        d_model: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        mlp_hidden: 10,
        fovea_size: 8,
        channels: vec![4, 8],
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let net = PolicyNet::new(cfg, 1500 + seed)?;
    let foveas: Vec<Tensor> = (0..2).map(|i| uniform(&[3, 8, 8], 0.0, 1.0, &mut seeded(1600 + 10 * seed + i))).collect();
    let states: Vec<[f64; STATE_DIM]> = (0..2)
        .map(|i| {
            let t = rand_t(&[STATE_DIM], 1700 + 10 * seed + i);
            let mut s = [0.0; STATE_DIM];
            s.copy_from_slice(t.data());
            s
        })
        .collect();
    let deltas: Vec<[f64; ACTION_DIM]> = (0..2)
        .map(|i| {
            let t = rand_t(&[ACTION_DIM], 1800 + 10 * seed + i);
            let mut d = [0.0; ACTION_DIM];
            d.copy_from_slice(t.data());
            d
        })
        .collect();
    let flags = [[1.0, 0.0], [0.0, 1.0]];
    let loss = |store: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let mut n = net.clone();
        n.store = store.clone();
        let inputs: Vec<PolicyInput> = foveas
            .iter()
            .zip(&states)
            .map(|(fovea, &state)| PolicyInput { fovea, state })
            .collect();
        let fwd = n.forward(tape, &inputs, None)?;
        behavior_clone_loss(tape, fwd.output, &deltas, &flags)
    };
    check_store(acc, &format!("policy model ({})", variant.name()), &net.store, &loss, 6)
}

/// Op-level checks at `points` random points each.
pub fn op_checks(points: u64) -> Result<Vec<CheckResult>> {
    let mut acc = Acc(Vec::new());
    for seed in 0..points {
        elementwise_ops(&mut acc, seed)?;
        structured_ops(&mut acc, seed)?;
    }
    Ok(acc.0)
}

/// Encoder layer and full-model checks at `points` random initializations.
pub fn model_checks(points: u64) -> Result<Vec<CheckResult>> {
    let mut acc = Acc(Vec::new());
    for seed in 0..points {
        encoder_layer(&mut acc, seed)?;
        gaze_model(&mut acc, seed)?;
        for v in Variant::ALL {
            policy_model(&mut acc, v, seed)?;
        }
    }
    Ok(acc.0)
}

/// The whole suite at 10 points per check.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = op_checks(10)?;
    out.extend(model_checks(10)?);
    Ok(out)
}
