//! Training loops, the closed-loop evaluation harness and run records.

pub mod eval;
pub mod gaze;
pub mod manifest;
pub mod policy;

pub use eval::{
    evaluation_starts, run_episode, evaluate, Controller, ControllerFactory, Decision, EpisodeOutcome, EvalReport, EvalSummary,
    ExpertController, LearnedController,
};
pub use gaze::{gaze_errors, train_gaze, GazeObjective};
pub use manifest::{file_entry, FileEntry, Manifest};
pub use policy::{action_stats, policy_config_for, train_policy, PolicyObjective};

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::TrainConfig;
use crate::datastore::make_batches;
use crate::diffcore::{checkpoint, derive_seed, seeded, ParamStore, RAdam, RAdamConfig, Rng, Tape, Var};
use crate::error::{Error, Result};

/// `(episode, step)` index into a dataset.
pub type StepRef = (usize, usize);

/// A model plus the data it is fitted on.
pub trait Objective {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Mean loss over `batch`. `rng` is present only for training passes.
    fn batch_loss(&self, tape: &mut Tape, batch: &[StepRef], rng: Option<&mut Rng>) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Epochs,
    TimeBudget,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Epochs => "epochs",
            StopReason::TimeBudget => "time_budget",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<EpochMetrics>,
    pub init_val_loss: f64,
    /// 0 when no epoch improved on the initialization.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    /// Encoded checkpoint of the best parameters.
    pub best: Vec<u8>,
}

/// Mean loss over `refs` in fixed order, without dropout or updates.
pub fn mean_loss<O: Objective>(obj: &O, refs: &[StepRef], batch_size: usize) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Data("no steps to evaluate the loss on".into()));
    }
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size) {
        let mut tape = Tape::new();
        let loss = obj.batch_loss(&mut tape, chunk, None)?;
        total += tape.scalar(loss) * chunk.len() as f64;
    }
    Ok(total / refs.len() as f64)
}

fn diverged(epoch: usize, batch: usize, loss: f64, grad_norm: f64) -> Error {
    Error::Diverged {
        epoch,
        batch,
        loss,
        grad_norm,
    }
}

/// Fits `obj` with RAdam, keeping the parameters with the lowest validation
/// loss. The store is left holding the best parameters.
pub fn fit<O: Objective>(
    obj: &mut O,
    train: &[StepRef],
    val: &[StepRef],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("no training steps".into()));
    }
    let start = Instant::now();
    let init_val_loss = mean_loss(obj, val, cfg.batch_size)?;
    let mut best = checkpoint::encode(obj.store());
    let mut best_epoch = 0;
    let mut best_val_loss = init_val_loss;
    let mut opt = RAdam::new(
        RAdamConfig {
            lr: cfg.lr(),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        },
        obj.store(),
    );
    let mut curve = Vec::new();
    let mut stop = StopReason::Epochs;
    let mut last_norm = 0.0;
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(train, cfg.batch_size, derive_seed(seed, epoch as u64))?;
        let mut rng = seeded(derive_seed(seed, 0xD40F_0000 + epoch as u64));
        let mut sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let loss = match obj.batch_loss(&mut tape, batch, Some(&mut rng)) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => return Err(diverged(epoch, bi, f64::NAN, last_norm)),
                Err(e) => return Err(e),
            };
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(diverged(epoch, bi, lv, last_norm));
            }
            let grads = match tape.backward(loss) {
                Ok(g) => g,
                Err(Error::NonFinite(_)) => return Err(diverged(epoch, bi, lv, f64::NAN)),
                Err(e) => return Err(e),
            };
            let store = obj.store_mut();
            store.zero_grad();
            grads.accumulate_into(store);
            last_norm = store.grad_norm();
            if !last_norm.is_finite() {
                return Err(diverged(epoch, bi, lv, last_norm));
            }
            opt.step(store)?;
            sum += lv * batch.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = mean_loss(obj, val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(diverged(epoch, batches.len(), val_loss, last_norm));
        }
        let m = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&m);
        curve.push(m);
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best = checkpoint::encode(obj.store());
        }
        if start.elapsed().as_secs_f64() >= cfg.time_budget_s && epoch < cfg.epochs {
            stop = StopReason::TimeBudget;
            break;
        }
    }
    obj.store_mut().load(checkpoint::decode(&best)?)?;
    Ok(TrainOutcome {
        curve,
        init_val_loss,
        best_epoch,
        best_val_loss,
        stop,
        best,
    })
}

/// `epoch,train_loss,val_loss` with one row per trained epoch.
pub fn metrics_csv(curve: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for m in curve {
        let _ = writeln!(s, "{},{:?},{:?}", m.epoch, m.train_loss, m.val_loss);
    }
    s
}

pub const CHECKPOINT_FILE: &str = "checkpoint.batn";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const ATTENTION_FILE: &str = "attention.batt";
