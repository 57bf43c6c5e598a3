//! C ABI over the simulator, trained agents, datasets and attention analysis.
//!
//! Every function returns a [`TdilStatus`]. On failure the message is kept per
//! thread and can be read with [`tdil_last_error_message`]. Handles are opaque
//! and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tdil::attnlab::{self, AttentionStack, SEQ};
use tdil::cli::{load_gaze, load_policy};
use tdil::config::RunConfig;
use tdil::datastore::Dataset;
use tdil::policynet::{tokenize_state, STATE_DIM};
use tdil::simenv::{ArmCommand, Command, TaskKind, World};
use tdil::trainer::{Controller, LearnedController};
use tdil::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TdilStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Usage = 3,
    Config = 4,
    Dimension = 5,
    Data = 6,
    Format = 7,
    Corruption = 8,
    Io = 9,
    Setup = 10,
    Domain = 11,
    NonFinite = 12,
    Diverged = 13,
    Panic = 14,
}

/// Values per arm in a command: dx, dy, dyaw, gripper angle in degrees.
pub const TDIL_ARM_COMMAND_LEN: usize = 4;
/// Sensory state length: gaze (2) then left and right arm (10 each).
pub const TDIL_STATE_LEN: usize = 22;
/// Tokens per attention matrix side.
pub const TDIL_ATTENTION_SIZE: usize = 23;
/// Attention domains: image, gaze, left arm, right arm.
pub const TDIL_DOMAIN_COUNT: usize = 4;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(TdilStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension(_) => TdilStatus::Dimension,
            Error::Config(_) => TdilStatus::Config,
            Error::Domain(_) => TdilStatus::Domain,
            Error::NonFinite(_) => TdilStatus::NonFinite,
            Error::Usage(_) => TdilStatus::Usage,
            Error::Data(_) => TdilStatus::Data,
            Error::Format(_) => TdilStatus::Format,
            Error::Corruption(_) => TdilStatus::Corruption,
            Error::Setup(_) => TdilStatus::Setup,
            Error::Diverged { .. } => TdilStatus::Diverged,
            Error::Io { .. } => TdilStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TdilStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(TdilStatus::InvalidArgument, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TdilStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TdilStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            TdilStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn task_arg(code: u32) -> Result<TaskKind, Failure> {
    TaskKind::from_code(code).ok_or_else(|| invalid(format!("unknown task code {code}")))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tdil_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tdil_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Simulator instance.
pub struct TdilEnv {
    world: World,
}

/// Gaze predictor and policy loaded from training output directories.
pub struct TdilAgent {
    controller: LearnedController,
    config: RunConfig,
}

/// Demonstration dataset read from disk.
pub struct TdilDataset {
    data: Dataset,
}

/// Creates an environment with default simulator settings. `task` is 0 for
/// the two-object pick and 1 for the box push.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn tdil_env_new(task: u32, seed: u64, out: *mut *mut TdilEnv) -> TdilStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let task = task_arg(task)?;
        let world = World::reset(&RunConfig::default().sim, task, seed)?;
        *out = Box::into_raw(Box::new(TdilEnv { world }));
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle from [`tdil_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tdil_env_free(env: *mut TdilEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Resets to the initial world of `seed`, keeping the task.
///
/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tdil_env_reset(env: *mut TdilEnv, seed: u64) -> TdilStatus {
    guard(|| {
        let env = handle_mut(env, "env")?;
        env.world = World::reset(&env.world.config, env.world.task, seed)?;
        Ok(())
    })
}

/// Side length in pixels of the rendered image.
///
/// # Safety
/// `env` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdil_env_image_size(env: *const TdilEnv, out: *mut usize) -> TdilStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(env, "env")?.world.config.image_size;
        Ok(())
    })
}

/// Renders the current frame as `3 × H × W` channel-major RGB bytes and
/// writes both arm states (10 values each). `gaze` (2 values, may be null) is
/// placed in front of the arm states when `state` has room for 22 values;
/// pass `state_len` 20 to get the arm states alone.
///
/// # Safety
/// `env` must be a live handle; buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tdil_env_observe(
    env: *const TdilEnv,
    image: *mut u8,
    image_len: usize,
    gaze: *const f64,
    state: *mut f64,
    state_len: usize,
) -> TdilStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let obs = env.world.observe();
        if image_len != obs.image.len() {
            return Err(invalid(format!("image buffer holds {image_len} bytes, need {}", obs.image.len())));
        }
        out_slice(image, image_len, "image")?.copy_from_slice(&obs.image);
        let arms: Vec<f64> = obs.left.to_array().into_iter().chain(obs.right.to_array()).collect();
        let st = out_slice(state, state_len, "state")?;
        match state_len {
            20 => st.copy_from_slice(&arms),
            TDIL_STATE_LEN => {
                let g = if gaze.is_null() { [0.0; 2] } else { [*gaze, *gaze.add(1)] };
                st[..2].copy_from_slice(&g);
                st[2..].copy_from_slice(&arms);
            }
            n => return Err(invalid(format!("state buffer holds {n} values, need 20 or 22"))),
        }
        Ok(())
    })
}

/// Applies one command: `[dx, dy, dyaw, grip_deg]` for the left arm followed
/// by the same for the right arm (8 values).
///
/// # Safety
/// `env` must be a live handle and `command` point to 8 values.
#[no_mangle]
pub unsafe extern "C" fn tdil_env_step(env: *mut TdilEnv, command: *const f64) -> TdilStatus {
    guard(|| {
        let env = handle_mut(env, "env")?;
        let c = slice_arg(command, 2 * TDIL_ARM_COMMAND_LEN, "command")?;
        if c.iter().any(|v| !v.is_finite()) {
            return Err(invalid("command contains a non-finite value"));
        }
        let arm = |v: &[f64]| ArmCommand {
            dx: v[0],
            dy: v[1],
            dyaw: v[2],
            grip_deg: v[3],
        };
        env.world.step(&Command {
            left: arm(&c[..4]),
            right: arm(&c[4..]),
        })?;
        Ok(())
    })
}

/// Whether the episode has ended and whether its goal was reached.
///
/// # Safety
/// `env` must be a live handle; `done` and `success` writable or null.
#[no_mangle]
pub unsafe extern "C" fn tdil_env_status(env: *const TdilEnv, done: *mut bool, success: *mut bool) -> TdilStatus {
    guard(|| {
        let env = handle(env, "env")?;
        if let Some(d) = done.as_mut() {
            *d = env.world.done;
        }
        if let Some(s) = success.as_mut() {
            *s = env.world.task_complete();
        }
        Ok(())
    })
}

/// Loads an agent from a policy directory and a gaze directory written by
/// the training commands.
///
/// # Safety
/// Paths must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdil_agent_load(
    policy_dir: *const c_char,
    gaze_dir: *const c_char,
    out: *mut *mut TdilAgent,
) -> TdilStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let (policy, config, _) = load_policy(&path_arg(policy_dir, "policy_dir")?)?;
        let (gaze, _) = load_gaze(&path_arg(gaze_dir, "gaze_dir")?)?;
        *out = Box::into_raw(Box::new(TdilAgent {
            controller: LearnedController { gaze, policy },
            config,
        }));
        Ok(())
    })
}

/// Creates an environment with the simulator settings the agent was trained
/// with.
///
/// # Safety
/// `agent` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdil_agent_env_new(
    agent: *const TdilAgent,
    task: u32,
    seed: u64,
    out: *mut *mut TdilEnv,
) -> TdilStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let agent = handle(agent, "agent")?;
        let world = World::reset(&agent.config.sim, task_arg(task)?, seed)?;
        *out = Box::into_raw(Box::new(TdilEnv { world }));
        Ok(())
    })
}

/// # Safety
/// `agent` must be null or a handle from [`tdil_agent_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tdil_agent_free(agent: *mut TdilAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

/// Number of trainable parameters in the agent's policy.
///
/// # Safety
/// `agent` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdil_agent_param_count(agent: *const TdilAgent, out: *mut usize) -> TdilStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(agent, "agent")?.controller.policy.store.num_params();
        Ok(())
    })
}

/// Computes the agent's next command for the environment without applying
/// it. Writes 8 command values (see [`tdil_env_step`]) and the 2-d gaze.
/// When the policy is a transformer and `attention` is non-null, also writes
/// the head-averaged attention of every layer (`layers × 23 × 23` values,
/// `attention_len` must match) and sets `layers`.
///
/// # Safety
/// Handles must be live; buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tdil_agent_act(
    agent: *mut TdilAgent,
    env: *const TdilEnv,
    command: *mut f64,
    gaze: *mut f64,
    attention: *mut f64,
    attention_len: usize,
    layers: *mut usize,
) -> TdilStatus {
    guard(|| {
        let agent = handle_mut(agent, "agent")?;
        let env = handle(env, "env")?;
        if env.world.config.image_size != agent.config.sim.image_size {
            return Err(invalid(format!(
                "agent expects {}-pixel images, environment renders {}",
                agent.config.sim.image_size, env.world.config.image_size
            )));
        }
        let d = agent.controller.act(&env.world)?;
        let c = out_slice(command, 8, "command")?;
        let arm = |a: &ArmCommand| [a.dx, a.dy, a.dyaw, a.grip_deg];
        c[..4].copy_from_slice(&arm(&d.command.left));
        c[4..].copy_from_slice(&arm(&d.command.right));
        out_slice(gaze, 2, "gaze")?.copy_from_slice(&d.gaze);
        if let Some(n) = layers.as_mut() {
            *n = d.attention.as_ref().map_or(0, |s| s.layers.len());
        }
        if let (Some(stack), false) = (&d.attention, attention.is_null()) {
            let need = stack.layers.len() * SEQ * SEQ;
            if attention_len != need {
                return Err(invalid(format!("attention buffer holds {attention_len} values, need {need}")));
            }
            let out = out_slice(attention, need, "attention")?;
            for (dst, l) in out.chunks_mut(SEQ * SEQ).zip(&stack.layers) {
                dst.copy_from_slice(l);
            }
        }
        Ok(())
    })
}

/// Reads a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdil_dataset_read(path: *const c_char, out: *mut *mut TdilDataset) -> TdilStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let data = Dataset::read(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(TdilDataset { data }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from [`tdil_dataset_read`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tdil_dataset_free(ds: *mut TdilDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Task code, episode count and image side length of the dataset.
///
/// # Safety
/// `ds` must be a live handle; outputs writable or null.
#[no_mangle]
pub unsafe extern "C" fn tdil_dataset_info(
    ds: *const TdilDataset,
    task: *mut u32,
    episodes: *mut usize,
    image_size: *mut usize,
) -> TdilStatus {
    guard(|| {
        let d = &handle(ds, "dataset")?.data;
        if let Some(t) = task.as_mut() {
            *t = d.task.code();
        }
        if let Some(n) = episodes.as_mut() {
            *n = d.episodes.len();
        }
        if let Some(s) = image_size.as_mut() {
            *s = d.height;
        }
        Ok(())
    })
}

/// Step count and reset seed of one episode.
///
/// # Safety
/// `ds` must be a live handle; outputs writable or null.
#[no_mangle]
pub unsafe extern "C" fn tdil_dataset_episode(
    ds: *const TdilDataset,
    episode: usize,
    steps: *mut usize,
    seed: *mut u64,
) -> TdilStatus {
    guard(|| {
        let d = &handle(ds, "dataset")?.data;
        let ep = d
            .episodes
            .get(episode)
            .ok_or_else(|| invalid(format!("episode {episode} out of range ({} episodes)", d.episodes.len())))?;
        if let Some(s) = steps.as_mut() {
            *s = ep.steps.len();
        }
        if let Some(s) = seed.as_mut() {
            *s = ep.seed;
        }
        Ok(())
    })
}

/// Copies one recorded step: the 22-d state, the 14-d action and the two
/// ground-truth gripper flags. Any output may be null.
///
/// # Safety
/// `ds` must be a live handle; non-null buffers must hold 22, 14 and 2 values.
#[no_mangle]
pub unsafe extern "C" fn tdil_dataset_step(
    ds: *const TdilDataset,
    episode: usize,
    step: usize,
    state: *mut f64,
    action: *mut f64,
    grip: *mut u8,
) -> TdilStatus {
    guard(|| {
        let d = &handle(ds, "dataset")?.data;
        let s = d
            .episodes
            .get(episode)
            .and_then(|e| e.steps.get(step))
            .ok_or_else(|| invalid(format!("step ({episode}, {step}) out of range")))?;
        if !state.is_null() {
            out_slice(state, STATE_DIM, "state")?.copy_from_slice(&s.state());
        }
        if !action.is_null() {
            out_slice(action, 14, "action")?.copy_from_slice(&s.action);
        }
        if !grip.is_null() {
            out_slice(grip, 2, "grip")?.copy_from_slice(&s.grip);
        }
        Ok(())
    })
}

/// Attention rollout over `layers` stacked row-stochastic `size × size`
/// matrices, written to `out` (`size × size`). With `residual` each layer is
/// mixed half and half with the identity before multiplying.
///
/// # Safety
/// `matrices` must hold `layers × size × size` values and `out` `size × size`.
#[no_mangle]
pub unsafe extern "C" fn tdil_attention_rollout(
    matrices: *const f64,
    layers: usize,
    size: usize,
    residual: bool,
    out: *mut f64,
) -> TdilStatus {
    guard(|| {
        let m = size
            .checked_mul(size)
            .filter(|&m| m > 0)
            .ok_or_else(|| invalid("attention size must be positive"))?;
        let total = layers.checked_mul(m).ok_or_else(|| invalid("attention stack too large"))?;
        let all = slice_arg(matrices, total, "matrices")?;
        let stack = AttentionStack::new(size, all.chunks(m).map(<[f64]>::to_vec).collect())?;
        let r = attnlab::attention_rollout(&stack, residual)?;
        out_slice(out, m, "out")?.copy_from_slice(&r);
        Ok(())
    })
}

/// Attention received by each domain (image, gaze, left, right) from a
/// 23 × 23 rollout, summed over all query rows.
///
/// # Safety
/// `rollout` must hold 529 values and `out` 4.
#[no_mangle]
pub unsafe extern "C" fn tdil_domain_attention(rollout: *const f64, out: *mut f64) -> TdilStatus {
    guard(|| {
        let r = slice_arg(rollout, TDIL_ATTENTION_SIZE * TDIL_ATTENTION_SIZE, "rollout")?;
        let d = attnlab::domain_attention(r)?;
        out_slice(out, TDIL_DOMAIN_COUNT, "out")?.copy_from_slice(&d);
        Ok(())
    })
}

/// Z-scores `series` into `out` (both `len` values). A constant series maps
/// to zeros.
///
/// # Safety
/// Both buffers must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn tdil_normalize_trace(series: *const f64, len: usize, out: *mut f64) -> TdilStatus {
    guard(|| {
        let s = slice_arg(series, len, "series")?;
        let n = attnlab::normalize_trace(s);
        out_slice(out, len, "out")?.copy_from_slice(&n);
        Ok(())
    })
}

/// Linearly resamples `series` (`len` values) to `target_len` points.
///
/// # Safety
/// `series` must hold `len` values and `out` `target_len`.
#[no_mangle]
pub unsafe extern "C" fn tdil_resample_trace(
    series: *const f64,
    len: usize,
    out: *mut f64,
    target_len: usize,
) -> TdilStatus {
    guard(|| {
        let s = slice_arg(series, len, "series")?;
        let r = attnlab::resample_trace(s, target_len)?;
        out_slice(out, target_len, "out")?.copy_from_slice(&r);
        Ok(())
    })
}

/// Expands a 22-d sensory state into 22 tokens of 23 values each
/// (`[value, one-hot position]`), row-major.
///
/// # Safety
/// `state` must hold 22 values and `out` 506.
#[no_mangle]
pub unsafe extern "C" fn tdil_tokenize_state(state: *const f64, out: *mut f64) -> TdilStatus {
    guard(|| {
        let s: &[f64; STATE_DIM] = slice_arg(state, STATE_DIM, "state")?
            .try_into()
            .map_err(|_| invalid("state must hold 22 values"))?;
        let t = tokenize_state(s);
        out_slice(out, t.len(), "out")?.copy_from_slice(&t);
        Ok(())
    })
}
