//! Deterministic planar dual-arm simulator and scripted demonstrations.
//!
//! World coordinates equal normalized image coordinates: x to the right,
//! y downward, both in [−1, 1]. The arms sit near the bottom edge.

pub mod expert;
pub mod metrics;
pub mod render;
pub mod world;

pub use expert::{Expert, ExpertAction, PushPhase};
pub use metrics::{block_metrics, evaluate_success, push_metrics, PushMetrics, TaskMetrics};
pub use render::render_global;
pub use world::{ArmCommand, Command, Effector, Events, Holder, Object, Observation, Pose2, Shape, World};

use crate::datastore::{Dataset, Episode, EpisodeStep};
use crate::diffcore::derive_seed;
use crate::error::{Error, Result};
use crate::policynet::compute_action;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    PickTwo,
    PushBox,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PickTwo => "picktwo",
            TaskKind::PushBox => "pushbox",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "picktwo" => Ok(TaskKind::PickTwo),
            "pushbox" => Ok(TaskKind::PushBox),
            _ => Err(Error::Usage(format!("unknown task {s:?} (expected picktwo or pushbox)"))),
        }
    }

    pub fn code(self) -> u32 {
        match self {
            TaskKind::PickTwo => 0,
            TaskKind::PushBox => 1,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(TaskKind::PickTwo),
            1 => Some(TaskKind::PushBox),
            _ => None,
        }
    }

    /// Names of the two subtasks used when segmenting attention traces.
    pub fn subtask_names(self) -> [&'static str; 2] {
        match self {
            TaskKind::PickTwo => ["left", "right"],
            TaskKind::PushBox => ["set", "push"],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub image_size: usize,
    pub grasp_radius: f64,
    /// Maximum planar displacement per step.
    pub step_clamp: f64,
    /// Maximum yaw change per step, radians.
    pub yaw_clamp: f64,
    pub max_steps: usize,
    pub corner_threshold: f64,
    pub tilt_threshold_deg: f64,
    /// Standard deviation of synthetic gaze noise in normalized units.
    pub gaze_noise: f64,
    pub color_jitter: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            image_size: 96,
            grasp_radius: 0.06,
            step_clamp: 0.05,
            yaw_clamp: 0.2,
            max_steps: 300,
            corner_threshold: 0.08,
            tilt_threshold_deg: 10.0,
            gaze_noise: 0.04,
            color_jitter: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        for (name, v) in [
            ("grasp_radius", self.grasp_radius),
            ("step_clamp", self.step_clamp),
            ("yaw_clamp", self.yaw_clamp),
            ("corner_threshold", self.corner_threshold),
            ("tilt_threshold_deg", self.tilt_threshold_deg),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gaze_noise >= 0.0 && self.gaze_noise.is_finite()) {
            return Err(Error::Config(format!("gaze_noise must be non-negative, got {}", self.gaze_noise)));
        }
        Ok(())
    }
}

/// Seed of the `i`-th attempted demonstration for a generation seed.
pub fn episode_seed(seed: u64, i: u64) -> u64 {
    derive_seed(seed, i.wrapping_add(1))
}

/// One scripted rollout with its outcome.
#[derive(Clone, Debug)]
pub struct Demo {
    pub episode: Episode,
    pub metrics: TaskMetrics,
    pub events: Events,
    /// Kinematic states `s_0..s_T` of both arms, full precision.
    pub states: Vec<(crate::policynet::ArmState, crate::policynet::ArmState)>,
}

/// Runs the expert from `World::reset(task, seed)` until it finishes or the
/// episode ends.
pub fn record_episode(config: &SimConfig, task: TaskKind, seed: u64) -> Result<Demo> {
    let mut world = World::reset(config, task, seed)?;
    let mut expert = Expert::new(seed, config.gaze_noise);
    let mut steps = Vec::new();
    let mut states = vec![(world.left.arm_state(), world.right.arm_state())];
    while !world.done && !expert.finished(&world) {
        let obs = world.observe();
        let act = expert.act(&world);
        if expert.finished(&world) {
            break;
        }
        world.step(&act.command)?;
        let next = (world.left.arm_state(), world.right.arm_state());
        let action = compute_action((&obs.left, &obs.right), (&next.0, &next.1))?;
        steps.push(EpisodeStep {
            step: obs.t as u32,
            image: obs.image,
            gaze: act.gaze,
            left: obs.left.to_array(),
            right: obs.right.to_array(),
            action,
            grip: act.flags,
        });
        states.push(next);
    }
    Ok(Demo {
        episode: Episode { seed, steps },
        metrics: evaluate_success(&world),
        events: world.events,
        states,
    })
}

/// Outcome of demonstration generation.
#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    pub attempts: usize,
    pub successes: usize,
}

impl Generated {
    pub fn success_rate(&self) -> f64 {
        if self.attempts == 0 {
            1.0
        } else {
            self.successes as f64 / self.attempts as f64
        }
    }
}

/// Records `n_episodes` successful expert demonstrations. Failed rollouts
/// are discarded; more than 20% failures is an error.
pub fn record_demos(config: &SimConfig, task: TaskKind, n_episodes: usize, seed: u64) -> Result<Generated> {
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut attempts = 0usize;
    while episodes.len() < n_episodes {
        let demo = record_episode(config, task, episode_seed(seed, attempts as u64))?;
        attempts += 1;
        if demo.metrics.success() {
            episodes.push(demo.episode);
        }
        let failures = attempts - episodes.len();
        if failures * 5 > attempts.max(10) {
            return Err(Error::Data(format!(
                "expert failed {failures} of {attempts} {} episodes",
                task.name()
            )));
        }
    }
    Ok(Generated {
        successes: episodes.len(),
        dataset: Dataset {
            task,
            height: config.image_size,
            width: config.image_size,
            seed,
            episodes,
        },
        attempts,
    })
}
