//! Closed-loop evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attnlab::{AttentionStack, EpisodeAttention};
use crate::datastore::image_tensor;
use crate::diffcore::{derive_seed, seeded};
use crate::error::{Error, Result};
use crate::gazenet::{crop_fovea, select_gaze, GazeInput, GazeNet};
use crate::policynet::{PolicyInput, PolicyNet, SensoryState};
use crate::simenv::{episode_seed, Command, Events, Expert, SimConfig, TaskKind, TaskMetrics, World};

/// What a controller does at one step.
#[derive(Clone, Debug)]
pub struct Decision {
    pub command: Command,
    pub gaze: [f64; 2],
    pub attention: Option<AttentionStack>,
    /// The controller has nothing left to do; the command is not applied.
    pub finished: bool,
}

/// Anything that can drive the simulator through an episode.
pub trait Controller {
    fn reset(&mut self, world: &World) -> Result<()>;
    fn act(&mut self, world: &World) -> Result<Decision>;
}

/// The scripted demonstrator.
pub struct ExpertController {
    gaze_noise: f64,
    expert: Option<Expert>,
}

impl ExpertController {
    pub fn new(gaze_noise: f64) -> Self {
        ExpertController {
            gaze_noise,
            expert: None,
        }
    }
}

impl Controller for ExpertController {
    fn reset(&mut self, world: &World) -> Result<()> {
        self.expert = Some(Expert::new(world.seed, self.gaze_noise));
        Ok(())
    }

    fn act(&mut self, world: &World) -> Result<Decision> {
        let expert = self
            .expert
            .as_mut()
            .ok_or_else(|| Error::Usage("controller used before reset".into()))?;
        let a = expert.act(world);
        Ok(Decision {
            command: a.command,
            gaze: a.gaze,
            attention: None,
            finished: expert.finished(world),
        })
    }
}

/// Gaze predictor plus policy, cropping at the predicted gaze.
#[derive(Clone)]
pub struct LearnedController {
    pub gaze: GazeNet,
    pub policy: PolicyNet,
}

impl Controller for LearnedController {
    fn reset(&mut self, _world: &World) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, world: &World) -> Result<Decision> {
        let obs = world.observe();
        let n = world.config.image_size;
        let image = image_tensor(&obs.image, n, n)?;
        let gmm = self.gaze.predict(&[GazeInput {
            image: &image,
            grippers: [obs.left.grip, obs.right.grip],
        }])?;
        let gaze = select_gaze(&gmm[0]);
        let fovea = crop_fovea(&image, gaze, self.policy.config.fovea_size)?;
        let state = SensoryState {
            gaze,
            left: obs.left,
            right: obs.right,
        }
        .to_array();
        let mut pred = self.policy.predict(&[PolicyInput { fovea: &fovea, state }])?;
        let (out, attention) = pred.pop().ok_or_else(|| Error::Dimension("empty prediction".into()))?;
        Ok(Decision {
            command: Command::from_policy(&out, world),
            gaze,
            attention,
            finished: false,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub steps: usize,
    pub metrics: TaskMetrics,
    pub events: Events,
    pub stacks: Vec<AttentionStack>,
}

impl EpisodeOutcome {
    /// First step of the second subtask: one past the left grasp (PickTwo) or
    /// the first box contact (PushBox); the episode length if it never came.
    pub fn split(&self, task: TaskKind) -> usize {
        let ev = match task {
            TaskKind::PickTwo => self.events.left_grasp,
            TaskKind::PushBox => self.events.first_contact,
        };
        ev.map_or(self.steps, |t| (t + 1).min(self.steps))
    }
}

/// Runs one episode from `World::reset(task, seed)`.
pub fn run_episode(sim: &SimConfig, task: TaskKind, seed: u64, ctl: &mut dyn Controller) -> Result<EpisodeOutcome> {
    let mut world = World::reset(sim, task, seed)?;
    ctl.reset(&world)?;
    let mut stacks = Vec::new();
    while !world.done {
        let d = ctl.act(&world)?;
        if d.finished {
            break;
        }
        if let Some(s) = d.attention {
            stacks.push(s);
        }
        world.step(&d.command)?;
    }
    Ok(EpisodeOutcome {
        seed,
        steps: world.t,
        metrics: crate::simenv::evaluate_success(&world),
        events: world.events,
        stacks,
    })
}

/// Evaluation starts: the validation seeds in a seeded shuffle, topped up
/// with fresh seeds when more episodes are requested.
pub fn evaluation_starts(val_seeds: &[u64], n: usize, seed: u64) -> Vec<u64> {
    let mut starts = val_seeds.to_vec();
    starts.shuffle(&mut seeded(derive_seed(seed, 0xE7A1)));
    starts.truncate(n);
    let fresh = derive_seed(seed, 0xF8E5);
    let mut i = 0;
    while starts.len() < n {
        starts.push(episode_seed(fresh, i));
        i += 1;
    }
    starts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub seed: u64,
    pub steps: usize,
    pub success: bool,
    pub split: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_picked: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_picked: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_left_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_right_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tilt_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalSummary {
    Pick {
        pick_a: usize,
        pick_b: usize,
        both: usize,
        pick_a_rate: f64,
        pick_b_rate: f64,
        both_rate: f64,
    },
    Push {
        successes: usize,
        success_rate: f64,
        median_top_left_error: f64,
        median_top_right_error: f64,
        /// Median absolute tilt, degrees.
        median_tilt_deg: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub controller: String,
    pub n_episodes: usize,
    pub seed: u64,
    pub summary: EvalSummary,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn task_kind(&self) -> Result<TaskKind> {
        TaskKind::parse(&self.task)
    }

    /// Fraction of episodes where the whole task succeeded.
    pub fn success_rate(&self) -> f64 {
        match self.summary {
            EvalSummary::Pick { both_rate, .. } => both_rate,
            EvalSummary::Push { success_rate, .. } => success_rate,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn summarize(task: TaskKind, outcomes: &[EpisodeOutcome]) -> (EvalSummary, Vec<EpisodeRecord>) {
    let n = outcomes.len();
    let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let records: Vec<EpisodeRecord> = outcomes
        .iter()
        .enumerate()
        .map(|(index, o)| {
            let mut r = EpisodeRecord {
                index,
                seed: o.seed,
                steps: o.steps,
                success: o.metrics.success(),
                split: o.split(task),
                a_picked: None,
                b_picked: None,
                top_left_error: None,
                top_right_error: None,
                tilt_deg: None,
            };
            match o.metrics {
                TaskMetrics::Pick { a_picked, b_picked } => {
                    r.a_picked = Some(a_picked);
                    r.b_picked = Some(b_picked);
                }
                TaskMetrics::Push { metrics, .. } => {
                    r.top_left_error = Some(metrics.top_left_error);
                    r.top_right_error = Some(metrics.top_right_error);
                    r.tilt_deg = Some(metrics.tilt_deg);
                }
            }
            r
        })
        .collect();
    let summary = match task {
        TaskKind::PickTwo => {
            let count = |f: &dyn Fn(&EpisodeRecord) -> bool| records.iter().filter(|r| f(r)).count();
            let pick_a = count(&|r| r.a_picked == Some(true));
            let pick_b = count(&|r| r.b_picked == Some(true));
            let both = count(&|r| r.success);
            EvalSummary::Pick {
                pick_a,
                pick_b,
                both,
                pick_a_rate: rate(pick_a),
                pick_b_rate: rate(pick_b),
                both_rate: rate(both),
            }
        }
        TaskKind::PushBox => {
            let successes = records.iter().filter(|r| r.success).count();
            let col = |f: &dyn Fn(&EpisodeRecord) -> Option<f64>| records.iter().filter_map(f).collect::<Vec<_>>();
            EvalSummary::Push {
                successes,
                success_rate: rate(successes),
                median_top_left_error: median(col(&|r| r.top_left_error)),
                median_top_right_error: median(col(&|r| r.top_right_error)),
                median_tilt_deg: median(col(&|r| r.tilt_deg.map(f64::abs))),
            }
        }
    };
    (summary, records)
}

/// Factory for per-thread controllers.
pub type ControllerFactory<'a> = dyn Fn() -> Result<Box<dyn Controller>> + Sync + 'a;

/// Evaluates one controller per start seed. With `threads > 1` episodes are
/// spread over scoped threads; results do not depend on the thread count.
pub fn evaluate(
    sim: &SimConfig,
    task: TaskKind,
    starts: &[u64],
    threads: usize,
    make: &ControllerFactory,
) -> Result<(Vec<EpisodeOutcome>, EvalSummary, Vec<EpisodeRecord>)> {
    let threads = threads.clamp(1, starts.len().max(1));
    let outcomes: Vec<EpisodeOutcome> = if threads == 1 {
        let mut ctl = make()?;
        starts
            .iter()
            .map(|&s| run_episode(sim, task, s, ctl.as_mut()))
            .collect::<Result<_>>()?
    } else {
        let per = starts.len().div_ceil(threads);
        let parts: Vec<Result<Vec<EpisodeOutcome>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = starts
                .chunks(per)
                .map(|chunk| {
                    scope.spawn(move || {
                        let mut ctl = make()?;
                        chunk
                            .iter()
                            .map(|&s| run_episode(sim, task, s, ctl.as_mut()))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Setup("evaluation thread panicked".into()))))
                .collect()
        });
        let mut all = Vec::with_capacity(starts.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let (summary, records) = summarize(task, &outcomes);
    Ok((outcomes, summary, records))
}

/// Attention stacks of the evaluated episodes, ready for export.
pub fn attention_records(task: TaskKind, outcomes: &[EpisodeOutcome]) -> Vec<EpisodeAttention> {
    outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| EpisodeAttention {
            episode: i,
            split: o.split(task).min(o.stacks.len()),
            stacks: o.stacks.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_prefer_validation_seeds() {
        let val = [11, 22, 33];
        let s = evaluation_starts(&val, 2, 5);
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|x| val.contains(x)));
        let s = evaluation_starts(&val, 5, 5);
        let mut head = s[..3].to_vec();
        head.sort();
        assert_eq!(head, val);
        assert_eq!(s, evaluation_starts(&val, 5, 5));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }

    #[test]
    fn expert_through_harness_and_thread_independence() {
        let sim = SimConfig::default();
        let starts = evaluation_starts(&[], 6, 1);
        let make: &ControllerFactory = &|| Ok(Box::new(ExpertController::new(0.0)) as Box<dyn Controller>);
        for task in [TaskKind::PickTwo, TaskKind::PushBox] {
            let (_, one, rec1) = evaluate(&sim, task, &starts, 1, make).unwrap();
            let (_, three, rec3) = evaluate(&sim, task, &starts, 3, make).unwrap();
            assert_eq!(one, three);
            assert_eq!(rec1, rec3);
            assert!(rec1.iter().all(|r| r.success), "{task:?}");
        }
    }
}
