//! Task success measures.

use super::world::{Holder, Pose2, Shape, World, LIFTED_Y};
use super::TaskKind;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PushMetrics {
    pub top_left_error: f64,
    pub top_right_error: f64,
    /// Tilt of the top edge relative to the goal, degrees in (−180, 180].
    pub tilt_deg: f64,
}

impl PushMetrics {
    pub fn passes(&self, corner_threshold: f64, tilt_threshold_deg: f64) -> bool {
        self.top_left_error <= corner_threshold
            && self.top_right_error <= corner_threshold
            && self.tilt_deg.abs() <= tilt_threshold_deg
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskMetrics {
    Pick { a_picked: bool, b_picked: bool },
    Push { metrics: PushMetrics, pass: bool },
}

impl TaskMetrics {
    pub fn success(&self) -> bool {
        match *self {
            TaskMetrics::Pick { a_picked, b_picked } => a_picked && b_picked,
            TaskMetrics::Push { pass, .. } => pass,
        }
    }
}

/// Top-left and top-right corners (smaller y is "top") of a block.
pub fn top_corners(pose: &Pose2, half: [f64; 2]) -> [[f64; 2]; 2] {
    [pose.to_world([-half[0], -half[1]]), pose.to_world([half[0], -half[1]])]
}

pub fn block_metrics(pose: &Pose2, goal: &Pose2, half: [f64; 2]) -> PushMetrics {
    let [tl, tr] = top_corners(pose, half);
    let [gl, gr] = top_corners(goal, half);
    let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let edge = |l: [f64; 2], r: [f64; 2]| (r[1] - l[1]).atan2(r[0] - l[0]);
    PushMetrics {
        top_left_error: dist(tl, gl),
        top_right_error: dist(tr, gr),
        tilt_deg: crate::policynet::wrap_angle(edge(tl, tr) - edge(gl, gr)).to_degrees(),
    }
}

pub fn push_metrics(world: &World) -> Option<PushMetrics> {
    let goal = world.goal?;
    world.objects.iter().find_map(|o| match o.shape {
        Shape::Block { half } => Some(block_metrics(&o.pose, &goal, half)),
        Shape::Disc { .. } => None,
    })
}

pub fn evaluate_success(world: &World) -> TaskMetrics {
    match world.task {
        TaskKind::PickTwo => {
            let picked = |id: usize, h: Holder| {
                world
                    .objects
                    .iter()
                    .any(|o| o.id == id && o.held_by == Some(h) && o.pose.y >= LIFTED_Y)
            };
            TaskMetrics::Pick {
                a_picked: picked(0, Holder::Left),
                b_picked: picked(1, Holder::Right),
            }
        }
        TaskKind::PushBox => {
            let m = push_metrics(world).expect("push task has a box and a goal");
            TaskMetrics::Push {
                pass: m.passes(world.config.corner_threshold, world.config.tilt_threshold_deg),
                metrics: m,
            }
        }
    }
}
