//! Scripted demonstrators with synthetic gaze.

use rand_distr::{Distribution, Normal};

use super::world::{ArmCommand, Command, Effector, Holder, World, BOX_HALF, EFFECTOR_RADIUS, GRIP_CLOSED_DEG, HOLD_Y};
use super::TaskKind;
use crate::diffcore::{derive_seed, seeded, Rng};

pub const REACH_SPEED: f64 = 0.045;
pub const PUSH_SPEED: f64 = 0.03;
pub const YAW_RATE: f64 = 0.1;
pub const TILT_GAIN: f64 = 8.0;
/// Clearance between an effector and the box edge before pushing.
pub const SET_GAP: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PushPhase {
    Set,
    Push,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertAction {
    pub command: Command,
    /// Synthetic gaze label in normalized image coordinates.
    pub gaze: [f64; 2],
    /// 1 where the gripper is commanded closed.
    pub flags: [u8; 2],
}

#[derive(Clone, Debug)]
pub struct Expert {
    rng: Rng,
    noise: Normal<f64>,
    pub push_phase: PushPhase,
}

fn toward(e: &Effector, target: [f64; 2], speed: f64) -> (f64, f64, f64) {
    let (dx, dy) = (target[0] - e.x, target[1] - e.y);
    let d = dx.hypot(dy);
    if d <= speed {
        (dx, dy, d)
    } else {
        (dx * speed / d, dy * speed / d, d)
    }
}

fn level_yaw(e: &Effector) -> f64 {
    -e.yaw.clamp(-YAW_RATE, YAW_RATE)
}

/// Reaches `target`; once there, closes the gripper.
fn reach_and_close(e: &Effector, target: [f64; 2]) -> ArmCommand {
    let (dx, dy, d) = toward(e, target, REACH_SPEED);
    ArmCommand {
        dx,
        dy,
        dyaw: level_yaw(e),
        grip_deg: if d <= 1e-9 { GRIP_CLOSED_DEG } else { e.grip_deg },
    }
}

fn lift(e: &Effector) -> ArmCommand {
    ArmCommand {
        dx: 0.0,
        dy: (HOLD_Y - e.y).clamp(0.0, REACH_SPEED),
        dyaw: level_yaw(e),
        grip_deg: GRIP_CLOSED_DEG,
    }
}

fn idle(e: &Effector) -> ArmCommand {
    ArmCommand {
        dyaw: level_yaw(e),
        ..ArmCommand::hold(e)
    }
}

impl Expert {
    pub fn new(seed: u64, gaze_noise: f64) -> Self {
        Expert {
            rng: seeded(derive_seed(seed, 0xE4E)),
            noise: Normal::new(0.0, gaze_noise.max(0.0)).expect("finite noise"),
            push_phase: PushPhase::Set,
        }
    }

    /// Whether the scripted demonstration has nothing left to do.
    pub fn finished(&self, world: &World) -> bool {
        match world.task {
            TaskKind::PickTwo => world.task_complete(),
            TaskKind::PushBox => self.push_phase == PushPhase::Done,
        }
    }

    fn noisy(&mut self, p: [f64; 2]) -> [f64; 2] {
        let nx = self.noise.sample(&mut self.rng);
        let ny = self.noise.sample(&mut self.rng);
        [(p[0] + nx).clamp(-1.0, 1.0), (p[1] + ny).clamp(-1.0, 1.0)]
    }

    pub fn act(&mut self, world: &World) -> ExpertAction {
        let (command, target) = match world.task {
            TaskKind::PickTwo => pick_two(world),
            TaskKind::PushBox => self.push_box(world),
        };
        let flag = |c: &ArmCommand| u8::from(c.grip_deg <= GRIP_CLOSED_DEG);
        ExpertAction {
            flags: [flag(&command.left), flag(&command.right)],
            gaze: self.noisy(target),
            command,
        }
    }

    fn push_box(&mut self, world: &World) -> (Command, [f64; 2]) {
        let bx = &world.objects[0];
        let goal = world.goal.expect("push task has a goal");
        let offset = BOX_HALF[0] / 2.0;
        let standoff = BOX_HALF[1] + EFFECTOR_RADIUS + SET_GAP;
        if self.push_phase == PushPhase::Set {
            let tl = bx.pose.to_world([-offset, standoff]);
            let tr = bx.pose.to_world([offset, standoff]);
            let (lx, ly, ld) = toward(&world.left, tl, REACH_SPEED);
            let (rx, ry, rd) = toward(&world.right, tr, REACH_SPEED);
            if ld > 1e-9 || rd > 1e-9 {
                let cmd = |e: &Effector, dx, dy| ArmCommand {
                    dx,
                    dy,
                    dyaw: level_yaw(e),
                    grip_deg: e.grip_deg,
                };
                return (
                    Command {
                        left: cmd(&world.left, lx, ly),
                        right: cmd(&world.right, rx, ry),
                    },
                    [bx.pose.x, bx.pose.y],
                );
            }
            self.push_phase = PushPhase::Push;
        }
        let final_y = goal.y + BOX_HALF[1] + EFFECTOR_RADIUS;
        // slow the arm whose push would rotate the box further from level
        let yaw = bx.pose.yaw;
        let push = |e: &Effector, x: f64, side: f64| {
            let speed = PUSH_SPEED * (1.0 + side * TILT_GAIN * yaw).clamp(0.0, 1.0);
            let dy = -(e.y - final_y).clamp(0.0, speed);
            let dx = (x - e.x).clamp(-PUSH_SPEED, PUSH_SPEED);
            ArmCommand {
                dx,
                dy,
                dyaw: level_yaw(e),
                grip_deg: e.grip_deg,
            }
        };
        let left = push(&world.left, goal.x - offset, -1.0);
        let right = push(&world.right, goal.x + offset, 1.0);
        let still = |c: &ArmCommand| c.dx.abs() + c.dy.abs() <= 1e-12;
        if still(&left) && still(&right) {
            self.push_phase = PushPhase::Done;
        }
        (Command { left, right }, [goal.x, goal.y])
    }
}

fn pick_two(world: &World) -> (Command, [f64; 2]) {
    let a = &world.objects[0];
    let b = &world.objects[1];
    if a.held_by != Some(Holder::Left) {
        let cmd = Command {
            left: reach_and_close(&world.left, [a.pose.x, a.pose.y]),
            right: idle(&world.right),
        };
        return (cmd, [a.pose.x, a.pose.y]);
    }
    let right = if b.held_by == Some(Holder::Right) {
        lift(&world.right)
    } else {
        reach_and_close(&world.right, [b.pose.x, b.pose.y])
    };
    (
        Command {
            left: lift(&world.left),
            right,
        },
        [b.pose.x, b.pose.y],
    )
}
