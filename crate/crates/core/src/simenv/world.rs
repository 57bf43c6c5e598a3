//! Planar dual-arm world: kinematic effectors, graspable discs and a pushable box.

use rand::Rng as _;

use super::{SimConfig, TaskKind};
use crate::diffcore::{derive_seed, seeded};
use crate::error::{Error, Result};
use crate::policynet::{gripper_command, ArmState, PolicyOutput};

pub const GRIP_OPEN_DEG: f64 = 60.0;
pub const GRIP_CLOSED_DEG: f64 = 5.0;
/// Commanded angles above this release a held object.
pub const GRIP_RELEASE_DEG: f64 = 30.0;
pub const EFFECTOR_RADIUS: f64 = 0.04;
pub const DISC_RADIUS: f64 = 0.06;
pub const BOX_HALF: [f64; 2] = [0.2, 0.08];
/// Objects at or below this y (toward the arms' base) count as lifted.
pub const HOLD_Y: f64 = 0.6;
pub const LIFTED_Y: f64 = 0.55;
pub const LEFT_HOME: [f64; 2] = [-0.45, 0.75];
pub const RIGHT_HOME: [f64; 2] = [0.45, 0.75];
/// Corner error at which a pushed box counts as settled at the goal.
pub const PUSH_SETTLE: f64 = 0.02;
const CONTACT_ITERS: usize = 6;
const PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    /// Maps a point from this pose's frame to the world frame.
    pub fn to_world(&self, local: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * local[0] - s * local[1], self.y + s * local[0] + c * local[1]]
    }

    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Disc { radius: f64 },
    Block { half: [f64; 2] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Holder {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub id: usize,
    pub shape: Shape,
    pub pose: Pose2,
    pub color: [u8; 3],
    pub held_by: Option<Holder>,
    pub graspable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Effector {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub grip_deg: f64,
}

impl Effector {
    pub fn arm_state(&self) -> ArmState {
        ArmState::planar(self.x, self.y, self.yaw, self.grip_deg.to_radians())
    }

    pub fn pos(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Command for one arm: planar displacement, yaw change and commanded
/// gripper angle in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmCommand {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
    pub grip_deg: f64,
}

impl ArmCommand {
    pub fn hold(e: &Effector) -> Self {
        ArmCommand {
            dx: 0.0,
            dy: 0.0,
            dyaw: 0.0,
            grip_deg: e.grip_deg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Command {
    pub left: ArmCommand,
    pub right: ArmCommand,
}

impl Command {
    /// Converts a network prediction into a command, applying the gripper
    /// closing rule per arm.
    pub fn from_policy(out: &PolicyOutput, world: &World) -> Self {
        let arm = |d: &[f64], logit: f64, e: &Effector| ArmCommand {
            dx: d[0],
            dy: d[1],
            dyaw: d[5],
            grip_deg: gripper_command(logit, d[6].to_degrees(), e.grip_deg),
        };
        Command {
            left: arm(&out.delta[..7], out.grip_logits[0], &world.left),
            right: arm(&out.delta[7..], out.grip_logits[1], &world.right),
        }
    }
}

/// Observable simulator events, recorded once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Events {
    /// Step after which object A was first held by the left arm.
    pub left_grasp: Option<usize>,
    pub right_grasp: Option<usize>,
    /// Step after which an effector first touched the box.
    pub first_contact: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `3 × H × W` RGB bytes, channel-major.
    pub image: Vec<u8>,
    pub left: ArmState,
    pub right: ArmState,
    pub t: usize,
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: SimConfig,
    pub task: TaskKind,
    pub seed: u64,
    pub left: Effector,
    pub right: Effector,
    pub objects: Vec<Object>,
    pub goal: Option<Pose2>,
    pub t: usize,
    pub done: bool,
    pub events: Events,
}

pub const COLOR_A: [u8; 3] = [210, 40, 40];
pub const COLOR_B: [u8; 3] = [240, 150, 20];
pub const COLOR_BOX: [u8; 3] = [130, 80, 40];

fn jitter(color: [u8; 3], on: bool, rng: &mut impl rand::Rng) -> [u8; 3] {
    if !on {
        return color;
    }
    color.map(|c| (c as i32 + rng.random_range(-30..=30)).clamp(0, 255) as u8)
}

impl World {
    /// Samples a new episode. Deterministic in `(task, seed)`.
    pub fn reset(config: &SimConfig, task: TaskKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive_seed(seed, 0x5EED));
        let eff = |home: [f64; 2], rng: &mut crate::diffcore::Rng| Effector {
            x: home[0] + rng.random_range(-0.05..0.05),
            y: home[1] + rng.random_range(-0.05..0.05),
            yaw: rng.random_range(-0.5..0.5),
            grip_deg: GRIP_OPEN_DEG,
        };
        let left = eff(LEFT_HOME, &mut rng);
        let right = eff(RIGHT_HOME, &mut rng);
        let mut objects = Vec::new();
        let mut goal = None;
        let clear_of_arms = |p: [f64; 2], r: f64| {
            [left.pos(), right.pos()]
                .iter()
                .all(|e| (e[0] - p[0]).hypot(e[1] - p[1]) > r + EFFECTOR_RADIUS + 0.05)
        };
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            objects.clear();
            match task {
                TaskKind::PickTwo => {
                    let ax: f64 = rng.random_range(-0.6..-0.1);
                    let ay: f64 = rng.random_range(-0.2..0.3);
                    let bx = rng.random_range(ax + 0.25..0.65);
                    let by = rng.random_range(-0.2..0.3);
                    let ok = (ax - bx).hypot(ay - by) > 2.0 * DISC_RADIUS + 0.05
                        && clear_of_arms([ax, ay], DISC_RADIUS)
                        && clear_of_arms([bx, by], DISC_RADIUS);
                    for (id, (x, y, color)) in [(ax, ay, COLOR_A), (bx, by, COLOR_B)].into_iter().enumerate() {
                        objects.push(Object {
                            id,
                            shape: Shape::Disc { radius: DISC_RADIUS },
                            pose: Pose2 { x, y, yaw: 0.0 },
                            color: jitter(color, config.color_jitter, &mut rng),
                            held_by: None,
                            graspable: true,
                        });
                    }
                    placed = ok;
                }
                TaskKind::PushBox => {
                    let pose = Pose2 {
                        x: rng.random_range(-0.2..0.2),
                        y: rng.random_range(0.0..0.3),
                        yaw: rng.random_range(-5f64..5.0).to_radians(),
                    };
                    let lift = rng.random_range(0.3..0.5);
                    goal = Some(Pose2 {
                        x: pose.x,
                        y: pose.y - lift,
                        yaw: 0.0,
                    });
                    objects.push(Object {
                        id: 0,
                        shape: Shape::Block { half: BOX_HALF },
                        pose,
                        color: jitter(COLOR_BOX, config.color_jitter, &mut rng),
                        held_by: None,
                        graspable: false,
                    });
                    let hyp = BOX_HALF[0].hypot(BOX_HALF[1]);
                    placed = clear_of_arms([pose.x, pose.y], hyp);
                }
            }
            if placed {
                break;
            }
        }
        if !placed {
            return Err(Error::Setup(format!(
                "no collision-free placement after {PLACEMENT_TRIES} tries"
            )));
        }
        Ok(World {
            config: config.clone(),
            task,
            seed,
            left,
            right,
            objects,
            goal,
            t: 0,
            done: false,
            events: Events::default(),
        })
    }

    pub fn effector(&self, h: Holder) -> &Effector {
        match h {
            Holder::Left => &self.left,
            Holder::Right => &self.right,
        }
    }

    pub fn observe(&self) -> Observation {
        Observation {
            image: super::render::render_global(self),
            left: self.left.arm_state(),
            right: self.right.arm_state(),
            t: self.t,
        }
    }

    fn move_arm(e: &mut Effector, cmd: &ArmCommand, cfg: &SimConfig) {
        let (mut dx, mut dy) = (cmd.dx, cmd.dy);
        let n = dx.hypot(dy);
        if n > cfg.step_clamp {
            dx *= cfg.step_clamp / n;
            dy *= cfg.step_clamp / n;
        }
        if !(dx.is_finite() && dy.is_finite()) {
            dx = 0.0;
            dy = 0.0;
        }
        e.x = (e.x + dx).clamp(-1.0, 1.0);
        e.y = (e.y + dy).clamp(-1.0, 1.0);
        let dyaw = if cmd.dyaw.is_finite() { cmd.dyaw } else { 0.0 };
        e.yaw = crate::policynet::wrap_angle(e.yaw + dyaw.clamp(-cfg.yaw_clamp, cfg.yaw_clamp));
        if cmd.grip_deg.is_finite() {
            e.grip_deg = cmd.grip_deg.clamp(0.0, 90.0);
        }
    }

    fn update_grasp(&mut self, h: Holder) {
        let e = *self.effector(h);
        let held = self.objects.iter().position(|o| o.held_by == Some(h));
        if e.grip_deg > GRIP_RELEASE_DEG {
            if let Some(i) = held {
                self.objects[i].held_by = None;
            }
            return;
        }
        if held.is_some() || e.grip_deg > GRIP_CLOSED_DEG + 1e-9 {
            return;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            if !o.graspable || o.held_by.is_some() {
                continue;
            }
            let d = (o.pose.x - e.x).hypot(o.pose.y - e.y);
            if d <= self.config.grasp_radius && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            self.objects[i].held_by = Some(h);
            if self.objects[i].id == usize::from(h == Holder::Right) {
                let slot = match h {
                    Holder::Left => &mut self.events.left_grasp,
                    Holder::Right => &mut self.events.right_grasp,
                };
                slot.get_or_insert(self.t);
            }
        }
    }

    /// Pushes unheld blocks out of effector discs. Returns true on contact.
    fn resolve_contacts(&mut self) -> bool {
        let mut touched = false;
        for _ in 0..CONTACT_ITERS {
            for p in [self.left.pos(), self.right.pos()] {
                for o in &mut self.objects {
                    let Shape::Block { half } = o.shape else { continue };
                    if o.held_by.is_some() {
                        continue;
                    }
                    if let Some((disp, contact)) = block_penetration(&o.pose, half, p) {
                        touched = true;
                        o.pose.x += disp[0];
                        o.pose.y += disp[1];
                        let r = [contact[0] - o.pose.x, contact[1] - o.pose.y];
                        let torque = r[0] * disp[1] - r[1] * disp[0];
                        o.pose.yaw += torque / (half[0] * half[0] + half[1] * half[1]);
                        o.pose.x = o.pose.x.clamp(-1.0, 1.0);
                        o.pose.y = o.pose.y.clamp(-1.0, 1.0);
                    }
                }
            }
        }
        touched
    }

    pub fn step(&mut self, cmd: &Command) -> Result<()> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        let cfg = self.config.clone();
        Self::move_arm(&mut self.left, &cmd.left, &cfg);
        Self::move_arm(&mut self.right, &cmd.right, &cfg);
        self.update_grasp(Holder::Left);
        self.update_grasp(Holder::Right);
        for i in 0..self.objects.len() {
            if let Some(h) = self.objects[i].held_by {
                let e = *self.effector(h);
                self.objects[i].pose = Pose2 {
                    x: e.x,
                    y: e.y,
                    yaw: e.yaw,
                };
            }
        }
        if self.resolve_contacts() {
            self.events.first_contact.get_or_insert(self.t);
        }
        self.t += 1;
        self.done = self.t >= self.config.max_steps || self.task_complete();
        Ok(())
    }

    /// Whether the episode goal has been reached.
    pub fn task_complete(&self) -> bool {
        match self.task {
            TaskKind::PickTwo => {
                let lifted = |id: usize, h: Holder| {
                    self.objects
                        .iter()
                        .any(|o| o.id == id && o.held_by == Some(h) && o.pose.y >= LIFTED_Y)
                };
                lifted(0, Holder::Left) && lifted(1, Holder::Right)
            }
            TaskKind::PushBox => match super::metrics::push_metrics(self) {
                Some(m) => m.top_left_error <= PUSH_SETTLE && m.top_right_error <= PUSH_SETTLE,
                None => false,
            },
        }
    }
}

/// If the disc at `p` overlaps the block, the block displacement that
/// resolves it and the contact point, both in world coordinates.
pub fn block_penetration(pose: &Pose2, half: [f64; 2], p: [f64; 2]) -> Option<([f64; 2], [f64; 2])> {
    let q = pose.to_local(p);
    let cl = [q[0].clamp(-half[0], half[0]), q[1].clamp(-half[1], half[1])];
    let d = [q[0] - cl[0], q[1] - cl[1]];
    let dist = d[0].hypot(d[1]);
    let (n, pen, contact) = if dist > 0.0 {
        if dist >= EFFECTOR_RADIUS {
            return None;
        }
        ([d[0] / dist, d[1] / dist], EFFECTOR_RADIUS - dist, cl)
    } else {
        // center inside the block: leave through the nearest face
        let px = half[0] - q[0].abs();
        let py = half[1] - q[1].abs();
        if px < py {
            let s = q[0].signum();
            ([s, 0.0], px + EFFECTOR_RADIUS, [s * half[0], q[1]])
        } else {
            let s = if q[1] == 0.0 { 1.0 } else { q[1].signum() };
            ([0.0, s], py + EFFECTOR_RADIUS, [q[0], s * half[1]])
        }
    };
    let (s, c) = pose.yaw.sin_cos();
    let nw = [c * n[0] - s * n[1], s * n[0] + c * n[1]];
    Some(([-nw[0] * pen, -nw[1] * pen], pose.to_world(contact)))
}
