//! Top-down flat-shaded rasterizer.

use super::world::{Shape, World, BOX_HALF};

pub const BACKGROUND: [u8; 3] = [228, 226, 218];
pub const GOAL_COLOR: [u8; 3] = [196, 222, 196];
pub const LEFT_COLOR: [u8; 3] = [40, 80, 220];
pub const RIGHT_COLOR: [u8; 3] = [30, 160, 60];
pub const MARKER_RADIUS: f64 = 0.025;

/// World coordinates of the center of pixel `(px, py)`.
pub fn pixel_center(px: usize, py: usize, size: usize) -> [f64; 2] {
    [
        (px as f64 + 0.5) / size as f64 * 2.0 - 1.0,
        (py as f64 + 0.5) / size as f64 * 2.0 - 1.0,
    ]
}

/// Pixel containing world point `p`.
pub fn world_to_pixel(p: [f64; 2], size: usize) -> (usize, usize) {
    let f = |v: f64| (((v + 1.0) / 2.0 * size as f64).floor().max(0.0) as usize).min(size - 1);
    (f(p[0]), f(p[1]))
}

struct Canvas {
    size: usize,
    data: Vec<u8>,
}

impl Canvas {
    fn fill(&mut self, color: [u8; 3], inside: impl Fn([f64; 2]) -> bool, bbox: [f64; 4]) {
        let n = self.size;
        let (x0, y0) = world_to_pixel([bbox[0], bbox[1]], n);
        let (x1, y1) = world_to_pixel([bbox[2], bbox[3]], n);
        for py in y0..=y1 {
            for px in x0..=x1 {
                if inside(pixel_center(px, py, n)) {
                    for (c, &v) in color.iter().enumerate() {
                        self.data[(c * n + py) * n + px] = v;
                    }
                }
            }
        }
    }

    fn disc(&mut self, center: [f64; 2], r: f64, color: [u8; 3]) {
        self.fill(
            color,
            |p| (p[0] - center[0]).hypot(p[1] - center[1]) <= r,
            [center[0] - r, center[1] - r, center[0] + r, center[1] + r],
        );
    }

    fn block(&mut self, pose: &super::world::Pose2, half: [f64; 2], color: [u8; 3]) {
        let ext = half[0].hypot(half[1]);
        self.fill(
            color,
            |p| {
                let q = pose.to_local(p);
                q[0].abs() <= half[0] && q[1].abs() <= half[1]
            },
            [pose.x - ext, pose.y - ext, pose.x + ext, pose.y + ext],
        );
    }
}

fn darker(c: [u8; 3]) -> [u8; 3] {
    c.map(|v| v / 2)
}

/// Renders the global camera image as `3 × H × W` bytes.
pub fn render_global(world: &World) -> Vec<u8> {
    let n = world.config.image_size;
    let mut canvas = Canvas {
        size: n,
        data: Vec::with_capacity(3 * n * n),
    };
    for c in BACKGROUND {
        canvas.data.extend(std::iter::repeat_n(c, n * n));
    }
    if let Some(goal) = &world.goal {
        canvas.block(goal, BOX_HALF, GOAL_COLOR);
    }
    // held objects are drawn last so they stay visible above the table layer
    let mut order: Vec<&super::world::Object> = world.objects.iter().collect();
    order.sort_by_key(|o| o.held_by.is_some());
    for o in order {
        match o.shape {
            Shape::Disc { radius } => canvas.disc([o.pose.x, o.pose.y], radius, o.color),
            Shape::Block { half } => canvas.block(&o.pose, half, o.color),
        }
    }
    for (e, color) in [(&world.left, LEFT_COLOR), (&world.right, RIGHT_COLOR)] {
        let color = if e.grip_deg <= super::world::GRIP_RELEASE_DEG { darker(color) } else { color };
        canvas.disc(e.pos(), MARKER_RADIUS, color);
    }
    canvas.data
}
