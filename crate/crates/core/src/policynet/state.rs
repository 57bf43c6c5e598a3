//! Kinematic state layout, tokenization and action arithmetic.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const ARM_DIM: usize = 10;
pub const STATE_DIM: usize = 22;
pub const ARM_ACTION_DIM: usize = 7;
pub const ACTION_DIM: usize = 14;
pub const OUTPUT_DIM: usize = 16;
pub const TOKEN_DIM: usize = STATE_DIM + 1;
pub const SEQ_LEN: usize = STATE_DIM + 1;

pub const GRIP_CLOSED_DEG: f64 = 5.0;
pub const GRIP_MAX_DEG: f64 = 90.0;

/// End-effector pose: position, (cos, sin) of three Euler angles, gripper
/// angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub cos_a: f64,
    pub sin_a: f64,
    pub cos_b: f64,
    pub sin_b: f64,
    pub cos_g: f64,
    pub sin_g: f64,
    pub grip: f64,
}

/// Angle from a (cos, sin) pair; errors if the pair is far from the unit circle.
pub fn angle_of(c: f64, s: f64) -> Result<f64> {
    if !(c.hypot(s) >= 0.5) {
        return Err(Error::Data(format!("degenerate angle encoding ({c}, {s})")));
    }
    Ok(s.atan2(c))
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

impl ArmState {
    /// Pose in the plane: z and the first two Euler angles are zero.
    pub fn planar(x: f64, y: f64, yaw: f64, grip: f64) -> Self {
        ArmState {
            x,
            y,
            z: 0.0,
            cos_a: 1.0,
            sin_a: 0.0,
            cos_b: 1.0,
            sin_b: 0.0,
            cos_g: yaw.cos(),
            sin_g: yaw.sin(),
            grip,
        }
    }

    pub fn to_array(&self) -> [f64; ARM_DIM] {
        [
            self.x, self.y, self.z, self.cos_a, self.sin_a, self.cos_b, self.sin_b, self.cos_g, self.sin_g, self.grip,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let &[x, y, z, cos_a, sin_a, cos_b, sin_b, cos_g, sin_g, grip] = v else {
            return Err(Error::Dimension(format!("arm state has {} values", v.len())));
        };
        Ok(ArmState {
            x,
            y,
            z,
            cos_a,
            sin_a,
            cos_b,
            sin_b,
            cos_g,
            sin_g,
            grip,
        })
    }

    pub fn euler(&self) -> Result<[f64; 3]> {
        Ok([
            angle_of(self.cos_a, self.sin_a)?,
            angle_of(self.cos_b, self.sin_b)?,
            angle_of(self.cos_g, self.sin_g)?,
        ])
    }

    pub fn yaw(&self) -> f64 {
        self.sin_g.atan2(self.cos_g)
    }

    /// Applies a 7-d delta `[dx, dy, dz, dα, dβ, dγ, dg]`.
    pub fn apply(&self, d: &[f64]) -> Result<Self> {
        let [a, b, g] = self.euler()?;
        let (na, nb, ng) = (a + d[3], b + d[4], g + d[5]);
        Ok(ArmState {
            x: self.x + d[0],
            y: self.y + d[1],
            z: self.z + d[2],
            cos_a: na.cos(),
            sin_a: na.sin(),
            cos_b: nb.cos(),
            sin_b: nb.sin(),
            cos_g: ng.cos(),
            sin_g: ng.sin(),
            grip: self.grip + d[6],
        })
    }
}

/// The 22-d policy state `[x_gaze, y_gaze, left(10), right(10)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensoryState {
    pub gaze: [f64; 2],
    pub left: ArmState,
    pub right: ArmState,
}

impl SensoryState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        out[..2].copy_from_slice(&self.gaze);
        out[2..12].copy_from_slice(&self.left.to_array());
        out[12..].copy_from_slice(&self.right.to_array());
        out
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(Error::Dimension(format!("sensory state has {} values", v.len())));
        }
        Ok(SensoryState {
            gaze: [v[0], v[1]],
            left: ArmState::from_slice(&v[2..12])?,
            right: ArmState::from_slice(&v[12..])?,
        })
    }
}

/// Token `k` is `[s_k, onehot_22(k)]`; returned row-major as 22 × 23.
pub fn tokenize_state(s: &[f64; STATE_DIM]) -> Vec<f64> {
    let mut out = vec![0.0; STATE_DIM * TOKEN_DIM];
    for (k, &v) in s.iter().enumerate() {
        out[k * TOKEN_DIM] = v;
        out[k * TOKEN_DIM + 1 + k] = 1.0;
    }
    out
}

fn arm_delta(cur: &ArmState, next: &ArmState) -> Result<[f64; ARM_ACTION_DIM]> {
    let a = cur.euler()?;
    let b = next.euler()?;
    Ok([
        next.x - cur.x,
        next.y - cur.y,
        next.z - cur.z,
        wrap_angle(b[0] - a[0]),
        wrap_angle(b[1] - a[1]),
        wrap_angle(b[2] - a[2]),
        next.grip - cur.grip,
    ])
}

/// `a_t = s_{t+1} − s_t` for both arms, angles as wrapped Euler differences.
pub fn compute_action(cur: (&ArmState, &ArmState), next: (&ArmState, &ArmState)) -> Result<[f64; ACTION_DIM]> {
    let mut out = [0.0; ACTION_DIM];
    out[..7].copy_from_slice(&arm_delta(cur.0, next.0)?);
    out[7..].copy_from_slice(&arm_delta(cur.1, next.1)?);
    Ok(out)
}

/// Commanded gripper angle in degrees. A closing signal clamps the command to
/// at most 5°.
pub fn gripper_command(logit: f64, delta_deg: f64, current_deg: f64) -> f64 {
    let base = current_deg + delta_deg;
    if crate::diffcore::sigmoid(logit) > 0.5 {
        base.min(GRIP_CLOSED_DEG)
    } else {
        base.clamp(0.0, GRIP_MAX_DEG)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_state_tokens_are_one_hots() {
        let t = tokenize_state(&[0.0; STATE_DIM]);
        for k in 0..STATE_DIM {
            let row = &t[k * TOKEN_DIM..(k + 1) * TOKEN_DIM];
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if j == k + 1 { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(t.len(), 22 * 23);
    }

    #[test]
    fn swapping_values_moves_only_scalar_slots() {
        let mut s = [0.0; STATE_DIM];
        s[3] = 0.7;
        s[15] = -0.2;
        let a = tokenize_state(&s);
        s.swap(3, 15);
        let b = tokenize_state(&s);
        for k in 0..STATE_DIM {
            assert_eq!(a[k * TOKEN_DIM + 1..(k + 1) * TOKEN_DIM], b[k * TOKEN_DIM + 1..(k + 1) * TOKEN_DIM]);
        }
        assert_eq!(a[3 * TOKEN_DIM], b[15 * TOKEN_DIM]);
    }

    #[test]
    fn action_cases() {
        let s = ArmState::planar(0.1, 0.2, 0.3, 1.0);
        assert_eq!(compute_action((&s, &s), (&s, &s)).unwrap(), [0.0; ACTION_DIM]);
        let a = ArmState::planar(0.0, 0.0, 175f64.to_radians(), 0.0);
        let b = ArmState::planar(0.0, 0.0, (-175f64).to_radians(), 0.0);
        let d = compute_action((&a, &a), (&b, &a)).unwrap();
        assert!((d[5] - 0.174_532_925_199_432_95).abs() < 1e-12);
        assert!((angle_of(0.0, 1.0).unwrap() - PI / 2.0).abs() < 1e-15);
        let mut bad = a;
        bad.cos_g = 0.1;
        bad.sin_g = 0.1;
        assert!(matches!(compute_action((&bad, &a), (&a, &a)), Err(Error::Data(_))));
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn gripper_rule() {
        assert_eq!(gripper_command(10.0, 30.0, 60.0), 5.0);
        assert_eq!(gripper_command(10.0, -58.0, 60.0), 2.0);
        assert_eq!(gripper_command(-10.0, 50.0, 60.0), 90.0);
        assert_eq!(gripper_command(-10.0, -3.0, 60.0), 57.0);
        assert_eq!(gripper_command(0.0, 0.0, 60.0), 60.0);
    }

    #[test]
    fn state_round_trip_and_apply() {
        let s = SensoryState {
            gaze: [0.1, -0.4],
            left: ArmState::planar(-0.5, 0.7, 0.2, 1.0),
            right: ArmState::planar(0.5, 0.7, -0.2, 1.0),
        };
        assert_eq!(SensoryState::from_slice(&s.to_array()).unwrap(), s);
        let next = ArmState::planar(-0.45, 0.66, 0.1, 0.09);
        let d = arm_delta(&s.left, &next).unwrap();
        let back = s.left.apply(&d).unwrap();
        for (a, b) in back.to_array().iter().zip(next.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
