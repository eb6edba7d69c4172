//! Point-mass arena kinematics, grasping and per-task phase predicates.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::{TaskKind, TaskSpec};
use super::{ACTION_DIM, NUM_OBJECTS, OBS_DIM, TASK_SLOTS};

pub const ARENA: f32 = 1.0;
pub const DT: f32 = 0.05;
pub const SPEED: f32 = 1.0;
/// Gripper open-fraction change per step at full command.
pub const GRIP_RATE: f32 = 0.25;
pub const GRASP_RADIUS: f32 = 0.06;
pub const PUSH_RADIUS: f32 = 0.08;
pub const ORBIT_RADIUS: f32 = 0.15;
/// Distance at which a waypoint counts as reached for phase bookkeeping.
const WAYPOINT_TOL: f32 = 0.03;

pub type Vec2 = [f32; 2];

pub fn dist(a: Vec2, b: Vec2) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn unit(from: Vec2, to: Vec2) -> Vec2 {
    let d = dist(from, to).max(1e-6);
    [(to[0] - from[0]) / d, (to[1] - from[1]) / d]
}

fn clamp_arena(p: Vec2) -> Vec2 {
    [p[0].clamp(-ARENA, ARENA), p[1].clamp(-ARENA, ARENA)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub kind: TaskKind,
    pub agent: Vec2,
    /// Open fraction: 1 fully open, 0 fully closed.
    pub gripper: f32,
    pub objects: [Vec2; NUM_OBJECTS],
    pub goal: Vec2,
    /// Task-specific fixed point: fold waypoint.
    pub aux: Vec2,
    pub held: Option<usize>,
    pub phase: u32,
    pub t: u32,
    /// Largest orbit angle reached while holding the stick (stir tasks).
    pub orbit_progress: f32,
    pub goal_radius: f32,
    pub success: bool,
}

impl EnvState {
    /// Samples the initial layout for `task` from `layout_seed`.
    pub fn reset(task: &TaskSpec, layout_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(layout_seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut s = Self {
            kind: task.kind,
            agent: [0.0; 2],
            gripper: 1.0,
            objects: [[0.0; 2]; NUM_OBJECTS],
            goal: [0.0; 2],
            aux: [0.0; 2],
            held: None,
            phase: 0,
            t: 0,
            orbit_progress: 0.0,
            goal_radius: task.success.goal_radius,
            success: false,
        };
        let mut u = |lo: f32, hi: f32| rng.random_range(lo..hi);
        match task.kind {
            TaskKind::Reach => loop {
                s.agent = [u(-0.8, 0.8), u(-0.8, 0.8)];
                s.goal = [u(-0.8, 0.8), u(-0.8, 0.8)];
                if dist(s.agent, s.goal) >= 0.4 {
                    break;
                }
            },
            TaskKind::Push => loop {
                s.goal = [u(-0.6, 0.6), u(-0.6, 0.6)];
                let ang = u(-PI, PI);
                let d = u(0.35, 0.6);
                let obj = [s.goal[0] + d * ang.cos(), s.goal[1] + d * ang.sin()];
                let to_goal = unit(obj, s.goal);
                let back = u(0.15, 0.3);
                let side = u(-0.1, 0.1);
                let agent = [
                    obj[0] - to_goal[0] * back - to_goal[1] * side,
                    obj[1] - to_goal[1] * back + to_goal[0] * side,
                ];
                let inside = |p: Vec2| p[0].abs() <= 0.85 && p[1].abs() <= 0.85;
                if inside(obj) && inside(agent) {
                    s.objects[0] = obj;
                    s.agent = agent;
                    break;
                }
            },
            TaskKind::PickPlace => loop {
                s.agent = [u(-0.8, 0.8), u(-0.8, 0.8)];
                s.objects[0] = [u(-0.8, 0.8), u(-0.8, 0.8)];
                s.goal = [u(-0.8, 0.8), u(-0.8, 0.8)];
                if dist(s.agent, s.objects[0]) >= 0.3 && dist(s.objects[0], s.goal) >= 0.3 {
                    break;
                }
            },
            TaskKind::TwoGoal => {
                s.goal = [u(-0.68, -0.62), u(0.42, 0.48)];
                s.objects[0] = [u(0.62, 0.68), u(0.42, 0.48)];
                s.agent = [u(-0.03, 0.03), u(-0.58, -0.52)];
            }
            TaskKind::Fold => {
                let side = if u(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
                let edge = [side * u(0.5, 0.7), u(-0.5, 0.2)];
                s.objects[0] = edge;
                s.goal = [-edge[0] + u(-0.05, 0.05), edge[1] + u(-0.05, 0.05)];
                s.aux = [(edge[0] + s.goal[0]) / 2.0, edge[1] + 0.35];
                s.objects[1] = s.aux;
                s.agent = [u(-0.5, 0.5), u(-0.9, -0.7)];
            }
            TaskKind::Stir => loop {
                s.goal = [u(-0.5, 0.5), u(-0.5, 0.5)];
                s.objects[0] = [s.goal[0] + ORBIT_RADIUS, s.goal[1]];
                s.agent = [u(-0.8, 0.8), u(-0.8, 0.8)];
                if dist(s.agent, s.objects[0]) >= 0.3 {
                    break;
                }
            },
            TaskKind::PickStir => loop {
                s.goal = [u(-0.4, 0.4), u(-0.4, 0.4)];
                s.objects[0] = [u(-0.8, 0.8), u(-0.8, 0.8)];
                s.agent = [u(-0.8, 0.8), u(-0.8, 0.8)];
                if dist(s.objects[0], s.goal) >= 0.4 && dist(s.agent, s.objects[0]) >= 0.3 {
                    break;
                }
            },
        }
        s
    }

    /// Flat observation: agent, gripper, object positions, goal, task
    /// one-hot.
    pub fn observation(&self) -> Vec<f32> {
        let mut o = Vec::with_capacity(OBS_DIM);
        o.extend_from_slice(&self.agent);
        o.push(self.gripper);
        for obj in &self.objects {
            o.extend_from_slice(obj);
        }
        o.extend_from_slice(&self.goal);
        let mut onehot = [0.0; TASK_SLOTS];
        onehot[self.kind.slot()] = 1.0;
        o.extend_from_slice(&onehot);
        debug_assert_eq!(o.len(), OBS_DIM);
        o
    }

    pub fn orbit_center(&self) -> Vec2 {
        self.goal
    }

    pub fn orbit_start(&self) -> Vec2 {
        [self.goal[0] + ORBIT_RADIUS, self.goal[1]]
    }

    pub fn orbit_end(&self) -> Vec2 {
        [self.goal[0] - ORBIT_RADIUS, self.goal[1]]
    }

    /// Pre-push standoff point behind object 0, on the line to the goal.
    pub fn push_standoff(&self) -> Vec2 {
        let obj = self.objects[0];
        let u = unit(obj, self.goal);
        [obj[0] - u[0] * (PUSH_RADIUS + 0.04), obj[1] - u[1] * (PUSH_RADIUS + 0.04)]
    }

    fn grippable(&self) -> bool {
        matches!(
            self.kind,
            TaskKind::PickPlace | TaskKind::Fold | TaskKind::Stir | TaskKind::PickStir
        )
    }

    fn update_phase(&mut self) {
        let p = self.agent;
        let obj = self.objects[0];
        let grasped = self.held == Some(0) && self.gripper <= 0.0;
        let released = self.held.is_none() && self.gripper >= 1.0;
        let r = self.goal_radius;
        match self.kind {
            TaskKind::Reach | TaskKind::TwoGoal => {
                let targets: &[Vec2] = if self.kind == TaskKind::Reach {
                    &[self.goal]
                } else {
                    &[self.goal, self.objects[0]]
                };
                let near = targets.iter().map(|&g| dist(p, g)).fold(f32::INFINITY, f32::min);
                if self.phase == 0 && near < 0.05 {
                    self.phase = 1;
                }
                if self.phase == 1 && self.gripper <= 0.0 && near < r {
                    self.success = true;
                }
            }
            TaskKind::Push => {
                if self.phase == 0 && (dist(p, self.push_standoff()) < WAYPOINT_TOL || dist(p, obj) <= PUSH_RADIUS + 1e-4) {
                    self.phase = 1;
                }
                if dist(obj, self.goal) < r {
                    self.success = true;
                }
            }
            TaskKind::PickPlace => {
                if self.phase == 0 && dist(p, obj) < WAYPOINT_TOL {
                    self.phase = 1;
                }
                if self.phase == 1 && grasped {
                    self.phase = 2;
                }
                if self.phase == 2 && self.held == Some(0) && dist(obj, self.goal) < WAYPOINT_TOL {
                    self.phase = 3;
                }
                if self.phase == 3 && released && dist(obj, self.goal) < r {
                    self.success = true;
                }
            }
            TaskKind::Fold => {
                if self.phase == 0 && dist(p, obj) < WAYPOINT_TOL {
                    self.phase = 1;
                }
                if self.phase == 1 && grasped {
                    self.phase = 2;
                }
                if self.phase == 2 && self.held == Some(0) && dist(obj, self.aux) < 0.05 {
                    self.phase = 3;
                }
                if self.phase == 3 && self.held == Some(0) && dist(obj, self.goal) < WAYPOINT_TOL {
                    self.phase = 4;
                }
                if self.phase == 4 && released && dist(obj, self.goal) < r {
                    self.success = true;
                }
            }
            TaskKind::Stir | TaskKind::PickStir => {
                let carry = self.kind == TaskKind::PickStir;
                let orbit_phase = if carry { 3 } else { 2 };
                if self.phase == 0 && dist(p, obj) < WAYPOINT_TOL {
                    self.phase = 1;
                }
                if self.phase == 1 && grasped {
                    self.phase = 2;
                }
                if carry && self.phase == 2 && self.held == Some(0) && dist(obj, self.orbit_start()) < WAYPOINT_TOL {
                    self.phase = 3;
                }
                if self.phase == orbit_phase && self.held == Some(0) {
                    let c = self.orbit_center();
                    let rad = dist(obj, c);
                    let ang = (obj[1] - c[1]).atan2(obj[0] - c[0]);
                    if (rad - ORBIT_RADIUS).abs() < 0.06 && ang > -0.3 && ang - self.orbit_progress < 0.6 {
                        self.orbit_progress = self.orbit_progress.max(ang);
                    }
                    if self.orbit_progress > PI - 0.35 && dist(obj, self.orbit_end()) < 0.04 {
                        self.phase = orbit_phase + 1;
                    }
                }
                if self.phase == orbit_phase + 1 && released && dist(obj, self.orbit_end()) < r {
                    self.success = true;
                }
            }
        }
    }
}

/// Clamps each action entry to `[-1, 1]`; non-finite entries become 0.
pub fn clamp_action(action: &[f32]) -> [f32; ACTION_DIM] {
    let mut a = [0.0; ACTION_DIM];
    for (dst, &src) in a.iter_mut().zip(action) {
        *dst = if src.is_finite() { src.clamp(-1.0, 1.0) } else { 0.0 };
    }
    a
}

/// One kinematic step: velocity integration, gripper update, grasp and
/// release, pushing contact, then phase and success predicates.
pub fn step_env(state: &EnvState, action: &[f32]) -> EnvState {
    let a = clamp_action(action);
    let mut s = state.clone();
    s.agent = clamp_arena([s.agent[0] + DT * SPEED * a[0], s.agent[1] + DT * SPEED * a[1]]);
    s.gripper = (s.gripper + GRIP_RATE * a[2]).clamp(0.0, 1.0);

    if s.held.is_some() && s.gripper > 0.5 {
        s.held = None;
    }
    if s.held.is_none() && s.gripper <= 0.5 && s.grippable() && dist(s.agent, s.objects[0]) < GRASP_RADIUS {
        s.held = Some(0);
    }
    if let Some(i) = s.held {
        s.objects[i] = s.agent;
    }
    if s.kind == TaskKind::Push {
        let obj = s.objects[0];
        let d = dist(s.agent, obj);
        if d < PUSH_RADIUS {
            // Contact carries the object with the agent's displacement, then
            // resolves any remaining overlap radially.
            let moved = [obj[0] + s.agent[0] - state.agent[0], obj[1] + s.agent[1] - state.agent[1]];
            let dm = dist(s.agent, moved);
            let pushed = if dm >= PUSH_RADIUS {
                moved
            } else {
                let u = if dm > 1e-6 { unit(s.agent, moved) } else { unit(state.agent, s.agent) };
                [s.agent[0] + u[0] * PUSH_RADIUS, s.agent[1] + u[1] * PUSH_RADIUS]
            };
            s.objects[0] = clamp_arena(pushed);
        }
    }
    s.t += 1;
    s.update_phase();
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::task::build_suite;

    fn reach_state() -> EnvState {
        let mut s = EnvState::reset(&build_suite(0)[0], 3);
        s.agent = [0.0, 0.0];
        s
    }

    #[test]
    fn zero_action_keeps_position() {
        let s = reach_state();
        let n = step_env(&s, &[0.0, 0.0, 0.0]);
        assert_eq!(n.agent, s.agent);
        assert_eq!(n.t, s.t + 1);
    }

    #[test]
    fn unit_velocity_moves_dt() {
        let s = reach_state();
        let n = step_env(&s, &[1.0, 0.0, 0.0]);
        assert!((n.agent[0] - 0.05).abs() < 1e-7);
        assert_eq!(n.agent[1], 0.0);
    }

    #[test]
    fn position_clamped_to_arena() {
        let mut s = reach_state();
        s.agent = [0.99, 0.0];
        let n = step_env(&s, &[1.0, 0.0, 0.0]);
        assert_eq!(n.agent[0], 1.0);
        let n = step_env(&n, &[5.0, 0.0, 0.0]);
        assert_eq!(n.agent[0], 1.0);
    }

    #[test]
    fn observation_has_fixed_width_and_one_hot() {
        for t in build_suite(0) {
            let o = EnvState::reset(&t, 11).observation();
            assert_eq!(o.len(), OBS_DIM);
            let hot: f32 = o[OBS_DIM - TASK_SLOTS..].iter().sum();
            assert_eq!(hot, 1.0);
            assert_eq!(o[OBS_DIM - TASK_SLOTS + t.kind.slot()], 1.0);
        }
    }

    #[test]
    fn grasp_and_carry() {
        let task = &build_suite(0)[2];
        let mut s = EnvState::reset(task, 5);
        s.agent = s.objects[0];
        for _ in 0..2 {
            s = step_env(&s, &[0.0, 0.0, -1.0]);
        }
        assert_eq!(s.held, Some(0));
        s = step_env(&s, &[1.0, 0.0, -1.0]);
        assert_eq!(s.objects[0], s.agent);
    }
}
