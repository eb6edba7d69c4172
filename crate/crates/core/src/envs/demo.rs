//! Scripted state-feedback demonstrators and demo chunking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sim::{dist, step_env, EnvState, Vec2, DT, ORBIT_RADIUS, PUSH_RADIUS, SPEED};
use super::task::{TaskKind, TaskSpec};
use super::{ACTION_DIM, CHUNK_HORIZON, EXEC_HORIZON};
use crate::error::{Error, Result};

/// Step cap for a scripted episode; layouts the demonstrator cannot finish
/// within it are rejected.
pub const DEMO_STEP_CAP: u32 = 300;

pub type Action = [f32; ACTION_DIM];

/// Saturated proportional controller toward `target`.
fn toward(p: Vec2, target: Vec2) -> [f32; 2] {
    let gain = 1.0 / (DT * SPEED);
    let mut v = [(target[0] - p[0]) * gain, (target[1] - p[1]) * gain];
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n > 1.0 {
        v = [v[0] / n, v[1] / n];
    }
    v
}

fn act(v: [f32; 2], grip: f32) -> Action {
    [v[0], v[1], grip]
}

/// Oracle controller for every task. Holds the latent goal choice for the
/// two-goal task, drawn from a fair coin seeded by the episode.
#[derive(Clone, Debug)]
pub struct Demonstrator {
    right_goal: bool,
}

impl Demonstrator {
    pub fn new(episode_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed ^ 0xc0ff_ee00_d15e_a5e5);
        Self {
            right_goal: rng.random_bool(0.5),
        }
    }

    pub fn chose_right(&self) -> bool {
        self.right_goal
    }

    pub fn act(&self, s: &EnvState) -> Action {
        let p = s.agent;
        let obj = s.objects[0];
        match s.kind {
            TaskKind::Reach | TaskKind::TwoGoal => {
                let goal = if s.kind == TaskKind::TwoGoal && self.right_goal {
                    s.objects[0]
                } else {
                    s.goal
                };
                match s.phase {
                    0 => act(toward(p, goal), 0.0),
                    _ => act(toward(p, goal), -1.0),
                }
            }
            TaskKind::Push => match s.phase {
                0 => act(toward(p, s.push_standoff()), 0.0),
                _ => {
                    let d = dist(obj, s.goal).max(1e-6);
                    let u = [(s.goal[0] - obj[0]) / d, (s.goal[1] - obj[1]) / d];
                    let behind = [obj[0] - u[0] * PUSH_RADIUS, obj[1] - u[1] * PUSH_RADIUS];
                    if dist(p, behind) > 0.05 {
                        return act(toward(p, s.push_standoff()), 0.0);
                    }
                    // Drive along the push line while pulling back onto it.
                    let v = [u[0] + 6.0 * (behind[0] - p[0]), u[1] + 6.0 * (behind[1] - p[1])];
                    let n = (v[0] * v[0] + v[1] * v[1]).sqrt().max(1e-6);
                    let speed = (d / (DT * SPEED)).min(1.0);
                    act([v[0] / n * speed, v[1] / n * speed], 0.0)
                }
            },
            TaskKind::PickPlace => match s.phase {
                0 => act(toward(p, obj), 1.0),
                1 => act(toward(p, obj), -1.0),
                2 => act(toward(p, s.goal), -1.0),
                _ => act([0.0, 0.0], 1.0),
            },
            TaskKind::Fold => match s.phase {
                0 => act(toward(p, obj), 1.0),
                1 => act(toward(p, obj), -1.0),
                2 => act(toward(p, s.aux), -1.0),
                3 => act(toward(p, s.goal), -1.0),
                _ => act([0.0, 0.0], 1.0),
            },
            TaskKind::Stir | TaskKind::PickStir => {
                let carry = s.kind == TaskKind::PickStir;
                let orbit_phase = if carry { 3 } else { 2 };
                match s.phase {
                    0 => act(toward(p, obj), 1.0),
                    1 => act(toward(p, obj), -1.0),
                    ph if carry && ph == 2 => act(toward(p, s.orbit_start()), -1.0),
                    ph if ph == orbit_phase => {
                        let c = s.orbit_center();
                        let ang = (p[1] - c[1]).atan2(p[0] - c[0]);
                        let next = (ang.max(s.orbit_progress) + 0.35).min(std::f32::consts::PI);
                        let target = [c[0] + ORBIT_RADIUS * next.cos(), c[1] + ORBIT_RADIUS * next.sin()];
                        act(toward(p, target), -1.0)
                    }
                    _ => act([0.0, 0.0], 1.0),
                }
            }
        }
    }
}

/// One observation paired with the next `CHUNK_HORIZON` actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub task_id: u32,
    pub episode: u32,
    pub phase: u32,
    pub timestep: u32,
    pub obs: Vec<f32>,
    /// Row-major `[CHUNK_HORIZON, ACTION_DIM]`.
    pub chunk: Vec<f32>,
}

/// A successful scripted episode.
#[derive(Clone, Debug)]
pub struct Demo {
    pub initial: EnvState,
    pub actions: Vec<Action>,
    pub pairs: Vec<Pair>,
    pub chose_right: bool,
}

impl Demo {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Runs the demonstrator on `task` from the layout of `episode_seed` and
/// chunks the result. Chunks start every `EXEC_HORIZON` steps; actions past
/// the end of the episode are padded with zero velocity and the final
/// gripper command.
pub fn scripted_demo(task: &TaskSpec, episode_seed: u64) -> Result<Demo> {
    let layout = task.layout_seed(episode_seed);
    let initial = EnvState::reset(task, layout);
    let demo = Demonstrator::new(layout);
    let mut s = initial.clone();
    let mut states = Vec::new();
    let mut actions = Vec::new();
    while !s.success {
        if s.t >= DEMO_STEP_CAP {
            return Err(Error::Generation {
                task: task.name.clone(),
                reason: format!("demonstrator did not finish layout {layout} within {DEMO_STEP_CAP} steps"),
            });
        }
        let a = demo.act(&s);
        states.push(s.clone());
        actions.push(a);
        s = step_env(&s, &a);
    }
    let pad = [0.0, 0.0, actions.last().map_or(0.0, |a| a[2])];
    let pairs = (0..actions.len())
        .step_by(EXEC_HORIZON)
        .map(|t| {
            let mut chunk = Vec::with_capacity(CHUNK_HORIZON * ACTION_DIM);
            for h in 0..CHUNK_HORIZON {
                chunk.extend_from_slice(actions.get(t + h).unwrap_or(&pad));
            }
            Pair {
                task_id: task.task_id,
                episode: episode_seed as u32,
                phase: states[t].phase,
                timestep: t as u32,
                obs: states[t].observation(),
                chunk,
            }
        })
        .collect();
    Ok(Demo {
        initial,
        actions,
        pairs,
        chose_right: demo.chose_right(),
    })
}

/// Executes the first `EXEC_HORIZON` actions of each chunk open-loop and
/// reports whether the task succeeded.
pub fn replay_chunks(initial: &EnvState, chunks: &[Vec<f32>]) -> bool {
    let mut s = initial.clone();
    for chunk in chunks {
        for a in chunk.chunks(ACTION_DIM).take(EXEC_HORIZON) {
            s = step_env(&s, a);
            if s.success {
                return true;
            }
        }
    }
    s.success
}
