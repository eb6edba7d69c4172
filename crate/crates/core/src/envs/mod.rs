//! Synthetic multi-task 2D environments, scripted demonstrators and the
//! demonstration datasets built from them.

pub mod dataset;
pub mod demo;
pub mod io;
pub mod sim;
pub mod task;

pub use dataset::{generate_dataset, Dataset, Generated, NormStats};
pub use demo::{replay_chunks, scripted_demo, Action, Demo, Demonstrator, Pair};
pub use io::{load_dataset, save_dataset};
pub use sim::{step_env, EnvState};
pub use task::{build_suite, held_out_task, TaskKind, TaskSpec};

/// Observation length: agent (2), gripper (1), objects (2x2), goal (2),
/// task one-hot (7).
pub const OBS_DIM: usize = 16;
/// Action: planar velocity plus gripper command.
pub const ACTION_DIM: usize = 3;
/// Actions per predicted chunk.
pub const CHUNK_HORIZON: usize = 8;
/// Actions executed from each chunk before re-inference.
pub const EXEC_HORIZON: usize = 4;
pub const NUM_OBJECTS: usize = 2;
/// One-hot width; covers the six suite tasks plus the held-out task.
pub const TASK_SLOTS: usize = 7;
