use serde::{Deserialize, Serialize};

/// The synthetic task families. The first six form the training suite;
/// `PickStir` is held out for fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Reach,
    Push,
    PickPlace,
    TwoGoal,
    Fold,
    Stir,
    PickStir,
}

impl TaskKind {
    pub const SUITE: [TaskKind; 6] = [
        TaskKind::Reach,
        TaskKind::Push,
        TaskKind::PickPlace,
        TaskKind::TwoGoal,
        TaskKind::Fold,
        TaskKind::Stir,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach-goal",
            TaskKind::Push => "push-object",
            TaskKind::PickPlace => "pick-and-place",
            TaskKind::TwoGoal => "two-goal-reach",
            TaskKind::Fold => "fold-drag",
            TaskKind::Stir => "stir-orbit",
            TaskKind::PickStir => "pick-and-stir",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::SUITE
            .iter()
            .chain(std::iter::once(&TaskKind::PickStir))
            .copied()
            .find(|k| k.name() == name)
    }

    /// Fixed slot in the observation's task one-hot.
    pub fn slot(self) -> usize {
        match self {
            TaskKind::Reach => 0,
            TaskKind::Push => 1,
            TaskKind::PickPlace => 2,
            TaskKind::TwoGoal => 3,
            TaskKind::Fold => 4,
            TaskKind::Stir => 5,
            TaskKind::PickStir => 6,
        }
    }

    pub fn phase_count(self) -> u32 {
        match self {
            TaskKind::Reach | TaskKind::Push | TaskKind::TwoGoal => 2,
            TaskKind::PickPlace | TaskKind::Stir => 4,
            TaskKind::Fold | TaskKind::PickStir => 5,
        }
    }
}

/// Success-predicate parameters shared by all tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessParams {
    /// Final distance tolerance (agent or object to its target).
    pub goal_radius: f32,
    /// Whether success requires the gripper fully closed (reach-like tasks)
    /// or fully open with the object released (manipulation tasks).
    pub requires_release: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub kind: TaskKind,
    pub name: String,
    pub phase_count: u32,
    /// Half-open range of layout seeds this suite draws episodes from.
    pub layout_seed_range: (u64, u64),
    pub success: SuccessParams,
}

impl TaskSpec {
    pub fn new(task_id: u32, kind: TaskKind, suite_seed: u64) -> Self {
        let base = suite_seed
            .wrapping_mul(10_000_000)
            .wrapping_add(kind.slot() as u64 * 1_000_000);
        Self {
            task_id,
            kind,
            name: kind.name().to_string(),
            phase_count: kind.phase_count(),
            layout_seed_range: (base, base + 1_000_000),
            success: SuccessParams {
                goal_radius: 0.06,
                requires_release: !matches!(kind, TaskKind::Reach | TaskKind::TwoGoal),
            },
        }
    }

    /// Layout seed for the `episode`-th episode of this task.
    pub fn layout_seed(&self, episode: u64) -> u64 {
        let (lo, hi) = self.layout_seed_range;
        lo + episode % (hi - lo)
    }
}

/// The six-task training suite. Structure is seed-independent; only the
/// layout seed ranges move with `seed`.
pub fn build_suite(seed: u64) -> Vec<TaskSpec> {
    TaskKind::SUITE
        .iter()
        .enumerate()
        .map(|(i, &k)| TaskSpec::new(i as u32, k, seed))
        .collect()
}

/// The held-out task used for fine-tuning experiments. Its id follows the
/// suite's.
pub fn held_out_task(seed: u64) -> TaskSpec {
    TaskSpec::new(TaskKind::SUITE.len() as u32, TaskKind::PickStir, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_has_six_distinct_ids() {
        let s = build_suite(0);
        assert_eq!(s.len(), 6);
        let ids: Vec<u32> = s.iter().map(|t| t.task_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn every_task_has_at_least_two_phases() {
        for seed in [0, 1, 99] {
            assert!(build_suite(seed).iter().all(|t| t.phase_count >= 2));
        }
        assert!(held_out_task(0).phase_count >= 2);
    }

    #[test]
    fn seeds_change_layout_ranges_only() {
        let (a, b) = (build_suite(0), build_suite(1));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.task_id, x.kind, x.phase_count), (y.task_id, y.kind, y.phase_count));
            assert_ne!(x.layout_seed_range, y.layout_seed_range);
        }
    }

    #[test]
    fn names_round_trip() {
        for k in TaskKind::SUITE {
            assert_eq!(TaskKind::from_name(k.name()), Some(k));
        }
        assert_eq!(TaskKind::from_name("pick-and-stir"), Some(TaskKind::PickStir));
    }
}
