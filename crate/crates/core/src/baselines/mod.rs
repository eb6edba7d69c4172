//! Comparison routers: per-layer gated top-1 mixtures with a load-balancing
//! penalty, and fixed task-to-expert assignment.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{TaskKind, TaskSpec, OBS_DIM, TASK_SLOTS};
use crate::error::{Error, Result};
use crate::model::{GateRecord, NoisePredictor};
use crate::numeric::{Linear, ParamId, ParamStore, Tape, Tensor, Var};

/// Routed fractions `f` and mean gate probabilities `p` over a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub f: Vec<f32>,
    pub p: Vec<f32>,
}

impl RoutingStats {
    /// From `[B, K]` gate probabilities and the chosen expert per row.
    pub fn from_gates(probs: &Tensor, chosen: &[usize]) -> Result<Self> {
        let (b, k) = (probs.rows(), probs.cols());
        if b == 0 || chosen.len() != b {
            return Err(Error::dim("routing stats", b, chosen.len()));
        }
        let mut counts = vec![0usize; k];
        for &c in chosen {
            if c >= k {
                return Err(Error::Routing(format!("row routed to expert {c} of {k}")));
            }
            counts[c] += 1;
        }
        let f = counts.iter().map(|&c| (c as f64 / b as f64) as f32).collect();
        let p = (0..k)
            .map(|e| (probs.column(e).iter().map(|&v| v as f64).sum::<f64>() / b as f64) as f32)
            .collect();
        Ok(Self { f, p })
    }

    pub fn experts(&self) -> usize {
        self.f.len()
    }
}

/// `N * sum_i f_i * p_i` with `N` the number of experts.
pub fn load_balancing_loss(stats: &RoutingStats) -> f32 {
    let k = stats.experts() as f64;
    (k * stats.f.iter().zip(&stats.p).map(|(&f, &p)| f as f64 * p as f64).sum::<f64>()) as f32
}

/// The same penalty on the tape, differentiable through the gate
/// probabilities; `f` is treated as a constant.
pub fn load_balancing_term(tape: &mut Tape<'_>, record: &GateRecord) -> Result<Var> {
    let probs = tape.value(record.probs);
    let (b, k) = (probs.rows(), probs.cols());
    let stats = RoutingStats::from_gates(probs, &record.chosen)?;
    let f = tape.constant(Tensor::matrix(k, 1, stats.f)?);
    let pf = tape.matmul(record.probs, f)?;
    let s = tape.sum_all(pf);
    Ok(tape.scale(s, k as f32 / b as f32))
}

/// One linear gate per mixture layer, reading that layer's hidden input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGates {
    pub gates: Vec<Linear>,
}

impl LayerGates {
    pub fn new(store: &mut ParamStore, name: &str, model: &NoisePredictor, rng: &mut impl Rng) -> Self {
        let gates = (0..model.moe_layers())
            .map(|i| Linear::new(store, &format!("{name}.layer{i}"), model.config.hidden, model.experts(), rng))
            .collect();
        Self { gates }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.gates.iter().flat_map(|g| g.params()).collect()
    }
}

/// Applies one gated top-1 mixture to `x` given per-expert outputs:
/// row `i` becomes `p[i, c_i] * outputs[c_i][i]` with `c_i = argmax p[i]`.
pub fn vanilla_moe_forward(gate_probs: &Tensor, expert_outputs: &[Tensor]) -> Result<(Tensor, RoutingStats)> {
    let (b, k) = (gate_probs.rows(), gate_probs.cols());
    if expert_outputs.len() != k {
        return Err(Error::dim("vanilla_moe_forward experts", k, expert_outputs.len()));
    }
    let cols = expert_outputs[0].cols();
    let chosen: Vec<usize> = (0..b).map(|r| crate::model::argmax(gate_probs.row(r))).collect();
    let mut out = Tensor::zeros(&[b, cols]);
    for (r, &c) in chosen.iter().enumerate() {
        let w = gate_probs.get(r, c);
        out.row_mut(r)
            .iter_mut()
            .zip(expert_outputs[c].row(r))
            .for_each(|(o, v)| *o = w * v);
    }
    let stats = RoutingStats::from_gates(gate_probs, &chosen)?;
    Ok((out, stats))
}

/// Fixed task-to-expert map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub map: BTreeMap<u32, usize>,
    pub experts: usize,
}

impl TaskAssignment {
    pub fn new(map: BTreeMap<u32, usize>, experts: usize) -> Result<Self> {
        if let Some((t, e)) = map.iter().find(|(_, &e)| e >= experts) {
            return Err(Error::Routing(format!("task {t} mapped to expert {e}, only {experts} experts")));
        }
        Ok(Self { map, experts })
    }

    /// Identity map for `n` tasks onto `n` experts.
    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).map(|i| (i as u32, i)).collect(),
            experts: n,
        }
    }

    /// Default five-expert partition of the suite: the two reach-like tasks
    /// share an expert, every other task has its own, and the held-out task
    /// reuses the stirring expert.
    pub fn default_for(tasks: &[TaskSpec], experts: usize) -> Result<Self> {
        let slot_expert = |k: TaskKind| match k {
            TaskKind::Reach | TaskKind::TwoGoal => 0,
            TaskKind::Push => 1,
            TaskKind::PickPlace => 2,
            TaskKind::Fold => 3,
            TaskKind::Stir | TaskKind::PickStir => 4,
        };
        let map = tasks
            .iter()
            .map(|t| (t.task_id, slot_expert(t.kind) % experts.max(1)))
            .collect();
        Self::new(map, experts)
    }

    /// Checks that every task of `tasks` is mapped.
    pub fn covers(&self, tasks: &[TaskSpec]) -> Result<()> {
        match tasks.iter().find(|t| !self.map.contains_key(&t.task_id)) {
            Some(t) => Err(Error::Routing(format!("task {} ({}) has no expert", t.task_id, t.name))),
            None => Ok(()),
        }
    }

    pub fn expert_for_task(&self, task_id: u32) -> Result<usize> {
        self.map
            .get(&task_id)
            .copied()
            .ok_or_else(|| Error::Routing(format!("task {task_id} has no expert")))
    }
}

/// Reads the task from the one-hot of a raw observation and returns its
/// assigned expert. Never consults a learned router.
pub fn taskwise_route(assignment: &TaskAssignment, obs: &[f32]) -> Result<usize> {
    if obs.len() != OBS_DIM {
        return Err(Error::dim("taskwise_route", OBS_DIM, obs.len()));
    }
    let hot = &obs[OBS_DIM - TASK_SLOTS..];
    let ones: Vec<usize> = hot.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
    if ones.len() != 1 || hot.iter().sum::<f32>() != 1.0 {
        return Err(Error::Routing(format!("observation has an invalid task one-hot {hot:?}")));
    }
    assignment.expert_for_task(ones[0] as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_suite, EnvState};

    #[test]
    fn balancing_loss_examples() {
        let u = RoutingStats {
            f: vec![0.25; 4],
            p: vec![0.25; 4],
        };
        assert_eq!(load_balancing_loss(&u), 1.0);
        let c = RoutingStats {
            f: vec![1.0, 0.0, 0.0],
            p: vec![1.0, 0.0, 0.0],
        };
        assert_eq!(load_balancing_loss(&c), 3.0);
        let s = RoutingStats {
            f: vec![0.75, 0.25],
            p: vec![0.6, 0.4],
        };
        assert!((load_balancing_loss(&s) - 1.1).abs() < 1e-6);
    }

    #[test]
    fn one_hot_gate_selects_expert_output() {
        let probs = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let (out, stats) = vanilla_moe_forward(&probs, &[a, b]).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 3.0, 4.0]);
        assert_eq!(stats.f, vec![0.5, 0.5]);
    }

    #[test]
    fn identical_experts_make_routing_irrelevant() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        let p1 = Tensor::from_rows(&[vec![0.7, 0.3], vec![0.7, 0.3]]).unwrap();
        let p2 = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        let (o1, _) = vanilla_moe_forward(&p1, &[x.clone(), x.clone()]).unwrap();
        let (o2, _) = vanilla_moe_forward(&p2, &[x.clone(), x]).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn task_routing() {
        let id = TaskAssignment::identity(5);
        let suite = build_suite(0);
        for t in &suite[..5] {
            let o = EnvState::reset(t, 1).observation();
            assert_eq!(taskwise_route(&id, &o).unwrap(), t.task_id as usize);
        }
        let def = TaskAssignment::default_for(&suite, 5).unwrap();
        let reach = EnvState::reset(&suite[0], 0).observation();
        let two = EnvState::reset(&suite[3], 0).observation();
        assert_eq!(taskwise_route(&def, &reach).unwrap(), taskwise_route(&def, &two).unwrap());
        let distinct: std::collections::BTreeSet<usize> = def.map.values().copied().collect();
        assert_eq!(distinct.len(), 5);
        let o = EnvState::reset(&suite[5], 0).observation();
        assert!(matches!(taskwise_route(&id, &o), Err(Error::Routing(_))));
        assert!(TaskAssignment::new([(0, 5)].into_iter().collect(), 5).is_err());
    }
}
