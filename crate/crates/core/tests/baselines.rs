use std::collections::BTreeMap;

use dibm::baselines::{load_balancing_loss, taskwise_route, vanilla_moe_forward, RoutingStats, TaskAssignment};
use dibm::envs::{build_suite, generate_dataset, held_out_task};
use dibm::error::Error;
use dibm::numeric::Tensor;
use proptest::prelude::*;

#[test]
fn vanilla_forward_scales_the_chosen_branch() {
    let probs = Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8]]).unwrap();
    let outs: Vec<Tensor> = (0..3).map(|e| Tensor::full(&[2, 2], e as f32 + 1.0)).collect();
    let (y, stats) = vanilla_moe_forward(&probs, &outs).unwrap();
    assert_eq!(y.data(), &[0.7, 0.7, 2.4, 2.4]);
    assert_eq!(stats.f, vec![0.5, 0.0, 0.5]);
    let want_p = [0.4f32, 0.15, 0.45];
    assert!(stats.p.iter().zip(want_p).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!((load_balancing_loss(&stats) - 3.0 * (0.5 * 0.4 + 0.5 * 0.45)).abs() < 1e-6);
    assert!(vanilla_moe_forward(&probs, &outs[..2]).is_err());
}

#[test]
fn task_routing_follows_the_one_hot() {
    let suite = build_suite(0);
    let assignment = TaskAssignment::default_for(&suite, 5).unwrap();
    assignment.covers(&suite).unwrap();
    assert!(assignment.covers(&[held_out_task(0)]).is_err());
    let data = generate_dataset(&suite, 1, 0).unwrap().dataset;
    for p in &data.pairs {
        assert_eq!(taskwise_route(&assignment, &p.obs).unwrap(), assignment.expert_for_task(p.task_id).unwrap());
    }
    let mut bad = data.pairs[0].obs.clone();
    *bad.last_mut().unwrap() = 1.0;
    assert!(matches!(taskwise_route(&assignment, &bad), Err(Error::Routing(_))));
    assert!(TaskAssignment::new(BTreeMap::from([(0, 3)]), 3).is_err());
}

proptest! {
    #[test]
    fn balance_loss_is_bounded_and_uniform_is_one(
        k in 1usize..8,
        rows in prop::collection::vec(prop::collection::vec(0.01f32..1.0, 8), 1..30),
    ) {
        let probs: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| {
                let s: f32 = r[..k].iter().sum();
                r[..k].iter().map(|v| v / s).collect()
            })
            .collect();
        let t = Tensor::from_rows(&probs).unwrap();
        let chosen: Vec<usize> = probs.iter().map(|r| dibm::model::argmax(r)).collect();
        let stats = RoutingStats::from_gates(&t, &chosen).unwrap();
        let l = load_balancing_loss(&stats);
        prop_assert!(l >= 0.0 && l <= k as f32 + 1e-4);
        let uniform = RoutingStats { f: vec![1.0 / k as f32; k], p: vec![1.0 / k as f32; k] };
        prop_assert!((load_balancing_loss(&uniform) - 1.0).abs() <= f32::EPSILON * 2.0);
    }
}
