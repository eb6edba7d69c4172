mod common;

use common::{normal, tiny_model, TINY_CHUNK, TINY_OBS};
use dibm::model::{diffusion_loss, sample_chunk, NoisedBatch, Route};
use dibm::numeric::{AdamW, AdamWConfig, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(rows: usize, t: usize, rng: &mut ChaCha8Rng) -> NoisedBatch {
    NoisedBatch {
        obs: normal(rows, TINY_OBS, rng),
        noisy: normal(rows, TINY_CHUNK, rng),
        eps: normal(rows, TINY_CHUNK, rng),
        ks: (0..rows).map(|_| rng.random_range(0..t)).collect(),
    }
}

#[test]
fn an_expert_loss_only_reaches_its_own_parameters() {
    let model = tiny_model(3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = batch(6, model.sched.len(), &mut rng);
    for e in 0..3 {
        let mut tape = Tape::new();
        let loss = diffusion_loss(&mut tape, &model.store, &model.policy, &b, e).unwrap();
        let grads = tape.backward(loss).unwrap();
        for other in (0..3).filter(|&o| o != e) {
            for id in model.policy.expert_params(other) {
                let untouched = grads.get(id).is_none_or(|g| g.data().iter().all(|&v| v == 0.0));
                assert!(untouched, "expert {e} loss reached expert {other}");
            }
        }
        assert!(model.policy.expert_params(e).iter().any(|&id| grads.get(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0))));
        assert!(model.policy.shared_params().iter().any(|&id| grads.contains(id)));
    }
}

#[test]
fn per_row_routing_matches_whole_batch_routing() {
    let model = tiny_model(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = batch(5, model.sched.len(), &mut rng);
    let per_expert: Vec<_> = (0..3)
        .map(|e| model.policy.predict_noise(&model.store, &b.noisy, &b.obs, &b.ks, e).unwrap())
        .collect();
    let route = [2, 0, 1, 1, 0];
    let mixed = model
        .policy
        .predict_noise_routed(&model.store, &b.noisy, &b.obs, &b.ks, Route::PerRow(&route))
        .unwrap();
    for (i, &e) in route.iter().enumerate() {
        for (x, y) in mixed.row(i).iter().zip(per_expert[e].row(i)) {
            assert!((x - y).abs() < 1e-6, "row {i}");
        }
    }
}

#[test]
fn an_expert_overfits_a_fixed_batch() {
    let mut model = tiny_model(2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = batch(4, model.sched.len(), &mut rng);
    let mut opt = AdamW::new(&model.store, AdamWConfig { lr: 1e-2, ..AdamWConfig::default() });
    let loss_at = |m: &dibm::trainer::BehaviorModel| {
        let mut tape = Tape::new();
        let l = diffusion_loss(&mut tape, &m.store, &m.policy, &b, 1).unwrap();
        tape.value(l).item()
    };
    let start = loss_at(&model);
    for _ in 0..600 {
        let grads = {
            let mut tape = Tape::new();
            let l = diffusion_loss(&mut tape, &model.store, &model.policy, &b, 1).unwrap();
            let mut g = tape.backward(l).unwrap();
            g.fill_missing(&model.store);
            g
        };
        opt.step(&mut model.store, &grads).unwrap();
    }
    let end = loss_at(&model);
    assert!(end < 0.1 * start, "{start} -> {end}");
}

#[test]
fn sampling_is_seeded_and_bounded() {
    let model = tiny_model(2, 3);
    let obs = [0.1, -0.2, 0.3];
    let draw = |seed, e| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_chunk(&model.policy, &model.store, &model.sched, &model.infer, &obs, Route::Expert(e), &mut rng).unwrap()
    };
    let a = draw(1, 0);
    assert_eq!(a.len(), TINY_CHUNK);
    assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(a, draw(1, 0));
    assert_ne!(a, draw(1, 1));
}
