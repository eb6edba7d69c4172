use std::collections::VecDeque;

use dibm::envs::{build_suite, generate_dataset, Dataset};
use dibm::trainer::{finetune, train, train_iteration, ExpertBuffer, LossLog, Method, TrainConfig, TrainState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_data() -> Dataset {
    generate_dataset(&build_suite(0), 2, 0).unwrap().dataset
}

fn small_config(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig::for_method(method);
    cfg.hidden = 16;
    cfg.obs_features = 8;
    cfg.gate_hidden = vec![16];
    cfg.t_train = 10;
    cfg.inference_steps = 4;
    cfg.gating_batch = 32;
    cfg.expert_batch = 8;
    cfg.samples_per_expert = 8;
    cfg.buffer_capacity = 64;
    cfg.iterations = 20;
    if method != Method::Dp {
        cfg.experts = 3;
    }
    cfg
}

#[test]
fn logged_terms_recombine_to_the_total() {
    let data = small_data();
    for method in Method::ALL {
        let mut state = TrainState::new(small_config(method), &data).unwrap();
        for _ in 0..15 {
            let out = train_iteration(&mut state, &data).unwrap();
            let l = &out.loss;
            assert!(l.total.is_finite(), "{method}");
            assert!((l.recombined() - l.total).abs() <= 1e-5 * l.total.abs().max(1.0), "{method}: {l:?}");
        }
    }
}

#[test]
fn only_the_gated_baseline_pays_a_balance_penalty() {
    let data = small_data();
    for method in Method::ALL {
        let mut state = TrainState::new(small_config(method), &data).unwrap();
        let aux = train_iteration(&mut state, &data).unwrap().loss.aux_term;
        assert_eq!(aux > 0.0, method == Method::VanillaMoe, "{method}: {aux}");
    }
}

#[test]
fn default_config_runs_an_iteration() {
    let data = small_data();
    let mut state = TrainState::new(TrainConfig::default(), &data).unwrap();
    let out = train_iteration(&mut state, &data).unwrap();
    assert!(out.loss.total.is_finite());
    assert_eq!(out.expert_batches.len(), 5);
    assert!(out.expert_batches.iter().all(|(idx, b)| idx.len() == 32 && b.len() == 32));
}

#[test]
fn buffers_fill_by_samples_per_expert() {
    let data = small_data();
    let cfg = small_config(Method::Dibm);
    let mut state = TrainState::new(cfg.clone(), &data).unwrap();
    for it in 1..=10 {
        let out = train_iteration(&mut state, &data).unwrap();
        let want = (it * cfg.samples_per_expert).min(cfg.buffer_capacity);
        assert!(out.buffer_fill.iter().all(|&f| f == want), "{it}: {:?}", out.buffer_fill);
    }
}

#[test]
fn seeded_runs_are_reproducible() {
    let data = small_data();
    let run = |seed| {
        let cfg = TrainConfig { seed, ..small_config(Method::Dibm) };
        let mut log = LossLog::new(Vec::new(), cfg.experts).unwrap();
        let mut state = TrainState::new(cfg, &data).unwrap();
        train(&mut state, &data, Some(&mut log)).unwrap();
        (log.into_inner().unwrap(), state.model.store)
    };
    let (a, b, c) = (run(3), run(3), run(4));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_ne!(a.0, c.0);
}

#[test]
fn finetuning_starts_near_the_pretrained_loss() {
    let data = small_data();
    let cfg = TrainConfig { iterations: 300, ..small_config(Method::Dibm) };
    let mut state = TrainState::new(cfg.clone(), &data).unwrap();
    let pre = train(&mut state, &data, None::<&mut LossLog<Vec<u8>>>).unwrap();
    let stats = state.model.stats.clone();

    let tune = TrainConfig { iterations: 1, ..cfg };
    let mut log = LossLog::new(Vec::new(), tune.experts).unwrap();
    let (tuned, _) = finetune(state.model, &data, 1.0, &tune, Some(&mut log)).unwrap();
    assert_eq!(tuned.model.stats, stats);
    let text = String::from_utf8(log.into_inner().unwrap()).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "total").unwrap();
    let first: f64 = text.lines().nth(1).unwrap().split(',').nth(col).unwrap().parse().unwrap();
    assert!(first < 2.0 * pre.final_loss, "{first} vs pretrained {}", pre.final_loss);
}

#[test]
fn finetuning_rejects_bad_ratios_and_mismatched_configs() {
    let data = small_data();
    let cfg = small_config(Method::Dibm);
    let model = TrainState::new(cfg.clone(), &data).unwrap().model;
    assert!(finetune(model.clone(), &data, 0.0, &cfg, None::<&mut LossLog<Vec<u8>>>).is_err());
    assert!(finetune(model.clone(), &data, 1.5, &cfg, None::<&mut LossLog<Vec<u8>>>).is_err());
    let wider = TrainConfig { hidden: 32, ..cfg.clone() };
    assert!(finetune(model.clone(), &data, 1.0, &wider, None::<&mut LossLog<Vec<u8>>>).is_err());
    let tiny = TrainConfig { iterations: 2, ..cfg };
    assert!(finetune(model, &data, 0.1, &tiny, None::<&mut LossLog<Vec<u8>>>).is_ok());
}

proptest! {
    #[test]
    fn buffer_keeps_the_newest_indices(
        capacity in 1usize..20,
        pushes in prop::collection::vec(prop::collection::vec(0usize..50, 0..10), 0..10),
        seed in any::<u64>(),
    ) {
        let mut buf = ExpertBuffer::new(capacity, 50);
        let mut oracle = VecDeque::new();
        for p in &pushes {
            buf.push(p).unwrap();
            oracle.extend(p.iter().copied());
            while oracle.len() > capacity {
                oracle.pop_front();
            }
            prop_assert_eq!(buf.items().collect::<Vec<_>>(), oracle.iter().copied().collect::<Vec<_>>());
        }
        if !buf.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for n in [1, buf.len(), buf.len() + 3] {
                let (drawn, warm) = buf.draw(n, &mut rng).unwrap();
                prop_assert_eq!(drawn.len(), n);
                prop_assert_eq!(warm, n > buf.len());
                prop_assert!(drawn.iter().all(|i| oracle.contains(i)));
            }
        }
    }
}
