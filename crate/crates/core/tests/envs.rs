use dibm::envs::io::{decode_dataset, encode_dataset};
use dibm::envs::{build_suite, generate_dataset, held_out_task, load_dataset, save_dataset, Dataset, NormStats, Pair, OBS_DIM};
use dibm::error::Error;
use proptest::prelude::*;

#[test]
fn generated_data_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("suite.bin");
    let data = generate_dataset(&build_suite(0), 3, 1).unwrap().dataset;
    save_dataset(&data, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), data);
    assert!(matches!(load_dataset(&dir.path().join("missing.bin")), Err(Error::Io { .. })));
}

#[test]
fn held_out_task_is_absent_from_the_suite() {
    let held = held_out_task(0);
    let suite = build_suite(0);
    assert!(suite.iter().all(|t| t.task_id != held.task_id && t.kind != held.kind));
    let data = generate_dataset(std::slice::from_ref(&held), 2, 0).unwrap().dataset;
    assert!(data.pairs.iter().all(|p| p.task_id == held.task_id));
}

#[test]
fn corrupt_files_are_rejected() {
    let data = generate_dataset(&build_suite(0)[..1], 1, 0).unwrap().dataset;
    let bytes = encode_dataset(&data);
    let mut magic = bytes.clone();
    magic[1] = b'?';
    assert!(matches!(decode_dataset(&magic), Err(Error::BadMagic { .. })));
    let mut version = bytes.clone();
    version[4] = 7;
    assert!(matches!(decode_dataset(&version), Err(Error::Version { found: 7, .. })));
    assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(decode_dataset(&longer), Err(Error::Truncated(_))));
}

fn pair_strategy() -> impl Strategy<Value = Pair> {
    let chunk = dibm::envs::CHUNK_HORIZON * dibm::envs::ACTION_DIM;
    (
        0u32..6,
        any::<u32>(),
        0u32..4,
        any::<u32>(),
        prop::collection::vec(-10.0f32..10.0, OBS_DIM),
        prop::collection::vec(-2.0f32..2.0, chunk),
    )
        .prop_map(|(task_id, episode, phase, timestep, obs, chunk)| Pair {
            task_id,
            episode,
            phase,
            timestep,
            obs,
            chunk,
        })
}

proptest! {
    #[test]
    fn arbitrary_datasets_round_trip(pairs in prop::collection::vec(pair_strategy(), 0..20)) {
        let data = Dataset::new(6, pairs);
        prop_assert_eq!(decode_dataset(&encode_dataset(&data)).unwrap(), data);
    }

    #[test]
    fn normalization_inverts(pairs in prop::collection::vec(pair_strategy(), 1..10)) {
        let stats = NormStats::from_pairs(&pairs);
        for p in &pairs {
            let n = stats.normalize_actions(&p.chunk);
            prop_assert!(n.iter().all(|v| v.abs() <= 1.0 + 1e-5));
            for (a, b) in stats.denormalize_actions(&n).iter().zip(&p.chunk) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
