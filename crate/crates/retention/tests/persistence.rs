use std::fs;

use proptest::prelude::*;
use retention::codec::FormatError;
use retention::session::{load_session, model_fingerprint, save_session, SessionLock, SessionStore, SESSION_VERSION};
use retention::{load_checkpoint, save_checkpoint, Checkpoint};
use retention_core::model::{MemoryBank, ModelConfig, ModelParams};
use retention_core::retention::{
    compact, update_usage, write_append, write_blend, Gate, MemoryState, RetentionConfig, RetentionParams, WriteMode,
};
use retention_core::task::TaskConfig;
use retention_core::{Matrix, Rng};

fn small() -> (ModelConfig, RetentionConfig) {
    let model = ModelConfig {
        vocab: 12,
        d_model: 6,
        d_k: 3,
        heads: 2,
        d_ff: 8,
        layers: 2,
        max_len: 6,
        ..ModelConfig::default()
    };
    let ret = RetentionConfig {
        capacity: 4,
        ..RetentionConfig::default()
    };
    (model, ret)
}

fn random_row(d: usize, rng: &mut Rng) -> Matrix {
    Matrix::new(1, d, (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap()
}

/// A bank after `ops` random appends, blends, usage updates, compactions
/// and clears.
fn random_bank(model: &ModelConfig, ret: &RetentionConfig, ops: usize, seed: u64) -> MemoryBank {
    let mut rng = Rng::new(seed);
    let params = RetentionParams::init(model.d_model, model.d_k, &mut rng);
    let layers = (0..model.layers)
        .map(|_| {
            let mut m = MemoryState::empty(ret.capacity, model.d_model);
            for _ in 0..ops {
                m = match rng.below(10) {
                    0..=3 => write_append(&m, &random_row(model.d_model, &mut rng)).unwrap(),
                    4..=6 => write_blend(&m, &random_row(model.d_model, &mut rng), &params).unwrap().state,
                    7 | 8 => {
                        let w = Matrix::new(2, ret.capacity, (0..2 * ret.capacity).map(|_| rng.uniform(0.0, 0.5)).collect())
                            .unwrap();
                        update_usage(&m, &w, ret.decay_rate).unwrap()
                    }
                    _ if rng.below(4) == 0 => m.cleared(),
                    _ => compact(&m, &RetentionConfig { compaction_floor: 0.5, ..ret.clone() }),
                };
            }
            m
        })
        .collect();
    MemoryBank::from_layers(layers).unwrap()
}

fn bits(bank: &MemoryBank) -> Vec<u64> {
    bank.layers()
        .iter()
        .flat_map(|m| {
            let mut v: Vec<u64> = m.slots().as_slice().iter().map(|x| x.to_bits()).collect();
            v.extend(m.usage().iter().map(|x| x.to_bits()));
            v.extend(m.insert_seq());
            v.extend(m.occupied().iter().map(|&o| o as u64));
            v.push(m.next_seq());
            v
        })
        .collect()
}

#[test]
fn empty_bank_round_trips() {
    let (model, ret) = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.session");
    let fp = model_fingerprint(&model, &ret);
    let store = SessionStore::new(MemoryBank::empty(&model, &ret), fp, 17);
    save_session(&store, &path).unwrap();
    let back = load_session(&path, fp).unwrap();
    assert_eq!(back, store);
    assert_eq!(back.format_version, SESSION_VERSION);
    assert_eq!(back.write_counters(), vec![1, 1]);
}

#[test]
fn hundred_random_banks_round_trip_bit_exactly() {
    let (model, ret) = small();
    let fp = model_fingerprint(&model, &ret);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.session");
    for seed in 0..100 {
        let bank = random_bank(&model, &ret, 100, seed);
        let store = SessionStore {
            created: seed,
            updated: seed + 5,
            ..SessionStore::new(bank, fp, 0)
        };
        save_session(&store, &path).unwrap();
        let back = load_session(&path, fp).unwrap();
        assert_eq!(bits(&back.bank), bits(&store.bank));
        assert_eq!(back, store);
        assert_eq!(back.to_bytes(), store.to_bytes());
    }
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["s.session"], "temporary files left behind");
}

proptest! {
    #[test]
    fn save_load_is_identity(seed in any::<u64>(), ops in 0usize..60, created in any::<u64>()) {
        let (model, ret) = small();
        let fp = model_fingerprint(&model, &ret);
        let store = SessionStore { created, ..SessionStore::new(random_bank(&model, &ret, ops, seed), fp, 3) };
        let back = SessionStore::from_bytes(&store.to_bytes(), fp).unwrap();
        prop_assert_eq!(bits(&back.bank), bits(&store.bank));
        prop_assert_eq!(back, store);
    }
}

#[test]
fn every_truncation_is_a_checksum_error() {
    let (model, ret) = small();
    let fp = model_fingerprint(&model, &ret);
    let bytes = SessionStore::new(random_bank(&model, &ret, 20, 1), fp, 0).to_bytes();
    for len in 0..bytes.len() {
        assert_eq!(SessionStore::from_bytes(&bytes[..len], fp).err(), Some(FormatError::Checksum), "len {len}");
    }
}

#[test]
fn bumped_version_is_unsupported() {
    let (model, ret) = small();
    let fp = model_fingerprint(&model, &ret);
    let mut bytes = SessionStore::new(MemoryBank::empty(&model, &ret), fp, 0).to_bytes();
    bytes[8] += 1;
    assert!(matches!(
        SessionStore::from_bytes(&bytes, fp),
        Err(FormatError::UnsupportedVersion { found: 2, supported: 1 })
    ));
}

#[test]
fn bad_magic_is_reported() {
    let (model, ret) = small();
    let fp = model_fingerprint(&model, &ret);
    let mut bytes = SessionStore::new(MemoryBank::empty(&model, &ret), fp, 0).to_bytes();
    bytes[0] = b'X';
    assert!(matches!(SessionStore::from_bytes(&bytes, fp), Err(FormatError::BadMagic { .. })));
}

#[test]
fn any_single_byte_corruption_is_detected() {
    let (model, ret) = small();
    let fp = model_fingerprint(&model, &ret);
    let bytes = SessionStore::new(random_bank(&model, &ret, 30, 2), fp, 0).to_bytes();
    for i in 0..bytes.len() {
        for flip in [0x01u8, 0x80, 0xff] {
            let mut bad = bytes.clone();
            bad[i] ^= flip;
            let err = SessionStore::from_bytes(&bad, fp).expect_err("corruption accepted");
            if i >= 12 {
                assert_eq!(err, FormatError::Checksum, "byte {i}");
            }
        }
    }
}

#[test]
fn fingerprint_mismatch_is_rejected() {
    let (model, ret) = small();
    let fp = model_fingerprint(&model, &ret);
    let bytes = SessionStore::new(random_bank(&model, &ret, 10, 3), fp, 0).to_bytes();
    let wider = ModelConfig { max_len: 7, ..model.clone() };
    let other = model_fingerprint(&wider, &ret);
    assert_ne!(fp, other);
    assert_eq!(
        SessionStore::from_bytes(&bytes, other).err(),
        Some(FormatError::Fingerprint { expected: other, found: fp })
    );
    let bigger = RetentionConfig { capacity: 5, ..ret.clone() };
    assert_ne!(model_fingerprint(&model, &bigger), fp);
    let other_gate = RetentionConfig { gate: Gate::Never, ..ret };
    assert_eq!(model_fingerprint(&model, &other_gate), fp);
}

#[test]
fn io_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.session");
    let err = load_session(&missing, 0).unwrap_err();
    assert!(err.to_string().contains("absent.session"), "{err}");
    let (model, ret) = small();
    let store = SessionStore::new(MemoryBank::empty(&model, &ret), 0, 0);
    let bad = dir.path().join("no-such-dir").join("x.session");
    let err = save_session(&store, &bad).unwrap_err();
    assert!(err.to_string().contains("x.session"), "{err}");
}

#[test]
fn failed_load_leaves_existing_file_untouched() {
    let (model, ret) = small();
    let fp = model_fingerprint(&model, &ret);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.session");
    save_session(&SessionStore::new(random_bank(&model, &ret, 10, 4), fp, 0), &path).unwrap();
    let before = fs::read(&path).unwrap();
    assert!(load_session(&path, fp ^ 1).is_err());
    assert_eq!(fs::read(&path).unwrap(), before);
}

#[test]
fn lock_is_exclusive_and_released() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.session");
    let lock = SessionLock::acquire(&path).unwrap();
    assert!(lock.path().exists());
    assert!(SessionLock::acquire(&path).is_err());
    drop(lock);
    assert!(SessionLock::acquire(&path).is_ok());
}

#[test]
fn checkpoint_round_trips() {
    let (model, _) = small();
    let ret = RetentionConfig {
        capacity: 4,
        write_mode: WriteMode::Append,
        gate: Gate::Threshold(0.25),
        decay_rate: 0.5,
        compaction_floor: 0.125,
        read_heads: 1,
    };
    let task = TaskConfig {
        num_pairs: 2,
        split: retention_core::task::VocabSplit { keys: 4, values: 4, vocab: 12 },
    };
    let params = ModelParams::init(&model, &mut Rng::new(9)).unwrap();
    let ckpt = Checkpoint { model, retention: ret, task, params };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());

    let mut bytes = fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 4;
    assert_eq!(Checkpoint::from_bytes(&bytes).err(), Some(FormatError::Checksum));
    let session = SessionStore::new(MemoryBank::empty(&back.model, &back.retention), 0, 0).to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&session), Err(FormatError::BadMagic { .. })));
}
