use proptest::prelude::*;
use retention_core::gradcheck::{finite_diff_grad, GradCheckReport};
use retention_core::numeric::{dropout_mask, layer_norm, softmax_rows};
use retention_core::retention::{
    compact, retention_read, update_usage, write_append, write_blend, BlendStatus, MemoryState,
    tape_retention_read, RetentionConfig, RetentionParams, TrackedMemory,
};
use retention_core::tape::Tape;
use retention_core::{Matrix, Rng};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn filled_memory(capacity: usize, d: usize, writes: usize, rng: &mut Rng) -> MemoryState {
    let mut m = MemoryState::empty(capacity, d);
    for _ in 0..writes {
        m = write_append(&m, &random_matrix(1, d, rng)).unwrap();
    }
    m
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in sized_matrix(), shift in -50.0f64..50.0) {
        let y = softmax_rows(&x, None).unwrap();
        let shifted = softmax_rows(&x.map(|v| v + shift), None).unwrap();
        for r in 0..x.rows() {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|&p| p >= 0.0));
            for (a, b) in y.row(r).iter().zip(shifted.row(r)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let arg = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
            prop_assert_eq!(y.get(r, arg(x.row(r))), y.row(r).iter().cloned().fold(f64::MIN, f64::max));
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns(x in matrix(3, 5), mask in prop::collection::vec(any::<bool>(), 5)) {
        let y = softmax_rows(&x, Some(&mask)).unwrap();
        for r in 0..3 {
            let s: f64 = y.row(r).iter().sum();
            if mask.iter().any(|&m| m) {
                prop_assert!((s - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(s, 0.0);
            }
            for (c, &keep) in mask.iter().enumerate() {
                if !keep {
                    prop_assert_eq!(y.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in (1usize..5, 2usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        let d = x.cols();
        let y = layer_norm(&x, &vec![1.0; d], &vec![0.0; d], 1e-5).unwrap();
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let out = y.row(r);
            let m = out.iter().sum::<f64>() / d as f64;
            let v = out.iter().map(|o| (o - m).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - var / (var + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_is_associative_and_distributive(
        (a, b, c, e) in (1usize..5, 1usize..5, 1usize..5, 1usize..5)
            .prop_flat_map(|(p, q, r, s)| (matrix(p, q), matrix(q, r), matrix(r, s), matrix(q, r)))
    ) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let dist = a.matmul(&b.add(&e).unwrap()).unwrap();
        let sum = a.matmul(&b).unwrap().add(&a.matmul(&e).unwrap()).unwrap();
        for (x, y) in dist.as_slice().iter().zip(sum.as_slice()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn append_keeps_last_writes(capacity in 1usize..5, writes in 0usize..11) {
        let mut m = MemoryState::empty(capacity, 1);
        for i in 0..writes {
            m = write_append(&m, &Matrix::row_vector(&[i as f64])).unwrap();
        }
        let mut live: Vec<(u64, f64)> = (0..capacity)
            .filter(|&s| m.occupied()[s])
            .map(|s| (m.insert_seq()[s], m.slots().get(s, 0)))
            .collect();
        live.sort_by_key(|e| e.0);
        let contents: Vec<f64> = live.iter().map(|e| e.1).collect();
        let expected: Vec<f64> = (writes.saturating_sub(capacity)..writes).map(|i| i as f64).collect();
        prop_assert_eq!(contents, expected);
        prop_assert!(m.check_invariants().is_ok());
    }

    #[test]
    fn blend_is_convex(seed in any::<u64>(), capacity in 1usize..6, d in 1usize..6) {
        let mut rng = Rng::new(seed);
        let filled = 1 + rng.below(capacity);
        let mem = filled_memory(capacity, d, filled, &mut rng);
        let params = RetentionParams::init(d, 2, &mut rng);
        let u = random_matrix(1, d, &mut rng);
        let out = write_blend(&mem, &u, &params).unwrap();
        prop_assert_eq!(out.status, BlendStatus::Blended);
        let occupied_mass: f64 = (0..capacity).filter(|&i| mem.occupied()[i]).map(|i| out.weights[i]).sum();
        prop_assert!((occupied_mass - 1.0).abs() < 1e-12);
        let update = u.matmul(&params.w_update).unwrap();
        for i in 0..capacity {
            for c in 0..d {
                let (old, new, target) = (mem.slots().get(i, c), out.state.slots().get(i, c), update.get(0, c));
                prop_assert!(new >= old.min(target) && new <= old.max(target), "{} not in [{}, {}]", new, old, target);
            }
        }
    }

    #[test]
    fn compaction_preserves_usage_mass(seed in any::<u64>(), capacity in 1usize..8) {
        let mut rng = Rng::new(seed);
        let mut mem = filled_memory(capacity, 3, capacity + rng.below(4), &mut rng);
        let weights = Matrix::new(1, capacity, (0..capacity).map(|_| rng.uniform(0.0, 0.1)).collect()).unwrap();
        mem = update_usage(&mem, &weights, 0.9).unwrap();
        let cfg = RetentionConfig { capacity, compaction_floor: 0.05, ..RetentionConfig::default() };
        let out = compact(&mem, &cfg);
        let total = |m: &MemoryState| m.usage().iter().sum::<f64>();
        prop_assert!((total(&out) - total(&mem)).abs() < 1e-12);
        let merges = mem.occupied_count() - out.occupied_count();
        prop_assert!(merges < capacity.max(1));
        let below = (0..capacity).filter(|&i| out.occupied()[i] && out.usage()[i] < cfg.compaction_floor).count();
        prop_assert!(below <= 1);
        prop_assert!(out.check_invariants().is_ok());
        prop_assert_eq!(compact(&mem, &cfg), out);
    }

    #[test]
    fn rng_streams_repeat(seed in any::<u64>()) {
        let mut a = Rng::new(seed);
        let mut b = Rng::new(seed);
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}

#[test]
fn dropout_survival_rate() {
    let mut rng = Rng::new(11);
    for p in [0.1, 0.5] {
        let m = dropout_mask(100, 1000, p, &mut rng).unwrap();
        let kept = m.as_slice().iter().filter(|&&v| v != 0.0).count() as f64 / m.len() as f64;
        assert!((kept - (1.0 - p)).abs() < 0.01, "p={p}: kept {kept}");
        assert!(m.as_slice().iter().all(|&v| v == 0.0 || v == 1.0 / (1.0 - p)));
    }
}

#[test]
fn retention_read_gradients_match_finite_differences() {
    let mut rng = Rng::new(21);
    let (n, d, dk) = (3, 6, 4);
    let mem = filled_memory(4, d, 3, &mut rng);
    let params = RetentionParams::init(d, dk, &mut rng);
    let x = random_matrix(n, d, &mut rng);
    let probe = random_matrix(n, d, &mut rng);
    // Scalar objective: sum(r * probe) / n.
    let objective = |x: &Matrix, p: &RetentionParams| -> f64 {
        let r = retention_read(x, &mem, p).unwrap().r;
        r.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum::<f64>() / n as f64
    };

    let mut tape = Tape::new();
    let pv = params.map(&mut |m| tape.leaf(m.clone()));
    let xv = tape.leaf(x.clone());
    let tracked = TrackedMemory::constant(&mut tape, mem.clone());
    let (r, _) = tape_retention_read(&mut tape, xv, &tracked, &pv).unwrap();
    let weighted = tape.mul_const(r, probe.clone()).unwrap();
    let pooled = tape.mean_rows(weighted).unwrap();
    let ones = tape.leaf(Matrix::filled(d, 1, 1.0));
    let total = tape.matmul(pooled, ones).unwrap();
    let g = tape.backward(total).unwrap();

    let numeric_x = finite_diff_grad(|t| objective(&Matrix::new(n, d, t.to_vec()).unwrap(), &params), x.as_slice(), 1e-5).unwrap();
    let mut reports = vec![GradCheckReport::compare("x", g.get(xv).as_slice(), &numeric_x)];
    for (i, name) in ["wq", "wk", "wv"].into_iter().enumerate() {
        let base = [&params.wq, &params.wk, &params.wv][i].clone();
        let numeric = finite_diff_grad(
            |t| {
                let mut p = params.clone();
                let slot = [&mut p.wq, &mut p.wk, &mut p.wv].into_iter().nth(i).unwrap();
                slot.as_mut_slice().copy_from_slice(t);
                objective(&x, &p)
            },
            base.as_slice(),
            1e-5,
        )
        .unwrap();
        let var = [pv.wq, pv.wk, pv.wv][i];
        reports.push(GradCheckReport::compare(name, g.get(var).as_slice(), &numeric));
    }
    for r in reports {
        assert!(r.passes(1e-4), "{r:?}");
        assert!(r.analytic != 0.0 || r.max_rel_error == 0.0);
    }
}
