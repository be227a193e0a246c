use mpdt_tensor::{
    finite_difference_check, load_checkpoint, save_checkpoint, select_probes, ParamStore, Probe,
    Tape, Tensor, TensorError, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn store_with(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape, vals) in entries {
        s.insert(*name, Tensor::from_f64(shape.clone(), vals).unwrap()).unwrap();
    }
    s
}

fn random_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant_from(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
    let y = tape.softmax_lastdim(x).unwrap();
    for v in tape.value(y).unwrap() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn fully_masked_softmax_row_is_zero() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant_from(vec![2, 2], vec![0.3, 0.1, 0.5, 0.2]).unwrap();
    let x = tape.masked_fill(x, &[true, true, false, true], f64::NEG_INFINITY).unwrap();
    let y = tape.softmax_lastdim(x).unwrap();
    assert_eq!(tape.value(y).unwrap(), &[0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn layer_norm_matches_population_standardization() {
    // Oracle: (x - mean) / sqrt(mean((x - mean)^2)) for [1, 2, 3] is
    // [-sqrt(3/2), 0, sqrt(3/2)].
    let expected = [-(1.5f64).sqrt(), 0.0, (1.5f64).sqrt()];
    assert!((expected[2] - 1.22474).abs() < 1e-5);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant_from(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let g = tape.constant_from(vec![3], vec![1.0; 3]).unwrap();
    let b = tape.constant_from(vec![3], vec![0.0; 3]).unwrap();
    let y = tape.layer_norm(x, g, b, 0.0).unwrap();
    for (got, want) in tape.value(y).unwrap().iter().zip(expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant_from(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).unwrap(), &[0.0, 0.0, 2.0]);
}

#[test]
fn shape_errors_are_descriptive() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant_from(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant_from(vec![2, 3], vec![0.0; 6]).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    assert!(matches!(err, TensorError::Shape { op: "matmul", .. }));
    assert!(err.to_string().contains("[2, 3]"));
    let c = tape.constant_from(vec![2], vec![0.0; 2]).unwrap();
    assert!(tape.add(a, c).is_err());
}

#[test]
fn dropout_probability_is_validated() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::<f32>::new();
    let a = tape.constant_from(vec![4], vec![1.0; 4]).unwrap();
    for p in [-0.1, 1.0, 1.5] {
        assert!(matches!(tape.dropout(a, p, true, &mut rng), Err(TensorError::Parameter { .. })));
    }
    let same = tape.dropout(a, 0.5, false, &mut rng).unwrap();
    assert_eq!(same, a);
    let d = tape.dropout(a, 0.5, true, &mut rng).unwrap();
    assert!(tape.value(d).unwrap().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn mse_gradient_of_square() {
    let mut s = store_with(&[("w", vec![1], vec![2.0])]);
    let mut tape = Tape::new();
    let w = tape.param(&s, "w").unwrap();
    let zero = tape.constant_from(vec![1], vec![0.0]).unwrap();
    let loss = tape.mean_squared_error(w, zero).unwrap();
    assert_eq!(tape.value(loss).unwrap(), &[4.0]);
    tape.backward(loss, &mut s).unwrap();
    assert_eq!(s.get("w").unwrap().grad().unwrap(), &[4.0]);
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut s = store_with(&[("w", vec![2], vec![1.0, 2.0]), ("p", vec![3], vec![5.0; 3])]);
    let mut tape = Tape::new();
    let w = tape.param(&s, "w").unwrap();
    let loss = tape.sum(w).unwrap();
    tape.backward(loss, &mut s).unwrap();
    assert_eq!(s.get("p").unwrap().grad().unwrap(), &[0.0, 0.0, 0.0]);
    assert_eq!(s.get("w").unwrap().grad().unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_state_and_contract_errors() {
    let mut s = store_with(&[("w", vec![2], vec![1.0, 2.0])]);
    let mut tape = Tape::new();
    let w = tape.param(&s, "w").unwrap();
    assert!(matches!(tape.backward(w, &mut s), Err(TensorError::Contract(_))));
    let loss = tape.sum(w).unwrap();
    tape.backward(loss, &mut s).unwrap();
    assert!(matches!(tape.backward(loss, &mut s), Err(TensorError::State(_))));
    // a stale handle stays invalid after new ops are recorded
    let _ = tape.param(&s, "w").unwrap();
    assert!(matches!(tape.backward(loss, &mut s), Err(TensorError::State(_))));
}

#[test]
fn repeated_param_use_accumulates() {
    let mut s = store_with(&[("w", vec![2], vec![1.0, -3.0])]);
    let mut tape = Tape::new();
    let a = tape.param(&s, "w").unwrap();
    let b = tape.param(&s, "w").unwrap();
    let y = tape.add(a, b).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss, &mut s).unwrap();
    assert_eq!(s.get("w").unwrap().grad().unwrap(), &[2.0, 2.0]);
}

#[test]
fn linear_model_quadratic_loss_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = random_vals(&mut rng, 8 * 3);
    let ys = random_vals(&mut rng, 8);
    let mut s = store_with(&[("w", vec![3, 1], random_vals(&mut rng, 3))]);
    let probes: Vec<Probe> = (0..3).map(|i| Probe { param: "w".into(), index: i }).collect();
    let report = finite_difference_check::<_, TensorError>(
        &mut s,
        |tape, store| {
            let x = tape.constant_from(vec![8, 3], xs.clone())?;
            let y = tape.constant_from(vec![8, 1], ys.clone())?;
            let w = tape.param(store, "w")?;
            let pred = tape.matmul(x, w)?;
            tape.mean_squared_error(pred, y)
        },
        &probes,
        1e-5,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-8, "{}", report.max_relative_error);
}

type Builder = fn(&mut Tape<f64>, &ParamStore<f64>, &Case) -> Result<Var, TensorError>;

#[derive(Debug, Clone)]
struct Case {
    rows: usize,
    cols: usize,
    inner: usize,
    seed: u64,
}

fn target_for(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(v)?.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let n = shape.iter().product();
    let t = random_vals(&mut rng, n);
    let target = tape.constant_from(shape, t)?;
    tape.mean_squared_error(v, target)
}

fn op_builders() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |t, s, c| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let y = t.matmul(a, b)?;
            target_for(t, y, c.seed)
        }),
        ("batched_matmul", |t, s, c| {
            let a = t.param(s, "a")?;
            let a3 = t.reshape(a, vec![1, c.rows, c.cols])?;
            let b = t.param(s, "b")?;
            let b3 = t.reshape(b, vec![1, c.cols, c.inner])?;
            let y = t.matmul(a3, b3)?;
            target_for(t, y, c.seed)
        }),
        ("add_bias", |t, s, c| {
            let a = t.param(s, "a")?;
            let g = t.param(s, "g")?;
            let y = t.add(a, g)?;
            target_for(t, y, c.seed)
        }),
        ("mul_scalar", |t, s, c| {
            let a = t.param(s, "a")?;
            let y = t.mul_scalar(a, -0.7)?;
            target_for(t, y, c.seed)
        }),
        ("concat", |t, s, c| {
            let a = t.param(s, "a")?;
            let a2 = t.mul_scalar(a, 2.0)?;
            let y = t.concat(&[a, a2], 1)?;
            target_for(t, y, c.seed)
        }),
        ("slice", |t, s, c| {
            let a = t.param(s, "a")?;
            let y = t.slice(a, 1, c.cols / 2, c.cols - c.cols / 2)?;
            target_for(t, y, c.seed)
        }),
        ("embedding_lookup", |t, s, c| {
            let b = t.param(s, "b")?;
            let idx: Vec<usize> = (0..c.rows + 2).map(|i| (i * 7 + c.seed as usize) % c.cols).collect();
            let y = t.embedding_lookup(b, &idx, &[c.rows + 2])?;
            target_for(t, y, c.seed)
        }),
        ("layer_norm", |t, s, c| {
            let a = t.param(s, "a")?;
            let g = t.param(s, "g2")?;
            let b = t.param(s, "h2")?;
            let y = t.layer_norm(a, g, b, 1e-5)?;
            target_for(t, y, c.seed)
        }),
        ("softmax_lastdim", |t, s, c| {
            let a = t.param(s, "a")?;
            let y = t.softmax_lastdim(a)?;
            target_for(t, y, c.seed)
        }),
        ("relu", |t, s, c| {
            let a = t.param(s, "a")?;
            let y = t.relu(a)?;
            target_for(t, y, c.seed)
        }),
        ("dropout", |t, s, c| {
            let a = t.param(s, "a")?;
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
            let y = t.dropout(a, 0.3, true, &mut rng)?;
            target_for(t, y, c.seed)
        }),
        ("masked_fill", |t, s, c| {
            let a = t.param(s, "a")?;
            let mask: Vec<bool> = (0..c.rows * c.cols).map(|i| (i + c.seed as usize) % 3 == 0).collect();
            let y = t.masked_fill(a, &mask, 0.25)?;
            target_for(t, y, c.seed)
        }),
        ("transpose_last2", |t, s, c| {
            let a = t.param(s, "a")?;
            let y = t.transpose_last2(a)?;
            target_for(t, y, c.seed)
        }),
        ("sum", |t, s, c| {
            let a = t.param(s, "a")?;
            let y = t.sum(a)?;
            target_for(t, y, c.seed)
        }),
        ("mean_squared_error", |t, s, _| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "a2")?;
            t.mean_squared_error(a, b)
        }),
    ]
}

fn case_store(c: &Case) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    store_with(&[
        ("a", vec![c.rows, c.cols], random_vals(&mut rng, c.rows * c.cols)),
        ("a2", vec![c.rows, c.cols], random_vals(&mut rng, c.rows * c.cols)),
        ("b", vec![c.cols, c.inner], random_vals(&mut rng, c.cols * c.inner)),
        ("g", vec![c.cols], random_vals(&mut rng, c.cols)),
        ("g2", vec![c.cols], random_vals(&mut rng, c.cols)),
        ("h2", vec![c.cols], random_vals(&mut rng, c.cols)),
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_matches_finite_differences(rows in 1usize..5, cols in 3usize..7, inner in 1usize..5, seed in 0u64..10_000) {
        let case = Case { rows, cols, inner, seed };
        for (name, build) in op_builders() {
            let mut store = case_store(&case);
            let probes: Vec<Probe> = store
                .iter()
                .flat_map(|(n, t)| (0..t.numel()).map(move |i| Probe { param: n.to_string(), index: i }))
                .collect();
            let report = finite_difference_check::<_, TensorError>(
                &mut store,
                |tape, s| build(tape, s, &case),
                &probes,
                1e-5,
            ).unwrap();
            prop_assert!(report.max_relative_error < 1e-4, "{name}: {}", report.max_relative_error);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-20.0f32..20.0, 12)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant_from(vec![3, 4], vals).unwrap();
        let y = tape.softmax_lastdim(x).unwrap();
        for row in tape.value(y).unwrap().chunks(4) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_centered(vals in proptest::collection::vec(-5.0f32..5.0, 16), gains in proptest::collection::vec(0.5f32..2.0, 8)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant_from(vec![2, 8], vals).unwrap();
        // gain 1, bias 0 gives exactly standardized rows
        let g = tape.constant_from(vec![8], vec![1.0; 8]).unwrap();
        let b = tape.constant_from(vec![8], vec![0.0; 8]).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(y).unwrap().chunks(8) {
            prop_assert!((row.iter().sum::<f32>() / 8.0).abs() < 1e-6);
        }
        let g2 = tape.constant_from(vec![8], gains).unwrap();
        let y2 = tape.layer_norm(x, g2, b, 1e-5).unwrap();
        prop_assert!(tape.value(y2).unwrap().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::<f32>::new();
        let w: Vec<f64> = random_vals(&mut ChaCha8Rng::seed_from_u64(1), 16);
        s.insert("w", Tensor::from_f64(vec![4, 4], &w).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![3, 4], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9, 1.0, -1.1, 1.2]).unwrap();
        let w = tape.param(&s, "w").unwrap();
        let h = tape.matmul(x, w).unwrap();
        let h = tape.dropout(h, 0.2, true, &mut rng).unwrap();
        let h = tape.softmax_lastdim(h).unwrap();
        let loss = tape.sum(h).unwrap();
        let loss = tape.mean_squared_error(loss, loss).unwrap();
        let lv = tape.value(loss).unwrap()[0];
        tape.backward(loss, &mut s).unwrap();
        (lv.to_bits(), s.get("w").unwrap().grad().unwrap().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn probes_cover_every_tensor() {
    let s = store_with(&[("a", vec![3], vec![0.0; 3]), ("b", vec![2], vec![0.0; 2]), ("c", vec![1], vec![0.0])]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probes = select_probes(&s, 7, &mut rng);
    for name in ["a", "b", "c"] {
        assert!(probes.iter().any(|p| p.param == name));
    }
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ParamStore::<f32>::new();
    s.insert("embed.weight", Tensor::from_f64(vec![2, 3], &[0.1, -2.5, 3.0, 1e-7, 0.0, -0.0]).unwrap()).unwrap();
    s.insert("head.bias", Tensor::from_f64(vec![1], &[42.0]).unwrap()).unwrap();
    let (m1, b1) = (dir.path().join("a.json"), dir.path().join("a.bin"));
    let (m2, b2) = (dir.path().join("b.json"), dir.path().join("b.bin"));
    save_checkpoint(&s, &m1, &b1).unwrap();
    let loaded = load_checkpoint(&m1, &b1).unwrap();
    assert_eq!(loaded.checksum(), s.checksum());
    save_checkpoint(&loaded, &m2, &b2).unwrap();
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    assert_eq!(std::fs::read(&b1).unwrap(), std::fs::read(&b2).unwrap());
    assert_eq!(std::fs::metadata(&b1).unwrap().len(), 4 * 7);

    std::fs::write(&b2, &std::fs::read(&b1).unwrap()[..20]).unwrap();
    assert!(load_checkpoint(&m1, &b2).is_err());
}
