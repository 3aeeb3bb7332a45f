use super::*;
use proptest::prelude::*;

#[test]
fn classification_is_deterministic_and_balanced() {
    let a = gen_synthetic_classification(5, 10, 16, 100).unwrap();
    let b = gen_synthetic_classification(5, 10, 16, 100).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 1000);
    assert_eq!(a.label_counts(), vec![100; 10]);
    assert_eq!(a.inputs.shape(), &[1000, 3, 16, 16]);
    let c = gen_synthetic_classification(6, 10, 16, 100).unwrap();
    assert_ne!(a.inputs, c.inputs);
}

#[test]
fn classification_rejects_degenerate_arguments() {
    assert!(matches!(gen_synthetic_classification(0, 1, 16, 5), Err(Error::Config(_))));
    assert!(matches!(gen_synthetic_classification(0, 4, 7, 5), Err(Error::Config(_))));
}

#[test]
fn grammar_rules_are_never_shared() {
    let task = TextureTask::new(3, 10, 16).unwrap();
    for rules in [&task.class_rules, &task.symbol_rules] {
        let mut all: Vec<[usize; 4]> = rules.concat();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert!(rules.iter().all(|r| r.len() == SYNONYMS));
    }
    assert!(matches!(TextureTask::with_synonyms(3, 10, 16, 0), Err(Error::Config(_))));
    assert!(matches!(TextureTask::new(3, 10, 14), Err(Error::Config(_))));
}

fn parse_layout(task: &TextureTask, grid: &[usize; 16]) -> Option<usize> {
    let mut top = [0; 4];
    for (q, slot) in top.iter_mut().enumerate() {
        let (r0, c0) = (2 * (q / 2), 2 * (q % 2));
        let quad = [grid[r0 * 4 + c0], grid[r0 * 4 + c0 + 1], grid[(r0 + 1) * 4 + c0], grid[(r0 + 1) * 4 + c0 + 1]];
        *slot = task.symbol_rules.iter().position(|rs| rs.contains(&quad))?;
    }
    task.class_rules.iter().position(|rs| rs.contains(&top))
}

proptest! {
    #[test]
    fn layouts_parse_back_to_their_class(seed in 0u64..1000, class in 0usize..10, draw in 0u64..1000) {
        let task = TextureTask::new(seed, 10, 8).unwrap();
        let grid = task.layout(class, &mut ChaCha8Rng::seed_from_u64(draw));
        prop_assert_eq!(parse_layout(&task, &grid), Some(class));
    }
}

#[test]
fn noiseless_patches_carry_their_primitive() {
    let task = TextureTask::new(4, 3, 16).unwrap().with_noise(0.0);
    let ds = task.sample(8, 2, Split::Train);
    let x = ds.inputs.data();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = task.layout(0, &mut rng);
    for (cell, &prim) in grid.iter().enumerate() {
        let (oy, ox) = (cell / 4 * 4, cell % 4 * 4);
        let at = |y: usize, xx: usize| x[(oy + y) * 16 + ox + xx] as f64;
        let sign = at(0, 0).signum();
        for y in 0..4 {
            for xx in 0..4 {
                let want = TextureTask::pattern(prim, xx, y, 4) * TextureTask::pattern(prim, 0, 0, 4);
                assert_eq!(at(y, xx).signum(), sign * want, "cell {cell} prim {prim}");
            }
        }
    }
}

#[test]
fn translation_pairs_are_deterministic() {
    let a = gen_synthetic_translation(2, 12, 7).unwrap();
    assert_eq!(a, gen_synthetic_translation(2, 12, 7).unwrap());
    let Targets::Images(t) = &a.targets else { panic!("image targets") };
    assert_eq!(t.shape(), a.inputs.shape());
    assert!(matches!(gen_synthetic_translation(2, 4, 7), Err(Error::Config(_))));
}

#[test]
fn translation_map_is_not_idempotent() {
    let f = ColorBlur::new(9);
    let ds = gen_synthetic_translation(9, 16, 3).unwrap();
    let x: Vec<f64> = ds.inputs.data()[..3 * 256].iter().map(|&v| v as f64).collect();
    let once = f.apply(&x, 16);
    let twice = f.apply(&once, 16);
    let gap = once.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-2, "f∘f too close to f: {gap}");
}

fn record(label: u8, fill: u8) -> Vec<u8> {
    let mut r = vec![fill; BINARY_RECORD];
    r[0] = label;
    r
}

#[test]
fn binary_reader_parses_whole_records() {
    let bytes: Vec<u8> = (0..4).flat_map(|i| record(i as u8 * 3, 51 * i as u8)).collect();
    let ds = parse_small_image_binary(&bytes, usize::MAX).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.labels().unwrap(), &[0, 3, 6, 9]);
    assert_eq!(ds.inputs.shape(), &[4, 3, 32, 32]);
    assert_eq!(ds.inputs.data()[3072], 0.2);
    assert_eq!(parse_small_image_binary(&bytes, 2).unwrap().len(), 2);
    let empty = parse_small_image_binary(&bytes, 0).unwrap();
    assert!(empty.is_empty());
}

#[test]
fn binary_reader_rejects_truncation_and_bad_labels() {
    let mut bytes: Vec<u8> = (0..2).flat_map(|_| record(1, 0)).collect();
    bytes.pop();
    match parse_small_image_binary(&bytes, usize::MAX) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, BINARY_RECORD as u64),
        other => panic!("expected format error, got {other:?}"),
    }
    let bytes: Vec<u8> = [record(1, 0), record(10, 0)].concat();
    match parse_small_image_binary(&bytes, usize::MAX) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, BINARY_RECORD as u64),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn binary_reader_reads_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    std::fs::write(&path, record(7, 255)).unwrap();
    let ds = load_small_image_binary(&path, 10).unwrap();
    assert_eq!(ds.labels().unwrap(), &[7]);
    assert!(ds.inputs.data().iter().all(|&v| v == 1.0));
    assert!(matches!(load_small_image_binary(&dir.path().join("missing"), 1), Err(Error::Io { .. })));
}

#[test]
fn splits_partition_and_normalize() {
    let task = TextureTask::new(1, 4, 8).unwrap();
    let pool = task.sample(10, 25, Split::Train);
    let test = task.sample(11, 5, Split::Test);
    let s = Splits::from_pool(pool.clone(), test, 0.1, 4).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (90, 10, 20));
    assert_eq!(s, Splits::from_pool(pool, task.sample(11, 5, Split::Test), 0.1, 4).unwrap());
    let refit = Normalization::fit(&s.train.inputs);
    assert!(refit.mean.iter().all(|m| m.abs() < 1e-5));
    assert!(refit.std.iter().all(|v| (v - 1.0).abs() < 1e-5));
    assert_eq!(s.val.norm, s.train.norm);
}

#[test]
fn batch_order_depends_on_seed_and_epoch_only() {
    let a = batch_order(103, 32, 7, 2);
    assert_eq!(a, batch_order(103, 32, 7, 2));
    assert_ne!(a, batch_order(103, 32, 7, 3));
    assert_ne!(a, batch_order(103, 32, 8, 2));
    assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 32, 7]);
    let mut all: Vec<usize> = a.concat();
    all.sort_unstable();
    assert_eq!(all, (0..103).collect::<Vec<_>>());
}

#[test]
fn dataset_cache_round_trips() {
    let task = TextureTask::new(1, 3, 8).unwrap();
    let s = Splits::from_pool(task.sample(1, 4, Split::Train), task.sample(2, 2, Split::Test), 0.25, 0).unwrap();
    for ds in [&s.train, &s.val, &s.test] {
        let bytes = ds.to_container().to_bytes();
        let back = Dataset::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(&back, ds);
    }
    let gen = gen_synthetic_translation(1, 8, 2).unwrap();
    assert_eq!(Dataset::from_container(&gen.to_container()).unwrap(), gen);
    let empty = parse_small_image_binary(&[], 5).unwrap();
    assert_eq!(Dataset::from_container(&empty.to_container()).unwrap(), empty);
}

proptest! {
    #[test]
    fn normalization_round_trips(values in prop::collection::vec(-50.0f32..50.0, 2 * 3 * 4), shift in -5.0f64..5.0) {
        let x = Tensor::new(vec![2, 3, 2, 2], values).unwrap();
        let mut norm = Normalization::fit(&x);
        norm.mean.iter_mut().for_each(|m| *m += shift);
        let mut y = x.clone();
        norm.invert(&mut y);
        norm.apply(&mut y);
        for (a, b) in x.data().iter().zip(y.data()) {
            prop_assert!(((a - b) as f64).abs() <= 1e-6 * (a.abs() as f64).max(1.0));
        }
    }
}
