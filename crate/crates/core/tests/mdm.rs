mod common;

use std::collections::HashSet;

use multiway::mdm::{
    apply_mask, compose_batch, mask_count, mask_example, plan_block_mask, plan_text_mask, visual_tokenize,
    MaskPlan, MaskingConfig, Quotas, SequenceKind, StreamSizes, TokenSequence, VisualCodebook, CLS_ID, IMAGE_MASK,
    MASK_ID, SEP_ID,
};
use multiway::tensor::Tensor;
use multiway::Tensor64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tokenizer_examples() {
    let (corpus, vocab) = common::corpus(0);
    assert_eq!(vocab.tokenize(""), vec![CLS_ID, SEP_ID]);
    let ids = vocab.tokenize("a a a");
    assert_eq!(ids.len(), 5);
    assert!(ids[1] == ids[2] && ids[2] == ids[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lines: Vec<&str> = corpus.lines().collect();
    for _ in 0..1000 {
        let line = lines[rng.gen_range(0..lines.len())];
        let ids = vocab.tokenize(line);
        assert_eq!(ids[0], CLS_ID);
        assert_eq!(*ids.last().unwrap(), SEP_ID);
        assert_eq!(vocab.detokenize(&ids), line);
    }
    // unseen words fall back to bytes and still round-trip
    for s in ["zebra ünïcode", "x\ty", "🙂 ok"] {
        assert_eq!(vocab.detokenize(&vocab.tokenize(s)), s);
    }
}

#[test]
fn visual_tokenizer_examples() {
    let cb = VisualCodebook::new(64, 48, 16, 9).unwrap();
    for k in [0, 7, 63] {
        let row = Tensor64::new(vec![1, 48], cb.vector(k).to_vec()).unwrap();
        assert_eq!(visual_tokenize(&row, &cb).unwrap(), vec![k]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let patch: Vec<f64> = (0..48).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mut twice = patch.clone();
    twice.extend(&patch);
    let ids = visual_tokenize(&Tensor64::new(vec![2, 48], twice).unwrap(), &cb).unwrap();
    assert_eq!(ids[0], ids[1]);
    let noise = Tensor64::uniform(&[10_000, 48], 0.5, &mut rng);
    let used: HashSet<usize> = visual_tokenize(&noise, &cb).unwrap().into_iter().collect();
    assert!(used.len() >= 32, "{} of 64 entries used", used.len());
    assert!(visual_tokenize(&Tensor64::zeros(&[2, 47]), &cb).is_err());
    assert!(VisualCodebook::new(1, 48, 16, 0).is_err());
}

#[test]
fn text_mask_counts() {
    assert_eq!(plan_text_mask(20, 0.15, 0).unwrap().len(), 3);
    assert_eq!(plan_text_mask(10, 0.5, 0).unwrap().len(), 5);
    assert_eq!(plan_text_mask(1, 0.15, 0).unwrap().len(), 1);
    assert_eq!(mask_count(5, 0.5), 3);
    assert!(plan_text_mask(0, 0.15, 0).is_err());
    assert!(plan_text_mask(5, 1.0, 0).is_err());
    assert_eq!(plan_text_mask(12, 0.5, 4).unwrap(), plan_text_mask(12, 0.5, 4).unwrap());
}

#[test]
fn text_mask_mean_fraction() {
    for ratio in [0.15, 0.5] {
        let mut sum = 0.0;
        for seed in 0..10_000u64 {
            let len = 20 + (seed % 41) as usize;
            sum += plan_text_mask(len, ratio, seed).unwrap().len() as f64 / len as f64;
        }
        let mean = sum / 10_000.0;
        assert!((mean - ratio).abs() <= 0.01, "ratio {ratio}: mean {mean}");
    }
}

#[test]
fn block_mask_examples() {
    let m = plan_block_mask(16, 16, 0.4, 3).unwrap();
    assert_eq!(m.target, 102);
    assert!(m.plan.len() >= 102);
    common::check_block_structure(&m, 16, 16).unwrap();
    assert_eq!(m, plan_block_mask(16, 16, 0.4, 3).unwrap());
    assert!(plan_block_mask(4, 4, 0.99, 0).is_err());
    assert!(plan_block_mask(4, 4, 1.0, 0).is_err());
    assert!(plan_block_mask(1, 8, 0.4, 0).is_err());
    let small = plan_block_mask(6, 6, 0.4, 1).unwrap();
    common::check_block_structure(&small, 6, 6).unwrap();
    assert!(small.plan.positions.iter().all(|&p| (1..=36).contains(&p)));
}

#[test]
fn apply_mask_examples() {
    let seq = TokenSequence::text(vec![CLS_ID, 10, 11, 12, 13, SEP_ID]);
    let m = apply_mask(&seq, &MaskPlan::empty(MASK_ID)).unwrap();
    assert_eq!(m.corrupted, seq);
    assert!(m.targets.is_empty());

    let four = TokenSequence::text(vec![20, 21, 22, 23]);
    let full = MaskPlan {
        positions: vec![0, 1, 2, 3],
        mask_token_id: MASK_ID,
    };
    assert_eq!(apply_mask(&four, &full).unwrap().corrupted.ids, vec![MASK_ID; 4]);

    let plan = plan_text_mask(4, 0.5, 7).unwrap();
    let m = apply_mask(&seq, &plan).unwrap();
    for i in 0..seq.len() {
        assert_eq!(m.corrupted.ids[i] != seq.ids[i], plan.positions.contains(&i));
    }
    assert_eq!(m.restore(), seq);

    let oob = MaskPlan {
        positions: vec![6],
        mask_token_id: MASK_ID,
    };
    assert!(apply_mask(&seq, &oob).is_err());
}

#[test]
fn pair_masking_covers_both_modalities() {
    let cfg = multiway::model::MultiwayConfig::toy();
    let (rows, cols) = cfg.grid();
    let patches = Tensor::<f32>::zeros(&[rows * cols, cfg.patch_dim()]);
    let visual: Vec<usize> = (0..rows * cols).map(|i| i % 64).collect();
    let text = vec![CLS_ID, 30, 31, 32, 33, SEP_ID];
    let masking = MaskingConfig::default();
    let ex = mask_example(Some((&patches, &visual)), Some(&text), (rows, cols), &masking, 5).unwrap();
    assert_eq!(ex.kind, SequenceKind::Pair);
    assert_eq!(ex.text.len(), 2);
    let image_len = rows * cols + 1;
    assert!(ex.text.rows.iter().all(|&r| r > image_len && r < image_len + text.len() - 1));
    assert!(ex.image.len() >= (0.4 * (rows * cols) as f64) as usize);
    assert!(ex.image.rows.iter().all(|&r| r >= 1 && r < image_len));
    let off = MaskingConfig {
        mask_pair_images: false,
        ..masking
    };
    let ex = mask_example(Some((&patches, &visual)), Some(&text), (rows, cols), &off, 5).unwrap();
    assert!(ex.image.is_empty());
    assert!(mask_example::<f32>(None, None, (rows, cols), &off, 5).is_err());
}

#[test]
fn compose_batch_examples() {
    let sizes = StreamSizes {
        text: 40,
        image: 40,
        pair: 40,
    };
    let b = compose_batch(sizes, Quotas::new(8, 8, 8), 1, 0, 0, false).unwrap();
    assert_eq!(b.len(), 24);
    for kind in [SequenceKind::MonoText, SequenceKind::MonoImage, SequenceKind::Pair] {
        assert_eq!(b.count(kind), 8);
    }
    let t = compose_batch(sizes, Quotas::new(1, 0, 0), 1, 0, 0, false).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(t.samples[0].kind, SequenceKind::MonoText);
    assert_eq!(b, compose_batch(sizes, Quotas::new(8, 8, 8), 1, 0, 0, false).unwrap());
    assert_ne!(b, compose_batch(sizes, Quotas::new(8, 8, 8), 1, 1, 0, false).unwrap());
    // batches of one pass never repeat a sample
    let seen: HashSet<usize> = (0..5)
        .flat_map(|i| compose_batch(sizes, Quotas::new(8, 0, 0), 1, 0, i, false).unwrap().samples)
        .map(|s| s.index)
        .collect();
    assert_eq!(seen.len(), 40);
    assert!(compose_batch(sizes, Quotas::new(8, 0, 0), 1, 0, 5, false).is_err());
    assert_eq!(compose_batch(sizes, Quotas::new(8, 0, 0), 1, 0, 5, true).unwrap().len(), 8);
    assert!(compose_batch(sizes, Quotas::new(0, 0, 0), 1, 0, 0, true).is_err());
    let empty = StreamSizes { text: 0, ..sizes };
    assert!(compose_batch(empty, Quotas::new(1, 0, 0), 1, 0, 0, true).is_err());
}

#[test]
fn batch_content_does_not_depend_on_build_order() {
    let sizes = StreamSizes {
        text: 30,
        image: 20,
        pair: 10,
    };
    let q = Quotas::new(4, 4, 4);
    let forward: Vec<_> = (0..6).map(|i| compose_batch(sizes, q, 9, 2, i, true).unwrap()).collect();
    let backward: Vec<_> = (0..6).rev().map(|i| compose_batch(sizes, q, 9, 2, i, true).unwrap()).collect();
    assert!(forward.iter().eq(backward.iter().rev()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn text_plans_skip_special_positions(len in 1usize..60, ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let plan = plan_text_mask(len, ratio, seed).unwrap();
        prop_assert_eq!(plan.len(), mask_count(len, ratio));
        prop_assert!(plan.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.positions.iter().all(|&p| p >= 1 && p <= len));
    }

    #[test]
    fn mask_then_restore_is_identity(len in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = vec![CLS_ID];
        ids.extend((0..len).map(|_| rng.gen_range(5..600)));
        ids.push(SEP_ID);
        let seq = TokenSequence::text(ids);
        let plan = plan_text_mask(len, 0.5, seed).unwrap();
        let m = apply_mask(&seq, &plan).unwrap();
        prop_assert_eq!(m.corrupted.ids[0], CLS_ID);
        prop_assert_eq!(*m.corrupted.ids.last().unwrap(), SEP_ID);
        prop_assert_eq!(m.restore(), seq);
    }

    #[test]
    fn block_masks_are_unions_of_admissible_rectangles(
        rows in 4usize..17,
        cols in 4usize..17,
        ratio in 0.05f64..0.5,
        seed in any::<u64>(),
    ) {
        if let Ok(m) = plan_block_mask(rows, cols, ratio, seed) {
            prop_assert!(common::check_block_structure(&m, rows, cols).is_ok(), "{:?}", common::check_block_structure(&m, rows, cols));
            prop_assert_eq!(m.plan.mask_token_id, IMAGE_MASK);
        }
    }
}
