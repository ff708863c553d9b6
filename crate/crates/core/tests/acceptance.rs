//! Acceptance criteria, run in order with one PASS/FAIL line each.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use multiway::checkpoint::{from_bytes, to_bytes, Checkpoint};
use multiway::mdm::{plan_block_mask, plan_text_mask, MaskingConfig, Quotas, Vocab};
use multiway::model::{
    abbreviate, block_forward, build_attention_mask, count_params, embed, route, Expert, GradMap, Graph, Layout,
    ModalityTag, ModelInput, MultiwayConfig,
};
use multiway::repurpose::{
    caption_generate, dot, embed_image, embed_text, greedy_decode, intermediate_finetune_contrastive, recall_at_k,
    retrieve, RetrievalIndex,
};
use multiway::synth::{pretrain_corpus, retrieval_pairs};
use multiway::tensor::{grad_check, Tensor};
use multiway::training::{
    adamw_step, masked_recovery, pretrain_loop, AdamW, OptimizerState, PretrainConfig, Schedule, UpdateConfig,
};
use multiway::{Error, Model32, Model64, Tensor32, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_runtime(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:.1?}, limit {limit:?}"))
}

fn nearest_million(n: u64) -> u64 {
    (n + 500_000) / 1_000_000
}

fn parameter_accounting() -> Outcome {
    let start = Instant::now();
    let b = count_params(&MultiwayConfig::giant());
    ensure(b.v_ffn == 692_362_240 && b.l_ffn == 692_362_240, format!("V/L-FFN {} / {}", b.v_ffn, b.l_ffn))?;
    ensure(b.vl_ffn == 51_927_168, format!("VL-FFN {}", b.vl_ffn))?;
    ensure(b.shared_attention == 317_419_520, format!("attention {}", b.shared_attention))?;
    let rounded = [b.v_ffn, b.l_ffn, b.vl_ffn, b.shared_attention].map(nearest_million);
    ensure(rounded == [692, 692, 52, 317], format!("rounded {rounded:?}"))?;
    let rel = (b.total as f64 / 1.9e9 - 1.0).abs();
    ensure(rel <= 0.05, format!("total {} is {:.1}% from 1.9B", b.total, rel * 100.0))?;
    within_runtime(start, Duration::from_secs(1))?;
    Ok(format!(
        "V-FFN {} L-FFN {} VL-FFN {} attention {} total {} ({:+.1}% vs 1.9B)",
        abbreviate(b.v_ffn),
        abbreviate(b.l_ffn),
        abbreviate(b.vl_ffn),
        abbreviate(b.shared_attention),
        abbreviate(b.total),
        (b.total as f64 / 1.9e9 - 1.0) * 100.0
    ))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst_op = (0.0f64, "");
    for (kind, name) in common::OP_KINDS.iter().enumerate() {
        for seed in 0..100 {
            let (op, inputs) = common::op_case(kind, seed);
            let err = grad_check(&op, &inputs, 1e-5).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            ensure(err < 1e-5, format!("{name} seed {seed}: relative error {err:.2e}"))?;
            if err > worst_op.0 {
                worst_op = (err, name);
            }
        }
    }
    let mut worst_block = 0.0f64;
    for seed in 0..100u64 {
        let layer = 1 + seed as usize % 4;
        let layout = if seed % 2 == 0 { Layout::Fusion } else { Layout::Dual };
        let err = common::block_grad_error(layer, layout, seed).map_err(|e| e.to_string())?;
        ensure(err < 1e-4, format!("block layer {layer} {layout:?} seed {seed}: relative error {err:.2e}"))?;
        worst_block = worst_block.max(err);
    }
    within_runtime(start, Duration::from_secs(120))?;
    Ok(format!(
        "{} ops x 100 seeds, worst {:.1e} ({}); block x 100 seeds, worst {worst_block:.1e}",
        common::OP_KINDS.len(),
        worst_op.0,
        worst_op.1
    ))
}

fn mask_statistics() -> Outcome {
    let start = Instant::now();
    let mut report = Vec::new();
    for ratio in [0.15, 0.5] {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut sum = 0.0;
        for seed in 0..10_000u64 {
            let len = rng.gen_range(20..=60);
            sum += plan_text_mask(len, ratio, seed).map_err(|e| e.to_string())?.len() as f64 / len as f64;
        }
        let mean = sum / 10_000.0;
        ensure((mean - ratio).abs() <= 0.01, format!("text {ratio}: mean fraction {mean:.4}"))?;
        report.push(format!("text {ratio} -> {mean:.4}"));
    }
    let mut min_count = usize::MAX;
    for seed in 0..10_000u64 {
        let m = plan_block_mask(16, 16, 0.4, seed).map_err(|e| e.to_string())?;
        let n = m.plan.positions.len();
        ensure(n >= 102, format!("block seed {seed}: {n} cells"))?;
        common::check_block_structure(&m, 16, 16).map_err(|e| format!("block seed {seed}: {e}"))?;
        min_count = min_count.min(n);
    }
    within_runtime(start, Duration::from_secs(60))?;
    report.push(format!("16x16 blocks min count {min_count}"));
    Ok(report.join(", "))
}

fn seq2seq_mask() -> Outcome {
    let rows = build_attention_mask(Layout::Seq2Seq, 2, 2).rows();
    let expected = [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]];
    for (r, e) in rows.iter().zip(expected) {
        ensure(r.iter().map(|&b| b as i32).eq(e), format!("mask rows {rows:?}"))?;
    }
    let model = Model64::new(&MultiwayConfig::toy(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for _ in 0..10 {
        let patches: Tensor64 = random_image(&mut rng).cast();
        let caption: Vec<usize> = std::iter::once(1)
            .chain((0..6).map(|_| rng.gen_range(8..600)))
            .chain(std::iter::once(2))
            .collect();
        for pos in 0..caption.len() - 1 {
            let mut edited = caption.clone();
            for t in &mut edited[pos + 1..] {
                *t = rng.gen_range(8..600);
            }
            worst = worst.max(common::future_edit_change(&model, &patches, &caption, &edited, pos));
            cases += 1;
        }
    }
    ensure(worst == 0.0, format!("future edits changed earlier outputs by {worst:e}"))?;
    Ok(format!("mask(2,2) exact; {cases} future-edit perturbations, max change {worst}"))
}

fn routing_parity() -> Outcome {
    let config = MultiwayConfig::toy();
    let model = Model64::new(&config, 3).unwrap();
    let ids = vec![1, 400, 401, 402, 403, 2];
    let tags = vec![ModalityTag::Language; ids.len()];
    let run = |layout: Layout| -> Vec<Tensor64> {
        let mut g = Graph::eval(&model);
        let mut h = embed(&mut g, &ModelInput::text(ids.clone())).unwrap();
        let mut out = Vec::new();
        for layer in 1..config.first_vl_layer() {
            let routing = route(&tags, layer, layout, &config).unwrap();
            h = block_forward(&mut g, layer, h, None, &routing).unwrap();
            out.push(g.value(h).clone());
        }
        out
    };
    let (fusion, language) = (run(Layout::Fusion), run(Layout::LanguageEncoder));
    ensure(
        fusion.iter().zip(&language).all(|(a, b)| a.bit_eq(b)),
        "pure-text fusion differs from the language encoder",
    )?;
    let mut total = 0;
    for config in [config.clone(), MultiwayConfig::giant()] {
        let mut mixed = vec![ModalityTag::Vision; 10];
        mixed.extend([ModalityTag::Language; 7]);
        for layer in config.first_vl_layer()..=config.num_layers {
            for layout in [Layout::Fusion, Layout::Seq2Seq] {
                let r = route(&mixed, layer, layout, &config).map_err(|e| e.to_string())?;
                ensure(
                    r.iter().all(|&e| e == Expert::VisionLanguage),
                    format!("layer {layer} {layout:?}: {r:?}"),
                )?;
                total += r.len();
            }
        }
    }
    Ok(format!(
        "{} layers bit-identical; {total}/{total} mixed tokens at top layers routed to VL experts",
        fusion.len()
    ))
}

fn std_dev(data: &[f32]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    (data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn init_scaling() -> Outcome {
    let config = MultiwayConfig {
        num_layers: 12,
        ..MultiwayConfig::toy()
    };
    let model = Model32::new(&config, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // 1,000 entries drawn from each output projection of a layer
    let estimate = |layer: usize, rng: &mut ChaCha8Rng| -> f64 {
        let names = [
            format!("layers.{layer}.attn.o.w"),
            format!("layers.{layer}.v.fc2.w"),
            format!("layers.{layer}.l.fc2.w"),
        ];
        let pool: Vec<f32> = names.iter().flat_map(|n| model.params.get(n).unwrap().data().to_vec()).collect();
        let sample: Vec<f32> = rand::seq::index::sample(rng, pool.len(), 1000).iter().map(|i| pool[i]).collect();
        std_dev(&sample)
    };
    let mut worst = 0.0f64;
    for layer in 2..=config.num_layers {
        let (mut base, mut this) = (0.0, 0.0);
        // average of repeated 1,000-sample estimates
        for _ in 0..20 {
            base += estimate(1, &mut rng);
            this += estimate(layer, &mut rng);
        }
        let ratio = this / base;
        let expected = (1.0 / layer as f64).sqrt();
        let dev = (ratio / expected - 1.0).abs();
        ensure(dev <= 0.02, format!("layer {layer}: ratio {ratio:.4}, expected {expected:.4}"))?;
        worst = worst.max(dev);
    }
    Ok(format!("layers 2..=12, worst relative deviation {:.2}%", worst * 100.0))
}

fn smoke_run(config: &MultiwayConfig, data: &multiway::training::PretrainData<f32>) -> (Vec<u8>, Vec<f64>, Model32) {
    let steps = 200;
    let run = PretrainConfig {
        steps,
        quotas: Quotas::new(8, 8, 8),
        seed: 5,
        update: UpdateConfig {
            schedule: Schedule {
                peak_lr: 1e-3,
                warmup_steps: 20,
                total_steps: steps,
                floor_lr: 0.0,
            },
            adamw: AdamW::default(),
            clip_norm: 3.0,
            layer_decay: 1.0,
        },
        masking: MaskingConfig::default(),
        record_wall_time: false,
    };
    let mut model = Model32::new(config, 1).unwrap();
    let mut state = OptimizerState::new(AdamW::default());
    let log = pretrain_loop(&mut model, &mut state, data, &run, |_, _, _| Ok(())).unwrap();
    let mut bytes: Vec<u8> = log.iter().flat_map(|m| serde_json::to_vec(m).unwrap()).collect();
    bytes.extend(to_bytes(&model, Some(&state), None).unwrap());
    (bytes, log.iter().map(|m| m.total_loss()).collect(), model)
}

fn pretraining_smoke() -> Outcome {
    let start = Instant::now();
    let config = MultiwayConfig::toy();
    let (corpus, vocab) = common::corpus(7);
    let data = common::pretrain_data(&corpus, &vocab, &config);
    let (first, losses, model) = smoke_run(&config, &data);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (initial, last) = (mean(&losses[..10]), mean(&losses[losses.len() - 10..]));
    ensure(last < 0.8 * initial, format!("loss {initial:.3} -> {last:.3}"))?;
    let r = masked_recovery(&model, &data, &MaskingConfig::default(), 64, 17).map_err(|e| e.to_string())?;
    let (text_chance, image_chance) = (1.0 / config.text_vocab as f64, 1.0 / config.visual_vocab as f64);
    ensure(
        r.text_accuracy() > 5.0 * text_chance && r.image_accuracy() > 5.0 * image_chance,
        format!("recovery text {:.3} image {:.3}", r.text_accuracy(), r.image_accuracy()),
    )?;
    let (second, _, _) = smoke_run(&config, &data);
    ensure(first == second, "two seeded runs differ")?;
    within_runtime(start, Duration::from_secs(300))?;
    Ok(format!(
        "loss {initial:.3} -> {last:.3} ({:.2}x); recovery text {:.3} ({:.0}x chance) image {:.3} ({:.1}x chance); runs byte-identical",
        last / initial,
        r.text_accuracy(),
        r.text_accuracy() / text_chance,
        r.image_accuracy(),
        r.image_accuracy() / image_chance
    ))
}

fn desk_retrieval() -> Outcome {
    let start = Instant::now();
    let config = MultiwayConfig::toy();
    let corpus = pretrain_corpus(256, 256, 256, config.image_size, 7);
    let vocab = Vocab::build(corpus.lines(), config.text_vocab).unwrap();
    let pairs: Vec<(Tensor32, Vec<usize>)> = retrieval_pairs(8, config.image_size, 3)
        .iter()
        .map(|(img, c)| (common::patches(img, &config), vocab.tokenize(c)))
        .collect();
    ensure(pairs.len() == 512, format!("{} pairs", pairs.len()))?;
    let mut model = Model32::new(&config, 1).unwrap();
    intermediate_finetune_contrastive(&mut model, &pairs, &common::finetune_config(20, 16, 3e-4))
        .map_err(|e| e.to_string())?;
    let images: Vec<_> = pairs[..64].iter().map(|(p, _)| embed_image(&model, p).unwrap()).collect();
    let texts: Vec<_> = pairs[..64].iter().map(|(_, t)| embed_text(&model, t).unwrap()).collect();
    let r = recall_at_k(&images, &texts, &[1, 5, 10]).map_err(|e| e.to_string())?;
    ensure(
        r.image_to_text[0] >= 0.9 && r.text_to_image[0] >= 0.9,
        format!("R@1 image-to-text {:.3} text-to-image {:.3}", r.image_to_text[0], r.text_to_image[0]),
    )?;
    let took = start.elapsed();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut index = RetrievalIndex::new();
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let stored: Vec<Vec<f64>> = (0..1024).map(|_| unit(&mut rng)).collect();
    for (i, e) in stored.iter().enumerate() {
        index.insert(i as u64, ModalityTag::Vision, e.clone()).unwrap();
    }
    for _ in 0..4 {
        let q = unit(&mut rng);
        let mut oracle: Vec<(f64, u64)> = stored.iter().enumerate().map(|(i, e)| (dot(e, &q), i as u64)).collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for k in 1..=1024 {
            let hits = retrieve(&index, &q, k).map_err(|e| e.to_string())?;
            ensure(
                hits.len() == k && hits.iter().zip(&oracle).all(|(h, o)| h.id == o.1 && h.score == o.0),
                format!("retrieve differs from the exhaustive scan at k = {k}"),
            )?;
        }
    }
    ensure(took < Duration::from_secs(300), format!("finetune and eval took {took:.1?}"))?;
    Ok(format!(
        "R@1 image-to-text {:.1}% text-to-image {:.1}% (R@5 {:.1}% / {:.1}%); retrieve equals exhaustive scan for k = 1..=1024; {took:.0?}",
        100.0 * r.image_to_text[0],
        100.0 * r.text_to_image[0],
        100.0 * r.image_to_text[1],
        100.0 * r.text_to_image[1]
    ))
}

fn random_image(rng: &mut ChaCha8Rng) -> Tensor32 {
    let cfg = MultiwayConfig::toy();
    Tensor::uniform(&[cfg.num_patches(), cfg.patch_dim()], 1.0, rng)
}

fn generation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut terminated = 0;
    for seed in 0..100 {
        let model = Model32::new(&MultiwayConfig::toy(), 1000 + seed).unwrap();
        let img = random_image(&mut rng);
        let greedy = greedy_decode(&model, &img, 6).map_err(|e| e.to_string())?;
        let beam = caption_generate(&model, &img, 1, 6).map_err(|e| e.to_string())?;
        ensure(
            beam.tokens == greedy.tokens && beam.terminated == greedy.terminated,
            format!("model {seed}: beam-1 {:?} vs greedy {:?}", beam.tokens, greedy.tokens),
        )?;
        terminated += usize::from(greedy.terminated);
    }
    let vocab = common::task_vocab();
    let (model, examples) = common::trained_captioner(&vocab);
    let mut exact = 0;
    for (patches, caption) in &examples {
        let out = caption_generate(&model, patches, 3, 8).map_err(|e| e.to_string())?;
        let again = caption_generate(&model, patches, 3, 8).map_err(|e| e.to_string())?;
        ensure(out == again && out.score.to_bits() == again.score.to_bits(), "generation is not reproducible")?;
        if out.terminated && out.tokens[..] == caption[1..] {
            exact += 1;
        }
    }
    ensure(exact == examples.len(), format!("copy task exact {exact}/{}", examples.len()))?;
    Ok(format!(
        "beam-1 equals greedy on 100 random models ({terminated} terminated); copy task exact {exact}/{}; outputs reproducible",
        examples.len()
    ))
}

fn checkpoint_round_trip() -> Outcome {
    let mut model = Model32::new(&MultiwayConfig::toy(), 2).unwrap();
    let mut state = OptimizerState::new(AdamW::default());
    let grads: GradMap<f32> = model
        .params
        .iter()
        .map(|(n, t)| {
            let g = t.data().iter().map(|v| v.sin()).collect();
            (n.clone(), Tensor::new(t.shape().to_vec(), g).unwrap())
        })
        .collect();
    for _ in 0..3 {
        adamw_step(&mut model.params, &grads, &mut state, 1e-3).map_err(|e| e.to_string())?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("run.mwt");
    multiway::checkpoint::save_checkpoint(&path, &model, Some(&state), Some("seed = 2\n")).map_err(|e| e.to_string())?;
    let loaded: Checkpoint<f32> = multiway::checkpoint::load_checkpoint(&path).map_err(|e| e.to_string())?;
    let original = Checkpoint {
        model: model.clone(),
        optimizer: Some(state.clone()),
        run_config: Some("seed = 2\n".into()),
    };
    ensure(loaded.bit_eq(&original), "loaded checkpoint differs")?;

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut cases = 0;
    let mut check = |corrupt: &[u8], what: String| -> Result<(), String> {
        cases += 1;
        match catch_unwind(AssertUnwindSafe(|| from_bytes::<f32>(corrupt))) {
            Err(_) => Err(format!("{what}: panicked")),
            Ok(Ok(_)) => Err(format!("{what}: accepted")),
            Ok(Err(Error::Checkpoint(_))) => Ok(()),
            Ok(Err(e)) => Err(format!("{what}: untyped error {e}")),
        }
    };
    for _ in 0..300 {
        let len = rng.gen_range(0..bytes.len());
        check(&bytes[..len], format!("truncated to {len}"))?;
    }
    for _ in 0..300 {
        let mut c = bytes.clone();
        let at = rng.gen_range(0..bytes.len());
        c[at] ^= rng.gen_range(1..=255u8);
        check(&c, format!("byte {at} flipped"))?;
    }
    let mut c = bytes.clone();
    c[..4].copy_from_slice(b"NOPE");
    check(&c, "foreign magic".into())?;
    let mut c = bytes.clone();
    c[4] = c[4].wrapping_add(1);
    check(&c, "version bump".into())?;
    let mut c = bytes.clone();
    c.push(0);
    check(&c, "trailing byte".into())?;
    Ok(format!(
        "save/load bit-exact with optimizer state (step {}); {cases} corrupted files all rejected with typed errors",
        state.step
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("parameter accounting", parameter_accounting),
        ("gradient suite", gradient_suite),
        ("mask statistics", mask_statistics),
        ("seq2seq mask exactness", seq2seq_mask),
        ("routing parity", routing_parity),
        ("init scaling", init_scaling),
        ("desk pretraining smoke", pretraining_smoke),
        ("desk retrieval", desk_retrieval),
        ("generation", generation),
        ("checkpoint round-trip", checkpoint_round_trip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("PASS criterion {id:>2} {name}: {detail} [{took:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name}: {detail} [{took:.1?}]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
