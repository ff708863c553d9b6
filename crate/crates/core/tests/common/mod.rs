#![allow(dead_code)]

use std::collections::HashSet;

use multiway::mdm::{BlockMask, RasterImage, Vocab, VisualCodebook, DEFAULT_PROJECTION_DIM, MIN_ASPECT, MIN_BLOCK_AREA};
use multiway::model::{
    block_forward, build_attention_mask, embed, encode_embedded, route, Graph, ImageInput, Layout, ModalityTag,
    ModelInput, MultiwayConfig,
};
use multiway::repurpose::{finetune_caption, FinetuneConfig};
use multiway::synth::{pretrain_corpus, SynthCorpus};
use multiway::tensor::{check_gradients, gradcheck::project, Op, SoftmaxMask, Tensor};
use multiway::training::{PatchImage, PretrainData};
use multiway::{Model32, Model64, Result, Tensor32};
use rand::SeedableRng;
use std::sync::Arc;
use rand_chacha::ChaCha8Rng;

/// Small dims that keep f64 gradient checks fast.
pub fn tiny_config() -> MultiwayConfig {
    MultiwayConfig {
        num_layers: 2,
        hidden: 16,
        ffn_inner: 32,
        num_heads: 2,
        vl_expert_layers: 1,
        image_size: 8,
        patch_size: 4,
        channels: 3,
        text_vocab: 40,
        visual_vocab: 8,
        max_seq: 12,
        drop_path_rate: 0.0,
    }
}

pub fn corpus(seed: u64) -> (SynthCorpus, Vocab) {
    let cfg = MultiwayConfig::toy();
    let corpus = pretrain_corpus(256, 256, 256, cfg.image_size, seed);
    let vocab = Vocab::build(corpus.lines(), cfg.text_vocab).unwrap();
    (corpus, vocab)
}

pub fn pretrain_data(corpus: &SynthCorpus, vocab: &Vocab, config: &MultiwayConfig) -> PretrainData<f32> {
    let cb = VisualCodebook::new(config.visual_vocab, config.patch_dim(), DEFAULT_PROJECTION_DIM, 3).unwrap();
    let patch = |img: &RasterImage| PatchImage::new(img, config, &cb).unwrap();
    PretrainData {
        texts: corpus.texts.iter().map(|t| vocab.tokenize(t)).collect(),
        images: corpus.images.iter().map(patch).collect(),
        pairs: corpus.pairs.iter().map(|(i, c)| (patch(i), vocab.tokenize(c))).collect(),
    }
}

pub fn patches(img: &RasterImage, config: &MultiwayConfig) -> Tensor32 {
    img.patches(config.patch_size, config.channels).unwrap()
}

/// Worst relative error of a full toy Multiway block (mixed image/text
/// tokens, random input) against central differences, over the hidden input
/// and a sample of attention, expert and norm parameters.
pub fn block_grad_error(layer: usize, layout: Layout, seed: u64) -> Result<f64> {
    let mut config = MultiwayConfig::toy();
    config.drop_path_rate = 0.0;
    let model = Model64::new(&config, seed)?;
    let mut tags = vec![ModalityTag::Vision; 4];
    tags.extend([ModalityTag::Language; 3]);
    let routing = route(&tags, layer, layout, &config)?;
    let experts: Vec<&str> = if config.has_vl_expert(layer) && layout.uses_vl_experts() {
        vec!["vl"]
    } else {
        vec!["v", "l"]
    };
    let mut names = vec![format!("layers.{layer}.attn.q.w"), format!("layers.{layer}.attn.o.w")];
    for e in experts {
        names.push(format!("layers.{layer}.{e}.ln_attn.g"));
        names.push(format!("layers.{layer}.{e}.fc1.w"));
        names.push(format!("layers.{layer}.{e}.fc2.b"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let mut inputs = vec![Tensor::uniform(&[tags.len(), config.hidden], 1.0, &mut rng)];
    for n in &names {
        let mut t = model.params.get(n)?.clone();
        // move away from init so that gains and biases are not all equal
        t.data_mut().iter_mut().for_each(|v| *v += rand::Rng::gen_range(&mut rng, -0.5..0.5));
        inputs.push(t);
    }
    check_gradients(&inputs, 1e-5, Some((12, seed)), |xs| {
        let mut m = model.clone();
        for (n, x) in names.iter().zip(&xs[1..]) {
            m.params.insert(n.clone(), x.clone());
        }
        let mut g = Graph::new(&m, true, None);
        let h = g.tape.leaf(xs[0].clone(), true)?;
        let mut vars = vec![h];
        for n in &names {
            vars.push(g.param(n)?);
        }
        let out = block_forward(&mut g, layer, h, None, &routing)?;
        let loss = project(&mut g.tape, out, seed)?;
        Ok((g.tape, loss, vars))
    })
}

/// Vocabulary covering the pretraining corpus and every task text.
pub fn task_vocab() -> Vocab {
    let cfg = MultiwayConfig::toy();
    let corpus = pretrain_corpus(256, 256, 256, cfg.image_size, 7);
    let mut lines: Vec<String> = corpus.lines().map(String::from).collect();
    lines.push(multiway::synth::VQA_QUESTION.into());
    lines.push("same different".into());
    Vocab::build(lines.iter().map(String::as_str), cfg.text_vocab).unwrap()
}

pub fn finetune_config(epochs: usize, batch: usize, lr: f64) -> FinetuneConfig {
    let mut fc = FinetuneConfig::new(epochs, batch, lr, 9);
    fc.warmup_epochs = 1.0;
    fc
}

/// Copy-task pairs: three color bands and the caption naming them.
pub fn copy_examples(n: usize, vocab: &Vocab) -> Vec<(Tensor32, Vec<usize>)> {
    let cfg = MultiwayConfig::toy();
    multiway::synth::copy_set(n, cfg.image_size, 3)
        .iter()
        .map(|(img, c)| (patches(img, &cfg), vocab.tokenize(c)))
        .collect()
}

/// A toy captioner finetuned on 64 copy-task pairs from a fresh model.
pub fn trained_captioner(vocab: &Vocab) -> (Model32, Vec<(Tensor32, Vec<usize>)>) {
    let mut model = Model32::new(&MultiwayConfig::toy(), 1).unwrap();
    let examples = copy_examples(64, vocab);
    finetune_caption(&mut model, &examples, &finetune_config(60, 16, 1e-3)).unwrap();
    (model, examples)
}

/// Largest change, over every row at or before `pos` (image rows included),
/// of the seq2seq encoder output when caption tokens after `pos` are
/// replaced. Exactly zero when the mask is sound.
pub fn future_edit_change(model: &Model64, patches: &Tensor<f64>, caption: &[usize], edited: &[usize], pos: usize) -> f64 {
    let hidden = |ids: &[usize]| {
        let input = ModelInput::pair(ImageInput::unmasked(patches.clone()), ids.to_vec());
        let mut g = Graph::eval(model);
        let e = embed(&mut g, &input).unwrap();
        let mask = build_attention_mask(Layout::Seq2Seq, input.image_len(), ids.len());
        let enc = encode_embedded(&mut g, e, &input.tags(), Layout::Seq2Seq, Some(&mask)).unwrap();
        let rows = input.image_len() + pos + 1;
        g.value(enc.hidden).data()[..rows * model.config.hidden].to_vec()
    };
    let (a, b) = (hidden(caption), hidden(edited));
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Names of the differentiable ops covered by [`op_case`].
pub const OP_KINDS: [&str; 19] = [
    "matmul", "add", "mul", "scale", "transpose", "reshape", "concat", "slice", "embedding", "softmax", "layer_norm",
    "gelu", "tanh", "exp", "dropout_mask", "cross_entropy", "l2_normalize", "sum", "mean",
];

/// A random instance of op `kind` (an index into [`OP_KINDS`]) with inputs,
/// shapes and attributes drawn from `seed`.
pub fn op_case(kind: usize, seed: u64) -> (Op<f64>, Vec<Tensor<f64>>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(kind as u64));
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (a, b, c) = (dim(1, 4), dim(1, 5), dim(2, 4));
    let batched = seed % 2 == 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5);
    let mut t = |shape: &[usize]| Tensor::uniform(shape, 1.5, &mut rng);
    match OP_KINDS[kind] {
        "matmul" if batched => (Op::MatMul, vec![t(&[2, a, b]), t(&[b, c])]),
        "matmul" => (Op::MatMul, vec![t(&[a, b]), t(&[b, c])]),
        "add" if batched => (Op::Add, vec![t(&[a, b]), t(&[b])]),
        "add" => (Op::Add, vec![t(&[a, b]), t(&[a, b])]),
        "mul" if batched => (Op::Mul, vec![t(&[a, b, c]), t(&[b, c])]),
        "mul" => (Op::Mul, vec![t(&[a, b]), t(&[a, b])]),
        "scale" => (Op::Scale(seed as f64 % 7.0 - 3.5), vec![t(&[a, b])]),
        "transpose" if batched => (Op::Transpose(0, 2), vec![t(&[a, b, c])]),
        "transpose" => (Op::Transpose(0, 1), vec![t(&[a, b])]),
        "reshape" => (Op::Reshape(vec![b, a * c]), vec![t(&[a, b, c])]),
        "concat" => (Op::Concat { axis: usize::from(batched) }, vec![t(&[a, c]), t(&[a, c])]),
        "slice" => {
            let start = (seed as usize) % b;
            (Op::Slice { axis: 1, start, end: b }, vec![t(&[a, b])])
        }
        "embedding" => {
            let ids = (0..a + 1).map(|i| (i * 7 + seed as usize) % c).collect();
            (Op::Embedding { ids: Arc::new(ids) }, vec![t(&[c, b])])
        }
        "softmax" => {
            let mask = batched.then(|| {
                let allowed = (0..a * c).map(|i| i % c == 0 || (i + seed as usize) % 3 != 0).collect();
                SoftmaxMask {
                    rows: a,
                    cols: c,
                    allowed: Arc::new(allowed),
                }
            });
            (Op::Softmax { axis: 1, mask }, vec![t(&[a, c])])
        }
        "layer_norm" => (Op::LayerNorm { eps: 1e-5 }, vec![t(&[a, c + 2]), t(&[c + 2]), t(&[c + 2])]),
        "gelu" => (Op::Gelu, vec![t(&[a, b])]),
        "tanh" => (Op::Tanh, vec![t(&[a, b])]),
        "exp" => (Op::Exp, vec![t(&[a, b])]),
        "dropout_mask" => {
            let mask = (0..a * b).map(|i| if (i + seed as usize) % 3 == 0 { 0.0 } else { 1.5 }).collect();
            (Op::DropoutMask { mask: Arc::new(mask) }, vec![t(&[a, b])])
        }
        "cross_entropy" => {
            let targets = (0..a).map(|i| (i + seed as usize) % (c + 1)).collect();
            let smoothing = if batched { 0.1 } else { 0.0 };
            (Op::CrossEntropy { targets: Arc::new(targets), smoothing }, vec![t(&[a, c + 1])])
        }
        "l2_normalize" => (Op::L2Normalize, vec![t(&[a, c])]),
        "sum" => (Op::Sum, vec![t(&[a, b])]),
        "mean" => (Op::Mean, vec![t(&[a, b])]),
        other => unreachable!("{other}"),
    }
}

/// Every masked cell lies in a sampled rectangle, every rectangle is fully
/// masked, in bounds and within the area/aspect limits.
pub fn check_block_structure(m: &BlockMask, rows: usize, cols: usize) -> Result<(), String> {
    let cells: HashSet<usize> = m.plan.positions.iter().map(|p| p - 1).collect();
    let min_area = MIN_BLOCK_AREA.min(rows * cols);
    for r in &m.rects {
        if r.top + r.height > rows || r.left + r.width > cols {
            return Err(format!("{r:?} out of bounds"));
        }
        if r.area() < min_area {
            return Err(format!("{r:?} below minimum area"));
        }
        let aspect = r.height as f64 / r.width as f64;
        if !(MIN_ASPECT..=1.0 / MIN_ASPECT).contains(&aspect) {
            return Err(format!("{r:?} aspect {aspect}"));
        }
        for row in r.top..r.top + r.height {
            for col in r.left..r.left + r.width {
                if !cells.contains(&(row * cols + col)) {
                    return Err(format!("{r:?} cell ({row}, {col}) not masked"));
                }
            }
        }
    }
    for &c in &cells {
        if !m.rects.iter().any(|r| r.contains(c / cols, c % cols)) {
            return Err(format!("cell {c} outside every rectangle"));
        }
    }
    let n = cells.len();
    if n < m.target || n > m.target + m.max_overshoot {
        return Err(format!("count {n} outside [{}, {}]", m.target, m.target + m.max_overshoot));
    }
    Ok(())
}
