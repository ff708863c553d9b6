use std::path::Path;

use multiway::checkpoint::{check_compatible, load_checkpoint, save_checkpoint, Checkpoint, MAGIC};
use multiway::config::{FinetuneSection, RunConfig, Task};
use multiway::mdm::{Vocab, VisualCodebook, DEFAULT_PROJECTION_DIM};
use multiway::model::{count_params, MultiwayConfig, MultiwayModel};
use multiway::repurpose::{
    caption_generate, classify_by_retrieval, embed_image, embed_text, finetune_caption, finetune_classify,
    finetune_fusion, finetune_two_pair, fusion_classify, intermediate_finetune_contrastive, recall_at_k, retrieve,
    two_pair_classify, argmax, FinetuneOutcome, FusionHead, Hit, RetrievalIndex, TwoPairInput,
};
use multiway::seed::mix_seed;
use multiway::training::{pretrain_loop, OptimizerState, PatchImage, PretrainData};
use multiway::model::ModalityTag;
use multiway::{Error, Model32, Result, Tensor32};
use serde_json::json;

use crate::io::{
    create_dir, image_id, load_image, load_patches, read_lines, read_tsv, require, sibling, vocab_for, write_file,
    JsonLines,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.mwt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Writes the resolved config and vocabulary into the output directory.
fn prepare_output(config: &RunConfig, vocab: &Vocab) -> Result<String> {
    create_dir(&config.output_dir)?;
    let text = config.resolved().to_toml()?;
    write_file(&config.output_dir.join(CONFIG_FILE), &text)?;
    vocab.save(&config.output_dir.join(VOCAB_FILE))?;
    Ok(text)
}

pub fn pretrain(config_path: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let run = config.pretrain_config()?;
    let data_cfg = &config.data;
    let mcfg = &config.model;

    let texts = match &data_cfg.texts {
        Some(p) => read_lines(p)?,
        None => Vec::new(),
    };
    let images = match &data_cfg.images {
        Some(p) => read_lines(p)?.into_iter().map(|name| sibling(p, &name)).collect(),
        None => Vec::new(),
    };
    let pairs = match &data_cfg.pairs {
        Some(p) => read_tsv(p, 2)?
            .into_iter()
            .map(|r| (sibling(p, &r[0]), r[1].clone()))
            .collect(),
        None => Vec::new(),
    };
    for p in images.iter().chain(pairs.iter().map(|(p, _)| p)) {
        require(p)?;
    }

    let lines = texts.iter().chain(pairs.iter().map(|(_, c)| c)).map(String::as_str);
    let vocab = Vocab::build(lines, mcfg.text_vocab)?;
    let codebook = VisualCodebook::new(mcfg.visual_vocab, mcfg.patch_dim(), DEFAULT_PROJECTION_DIM, data_cfg.codebook_seed)?;
    let patch_image = |p: &Path| -> Result<PatchImage<f32>> { PatchImage::new(&load_image(p, mcfg)?, mcfg, &codebook) };
    let data = PretrainData {
        texts: texts.iter().map(|t| vocab.tokenize(t)).collect(),
        images: images.iter().map(|p| patch_image(p)).collect::<Result<_>>()?,
        pairs: pairs
            .iter()
            .map(|(p, c)| Ok((patch_image(p)?, vocab.tokenize(c))))
            .collect::<Result<_>>()?,
    };

    let config_text = prepare_output(&config, &vocab)?;
    let mut model = Model32::new(mcfg, mix_seed(config.seed, "init"))?;
    let mut state = OptimizerState::new(run.update.adamw);
    let mut metrics = JsonLines::create(&config.output_dir.join(METRICS_FILE))?;
    let log = pretrain_loop(&mut model, &mut state, &data, &run, |m, _, _| metrics.write(m))?;
    metrics.finish()?;
    let ckpt = config.output_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &model, Some(&state), Some(&config_text))?;
    let last = log.last().map(|m| m.total_loss()).unwrap_or(f64::NAN);
    println!("pretrained {} steps, final loss {last:.4}, checkpoint {}", log.len(), ckpt.display());
    Ok(())
}

/// Task examples read from a tab-separated data file.
pub enum TaskData {
    Fusion(Vec<(Tensor32, Vec<usize>, usize)>),
    TwoPair(Vec<TwoPairInput<f32>>),
    Pairs(Vec<(Tensor32, Vec<usize>)>),
    Classify(Vec<(Tensor32, usize)>),
}

impl TaskData {
    pub fn len(&self) -> usize {
        match self {
            TaskData::Fusion(v) => v.len(),
            TaskData::TwoPair(v) => v.len(),
            TaskData::Pairs(v) => v.len(),
            TaskData::Classify(v) => v.len(),
        }
    }
}

fn label_index(labels: &[String], name: &str, path: &Path, line: usize) -> Result<usize> {
    labels.iter().position(|l| l == name).ok_or_else(|| {
        Error::Config(format!(
            "{}:{line}: label {name:?} is not one of [{}]",
            path.display(),
            labels.join(", ")
        ))
    })
}

pub fn load_task_data(task: Task, path: &Path, labels: &[String], vocab: &Vocab, mcfg: &MultiwayConfig) -> Result<TaskData> {
    let needs_labels = matches!(task, Task::FusionCls | Task::TwoPairCls | Task::Classify);
    if needs_labels && labels.is_empty() {
        return Err(Error::Config(format!("task {task} needs a non-empty labels list")));
    }
    let fields = match task {
        Task::FusionCls => 3,
        Task::TwoPairCls => 4,
        Task::Retrieval | Task::Caption | Task::Classify => 2,
    };
    let rows = read_tsv(path, fields)?;
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no examples", path.display())));
    }
    let patches = |name: &str| load_patches(&sibling(path, name), mcfg);
    let mut out = match task {
        Task::FusionCls => TaskData::Fusion(Vec::new()),
        Task::TwoPairCls => TaskData::TwoPair(Vec::new()),
        Task::Retrieval | Task::Caption => TaskData::Pairs(Vec::new()),
        Task::Classify => TaskData::Classify(Vec::new()),
    };
    for (i, r) in rows.iter().enumerate() {
        let line = i + 1;
        match &mut out {
            TaskData::Fusion(v) => v.push((patches(&r[0])?, vocab.tokenize(&r[1]), label_index(labels, &r[2], path, line)?)),
            TaskData::TwoPair(v) => v.push(TwoPairInput {
                image_a: patches(&r[0])?,
                image_b: patches(&r[1])?,
                text: vocab.tokenize(&r[2]),
                label: label_index(labels, &r[3], path, line)?,
            }),
            TaskData::Pairs(v) => v.push((patches(&r[0])?, vocab.tokenize(&r[1]))),
            TaskData::Classify(v) => v.push((patches(&r[0])?, label_index(labels, &r[1], path, line)?)),
        }
    }
    Ok(out)
}

fn head_for(model: &mut Model32, task: Task, labels: usize, seed: u64) -> Result<FusionHead> {
    let pairs = if task == Task::TwoPairCls { 2 } else { 1 };
    match FusionHead::from_model(model, task.name()) {
        Ok(h) if h.pairs == pairs && h.num_labels == labels => Ok(h),
        _ => FusionHead::attach(model, task.name(), pairs, labels, mix_seed(seed, task.name())),
    }
}

fn label_texts(vocab: &Vocab, labels: &[String]) -> Vec<Vec<usize>> {
    labels.iter().map(|l| vocab.tokenize(l)).collect()
}

/// Loads a checkpoint and checks it against the model dimensions of `config`.
fn load_backbone(path: &Path, config: &MultiwayConfig) -> Result<Checkpoint<f32>> {
    let ckpt: Checkpoint<f32> = load_checkpoint(path)?;
    check_compatible(config, &ckpt.model.params)?;
    Ok(ckpt)
}

pub fn finetune(config_path: &Path, task: Option<Task>) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    let section = config
        .finetune
        .as_mut()
        .ok_or_else(|| Error::Config(format!("{}: missing [finetune] section", config_path.display())))?;
    if let Some(t) = task {
        section.task = t;
    }
    let section: FinetuneSection = section.resolved();
    config.finetune = Some(section.clone());
    let task = section.task;

    let ckpt = load_backbone(&section.checkpoint, &config.model)?;
    let vocab = vocab_for(&section.checkpoint)?;
    let data = load_task_data(task, &section.data, &section.labels, &vocab, &config.model)?;
    let mut model = MultiwayModel {
        config: config.model.clone(),
        params: ckpt.model.params,
    };
    let fc = section.finetune_config(config.seed);
    let config_text = prepare_output(&config, &vocab)?;

    let outcome: FinetuneOutcome<f32> = match &data {
        TaskData::Fusion(v) => {
            let head = head_for(&mut model, task, section.labels.len(), config.seed)?;
            finetune_fusion(&mut model, &head, v, &fc)?
        }
        TaskData::TwoPair(v) => {
            let head = head_for(&mut model, task, section.labels.len(), config.seed)?;
            finetune_two_pair(&mut model, &head, v, &fc)?
        }
        TaskData::Pairs(v) if task == Task::Caption => finetune_caption(&mut model, v, &fc)?,
        TaskData::Pairs(v) => intermediate_finetune_contrastive(&mut model, v, &fc)?,
        TaskData::Classify(v) => finetune_classify(&mut model, v, &label_texts(&vocab, &section.labels), &fc)?,
    };
    let mut metrics = JsonLines::create(&config.output_dir.join(METRICS_FILE))?;
    for m in &outcome.metrics {
        metrics.write(m)?;
    }
    metrics.finish()?;
    let ckpt_path = config.output_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt_path, &model, Some(&outcome.state), Some(&config_text))?;
    let last = outcome.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!(
        "finetuned {task} on {} examples: {} steps, final loss {last:.4}, checkpoint {}",
        data.len(),
        outcome.metrics.len(),
        ckpt_path.display()
    );
    Ok(())
}

/// Finetune settings stored in a checkpoint's run config, if any.
fn stored_section(ckpt: &Checkpoint<f32>) -> Option<FinetuneSection> {
    ckpt.run_config
        .as_deref()
        .and_then(|t| RunConfig::from_toml(t).ok())
        .and_then(|c| c.finetune)
        .map(|f| f.resolved())
}

pub struct EvalOptions {
    pub labels: Vec<String>,
    pub beam_size: Option<usize>,
    pub max_len: Option<usize>,
}

fn labels_or_stored(given: &[String], stored: Option<&FinetuneSection>) -> Vec<String> {
    if given.is_empty() {
        stored.map(|s| s.labels.clone()).unwrap_or_default()
    } else {
        given.to_vec()
    }
}

fn accuracy(correct: usize, total: usize) -> f64 {
    correct as f64 / total as f64
}

/// Evaluates a checkpoint on a task data file and returns the metrics record.
pub fn evaluate(checkpoint: &Path, task: Task, data_path: &Path, opts: &EvalOptions) -> Result<serde_json::Value> {
    let ckpt: Checkpoint<f32> = load_checkpoint(checkpoint)?;
    let stored = stored_section(&ckpt);
    let labels = labels_or_stored(&opts.labels, stored.as_ref());
    let vocab = vocab_for(checkpoint)?;
    let model = ckpt.model;
    let data = load_task_data(task, data_path, &labels, &vocab, &model.config)?;
    let n = data.len();
    let record = match &data {
        TaskData::Fusion(v) => {
            let head = FusionHead::from_model(&model, task.name())?;
            let mut correct = 0;
            for (p, t, label) in v {
                correct += usize::from(argmax(&fusion_classify(&model, p, t, &head)?) == *label);
            }
            json!({"task": task.name(), "examples": n, "accuracy": accuracy(correct, n)})
        }
        TaskData::TwoPair(v) => {
            let head = FusionHead::from_model(&model, task.name())?;
            let mut correct = 0;
            for ex in v {
                let dist = two_pair_classify(&model, &ex.image_a, &ex.image_b, &ex.text, &head)?;
                correct += usize::from(argmax(&dist) == ex.label);
            }
            json!({"task": task.name(), "examples": n, "accuracy": accuracy(correct, n)})
        }
        TaskData::Classify(v) => {
            let texts = label_texts(&vocab, &labels);
            let mut correct = 0;
            for (p, label) in v {
                correct += usize::from(classify_by_retrieval(&model, p, &texts)? == *label);
            }
            json!({"task": task.name(), "examples": n, "accuracy": accuracy(correct, n)})
        }
        TaskData::Pairs(v) if task == Task::Caption => {
            let beam = opts.beam_size.or(stored.as_ref().map(|s| s.beam_size)).unwrap_or(3);
            let max_len = opts.max_len.or(stored.as_ref().map(|s| s.max_len)).unwrap_or(16);
            let mut exact = 0;
            for (p, caption) in v {
                let out = caption_generate(&model, p, beam, max_len)?;
                exact += usize::from(out.terminated && out.tokens[..] == caption[1..]);
            }
            json!({"task": task.name(), "examples": n, "exact_match": accuracy(exact, n)})
        }
        TaskData::Pairs(v) => {
            let images = v.iter().map(|(p, _)| embed_image(&model, p)).collect::<Result<Vec<_>>>()?;
            let texts = v.iter().map(|(_, t)| embed_text(&model, t)).collect::<Result<Vec<_>>>()?;
            let r = recall_at_k(&images, &texts, &[1, 5, 10])?;
            let named = |xs: &[f64]| json!({"R@1": xs[0], "R@5": xs[1], "R@10": xs[2]});
            json!({
                "task": task.name(),
                "examples": n,
                "image_to_text": named(&r.image_to_text),
                "text_to_image": named(&r.text_to_image),
            })
        }
    };
    Ok(record)
}

/// Retrieval rows in the layout of the usual results table, percentages.
pub fn recall_table(record: &serde_json::Value) -> Option<String> {
    let row = |key: &str| -> Option<String> {
        let r = record.get(key)?;
        let pct = |k: &str| r.get(k).and_then(|v| v.as_f64()).map(|v| format!("{:.1}", 100.0 * v));
        Some(format!("{}\t{}\t{}", pct("R@1")?, pct("R@5")?, pct("R@10")?))
    };
    Some(format!(
        "direction\tR@1\tR@5\tR@10\nimage-to-text\t{}\ntext-to-image\t{}",
        row("image_to_text")?,
        row("text_to_image")?
    ))
}

pub fn eval(checkpoint: &Path, task: Task, data: &Path, out: Option<&Path>, opts: &EvalOptions) -> Result<()> {
    let record = evaluate(checkpoint, task, data, opts)?;
    if let Some(table) = recall_table(&record) {
        println!("{table}");
    }
    println!("{record}");
    if let Some(path) = out {
        let mut lines = JsonLines::append(path)?;
        lines.write(&record)?;
        lines.finish()?;
    }
    Ok(())
}

/// Parameter breakdown of a checkpoint or of the model section of a config.
pub fn inspect(path: &Path) -> Result<String> {
    require(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, stored) = if bytes.starts_with(MAGIC) {
        let ckpt: Checkpoint<f32> = multiway::checkpoint::from_bytes(&bytes)?;
        let n = ckpt.model.num_params() as u64;
        (ckpt.model.config, Some(n))
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{}: not UTF-8 text", path.display())))?;
        let config = RunConfig::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("invalid config: "))))?;
        (config.model, None)
    };
    let b = count_params(&config);
    let mut out = format!(
        "layers {} hidden {} ffn {} heads {} vl-expert layers {}\n{b}",
        config.num_layers, config.hidden, config.ffn_inner, config.num_heads, config.vl_expert_layers
    );
    if let Some(n) = stored {
        out.push_str(&format!("Stored tensors {}\n", multiway::model::with_commas(n)));
    }
    Ok(out)
}

/// Escapes control characters so each record stays on one line.
fn one_line(s: &str) -> String {
    s.chars()
        .flat_map(|c| if c.is_control() { c.escape_default().collect() } else { vec![c] })
        .collect()
}

pub fn caption(checkpoint: &Path, images: &[std::path::PathBuf], beam_size: Option<usize>, max_len: Option<usize>) -> Result<()> {
    let ckpt: Checkpoint<f32> = load_checkpoint(checkpoint)?;
    let stored = stored_section(&ckpt);
    let beam = beam_size.or(stored.as_ref().map(|s| s.beam_size)).unwrap_or(3);
    let max_len = max_len.or(stored.as_ref().map(|s| s.max_len)).unwrap_or(16);
    let vocab = vocab_for(checkpoint)?;
    for path in images {
        let patches = load_patches(path, &ckpt.model.config)?;
        let out = caption_generate(&ckpt.model, &patches, beam, max_len)?;
        if !out.terminated {
            eprintln!("warning: {} reached max_len without a terminator", path.display());
        }
        println!("{}\t{}", image_id(path), one_line(&vocab.detokenize(&out.tokens)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Direction {
    TextToImage,
    ImageToText,
}

/// Prints `query_id, rank, target_id, score` rows. Images are identified by
/// file name, texts by 0-based line number.
pub fn retrieve_cmd(checkpoint: &Path, images_list: &Path, texts_file: &Path, k: usize, direction: Direction) -> Result<()> {
    let ckpt: Checkpoint<f32> = load_checkpoint(checkpoint)?;
    let model = &ckpt.model;
    let vocab = vocab_for(checkpoint)?;
    let image_paths: Vec<_> = read_lines(images_list)?.iter().map(|n| sibling(images_list, n)).collect();
    let texts = read_lines(texts_file)?;
    let image_ids: Vec<String> = image_paths.iter().map(|p| image_id(p)).collect();
    let text_ids: Vec<String> = (0..texts.len()).map(|i| i.to_string()).collect();
    let image_emb = image_paths
        .iter()
        .map(|p| embed_image(model, &load_patches(p, &model.config)?))
        .collect::<Result<Vec<_>>>()?;
    let text_emb = texts
        .iter()
        .map(|t| embed_text(model, &vocab.tokenize(t)))
        .collect::<Result<Vec<_>>>()?;
    let (queries, query_ids, targets, target_ids, tag) = match direction {
        Direction::TextToImage => (&text_emb, &text_ids, &image_emb, &image_ids, ModalityTag::Vision),
        Direction::ImageToText => (&image_emb, &image_ids, &text_emb, &text_ids, ModalityTag::Language),
    };
    let mut index = RetrievalIndex::new();
    for (i, e) in targets.iter().enumerate() {
        index.insert(i as u64, tag, e.clone())?;
    }
    let k = k.min(index.len());
    for (q, qid) in queries.iter().zip(query_ids) {
        let hits: Vec<Hit> = retrieve(&index, q, k)?;
        for (rank, h) in hits.iter().enumerate() {
            println!("{qid}\t{}\t{}\t{:.6}", rank + 1, target_ids[h.id as usize], h.score);
        }
    }
    Ok(())
}

pub fn classify_cmd(checkpoint: &Path, images: &[std::path::PathBuf], labels: &[String]) -> Result<()> {
    let ckpt: Checkpoint<f32> = load_checkpoint(checkpoint)?;
    let labels = labels_or_stored(labels, stored_section(&ckpt).as_ref());
    if labels.is_empty() {
        return Err(Error::Config("no labels given and none stored in the checkpoint".into()));
    }
    let vocab = vocab_for(checkpoint)?;
    let texts = label_texts(&vocab, &labels);
    for path in images {
        let patches = load_patches(path, &ckpt.model.config)?;
        let k = classify_by_retrieval(&ckpt.model, &patches, &texts)?;
        println!("{}\t{}", image_id(path), labels[k]);
    }
    Ok(())
}
