//! Writes the synthetic desk corpus, task files and matching configs.

use std::path::{Path, PathBuf};

use multiway::config::{DataConfig, FinetuneSection, PretrainSection, RunConfig, Task};
use multiway::mdm::{MaskingConfig, Quotas, RasterImage};
use multiway::model::MultiwayConfig;
use multiway::repurpose::CaptionMasking;
use multiway::synth::{
    class_names, classification_set, copy_set, pretrain_corpus, retrieval_pairs, two_pair_set, vqa_answers, vqa_set,
    VQA_QUESTION,
};
use multiway::training::{AdamW, Schedule, UpdateConfig};
use multiway::Result;

use crate::io::{create_dir, write_file};

pub struct SynthOptions {
    pub seed: u64,
    pub texts: usize,
    pub images: usize,
    pub pairs: usize,
    pub examples: usize,
    pub steps: u64,
    pub epochs: usize,
}

struct Writer {
    root: PathBuf,
}

impl Writer {
    fn image(&self, name: &str, img: &RasterImage) -> Result<String> {
        let rel = format!("images/{name}.rst");
        img.save(&self.root.join(&rel))?;
        Ok(rel)
    }

    fn lines(&self, name: &str, lines: &[String]) -> Result<()> {
        let mut text = lines.join("\n");
        text.push('\n');
        write_file(&self.root.join(name), text)
    }
}

fn task_file(task: Task) -> &'static str {
    match task {
        Task::FusionCls => "vqa.tsv",
        Task::TwoPairCls => "two_pair.tsv",
        Task::Retrieval => "retrieval.tsv",
        Task::Caption => "caption.tsv",
        Task::Classify => "classify.tsv",
    }
}

fn finetune_section(task: Task, epochs: usize) -> FinetuneSection {
    let labels = match task {
        Task::FusionCls => vqa_answers(),
        Task::TwoPairCls => vec!["false".into(), "true".into()],
        Task::Classify => class_names(),
        Task::Retrieval | Task::Caption => Vec::new(),
    };
    let peak_lr = match task {
        Task::Caption => 1e-3,
        _ => 3e-4,
    };
    FinetuneSection {
        task,
        checkpoint: PathBuf::from("runs/pretrain/checkpoint.mwt"),
        data: PathBuf::from(task_file(task)),
        labels,
        epochs,
        batch_size: 16,
        peak_lr,
        warmup_epochs: 1.0,
        floor_lr: 0.0,
        adamw: AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        },
        clip_norm: 3.0,
        layer_decay: None,
        drop_path: None,
        label_smoothing: None,
        mask_prob: 0.6,
        caption_masking: CaptionMasking::Iid,
        beam_size: 3,
        max_len: 8,
    }
}

pub fn pretrain_config(seed: u64, steps: u64) -> RunConfig {
    RunConfig {
        seed,
        output_dir: PathBuf::from("runs/pretrain"),
        model: MultiwayConfig::toy(),
        data: DataConfig {
            texts: Some("texts.txt".into()),
            images: Some("images.txt".into()),
            pairs: Some("pairs.tsv".into()),
            codebook_seed: 0,
        },
        masking: MaskingConfig::default(),
        pretrain: Some(PretrainSection {
            steps,
            quotas: Quotas::new(8, 8, 8),
            update: UpdateConfig {
                schedule: Schedule {
                    peak_lr: 1e-3,
                    warmup_steps: (steps / 10).min(steps.saturating_sub(1)),
                    total_steps: steps,
                    floor_lr: 0.0,
                },
                adamw: AdamW::default(),
                clip_norm: 3.0,
                layer_decay: 1.0,
            },
            record_wall_time: false,
        }),
        finetune: None,
    }
}

pub fn synth(out: &Path, opts: &SynthOptions) -> Result<Vec<PathBuf>> {
    create_dir(&out.join("images"))?;
    let w = Writer { root: out.to_path_buf() };
    let size = MultiwayConfig::toy().image_size;
    let seed = opts.seed;

    let corpus = pretrain_corpus(opts.texts, opts.images, opts.pairs, size, seed);
    let mut texts = corpus.texts.clone();
    texts.push(VQA_QUESTION.to_string());
    texts.extend(["same", "different"].map(String::from));
    texts.extend(class_names());
    w.lines("texts.txt", &texts)?;
    let images = corpus
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| w.image(&format!("img{i:05}"), img))
        .collect::<Result<Vec<_>>>()?;
    w.lines("images.txt", &images)?;
    let pairs = corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, (img, c))| Ok(format!("{}\t{c}", w.image(&format!("pair{i:05}"), img)?)))
        .collect::<Result<Vec<_>>>()?;
    w.lines("pairs.tsv", &pairs)?;

    let n = opts.examples;
    let answers = vqa_answers();
    let vqa = vqa_set(n, size, seed)
        .iter()
        .enumerate()
        .map(|(i, (img, a))| Ok(format!("{}\t{VQA_QUESTION}\t{}", w.image(&format!("vqa{i:05}"), img)?, answers[*a])))
        .collect::<Result<Vec<_>>>()?;
    w.lines(task_file(Task::FusionCls), &vqa)?;
    let two = two_pair_set(n, size, seed)
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            Ok(format!(
                "{}\t{}\t{}\t{}",
                w.image(&format!("two{i:05}a"), &ex.image_a)?,
                w.image(&format!("two{i:05}b"), &ex.image_b)?,
                ex.text,
                if ex.label == 1 { "true" } else { "false" }
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    w.lines(task_file(Task::TwoPairCls), &two)?;
    let copies = n.div_ceil(64).max(1);
    let retrieval = retrieval_pairs(copies, size, seed)
        .iter()
        .take(n.max(1))
        .enumerate()
        .map(|(i, (img, c))| Ok(format!("{}\t{c}", w.image(&format!("ret{i:05}"), img)?)))
        .collect::<Result<Vec<_>>>()?;
    w.lines(task_file(Task::Retrieval), &retrieval)?;
    let captions = copy_set(n, size, seed)
        .iter()
        .enumerate()
        .map(|(i, (img, c))| Ok(format!("{}\t{c}", w.image(&format!("cap{i:05}"), img)?)))
        .collect::<Result<Vec<_>>>()?;
    w.lines(task_file(Task::Caption), &captions)?;
    let names = class_names();
    let classify = classification_set(n, size, seed)
        .iter()
        .enumerate()
        .map(|(i, (img, k))| Ok(format!("{}\t{}", w.image(&format!("cls{i:05}"), img)?, names[*k])))
        .collect::<Result<Vec<_>>>()?;
    w.lines(task_file(Task::Classify), &classify)?;

    let mut written = Vec::new();
    let pre = out.join("pretrain.toml");
    write_file(&pre, pretrain_config(seed, opts.steps).to_toml()?)?;
    written.push(pre);
    for task in Task::ALL {
        let mut c = pretrain_config(seed, opts.steps);
        c.pretrain = None;
        c.output_dir = PathBuf::from(format!("runs/{task}"));
        c.finetune = Some(finetune_section(task, opts.epochs));
        let path = out.join(format!("finetune-{task}.toml"));
        write_file(&path, c.to_toml()?)?;
        written.push(path);
    }
    Ok(written)
}
