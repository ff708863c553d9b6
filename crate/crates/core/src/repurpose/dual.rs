use std::collections::HashSet;

use serde::Serialize;

use super::heads::argmax;
use crate::error::{Error, Result};
use crate::model::{encode, Graph, ImageInput, Layout, ModalityTag, ModelInput, MultiwayModel};
use crate::tensor::{Scalar, Tensor, Var};

const NORM_TOL: f64 = 1e-6;

/// Unit-length `[1, H]` embedding of a single-modality input: pooled output,
/// then the projection of its modality, then l2 normalization.
pub fn dual_embed<T: Scalar>(g: &mut Graph<'_, T>, input: &ModelInput<T>) -> Result<Var> {
    let proj = match (&input.image, &input.text) {
        (Some(_), None) => "proj.image",
        (None, Some(_)) => "proj.text",
        _ => {
            return Err(Error::InvalidArgument(
                "dual encoder takes an image or a text, not both".into(),
            ))
        }
    };
    let pooled = encode(g, input, Layout::Dual)?.pooled;
    let w = g.param(&format!("{proj}.w"))?;
    let b = g.param(&format!("{proj}.b"))?;
    let z = g.tape.linear(pooled, w, b)?;
    g.tape.l2_normalize(z)
}

/// Eval-mode [`dual_embed`], returned in f64.
pub fn dual_encode<T: Scalar>(model: &MultiwayModel<T>, input: &ModelInput<T>) -> Result<Vec<f64>> {
    let mut g = Graph::eval(model);
    let z = dual_embed(&mut g, input)?;
    Ok(g.value(z).data().iter().map(|x| x.as_f64()).collect())
}

pub fn embed_image<T: Scalar>(model: &MultiwayModel<T>, patches: &Tensor<T>) -> Result<Vec<f64>> {
    dual_encode(model, &ModelInput::image(ImageInput::unmasked(patches.clone())))
}

pub fn embed_text<T: Scalar>(model: &MultiwayModel<T>, ids: &[usize]) -> Result<Vec<f64>> {
    dual_encode(model, &ModelInput::text(ids.to_vec()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: u64,
    pub tag: ModalityTag,
    pub embedding: Vec<f64>,
}

/// Unit-length embeddings searched by cosine similarity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    ids: HashSet<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hit {
    pub id: u64,
    pub score: f64,
}

impl RetrievalIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: u64, tag: ModalityTag, embedding: Vec<f64>) -> Result<()> {
        let norm = dot(&embedding, &embedding).sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidArgument(format!("embedding {id} has norm {norm}, expected 1")));
        }
        if let Some(first) = self.entries.first() {
            if first.embedding.len() != embedding.len() {
                return Err(Error::Shape {
                    op: "retrieval-index",
                    lhs: vec![first.embedding.len()],
                    rhs: vec![embedding.len()],
                });
            }
        }
        if !self.ids.insert(id) {
            return Err(Error::InvalidArgument(format!("duplicate index id {id}")));
        }
        self.entries.push(IndexEntry { id, tag, embedding });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }
}

/// The `k` entries most similar to `query`, by descending cosine similarity
/// with ties broken by ascending id.
pub fn retrieve(index: &RetrievalIndex, query: &[f64], k: usize) -> Result<Vec<Hit>> {
    if index.is_empty() {
        return Err(Error::InvalidArgument("retrieval index is empty".into()));
    }
    if k > index.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds index size {}", index.len())));
    }
    let mut hits: Vec<Hit> = index
        .entries
        .iter()
        .map(|e| Hit {
            id: e.id,
            score: dot(&e.embedding, query),
        })
        .collect();
    let order = |a: &Hit, b: &Hit| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id));
    if k < hits.len() {
        hits.select_nth_unstable_by(k, order);
        hits.truncate(k);
    }
    hits.sort_by(order);
    Ok(hits)
}

/// Recall at each k for both directions, with image `i` matching text `i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub image_to_text: Vec<f64>,
    pub text_to_image: Vec<f64>,
}

fn recall_one_way(queries: &[Vec<f64>], targets: &[Vec<f64>], tag: ModalityTag, ks: &[usize]) -> Result<Vec<f64>> {
    let mut index = RetrievalIndex::new();
    for (i, t) in targets.iter().enumerate() {
        index.insert(i as u64, tag, t.clone())?;
    }
    let kmax = ks.iter().copied().max().unwrap_or(1).min(index.len());
    let mut hits = vec![0usize; ks.len()];
    for (qi, q) in queries.iter().enumerate() {
        let top = retrieve(&index, q, kmax)?;
        if let Some(rank) = top.iter().position(|h| h.id == qi as u64) {
            for (slot, &k) in ks.iter().enumerate() {
                if rank < k {
                    hits[slot] += 1;
                }
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / queries.len() as f64).collect())
}

pub fn recall_at_k(images: &[Vec<f64>], texts: &[Vec<f64>], ks: &[usize]) -> Result<RecallReport> {
    if images.len() != texts.len() || images.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need matched non-empty sets, got {} images and {} texts",
            images.len(),
            texts.len()
        )));
    }
    Ok(RecallReport {
        ks: ks.to_vec(),
        image_to_text: recall_one_way(images, texts, ModalityTag::Language, ks)?,
        text_to_image: recall_one_way(texts, images, ModalityTag::Vision, ks)?,
    })
}

/// Cosine similarity of the image with each label text.
pub fn label_scores<T: Scalar>(model: &MultiwayModel<T>, patches: &Tensor<T>, label_texts: &[Vec<usize>]) -> Result<Vec<f64>> {
    if label_texts.is_empty() {
        return Err(Error::InvalidArgument("no label texts to classify against".into()));
    }
    let image = embed_image(model, patches)?;
    label_texts
        .iter()
        .map(|t| Ok(dot(&image, &embed_text(model, t)?)))
        .collect()
}

/// Label whose text embedding is closest to the image; lowest index on ties.
pub fn classify_by_retrieval<T: Scalar>(
    model: &MultiwayModel<T>,
    patches: &Tensor<T>,
    label_texts: &[Vec<usize>],
) -> Result<usize> {
    Ok(argmax(&label_scores(model, patches, label_texts)?))
}
