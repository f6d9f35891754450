//! Retrieval-enhanced inference.
//!
//! Target embeddings of the training stimuli are prestored per subject and
//! per modality. At inference the predicted embedding acts as the retrieval
//! cue: cosine similarity (on one designated token row, or on the flattened
//! embedding) ranks the subject's own memories, the top K are averaged, and
//! the result is blended with the prediction by a convex mix-up weight.

use crate::encoder::EmbeddingPair;
use crate::error::{Error, Result};
use crate::records::{
    expect_magic, read_u32, read_u64, read_u8, write_magic, write_u32, write_u64, write_u8,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Text),
            other => Err(Error::Format(format!("unknown modality tag {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// How query and memory embeddings are reduced to similarity vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMode {
    /// Cosine of one token row (by index) of each embedding.
    Token(usize),
    /// Cosine of the flattened embeddings.
    Flatten,
}

#[derive(Debug, Clone)]
pub struct EcphoryConfig {
    /// Convex blend weight on the prediction; `1 - mix_weight` goes to the
    /// retrieved memory.
    pub mix_weight: f64,
    pub top_k: usize,
    pub similarity: SimilarityMode,
}

impl Default for EcphoryConfig {
    fn default() -> Self {
        EcphoryConfig { mix_weight: 0.5, top_k: 1, similarity: SimilarityMode::Token(0) }
    }
}

impl EcphoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(Error::Config(format!(
                "mix_weight {} must be in [0, 1]",
                self.mix_weight
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Immutable per-subject stores of training-set target embeddings.
#[derive(Debug, Clone, Default)]
pub struct MemoryBank<S: Scalar> {
    /// subject -> ordered (stimulus, embedding) entries, one map per modality.
    image: BTreeMap<u32, Vec<(u64, Tensor<S>)>>,
    text: BTreeMap<u32, Vec<(u64, Tensor<S>)>>,
}

impl<S: Scalar> MemoryBank<S> {
    pub fn new() -> Self {
        MemoryBank { image: BTreeMap::new(), text: BTreeMap::new() }
    }

    fn modality_map(&self, modality: Modality) -> &BTreeMap<u32, Vec<(u64, Tensor<S>)>> {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    fn modality_map_mut(
        &mut self,
        modality: Modality,
    ) -> &mut BTreeMap<u32, Vec<(u64, Tensor<S>)>> {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    pub fn insert(
        &mut self,
        subject: u32,
        modality: Modality,
        stimulus: u64,
        embedding: Tensor<S>,
    ) -> Result<()> {
        let entries = self.modality_map_mut(modality).entry(subject).or_default();
        if entries.iter().any(|(id, _)| *id == stimulus) {
            return Err(Error::Data(format!(
                "duplicate memory for subject {subject}, stimulus {stimulus}, {} modality",
                modality.as_str()
            )));
        }
        entries.push((stimulus, embedding));
        Ok(())
    }

    pub fn entries(&self, subject: u32, modality: Modality) -> Result<&[(u64, Tensor<S>)]> {
        self.modality_map(modality)
            .get(&subject)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::UnknownSubject {
                subject,
                known: self.subjects(),
            })
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.image.keys().chain(self.text.keys()).copied().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn len(&self, subject: u32, modality: Modality) -> usize {
        self.modality_map(modality).get(&subject).map_or(0, |v| v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty() && self.text.is_empty()
    }
}

/// Prestore the target embeddings of the given training samples, keyed by
/// subject and stimulus.
pub fn build_bank<'a, S, I>(samples: I) -> Result<MemoryBank<S>>
where
    S: Scalar,
    I: IntoIterator<Item = (u32, u64, &'a EmbeddingPair<S>)>,
{
    let mut bank = MemoryBank::new();
    for (subject, stimulus, targets) in samples {
        bank.insert(subject, Modality::Image, stimulus, targets.image.clone())?;
        bank.insert(subject, Modality::Text, stimulus, targets.text.clone())?;
    }
    if bank.is_empty() {
        return Err(Error::Data("build_bank: empty training set".into()));
    }
    Ok(bank)
}

fn similarity_vector<S: Scalar>(emb: &Tensor<S>, mode: SimilarityMode) -> Result<Vec<f64>> {
    match mode {
        SimilarityMode::Token(row) => {
            let (rows, cols) = emb.dims2()?;
            if row >= rows {
                return Err(Error::InvalidArgument(format!(
                    "similarity token {row} out of range for {rows} tokens"
                )));
            }
            Ok(emb.data()[row * cols..(row + 1) * cols].iter().map(|v| v.as_f64()).collect())
        }
        SimilarityMode::Flatten => Ok(emb.data().iter().map(|v| v.as_f64()).collect()),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine: zero-norm similarity vector".into(),
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Exact top-K by cosine similarity, descending; equal scores rank the lower
/// stimulus id first. Maintains a bounded worst-tracked selection rather
/// than sorting the whole bank.
pub fn cosine_topk<S: Scalar>(
    query: &Tensor<S>,
    entries: &[(u64, Tensor<S>)],
    k: usize,
    mode: SimilarityMode,
) -> Result<Vec<(u64, f64)>> {
    if entries.is_empty() {
        return Err(Error::Data("cosine_topk: empty bank".into()));
    }
    if k == 0 || k > entries.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine_topk: K={k} out of range for bank of {}",
            entries.len()
        )));
    }
    let q = similarity_vector(query, mode)?;
    // (score desc, id asc) ordering predicate
    let better = |a: &(u64, f64), b: &(u64, f64)| -> bool {
        a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
    };
    let mut top: Vec<(u64, f64)> = Vec::with_capacity(k + 1);
    for (id, emb) in entries {
        let m = similarity_vector(emb, mode)?;
        if m.len() != q.len() {
            return Err(Error::ShapeMismatch {
                op: "cosine_topk",
                lhs: query.shape().to_vec(),
                rhs: emb.shape().to_vec(),
            });
        }
        let candidate = (*id, cosine(&q, &m)?);
        let pos = top.partition_point(|held| better(held, &candidate));
        if pos < k {
            top.insert(pos, candidate);
            top.truncate(k);
        }
    }
    Ok(top)
}

/// Convex blend `mix_weight * pred + (1 - mix_weight) * retrieved`. The
/// endpoints return the corresponding input unchanged, bit for bit.
pub fn enhance<S: Scalar>(pred: &Tensor<S>, retrieved: &Tensor<S>, mix_weight: f64) -> Result<Tensor<S>> {
    if pred.shape() != retrieved.shape() {
        return Err(Error::ShapeMismatch {
            op: "enhance",
            lhs: pred.shape().to_vec(),
            rhs: retrieved.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&mix_weight) {
        return Err(Error::InvalidArgument(format!(
            "enhance: mix weight {mix_weight} outside [0, 1]"
        )));
    }
    if mix_weight == 1.0 {
        return Ok(pred.clone());
    }
    if mix_weight == 0.0 {
        return Ok(retrieved.clone());
    }
    let a = S::from_f64(mix_weight);
    let b = S::from_f64(1.0 - mix_weight);
    let data = pred
        .data()
        .iter()
        .zip(retrieved.data())
        .map(|(&p, &r)| a * p + b * r)
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}

/// Retrieval provenance of one enhanced embedding.
#[derive(Debug, Clone)]
pub struct RetrievalRecord {
    pub modality: Modality,
    /// `(stimulus, score)` pairs in rank order.
    pub hits: Vec<(u64, f64)>,
}

/// Output of retrieval-enhanced inference for one sample.
#[derive(Debug, Clone)]
pub struct EnhancedPrediction<S: Scalar> {
    pub image: Tensor<S>,
    pub text: Tensor<S>,
    pub provenance: Vec<RetrievalRecord>,
}

/// Mean of the embeddings retrieved for one query. With K = 1 this is the
/// single best memory; larger K averages before blending.
fn retrieved_mean<S: Scalar>(
    entries: &[(u64, Tensor<S>)],
    hits: &[(u64, f64)],
) -> Result<Tensor<S>> {
    let first = entries
        .iter()
        .find(|(id, _)| *id == hits[0].0)
        .map(|(_, e)| e)
        .expect("hit id present in bank");
    let mut acc = vec![S::zero(); first.numel()];
    for (id, _) in hits {
        let emb = entries
            .iter()
            .find(|(eid, _)| eid == id)
            .map(|(_, e)| e)
            .expect("hit id present in bank");
        for (a, &v) in acc.iter_mut().zip(emb.data()) {
            *a = *a + v;
        }
    }
    let inv = S::from_f64(1.0 / hits.len() as f64);
    for a in &mut acc {
        *a = *a * inv;
    }
    Tensor::new(first.shape().to_vec(), acc)
}

/// Enhance a pair of predicted embeddings against one subject's memories.
pub fn enhance_prediction<S: Scalar>(
    subject: u32,
    image_pred: &Tensor<S>,
    text_pred: &Tensor<S>,
    bank: &MemoryBank<S>,
    cfg: &EcphoryConfig,
) -> Result<EnhancedPrediction<S>> {
    cfg.validate()?;
    let mut provenance = Vec::with_capacity(2);
    let mut enhanced = Vec::with_capacity(2);
    for (modality, pred) in [(Modality::Image, image_pred), (Modality::Text, text_pred)] {
        let entries = bank.entries(subject, modality)?;
        let k = cfg.top_k.min(entries.len());
        let hits = cosine_topk(pred, entries, k, cfg.similarity)?;
        let retrieved = retrieved_mean(entries, &hits)?;
        enhanced.push(enhance(pred, &retrieved, cfg.mix_weight)?);
        provenance.push(RetrievalRecord { modality, hits });
    }
    let text = enhanced.pop().unwrap();
    let image = enhanced.pop().unwrap();
    Ok(EnhancedPrediction { image, text, provenance })
}

// ── persistence ─────────────────────────────────────────────────────────

const BANK_MAGIC: &[u8; 4] = b"ECPH";
const BANK_VERSION: u32 = 1;

fn write_modality_section<S: Scalar, W: Write>(
    w: &mut W,
    modality: Modality,
    entries: &[(u64, Tensor<S>)],
) -> Result<()> {
    write_u8(w, modality.tag())?;
    write_u32(w, entries.len() as u32)?;
    let (tokens, dim) = entries
        .first()
        .map(|(_, e)| e.dims2())
        .transpose()?
        .unwrap_or((0, 0));
    write_u32(w, tokens as u32)?;
    write_u32(w, dim as u32)?;
    for (stimulus, emb) in entries {
        if emb.dims2()? != (tokens, dim) {
            return Err(Error::Format(format!(
                "bank entries disagree on shape: {:?} vs [{tokens}, {dim}]",
                emb.shape()
            )));
        }
        write_u64(w, *stimulus)?;
        crate::records::write_values(w, emb.data())?;
    }
    Ok(())
}

fn read_modality_section<S: Scalar, R: Read>(
    r: &mut R,
) -> Result<(Modality, Vec<(u64, Tensor<S>)>)> {
    let modality = Modality::from_tag(read_u8(r)?)?;
    let count = read_u32(r)? as usize;
    let tokens = read_u32(r)? as usize;
    let dim = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let stimulus = read_u64(r)?;
        let values = crate::records::read_values(r, tokens * dim)?;
        entries.push((stimulus, Tensor::new(vec![tokens, dim], values)?));
    }
    Ok((modality, entries))
}

/// Bank file layout: magic `ECPH`, version, subject count; then per subject
/// its id followed by the image and text sections, each
/// `tag u8 | entries u32 | tokens u32 | dim u32 | (stimulus u64 + values)*`.
pub fn save_bank<S: Scalar>(bank: &MemoryBank<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, BANK_MAGIC)?;
    write_u32(&mut w, BANK_VERSION)?;
    let subjects = bank.subjects();
    write_u32(&mut w, subjects.len() as u32)?;
    for subject in subjects {
        write_u32(&mut w, subject)?;
        let empty = Vec::new();
        let image = bank.image.get(&subject).unwrap_or(&empty);
        let text = bank.text.get(&subject).unwrap_or(&empty);
        write_modality_section(&mut w, Modality::Image, image)?;
        write_modality_section(&mut w, Modality::Text, text)?;
    }
    Ok(())
}

pub fn load_bank<S: Scalar>(path: &Path) -> Result<MemoryBank<S>> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, BANK_MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != BANK_VERSION {
        return Err(Error::Format(format!("unsupported bank version {version}")));
    }
    let subject_count = read_u32(&mut r)? as usize;
    let mut bank = MemoryBank::new();
    for _ in 0..subject_count {
        let subject = read_u32(&mut r)?;
        for _ in 0..2 {
            let (modality, entries) = read_modality_section::<S, _>(&mut r)?;
            for (stimulus, emb) in entries {
                bank.insert(subject, modality, stimulus, emb)?;
            }
        }
    }
    Ok(bank)
}
