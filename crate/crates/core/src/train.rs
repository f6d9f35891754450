//! Model assembly, AdamW optimization, the training loop, and evaluation.
//!
//! A batch step runs in two stages. Each sample's encoder forward lives on
//! its own tape (they run in parallel); the batch loss lives on one small
//! extra tape whose leaves are the per-sample prediction values. Backward
//! first sweeps the loss tape, then re-enters every sample tape with the
//! resulting seed gradients. Per-sample gradients are folded into the
//! accumulator in batch order, so a step is deterministic no matter how the
//! work was scheduled.

use crate::checkpoint::{assign_params, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::contrastive::bidirectional_infonce;
use crate::ecphory::{enhance_prediction, EcphoryConfig, MemoryBank};
use crate::encoder::{FmriSample, VoxelEncoder};
use crate::error::{Error, Result};
use crate::moe::SplitLumpTrace;
use crate::params::{GradAccumulator, ParamStore, TapeBinding};
use crate::rng::{derive_seed, Prng};
use crate::scalar::Scalar;
use crate::synth::SyntheticWorld;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::path::Path;

const INIT_STREAM: u64 = 0x494E4954; // "INIT"
const SHUFFLE_STREAM: u64 = 0x53485546; // "SHUF"
const EVAL_STREAM: u64 = 0x4556414C; // "EVAL"

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub run_cfg: RunConfig,
    pub store: ParamStore<S>,
    pub encoder: VoxelEncoder,
    pub subjects: Vec<u32>,
    pub padded_len: usize,
}

/// Inference output for one sample (values, no tape attached).
pub struct Prediction<S: Scalar> {
    pub image: Tensor<S>,
    pub text: Tensor<S>,
    pub expert_applications: usize,
    pub moe_traces: Vec<(usize, SplitLumpTrace<S>)>,
}

impl<S: Scalar> Model<S> {
    pub fn init(cfg: &RunConfig, world: &SyntheticWorld<S>, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let padded_len = world.padded_len(cfg.patches);
        let encoder_cfg = cfg.encoder_config(padded_len)?;
        let subjects = world.subject_ids();
        let mut rng = Prng::new(derive_seed(init_seed, INIT_STREAM));
        let mut store = ParamStore::new();
        let encoder = VoxelEncoder::init(&mut store, encoder_cfg, &subjects, &mut rng)?;
        Ok(Model { run_cfg: cfg.clone(), store, encoder, subjects, padded_len })
    }

    /// Rebuild a model from a checkpoint; the stored config is authoritative.
    pub fn from_checkpoint(path: &Path, world: &SyntheticWorld<S>) -> Result<Self> {
        let (cfg, records) = load_checkpoint::<S>(path)?;
        let mut model = Model::init(&cfg, world, cfg.seed)?;
        assign_params(&mut model.store, records)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.run_cfg, &self.store)
    }

    pub fn param_count(&self) -> usize {
        self.store.total_values()
    }

    /// Expert MLP applications per sample forward, from the static cost
    /// model: omni runs each expert once per mixture block, dense runs every
    /// expert on every token, sparse runs K experts per token. The plain MLP
    /// variant has no experts.
    pub fn expert_applications_per_sample(&self) -> usize {
        use crate::encoder::MoeVariant;
        let cfg = &self.encoder.cfg;
        let per_block = match cfg.variant {
            MoeVariant::Mlp => 0,
            MoeVariant::Omni { .. } => cfg.expert_count,
            MoeVariant::Dense => cfg.patches * cfg.expert_count,
            MoeVariant::Sparse => cfg.patches * cfg.sparse_top_k,
        };
        per_block * cfg.moe_blocks
    }

    /// Predicted embeddings are scale-normalized (unit norm over the
    /// flattened embedding), matching the scale convention of the stored
    /// targets; cosine metrics are unaffected and the retrieval blend mixes
    /// like with like.
    pub fn predict(&self, sample: &FmriSample<S>) -> Result<Prediction<S>> {
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&self.store);
        let out = self.encoder.forward_sample(
            &mut tape,
            &mut binding,
            &self.store,
            &sample.padded,
            sample.subject,
        )?;
        Ok(Prediction {
            image: unit_scale(tape.value(out.image_pred))?,
            text: unit_scale(tape.value(out.text_pred))?,
            expert_applications: out.expert_applications,
            moe_traces: out.moe_traces,
        })
    }
}

/// Scale a tensor to unit norm over its flattened values.
fn unit_scale<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let norm = S::from_f64(t.frob_norm());
    if norm == S::zero() {
        return Err(Error::Data("predict: zero-norm embedding".into()));
    }
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = *v / norm;
    }
    Ok(out)
}

// ── optimizer ───────────────────────────────────────────────────────────

/// Decoupled-weight-decay Adam. Parameters whose gradient is absent from a
/// step (never touched by any sample) are skipped entirely, so their moments
/// and values stay put.
pub struct AdamW<S: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    beta1_power: Vec<f64>,
    beta2_power: Vec<f64>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: &RunConfig, store: &ParamStore<S>) -> Self {
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect(),
            v: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect(),
            beta1_power: vec![1.0; store.len()],
            beta2_power: vec![1.0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &GradAccumulator<S>) {
        let lr = S::from_f64(self.lr);
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_minus_b1 = S::from_f64(1.0 - self.beta1);
        let one_minus_b2 = S::from_f64(1.0 - self.beta2);
        let eps = S::from_f64(self.eps);
        let wd = S::from_f64(self.weight_decay);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            self.beta1_power[id.0] *= self.beta1;
            self.beta2_power[id.0] *= self.beta2;
            let corr1 = S::from_f64(1.0 - self.beta1_power[id.0]);
            let corr2 = S::from_f64(1.0 - self.beta2_power[id.0]);
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let theta = store.value_mut(id).data_mut();
            for i in 0..g.numel() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_minus_b1 * gi;
                v[i] = b2 * v[i] + one_minus_b2 * gi * gi;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                theta[i] = theta[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
            }
        }
    }
}

// ── batched loss ────────────────────────────────────────────────────────

struct SampleForward<S: Scalar> {
    tape: Tape<S>,
    binding: TapeBinding,
    image_flat: NodeId,
    text_flat: NodeId,
}

fn forward_one<S: Scalar>(model: &Model<S>, sample: &FmriSample<S>) -> Result<SampleForward<S>> {
    let mut tape = Tape::new();
    let mut binding = TapeBinding::new(&model.store);
    let out = model.encoder.forward_sample(
        &mut tape,
        &mut binding,
        &model.store,
        &sample.padded,
        sample.subject,
    )?;
    let image_numel = tape.value(out.image_pred).numel();
    let text_numel = tape.value(out.text_pred).numel();
    let image_flat = tape.reshape(out.image_pred, vec![1, image_numel])?;
    let text_flat = tape.reshape(out.text_pred, vec![1, text_numel])?;
    Ok(SampleForward { tape, binding, image_flat, text_flat })
}

/// Loss of one batch via the two-stage tape layout; optionally also its
/// parameter gradients.
pub fn batch_loss_and_grads<S: Scalar>(
    model: &Model<S>,
    samples: &[FmriSample<S>],
    want_grads: bool,
) -> Result<(f64, Option<GradAccumulator<S>>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("batch_loss_and_grads: empty batch".into()));
    }
    let mut forwards: Vec<SampleForward<S>> = samples
        .par_iter()
        .map(|sample| forward_one(model, sample))
        .collect::<Result<Vec<_>>>()?;

    // batch loss on its own tape, seeded with the per-sample prediction values
    let mut loss_tape = Tape::new();
    let mut image_preds = Vec::with_capacity(samples.len());
    let mut text_preds = Vec::with_capacity(samples.len());
    let mut image_targets = Vec::with_capacity(samples.len());
    let mut text_targets = Vec::with_capacity(samples.len());
    for (fwd, sample) in forwards.iter().zip(samples) {
        image_preds.push(loss_tape.leaf(fwd.tape.value(fwd.image_flat).clone().with_grad()));
        text_preds.push(loss_tape.leaf(fwd.tape.value(fwd.text_flat).clone().with_grad()));
        image_targets.push(loss_tape.constant(sample.targets.image.clone()));
        text_targets.push(loss_tape.constant(sample.targets.text.clone()));
    }
    let ccfg = model.run_cfg.contrastive_config();
    let image_loss = bidirectional_infonce(&mut loss_tape, &image_preds, &image_targets, &ccfg)?;
    let text_loss = bidirectional_infonce(&mut loss_tape, &text_preds, &text_targets, &ccfg)?;
    let total = loss_tape.add(image_loss, text_loss)?;
    let loss_value = loss_tape.value(total).data()[0].as_f64();

    if !want_grads {
        return Ok((loss_value, None));
    }

    let loss_grads = loss_tape.backward(total)?;
    let zero_image = Tensor::zeros(loss_tape.shape(image_preds[0]).to_vec());
    let zero_text = Tensor::zeros(loss_tape.shape(text_preds[0]).to_vec());
    let seeds: Vec<(Tensor<S>, Tensor<S>)> = (0..samples.len())
        .map(|i| {
            (
                loss_grads.get(image_preds[i]).cloned().unwrap_or_else(|| zero_image.clone()),
                loss_grads.get(text_preds[i]).cloned().unwrap_or_else(|| zero_text.clone()),
            )
        })
        .collect();

    let per_sample: Vec<crate::tape::Gradients<S>> = forwards
        .par_iter()
        .zip(seeds.into_par_iter())
        .map(|(fwd, (gi, gt))| {
            fwd.tape.backward_seeded(&[(fwd.image_flat, gi), (fwd.text_flat, gt)])
        })
        .collect::<Result<Vec<_>>>()?;

    let mut acc = GradAccumulator::new(&model.store);
    for (fwd, grads) in forwards.iter_mut().zip(per_sample.iter()) {
        acc.absorb(&fwd.binding, grads);
    }
    Ok((loss_value, Some(acc)))
}

// ── metrics ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub two_way_pct: f64,
    pub topk_retrieval_pct: f64,
    pub per_subject_two_way: Vec<f64>,
    pub param_count: usize,
    pub expert_application_count: usize,
}

pub fn metrics_csv_header(subjects: usize) -> String {
    let mut header = String::from(
        "run_id,variant,seed,epoch,train_loss,two_way_pct,topk_retrieval_pct",
    );
    for s in 0..subjects {
        header.push_str(&format!(",two_way_s{s}"));
    }
    header.push_str(",param_count,expert_application_count");
    header
}

pub fn metrics_csv(rows: &[MetricsRow], subjects: usize) -> String {
    let mut out = metrics_csv_header(subjects);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            row.run_id,
            row.variant,
            row.seed,
            row.epoch,
            row.train_loss,
            row.two_way_pct,
            row.topk_retrieval_pct
        ));
        for s in 0..subjects {
            let v = row.per_subject_two_way.get(s).copied().unwrap_or(f64::NAN);
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{},{}\n", row.param_count, row.expert_application_count));
    }
    out
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalMetrics {
    /// Percent of two-alternative trials where the prediction sat closer to
    /// its own target than to a random distractor, over both modalities.
    pub two_way_pct: f64,
    /// Percent of test samples whose true stimulus ranked within the top K
    /// candidates of the test pool.
    pub topk_retrieval_pct: f64,
    pub per_subject_two_way: Vec<f64>,
}

fn flat_f64<S: Scalar>(t: &Tensor<S>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn cosine_f64(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Evaluate an arbitrary predictor over the world's test split. The
/// predictor maps a sample to its (image, text) embedding predictions,
/// already enhanced if the caller wants retrieval enhancement measured.
pub fn evaluate_with<S, F>(
    world: &SyntheticWorld<S>,
    padded_len: usize,
    eval_cfg: &RunConfig,
    eval_seed: u64,
    mut predict: F,
) -> Result<EvalMetrics>
where
    S: Scalar,
    F: FnMut(&FmriSample<S>) -> Result<(Tensor<S>, Tensor<S>)>,
{
    let (_, test_stimuli) = world.split()?;
    if test_stimuli.is_empty() {
        return Err(Error::Data("evaluate: empty test set".into()));
    }
    // candidate pools, shared across subjects
    let mut image_pool = Vec::with_capacity(test_stimuli.len());
    let mut text_pool = Vec::with_capacity(test_stimuli.len());
    for &n in &test_stimuli {
        let targets = world.targets(n)?;
        image_pool.push((n, flat_f64(&targets.image)));
        text_pool.push((n, flat_f64(&targets.text)));
    }

    let draws = eval_cfg.eval_distractor_draws;
    let top_k = eval_cfg.eval_top_k.min(test_stimuli.len());
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut per_subject_correct = vec![0usize; world.cfg.subjects];
    let mut per_subject_total = vec![0usize; world.cfg.subjects];
    let mut retrieved = 0usize;
    let mut retrieval_total = 0usize;

    for subject in world.subject_ids() {
        for &stimulus in &test_stimuli {
            for trial in 0..world.cfg.test_trials {
                let sample = world.sample(subject, stimulus, trial, padded_len)?;
                let (image_pred, text_pred) = predict(&sample)?;
                for (modality_tag, pred, pool) in
                    [(0u64, &image_pred, &image_pool), (1u64, &text_pred, &text_pool)]
                {
                    let flat = flat_f64(pred);
                    let true_flat = &pool
                        .iter()
                        .find(|(id, _)| *id == stimulus)
                        .expect("stimulus in test pool")
                        .1;
                    let true_sim = cosine_f64(&flat, true_flat);

                    // two-way identification over R distractor draws
                    let tag = derive_seed(
                        derive_seed(eval_seed ^ EVAL_STREAM, subject as u64),
                        stimulus ^ (modality_tag << 32) ^ ((trial as u64) << 40),
                    );
                    let mut rng = Prng::new(tag);
                    for _ in 0..draws {
                        let distractor = loop {
                            let pick = &pool[rng.below(pool.len())];
                            if pick.0 != stimulus {
                                break pick;
                            }
                        };
                        let hit = true_sim > cosine_f64(&flat, &distractor.1);
                        correct += hit as usize;
                        total += 1;
                        per_subject_correct[subject as usize] += hit as usize;
                        per_subject_total[subject as usize] += 1;
                    }

                    // top-K retrieval over the full test pool
                    let mut scored: Vec<(u64, f64)> =
                        pool.iter().map(|(id, emb)| (*id, cosine_f64(&flat, emb))).collect();
                    scored.sort_by(|a, b| {
                        b.1.partial_cmp(&a.1).expect("finite cosine").then(a.0.cmp(&b.0))
                    });
                    if scored[..top_k].iter().any(|(id, _)| *id == stimulus) {
                        retrieved += 1;
                    }
                    retrieval_total += 1;
                }
            }
        }
    }

    let pct = |num: usize, den: usize| -> f64 {
        if den == 0 {
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    Ok(EvalMetrics {
        two_way_pct: pct(correct, total),
        topk_retrieval_pct: pct(retrieved, retrieval_total),
        per_subject_two_way: (0..world.cfg.subjects)
            .map(|s| pct(per_subject_correct[s], per_subject_total[s]))
            .collect(),
    })
}

/// Evaluate a trained model, optionally with retrieval enhancement against
/// the supplied memory bank.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    world: &SyntheticWorld<S>,
    use_ecphory: bool,
    bank: Option<&MemoryBank<S>>,
    eval_seed: u64,
) -> Result<EvalMetrics> {
    let ecfg: EcphoryConfig = model.run_cfg.ecphory_config();
    if use_ecphory && bank.is_none() {
        return Err(Error::InvalidArgument(
            "evaluate: retrieval enhancement requested without a memory bank".into(),
        ));
    }
    evaluate_with(world, model.padded_len, &model.run_cfg, eval_seed, |sample| {
        let pred = model.predict(sample)?;
        if use_ecphory {
            let enhanced = enhance_prediction(
                sample.subject,
                &pred.image,
                &pred.text,
                bank.expect("bank checked above"),
                &ecfg,
            )?;
            Ok((enhanced.image, enhanced.text))
        } else {
            Ok((pred.image, pred.text))
        }
    })
}

/// Prestore every training stimulus's targets for every subject.
pub fn build_training_bank<S: Scalar>(world: &SyntheticWorld<S>) -> Result<MemoryBank<S>> {
    let (train_stimuli, _) = world.split()?;
    let mut targets = Vec::with_capacity(train_stimuli.len());
    for &n in &train_stimuli {
        targets.push((n, world.targets(n)?));
    }
    let mut entries = Vec::new();
    for subject in world.subject_ids() {
        for (n, pair) in &targets {
            entries.push((subject, *n, pair));
        }
    }
    crate::ecphory::build_bank(entries.into_iter())
}

// ── training loop ───────────────────────────────────────────────────────

pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    pub history: Vec<MetricsRow>,
}

/// Train one model on the world's training split for `epochs` epochs.
/// `train_seed` drives initialization, batch shuffling, and the per-epoch
/// evaluation draws; two calls with identical arguments produce
/// bit-identical models and histories.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    world: &SyntheticWorld<S>,
    train_seed: u64,
    epochs: usize,
    run_id: &str,
) -> Result<TrainOutcome<S>> {
    let mut model = Model::init(cfg, world, train_seed)?;
    let padded_len = model.padded_len;
    let (train_stimuli, _) = world.split()?;

    // materialize the training trials once
    let mut samples = Vec::new();
    for subject in world.subject_ids() {
        for &stimulus in &train_stimuli {
            for trial in 0..world.cfg.train_trials {
                samples.push(world.sample(subject, stimulus, trial, padded_len)?);
            }
        }
    }

    let mut optimizer = AdamW::new(cfg, &model.store);
    let mut history = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let variant_label = if cfg.variant == "omni" && cfg.shared_alpha {
        "omni_shared".to_string()
    } else {
        cfg.variant.clone()
    };

    for epoch in 0..epochs {
        let mut rng = Prng::new(derive_seed(train_seed ^ SHUFFLE_STREAM, epoch as u64));
        rng.shuffle(&mut order);
        let mut loss_weighted = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<FmriSample<S>> =
                chunk.iter().map(|&i| samples[i].clone()).collect();
            let (loss, grads) = batch_loss_and_grads(&model, &batch, true).map_err(|e| {
                Error::Diverged(format!("epoch {epoch}, after {seen} samples: {e}"))
            })?;
            optimizer.step(&mut model.store, &grads.expect("gradients requested"));
            loss_weighted += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_weighted / seen as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: loss {train_loss}")));
        }

        let eval_seed = derive_seed(train_seed ^ EVAL_STREAM, epoch as u64);
        let eval = evaluate(&model, world, false, None, eval_seed)?;
        history.push(MetricsRow {
            run_id: run_id.to_string(),
            variant: variant_label.clone(),
            seed: train_seed,
            epoch,
            train_loss,
            two_way_pct: eval.two_way_pct,
            topk_retrieval_pct: eval.topk_retrieval_pct,
            per_subject_two_way: eval.per_subject_two_way,
            param_count: model.param_count(),
            expert_application_count: model.expert_applications_per_sample(),
        });
    }

    Ok(TrainOutcome { model, history })
}
