//! Voxel-vector encoder: wrap-around padding and z-scoring, a patch
//! embedding over contiguous regions of the padded vector, a stack of
//! pre-norm transformer blocks, and two projection heads mapping the token
//! sequence to image-aligned and text-aligned embedding predictions.
//!
//! The feed-forward sublayer of each block is pluggable: a shared MLP, the
//! subject-conditioned omni mixture layer, or the dense / sparse baselines.
//! Only the last `moe_blocks` blocks carry the mixture variant; earlier
//! blocks always use the shared MLP. The mixture either replaces the MLP
//! sublayer or is appended after it as an extra residual sublayer.

use crate::error::{Error, Result};
use crate::moe::{
    dense_moe_forward, sparse_topk_forward, ExpertMlp, OmniMoeLayer, SparseMoeLayer,
    SplitLumpTrace, WEIGHT_INIT_STD,
};
use crate::params::{ParamId, ParamStore, TapeBinding};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Ground-truth embedding targets of one stimulus.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair<S: Scalar> {
    /// Shape `v x c`.
    pub image: Tensor<S>,
    /// Shape `t x c`.
    pub text: Tensor<S>,
}

/// One subject-tagged measurement with its targets attached.
#[derive(Debug, Clone)]
pub struct FmriSample<S: Scalar> {
    pub subject: u32,
    pub stimulus: u64,
    pub trial: u32,
    /// Raw voxel vector, length `d_s`.
    pub voxels: Vec<f64>,
    /// Wrap-around padded and z-scored vector, shape `[input_len]`.
    pub padded: Tensor<S>,
    pub targets: EmbeddingPair<S>,
}

/// Wrap-around pad `voxels` to `padded_len`, then z-score with population
/// statistics of the padded vector.
pub fn preprocess<S: Scalar>(voxels: &[f64], padded_len: usize) -> Result<Tensor<S>> {
    if voxels.is_empty() || voxels.len() > padded_len {
        return Err(Error::Data(format!(
            "preprocess: voxel count {} not in 1..={padded_len}",
            voxels.len()
        )));
    }
    let mut padded: Vec<f64> = (0..padded_len).map(|i| voxels[i % voxels.len()]).collect();
    let n = padded_len as f64;
    let mean = padded.iter().sum::<f64>() / n;
    let var = padded.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::Data("preprocess: zero-variance voxel vector".into()));
    }
    let inv_std = 1.0 / var.sqrt();
    for v in &mut padded {
        *v = (*v - mean) * inv_std;
    }
    Tensor::new(vec![padded_len], padded.into_iter().map(S::from_f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoeVariant {
    /// Shared MLP feed-forward everywhere (no mixture).
    Mlp,
    /// Split-then-lump omni mixture; `shared_alpha` collapses the subject
    /// matrices into a single shared one.
    Omni { shared_alpha: bool },
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoeInsertion {
    /// The mixture replaces the MLP sublayer of its block.
    Replace,
    /// The mixture runs as an extra residual sublayer after the MLP.
    Append,
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Padded voxel length consumed by the patch embedding; must be a
    /// multiple of `patches`.
    pub input_len: usize,
    pub patches: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    /// How many of the trailing blocks carry the mixture variant.
    pub moe_blocks: usize,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub attention_heads: usize,
    pub expert_count: usize,
    pub sparse_top_k: usize,
    pub variant: MoeVariant,
    pub moe_insertion: MoeInsertion,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patches == 0 || self.input_len % self.patches != 0 {
            return Err(Error::Config(format!(
                "input_len {} must be a positive multiple of patches {}",
                self.input_len, self.patches
            )));
        }
        if self.attention_heads != 1 {
            return Err(Error::Config(
                "attention_heads: only single-head attention is implemented".into(),
            ));
        }
        if self.moe_blocks > self.blocks {
            return Err(Error::Config(format!(
                "moe_blocks {} exceeds blocks {}",
                self.moe_blocks, self.blocks
            )));
        }
        if self.expert_count == 0 {
            return Err(Error::Config("expert_count must be positive".into()));
        }
        if matches!(self.variant, MoeVariant::Sparse)
            && (self.sparse_top_k == 0 || self.sparse_top_k > self.expert_count)
        {
            return Err(Error::Config(format!(
                "sparse_top_k {} out of range for {} experts",
                self.sparse_top_k, self.expert_count
            )));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.input_len / self.patches
    }
}

#[derive(Debug, Clone)]
struct NormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl NormParams {
    fn init<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, dim: usize) -> Self {
        NormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(vec![dim], S::one())),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![dim])),
        }
    }
}

#[derive(Debug, Clone)]
struct AttentionParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl AttentionParams {
    fn init<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, c: usize, rng: &mut Prng) -> Self {
        let mut mat =
            |store: &mut ParamStore<S>, name: &str| -> ParamId {
                store.add(format!("{prefix}.{name}"), Tensor::randn(vec![c, c], WEIGHT_INIT_STD, rng))
            };
        let wq = mat(store, "wq");
        let wk = mat(store, "wk");
        let wv = mat(store, "wv");
        let wo = mat(store, "wo");
        AttentionParams {
            wq,
            bq: store.add(format!("{prefix}.bq"), Tensor::zeros(vec![c])),
            wk,
            bk: store.add(format!("{prefix}.bk"), Tensor::zeros(vec![c])),
            wv,
            bv: store.add(format!("{prefix}.bv"), Tensor::zeros(vec![c])),
            wo,
            bo: store.add(format!("{prefix}.bo"), Tensor::zeros(vec![c])),
        }
    }
}

#[derive(Debug, Clone)]
enum FfnSlot {
    Mlp(ExpertMlp),
    Omni(OmniMoeLayer),
    Dense(Vec<ExpertMlp>),
    Sparse(SparseMoeLayer),
}

#[derive(Debug, Clone)]
struct Sublayer {
    norm: NormParams,
    slot: FfnSlot,
}

#[derive(Debug, Clone)]
struct Block {
    ln_attn: NormParams,
    attn: AttentionParams,
    sublayers: Vec<Sublayer>,
}

/// Which projection head to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Image,
    Text,
}

#[derive(Debug, Clone)]
pub struct VoxelEncoder {
    pub cfg: EncoderConfig,
    patch_weights: Vec<ParamId>,
    positional: ParamId,
    blocks: Vec<Block>,
    image_head: ParamId,
    text_head: ParamId,
}

/// Per-sample forward artifacts.
pub struct EncodeOutput<S: Scalar> {
    pub tokens: NodeId,
    pub image_pred: NodeId,
    pub text_pred: NodeId,
    /// Split/lump traces of each omni block, keyed by block index.
    pub moe_traces: Vec<(usize, SplitLumpTrace<S>)>,
    /// Expert MLP applications performed across all mixture sublayers.
    pub expert_applications: usize,
}

impl VoxelEncoder {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: EncoderConfig,
        subjects: &[u32],
        rng: &mut Prng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.model_dim;
        let p = cfg.patch_len();
        let patch_weights = (0..cfg.patches)
            .map(|i| {
                store.add(format!("patch{i}.w"), Tensor::randn(vec![p, c], WEIGHT_INIT_STD, rng))
            })
            .collect();
        let positional =
            store.add("pos", Tensor::randn(vec![cfg.patches, c], WEIGHT_INIT_STD, rng));

        let first_moe_block = cfg.blocks - cfg.moe_blocks;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let prefix = format!("block{b}");
            let ln_attn = NormParams::init(store, &format!("{prefix}.ln_attn"), c);
            let attn = AttentionParams::init(store, &format!("{prefix}.attn"), c, rng);
            let carries_moe = b >= first_moe_block && !matches!(cfg.variant, MoeVariant::Mlp);
            let mut sublayers = Vec::new();
            if !carries_moe || cfg.moe_insertion == MoeInsertion::Append {
                sublayers.push(Sublayer {
                    norm: NormParams::init(store, &format!("{prefix}.ln_ffn"), c),
                    slot: FfnSlot::Mlp(ExpertMlp::init(
                        store,
                        &format!("{prefix}.ffn"),
                        c,
                        cfg.hidden_dim,
                        rng,
                    )),
                });
            }
            if carries_moe {
                let norm = NormParams::init(store, &format!("{prefix}.ln_moe"), c);
                let slot = match cfg.variant {
                    MoeVariant::Mlp => unreachable!(),
                    MoeVariant::Omni { shared_alpha } => FfnSlot::Omni(OmniMoeLayer::init(
                        store,
                        &format!("{prefix}.moe"),
                        c,
                        cfg.hidden_dim,
                        cfg.expert_count,
                        subjects,
                        shared_alpha,
                        rng,
                    )),
                    MoeVariant::Dense => FfnSlot::Dense(
                        (0..cfg.expert_count)
                            .map(|e| {
                                ExpertMlp::init(
                                    store,
                                    &format!("{prefix}.moe.expert{e}"),
                                    c,
                                    cfg.hidden_dim,
                                    rng,
                                )
                            })
                            .collect(),
                    ),
                    MoeVariant::Sparse => FfnSlot::Sparse(SparseMoeLayer::init(
                        store,
                        &format!("{prefix}.moe"),
                        c,
                        cfg.hidden_dim,
                        cfg.expert_count,
                        cfg.sparse_top_k,
                        rng,
                    )),
                };
                sublayers.push(Sublayer { norm, slot });
            }
            blocks.push(Block { ln_attn, attn, sublayers });
        }

        let image_head = store.add(
            "head.image",
            Tensor::randn(vec![cfg.image_tokens, cfg.patches], WEIGHT_INIT_STD, rng),
        );
        let text_head = store.add(
            "head.text",
            Tensor::randn(vec![cfg.text_tokens, cfg.patches], WEIGHT_INIT_STD, rng),
        );
        Ok(VoxelEncoder { cfg, patch_weights, positional, blocks, image_head, text_head })
    }

    /// Patch-embed a padded voxel vector into the initial `m x c` tokens.
    fn embed<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &mut TapeBinding,
        store: &ParamStore<S>,
        padded: NodeId,
    ) -> Result<NodeId> {
        let m = self.cfg.patches;
        let p = self.cfg.patch_len();
        let grid = tape.reshape(padded, vec![m, p])?;
        let mut rows = Vec::with_capacity(m);
        for (i, &w) in self.patch_weights.iter().enumerate() {
            let patch = tape.gather_rows(grid, &[i])?;
            let wn = binding.node(tape, store, w);
            rows.push(tape.matmul(patch, wn)?);
        }
        let tokens = tape.concat_rows(&rows)?;
        let pos = binding.node(tape, store, self.positional);
        tape.add(tokens, pos)
    }

    fn attention<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &mut TapeBinding,
        store: &ParamStore<S>,
        block: &Block,
        x: NodeId,
    ) -> Result<NodeId> {
        let eps = self.cfg.layer_norm_eps;
        let gamma = binding.node(tape, store, block.ln_attn.gamma);
        let beta = binding.node(tape, store, block.ln_attn.beta);
        let xn = tape.layer_norm(x, gamma, beta, eps)?;

        let project = |tape: &mut Tape<S>, binding: &mut TapeBinding, w, b| -> Result<NodeId> {
            let wn = binding.node(tape, store, w);
            let bn = binding.node(tape, store, b);
            let out = tape.matmul(xn, wn)?;
            tape.add_bias(out, bn)
        };
        let q = project(tape, binding, block.attn.wq, block.attn.bq)?;
        let k = project(tape, binding, block.attn.wk, block.attn.bk)?;
        let v = project(tape, binding, block.attn.wv, block.attn.bv)?;

        let kt = tape.transpose(k)?;
        let raw = tape.matmul(q, kt)?;
        let scaled = tape.mul_scalar(raw, 1.0 / (self.cfg.model_dim as f64).sqrt())?;
        let weights = tape.softmax_along(scaled, 1)?;
        let ctx = tape.matmul(weights, v)?;
        let wo = binding.node(tape, store, block.attn.wo);
        let bo = binding.node(tape, store, block.attn.bo);
        let out = tape.matmul(ctx, wo)?;
        tape.add_bias(out, bo)
    }

    /// Run the block stack over a preprocessed sample.
    pub fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &mut TapeBinding,
        store: &ParamStore<S>,
        padded: &Tensor<S>,
        subject: u32,
    ) -> Result<(NodeId, Vec<(usize, SplitLumpTrace<S>)>, usize)> {
        if padded.shape() != [self.cfg.input_len] {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: padded.shape().to_vec(),
                rhs: vec![self.cfg.input_len],
            });
        }
        let input = tape.constant(padded.clone());
        let mut x = self.embed(tape, binding, store, input)?;
        let mut traces = Vec::new();
        let mut applications = 0;
        for (b, block) in self.blocks.iter().enumerate() {
            let attn_out = self.attention(tape, binding, store, block, x)?;
            x = tape.add(x, attn_out)?;
            for sub in &block.sublayers {
                let gamma = binding.node(tape, store, sub.norm.gamma);
                let beta = binding.node(tape, store, sub.norm.beta);
                let xn = tape.layer_norm(x, gamma, beta, self.cfg.layer_norm_eps)?;
                let y = match &sub.slot {
                    FfnSlot::Mlp(mlp) => mlp.forward(tape, binding, store, xn)?,
                    FfnSlot::Omni(layer) => {
                        let (out, trace) = layer.forward(tape, binding, store, xn, subject)?;
                        applications += trace.expert_applications;
                        traces.push((b, trace));
                        out
                    }
                    FfnSlot::Dense(experts) => {
                        let (out, count) =
                            dense_moe_forward(tape, binding, store, xn, experts)?;
                        applications += count;
                        out
                    }
                    FfnSlot::Sparse(layer) => {
                        let (out, trace) = sparse_topk_forward(tape, binding, store, xn, layer)?;
                        applications += trace.expert_applications;
                        out
                    }
                };
                x = tape.add(x, y)?;
            }
        }
        Ok((x, traces, applications))
    }

    /// Project the token sequence through one of the heads.
    pub fn project<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &mut TapeBinding,
        store: &ParamStore<S>,
        tokens: NodeId,
        head: Head,
    ) -> Result<NodeId> {
        let id = match head {
            Head::Image => self.image_head,
            Head::Text => self.text_head,
        };
        let h = binding.node(tape, store, id);
        tape.matmul(h, tokens)
    }

    /// Encode and project both heads in one pass.
    pub fn forward_sample<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &mut TapeBinding,
        store: &ParamStore<S>,
        padded: &Tensor<S>,
        subject: u32,
    ) -> Result<EncodeOutput<S>> {
        let (tokens, moe_traces, expert_applications) =
            self.encode(tape, binding, store, padded, subject)?;
        let image_pred = self.project(tape, binding, store, tokens, Head::Image)?;
        let text_pred = self.project(tape, binding, store, tokens, Head::Text)?;
        Ok(EncodeOutput { tokens, image_pred, text_pred, moe_traces, expert_applications })
    }
}
