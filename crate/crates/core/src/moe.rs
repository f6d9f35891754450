//! Mixture-of-experts layers.
//!
//! Three variants share the same expert MLPs:
//!
//! * [`OmniMoeLayer`] — every expert stays active, but the `m` input tokens
//!   are first compressed into one slot per expert using split weights
//!   (a softmax over tokens of the subject-conditioned scores), each expert
//!   processes only its slot, and the slot outputs are recombined per token
//!   using lump weights (a softmax over experts of the same scores). Expert
//!   cost is therefore independent of the token count.
//! * [`dense_moe_forward`] — every expert processes every token; outputs sum.
//! * [`SparseMoeLayer`] — a router activates the top-K experts per token.
//!
//! The omni variant conditions its routing scores on per-subject matrices
//! `alpha[s]` of shape `c x E`; a batch from subject `s` can only ever touch
//! `alpha[s]`, so gradients on every other subject's matrix stay exactly zero.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, TapeBinding};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const WEIGHT_INIT_STD: f64 = 0.02;

/// Routing matrices need enough spread for the split/lump softmaxes to
/// differentiate from the first step.
pub const ALPHA_INIT_STD: f64 = 0.3;

/// Two-layer GELU MLP with equal input and output width.
#[derive(Debug, Clone)]
pub struct ExpertMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl ExpertMlp {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        c: usize,
        h: usize,
        rng: &mut Prng,
    ) -> Self {
        ExpertMlp {
            w1: store.add(format!("{prefix}.w1"), Tensor::randn(vec![c, h], WEIGHT_INIT_STD, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![h])),
            w2: store.add(format!("{prefix}.w2"), Tensor::randn(vec![h, c], WEIGHT_INIT_STD, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![c])),
            in_dim: c,
            hidden_dim: h,
        }
    }

    /// Weights arranged so the MLP computes the identity map:
    /// `gelu(x) - gelu(-x) = x` with `w1 = [I | -I]`, `w2 = [I; -I]^T` stacked.
    /// Intended for tests.
    pub fn init_identity<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, c: usize) -> Self {
        let h = 2 * c;
        let mut w1 = Tensor::<S>::zeros(vec![c, h]);
        let mut w2 = Tensor::<S>::zeros(vec![h, c]);
        for i in 0..c {
            w1.data_mut()[i * h + i] = S::one();
            w1.data_mut()[i * h + c + i] = -S::one();
            w2.data_mut()[i * c + i] = S::one();
            w2.data_mut()[(c + i) * c + i] = -S::one();
        }
        ExpertMlp {
            w1: store.add(format!("{prefix}.w1"), w1),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![h])),
            w2: store.add(format!("{prefix}.w2"), w2),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![c])),
            in_dim: c,
            hidden_dim: h,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &mut TapeBinding,
        store: &ParamStore<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w1 = binding.node(tape, store, self.w1);
        let b1 = binding.node(tape, store, self.b1);
        let w2 = binding.node(tape, store, self.w2);
        let b2 = binding.node(tape, store, self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h)?;
        let out = tape.matmul(h, w2)?;
        tape.add_bias(out, b2)
    }

    pub fn param_count(&self) -> usize {
        let (c, h) = (self.in_dim, self.hidden_dim);
        c * h + h + h * c + c
    }
}

/// Routing-score parameters of an omni layer: either one matrix per subject
/// or a single matrix shared by all of them (the ablation's row-2 variant).
#[derive(Debug, Clone)]
pub enum AlphaParams {
    PerSubject(Vec<(u32, ParamId)>),
    Shared(ParamId),
}

#[derive(Debug, Clone)]
pub struct OmniMoeLayer {
    pub experts: Vec<ExpertMlp>,
    pub alpha: AlphaParams,
    pub expert_count: usize,
    pub feature_dim: usize,
}

/// Intermediates of one split-then-lump pass, kept for inspection and for
/// the weight-trace export.
#[derive(Debug, Clone)]
pub struct SplitLumpTrace<S: Scalar> {
    /// `O . alpha^s`, shape `m x E`.
    pub scores: Tensor<S>,
    /// Column-stochastic split weights, shape `m x E`.
    pub split_weights: Tensor<S>,
    /// One compressed slot per expert, shape `E x c`.
    pub slot_features: Tensor<S>,
    /// Row-stochastic lump weights, shape `m x E`.
    pub lump_weights: Tensor<S>,
    /// Number of expert MLP applications this pass performed.
    pub expert_applications: usize,
}

impl OmniMoeLayer {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        c: usize,
        h: usize,
        expert_count: usize,
        subjects: &[u32],
        shared_alpha: bool,
        rng: &mut Prng,
    ) -> Self {
        let experts = (0..expert_count)
            .map(|e| ExpertMlp::init(store, &format!("{prefix}.expert{e}"), c, h, rng))
            .collect();
        let alpha = if shared_alpha {
            AlphaParams::Shared(store.add(
                format!("{prefix}.alpha.shared"),
                Tensor::randn(vec![c, expert_count], ALPHA_INIT_STD, rng),
            ))
        } else {
            AlphaParams::PerSubject(
                subjects
                    .iter()
                    .map(|&s| {
                        (
                            s,
                            store.add(
                                format!("{prefix}.alpha.s{s}"),
                                Tensor::randn(vec![c, expert_count], ALPHA_INIT_STD, rng),
                            ),
                        )
                    })
                    .collect(),
            )
        };
        OmniMoeLayer { experts, alpha, expert_count, feature_dim: c }
    }

    pub fn alpha_for(&self, subject: u32) -> Result<ParamId> {
        match &self.alpha {
            AlphaParams::Shared(id) => Ok(*id),
            AlphaParams::PerSubject(entries) => entries
                .iter()
                .find(|(s, _)| *s == subject)
                .map(|(_, id)| *id)
                .ok_or_else(|| Error::UnknownSubject {
                    subject,
                    known: entries.iter().map(|(s, _)| *s).collect(),
                }),
        }
    }

    /// `O . alpha^s`, the subject-conditioned routing scores.
    pub fn subject_scores<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &mut TapeBinding,
        store: &ParamStore<S>,
        tokens: NodeId,
        subject: u32,
    ) -> Result<NodeId> {
        let alpha = self.alpha_for(subject)?;
        let alpha_node = binding.node(tape, store, alpha);
        tape.matmul(tokens, alpha_node)
    }

    /// Full split-then-lump pass for one subject's token matrix.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binding: &mut TapeBinding,
        store: &ParamStore<S>,
        tokens: NodeId,
        subject: u32,
    ) -> Result<(NodeId, SplitLumpTrace<S>)> {
        let scores = self.subject_scores(tape, binding, store, tokens, subject)?;
        let split = split_weights(tape, scores)?;
        let slots = tape.dispatch(tokens, split)?;
        let processed = apply_experts(tape, binding, store, slots, &self.experts)?;
        let lump = lump_weights(tape, scores)?;
        let out = combine(tape, lump, processed)?;
        let trace = SplitLumpTrace {
            scores: tape.value(scores).clone(),
            split_weights: tape.value(split).clone(),
            slot_features: tape.value(processed).clone(),
            lump_weights: tape.value(lump).clone(),
            expert_applications: self.experts.len(),
        };
        Ok((out, trace))
    }
}

/// Softmax over the token axis: each expert's column of weights sums to one.
pub fn split_weights<S: Scalar>(tape: &mut Tape<S>, scores: NodeId) -> Result<NodeId> {
    tape.softmax_along(scores, 0)
}

/// Softmax over the expert axis: each token's row of weights sums to one.
pub fn lump_weights<S: Scalar>(tape: &mut Tape<S>, scores: NodeId) -> Result<NodeId> {
    tape.softmax_along(scores, 1)
}

/// Expert `e` processes slot row `e` only; no cross-slot mixing.
pub fn apply_experts<S: Scalar>(
    tape: &mut Tape<S>,
    binding: &mut TapeBinding,
    store: &ParamStore<S>,
    slots: NodeId,
    experts: &[ExpertMlp],
) -> Result<NodeId> {
    let (rows, _) = tape.value(slots).dims2()?;
    if rows != experts.len() {
        return Err(Error::InvalidArgument(format!(
            "apply_experts: {} slots but {} experts",
            rows,
            experts.len()
        )));
    }
    let mut outs = Vec::with_capacity(experts.len());
    for (e, expert) in experts.iter().enumerate() {
        let slot = tape.gather_rows(slots, &[e])?;
        outs.push(expert.forward(tape, binding, store, slot)?);
    }
    tape.concat_rows(&outs)
}

/// Convex recombination `P = C . Q` of slot outputs into per-token outputs.
pub fn combine<S: Scalar>(tape: &mut Tape<S>, lump: NodeId, slots: NodeId) -> Result<NodeId> {
    tape.matmul(lump, slots)
}

/// Classical dense mixture: `P = sum_e f_e(O)`; every expert sees all tokens.
/// Returns the output node and the number of per-token expert applications.
pub fn dense_moe_forward<S: Scalar>(
    tape: &mut Tape<S>,
    binding: &mut TapeBinding,
    store: &ParamStore<S>,
    tokens: NodeId,
    experts: &[ExpertMlp],
) -> Result<(NodeId, usize)> {
    if experts.is_empty() {
        return Err(Error::InvalidArgument("dense_moe_forward: no experts".into()));
    }
    let (m, _) = tape.value(tokens).dims2()?;
    let mut acc: Option<NodeId> = None;
    for expert in experts {
        let out = expert.forward(tape, binding, store, tokens)?;
        acc = Some(match acc {
            None => out,
            Some(prev) => tape.add(prev, out)?,
        });
    }
    Ok((acc.unwrap(), m * experts.len()))
}

#[derive(Debug, Clone)]
pub struct SparseMoeLayer {
    pub experts: Vec<ExpertMlp>,
    /// Router weights, shape `c x E`.
    pub router: ParamId,
    pub top_k: usize,
}

impl SparseMoeLayer {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        c: usize,
        h: usize,
        expert_count: usize,
        top_k: usize,
        rng: &mut Prng,
    ) -> Self {
        let experts = (0..expert_count)
            .map(|e| ExpertMlp::init(store, &format!("{prefix}.expert{e}"), c, h, rng))
            .collect();
        let router = store.add(
            format!("{prefix}.router"),
            Tensor::randn(vec![c, expert_count], WEIGHT_INIT_STD, rng),
        );
        SparseMoeLayer { experts, router, top_k }
    }
}

/// Gate matrix of a sparse pass: exactly K nonzero entries per row, each row
/// summing to one, plus the application counter.
#[derive(Debug, Clone)]
pub struct SparseTrace<S: Scalar> {
    pub gates: Tensor<S>,
    pub expert_applications: usize,
}

/// Top-K sparse gating: per token, the K largest router logits are kept
/// (ties broken toward the lower expert index), renormalized with a softmax
/// over the survivors, and used to mix the outputs of the selected experts.
pub fn sparse_topk_forward<S: Scalar>(
    tape: &mut Tape<S>,
    binding: &mut TapeBinding,
    store: &ParamStore<S>,
    tokens: NodeId,
    layer: &SparseMoeLayer,
) -> Result<(NodeId, SparseTrace<S>)> {
    let expert_count = layer.experts.len();
    let k = layer.top_k;
    if k == 0 || k > expert_count {
        return Err(Error::InvalidArgument(format!(
            "sparse_topk_forward: K={k} out of range for {expert_count} experts"
        )));
    }
    let (m, _) = tape.value(tokens).dims2()?;
    let router = binding.node(tape, store, layer.router);
    let logits = tape.matmul(tokens, router)?;

    let ones_row = tape.constant(Tensor::full(vec![1, k], S::one()));
    let mut gate_matrix = Tensor::<S>::zeros(vec![m, expert_count]);
    let mut token_outputs = Vec::with_capacity(m);
    for j in 0..m {
        // Rank logits of this token; ties go to the lower expert index.
        let row: Vec<S> = (0..expert_count).map(|e| tape.value(logits).at(j, e)).collect();
        let mut order: Vec<usize> = (0..expert_count).collect();
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).expect("finite logits").then(a.cmp(&b))
        });
        let selected = &order[..k];

        let logit_row = tape.gather_rows(logits, &[j])?;
        let logit_col = tape.reshape(logit_row, vec![expert_count, 1])?;
        let picked = tape.gather_rows(logit_col, selected)?;
        let picked_row = tape.reshape(picked, vec![1, k])?;
        let gates_row = tape.softmax_along(picked_row, 1)?;
        let gates_vec = tape.reshape(gates_row, vec![k])?;

        for (slot, &e) in selected.iter().enumerate() {
            gate_matrix.data_mut()[j * expert_count + e] = tape.value(gates_vec).data()[slot];
        }

        let token = tape.gather_rows(tokens, &[j])?;
        let mut expert_outs = Vec::with_capacity(k);
        for &e in selected {
            expert_outs.push(layer.experts[e].forward(tape, binding, store, token)?);
        }
        let stacked = tape.concat_rows(&expert_outs)?;
        let weighted = tape.scale_rows(stacked, gates_vec)?;
        token_outputs.push(tape.matmul(ones_row, weighted)?);
    }
    let out = tape.concat_rows(&token_outputs)?;
    Ok((out, SparseTrace { gates: gate_matrix, expert_applications: m * k }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostVariant {
    Omni,
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub param_count: usize,
    /// Expert MLP applications per forward pass, counted per token handled.
    pub expert_application_count: usize,
    /// Multiply-accumulate estimate of the routing/dispatch machinery per
    /// forward pass (scores, weight softmaxes, compression, recombination);
    /// excludes the expert MLPs themselves.
    pub dispatch_flops: usize,
}

/// Static cost model of the three variants.
///
/// Parameter counts: each expert costs `c*h + h + h*c + c`; the omni variant
/// adds `S*c*E` subject matrices, the sparse variant a `c*E` router, and the
/// dense variant nothing beyond the experts.
pub fn count_costs(
    variant: CostVariant,
    m: usize,
    c: usize,
    h: usize,
    expert_count: usize,
    subject_count: usize,
    top_k: usize,
) -> CostReport {
    let expert_params = expert_count * (c * h + h + h * c + c);
    match variant {
        CostVariant::Omni => CostReport {
            param_count: expert_params + subject_count * c * expert_count,
            expert_application_count: expert_count,
            dispatch_flops: 3 * m * c * expert_count + 6 * m * expert_count,
        },
        CostVariant::Dense => CostReport {
            param_count: expert_params,
            expert_application_count: m * expert_count,
            dispatch_flops: m * c * expert_count,
        },
        CostVariant::Sparse => CostReport {
            param_count: expert_params + c * expert_count,
            expert_application_count: m * top_k,
            dispatch_flops: m * c * expert_count + m * expert_count + 3 * m * top_k + 2 * m * top_k * c,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GradAccumulator;

    type T = Tensor<f64>;

    fn rand_tensor(shape: Vec<usize>, rng: &mut Prng) -> T {
        T::randn(shape, 1.0, rng)
    }

    /// Independent row-major triple-loop product, used as the matmul oracle.
    fn matmul_oracle(a: &T, b: &T) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    fn single_subject_layer(
        c: usize,
        h: usize,
        e: usize,
        rng: &mut Prng,
    ) -> (ParamStore<f64>, OmniMoeLayer) {
        let mut store = ParamStore::new();
        let layer = OmniMoeLayer::init(&mut store, "moe", c, h, e, &[0], false, rng);
        (store, layer)
    }

    #[test]
    fn subject_scores_zero_alpha_gives_zeros() {
        let mut rng = Prng::new(1);
        let (mut store, layer) = single_subject_layer(4, 8, 3, &mut rng);
        let alpha = layer.alpha_for(0).unwrap();
        store.set(alpha, T::zeros(vec![4, 3]));

        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let o = tape.constant(rand_tensor(vec![5, 4], &mut rng));
        let scores = layer.subject_scores(&mut tape, &mut binding, &store, o, 0).unwrap();
        assert!(tape.value(scores).is_zero());
    }

    #[test]
    fn subject_scores_identity_tokens_reproduce_alpha() {
        let mut rng = Prng::new(2);
        let (store, layer) = single_subject_layer(4, 8, 3, &mut rng);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let o = tape.constant(T::eye(4));
        let scores = layer.subject_scores(&mut tape, &mut binding, &store, o, 0).unwrap();
        let alpha = store.value(layer.alpha_for(0).unwrap());
        assert_eq!(tape.value(scores).data(), alpha.data());
    }

    #[test]
    fn subject_scores_match_matmul_oracle() {
        let mut rng = Prng::new(3);
        let (store, layer) = single_subject_layer(6, 8, 4, &mut rng);
        let o = rand_tensor(vec![5, 6], &mut rng);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let on = tape.constant(o.clone());
        let scores = layer.subject_scores(&mut tape, &mut binding, &store, on, 0).unwrap();
        let expected = matmul_oracle(&o, store.value(layer.alpha_for(0).unwrap()));
        for (a, b) in tape.value(scores).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_subject_lists_known_ids() {
        let mut rng = Prng::new(4);
        let mut store = ParamStore::<f64>::new();
        let layer = OmniMoeLayer::init(&mut store, "moe", 4, 8, 2, &[3, 7], false, &mut rng);
        let err = layer.alpha_for(5).unwrap_err();
        match err {
            Error::UnknownSubject { subject, known } => {
                assert_eq!(subject, 5);
                assert_eq!(known, vec![3, 7]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_weights_uniform_and_hand_case() {
        let mut tape = Tape::new();
        let zeros = tape.constant(T::zeros(vec![4, 3]));
        let w = split_weights(&mut tape, zeros).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        // one column [0, ln 3] over m=2 tokens
        let scores = tape.constant(T::new(vec![2, 1], vec![0.0, 3.0f64.ln()]).unwrap());
        let w2 = split_weights(&mut tape, scores).unwrap();
        assert!((tape.value(w2).data()[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(w2).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn split_weights_column_shift_invariance() {
        let mut rng = Prng::new(5);
        let base = rand_tensor(vec![5, 3], &mut rng);
        let mut shifted = base.clone();
        for col in 0..3 {
            let delta = rng.uniform_in(-2.0, 2.0);
            for row in 0..5 {
                shifted.data_mut()[row * 3 + col] += delta;
            }
        }
        let mut tape = Tape::new();
        let a = tape.constant(base);
        let b = tape.constant(shifted);
        let wa = split_weights(&mut tape, a).unwrap();
        let wb = split_weights(&mut tape, b).unwrap();
        for (x, y) in tape.value(wa).data().iter().zip(tape.value(wb).data()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn dispatch_uniform_weights_give_token_mean() {
        let mut rng = Prng::new(6);
        let tokens = rand_tensor(vec![4, 3], &mut rng);
        let mut tape = Tape::new();
        let t = tape.constant(tokens.clone());
        let w = tape.constant(T::full(vec![4, 2], 0.25));
        let slots = tape.dispatch(t, w).unwrap();
        for col in 0..3 {
            let mean = (0..4).map(|r| tokens.at(r, col)).sum::<f64>() / 4.0;
            for slot in 0..2 {
                assert!((tape.value(slots).at(slot, col) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dispatch_one_hot_copies_selected_token() {
        let mut rng = Prng::new(7);
        let tokens = rand_tensor(vec![4, 3], &mut rng);
        let mut w = T::zeros(vec![4, 2]);
        w.data_mut()[2 * 2] = 1.0; // column 0 selects token 2
        w.data_mut()[1 * 2 + 1] = 1.0; // column 1 selects token 1
        let mut tape = Tape::new();
        let t = tape.constant(tokens.clone());
        let wn = tape.constant(w);
        let slots = tape.dispatch(t, wn).unwrap();
        for col in 0..3 {
            assert_eq!(tape.value(slots).at(0, col), tokens.at(2, col));
            assert_eq!(tape.value(slots).at(1, col), tokens.at(1, col));
        }
    }

    #[test]
    fn dispatch_slots_stay_in_token_hull() {
        let mut rng = Prng::new(8);
        for _ in 0..50 {
            let m = 2 + rng.below(6);
            let c = 1 + rng.below(5);
            let e = 1 + rng.below(4);
            let tokens = rand_tensor(vec![m, c], &mut rng);
            let scores = rand_tensor(vec![m, e], &mut rng);
            let mut tape = Tape::new();
            let t = tape.constant(tokens.clone());
            let s = tape.constant(scores);
            let w = split_weights(&mut tape, s).unwrap();
            let slots = tape.dispatch(t, w).unwrap();
            for col in 0..c {
                let lo = (0..m).map(|r| tokens.at(r, col)).fold(f64::INFINITY, f64::min);
                let hi = (0..m).map(|r| tokens.at(r, col)).fold(f64::NEG_INFINITY, f64::max);
                for slot in 0..e {
                    let v = tape.value(slots).at(slot, col);
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn apply_experts_identity_returns_slots() {
        let mut rng = Prng::new(9);
        let mut store = ParamStore::new();
        let experts: Vec<ExpertMlp> = (0..3)
            .map(|e| ExpertMlp::init_identity(&mut store, &format!("e{e}"), 4))
            .collect();
        let slots = rand_tensor(vec![3, 4], &mut rng);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let sn = tape.constant(slots.clone());
        let out = apply_experts(&mut tape, &mut binding, &store, sn, &experts).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(slots.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_experts_rows_match_standalone_expert_eval() {
        let mut rng = Prng::new(10);
        let mut store = ParamStore::new();
        let experts: Vec<ExpertMlp> = (0..3)
            .map(|e| ExpertMlp::init(&mut store, &format!("e{e}"), 4, 8, &mut rng))
            .collect();
        let slots = rand_tensor(vec![3, 4], &mut rng);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let sn = tape.constant(slots.clone());
        let out = apply_experts(&mut tape, &mut binding, &store, sn, &experts).unwrap();
        for (e, expert) in experts.iter().enumerate() {
            let mut solo_tape = Tape::new();
            let mut solo_binding = TapeBinding::new(&store);
            let row = T::new(vec![1, 4], slots.data()[e * 4..(e + 1) * 4].to_vec()).unwrap();
            let rn = solo_tape.constant(row);
            let solo =
                expert.forward(&mut solo_tape, &mut solo_binding, &store, rn).unwrap();
            for col in 0..4 {
                assert_eq!(tape.value(out).at(e, col), solo_tape.value(solo).at(0, col));
            }
        }
    }

    #[test]
    fn apply_experts_count_mismatch_errors() {
        let mut rng = Prng::new(11);
        let mut store = ParamStore::<f64>::new();
        let experts =
            vec![ExpertMlp::init(&mut store, "only", 4, 8, &mut rng)];
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let slots = tape.constant(T::zeros(vec![2, 4]));
        assert!(apply_experts(&mut tape, &mut binding, &store, slots, &experts).is_err());
    }

    #[test]
    fn lump_weights_uniform_hand_and_degenerate() {
        let mut tape = Tape::new();
        let zeros = tape.constant(T::zeros(vec![2, 8]));
        let w = lump_weights(&mut tape, zeros).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| (v - 0.125).abs() < 1e-15));

        let row = tape.constant(T::new(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap());
        let w2 = lump_weights(&mut tape, row).unwrap();
        assert!((tape.value(w2).data()[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(w2).data()[1] - 0.75).abs() < 1e-15);

        let single = tape.constant(T::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap());
        let w3 = lump_weights(&mut tape, single).unwrap();
        assert!(tape.value(w3).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn combine_selection_uniform_and_hull() {
        let mut rng = Prng::new(12);
        let slots = rand_tensor(vec![3, 4], &mut rng);
        let mut tape = Tape::new();
        let q = tape.constant(slots.clone());

        let mut one_hot = T::zeros(vec![2, 3]);
        one_hot.data_mut()[0 * 3 + 2] = 1.0;
        one_hot.data_mut()[1 * 3 + 0] = 1.0;
        let c1 = tape.constant(one_hot);
        let out1 = combine(&mut tape, c1, q).unwrap();
        for col in 0..4 {
            assert_eq!(tape.value(out1).at(0, col), slots.at(2, col));
            assert_eq!(tape.value(out1).at(1, col), slots.at(0, col));
        }

        let uniform = tape.constant(T::full(vec![2, 3], 1.0 / 3.0));
        let out2 = combine(&mut tape, uniform, q).unwrap();
        for col in 0..4 {
            let mean = (0..3).map(|r| slots.at(r, col)).sum::<f64>() / 3.0;
            assert!((tape.value(out2).at(0, col) - mean).abs() < 1e-12);
        }

        for _ in 0..20 {
            let weights = rand_tensor(vec![5, 3], &mut rng);
            let sw = tape.constant(weights);
            let cw = lump_weights(&mut tape, sw).unwrap();
            let out = combine(&mut tape, cw, q).unwrap();
            for col in 0..4 {
                let lo = (0..3).map(|r| slots.at(r, col)).fold(f64::INFINITY, f64::min);
                let hi = (0..3).map(|r| slots.at(r, col)).fold(f64::NEG_INFINITY, f64::max);
                for row in 0..5 {
                    let v = tape.value(out).at(row, col);
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn omni_forward_identity_experts_zero_alpha_gives_token_mean() {
        let mut rng = Prng::new(13);
        let mut store = ParamStore::new();
        let c = 4;
        let experts: Vec<ExpertMlp> = (0..3)
            .map(|e| ExpertMlp::init_identity(&mut store, &format!("moe.expert{e}"), c))
            .collect();
        let alpha = store.add("moe.alpha.s0", T::zeros(vec![c, 3]));
        let layer = OmniMoeLayer {
            experts,
            alpha: AlphaParams::PerSubject(vec![(0, alpha)]),
            expert_count: 3,
            feature_dim: c,
        };
        let tokens = rand_tensor(vec![5, c], &mut rng);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let t = tape.constant(tokens.clone());
        let (out, trace) = layer.forward(&mut tape, &mut binding, &store, t, 0).unwrap();
        assert_eq!(trace.expert_applications, 3);
        for col in 0..c {
            let mean = (0..5).map(|r| tokens.at(r, col)).sum::<f64>() / 5.0;
            for row in 0..5 {
                assert!((tape.value(out).at(row, col) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn omni_forward_degenerate_single_token_single_expert() {
        let mut store = ParamStore::new();
        let c = 4;
        let expert = ExpertMlp::init_identity(&mut store, "moe.expert0", c);
        let alpha = store.add("moe.alpha.s0", T::zeros(vec![c, 1]));
        let layer = OmniMoeLayer {
            experts: vec![expert],
            alpha: AlphaParams::PerSubject(vec![(0, alpha)]),
            expert_count: 1,
            feature_dim: c,
        };
        let tokens = T::from_rows(&[vec![0.3, -1.2, 0.7, 2.0]]).unwrap();
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let t = tape.constant(tokens.clone());
        let (out, _) = layer.forward(&mut tape, &mut binding, &store, t, 0).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tokens.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn omni_forward_is_token_permutation_equivariant() {
        let mut rng = Prng::new(14);
        for _ in 0..25 {
            let m = 2 + rng.below(7);
            let c = 2 + rng.below(4);
            let e = 1 + rng.below(4);
            let (store, layer) = single_subject_layer(c, 2 * c, e, &mut rng);
            let tokens = rand_tensor(vec![m, c], &mut rng);

            let mut perm: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut perm);
            let mut permuted = T::zeros(vec![m, c]);
            for (to, &from) in perm.iter().enumerate() {
                for col in 0..c {
                    permuted.data_mut()[to * c + col] = tokens.at(from, col);
                }
            }

            let mut tape_a = Tape::new();
            let mut bind_a = TapeBinding::new(&store);
            let ta = tape_a.constant(tokens);
            let (out_a, _) = layer.forward(&mut tape_a, &mut bind_a, &store, ta, 0).unwrap();

            let mut tape_b = Tape::new();
            let mut bind_b = TapeBinding::new(&store);
            let tb = tape_b.constant(permuted);
            let (out_b, _) = layer.forward(&mut tape_b, &mut bind_b, &store, tb, 0).unwrap();

            for (to, &from) in perm.iter().enumerate() {
                for col in 0..c {
                    assert_eq!(
                        tape_b.value(out_b).at(to, col),
                        tape_a.value(out_a).at(from, col),
                        "permutation row mismatch"
                    );
                }
            }
        }
    }

    #[test]
    fn omni_weights_are_stochastic() {
        let mut rng = Prng::new(15);
        for _ in 0..50 {
            let m = 1 + rng.below(8);
            let e = 1 + rng.below(6);
            let scores = rand_tensor(vec![m, e], &mut rng);
            let mut tape = Tape::new();
            let s = tape.constant(scores);
            let split = split_weights(&mut tape, s).unwrap();
            let lump = lump_weights(&mut tape, s).unwrap();
            for col in 0..e {
                let sum: f64 = (0..m).map(|r| tape.value(split).at(r, col)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            for row in 0..m {
                let sum: f64 = (0..e).map(|c| tape.value(lump).at(row, c)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_forward_identity_experts_scale_tokens() {
        let mut rng = Prng::new(16);
        let mut store = ParamStore::new();
        let experts: Vec<ExpertMlp> = (0..3)
            .map(|e| ExpertMlp::init_identity(&mut store, &format!("e{e}"), 4))
            .collect();
        let tokens = rand_tensor(vec![5, 4], &mut rng);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let t = tape.constant(tokens.clone());
        let (out, applications) =
            dense_moe_forward(&mut tape, &mut binding, &store, t, &experts).unwrap();
        assert_eq!(applications, 15);
        for (a, b) in tape.value(out).data().iter().zip(tokens.data()) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_forward_equals_sum_of_standalone_experts() {
        let mut rng = Prng::new(17);
        let mut store = ParamStore::new();
        let experts: Vec<ExpertMlp> = (0..4)
            .map(|e| ExpertMlp::init(&mut store, &format!("e{e}"), 3, 6, &mut rng))
            .collect();
        let tokens = rand_tensor(vec![4, 3], &mut rng);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let t = tape.constant(tokens.clone());
        let (out, _) = dense_moe_forward(&mut tape, &mut binding, &store, t, &experts).unwrap();

        let mut expected = vec![0.0; 12];
        for expert in &experts {
            let mut solo = Tape::new();
            let mut sb = TapeBinding::new(&store);
            let tn = solo.constant(tokens.clone());
            let o = expert.forward(&mut solo, &mut sb, &store, tn).unwrap();
            for (acc, &v) in expected.iter_mut().zip(solo.value(o).data()) {
                *acc += v;
            }
        }
        for (a, b) in tape.value(out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_full_k_equals_dense_gating() {
        let mut rng = Prng::new(18);
        let mut store = ParamStore::new();
        let layer = SparseMoeLayer::init(&mut store, "sp", 4, 8, 3, 3, &mut rng);
        let tokens = rand_tensor(vec![5, 4], &mut rng);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let t = tape.constant(tokens.clone());
        let (_, trace) = sparse_topk_forward(&mut tape, &mut binding, &store, t, &layer).unwrap();

        // with K = E the gates are the full softmax of the router logits
        let mut check = Tape::new();
        let mut cb = TapeBinding::new(&store);
        let tn = check.constant(tokens);
        let router = cb.node(&mut check, &store, layer.router);
        let logits = check.matmul(tn, router).unwrap();
        let soft = check.softmax_along(logits, 1).unwrap();
        for (a, b) in trace.gates.data().iter().zip(check.value(soft).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_k1_with_dominant_logit_selects_single_expert() {
        let mut rng = Prng::new(19);
        let mut store = ParamStore::new();
        let mut layer = SparseMoeLayer::init(&mut store, "sp", 3, 6, 3, 1, &mut rng);
        layer.top_k = 1;
        // router that always massively favors expert 1
        let mut router = T::zeros(vec![3, 3]);
        for row in 0..3 {
            router.data_mut()[row * 3 + 1] = 50.0;
        }
        store.set(layer.router, router);

        let tokens = T::from_rows(&[vec![1.0, 0.5, 0.25]]).unwrap();
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let t = tape.constant(tokens.clone());
        let (out, trace) = sparse_topk_forward(&mut tape, &mut binding, &store, t, &layer).unwrap();
        assert_eq!(trace.gates.at(0, 1), 1.0);
        assert_eq!(trace.expert_applications, 1);

        let mut solo = Tape::new();
        let mut sb = TapeBinding::new(&store);
        let tn = solo.constant(tokens);
        let expected = layer.experts[1].forward(&mut solo, &mut sb, &store, tn).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(solo.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_gates_have_exactly_k_nonzeros_summing_to_one() {
        let mut rng = Prng::new(20);
        for _ in 0..20 {
            let e = 2 + rng.below(5);
            let k = 1 + rng.below(e);
            let m = 1 + rng.below(6);
            let mut store = ParamStore::new();
            let layer = SparseMoeLayer::init(&mut store, "sp", 4, 8, e, k, &mut rng);
            let tokens = rand_tensor(vec![m, 4], &mut rng);
            let mut tape = Tape::new();
            let mut binding = TapeBinding::new(&store);
            let t = tape.constant(tokens);
            let (_, trace) =
                sparse_topk_forward(&mut tape, &mut binding, &store, t, &layer).unwrap();
            assert_eq!(trace.expert_applications, m * k);
            for row in 0..m {
                let gates: Vec<f64> = (0..e).map(|col| trace.gates.at(row, col)).collect();
                let nonzero = gates.iter().filter(|&&g| g != 0.0).count();
                assert_eq!(nonzero, k);
                let sum: f64 = gates.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sparse_rejects_k_out_of_range() {
        let mut rng = Prng::new(21);
        let mut store = ParamStore::<f64>::new();
        let mut layer = SparseMoeLayer::init(&mut store, "sp", 3, 6, 2, 1, &mut rng);
        layer.top_k = 3;
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let t = tape.constant(T::zeros(vec![2, 3]));
        assert!(sparse_topk_forward(&mut tape, &mut binding, &store, t, &layer).is_err());
    }

    #[test]
    fn count_costs_matches_hand_arithmetic() {
        // c=4, h=8, E=2, S=3: expert params 2*(32+8+32+4) = 152, plus 24 subject values
        let omni = count_costs(CostVariant::Omni, 16, 4, 8, 2, 3, 1);
        assert_eq!(omni.param_count, 176);
        assert_eq!(omni.expert_application_count, 2);

        let dense = count_costs(CostVariant::Dense, 16, 4, 8, 4, 3, 1);
        assert_eq!(dense.expert_application_count, 64);
        let omni4 = count_costs(CostVariant::Omni, 16, 4, 8, 4, 3, 1);
        assert_eq!(omni4.expert_application_count, 4);

        // E=1, S=1: omni exceeds dense by exactly c
        let omni1 = count_costs(CostVariant::Omni, 16, 4, 8, 1, 1, 1);
        let dense1 = count_costs(CostVariant::Dense, 16, 4, 8, 1, 1, 1);
        assert_eq!(omni1.param_count - dense1.param_count, 4);
    }

    #[test]
    fn subject_isolation_exact_zero_gradients() {
        let mut rng = Prng::new(22);
        let mut store = ParamStore::new();
        let layer = OmniMoeLayer::init(&mut store, "moe", 4, 8, 3, &[0, 1, 2], false, &mut rng);

        // batch containing subjects 0 and 2 only
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let mut loss_nodes = Vec::new();
        for &s in &[0u32, 2] {
            let tokens = tape.constant(rand_tensor(vec![5, 4], &mut rng));
            let (out, _) = layer.forward(&mut tape, &mut binding, &store, tokens, s).unwrap();
            loss_nodes.push(tape.sum(out).unwrap());
        }
        let total = tape.add(loss_nodes[0], loss_nodes[1]).unwrap();
        let grads = tape.backward(total).unwrap();
        let mut acc = GradAccumulator::new(&store);
        acc.absorb(&binding, &grads);

        assert!(acc.grad_norm(layer.alpha_for(0).unwrap()) > 0.0);
        assert!(acc.grad_norm(layer.alpha_for(2).unwrap()) > 0.0);
        assert_eq!(acc.grad_norm(layer.alpha_for(1).unwrap()), 0.0);
        assert!(acc.get(layer.alpha_for(1).unwrap()).is_none());
    }

    #[test]
    fn full_layer_gradient_check_micro() {
        use crate::gradcheck::finite_difference_check;
        let mut rng = Prng::new(23);
        let (store, layer) = single_subject_layer(4, 8, 2, &mut rng);
        let tokens = rand_tensor(vec![3, 4], &mut rng);

        let loss_of = |st: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new();
            let mut binding = TapeBinding::new(st);
            let t = tape.constant(tokens.clone());
            let (out, _) = layer.forward(&mut tape, &mut binding, st, t, 0).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.value(loss).data()[0]
        };

        // autodiff gradients
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let t = tape.constant(tokens.clone());
        let (out, _) = layer.forward(&mut tape, &mut binding, &store, t, 0).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut acc = GradAccumulator::new(&store);
        acc.absorb(&binding, &grads);

        for id in store.ids() {
            let ad = acc.get_or_zeros(&store, id);
            let report = finite_difference_check(
                |p: &Tensor<f64>| {
                    let mut st = store.clone();
                    st.set(id, p.clone());
                    Ok(loss_of(&st))
                },
                store.value(id),
                &ad,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(
                report.pass,
                "param {} max_rel_err {}",
                store.name(id),
                report.max_rel_err
            );
        }
    }
}
