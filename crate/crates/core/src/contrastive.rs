//! Bidirectional contrastive alignment loss.
//!
//! Multi-token embeddings are flattened to vectors and L2-normalized, the
//! batch similarity matrix is scaled by `1/temperature`, and each sample
//! contributes two terms: the negative log-softmax of its positive entry
//! over the row (prediction against all targets) and over the column
//! (target against all predictions). The returned scalar is the batch mean
//! of those per-sample sums, so a batch of one — no negatives — costs zero.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.07 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Flatten each embedding to a row, normalize, and stack into a `B x D`
/// matrix node.
fn normalized_rows<S: Scalar>(tape: &mut Tape<S>, batch: &[NodeId]) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(batch.len());
    for &emb in batch {
        let numel = tape.value(emb).numel();
        let flat = tape.reshape(emb, vec![1, numel])?;
        rows.push(tape.l2_normalize_rows(flat)?);
    }
    tape.concat_rows(&rows)
}

/// Cosine similarity matrix between two embedding batches.
pub fn similarity_matrix<S: Scalar>(
    tape: &mut Tape<S>,
    pred: &[NodeId],
    target: &[NodeId],
) -> Result<NodeId> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "similarity_matrix: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let p = normalized_rows(tape, pred)?;
    let t = normalized_rows(tape, target)?;
    let tt = tape.transpose(t)?;
    tape.matmul(p, tt)
}

/// Both directional terms, evaluated from a precomputed similarity matrix.
pub fn infonce_from_similarities<S: Scalar>(
    tape: &mut Tape<S>,
    sims: NodeId,
    cfg: &ContrastiveConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let (b, b2) = tape.value(sims).dims2()?;
    if b != b2 {
        return Err(Error::BadShape {
            op: "infonce_from_similarities",
            shape: tape.value(sims).shape().to_vec(),
            reason: "similarity matrix must be square".into(),
        });
    }
    let logits = tape.mul_scalar(sims, 1.0 / cfg.temperature)?;
    let over_targets = tape.log_softmax_along(logits, 1)?;
    let over_preds = tape.log_softmax_along(logits, 0)?;
    let mask = tape.constant(Tensor::eye(b));
    let pos_rows = tape.mul(over_targets, mask)?;
    let pos_cols = tape.mul(over_preds, mask)?;
    let sum_rows = tape.sum(pos_rows)?;
    let sum_cols = tape.sum(pos_cols)?;
    let total = tape.add(sum_rows, sum_cols)?;
    tape.mul_scalar(total, -1.0 / b as f64)
}

/// Batch-mean bidirectional loss between prediction and target embeddings.
pub fn bidirectional_infonce<S: Scalar>(
    tape: &mut Tape<S>,
    pred: &[NodeId],
    target: &[NodeId],
    cfg: &ContrastiveConfig,
) -> Result<NodeId> {
    let sims = similarity_matrix(tape, pred, target)?;
    infonce_from_similarities(tape, sims, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    type T = Tensor<f64>;

    fn leaf_batch(tape: &mut Tape<f64>, rows: &[Vec<f64>], grad: bool) -> Vec<NodeId> {
        rows.iter()
            .map(|r| {
                let t = T::new(vec![1, r.len()], r.clone()).unwrap();
                if grad {
                    tape.leaf(t.with_grad())
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    #[test]
    fn batch_of_one_costs_zero() {
        for tau in [0.07, 0.5, 3.0] {
            let mut tape = Tape::new();
            let pred = leaf_batch(&mut tape, &[vec![0.3, -0.4, 1.0]], false);
            let target = leaf_batch(&mut tape, &[vec![1.0, 2.0, 3.0]], false);
            let cfg = ContrastiveConfig { temperature: tau };
            let loss = bidirectional_infonce(&mut tape, &pred, &target, &cfg).unwrap();
            assert_eq!(tape.value(loss).data()[0], 0.0);
        }
    }

    #[test]
    fn orthonormal_pair_batch_matches_hand_value() {
        // pred = target, two orthonormal rows, tau = 1:
        // per-sample loss = 2 ln(1 + e^-1)
        let mut tape = Tape::new();
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let pred = leaf_batch(&mut tape, &rows, false);
        let target = leaf_batch(&mut tape, &rows, false);
        let cfg = ContrastiveConfig { temperature: 1.0 };
        let loss = bidirectional_infonce(&mut tape, &pred, &target, &cfg).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn swapping_pred_and_target_is_exactly_symmetric() {
        let mut rng = Prng::new(31);
        for _ in 0..20 {
            let b = 2 + rng.below(4);
            let rows_a: Vec<Vec<f64>> =
                (0..b).map(|_| (0..6).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect();
            let rows_b: Vec<Vec<f64>> =
                (0..b).map(|_| (0..6).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect();
            let cfg = ContrastiveConfig::default();

            let mut tape = Tape::new();
            let pa = leaf_batch(&mut tape, &rows_a, false);
            let pb = leaf_batch(&mut tape, &rows_b, false);
            let forward = bidirectional_infonce(&mut tape, &pa, &pb, &cfg).unwrap();
            let backward = bidirectional_infonce(&mut tape, &pb, &pa, &cfg).unwrap();
            assert_eq!(tape.value(forward).data()[0], tape.value(backward).data()[0]);
        }
    }

    #[test]
    fn temperature_scale_equals_logit_scale() {
        let mut rng = Prng::new(32);
        let rows_a: Vec<Vec<f64>> =
            (0..3).map(|_| (0..5).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect();
        let rows_b: Vec<Vec<f64>> =
            (0..3).map(|_| (0..5).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect();
        for k in [0.5, 2.0, 7.0] {
            let tau = 0.07;
            let mut tape = Tape::new();
            let pa = leaf_batch(&mut tape, &rows_a, false);
            let pb = leaf_batch(&mut tape, &rows_b, false);

            let scaled_cfg = ContrastiveConfig { temperature: tau * k };
            let via_temperature =
                bidirectional_infonce(&mut tape, &pa, &pb, &scaled_cfg).unwrap();

            let sims = similarity_matrix(&mut tape, &pa, &pb).unwrap();
            let shrunk = tape.mul_scalar(sims, 1.0 / k).unwrap();
            let base_cfg = ContrastiveConfig { temperature: tau };
            let via_logits = infonce_from_similarities(&mut tape, shrunk, &base_cfg).unwrap();

            let a = tape.value(via_temperature).data()[0];
            let b = tape.value(via_logits).data()[0];
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn loss_is_nonnegative_on_random_batches() {
        let mut rng = Prng::new(33);
        for _ in 0..30 {
            let b = 1 + rng.below(5);
            let rows_a: Vec<Vec<f64>> =
                (0..b).map(|_| (0..4).map(|_| rng.uniform_in(-2.0, 2.0)).collect()).collect();
            let rows_b: Vec<Vec<f64>> =
                (0..b).map(|_| (0..4).map(|_| rng.uniform_in(-2.0, 2.0)).collect()).collect();
            let mut tape = Tape::new();
            let pa = leaf_batch(&mut tape, &rows_a, false);
            let pb = leaf_batch(&mut tape, &rows_b, false);
            let loss =
                bidirectional_infonce(&mut tape, &pa, &pb, &ContrastiveConfig::default()).unwrap();
            assert!(tape.value(loss).data()[0] >= 0.0);
        }
    }

    #[test]
    fn loss_strictly_decreases_as_positive_similarity_rises() {
        // pred_0 = cos(theta) e1 + sin(theta) e3 keeps every other similarity
        // fixed while the positive one grows as theta shrinks.
        let cfg = ContrastiveConfig { temperature: 0.3 };
        let mut last = f64::INFINITY;
        for theta in [1.2f64, 0.9, 0.6, 0.3, 0.05] {
            let mut tape = Tape::new();
            let pred = leaf_batch(
                &mut tape,
                &[vec![theta.cos(), 0.0, theta.sin()], vec![0.0, 1.0, 0.0]],
                false,
            );
            let target =
                leaf_batch(&mut tape, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], false);
            let loss = bidirectional_infonce(&mut tape, &pred, &target, &cfg).unwrap();
            let value = tape.value(loss).data()[0];
            assert!(value < last, "loss {value} did not drop below {last}");
            last = value;
        }
    }

    #[test]
    fn gradient_check_micro_batch() {
        use crate::gradcheck::finite_difference_check;
        let mut rng = Prng::new(34);
        let rows: Vec<Vec<f64>> =
            (0..3).map(|_| (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect();
        let targets: Vec<Vec<f64>> =
            (0..3).map(|_| (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect();
        let cfg = ContrastiveConfig::default();

        let loss_of = |flat: &T| -> f64 {
            let mut tape = Tape::new();
            let pred: Vec<NodeId> = (0..3)
                .map(|i| {
                    let row = flat.data()[i * 4..(i + 1) * 4].to_vec();
                    tape.constant(T::new(vec![1, 4], row).unwrap())
                })
                .collect();
            let targ = leaf_batch(&mut tape, &targets, false);
            let loss = bidirectional_infonce(&mut tape, &pred, &targ, &cfg).unwrap();
            tape.value(loss).data()[0]
        };

        // autodiff gradient wrt all prediction coordinates
        let mut tape = Tape::new();
        let pred = leaf_batch(&mut tape, &rows, true);
        let targ = leaf_batch(&mut tape, &targets, false);
        let loss = bidirectional_infonce(&mut tape, &pred, &targ, &cfg).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut ad_flat = Vec::new();
        for &p in &pred {
            ad_flat.extend_from_slice(grads.get(p).unwrap().data());
        }
        let ad = T::new(vec![3, 4], ad_flat).unwrap();

        let flat0 = T::new(vec![3, 4], rows.concat()).unwrap();
        let report =
            finite_difference_check(|p: &T| Ok(loss_of(p)), &flat0, &ad, 1e-6, 1e-4).unwrap();
        assert!(report.pass, "max_rel_err {}", report.max_rel_err);
    }

    #[test]
    fn zero_norm_embedding_is_an_error() {
        let mut tape = Tape::new();
        let pred = leaf_batch(&mut tape, &[vec![0.0, 0.0]], false);
        let target = leaf_batch(&mut tape, &[vec![1.0, 0.0]], false);
        assert!(
            bidirectional_infonce(&mut tape, &pred, &target, &ContrastiveConfig::default())
                .is_err()
        );
    }

    #[test]
    fn rejects_non_positive_temperature() {
        let cfg = ContrastiveConfig { temperature: 0.0 };
        assert!(cfg.validate().is_err());
    }
}
