//! Experiment orchestration: the four-variant ablation, the expert-count
//! sweep, the end-to-end gradient suite, and the split/lump weight-trace
//! export. Independent (variant, seed) runs execute on parallel workers;
//! each run is internally sequential and fully seeded.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck::finite_difference_check;
use crate::moe::{count_costs, CostVariant};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::synth::SyntheticWorld;
use crate::train::{
    batch_loss_and_grads, build_training_bank, evaluate, metrics_csv, metrics_csv_header, train,
    MetricsRow, Model,
};
use rayon::prelude::*;
use std::fmt::Write as _;

const FINAL_EVAL_STREAM: u64 = 0x46494E41; // "FINA"

// ── ablation ────────────────────────────────────────────────────────────

/// The four ablation variants, in presentation order.
pub const ABLATION_LABELS: [&str; 4] = [
    "baseline_mlp",
    "omni_moe_shared_alpha",
    "omni_moe_subject_alpha",
    "omni_moe_subject_alpha_ecphory",
];

fn ablation_cfg(base: &RunConfig, variant_index: usize) -> RunConfig {
    let mut cfg = base.clone();
    match variant_index {
        0 => {
            cfg.variant = "mlp".into();
            cfg.shared_alpha = false;
        }
        1 => {
            cfg.variant = "omni".into();
            cfg.shared_alpha = true;
        }
        // variants 3 and 4 share one trained model
        _ => {
            cfg.variant = "omni".into();
            cfg.shared_alpha = false;
        }
    }
    cfg
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub label: String,
    pub two_way_mean: f64,
    pub two_way_std: f64,
    pub topk_mean: f64,
    pub topk_std: f64,
}

pub struct AblationOutcome {
    /// One final-metrics row per (variant, seed).
    pub rows: Vec<MetricsRow>,
    /// Per-variant mean and sample standard deviation over seeds.
    pub summary: Vec<AblationSummary>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train variants 1-3 for every seed under an identical epoch budget, then
/// rescore variant 3's checkpoints with retrieval enhancement as variant 4.
pub fn ablate<S: Scalar>(
    cfg: &RunConfig,
    world: &SyntheticWorld<S>,
    seeds: &[u64],
) -> Result<AblationOutcome> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablate: need at least one seed".into()));
    }
    let bank = build_training_bank(world)?;
    let epochs = cfg.ablation_epochs;

    let jobs: Vec<(usize, u64)> = (0..3)
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let mut trained: Vec<(usize, u64, Model<S>, MetricsRow)> = jobs
        .into_par_iter()
        .map(|(variant_index, seed)| {
            let run_cfg = ablation_cfg(cfg, variant_index);
            let label = ABLATION_LABELS[variant_index];
            let run_id = format!("ablate_{label}_s{seed}");
            let outcome = train(&run_cfg, world, seed, epochs, &run_id)?;
            let eval_seed = derive_seed(seed ^ FINAL_EVAL_STREAM, variant_index as u64);
            let eval = evaluate(&outcome.model, world, false, None, eval_seed)?;
            let mut row = outcome.history.last().expect("nonempty history").clone();
            row.variant = label.to_string();
            row.two_way_pct = eval.two_way_pct;
            row.topk_retrieval_pct = eval.topk_retrieval_pct;
            row.per_subject_two_way = eval.per_subject_two_way;
            Ok((variant_index, seed, outcome.model, row))
        })
        .collect::<Result<Vec<_>>>()?;
    trained.sort_by_key(|(v, s, _, _)| (*v, *s));

    let mut rows: Vec<MetricsRow> = trained.iter().map(|(_, _, _, row)| row.clone()).collect();

    // variant 4: same checkpoints as variant 3, same evaluation draws,
    // retrieval enhancement switched on
    for (variant_index, seed, model, base_row) in &trained {
        if *variant_index != 2 {
            continue;
        }
        let eval_seed = derive_seed(seed ^ FINAL_EVAL_STREAM, 2);
        let eval = evaluate(model, world, true, Some(&bank), eval_seed)?;
        let mut row = base_row.clone();
        row.run_id = format!("ablate_{}_s{seed}", ABLATION_LABELS[3]);
        row.variant = ABLATION_LABELS[3].to_string();
        row.two_way_pct = eval.two_way_pct;
        row.topk_retrieval_pct = eval.topk_retrieval_pct;
        row.per_subject_two_way = eval.per_subject_two_way;
        rows.push(row);
    }

    let mut summary = Vec::with_capacity(4);
    for label in ABLATION_LABELS {
        let two_way: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == label)
            .map(|r| r.two_way_pct)
            .collect();
        let topk: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == label)
            .map(|r| r.topk_retrieval_pct)
            .collect();
        let (two_way_mean, two_way_std) = mean_std(&two_way);
        let (topk_mean, topk_std) = mean_std(&topk);
        summary.push(AblationSummary {
            label: label.to_string(),
            two_way_mean,
            two_way_std,
            topk_mean,
            topk_std,
        });
    }
    Ok(AblationOutcome { rows, summary })
}

pub fn ablation_rows_csv(outcome: &AblationOutcome, subjects: usize) -> String {
    metrics_csv(&outcome.rows, subjects)
}

pub fn ablation_summary_csv(outcome: &AblationOutcome) -> String {
    let mut out = String::from("variant,two_way_mean,two_way_std,topk_mean,topk_std\n");
    for s in &outcome.summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.label, s.two_way_mean, s.two_way_std, s.topk_mean, s.topk_std
        );
    }
    out
}

// ── expert sweep ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub variant: String,
    pub expert_count: usize,
    pub seed: u64,
    pub two_way_pct: f64,
    pub topk_retrieval_pct: f64,
    /// Whole-model parameter count.
    pub param_count: usize,
    /// Mixture-layer parameter count from the static cost model.
    pub layer_param_count: usize,
    pub expert_application_count: usize,
    pub dispatch_flops: usize,
}

/// Train {omni, dense, sparse} at each expert count under an equal epoch
/// budget and report quality next to the static cost model.
pub fn sweep_experts<S: Scalar>(
    cfg: &RunConfig,
    world: &SyntheticWorld<S>,
    expert_counts: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if expert_counts.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep_experts: empty grid".into()));
    }
    let variants = ["omni", "dense", "sparse"];
    let jobs: Vec<(&str, usize, u64)> = variants
        .iter()
        .flat_map(|&v| {
            expert_counts
                .iter()
                .flat_map(move |&e| seeds.iter().map(move |&s| (v, e, s)))
        })
        .collect();
    let mut rows: Vec<SweepRow> = jobs
        .into_par_iter()
        .map(|(variant, expert_count, seed)| {
            let mut run_cfg = cfg.clone();
            run_cfg.variant = variant.to_string();
            run_cfg.shared_alpha = false;
            run_cfg.expert_count = expert_count;
            run_cfg.sparse_top_k = run_cfg.sparse_top_k.min(expert_count);
            let run_id = format!("sweep_{variant}_E{expert_count}_s{seed}");
            let outcome = train(&run_cfg, world, seed, cfg.sweep_epochs, &run_id)?;
            let eval_seed = derive_seed(seed ^ FINAL_EVAL_STREAM, expert_count as u64);
            let eval = evaluate(&outcome.model, world, false, None, eval_seed)?;
            let cost_variant = match variant {
                "omni" => CostVariant::Omni,
                "dense" => CostVariant::Dense,
                _ => CostVariant::Sparse,
            };
            let costs = count_costs(
                cost_variant,
                run_cfg.patches,
                run_cfg.model_dim,
                run_cfg.hidden_dim,
                expert_count,
                run_cfg.subjects,
                run_cfg.sparse_top_k,
            );
            Ok(SweepRow {
                variant: variant.to_string(),
                expert_count,
                seed,
                two_way_pct: eval.two_way_pct,
                topk_retrieval_pct: eval.topk_retrieval_pct,
                param_count: outcome.model.param_count(),
                layer_param_count: costs.param_count,
                expert_application_count: costs.expert_application_count,
                dispatch_flops: costs.dispatch_flops,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        (a.variant.as_str(), a.expert_count, a.seed)
            .cmp(&(b.variant.as_str(), b.expert_count, b.seed))
    });
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "variant,expert_count,seed,two_way_pct,topk_retrieval_pct,param_count,layer_param_count,expert_application_count,dispatch_flops\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.expert_count,
            r.seed,
            r.two_way_pct,
            r.topk_retrieval_pct,
            r.param_count,
            r.layer_param_count,
            r.expert_application_count,
            r.dispatch_flops
        );
    }
    out
}

// ── gradient suite ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ClassReport {
    pub variant: String,
    pub class: String,
    pub parameters_checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn parameter_class(name: &str) -> &'static str {
    if name.starts_with("patch") || name == "pos" {
        "embedding"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains(".ln") {
        "layer_norm"
    } else if name.contains(".ffn.") {
        "ffn"
    } else if name.contains(".moe.alpha") {
        "subject_alpha"
    } else if name.contains(".moe.router") {
        "router"
    } else if name.contains(".moe.expert") {
        "experts"
    } else if name.starts_with("head.") {
        "heads"
    } else {
        "other"
    }
}

fn gradient_suite_cfg(variant: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.variant = variant.to_string();
    cfg.shared_alpha = false;
    cfg.patches = 4;
    cfg.model_dim = 8;
    cfg.hidden_dim = 16;
    cfg.blocks = 2;
    cfg.moe_blocks = 1;
    cfg.image_tokens = 2;
    cfg.text_tokens = 2;
    cfg.expert_count = 2;
    cfg.sparse_top_k = 1;
    cfg.subjects = 2;
    cfg.stimuli = 8;
    cfg.latent_dim = 4;
    cfg.voxels_min = 16;
    cfg.voxels_max = 32;
    cfg.train_fraction = 0.75;
    cfg
}

/// Check the full training path — encoder, mixture layers, heads, and the
/// temperature-scaled bidirectional loss — against central finite
/// differences, parameter class by parameter class, for each mixture
/// variant. Gradients flow through the exact two-stage layout the training
/// loop uses.
pub fn gradient_suite(step: f64, tol: f64) -> Result<Vec<ClassReport>> {
    let mut reports = Vec::new();
    for variant in ["omni", "dense", "sparse", "mlp"] {
        let cfg = gradient_suite_cfg(variant);
        let world = crate::synth::generate_world::<f64>(&cfg.world_config())?;
        let model = Model::<f64>::init(&cfg, &world, 17)?;
        // mixed-subject micro-batch: both subjects, two stimuli each
        let mut batch = Vec::new();
        for subject in world.subject_ids() {
            for stimulus in [0u64, 1] {
                batch.push(world.sample(subject, stimulus, 0, model.padded_len)?);
            }
        }

        let (_, grads) = batch_loss_and_grads(&model, &batch, true)?;
        let grads = grads.expect("gradients requested");

        let mut class_errs: std::collections::BTreeMap<&'static str, (usize, f64)> =
            std::collections::BTreeMap::new();
        for id in model.store.ids() {
            let ad = grads.get_or_zeros(&model.store, id);
            let report = finite_difference_check(
                |p| {
                    let mut probe = model.clone();
                    probe.store.set(id, p.clone());
                    let (loss, _) = batch_loss_and_grads(&probe, &batch, false)?;
                    Ok(loss)
                },
                model.store.value(id),
                &ad,
                step,
                tol,
            )?;
            let class = parameter_class(model.store.name(id));
            let entry = class_errs.entry(class).or_insert((0, 0.0));
            entry.0 += 1;
            entry.1 = entry.1.max(report.max_rel_err);
        }
        for (class, (count, max_rel_err)) in class_errs {
            reports.push(ClassReport {
                variant: variant.to_string(),
                class: class.to_string(),
                parameters_checked: count,
                max_rel_err,
                pass: max_rel_err < tol,
            });
        }
    }
    Ok(reports)
}

// ── weight-trace export ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct WeightTraceRow {
    pub subject: u32,
    pub expert: usize,
    pub split_weight_sum: f64,
    pub lump_weight_sum: f64,
}

/// Sum split and lump weights over the token dimension, accumulated across
/// the test split and all mixture blocks, per subject and expert.
pub fn dump_weights<S: Scalar>(
    model: &Model<S>,
    world: &SyntheticWorld<S>,
) -> Result<Vec<WeightTraceRow>> {
    let expert_count = model.encoder.cfg.expert_count;
    let (_, test_stimuli) = world.split()?;
    let mut rows = Vec::new();
    for subject in world.subject_ids() {
        let mut split_sums = vec![0.0; expert_count];
        let mut lump_sums = vec![0.0; expert_count];
        let mut saw_traces = false;
        for &stimulus in &test_stimuli {
            for trial in 0..world.cfg.test_trials {
                let sample = world.sample(subject, stimulus, trial, model.padded_len)?;
                let pred = model.predict(&sample)?;
                for (_, trace) in &pred.moe_traces {
                    saw_traces = true;
                    let (m, e) = trace.split_weights.dims2()?;
                    for expert in 0..e {
                        for token in 0..m {
                            split_sums[expert] += trace.split_weights.at(token, expert).as_f64();
                            lump_sums[expert] += trace.lump_weights.at(token, expert).as_f64();
                        }
                    }
                }
            }
        }
        if !saw_traces {
            return Err(Error::InvalidArgument(
                "dump_weights: model variant has no split/lump weights".into(),
            ));
        }
        for expert in 0..expert_count {
            rows.push(WeightTraceRow {
                subject,
                expert,
                split_weight_sum: split_sums[expert],
                lump_weight_sum: lump_sums[expert],
            });
        }
    }
    Ok(rows)
}

pub fn weight_trace_csv(rows: &[WeightTraceRow]) -> String {
    let mut out = String::from("subject,expert,split_weight_sum,lump_weight_sum\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.subject, r.expert, r.split_weight_sum, r.lump_weight_sum
        );
    }
    out
}

/// Header shared by the run-history and ablation CSV files.
pub fn history_csv_header(subjects: usize) -> String {
    metrics_csv_header(subjects)
}
