//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with its measured numbers. Run with
//! `cargo test -p omnimoe --test acceptance -- --nocapture` to see them.

use omnimoe::config::RunConfig;
use omnimoe::ecphory::{cosine_topk, enhance, SimilarityMode};
use omnimoe::encoder::MoeVariant;
use omnimoe::harness::{ablate, gradient_suite, ABLATION_LABELS};
use omnimoe::moe::{
    count_costs, lump_weights, sparse_topk_forward, split_weights, CostVariant, OmniMoeLayer,
    SparseMoeLayer,
};
use omnimoe::params::{GradAccumulator, ParamStore, TapeBinding};
use omnimoe::rng::Prng;
use omnimoe::synth::generate_world;
use omnimoe::tape::Tape;
use omnimoe::train::{batch_loss_and_grads, metrics_csv, train, Model};
use omnimoe::Tensor64;
use std::time::Instant;

fn rand_tensor(shape: Vec<usize>, rng: &mut Prng) -> Tensor64 {
    Tensor64::randn(shape, 1.0, rng)
}

/// Criterion 1: end-to-end autodiff matches central finite differences at
/// max relative error < 1e-4 (step 1e-6) over every parameter class, within
/// two minutes.
#[test]
fn acceptance_01_gradient_suite() {
    let started = Instant::now();
    let reports = gradient_suite(1e-6, 1e-4).expect("gradient suite runs");
    let elapsed = started.elapsed();
    let mut worst: f64 = 0.0;
    for report in &reports {
        assert!(
            report.pass,
            "[FAIL] gradient suite: {}/{} max_rel_err {:.3e}",
            report.variant, report.class, report.max_rel_err
        );
        worst = worst.max(report.max_rel_err);
    }
    let classes: Vec<&str> = reports.iter().map(|r| r.class.as_str()).collect();
    for required in ["experts", "subject_alpha", "attention", "heads", "embedding"] {
        assert!(classes.contains(&required), "class {required} missing from suite");
    }
    assert!(
        elapsed.as_secs() < 120,
        "[FAIL] gradient suite took {elapsed:?}, budget is 2 minutes"
    );
    println!(
        "[PASS] criterion 1 gradient suite: {} classes, worst rel err {:.3e}, {:?}",
        reports.len(),
        worst,
        elapsed
    );
}

/// Criterion 2: split-weight columns and lump-weight rows sum to one within
/// 1e-12 over ten thousand randomized inputs.
#[test]
fn acceptance_02_stochasticity() {
    let mut rng = Prng::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let m = 1 + rng.below(8);
        let e = 1 + rng.below(8);
        let scores = rand_tensor(vec![m, e], &mut rng);
        let mut tape = Tape::new();
        let s = tape.constant(scores);
        let split = split_weights(&mut tape, s).unwrap();
        let lump = lump_weights(&mut tape, s).unwrap();
        for col in 0..e {
            let sum: f64 = (0..m).map(|r| tape.value(split).at(r, col)).sum();
            worst = worst.max((sum - 1.0).abs());
            assert!((sum - 1.0).abs() < 1e-12, "[FAIL] split column sum {sum}");
        }
        for row in 0..m {
            let sum: f64 = (0..e).map(|c| tape.value(lump).at(row, c)).sum();
            worst = worst.max((sum - 1.0).abs());
            assert!((sum - 1.0).abs() < 1e-12, "[FAIL] lump row sum {sum}");
        }
    }
    println!("[PASS] criterion 2 stochasticity: 10^4 inputs, worst deviation {worst:.2e}");
}

/// Criterion 3: across 100 randomized mixed-subject batches, gradients on
/// absent subjects' routing matrices are exactly zero and present subjects'
/// are nonzero.
#[test]
fn acceptance_03_subject_isolation() {
    let mut rng = Prng::new(77);
    let subjects: Vec<u32> = vec![0, 1, 2];
    for round in 0..100 {
        let c = 4 + rng.below(4);
        let mut store = ParamStore::<f64>::new();
        let layer =
            OmniMoeLayer::init(&mut store, "moe", c, 2 * c, 2 + rng.below(3), &subjects, false, &mut rng);

        // batch from two of the three subjects
        let absent = rng.below(3) as u32;
        let present: Vec<u32> = subjects.iter().copied().filter(|&s| s != absent).collect();

        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let mut loss_terms = Vec::new();
        for &s in &present {
            let tokens = tape.constant(rand_tensor(vec![2 + rng.below(5), c], &mut rng));
            let (out, _) = layer.forward(&mut tape, &mut binding, &store, tokens, s).unwrap();
            let sq = tape.mul(out, out).unwrap();
            loss_terms.push(tape.sum(sq).unwrap());
        }
        let total = tape.add(loss_terms[0], loss_terms[1]).unwrap();
        let grads = tape.backward(total).unwrap();
        let mut acc = GradAccumulator::new(&store);
        acc.absorb(&binding, &grads);

        let absent_norm = acc.grad_norm(layer.alpha_for(absent).unwrap());
        assert_eq!(absent_norm, 0.0, "[FAIL] round {round}: absent subject {absent} got gradient");
        for &s in &present {
            assert!(
                acc.grad_norm(layer.alpha_for(s).unwrap()) > 0.0,
                "[FAIL] round {round}: present subject {s} got no gradient"
            );
        }
    }
    println!("[PASS] criterion 3 subject isolation: 100 mixed batches, absent-alpha norms exactly 0");
}

/// Criterion 4: permuting the input token rows permutes the output rows
/// exactly, over 100 randomized instances.
#[test]
fn acceptance_04_permutation_equivariance() {
    let mut rng = Prng::new(4096);
    for round in 0..100 {
        let m = 2 + rng.below(7); // up to 8 tokens
        let c = 2 + rng.below(5);
        let e = 1 + rng.below(4);
        let mut store = ParamStore::<f64>::new();
        let layer = OmniMoeLayer::init(&mut store, "moe", c, 2 * c, e, &[0], false, &mut rng);
        let tokens = rand_tensor(vec![m, c], &mut rng);

        let mut perm: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut perm);
        let mut permuted = Tensor64::zeros(vec![m, c]);
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
                    "[FAIL] round {round}: row permutation not exact"
                );
            }
        }
    }
    println!("[PASS] criterion 4 permutation equivariance: 100 instances, exact row equality");
}

/// Full-scan retrieval oracle: score everything, sort by score descending
/// with ties broken toward the lower stimulus id.
fn brute_force_topk(
    query: &Tensor64,
    entries: &[(u64, Tensor64)],
    k: usize,
    mode: SimilarityMode,
) -> Vec<(u64, f64)> {
    let pick = |emb: &Tensor64| -> Vec<f64> {
        match mode {
            SimilarityMode::Token(row) => {
                let (_, cols) = emb.dims2().unwrap();
                emb.data()[row * cols..(row + 1) * cols].to_vec()
            }
            SimilarityMode::Flatten => emb.data().to_vec(),
        }
    };
    let q = pick(query);
    let mut scored: Vec<(u64, f64)> = entries
        .iter()
        .map(|(id, emb)| {
            let m = pick(emb);
            let dot: f64 = q.iter().zip(&m).map(|(a, b)| a * b).sum();
            let nq: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nm: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            (*id, dot / (nq * nm))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Criterion 5: cosine_topk reproduces the brute-force oracle, scores and
/// tie-break order included, over 1000 random banks of up to 10^4 entries.
#[test]
fn acceptance_05_retrieval_oracle() {
    let mut rng = Prng::new(555);
    let mut largest = 0;
    for round in 0..1000 {
        // log-uniform sizes so both tiny and 10^4-entry banks appear
        let size = if round < 5 {
            10_000
        } else {
            let exponent = rng.uniform() * 4.0;
            (10f64.powf(exponent) as usize).clamp(1, 10_000)
        };
        largest = largest.max(size);
        let tokens = 1 + rng.below(2);
        let dim = 2 + rng.below(3);
        let quantize = round % 3 == 0; // force plenty of exact score ties
        let entries: Vec<(u64, Tensor64)> = (0..size)
            .map(|i| {
                let mut emb = rand_tensor(vec![tokens, dim], &mut rng);
                if quantize {
                    for v in emb.data_mut() {
                        *v = v.signum();
                    }
                }
                (i as u64, emb)
            })
            .collect();
        let query = rand_tensor(vec![tokens, dim], &mut rng);
        let k = 1 + rng.below(size.min(12));
        let mode = if round % 2 == 0 { SimilarityMode::Token(0) } else { SimilarityMode::Flatten };
        let got = cosine_topk(&query, &entries, k, mode).unwrap();
        let want = brute_force_topk(&query, &entries, k, mode);
        assert_eq!(got, want, "[FAIL] round {round}: top-K disagrees with the full scan");
    }
    println!("[PASS] criterion 5 retrieval oracle: 1000 banks, largest {largest} entries");
}

/// Criterion 6: the mix-up endpoints are bit-exact.
#[test]
fn acceptance_06_ecphory_endpoints() {
    let mut rng = Prng::new(66);
    for _ in 0..100 {
        let shape = vec![1 + rng.below(4), 1 + rng.below(6)];
        let pred = rand_tensor(shape.clone(), &mut rng);
        let memory = rand_tensor(shape, &mut rng);
        let identity = enhance(&pred, &memory, 1.0).unwrap();
        let copy = enhance(&pred, &memory, 0.0).unwrap();
        for i in 0..pred.numel() {
            assert_eq!(identity.data()[i].to_bits(), pred.data()[i].to_bits());
            assert_eq!(copy.data()[i].to_bits(), memory.data()[i].to_bits());
        }
    }
    println!("[PASS] criterion 6 retrieval-enhancement endpoints bit-exact");
}

/// Criterion 7: on the default synthetic world, averaged over three seeds,
/// two-way identification strictly increases from the shared-MLP baseline
/// through the subject-conditioned mixture (#1 -> #3) and again when
/// retrieval enhancement is switched on (#3 -> #4), with the full model at
/// least 10 percentage points above the baseline, all inside 15 minutes.
#[test]
fn acceptance_07_ablation_trend() {
    let started = Instant::now();
    let cfg = RunConfig::default();
    let world = generate_world::<f64>(&cfg.world_config()).expect("default world");
    let seeds: Vec<u64> = (0..cfg.ablation_seeds as u64).map(|i| cfg.seed + i).collect();
    let outcome = ablate(&cfg, &world, &seeds).expect("ablation runs");
    let elapsed = started.elapsed();

    let mean = |label: &str| -> f64 {
        outcome
            .summary
            .iter()
            .find(|s| s.label == label)
            .expect("variant present")
            .two_way_mean
    };
    let m1 = mean(ABLATION_LABELS[0]);
    let m2 = mean(ABLATION_LABELS[1]);
    let m3 = mean(ABLATION_LABELS[2]);
    let m4 = mean(ABLATION_LABELS[3]);
    println!(
        "ablation means over {} seeds: baseline {m1:.2}%, shared-alpha {m2:.2}%, subject-alpha {m3:.2}%, +retrieval {m4:.2}% ({elapsed:?})",
        seeds.len()
    );
    assert!(m1 < m2, "[FAIL] shared-alpha mixture {m2:.2}% does not beat baseline {m1:.2}%");
    assert!(m2 < m3, "[FAIL] subject-alpha {m3:.2}% does not beat shared-alpha {m2:.2}%");
    assert!(m3 < m4, "[FAIL] retrieval enhancement {m4:.2}% does not beat raw {m3:.2}%");
    assert!(
        m4 - m1 >= 10.0,
        "[FAIL] full model {m4:.2}% exceeds baseline {m1:.2}% by {:.2} < 10 points",
        m4 - m1
    );
    assert!(
        elapsed.as_secs() < 900,
        "[FAIL] ablation took {elapsed:?}, budget is 15 minutes"
    );
    println!(
        "[PASS] criterion 7 ablation trend: {m1:.2} < {m2:.2} < {m3:.2} < {m4:.2}, gap {:.2} pts, {elapsed:?}",
        m4 - m1
    );
}

/// Criterion 8: the static cost model. Expert applications per forward are
/// exactly E for the omni mixture, m*E dense, m*K sparse; the omni parameter
/// count exceeds dense by exactly S*c*E.
#[test]
fn acceptance_08_cost_accounting() {
    let (m, c, h, s, k) = (16, 32, 128, 4, 2);
    for e in [2, 4, 8] {
        let omni = count_costs(CostVariant::Omni, m, c, h, e, s, k);
        let dense = count_costs(CostVariant::Dense, m, c, h, e, s, k);
        let sparse = count_costs(CostVariant::Sparse, m, c, h, e, s, k);
        assert_eq!(omni.expert_application_count, e);
        assert_eq!(dense.expert_application_count, m * e);
        assert_eq!(sparse.expert_application_count, m * k);
        assert_eq!(omni.param_count - dense.param_count, s * c * e);
    }

    // the forward-pass counters report the same numbers the formulas give
    let mut rng = Prng::new(88);
    for e in [2usize, 4] {
        let mut store = ParamStore::<f64>::new();
        let layer = OmniMoeLayer::init(&mut store, "moe", 6, 12, e, &[0], false, &mut rng);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let tokens = tape.constant(rand_tensor(vec![16, 6], &mut rng));
        let (_, trace) = layer.forward(&mut tape, &mut binding, &store, tokens, 0).unwrap();
        assert_eq!(trace.expert_applications, e, "omni counter independent of m");
    }
    println!("[PASS] criterion 8 cost accounting: E in {{2,4,8}} matches formulas");
}

/// Criterion 9: sparse gating yields exactly K nonzero gates per token,
/// summing to one within 1e-12.
#[test]
fn acceptance_09_sparse_contract() {
    let mut rng = Prng::new(909);
    for round in 0..50 {
        let c = 3 + rng.below(4);
        let e = 2 + rng.below(6);
        let k = 1 + rng.below(e);
        let m = 1 + rng.below(8);
        let mut store = ParamStore::<f64>::new();
        let layer = SparseMoeLayer::init(&mut store, "sp", c, 2 * c, e, k, &mut rng);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let tokens = tape.constant(rand_tensor(vec![m, c], &mut rng));
        let (_, trace) =
            sparse_topk_forward(&mut tape, &mut binding, &store, tokens, &layer).unwrap();
        for row in 0..m {
            let gates: Vec<f64> = (0..e).map(|col| trace.gates.at(row, col)).collect();
            let nonzero = gates.iter().filter(|&&g| g != 0.0).count();
            assert_eq!(nonzero, k, "[FAIL] round {round}: {nonzero} nonzero gates, wanted {k}");
            let sum: f64 = gates.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "[FAIL] round {round}: gate sum {sum}");
        }
    }
    println!("[PASS] criterion 9 sparse contract: exactly K gates summing to 1 within 1e-12");
}

/// Criterion 10: identical seed and config give bit-identical checkpoints
/// and metrics CSVs.
#[test]
fn acceptance_10_reproducibility() {
    let mut cfg = RunConfig::default();
    cfg.patches = 4;
    cfg.model_dim = 8;
    cfg.hidden_dim = 16;
    cfg.blocks = 2;
    cfg.moe_blocks = 1;
    cfg.image_tokens = 2;
    cfg.text_tokens = 2;
    cfg.expert_count = 2;
    cfg.subjects = 2;
    cfg.stimuli = 16;
    cfg.latent_dim = 4;
    cfg.voxels_min = 12;
    cfg.voxels_max = 24;
    cfg.batch_size = 8;
    cfg.eval_distractor_draws = 4;
    cfg.train_fraction = 0.75;
    let world = generate_world::<f64>(&cfg.world_config()).unwrap();

    let run = || {
        let outcome = train(&cfg, &world, 42, 2, "repro").unwrap();
        let dir = std::env::temp_dir().join(format!("omnimoe_accept_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("ckpt_{}.psym", Prng::new(outcome.history.len() as u64).next_u64()));
        outcome.model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::remove_file(&path).ok();
        (bytes, metrics_csv(&outcome.history, cfg.subjects))
    };
    let (bytes_a, csv_a) = run();
    let (bytes_b, csv_b) = run();
    assert_eq!(bytes_a, bytes_b, "[FAIL] checkpoint bytes differ between identical runs");
    assert_eq!(csv_a, csv_b, "[FAIL] metrics CSVs differ between identical runs");

    // the restored model reproduces the variant structure it was saved with
    let restored = {
        let dir = std::env::temp_dir().join(format!("omnimoe_accept_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt_restore.psym");
        let outcome = train(&cfg, &world, 42, 1, "repro").unwrap();
        outcome.model.save(&path).unwrap();
        let model = Model::<f64>::from_checkpoint(&path, &world).unwrap();
        std::fs::remove_file(&path).ok();
        model
    };
    assert!(matches!(restored.encoder.cfg.variant, MoeVariant::Omni { .. }));
    println!("[PASS] criterion 10 reproducibility: bit-identical checkpoints and CSVs");
}
