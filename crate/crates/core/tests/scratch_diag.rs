// temporary diagnostic - delete before finalizing
use omnimoe::config::RunConfig;
use omnimoe::ecphory::{cosine_topk, SimilarityMode};
use omnimoe::synth::generate_world;
use omnimoe::train::{build_training_bank, train, Model};

fn flat(t: &omnimoe::Tensor64) -> Vec<f64> {
    t.data().to_vec()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

#[test]
#[ignore]
fn retrieval_geometry() {
    let mut cfg = RunConfig::default();
    cfg.noise_min = env_f64("D_NOISE_MIN", 2.0);
    cfg.noise_max = env_f64("D_NOISE_MAX", 3.0);
    cfg.stimulus_clusters = env_f64("D_CLUSTERS", 0.0) as usize;
    cfg.cluster_spread = env_f64("D_SPREAD", 0.3);
    cfg.latent_manifold_dim = env_f64("D_MANIFOLD", 3.0) as usize;
    cfg.manifold_jitter = env_f64("D_JITTER", 0.05);
    cfg.dead_voxel_fraction = env_f64("D_DEAD", 0.4);
    cfg.eval_distractor_draws = 50;
    let epochs = env_f64("D_EPOCHS", 1.0) as usize;
    let world = generate_world::<f64>(&cfg.world_config()).unwrap();
    let outcome = train(&cfg, &world, 1, epochs, "diag").unwrap();
    let model: &Model<f64> = &outcome.model;
    let bank = build_training_bank(&world).unwrap();
    let (_, test_stimuli) = world.split().unwrap();

    let mode = if std::env::var("D_FLAT").is_ok() {
        SimilarityMode::Flatten
    } else {
        SimilarityMode::Token(0)
    };
    let pools: Vec<(u64, Vec<f64>)> = test_stimuli
        .iter()
        .map(|&n| (n, flat(&world.targets(n).unwrap().image)))
        .collect();
    let mut cos_pred_true = 0.0;
    let mut cos_enh_true = 0.0;
    let mut norm_ratio = 0.0;
    let mut same_cluster = 0usize;
    let mut n = 0usize;
    let mut wins_before = 0usize;
    let mut wins_after = 0usize;
    let mut comparisons = 0usize;
    for &stim in test_stimuli.iter() {
        for subject in world.subject_ids() {
            let sample = world.sample(subject, stim, 0, model.padded_len).unwrap();
            let pred = model.predict(&sample).unwrap();
            let entries = bank.entries(subject, omnimoe::ecphory::Modality::Image).unwrap();
            let hits = cosine_topk(&pred.image, entries, 1, mode).unwrap();
            let retrieved = &entries.iter().find(|(id, _)| *id == hits[0].0).unwrap().1;
            let t = flat(&sample.targets.image);
            let p = flat(&pred.image);
            let r = flat(retrieved);
            let e: Vec<f64> = p.iter().zip(&r).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
            cos_pred_true += cos(&p, &t);
            cos_enh_true += cos(&e, &t);
            let np: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nr: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            norm_ratio += np / nr;
            same_cluster += (cos(&r, &t) > 0.9) as usize;
            n += 1;
            // exhaustive two-way: every other test target as distractor
            for (other, d) in &pools {
                if *other == stim {
                    continue;
                }
                wins_before += (cos(&p, &t) > cos(&p, d)) as usize;
                wins_after += (cos(&e, &t) > cos(&e, d)) as usize;
                comparisons += 1;
            }
        }
    }
    println!(
        "n={n} cos(pred)={:.3} cos(enh)={:.3} |p|/|r|={:.2} hit={:.1}% two_way_before={:.2}% two_way_after={:.2}%",
        cos_pred_true / n as f64,
        cos_enh_true / n as f64,
        norm_ratio / n as f64,
        100.0 * same_cluster as f64 / n as f64,
        100.0 * wins_before as f64 / comparisons as f64,
        100.0 * wins_after as f64 / comparisons as f64
    );
}
