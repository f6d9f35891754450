//! Command-line harness: data generation, training, evaluation, the
//! ablation and expert-count studies, gradient checking, weight-trace
//! export, and memory retrieval. Every subcommand exits 0 on success and
//! nonzero with a single `error: ...` line on stderr otherwise.

use clap::{Parser, Subcommand};
use omnimoe::config::RunConfig;
use omnimoe::ecphory::{load_bank, save_bank, Modality};
use omnimoe::error::Result;
use omnimoe::harness::{
    ablate, ablation_rows_csv, ablation_summary_csv, dump_weights, gradient_suite, sweep_csv,
    sweep_experts, weight_trace_csv,
};
use omnimoe::synth::{generate_world, load_world, manifest, save_world, SyntheticWorld};
use omnimoe::train::{
    build_training_bank, evaluate, metrics_csv, train, MetricsRow, Model,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "omnimoe",
    about = "Subject-conditioned mixture-of-experts decoding over synthetic multi-subject signals",
    version
)]
struct Cli {
    /// Configuration file of `key = value` lines; defaults apply otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for generated files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write it with its trial manifest.
    GenData,
    /// Train one model and write checkpoint, memory bank, and metrics.
    Train {
        /// Model variant: omni | dense | sparse | mlp.
        #[arg(long)]
        variant: Option<String>,
        /// World file from gen-data; regenerated from the config if absent.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        /// Enhance predictions from the prestored memory bank.
        #[arg(long)]
        use_ecphory: bool,
        /// Memory bank file; rebuilt from the training split if absent.
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Train the four ablation variants over several seeds and emit CSVs.
    Ablate {
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Train {omni, dense, sparse} across expert counts and emit a CSV.
    SweepExperts {
        #[arg(long)]
        world: Option<PathBuf>,
        /// Comma-separated expert counts; defaults to the config list.
        #[arg(long)]
        experts: Option<String>,
    },
    /// Run the finite-difference gradient suite and print one line per
    /// parameter class.
    Gradcheck {
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        /// Max relative error allowed.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Export split/lump weights summed over tokens per subject to CSV.
    DumpWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Retrieve the nearest memories for one test sample's prediction.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        subject: u32,
        #[arg(long)]
        stimulus: u64,
        #[arg(long, default_value_t = 0)]
        trial: u32,
        /// How many memories to list per modality.
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn obtain_world(cfg: &RunConfig, path: &Option<PathBuf>) -> Result<SyntheticWorld<f64>> {
    match path {
        Some(p) => load_world(p),
        None => generate_world(&cfg.world_config()),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn seeds_from(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::GenData => {
            let world = generate_world::<f64>(&cfg.world_config())?;
            let world_path = cli.out.join("world.synw");
            save_world(&world, &world_path)?;
            let mut rows = String::from("subject,stimulus,trial,split\n");
            for row in manifest(&world)? {
                rows.push_str(&format!(
                    "{},{},{},{}\n",
                    row.subject,
                    row.stimulus,
                    row.trial,
                    row.split.as_str()
                ));
            }
            let manifest_path = cli.out.join("manifest.csv");
            write(&manifest_path, &rows)?;
            println!("wrote {} and {}", world_path.display(), manifest_path.display());
        }

        Command::Train { variant, world } => {
            let mut cfg = cfg;
            if let Some(v) = variant {
                cfg.variant = v.clone();
                cfg.validate()?;
            }
            let world = obtain_world(&cfg, world)?;
            let run_id = format!("train_{}_s{}", cfg.variant, cfg.seed);
            let outcome = train(&cfg, &world, cfg.seed, cfg.epochs, &run_id)?;
            let ckpt = cli.out.join("checkpoint.psym");
            outcome.model.save(&ckpt)?;
            let bank = build_training_bank(&world)?;
            let bank_path = cli.out.join("bank.ecph");
            save_bank(&bank, &bank_path)?;
            let metrics_path = cli.out.join("metrics.csv");
            write(&metrics_path, &metrics_csv(&outcome.history, world.cfg.subjects))?;
            let last = outcome.history.last().expect("history");
            println!(
                "trained {} epochs: loss {:.6}, two-way {:.2}%, top-{} retrieval {:.2}%",
                cfg.epochs, last.train_loss, last.two_way_pct, cfg.eval_top_k, last.topk_retrieval_pct
            );
            println!(
                "wrote {}, {}, {}",
                ckpt.display(),
                bank_path.display(),
                metrics_path.display()
            );
        }

        Command::Eval { checkpoint, world, use_ecphory, bank } => {
            let world = obtain_world(&cfg, world)?;
            let model = Model::<f64>::from_checkpoint(checkpoint, &world)?;
            reject_config_mismatch(&cfg, cli, &model.run_cfg)?;
            let bank_store = if *use_ecphory {
                Some(match bank {
                    Some(path) => load_bank::<f64>(path)?,
                    None => build_training_bank(&world)?,
                })
            } else {
                None
            };
            let metrics =
                evaluate(&model, &world, *use_ecphory, bank_store.as_ref(), cfg.seed)?;
            let row = MetricsRow {
                run_id: format!("eval_s{}", cfg.seed),
                variant: model.run_cfg.variant.clone(),
                seed: cfg.seed,
                epoch: model.run_cfg.epochs,
                train_loss: f64::NAN,
                two_way_pct: metrics.two_way_pct,
                topk_retrieval_pct: metrics.topk_retrieval_pct,
                per_subject_two_way: metrics.per_subject_two_way.clone(),
                param_count: model.param_count(),
                expert_application_count: model.expert_applications_per_sample(),
            };
            let path = cli.out.join("eval.csv");
            write(&path, &metrics_csv(&[row], world.cfg.subjects))?;
            println!(
                "two-way {:.2}%, top-{} retrieval {:.2}% (ecphory: {})",
                metrics.two_way_pct, cfg.eval_top_k, metrics.topk_retrieval_pct, use_ecphory
            );
            println!("wrote {}", path.display());
        }

        Command::Ablate { world } => {
            let world = obtain_world(&cfg, world)?;
            let seeds = seeds_from(cfg.seed, cfg.ablation_seeds);
            let outcome = ablate(&cfg, &world, &seeds)?;
            let rows_path = cli.out.join("ablation.csv");
            write(&rows_path, &ablation_rows_csv(&outcome, world.cfg.subjects))?;
            let summary_path = cli.out.join("ablation_summary.csv");
            write(&summary_path, &ablation_summary_csv(&outcome))?;
            for s in &outcome.summary {
                println!(
                    "{:<32} two-way {:6.2}% +- {:.2}",
                    s.label, s.two_way_mean, s.two_way_std
                );
            }
            println!("wrote {} and {}", rows_path.display(), summary_path.display());
        }

        Command::SweepExperts { world, experts } => {
            let world = obtain_world(&cfg, world)?;
            let counts: Vec<usize> = match experts {
                Some(list) => list
                    .split(',')
                    .map(|v| {
                        v.trim().parse().map_err(|e| {
                            omnimoe::Error::InvalidArgument(format!("--experts: {e}"))
                        })
                    })
                    .collect::<Result<_>>()?,
                None => cfg.sweep_expert_counts.clone(),
            };
            let seeds = seeds_from(cfg.seed, cfg.sweep_seeds);
            let rows = sweep_experts(&cfg, &world, &counts, &seeds)?;
            let path = cli.out.join("sweep.csv");
            write(&path, &sweep_csv(&rows))?;
            for row in &rows {
                println!(
                    "{:<8} E={:<3} seed={} two-way {:6.2}% params {} applications {}",
                    row.variant,
                    row.expert_count,
                    row.seed,
                    row.two_way_pct,
                    row.param_count,
                    row.expert_application_count
                );
            }
            println!("wrote {}", path.display());
        }

        Command::Gradcheck { step, tol } => {
            let reports = gradient_suite(*step, *tol)?;
            let mut failed = false;
            println!("variant,class,parameters,max_rel_err,pass");
            for r in &reports {
                println!(
                    "{},{},{},{:.3e},{}",
                    r.variant, r.class, r.parameters_checked, r.max_rel_err, r.pass
                );
                failed |= !r.pass;
            }
            if failed {
                return Err(omnimoe::Error::InvalidArgument(
                    "gradient suite failed; see rows above".into(),
                ));
            }
        }

        Command::DumpWeights { checkpoint, world } => {
            let world = obtain_world(&cfg, world)?;
            let model = Model::<f64>::from_checkpoint(checkpoint, &world)?;
            let rows = dump_weights(&model, &world)?;
            let path = cli.out.join("weights.csv");
            write(&path, &weight_trace_csv(&rows))?;
            println!("wrote {} ({} rows)", path.display(), rows.len());
        }

        Command::Retrieve { checkpoint, world, bank, subject, stimulus, trial, k } => {
            let world = obtain_world(&cfg, world)?;
            let model = Model::<f64>::from_checkpoint(checkpoint, &world)?;
            let bank = match bank {
                Some(path) => load_bank::<f64>(path)?,
                None => build_training_bank(&world)?,
            };
            let sample = world.sample(*subject, *stimulus, *trial, model.padded_len)?;
            let pred = model.predict(&sample)?;
            let ecfg = model.run_cfg.ecphory_config();
            println!("modality,rank,stimulus,score");
            for (modality, query) in
                [(Modality::Image, &pred.image), (Modality::Text, &pred.text)]
            {
                let entries = bank.entries(*subject, modality)?;
                let k = (*k).min(entries.len());
                let hits = omnimoe::ecphory::cosine_topk(query, entries, k, ecfg.similarity)?;
                for (rank, (id, score)) in hits.iter().enumerate() {
                    println!("{},{},{},{:.6}", modality.as_str(), rank + 1, id, score);
                }
            }
        }
    }
    Ok(())
}

/// The stored checkpoint config wins; a user-supplied config may only differ
/// in non-architectural knobs.
fn reject_config_mismatch(user: &RunConfig, cli: &Cli, stored: &RunConfig) -> Result<()> {
    if cli.config.is_none() {
        return Ok(());
    }
    let arch = |c: &RunConfig| {
        (
            c.patches,
            c.model_dim,
            c.hidden_dim,
            c.blocks,
            c.moe_blocks,
            c.image_tokens,
            c.text_tokens,
            c.expert_count,
            c.variant.clone(),
            c.shared_alpha,
            c.moe_insertion.clone(),
        )
    };
    if arch(user) != arch(stored) {
        return Err(omnimoe::Error::Config(
            "supplied config disagrees with the checkpoint's architecture".into(),
        ));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
