//! Synthetic multi-subject signal generator.
//!
//! Every stimulus has a latent code; its embedding targets are fixed
//! functions of that code alone, so all subjects viewing the same stimulus
//! share identical targets (the commonality the encoder is supposed to
//! recover). Each subject observes the latent through its own mixing matrix
//! with its own voxel count and noise level (the specificity the
//! subject-conditioned routing is supposed to absorb).

use crate::encoder::{preprocess, EmbeddingPair, FmriSample};
use crate::error::{Error, Result};
use crate::records::{
    expect_magic, read_string, read_tensor_record, read_u32, write_magic, write_string,
    write_tensor_record, write_u32,
};
use crate::rng::{derive_seed, Prng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

const SPLIT_STREAM: u64 = 0x53504C49; // "SPLI"
const TRIAL_STREAM: u64 = 0x54524941; // "TRIA"

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub subjects: usize,
    pub stimuli: usize,
    pub latent_dim: usize,
    pub voxels_min: usize,
    pub voxels_max: usize,
    pub noise_min: f64,
    pub noise_max: f64,
    /// Apply tanh to the mixed signal before noise, hardening the task.
    pub mixing_tanh: bool,
    /// Alias the subjects' mixing maps: one shared base map composed with a
    /// subject-specific signed permutation of the latent axes. The same
    /// voxel pattern then encodes different latents for different subjects,
    /// so decoding without the subject identity is ambiguous. When false,
    /// each subject gets an independent Gaussian map.
    pub subject_aliasing: bool,
    /// Number of latent clusters the stimuli fall into (0 = i.i.d. codes).
    /// Clustered codes give the stimulus set neighborhood structure, the way
    /// natural-image embeddings cluster by semantic category.
    pub stimulus_clusters: usize,
    /// Within-cluster latent standard deviation (cluster centers have std 1).
    pub cluster_spread: f64,
    /// Fraction of each subject's voxels that carry no stimulus signal,
    /// only unit noise, laid out as one contiguous region at a
    /// subject-specific offset. Token-level routing can learn to exclude
    /// these regions from the expert slots.
    pub dead_voxel_fraction: f64,
    /// Intrinsic dimension of the stimulus manifold (0 = full-rank codes).
    /// Codes are drawn on a smooth low-dimensional sheet inside the latent
    /// space, so the training set densely covers the neighborhoods that
    /// retrieval draws from.
    pub latent_manifold_dim: usize,
    /// Off-manifold jitter applied to manifold codes.
    pub manifold_jitter: f64,
    pub train_fraction: f64,
    pub train_trials: u32,
    pub test_trials: u32,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub embed_dim: usize,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(Error::Config("subjects must be >= 1".into()));
        }
        if self.stimuli < 2 {
            return Err(Error::Config("stimuli must be >= 2".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.voxels_min == 0 || self.voxels_min > self.voxels_max {
            return Err(Error::Config(format!(
                "voxel range [{}, {}] is invalid",
                self.voxels_min, self.voxels_max
            )));
        }
        if self.voxels_max - self.voxels_min + 1 < self.subjects {
            return Err(Error::Config(format!(
                "voxel range [{}, {}] cannot give {} subjects distinct counts",
                self.voxels_min, self.voxels_max, self.subjects
            )));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} must be in (0, 1)",
                self.train_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.dead_voxel_fraction) {
            return Err(Error::Config(format!(
                "dead_voxel_fraction {} must be in [0, 1)",
                self.dead_voxel_fraction
            )));
        }
        if self.noise_min < 0.0 || self.noise_min > self.noise_max {
            return Err(Error::Config(format!(
                "noise range [{}, {}] is invalid",
                self.noise_min, self.noise_max
            )));
        }
        if self.train_trials == 0 || self.test_trials == 0 {
            return Err(Error::Config("trial counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld<S: Scalar> {
    pub cfg: WorldConfig,
    /// Per-subject voxel counts `d_s`, pairwise distinct.
    pub voxel_counts: Vec<usize>,
    /// Per-subject mixing matrices, shape `d_s x z`.
    pub mixing: Vec<Tensor<S>>,
    /// Per-subject noise levels.
    pub noise: Vec<f64>,
    /// Per-subject dead region as (offset, length) over the voxel axis.
    pub dead_regions: Vec<(usize, usize)>,
    /// Per-stimulus latent codes, shape `N x z`.
    pub latents: Tensor<S>,
    /// Fixed map from latent to flattened image target, `(v*c) x z`.
    pub image_map: Tensor<S>,
    /// Fixed map from latent to flattened text target, `(t*c) x z`.
    pub text_map: Tensor<S>,
}

/// Draw `count` pairwise-distinct values from `[lo, hi]`.
fn distinct_draws(rng: &mut Prng, lo: usize, hi: usize, count: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(count);
    while out.len() < count {
        let v = lo + rng.below(hi - lo + 1);
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Whether index `i` falls in a region of `len` positions starting at
/// `offset`, wrapping at `total`.
fn in_wrapped_region(i: usize, offset: usize, len: usize, total: usize) -> bool {
    if len == 0 {
        return false;
    }
    let rel = (i + total - offset) % total;
    rel < len
}

/// Random orthonormal columns via modified Gram-Schmidt on Gaussian draws.
fn random_orthonormal<S: Scalar>(rows: usize, cols: usize, rng: &mut Prng) -> Tensor<S> {
    assert!(cols <= rows);
    let mut m = Tensor::<S>::randn(vec![rows, cols], 1.0, rng);
    for c in 0..cols {
        for prev in 0..c {
            let mut dot = S::zero();
            for r in 0..rows {
                dot = dot + m.at(r, c) * m.at(r, prev);
            }
            for r in 0..rows {
                let v = m.at(r, c) - dot * m.at(r, prev);
                m.data_mut()[r * cols + c] = v;
            }
        }
        let mut norm = S::zero();
        for r in 0..rows {
            norm = norm + m.at(r, c) * m.at(r, c);
        }
        let inv = norm.sqrt().recip();
        for r in 0..rows {
            m.data_mut()[r * cols + c] = m.at(r, c) * inv;
        }
    }
    m
}

pub fn generate_world<S: Scalar>(cfg: &WorldConfig) -> Result<SyntheticWorld<S>> {
    cfg.validate()?;
    let mut rng = Prng::new(cfg.seed);
    let z = cfg.latent_dim;
    let scale = 1.0 / (z as f64).sqrt();

    let voxel_counts = distinct_draws(&mut rng, cfg.voxels_min, cfg.voxels_max, cfg.subjects);

    // orthonormal sheet spanning the stimulus manifold, when one is configured
    let sheet = if cfg.latent_manifold_dim > 0 {
        Some(random_orthonormal::<S>(z, cfg.latent_manifold_dim, &mut rng))
    } else {
        None
    };

    let mixing = if cfg.subject_aliasing {
        let base = Tensor::<S>::randn(vec![cfg.voxels_max, z], scale, &mut rng);
        match &sheet {
            // Rotate the manifold coordinates per subject: every subject's
            // signal occupies the same sheet with the same statistics, so
            // the observation alone cannot tell the subjects apart, yet the
            // latent-to-signal correspondence differs per subject.
            Some(sheet) => {
                let dim = cfg.latent_manifold_dim;
                voxel_counts
                    .iter()
                    .map(|&d| {
                        let rot = random_orthonormal::<S>(dim, dim, &mut rng);
                        // Q = I + sheet (R - I) sheet^T, orthogonal on R^z
                        let mut q = Tensor::<S>::eye(z);
                        for a in 0..z {
                            for b in 0..z {
                                let mut acc = S::zero();
                                for i in 0..dim {
                                    for j in 0..dim {
                                        let r_minus_i = rot.at(i, j)
                                            - if i == j { S::one() } else { S::zero() };
                                        acc = acc + sheet.at(a, i) * r_minus_i * sheet.at(b, j);
                                    }
                                }
                                q.data_mut()[a * z + b] = q.at(a, b) + acc;
                            }
                        }
                        let mut w = Tensor::<S>::zeros(vec![d, z]);
                        for row in 0..d {
                            for col in 0..z {
                                let mut acc = S::zero();
                                for k in 0..z {
                                    acc = acc + base.at(row, k) * q.at(k, col);
                                }
                                w.data_mut()[row * z + col] = acc;
                            }
                        }
                        w
                    })
                    .collect()
            }
            // full-rank codes: alias by a signed permutation of latent axes
            None => voxel_counts
                .iter()
                .map(|&d| {
                    let mut perm: Vec<usize> = (0..z).collect();
                    rng.shuffle(&mut perm);
                    let signs: Vec<f64> =
                        (0..z).map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect();
                    let mut w = Tensor::<S>::zeros(vec![d, z]);
                    for row in 0..d {
                        for col in 0..z {
                            w.data_mut()[row * z + col] =
                                base.data()[row * z + perm[col]] * S::from_f64(signs[col]);
                        }
                    }
                    w
                })
                .collect(),
        }
    } else {
        voxel_counts
            .iter()
            .map(|&d| Tensor::randn(vec![d, z], scale, &mut rng))
            .collect()
    };
    let noise: Vec<f64> =
        (0..cfg.subjects).map(|_| rng.uniform_in(cfg.noise_min, cfg.noise_max)).collect();
    let dead_regions: Vec<(usize, usize)> = voxel_counts
        .iter()
        .map(|&d| {
            let len = (cfg.dead_voxel_fraction * d as f64).floor() as usize;
            let offset = if len > 0 { rng.below(d) } else { 0 };
            (offset, len)
        })
        .collect();
    let latents = if let Some(sheet) = &sheet {
        let dim = cfg.latent_manifold_dim;
        let mut codes = Tensor::<S>::zeros(vec![cfg.stimuli, z]);
        for n in 0..cfg.stimuli {
            let u: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
            for k in 0..z {
                let mut acc = 0.0;
                for (j, &uj) in u.iter().enumerate() {
                    acc += sheet.at(k, j).as_f64() * uj;
                }
                codes.data_mut()[n * z + k] =
                    S::from_f64(acc + rng.gaussian() * cfg.manifold_jitter);
            }
        }
        codes
    } else if cfg.stimulus_clusters > 0 {
        let centers = Tensor::<S>::randn(vec![cfg.stimulus_clusters, z], 1.0, &mut rng);
        let mut codes = Tensor::<S>::zeros(vec![cfg.stimuli, z]);
        for n in 0..cfg.stimuli {
            let cluster = n % cfg.stimulus_clusters;
            for k in 0..z {
                codes.data_mut()[n * z + k] = centers.data()[cluster * z + k]
                    + S::from_f64(rng.gaussian() * cfg.cluster_spread);
            }
        }
        codes
    } else {
        Tensor::randn(vec![cfg.stimuli, z], 1.0, &mut rng)
    };
    let image_map = Tensor::randn(vec![cfg.image_tokens * cfg.embed_dim, z], scale, &mut rng);
    let text_map = Tensor::randn(vec![cfg.text_tokens * cfg.embed_dim, z], scale, &mut rng);

    Ok(SyntheticWorld {
        cfg: cfg.clone(),
        voxel_counts,
        mixing,
        noise,
        dead_regions,
        latents,
        image_map,
        text_map,
    })
}

impl<S: Scalar> SyntheticWorld<S> {
    pub fn subject_ids(&self) -> Vec<u32> {
        (0..self.cfg.subjects as u32).collect()
    }

    pub fn max_voxels(&self) -> usize {
        *self.voxel_counts.iter().max().unwrap()
    }

    /// Padded input length: the smallest multiple of `patches` that holds
    /// the longest voxel vector.
    pub fn padded_len(&self, patches: usize) -> usize {
        let d = self.max_voxels();
        d.div_ceil(patches) * patches
    }

    fn check_ids(&self, subject: u32, stimulus: u64) -> Result<()> {
        if subject as usize >= self.cfg.subjects {
            return Err(Error::UnknownSubject {
                subject,
                known: self.subject_ids(),
            });
        }
        if stimulus as usize >= self.cfg.stimuli {
            return Err(Error::Data(format!(
                "stimulus {stimulus} out of range 0..{}",
                self.cfg.stimuli
            )));
        }
        Ok(())
    }

    fn latent(&self, stimulus: u64) -> &[S] {
        let z = self.cfg.latent_dim;
        let n = stimulus as usize;
        &self.latents.data()[n * z..(n + 1) * z]
    }

    /// Target map: tanh of a fixed random linear map of the latent, scaled
    /// to unit norm over the flattened embedding (the scale convention the
    /// retrieval blend and the cosine metrics assume).
    fn apply_map(&self, map: &Tensor<S>, stimulus: u64, rows: usize) -> Tensor<S> {
        let z = self.cfg.latent_dim;
        let cols = self.cfg.embed_dim;
        let latent = self.latent(stimulus);
        let mut out = vec![S::zero(); rows * cols];
        for (i, slot) in out.iter_mut().enumerate() {
            let mut acc = S::zero();
            for k in 0..z {
                acc = acc + map.data()[i * z + k] * latent[k];
            }
            *slot = acc.tanh();
        }
        let norm = out.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt();
        if norm > S::zero() {
            for v in &mut out {
                *v = *v / norm;
            }
        }
        Tensor::new(vec![rows, cols], out).expect("target embedding")
    }

    /// Targets depend only on the stimulus, never on the subject.
    pub fn targets(&self, stimulus: u64) -> Result<EmbeddingPair<S>> {
        self.check_ids(0, stimulus)?;
        Ok(EmbeddingPair {
            image: self.apply_map(&self.image_map, stimulus, self.cfg.image_tokens),
            text: self.apply_map(&self.text_map, stimulus, self.cfg.text_tokens),
        })
    }

    /// Noise-free subject observation `W_s . z_n` (tanh-squashed when the
    /// config says so).
    fn clean_signal(&self, subject: u32, stimulus: u64) -> Vec<f64> {
        let s = subject as usize;
        let z = self.cfg.latent_dim;
        let d = self.voxel_counts[s];
        let latent = self.latent(stimulus);
        let mixing = &self.mixing[s];
        let (dead_offset, dead_len) = self.dead_regions[s];
        let mut out = vec![0.0; d];
        for (i, slot) in out.iter_mut().enumerate() {
            if in_wrapped_region(i, dead_offset, dead_len, d) {
                continue; // signal-free voxel
            }
            let mut acc = S::zero();
            for k in 0..z {
                acc = acc + mixing.data()[i * z + k] * latent[k];
            }
            *slot = if self.cfg.mixing_tanh { acc.as_f64().tanh() } else { acc.as_f64() };
        }
        out
    }

    /// One trial: clean signal plus per-trial Gaussian noise, preprocessed
    /// to `padded_len` and tagged with its targets.
    pub fn sample(
        &self,
        subject: u32,
        stimulus: u64,
        trial: u32,
        padded_len: usize,
    ) -> Result<FmriSample<S>> {
        self.check_ids(subject, stimulus)?;
        let mut voxels = self.clean_signal(subject, stimulus);
        let sigma = self.noise[subject as usize];
        let (dead_offset, dead_len) = self.dead_regions[subject as usize];
        let d = voxels.len();
        if sigma > 0.0 || dead_len > 0 {
            let seed = derive_seed(
                derive_seed(derive_seed(self.cfg.seed ^ TRIAL_STREAM, subject as u64), stimulus),
                trial as u64,
            );
            // dead voxels carry no stimulus signal but share the live
            // voxels' marginal variance, so they are not a pointwise
            // landmark for the subject's layout
            let dead_std = (1.0 + sigma * sigma).sqrt();
            let mut rng = Prng::new(seed);
            for (i, v) in voxels.iter_mut().enumerate() {
                if in_wrapped_region(i, dead_offset, dead_len, d) {
                    *v = dead_std * rng.gaussian();
                } else {
                    *v += sigma * rng.gaussian();
                }
            }
        }
        let padded = preprocess::<S>(&voxels, padded_len)?;
        Ok(FmriSample {
            subject,
            stimulus,
            trial,
            voxels,
            padded,
            targets: self.targets(stimulus)?,
        })
    }

    /// Stimulus-level split shared by all subjects: train and test stimuli
    /// are disjoint and their union covers the whole world.
    pub fn split(&self) -> Result<(Vec<u64>, Vec<u64>)> {
        let n = self.cfg.stimuli;
        let train_count = (n as f64 * self.cfg.train_fraction).floor() as usize;
        if train_count == 0 || train_count == n {
            return Err(Error::Config(format!(
                "degenerate split: {train_count} train stimuli out of {n}"
            )));
        }
        let mut ids: Vec<u64> = (0..n as u64).collect();
        let mut rng = Prng::new(derive_seed(self.cfg.seed ^ SPLIT_STREAM, 0));
        rng.shuffle(&mut ids);
        let mut train: Vec<u64> = ids[..train_count].to_vec();
        let mut test: Vec<u64> = ids[train_count..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((train, test))
    }
}

/// One dataset row: which (subject, stimulus, trial) triples exist and where
/// they land in the split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub subject: u32,
    pub stimulus: u64,
    pub trial: u32,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Enumerate every trial of the world under its split, in deterministic
/// (split, subject, stimulus, trial) order.
pub fn manifest<S: Scalar>(world: &SyntheticWorld<S>) -> Result<Vec<ManifestRow>> {
    let (train, test) = world.split()?;
    let mut rows = Vec::new();
    for subject in world.subject_ids() {
        for &stimulus in &train {
            for trial in 0..world.cfg.train_trials {
                rows.push(ManifestRow { subject, stimulus, trial, split: Split::Train });
            }
        }
    }
    for subject in world.subject_ids() {
        for &stimulus in &test {
            for trial in 0..world.cfg.test_trials {
                rows.push(ManifestRow { subject, stimulus, trial, split: Split::Test });
            }
        }
    }
    Ok(rows)
}

// ── persistence ─────────────────────────────────────────────────────────

const WORLD_MAGIC: &[u8; 4] = b"SYNW";
const WORLD_VERSION: u32 = 1;

fn config_echo(cfg: &WorldConfig) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    push("seed", cfg.seed.to_string());
    push("subjects", cfg.subjects.to_string());
    push("stimuli", cfg.stimuli.to_string());
    push("latent_dim", cfg.latent_dim.to_string());
    push("voxels_min", cfg.voxels_min.to_string());
    push("voxels_max", cfg.voxels_max.to_string());
    push("noise_min", cfg.noise_min.to_string());
    push("noise_max", cfg.noise_max.to_string());
    push("dead_voxel_fraction", cfg.dead_voxel_fraction.to_string());
    push("mixing_tanh", cfg.mixing_tanh.to_string());
    push("subject_aliasing", cfg.subject_aliasing.to_string());
    push("stimulus_clusters", cfg.stimulus_clusters.to_string());
    push("cluster_spread", cfg.cluster_spread.to_string());
    push("latent_manifold_dim", cfg.latent_manifold_dim.to_string());
    push("manifold_jitter", cfg.manifold_jitter.to_string());
    push("train_fraction", cfg.train_fraction.to_string());
    push("train_trials", cfg.train_trials.to_string());
    push("test_trials", cfg.test_trials.to_string());
    push("image_tokens", cfg.image_tokens.to_string());
    push("text_tokens", cfg.text_tokens.to_string());
    push("embed_dim", cfg.embed_dim.to_string());
    out
}

fn parse_config_echo(text: &str) -> Result<WorldConfig> {
    let mut cfg = WorldConfig {
        seed: 0,
        subjects: 0,
        stimuli: 0,
        latent_dim: 0,
        voxels_min: 0,
        voxels_max: 0,
        noise_min: 0.0,
        noise_max: 0.0,
        dead_voxel_fraction: 0.0,
        mixing_tanh: false,
        subject_aliasing: false,
        stimulus_clusters: 0,
        cluster_spread: 0.0,
        latent_manifold_dim: 0,
        manifold_jitter: 0.0,
        train_fraction: 0.0,
        train_trials: 0,
        test_trials: 0,
        image_tokens: 0,
        text_tokens: 0,
        embed_dim: 0,
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("world config line '{line}' lacks '='")))?;
        let key = key.trim();
        let value = value.trim();
        let bad = |e: std::num::ParseIntError| Error::Format(format!("{key}: {e}"));
        let badf = |e: std::num::ParseFloatError| Error::Format(format!("{key}: {e}"));
        match key {
            "seed" => cfg.seed = value.parse().map_err(bad)?,
            "subjects" => cfg.subjects = value.parse().map_err(bad)?,
            "stimuli" => cfg.stimuli = value.parse().map_err(bad)?,
            "latent_dim" => cfg.latent_dim = value.parse().map_err(bad)?,
            "voxels_min" => cfg.voxels_min = value.parse().map_err(bad)?,
            "voxels_max" => cfg.voxels_max = value.parse().map_err(bad)?,
            "noise_min" => cfg.noise_min = value.parse().map_err(badf)?,
            "noise_max" => cfg.noise_max = value.parse().map_err(badf)?,
            "dead_voxel_fraction" => cfg.dead_voxel_fraction = value.parse().map_err(badf)?,
            "mixing_tanh" => {
                cfg.mixing_tanh = value
                    .parse()
                    .map_err(|e| Error::Format(format!("mixing_tanh: {e}")))?
            }
            "subject_aliasing" => {
                cfg.subject_aliasing = value
                    .parse()
                    .map_err(|e| Error::Format(format!("subject_aliasing: {e}")))?
            }
            "stimulus_clusters" => cfg.stimulus_clusters = value.parse().map_err(bad)?,
            "cluster_spread" => cfg.cluster_spread = value.parse().map_err(badf)?,
            "latent_manifold_dim" => cfg.latent_manifold_dim = value.parse().map_err(bad)?,
            "manifold_jitter" => cfg.manifold_jitter = value.parse().map_err(badf)?,
            "train_fraction" => cfg.train_fraction = value.parse().map_err(badf)?,
            "train_trials" => cfg.train_trials = value.parse().map_err(bad)?,
            "test_trials" => cfg.test_trials = value.parse().map_err(bad)?,
            "image_tokens" => cfg.image_tokens = value.parse().map_err(bad)?,
            "text_tokens" => cfg.text_tokens = value.parse().map_err(bad)?,
            "embed_dim" => cfg.embed_dim = value.parse().map_err(bad)?,
            other => return Err(Error::Format(format!("unknown world config key '{other}'"))),
        }
    }
    Ok(cfg)
}

pub fn save_world<S: Scalar>(world: &SyntheticWorld<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, WORLD_MAGIC)?;
    write_u32(&mut w, WORLD_VERSION)?;
    write_string(&mut w, &config_echo(&world.cfg))?;

    let s = world.cfg.subjects;
    let record_count = s + 6; // counts, noise, dead regions, mixing per subject, latents, maps
    write_u32(&mut w, record_count as u32)?;
    let counts = Tensor::<S>::new(
        vec![s],
        world.voxel_counts.iter().map(|&d| S::from_f64(d as f64)).collect(),
    )?;
    write_tensor_record(&mut w, "voxel_counts", &counts)?;
    let noise =
        Tensor::<S>::new(vec![s], world.noise.iter().map(|&v| S::from_f64(v)).collect())?;
    write_tensor_record(&mut w, "noise", &noise)?;
    let dead = Tensor::<S>::new(
        vec![s, 2],
        world
            .dead_regions
            .iter()
            .flat_map(|&(o, l)| [S::from_f64(o as f64), S::from_f64(l as f64)])
            .collect(),
    )?;
    write_tensor_record(&mut w, "dead_regions", &dead)?;
    for (i, mixing) in world.mixing.iter().enumerate() {
        write_tensor_record(&mut w, &format!("mixing.s{i}"), mixing)?;
    }
    write_tensor_record(&mut w, "latents", &world.latents)?;
    write_tensor_record(&mut w, "map.image", &world.image_map)?;
    write_tensor_record(&mut w, "map.text", &world.text_map)?;
    Ok(())
}

pub fn load_world<S: Scalar>(path: &Path) -> Result<SyntheticWorld<S>> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, WORLD_MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != WORLD_VERSION {
        return Err(Error::Format(format!("unsupported world version {version}")));
    }
    let cfg = parse_config_echo(&read_string(&mut r)?)?;
    cfg.validate()?;
    let record_count = read_u32(&mut r)? as usize;
    let mut records = std::collections::BTreeMap::new();
    for _ in 0..record_count {
        let (name, tensor) = read_tensor_record::<S, _>(&mut r)?;
        records.insert(name, tensor);
    }
    let mut take = |name: &str| -> Result<Tensor<S>> {
        records
            .remove(name)
            .ok_or_else(|| Error::Format(format!("world file missing record '{name}'")))
    };
    let counts_tensor = take("voxel_counts")?;
    let voxel_counts: Vec<usize> =
        counts_tensor.data().iter().map(|v| v.as_f64() as usize).collect();
    let noise_tensor = take("noise")?;
    let noise: Vec<f64> = noise_tensor.data().iter().map(|v| v.as_f64()).collect();
    let dead_tensor = take("dead_regions")?;
    let dead_regions: Vec<(usize, usize)> = (0..cfg.subjects)
        .map(|i| {
            (
                dead_tensor.data()[i * 2].as_f64() as usize,
                dead_tensor.data()[i * 2 + 1].as_f64() as usize,
            )
        })
        .collect();
    let mixing = (0..cfg.subjects)
        .map(|i| take(&format!("mixing.s{i}")))
        .collect::<Result<Vec<_>>>()?;
    let latents = take("latents")?;
    let image_map = take("map.image")?;
    let text_map = take("map.text")?;
    for (s, m) in mixing.iter().enumerate() {
        if m.shape() != [voxel_counts[s], cfg.latent_dim] {
            return Err(Error::Format(format!(
                "mixing.s{s} has shape {:?}, expected [{}, {}]",
                m.shape(),
                voxel_counts[s],
                cfg.latent_dim
            )));
        }
    }
    Ok(SyntheticWorld { cfg, voxel_counts, mixing, noise, dead_regions, latents, image_map, text_map })
}
