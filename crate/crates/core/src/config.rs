//! Run configuration: every knob of the pipeline in one struct, serialized
//! as UTF-8 `key = value` lines with `#` comments. Parsing starts from the
//! defaults, applies the file's entries, and rejects unknown keys, so a
//! serialized config always round-trips losslessly.

use crate::contrastive::ContrastiveConfig;
use crate::ecphory::{EcphoryConfig, SimilarityMode};
use crate::encoder::{EncoderConfig, MoeInsertion, MoeVariant};
use crate::error::{Error, Result};
use crate::synth::WorldConfig;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // architecture
    pub patches: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub moe_blocks: usize,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub attention_heads: usize,
    pub expert_count: usize,
    pub sparse_top_k: usize,
    pub variant: String,
    pub shared_alpha: bool,
    pub moe_insertion: String,

    // contrastive loss
    pub temperature: f64,

    // retrieval-enhanced inference
    pub mix_weight: f64,
    pub memory_top_k: usize,
    pub similarity_token: usize,
    pub similarity_flatten: bool,

    // optimizer
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,

    // synthetic world
    pub seed: u64,
    pub subjects: usize,
    pub stimuli: usize,
    pub latent_dim: usize,
    pub voxels_min: usize,
    pub voxels_max: usize,
    pub noise_min: f64,
    pub noise_max: f64,
    pub dead_voxel_fraction: f64,
    pub mixing_tanh: bool,
    pub subject_aliasing: bool,
    pub stimulus_clusters: usize,
    pub cluster_spread: f64,
    pub latent_manifold_dim: usize,
    pub manifold_jitter: f64,
    pub train_fraction: f64,
    pub train_trials: u32,
    pub test_trials: u32,

    // evaluation
    pub eval_distractor_draws: usize,
    pub eval_top_k: usize,

    // harness budgets
    pub ablation_epochs: usize,
    pub ablation_seeds: usize,
    pub sweep_epochs: usize,
    pub sweep_seeds: usize,
    pub sweep_expert_counts: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            patches: 16,
            model_dim: 32,
            hidden_dim: 128,
            blocks: 6,
            moe_blocks: 2,
            image_tokens: 4,
            text_tokens: 4,
            attention_heads: 1,
            expert_count: 8,
            sparse_top_k: 2,
            variant: "omni".into(),
            shared_alpha: false,
            moe_insertion: "replace".into(),
            temperature: 0.07,
            mix_weight: 0.5,
            memory_top_k: 1,
            similarity_token: 0,
            similarity_flatten: false,
            epochs: 50,
            batch_size: 64,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.9999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 1,
            subjects: 4,
            stimuli: 600,
            latent_dim: 16,
            voxels_min: 200,
            voxels_max: 256,
            noise_min: 0.3,
            noise_max: 0.8,
            dead_voxel_fraction: 0.4,
            mixing_tanh: false,
            subject_aliasing: true,
            stimulus_clusters: 0,
            cluster_spread: 0.3,
            latent_manifold_dim: 3,
            manifold_jitter: 0.05,
            train_fraction: 0.9,
            train_trials: 3,
            test_trials: 1,
            eval_distractor_draws: 20,
            eval_top_k: 5,
            ablation_epochs: 2,
            ablation_seeds: 3,
            sweep_epochs: 1,
            sweep_seeds: 1,
            sweep_expert_counts: vec![2, 4, 8],
        }
    }
}

impl RunConfig {
    pub fn parse_variant(&self) -> Result<MoeVariant> {
        match self.variant.as_str() {
            "mlp" => Ok(MoeVariant::Mlp),
            "omni" => Ok(MoeVariant::Omni { shared_alpha: self.shared_alpha }),
            "dense" => Ok(MoeVariant::Dense),
            "sparse" => Ok(MoeVariant::Sparse),
            other => Err(Error::Config(format!(
                "variant '{other}' must be one of omni|dense|sparse|mlp"
            ))),
        }
    }

    fn parse_insertion(&self) -> Result<MoeInsertion> {
        match self.moe_insertion.as_str() {
            "replace" => Ok(MoeInsertion::Replace),
            "append" => Ok(MoeInsertion::Append),
            other => Err(Error::Config(format!(
                "moe_insertion '{other}' must be replace|append"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.parse_variant()?;
        self.parse_insertion()?;
        self.contrastive_config().validate()?;
        self.ecphory_config().validate()?;
        self.world_config().validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if self.eval_distractor_draws == 0 {
            return Err(Error::Config("eval_distractor_draws must be >= 1".into()));
        }
        if self.sweep_expert_counts.is_empty() {
            return Err(Error::Config("sweep_expert_counts must be nonempty".into()));
        }
        Ok(())
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            subjects: self.subjects,
            stimuli: self.stimuli,
            latent_dim: self.latent_dim,
            voxels_min: self.voxels_min,
            voxels_max: self.voxels_max,
            noise_min: self.noise_min,
            noise_max: self.noise_max,
            dead_voxel_fraction: self.dead_voxel_fraction,
            mixing_tanh: self.mixing_tanh,
            subject_aliasing: self.subject_aliasing,
            stimulus_clusters: self.stimulus_clusters,
            cluster_spread: self.cluster_spread,
            latent_manifold_dim: self.latent_manifold_dim,
            manifold_jitter: self.manifold_jitter,
            train_fraction: self.train_fraction,
            train_trials: self.train_trials,
            test_trials: self.test_trials,
            image_tokens: self.image_tokens,
            text_tokens: self.text_tokens,
            embed_dim: self.model_dim,
        }
    }

    pub fn encoder_config(&self, input_len: usize) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            input_len,
            patches: self.patches,
            model_dim: self.model_dim,
            hidden_dim: self.hidden_dim,
            blocks: self.blocks,
            moe_blocks: self.moe_blocks,
            image_tokens: self.image_tokens,
            text_tokens: self.text_tokens,
            attention_heads: self.attention_heads,
            expert_count: self.expert_count,
            sparse_top_k: self.sparse_top_k,
            variant: self.parse_variant()?,
            moe_insertion: self.parse_insertion()?,
            layer_norm_eps: 1e-5,
        })
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig { temperature: self.temperature }
    }

    pub fn ecphory_config(&self) -> EcphoryConfig {
        EcphoryConfig {
            mix_weight: self.mix_weight,
            top_k: self.memory_top_k,
            similarity: if self.similarity_flatten {
                SimilarityMode::Flatten
            } else {
                SimilarityMode::Token(self.similarity_token)
            },
        }
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# architecture");
        let _ = writeln!(s, "patches = {}", self.patches);
        let _ = writeln!(s, "model_dim = {}", self.model_dim);
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "blocks = {}", self.blocks);
        let _ = writeln!(s, "moe_blocks = {}", self.moe_blocks);
        let _ = writeln!(s, "image_tokens = {}", self.image_tokens);
        let _ = writeln!(s, "text_tokens = {}", self.text_tokens);
        let _ = writeln!(s, "attention_heads = {}", self.attention_heads);
        let _ = writeln!(s, "expert_count = {}", self.expert_count);
        let _ = writeln!(s, "sparse_top_k = {}", self.sparse_top_k);
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "shared_alpha = {}", self.shared_alpha);
        let _ = writeln!(s, "moe_insertion = {}", self.moe_insertion);
        let _ = writeln!(s, "# contrastive loss");
        let _ = writeln!(s, "temperature = {}", self.temperature);
        let _ = writeln!(s, "# retrieval-enhanced inference");
        let _ = writeln!(s, "mix_weight = {}", self.mix_weight);
        let _ = writeln!(s, "memory_top_k = {}", self.memory_top_k);
        let _ = writeln!(s, "similarity_token = {}", self.similarity_token);
        let _ = writeln!(s, "similarity_flatten = {}", self.similarity_flatten);
        let _ = writeln!(s, "# optimizer");
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "# synthetic world");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "subjects = {}", self.subjects);
        let _ = writeln!(s, "stimuli = {}", self.stimuli);
        let _ = writeln!(s, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(s, "voxels_min = {}", self.voxels_min);
        let _ = writeln!(s, "voxels_max = {}", self.voxels_max);
        let _ = writeln!(s, "noise_min = {}", self.noise_min);
        let _ = writeln!(s, "noise_max = {}", self.noise_max);
        let _ = writeln!(s, "dead_voxel_fraction = {}", self.dead_voxel_fraction);
        let _ = writeln!(s, "mixing_tanh = {}", self.mixing_tanh);
        let _ = writeln!(s, "subject_aliasing = {}", self.subject_aliasing);
        let _ = writeln!(s, "stimulus_clusters = {}", self.stimulus_clusters);
        let _ = writeln!(s, "cluster_spread = {}", self.cluster_spread);
        let _ = writeln!(s, "latent_manifold_dim = {}", self.latent_manifold_dim);
        let _ = writeln!(s, "manifold_jitter = {}", self.manifold_jitter);
        let _ = writeln!(s, "train_fraction = {}", self.train_fraction);
        let _ = writeln!(s, "train_trials = {}", self.train_trials);
        let _ = writeln!(s, "test_trials = {}", self.test_trials);
        let _ = writeln!(s, "# evaluation");
        let _ = writeln!(s, "eval_distractor_draws = {}", self.eval_distractor_draws);
        let _ = writeln!(s, "eval_top_k = {}", self.eval_top_k);
        let _ = writeln!(s, "# harness budgets");
        let _ = writeln!(s, "ablation_epochs = {}", self.ablation_epochs);
        let _ = writeln!(s, "ablation_seeds = {}", self.ablation_seeds);
        let _ = writeln!(s, "sweep_epochs = {}", self.sweep_epochs);
        let _ = writeln!(s, "sweep_seeds = {}", self.sweep_seeds);
        let counts: Vec<String> =
            self.sweep_expert_counts.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(s, "sweep_expert_counts = {}", counts.join(","));
        s
    }

    pub fn apply_line(&mut self, line: &str) -> Result<()> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return Ok(());
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line '{line}' lacks '='")))?;
        self.apply(key.trim(), value.trim())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
        }
        match key {
            "patches" => self.patches = parse(key, value)?,
            "model_dim" => self.model_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "moe_blocks" => self.moe_blocks = parse(key, value)?,
            "image_tokens" => self.image_tokens = parse(key, value)?,
            "text_tokens" => self.text_tokens = parse(key, value)?,
            "attention_heads" => self.attention_heads = parse(key, value)?,
            "expert_count" => self.expert_count = parse(key, value)?,
            "sparse_top_k" => self.sparse_top_k = parse(key, value)?,
            "variant" => self.variant = value.to_string(),
            "shared_alpha" => self.shared_alpha = parse(key, value)?,
            "moe_insertion" => self.moe_insertion = value.to_string(),
            "temperature" => self.temperature = parse(key, value)?,
            "mix_weight" => self.mix_weight = parse(key, value)?,
            "memory_top_k" => self.memory_top_k = parse(key, value)?,
            "similarity_token" => self.similarity_token = parse(key, value)?,
            "similarity_flatten" => self.similarity_flatten = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "subjects" => self.subjects = parse(key, value)?,
            "stimuli" => self.stimuli = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "voxels_min" => self.voxels_min = parse(key, value)?,
            "voxels_max" => self.voxels_max = parse(key, value)?,
            "noise_min" => self.noise_min = parse(key, value)?,
            "noise_max" => self.noise_max = parse(key, value)?,
            "dead_voxel_fraction" => self.dead_voxel_fraction = parse(key, value)?,
            "mixing_tanh" => self.mixing_tanh = parse(key, value)?,
            "subject_aliasing" => self.subject_aliasing = parse(key, value)?,
            "stimulus_clusters" => self.stimulus_clusters = parse(key, value)?,
            "cluster_spread" => self.cluster_spread = parse(key, value)?,
            "latent_manifold_dim" => self.latent_manifold_dim = parse(key, value)?,
            "manifold_jitter" => self.manifold_jitter = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "train_trials" => self.train_trials = parse(key, value)?,
            "test_trials" => self.test_trials = parse(key, value)?,
            "eval_distractor_draws" => self.eval_distractor_draws = parse(key, value)?,
            "eval_top_k" => self.eval_top_k = parse(key, value)?,
            "ablation_epochs" => self.ablation_epochs = parse(key, value)?,
            "ablation_seeds" => self.ablation_seeds = parse(key, value)?,
            "sweep_epochs" => self.sweep_epochs = parse(key, value)?,
            "sweep_seeds" => self.sweep_seeds = parse(key, value)?,
            "sweep_expert_counts" => {
                self.sweep_expert_counts = value
                    .split(',')
                    .map(|v| parse("sweep_expert_counts", v.trim()))
                    .collect::<Result<Vec<usize>>>()?;
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for line in text.lines() {
            cfg.apply_line(line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config_str(&text)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn roundtrip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.learning_rate = 0.000123456789012345;
        cfg.temperature = 0.07;
        cfg.variant = "sparse".into();
        cfg.sweep_expert_counts = vec![3, 9, 27];
        cfg.mixing_tanh = true;
        let text = cfg.to_config_string();
        let back = RunConfig::from_config_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::from_config_str("nonsense_key = 7").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::from_config_str("# comment\n\nepochs = 3\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn bad_variant_is_rejected() {
        assert!(RunConfig::from_config_str("variant = bogus").is_err());
    }
}
