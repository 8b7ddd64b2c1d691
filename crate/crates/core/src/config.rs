//! Run configuration: model geometry, training schedule, data generation and
//! evaluation settings. Everything is plain serde JSON so configs can be
//! checked in, hashed, and overridden from the CLI with `--set key=value`.

use crate::error::{Result, WamError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub obs_h: usize,
    pub obs_w: usize,
    /// Codebook vocabulary size V.
    pub vocab_size: usize,
    /// Tokens per frame K.
    pub tokens_per_frame: usize,
    /// Codebook vector dimension.
    pub code_dim: usize,
    /// Channel width of the tokenizer conv stages.
    pub enc_channels: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Q-head MLP: layer count, hidden width, dropout.
    pub qhead_layers: usize,
    pub qhead_hidden: usize,
    pub qhead_dropout: f64,
    /// Timesteps per segment L.
    pub seq_timesteps: usize,
    /// Union action-space size across tasks.
    pub a_max: usize,
    pub num_tasks: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub atoms: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            obs_h: 8,
            obs_w: 8,
            vocab_size: 64,
            tokens_per_frame: 4,
            code_dim: 64,
            enc_channels: 16,
            layers: 2,
            hidden: 128,
            heads: 4,
            dropout: 0.1,
            qhead_layers: 3,
            qhead_hidden: 256,
            qhead_dropout: 0.01,
            seq_timesteps: 8,
            a_max: crate::envs::A_MAX,
            num_tasks: 3,
            v_min: -10.0,
            v_max: 30.0,
            atoms: 51,
        }
    }
}

impl ModelConfig {
    /// Interleaved sequence length L * (K + 1).
    pub fn max_tokens(&self) -> usize {
        self.seq_timesteps * (self.tokens_per_frame + 1)
    }

    /// Full-scale preset (not trainable at desk scale; kept selectable for
    /// shape contracts and budget checks).
    pub fn paper() -> Self {
        ModelConfig {
            obs_h: 84,
            obs_w: 84,
            vocab_size: 2048,
            tokens_per_frame: 36,
            code_dim: 512,
            enc_channels: 64,
            layers: 12,
            hidden: 768,
            heads: 12,
            dropout: 0.1,
            qhead_layers: 3,
            qhead_hidden: 1792,
            qhead_dropout: 0.01,
            seq_timesteps: 8,
            a_max: 18,
            num_tasks: 15,
            v_min: -10.0,
            v_max: 30.0,
            atoms: 51,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(WamError::config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.v_max <= self.v_min {
            return Err(WamError::config("v_max must exceed v_min"));
        }
        if self.atoms < 2 {
            return Err(WamError::config("need at least 2 atoms"));
        }
        if self.vocab_size < 2 {
            return Err(WamError::config("vocab_size must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_cql: bool,
    pub no_world_loss: bool,
    pub stop_grad_action: bool,
    pub mse_td: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            no_cql: false,
            no_world_loss: false,
            stop_grad_action: false,
            mse_td: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Planner settings used to synthesize imagined steps.
    pub plan_h: usize,
    pub plan_k: usize,
    /// Real prefix length; the remaining timesteps up to L are imagined.
    pub real_prefix: usize,
    /// Synthesized-segment pool size and refresh cadence.
    pub pool_size: usize,
    pub refresh_every: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 2000,
            batch_size: 6,
            lr: 5e-5,
            plan_h: 2,
            plan_k: 2,
            real_prefix: 6,
            pool_size: 192,
            refresh_every: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Tokenizer-only steps at the start of stage 1.
    pub tokenizer_steps: u64,
    /// World-part steps (stage 1).
    pub m1_steps: u64,
    /// Joint steps (stage 2).
    pub m2_steps: u64,
    pub batch_size: usize,
    pub tokenizer_batch: usize,
    pub lr_tokenizer: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub gamma: f64,
    /// CQL coefficient.
    pub alpha: f64,
    /// World-loss coefficient in the joint objective.
    pub beta: f64,
    pub target_sync_every: u64,
    /// Codebook entries unused for this many steps are re-seeded.
    pub dead_code_steps: u64,
    /// Use the online head for the target argmax (double-Q variant).
    pub double_q: bool,
    pub seed: u64,
    /// "f64" (default) or "f32".
    pub precision: String,
    pub ablation: AblationFlags,
    pub finetune: FinetuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tokenizer_steps: 2000,
            m1_steps: 5000,
            m2_steps: 15000,
            batch_size: 6,
            tokenizer_batch: 16,
            lr_tokenizer: 1e-4,
            lr_stage1: 1e-4,
            lr_stage2: 5e-5,
            weight_decay: 0.01,
            grad_clip: 1.0,
            gamma: 0.99,
            alpha: 0.1,
            beta: 0.1,
            target_sync_every: 500,
            dead_code_steps: 500,
            double_q: false,
            seed: 1,
            precision: "f64".into(),
            ablation: AblationFlags::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule from the training tables; selectable but not a
    /// desk-scale target.
    pub fn paper() -> Self {
        TrainConfig {
            tokenizer_steps: 100_000,
            m1_steps: 250_000,
            m2_steps: 1_500_000,
            batch_size: 512,
            tokenizer_batch: 2048,
            target_sync_every: 1000,
            dead_code_steps: 10_000,
            ..TrainConfig::default()
        }
    }

    pub fn precision(&self) -> Result<crate::numerics::Precision> {
        match self.precision.as_str() {
            "f64" => Ok(crate::numerics::Precision::F64),
            "f32" => Ok(crate::numerics::Precision::F32),
            other => Err(WamError::config(format!("unknown precision '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub tasks: Vec<String>,
    pub transitions_per_task: usize,
    /// Per-episode epsilon mixture for the behavior policies.
    pub mix: Vec<f64>,
    /// Expert-tier epsilon (fine-tuning data).
    pub expert_eps: f64,
    pub finetune_transitions: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            tasks: crate::envs::Task::TRAIN
                .iter()
                .map(|t| t.name().to_string())
                .collect(),
            transitions_per_task: 50_000,
            mix: vec![1.0, 0.5, 0.1, 0.01],
            expert_eps: 0.01,
            finetune_transitions: 5000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub eps_eval: f64,
    pub plan_h: usize,
    pub plan_k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 16,
            eps_eval: 0.001,
            plan_h: 2,
            plan_k: 2,
            seed: 123,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

impl Config {
    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WamError::config(format!("cannot read {}: {}", path.display(), e)))?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| WamError::config(format!("bad config {}: {}", path.display(), e)))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Apply a `key.path=value` override. Values parse as JSON scalars first
    /// and fall back to strings.
    pub fn apply_override(&mut self, setting: &str) -> Result<()> {
        let (path, raw) = setting
            .split_once('=')
            .ok_or_else(|| WamError::config(format!("--set expects key=value, got '{}'", setting)))?;
        let mut root = serde_json::to_value(&*self)?;
        {
            let parts: Vec<&str> = path.split('.').collect();
            let parent_ptr = if parts.len() == 1 {
                String::new()
            } else {
                format!("/{}", parts[..parts.len() - 1].join("/"))
            };
            let last = *parts.last().unwrap();
            let parent = root
                .pointer_mut(&parent_ptr)
                .and_then(|v| v.as_object_mut())
                .ok_or_else(|| WamError::config(format!("unknown config key '{}'", path)))?;
            let existing = parent
                .get(last)
                .ok_or_else(|| WamError::config(format!("unknown config key '{}'", path)))?;
            let parsed: serde_json::Value = match serde_json::from_str(raw) {
                Ok(v) => v,
                Err(_) => serde_json::Value::String(raw.to_string()),
            };
            // Keep the JSON type stable where possible.
            if existing.is_string() && !parsed.is_string() {
                parent.insert(last.to_string(), serde_json::Value::String(raw.to_string()));
            } else {
                parent.insert(last.to_string(), parsed);
            }
        }
        *self = serde_json::from_value(root)
            .map_err(|e| WamError::config(format!("override '{}' rejected: {}", setting, e)))?;
        self.model.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().model.validate().unwrap();
        ModelConfig::paper().validate().unwrap();
    }

    #[test]
    fn paper_preset_sequence_budget() {
        let m = ModelConfig::paper();
        assert_eq!(m.max_tokens(), 296);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = Config::default();
        let mut b = Config::default();
        b.train.seed = 2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Config::default().hash());
    }

    #[test]
    fn overrides_set_nested_keys() {
        let mut c = Config::default();
        c.apply_override("train.m1_steps=42").unwrap();
        assert_eq!(c.train.m1_steps, 42);
        c.apply_override("train.ablation.no_cql=true").unwrap();
        assert!(c.train.ablation.no_cql);
        c.apply_override("train.precision=f32").unwrap();
        assert_eq!(c.train.precision, "f32");
        assert!(c.apply_override("nope.key=1").is_err());
        assert!(c.apply_override("train.m1_steps").is_err());
    }
}
