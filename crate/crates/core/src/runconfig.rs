//! Plain-text run configuration: one dotted `key = value` per line, `#`
//! comments. Unknown keys are rejected by name; command-line flags override
//! file values downstream.

use crate::distill::DistillConfig;
use crate::model::ModelConfig;
use crate::tasks::{TaskKind, TaskSpec};
use crate::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub conv_kernel: usize,
    pub gated_ssm: bool,
    // task
    pub task: String,
    pub samples: usize,
    pub eval_samples: usize,
    pub payload_min: usize,
    pub payload_max: usize,
    pub data_vocab: usize,
    pub pairs: usize,
    pub keys: usize,
    pub values: usize,
    pub text_path: String,
    pub context_len: usize,
    // conversion
    pub strategy: String,
    pub ratio: String,
    // training / distillation
    pub lr: f32,
    pub steps: usize,
    pub batch_tokens: usize,
    pub alpha_skew: f32,
    pub lambda_ce: f32,
    pub lambda_logits: f32,
    pub lambda_emb: f32,
    pub log_every: usize,
    pub eval_every: usize,
    pub freeze_t: bool,
    // importance
    pub criterion: String,
    pub probes: usize,
    // global
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dim: 64,
            depth: 6,
            heads: 4,
            kv_heads: 2,
            d_ff: 256,
            max_seq: 96,
            conv_kernel: 0,
            gated_ssm: false,
            task: "copy".into(),
            samples: 2048,
            eval_samples: 256,
            payload_min: 4,
            payload_max: 12,
            data_vocab: 16,
            pairs: 4,
            keys: 8,
            values: 8,
            text_path: String::new(),
            context_len: 64,
            strategy: "blockbeg".into(),
            ratio: "1:1".into(),
            // the full-scale recipe fine-tunes at 1e-5; desk-scale models
            // train from scratch and want a larger step
            lr: 1e-3,
            steps: 1000,
            batch_tokens: 256,
            alpha_skew: 0.1,
            lambda_ce: 1.0,
            lambda_logits: 1.0,
            lambda_emb: 1.0,
            log_every: 50,
            eval_every: 0,
            freeze_t: false,
            criterion: "cosine".into(),
            probes: 256,
            seed: 42,
        }
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment; unknown keys are errors that name
    /// the offending key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for key '{key}'")))
        }
        let v = value.trim();
        match key {
            "model.dim" => self.dim = p(key, v)?,
            "model.depth" => self.depth = p(key, v)?,
            "model.heads" => self.heads = p(key, v)?,
            "model.kv_heads" => self.kv_heads = p(key, v)?,
            "model.d_ff" => self.d_ff = p(key, v)?,
            "model.max_seq" => self.max_seq = p(key, v)?,
            "model.conv_kernel" => self.conv_kernel = p(key, v)?,
            "model.gated_ssm" => self.gated_ssm = p(key, v)?,
            "task.kind" => self.task = v.to_string(),
            "task.samples" => self.samples = p(key, v)?,
            "task.eval_samples" => self.eval_samples = p(key, v)?,
            "task.payload_min" => self.payload_min = p(key, v)?,
            "task.payload_max" => self.payload_max = p(key, v)?,
            "task.data_vocab" => self.data_vocab = p(key, v)?,
            "task.pairs" => self.pairs = p(key, v)?,
            "task.keys" => self.keys = p(key, v)?,
            "task.values" => self.values = p(key, v)?,
            "task.text_path" => self.text_path = v.to_string(),
            "task.context_len" => self.context_len = p(key, v)?,
            "convert.strategy" => self.strategy = v.to_string(),
            "convert.ratio" => self.ratio = v.to_string(),
            "train.lr" => self.lr = p(key, v)?,
            "train.steps" => self.steps = p(key, v)?,
            "train.batch_tokens" => self.batch_tokens = p(key, v)?,
            "train.log_every" => self.log_every = p(key, v)?,
            "train.eval_every" => self.eval_every = p(key, v)?,
            "distill.alpha_skew" => self.alpha_skew = p(key, v)?,
            "distill.lambda_ce" => self.lambda_ce = p(key, v)?,
            "distill.lambda_logits" => self.lambda_logits = p(key, v)?,
            "distill.lambda_emb" => self.lambda_emb = p(key, v)?,
            "distill.freeze_t" => self.freeze_t = p(key, v)?,
            "importance.criterion" => self.criterion = v.to_string(),
            "importance.probes" => self.probes = p(key, v)?,
            "seed" => self.seed = p(key, v)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let kind = match self.task.as_str() {
            "copy" => TaskKind::Copy {
                payload_min: self.payload_min,
                payload_max: self.payload_max,
            },
            "kv_recall" => TaskKind::KvRecall {
                n_pairs: self.pairs,
                n_keys: self.keys,
                n_values: self.values,
            },
            "textfile" => {
                if self.text_path.is_empty() {
                    return Err(Error::Config(
                        "task.text_path required for the textfile task".into(),
                    ));
                }
                TaskKind::TextFile {
                    path: self.text_path.clone(),
                    context_len: self.context_len,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown task kind '{other}' (expected copy, kv_recall or textfile)"
                )))
            }
        };
        Ok(TaskSpec {
            kind,
            samples: self.samples,
            seed: self.seed,
            data_vocab: self.data_vocab,
        })
    }

    /// Model dims; vocab comes from the task tokenizer.
    pub fn model_config(&self, vocab: usize) -> Result<ModelConfig> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.dim {} not divisible by model.heads {}",
                self.dim, self.heads
            )));
        }
        let d_k = self.dim / self.heads;
        let cfg = ModelConfig {
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            kv_heads: self.kv_heads,
            d_k,
            d_v: d_k,
            n_state: d_k,
            d_ff: self.d_ff,
            vocab,
            max_seq: self.max_seq,
            conv_kernel: self.conv_kernel,
            gated_ssm: self.gated_ssm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            lr: self.lr,
            steps: self.steps,
            batch_tokens: self.batch_tokens,
            alpha_skew: self.alpha_skew,
            lambda_ce: self.lambda_ce,
            lambda_logits: self.lambda_logits,
            lambda_emb: self.lambda_emb,
            seed: self.seed,
            log_every: self.log_every,
            eval_every: self.eval_every,
            freeze_t: self.freeze_t,
        }
    }
}
