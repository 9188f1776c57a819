//! Fine-tuning hyperparameters used to produce the adapters this crate merges.
//! Only `lora_rank` and `lora_alpha` feed computation (via the LoRA scale);
//! the rest are kept as provenance.

use serde::{Deserialize, Serialize};

pub const DEFAULT_LORA_RANK: usize = 64;
pub const DEFAULT_LORA_ALPHA: f32 = 32.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparameters {
    pub optimizer: String,
    pub lr_scheduler: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u32,
    pub micro_batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub lora_dropout: f64,
    pub lora_target_linear: bool,
    pub quantization_bits: u32,
    /// Loss is computed on answer tokens only.
    pub loss_on_answer_only: bool,
}

impl Default for TrainingHyperparameters {
    fn default() -> Self {
        Self {
            optimizer: "AdamW".into(),
            lr_scheduler: "cosine".into(),
            learning_rate: 2e-4,
            weight_decay: 0.01,
            warmup_steps: 10,
            micro_batch_size: 1,
            gradient_accumulation_steps: 4,
            lora_rank: DEFAULT_LORA_RANK,
            lora_alpha: DEFAULT_LORA_ALPHA,
            lora_dropout: 0.05,
            lora_target_linear: true,
            quantization_bits: 4,
            loss_on_answer_only: true,
        }
    }
}

impl TrainingHyperparameters {
    /// `alpha / rank`, the multiplier trainers apply to `A·B`.
    pub fn lora_scale(&self) -> f32 {
        self.lora_alpha / self.lora_rank as f32
    }
}
