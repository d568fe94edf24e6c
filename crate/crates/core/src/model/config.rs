use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::FULL_VOCAB_SIZE;

/// How the two selected router logits become gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Softmax over the two selected logits only; gates sum to 1.
    #[default]
    Renormalized,
    /// Softmax over all experts, then keep the two selected probabilities.
    Truncated,
}

fn default_top_k() -> usize {
    2
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Layers in the encoder, and again in the decoder.
    pub n_layers: usize,
    pub n_experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// MoE in every layer; otherwise only odd-indexed layers are MoE.
    #[serde(default = "default_true")]
    pub moe_every_layer: bool,
    pub n_tasks: usize,
    pub d_task: usize,
    #[serde(default)]
    pub gating: GateMode,
    /// Weight of the optional importance-balancing loss; 0 disables it.
    #[serde(default)]
    pub balance_coef: f64,
}

impl MoeConfig {
    /// Desk-scale default.
    pub fn toy(vocab_size: usize, n_tasks: usize) -> Self {
        MoeConfig {
            d_model: 64,
            d_ff: 256,
            n_heads: 2,
            n_layers: 2,
            n_experts: 8,
            top_k: 2,
            vocab_size,
            max_len: 32,
            moe_every_layer: true,
            n_tasks,
            d_task: 16,
            gating: GateMode::Renormalized,
            balance_coef: 0.0,
        }
    }

    /// Full-size preset: d=1024, d_ff=4096, 8 heads, 3+3 layers, 32k vocabulary,
    /// 108 target-language tasks.
    pub fn full_scale(n_experts: usize) -> Self {
        MoeConfig {
            d_model: 1024,
            d_ff: 4096,
            n_heads: 8,
            n_layers: 3,
            n_experts,
            top_k: 2,
            vocab_size: FULL_VOCAB_SIZE,
            max_len: 128,
            moe_every_layer: true,
            n_tasks: 108,
            d_task: 64,
            gating: GateMode::Renormalized,
            balance_coef: 0.0,
        }
    }

    /// A plain transformer: one expert per layer, no routers.
    pub fn dense(mut self) -> Self {
        self.n_experts = 1;
        self.top_k = 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_experts == 0 {
            return fail("n_experts must be at least 1".into());
        }
        if self.top_k > self.n_experts {
            return fail(format!("top_k {} exceeds n_experts {}", self.top_k, self.n_experts));
        }
        if self.top_k != self.n_experts.min(2) {
            return fail(format!(
                "top_k must be 2 (or 1 for a single-expert dense model), got {}",
                self.top_k
            ));
        }
        if self.max_len < 3 {
            return fail(format!("max_len {} is below the minimum of 3", self.max_len));
        }
        if self.vocab_size == 0 || self.n_tasks == 0 || self.d_task == 0 {
            return fail("vocab_size, n_tasks and d_task must be positive".into());
        }
        if !(self.balance_coef >= 0.0 && self.balance_coef.is_finite()) {
            return fail(format!("balance_coef must be a finite non-negative number, got {}", self.balance_coef));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Whether layer `layer` (of either side) has an expert bank and router.
    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.n_experts > 1 && (self.moe_every_layer || layer % 2 == 1)
    }

    /// Exact number of trainable parameters. Closed form, no allocation.
    pub fn param_count(&self) -> u64 {
        let d = self.d_model as u64;
        let f = self.d_ff as u64;
        let v = self.vocab_size as u64;
        let e = self.n_experts as u64;
        let linear = |i: u64, o: u64| i * o + o;
        let attention = 4 * linear(d, d) - d;
        let norm = 2 * d;
        let expert = linear(d, f) + linear(f, d);
        let router = self.n_tasks as u64 * self.d_task as u64 + self.d_task as u64 * e;
        let ffn = |layer: usize| {
            if self.is_moe_layer(layer) {
                e * expert + router
            } else {
                expert
            }
        };
        let encoder: u64 = (0..self.n_layers).map(|l| attention + 2 * norm + ffn(l)).sum();
        let decoder: u64 = (0..self.n_layers).map(|l| 2 * attention + 3 * norm + ffn(l)).sum();
        let embeddings = v * d;
        let output = linear(d, v);
        embeddings + output + encoder + decoder + 2 * norm
    }
}
