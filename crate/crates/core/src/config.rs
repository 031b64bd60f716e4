use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every hyperparameter and ablation switch. A config plus a seed fully
/// determines a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Input steps P.
    pub input_steps: usize,
    /// Output steps Q.
    pub output_steps: usize,
    /// Time granularity in minutes.
    pub delta_minutes: u32,

    /// Observed features per node per step.
    pub f_input: usize,
    /// Predicted features per node per step.
    pub f_output: usize,
    /// Width of each fused block; the fused vector is 3x this.
    pub f_fuse: usize,
    /// Spatial node embedding width.
    pub f_spatial_emb: usize,
    /// Temporal slot embedding width.
    pub f_temporal_emb: usize,
    /// Semantic GCN output width.
    pub f_semantic: usize,
    /// Adjacent-trend GCN output width.
    pub f_adjacent: usize,
    /// Reachability GCN output width (per input step).
    pub f_reach: usize,
    /// Encoder GRU hidden width.
    pub f_enc_hidden: usize,
    /// Decoder GRU hidden width.
    pub f_dec_hidden: usize,
    /// Temporal attention score width.
    pub f_attn: usize,
    /// Temporal attention heads.
    pub heads: usize,

    pub use_temporal_emb: bool,
    pub use_spatial_emb: bool,
    pub use_adjacent: bool,
    pub use_semantic: bool,
    pub use_reachability: bool,
    pub use_temporal_attention: bool,

    /// Skip the ReLU on the output head (z-scored targets are signed).
    pub linear_head: bool,
    /// Feed attention matrices through the spectral normalization instead of
    /// using them directly.
    pub attention_laplacian: bool,
    /// Close the weekly slot line graph into a cycle.
    pub week_wrap: bool,

    /// Gaussian-kernel adjacency threshold.
    pub kappa: f64,
    /// Mean network speed used to derive travel times; when absent it is
    /// estimated from the training split.
    pub mean_speed_kmh: Option<f64>,

    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Window stride when slicing the series.
    pub stride: usize,
    /// Scheduled-sampling decay constant.
    pub tau: f64,
    /// Epochs without validation improvement before the learning rate halves.
    pub patience: usize,
    /// Epochs without validation improvement before training stops.
    pub stall: usize,

    pub embedding: EmbeddingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_steps: 3,
            output_steps: 3,
            delta_minutes: 5,
            f_input: 1,
            f_output: 1,
            f_fuse: 256,
            f_spatial_emb: 64,
            f_temporal_emb: 64,
            f_semantic: 64,
            f_adjacent: 64,
            f_reach: 64,
            f_enc_hidden: 64,
            f_dec_hidden: 64,
            f_attn: 64,
            heads: 5,
            use_temporal_emb: true,
            use_spatial_emb: true,
            use_adjacent: true,
            use_semantic: true,
            use_reachability: true,
            use_temporal_attention: true,
            linear_head: false,
            attention_laplacian: false,
            week_wrap: false,
            kappa: 0.1,
            mean_speed_kmh: None,
            seed: 1,
            learning_rate: 0.001,
            batch_size: 16,
            max_epochs: 1000,
            stride: 1,
            tau: 2000.0,
            patience: 10,
            stall: 50,
            embedding: EmbeddingConfig::default(),
        }
    }
}

/// Hyperparameters for the random-walk embedding stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    pub negatives: usize,
    pub return_p: f64,
    pub in_out_q: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            walks_per_node: 10,
            walk_length: 80,
            window: 10,
            negatives: 5,
            return_p: 1.0,
            in_out_q: 1.0,
            epochs: 5,
            learning_rate: 0.025,
        }
    }
}

impl ModelConfig {
    /// Time slots per day implied by the granularity.
    pub fn slots_per_day(&self) -> usize {
        (24 * 60 / self.delta_minutes) as usize
    }

    /// Collect every problem at once so a bad config surfaces one error
    /// listing all of them, before any compute starts.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let widths = [
            ("input_steps", self.input_steps),
            ("output_steps", self.output_steps),
            ("f_input", self.f_input),
            ("f_output", self.f_output),
            ("f_fuse", self.f_fuse),
            ("f_spatial_emb", self.f_spatial_emb),
            ("f_temporal_emb", self.f_temporal_emb),
            ("f_semantic", self.f_semantic),
            ("f_adjacent", self.f_adjacent),
            ("f_reach", self.f_reach),
            ("f_enc_hidden", self.f_enc_hidden),
            ("f_dec_hidden", self.f_dec_hidden),
            ("f_attn", self.f_attn),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
            ("stride", self.stride),
        ];
        for (name, v) in widths {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if self.f_output > self.f_input {
            problems.push(format!(
                "f_output ({}) cannot exceed f_input ({})",
                self.f_output, self.f_input
            ));
        }
        if self.delta_minutes == 0 || 24 * 60 % self.delta_minutes != 0 {
            problems.push(format!(
                "delta_minutes ({}) must divide a day evenly",
                self.delta_minutes
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            problems.push("learning_rate must be finite and >= 0".into());
        }
        if !(self.tau > 0.0) {
            problems.push("tau must be > 0".into());
        }
        if !(self.kappa >= 0.0) {
            problems.push("kappa must be >= 0".into());
        }
        if let Some(s) = self.mean_speed_kmh {
            if !(s > 0.0) {
                problems.push("mean_speed_kmh must be > 0".into());
            }
        }
        if self.embedding.walk_length < 2 {
            problems.push("embedding.walk_length must be >= 2".into());
        }
        if !(self.embedding.return_p > 0.0 && self.embedding.in_out_q > 0.0) {
            problems.push("embedding.return_p and in_out_q must be > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
