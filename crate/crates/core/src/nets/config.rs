use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial size every network input is resized to.
pub const INPUT_HW: usize = 128;
/// Downsampling stages in each encoder; 128 / 2^4 gives an 8x8 token grid.
pub const ENCODER_STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// DWI and ADC stacks concatenated at the input, one shared encoder.
    SingleEncoder,
    /// One encoder per modality, fused at the bottleneck.
    DualEncoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub slices_per_modality: usize,
    pub encoder_widths: Vec<usize>,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_dim: usize,
    /// Output channels of the 1x1 fusion projection (dual variant only).
    pub fusion_proj_width: usize,
    pub input_hw: usize,
    /// Seed of the parameter initialization stream.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DualEncoder,
            slices_per_modality: 3,
            encoder_widths: vec![16, 32, 64, 128],
            transformer_layers: 4,
            transformer_heads: 4,
            transformer_dim: 256,
            fusion_proj_width: 128,
            input_hw: INPUT_HW,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU tests and desk-scale experiments.
    pub fn tiny(variant: Variant, slices_per_modality: usize) -> Self {
        Self {
            variant,
            slices_per_modality,
            encoder_widths: vec![4, 8, 16, 32],
            transformer_layers: 1,
            transformer_heads: 2,
            transformer_dim: 32,
            fusion_proj_width: 32,
            input_hw: INPUT_HW,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModelConfig(msg));
        if !matches!(self.slices_per_modality, 1 | 3) {
            return bad(format!(
                "slices_per_modality must be 1 or 3, got {}",
                self.slices_per_modality
            ));
        }
        if self.encoder_widths.len() != ENCODER_STAGES {
            return bad(format!(
                "encoder_widths must have {ENCODER_STAGES} entries, got {}",
                self.encoder_widths.len()
            ));
        }
        if self.encoder_widths[0] == 0 || self.encoder_widths.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "encoder_widths must be positive and strictly increasing, got {:?}",
                self.encoder_widths
            ));
        }
        if self.transformer_heads == 0 || self.transformer_dim % self.transformer_heads != 0 {
            return bad(format!(
                "transformer_dim {} is not divisible by transformer_heads {}",
                self.transformer_dim, self.transformer_heads
            ));
        }
        if self.transformer_layers == 0 {
            return bad("transformer_layers must be at least 1".into());
        }
        if self.variant == Variant::DualEncoder && self.fusion_proj_width == 0 {
            return bad("fusion_proj_width must be positive".into());
        }
        if self.input_hw != INPUT_HW {
            return bad(format!("input_hw must be {INPUT_HW}, got {}", self.input_hw));
        }
        Ok(())
    }

    pub fn encoder_count(&self) -> usize {
        match self.variant {
            Variant::SingleEncoder => 1,
            Variant::DualEncoder => 2,
        }
    }

    /// Side length of the bottleneck token grid.
    pub fn grid(&self) -> usize {
        self.input_hw >> ENCODER_STAGES
    }

    /// Row label used in report tables.
    pub fn label(&self) -> String {
        let slices = if self.slices_per_modality == 1 {
            "Single Slice"
        } else {
            "Three Slices"
        };
        match self.variant {
            Variant::SingleEncoder => format!("TransUNet (Single Encoder, {slices})"),
            Variant::DualEncoder => format!("Dual-Encoder TransUNet ({slices})"),
        }
    }
}
