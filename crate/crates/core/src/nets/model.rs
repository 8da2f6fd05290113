//! The three TransUNet variants.
//!
//! Every variant is encoder(s) -> token transformer on the 8x8 bottleneck ->
//! skip-connected decoder -> 1x1 head. They differ only in how the DWI and
//! ADC stacks enter:
//!
//! * single encoder: the stacks are concatenated channel-wise (2·S input
//!   channels) and share one encoder;
//! * dual encoder: each stack (S channels) has its own encoder with the same
//!   architecture; bottleneck maps are concatenated and reduced by a 1x1
//!   projection, and each decoder skip concatenates both encoders' stage
//!   outputs.

use candle_core::{DType, Device, Tensor, Var};

use super::config::{ModelConfig, Variant, ENCODER_STAGES};
use super::layers::{avg_pool2, upsample2, Conv, ConvBlock, LayerNorm, Linear, TransformerLayer};
use super::params::{Group, Param, ParamBuilder, Scope};
use crate::error::{Error, Result};

/// Hidden width of the transformer MLP relative to the model width.
const MLP_RATIO: usize = 4;

struct Encoder {
    stages: Vec<ConvBlock>,
}

impl Encoder {
    fn new(b: &mut ParamBuilder, group: Group, cin: usize, widths: &[usize]) -> Result<Self> {
        let mut s = Scope::root(b, group.as_str(), group);
        let mut stages = Vec::with_capacity(widths.len());
        let mut c = cin;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(ConvBlock::new(&mut s.sub(&format!("stage{i}")), c, w)?);
            c = w;
        }
        Ok(Self { stages })
    }

    /// Returns the pre-pooling output of every stage and the pooled bottleneck.
    fn forward(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            let y = stage.forward(&h)?;
            h = avg_pool2(&y)?;
            skips.push(y);
        }
        Ok((skips, h))
    }
}

struct Bottleneck {
    fusion: Option<Conv>,
    embed: Linear,
    pos_embed: Var,
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
}

/// Per-group parameter listing with the trainability implied by a
/// schedule stage.
#[derive(Clone, Debug)]
pub struct ParameterGroup {
    pub group: Group,
    pub params: Vec<Param>,
    pub trainable: bool,
}

impl ParameterGroup {
    pub fn elem_count(&self) -> usize {
        self.params.iter().map(Param::elem_count).sum()
    }
}

/// Which parameter groups receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FrozenEncoder,
    Finetune,
}

impl Stage {
    pub fn trains(self, group: Group) -> bool {
        match self {
            Stage::FrozenEncoder => !group.is_encoder(),
            Stage::Finetune => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::FrozenEncoder => "frozen",
            Stage::Finetune => "finetune",
        }
    }
}

pub struct SegModel {
    config: ModelConfig,
    params: Vec<Param>,
    encoders: Vec<Encoder>,
    bottleneck: Bottleneck,
    decoder: Vec<ConvBlock>,
    head: Conv,
    dtype: DType,
    device: Device,
}

impl SegModel {
    /// Builds an f32 model on the CPU.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: &ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut b = ParamBuilder::new(config.init_seed, dtype, device.clone());
        let s = config.slices_per_modality;
        let widths = &config.encoder_widths;
        let groups: Vec<(Group, usize)> = match config.variant {
            Variant::SingleEncoder => vec![(Group::EncoderShared, 2 * s)],
            Variant::DualEncoder => vec![(Group::EncoderDwi, s), (Group::EncoderAdc, s)],
        };
        let encoders = groups
            .iter()
            .map(|&(g, cin)| Encoder::new(&mut b, g, cin, widths))
            .collect::<Result<Vec<_>>>()?;
        let n_enc = encoders.len();
        let deepest = widths[ENCODER_STAGES - 1];
        let dim = config.transformer_dim;
        let tokens = config.grid() * config.grid();

        let bottleneck = {
            let mut t = Scope::root(&mut b, Group::Transformer.as_str(), Group::Transformer);
            let (fusion, embed_in) = match config.variant {
                Variant::SingleEncoder => (None, deepest),
                Variant::DualEncoder => (
                    Some(Conv::new(
                        &mut t.sub("fusion"),
                        n_enc * deepest,
                        config.fusion_proj_width,
                        1,
                    )?),
                    config.fusion_proj_width,
                ),
            };
            let embed = Linear::new(&mut t.sub("embed"), embed_in, dim)?;
            let pos_embed = t.normal("pos_embed", &[1, tokens, dim], 0.02)?;
            let layers = (0..config.transformer_layers)
                .map(|i| {
                    TransformerLayer::new(
                        &mut t.sub(&format!("layer{i}")),
                        dim,
                        config.transformer_heads,
                        MLP_RATIO * dim,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(&mut t.sub("norm"), dim)?;
            Bottleneck {
                fusion,
                embed,
                pos_embed,
                layers,
                norm,
            }
        };

        let decoder = {
            let mut d = Scope::root(&mut b, Group::Decoder.as_str(), Group::Decoder);
            // Built deepest first so parameter order follows data flow, then
            // reversed so `decoder[stage]` pairs with encoder stage `stage`.
            let mut cin = dim;
            let mut blocks = Vec::with_capacity(ENCODER_STAGES);
            for stage in (0..ENCODER_STAGES).rev() {
                let skip = n_enc * widths[stage];
                blocks.push(ConvBlock::new(
                    &mut d.sub(&format!("stage{stage}")),
                    cin + skip,
                    widths[stage],
                )?);
                cin = widths[stage];
            }
            blocks.reverse();
            blocks
        };

        let head = Conv::new(
            &mut Scope::root(&mut b, Group::Head.as_str(), Group::Head),
            widths[0],
            1,
            1,
        )?;

        Ok(Self {
            config: config.clone(),
            params: b.finish(),
            encoders,
            bottleneck,
            decoder,
            head,
            dtype,
            device,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::elem_count).sum()
    }

    /// Input channels of each encoder's first convolution.
    pub fn encoder_input_channels(&self) -> Vec<usize> {
        self.encoders
            .iter()
            .map(|e| e.stages[0].in_channels())
            .collect()
    }

    /// Groups present in this variant, each listing its parameters.
    pub fn parameter_groups(&self, stage: Stage) -> Vec<ParameterGroup> {
        Group::ALL
            .iter()
            .filter_map(|&g| {
                let params: Vec<Param> =
                    self.params.iter().filter(|p| p.group == g).cloned().collect();
                (!params.is_empty()).then(|| ParameterGroup {
                    group: g,
                    params,
                    trainable: stage.trains(g),
                })
            })
            .collect()
    }

    fn check_input(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let s = self.config.slices_per_modality;
        let hw = self.config.input_hw;
        let ok = x.rank() == 4 && x.dims()[1..] == [s, hw, hw];
        if !ok {
            return Err(Error::TensorShape {
                expected: format!("{name} (B, {s}, {hw}, {hw})"),
                got: format!("{:?}", x.dims()),
            });
        }
        Ok(x.to_dtype(self.dtype)?)
    }

    fn encode(&self, dwi: &Tensor, adc: &Tensor) -> Result<Vec<(Vec<Tensor>, Tensor)>> {
        let dwi = self.check_input("dwi", dwi)?;
        let adc = self.check_input("adc", adc)?;
        if dwi.dim(0)? != adc.dim(0)? {
            return Err(Error::TensorShape {
                expected: format!("matching batch sizes (dwi batch {})", dwi.dim(0)?),
                got: format!("adc batch {}", adc.dim(0)?),
            });
        }
        match self.config.variant {
            Variant::SingleEncoder => {
                let x = Tensor::cat(&[&dwi, &adc], 1)?;
                Ok(vec![self.encoders[0].forward(&x)?])
            }
            Variant::DualEncoder => Ok(vec![
                self.encoders[0].forward(&dwi)?,
                self.encoders[1].forward(&adc)?,
            ]),
        }
    }

    /// Bottleneck feature map of each encoder before any fusion.
    pub fn bottleneck_features(&self, dwi: &Tensor, adc: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.encode(dwi, adc)?.into_iter().map(|(_, b)| b).collect())
    }

    /// Logits of shape (B, 1, 128, 128).
    pub fn forward(&self, dwi: &Tensor, adc: &Tensor) -> Result<Tensor> {
        self.forward_staged(dwi, adc, Stage::Finetune)
    }

    /// Forward pass that cuts the autodiff graph at the encoder outputs when
    /// the encoders are frozen, so no encoder gradients are computed.
    pub fn forward_staged(&self, dwi: &Tensor, adc: &Tensor, stage: Stage) -> Result<Tensor> {
        let mut encoded = self.encode(dwi, adc)?;
        if stage == Stage::FrozenEncoder {
            for (skips, b) in encoded.iter_mut() {
                for s in skips.iter_mut() {
                    *s = s.detach();
                }
                *b = b.detach();
            }
        }
        let bottlenecks: Vec<&Tensor> = encoded.iter().map(|(_, b)| b).collect();
        let fused = Tensor::cat(&bottlenecks, 1)?;
        let fused = match &self.bottleneck.fusion {
            Some(proj) => proj.forward(&fused)?,
            None => fused,
        };

        let (b, c, gh, gw) = fused.dims4()?;
        let tokens = fused
            .reshape((b, c, gh * gw))?
            .transpose(1, 2)?
            .contiguous()?;
        let mut h = self
            .bottleneck
            .embed
            .forward(&tokens)?
            .broadcast_add(&self.bottleneck.pos_embed)?;
        for layer in &self.bottleneck.layers {
            h = layer.forward(&h)?;
        }
        let h = self.bottleneck.norm.forward(&h)?;
        let dim = self.config.transformer_dim;
        let mut x = h.transpose(1, 2)?.contiguous()?.reshape((b, dim, gh, gw))?;

        for stage in (0..ENCODER_STAGES).rev() {
            let up = upsample2(&x)?;
            let mut parts = vec![&up];
            parts.extend(encoded.iter().map(|(skips, _)| &skips[stage]));
            x = self.decoder[stage].forward(&Tensor::cat(&parts, 1)?)?;
        }
        self.head.forward(&x)
    }

    /// Copies of all parameter values in declaration order.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        Ok(self
            .params
            .iter()
            .map(|p| p.var.as_tensor().copy())
            .collect::<candle_core::Result<Vec<_>>>()?)
    }

    pub fn restore(&self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::TensorShape {
                expected: format!("{} parameter tensors", self.params.len()),
                got: values.len().to_string(),
            });
        }
        for (p, v) in self.params.iter().zip(values) {
            p.var.set(v)?;
        }
        Ok(())
    }
}
