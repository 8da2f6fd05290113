//! Named, grouped parameter storage with seeded initialization.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::Result;

/// Parameter partition used by the freeze/finetune schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    EncoderShared,
    EncoderDwi,
    EncoderAdc,
    Transformer,
    Decoder,
    Head,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::EncoderShared,
        Group::EncoderDwi,
        Group::EncoderAdc,
        Group::Transformer,
        Group::Decoder,
        Group::Head,
    ];

    pub fn is_encoder(self) -> bool {
        matches!(
            self,
            Group::EncoderShared | Group::EncoderDwi | Group::EncoderAdc
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::EncoderShared => "encoder_shared",
            Group::EncoderDwi => "encoder_dwi",
            Group::EncoderAdc => "encoder_adc",
            Group::Transformer => "transformer",
            Group::Decoder => "decoder",
            Group::Head => "head",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub var: Var,
}

impl Param {
    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }
}

/// Creates parameters in a fixed order from one seeded stream, so a model
/// config plus seed always produces the same initial weights.
pub(crate) struct ParamBuilder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    fn push(&mut self, name: String, group: Group, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push(Param {
            name,
            group,
            var: var.clone(),
        });
        Ok(var)
    }

    pub fn normal(&mut self, name: String, group: Group, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is positive");
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name, group, values, shape)
    }

    pub fn uniform(&mut self, name: String, group: Group, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound is finite");
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name, group, values, shape)
    }

    pub fn constant(&mut self, name: String, group: Group, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.push(name, group, vec![value; n], shape)
    }

    pub fn finish(self) -> Vec<Param> {
        self.params
    }
}

/// Prefix-scoped view over a [`ParamBuilder`].
pub(crate) struct Scope<'a> {
    builder: &'a mut ParamBuilder,
    prefix: String,
    group: Group,
}

impl<'a> Scope<'a> {
    pub fn root(builder: &'a mut ParamBuilder, prefix: &str, group: Group) -> Self {
        Self {
            builder,
            prefix: prefix.to_string(),
            group,
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        Scope {
            builder: self.builder,
            prefix: format!("{}.{}", self.prefix, name),
            group: self.group,
        }
    }

    fn full(&self, name: &str) -> String {
        format!("{}.{}", self.prefix, name)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let full = self.full(name);
        self.builder.normal(full, self.group, shape, std)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let full = self.full(name);
        self.builder.uniform(full, self.group, shape, bound)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let full = self.full(name);
        self.builder.constant(full, self.group, shape, 0.0)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let full = self.full(name);
        self.builder.constant(full, self.group, shape, 1.0)
    }
}
