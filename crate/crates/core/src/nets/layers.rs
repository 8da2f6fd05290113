//! Building blocks shared by every variant. Everything here is composed from
//! differentiable candle primitives plus the fused convolution and group
//! norm ops.

use candle_core::{Tensor, Var, D};

use super::conv::conv2d_same;
use super::norm::group_norm;
use super::params::Scope;
use crate::error::Result;

const NORM_EPS: f64 = 1e-5;

pub(crate) struct Conv {
    weight: Var,
    bias: Var,
}

impl Conv {
    pub fn new(s: &mut Scope, cin: usize, cout: usize, k: usize) -> Result<Self> {
        // He-normal for ReLU networks.
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Ok(Self {
            weight: s.normal("weight", &[cout, cin, k, k], std)?,
            bias: s.zeros("bias", &[cout])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv2d_same(x, &self.weight, &self.bias)?)
    }
}

pub(crate) struct GroupNorm {
    weight: Var,
    bias: Var,
    groups: usize,
}

/// Largest divisor of `channels` that is at most 8.
fn group_count(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: s.ones("weight", &[channels])?,
            bias: s.zeros("bias", &[channels])?,
            groups: group_count(channels),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(group_norm(x, &self.weight, &self.bias, self.groups, NORM_EPS)?)
    }
}

/// (conv3x3 -> group norm -> ReLU) twice.
pub(crate) struct ConvBlock {
    conv1: Conv,
    norm1: GroupNorm,
    conv2: Conv,
    norm2: GroupNorm,
}

impl ConvBlock {
    pub fn new(s: &mut Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(&mut s.sub("conv1"), cin, cout, 3)?,
            norm1: GroupNorm::new(&mut s.sub("norm1"), cout)?,
            conv2: Conv::new(&mut s.sub("conv2"), cout, cout, 3)?,
            norm2: GroupNorm::new(&mut s.sub("norm2"), cout)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        Ok(self.norm2.forward(&self.conv2.forward(&h)?)?.relu()?)
    }
}

/// 2x2 average pooling, stride 2.
pub(crate) fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let y = x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .sum(5)?
        .sum(3)?;
    Ok((y * 0.25)?)
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

pub(crate) struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(s: &mut Scope, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Ok(Self {
            weight: s.uniform("weight", &[fan_out, fan_in], bound)?,
            bias: s.zeros("bias", &[fan_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?)
    }
}

pub(crate) struct LayerNorm {
    weight: Var,
    bias: Var,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.ones("weight", &[dim])?,
            bias: s.zeros("bias", &[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // Softmax is shift invariant, so the max needs no gradient.
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub(crate) struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(s: &mut Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&mut s.sub("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&mut s.sub("proj"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, dim) = x.dims3()?;
        let hd = dim / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, dim))?;
        self.proj.forward(&out)
    }
}

pub(crate) struct TransformerLayer {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerLayer {
    pub fn new(s: &mut Scope, dim: usize, heads: usize, mlp_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut s.sub("norm1"), dim)?,
            attn: SelfAttention::new(&mut s.sub("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), dim)?,
            fc1: Linear::new(&mut s.sub("fc1"), dim, mlp_dim)?,
            fc2: Linear::new(&mut s.sub("fc2"), mlp_dim, dim)?,
        })
    }

    /// Pre-norm residual block.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let m = self.fc1.forward(&self.norm2.forward(&h)?)?.gelu_erf()?;
        Ok((&h + self.fc2.forward(&m)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn group_count_divides_channels() {
        assert_eq!(group_count(4), 4);
        assert_eq!(group_count(12), 6);
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(7), 7);
        assert_eq!(group_count(11), 1);
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = Tensor::arange(0f32, 16., &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 4, 4))
            .unwrap();
        let p = avg_pool2(&x).unwrap();
        assert_eq!(p.dims(), &[1, 1, 2, 2]);
        assert_eq!(
            p.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![2.5, 4.5, 10.5, 12.5]
        );
        let u = upsample2(&p).unwrap();
        assert_eq!(u.dims(), &[1, 1, 4, 4]);
        let row0: Vec<f32> = u.get(0).unwrap().get(0).unwrap().get(0).unwrap().to_vec1().unwrap();
        assert_eq!(row0, vec![2.5, 2.5, 4.5, 4.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f32, 2., 3.], [1000., 1000., -1000.]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }
}
