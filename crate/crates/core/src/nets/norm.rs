//! Fused group normalization (per-channel affine included) as a custom op.
//!
//! Composing it from broadcast primitives costs a dozen strided passes per
//! call in both directions; this does one pass for statistics and one for
//! the output, and the backward pass is a single kernel as well.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp3, DType, Layout, Result, Shape, Tensor};

/// Normalizes `x` (B, C, H, W) over `groups` channel groups, then applies
/// `weight` and `bias` (both (C,)) per channel.
pub fn group_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        bail!("group_norm: {c} channels not divisible into {groups} groups")
    }
    if weight.dims() != [c] || bias.dims() != [c] {
        bail!("group_norm: affine parameters must have shape ({c},)")
    }
    x.contiguous()?.apply_op3(
        &weight.contiguous()?,
        &bias.contiguous()?,
        GroupNormOp { groups, eps },
    )
}

trait Real: Copy + Default + 'static {
    fn f(self) -> f64;
    fn of(v: f64) -> Self;
}

impl Real for f32 {
    fn f(self) -> f64 {
        self as f64
    }
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn f(self) -> f64 {
        self
    }
    fn of(v: f64) -> Self {
        v
    }
}

#[derive(Clone, Copy)]
struct Dims {
    channels: usize,
    plane: usize,
    groups: usize,
}

impl Dims {
    fn of(l: &Layout, groups: usize) -> Result<Self> {
        let (_, channels, h, w) = l.shape().dims4()?;
        Ok(Self {
            channels,
            plane: h * w,
            groups,
        })
    }

    fn per_group(&self) -> usize {
        self.channels / self.groups
    }
}

/// Mean and 1/sqrt(var + eps) of one group.
fn stats<T: Real>(x: &[T], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.f()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.f() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn forward_kernel<T: Real>(x: &[T], w: &[T], b: &[T], d: Dims, eps: f64) -> Vec<T> {
    let cg = d.per_group();
    let gl = cg * d.plane;
    let mut out = vec![T::default(); x.len()];
    for (n, (xs, ys)) in x.chunks_exact(gl).zip(out.chunks_exact_mut(gl)).enumerate() {
        let (mean, rstd) = stats(xs, eps);
        let g = n % d.groups;
        for (j, (xc, yc)) in xs.chunks_exact(d.plane).zip(ys.chunks_exact_mut(d.plane)).enumerate() {
            let c = g * cg + j;
            let scale = w[c].f() * rstd;
            let shift = b[c].f() - mean * scale;
            for (y, &v) in yc.iter_mut().zip(xc) {
                *y = T::of(v.f() * scale + shift);
            }
        }
    }
    out
}

/// Returns `[dx..., dweight..., dbias...]` in one flat buffer.
fn backward_kernel<T: Real>(x: &[T], w: &[T], dy: &[T], d: Dims, eps: f64) -> Vec<T> {
    let cg = d.per_group();
    let gl = cg * d.plane;
    let mut dx = vec![T::default(); x.len() + 2 * d.channels];
    let mut dw = vec![0f64; d.channels];
    let mut db = vec![0f64; d.channels];
    for (n, (xs, gs)) in x.chunks_exact(gl).zip(dy.chunks_exact(gl)).enumerate() {
        let (mean, rstd) = stats(xs, eps);
        let g = n % d.groups;
        // Means over the group of dxhat and dxhat * xhat.
        let (mut m1, mut m2) = (0.0, 0.0);
        for (j, (xc, gc)) in xs.chunks_exact(d.plane).zip(gs.chunks_exact(d.plane)).enumerate() {
            let c = g * cg + j;
            let (mut sg, mut sgx) = (0.0, 0.0);
            for (&v, &gv) in xc.iter().zip(gc) {
                let xhat = (v.f() - mean) * rstd;
                sg += gv.f();
                sgx += gv.f() * xhat;
            }
            db[c] += sg;
            dw[c] += sgx;
            m1 += w[c].f() * sg;
            m2 += w[c].f() * sgx;
        }
        m1 /= gl as f64;
        m2 /= gl as f64;
        let out = &mut dx[n * gl..][..gl];
        for (j, ((xc, gc), oc)) in xs
            .chunks_exact(d.plane)
            .zip(gs.chunks_exact(d.plane))
            .zip(out.chunks_exact_mut(d.plane))
            .enumerate()
        {
            let wc = w[g * cg + j].f();
            for ((&v, &gv), o) in xc.iter().zip(gc).zip(oc) {
                let xhat = (v.f() - mean) * rstd;
                *o = T::of(rstd * (wc * gv.f() - m1 - xhat * m2));
            }
        }
    }
    let tail = &mut dx[x.len()..];
    for c in 0..d.channels {
        tail[c] = T::of(dw[c]);
        tail[d.channels + c] = T::of(db[c]);
    }
    dx
}

fn slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => bail!("group_norm: operand must be contiguous"),
    }
}

#[derive(Clone, Copy)]
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = Dims::of(l1, self.groups)?;
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(forward_kernel(
                slice::<f32>(s1, l1)?,
                slice::<f32>(s2, l2)?,
                slice::<f32>(s3, l3)?,
                d,
                self.eps,
            )),
            DType::F64 => CpuStorage::F64(forward_kernel(
                slice::<f64>(s1, l1)?,
                slice::<f64>(s2, l2)?,
                slice::<f64>(s3, l3)?,
                d,
                self.eps,
            )),
            dt => bail!("group_norm: unsupported dtype {dt:?}"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let flat = x.apply_op3_no_bwd(weight, &grad_res.contiguous()?, &GroupNormGrad(*self))?;
        let n = x.elem_count();
        let c = weight.elem_count();
        let dx = flat.narrow(0, 0, n)?.reshape(x.shape())?;
        let dw = flat.narrow(0, n, c)?;
        let db = flat.narrow(0, n + c, c)?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

/// (x, weight, grad_out) -> flat [dx, dweight, dbias]
struct GroupNormGrad(GroupNormOp);

impl CustomOp3 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "group-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = Dims::of(l1, self.0.groups)?;
        let len = l1.shape().elem_count() + 2 * d.channels;
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(backward_kernel(
                slice::<f32>(s1, l1)?,
                slice::<f32>(s2, l2)?,
                slice::<f32>(s3, l3)?,
                d,
                self.0.eps,
            )),
            DType::F64 => CpuStorage::F64(backward_kernel(
                slice::<f64>(s1, l1)?,
                slice::<f64>(s2, l2)?,
                slice::<f64>(s3, l3)?,
                d,
                self.0.eps,
            )),
            dt => bail!("group_norm: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from(len)))
    }
}
