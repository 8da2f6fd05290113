//! Same-padded, stride-1 2D convolution as a candle custom op.
//!
//! The stock CPU convolution goes through im2col + gemm, which is slow for
//! the narrow channel counts used here. These kernels shift-and-accumulate
//! over zero-padded planes instead; the backward pass reuses the forward
//! kernel for the input gradient and a tap-wise dot product for the
//! weight gradient.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp2, CustomOp3, DType, Layout, Result, Shape, Tensor};
use std::ops::{AddAssign, Mul};

/// Convolves `input` (B, Ci, H, W) with `weight` (Co, Ci, K, K), K odd,
/// zero padding K/2, stride 1, and adds `bias` (Co,). Output is (B, Co, H, W).
pub fn conv2d_same(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, ci, _, _) = input.dims4()?;
    let (_, wci, kh, kw) = weight.dims4()?;
    if kh != kw || kh % 2 == 0 {
        bail!("conv2d_same: kernel must be square and odd, got {kh}x{kw}")
    }
    if wci != ci {
        bail!("conv2d_same: input has {ci} channels, weight expects {wci}")
    }
    if bias.dims() != [weight.dim(0)?] {
        bail!("conv2d_same: bias must have shape ({},)", weight.dim(0)?)
    }
    if input.dtype() != weight.dtype() || input.dtype() != bias.dtype() {
        bail!("conv2d_same: dtype mismatch")
    }
    input
        .contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, ConvSame)
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geometry {
    fn pad(&self) -> usize {
        self.k / 2
    }
}

trait Elem: Copy + Default + Mul<Output = Self> + AddAssign + 'static {}
impl Elem for f32 {}
impl Elem for f64 {}

/// Copies each (H, W) plane into a zero-bordered (H+2p, W+2p) plane.
fn pad_planes<T: Elem>(src: &[T], planes: usize, g: Geometry) -> Vec<T> {
    let p = g.pad();
    let (hp, wp) = (g.h + 2 * p, g.w + 2 * p);
    let mut out = vec![T::default(); planes * hp * wp];
    for (n, plane) in src.chunks_exact(g.h * g.w).enumerate() {
        let dst = &mut out[n * hp * wp..][..hp * wp];
        for (y, row) in plane.chunks_exact(g.w).enumerate() {
            dst[(y + p) * wp + p..][..g.w].copy_from_slice(row);
        }
    }
    out
}

/// Length of the flat sweep over an (H, W) output laid out with row stride
/// `W+2p`; every tap offset stays inside the padded plane.
fn sweep_len(g: Geometry) -> usize {
    (g.h - 1) * (g.w + 2 * g.pad()) + g.w
}

/// Output channels computed together, sharing each input load.
const OC_BLOCK: usize = 4;
/// Accumulator tile (elements per channel) kept cache-resident.
const TILE: usize = 1024;

/// out[b,o,y,x] = sum_{i,ky,kx} w[o,i,ky,kx] * in[b,i,y+ky-p,x+kx-p]
///
/// Works on padded planes so each tap is a contiguous multiply-accumulate
/// over a tile of the flat sweep; the padding columns are dropped at the end.
fn forward_kernel<T: Elem>(input: &[T], weight: &[T], bias: Option<&[T]>, g: Geometry) -> Vec<T> {
    let p = g.pad();
    let (hp, wp) = (g.h + 2 * p, g.w + 2 * p);
    let kk = g.k * g.k;
    let xp = pad_planes(input, g.batch * g.cin, g);
    let len = sweep_len(g);
    let mut acc = vec![T::default(); OC_BLOCK * len];
    let mut out = vec![T::default(); g.batch * g.cout * g.h * g.w];
    for b in 0..g.batch {
        for o0 in (0..g.cout).step_by(OC_BLOCK) {
            let nb = OC_BLOCK.min(g.cout - o0);
            acc.fill(T::default());
            for start in (0..len).step_by(TILE) {
                let n = TILE.min(len - start);
                let (a0, rest) = acc.split_at_mut(len);
                let (a1, rest) = rest.split_at_mut(len);
                let (a2, a3) = rest.split_at_mut(len);
                let (a0, a1, a2, a3) = (
                    &mut a0[start..start + n],
                    &mut a1[start..start + n],
                    &mut a2[start..start + n],
                    &mut a3[start..start + n],
                );
                for i in 0..g.cin {
                    let src = &xp[(b * g.cin + i) * hp * wp..][..hp * wp];
                    for t in 0..kk {
                        let (ky, kx) = (t / g.k, t % g.k);
                        let wv = |j: usize| {
                            if j < nb {
                                weight[((o0 + j) * g.cin + i) * kk + t]
                            } else {
                                T::default()
                            }
                        };
                        let (w0, w1, w2, w3) = (wv(0), wv(1), wv(2), wv(3));
                        let s = &src[ky * wp + kx + start..][..n];
                        for j in 0..n {
                            let v = s[j];
                            a0[j] += w0 * v;
                            a1[j] += w1 * v;
                            a2[j] += w2 * v;
                            a3[j] += w3 * v;
                        }
                    }
                }
            }
            for j in 0..nb {
                let plane = &acc[j * len..][..len];
                let bv = bias.map_or(T::default(), |bs| bs[o0 + j]);
                let dst = &mut out[(b * g.cout + o0 + j) * g.h * g.w..][..g.h * g.w];
                for (y, row) in dst.chunks_exact_mut(g.w).enumerate() {
                    for (d, &a) in row.iter_mut().zip(&plane[y * wp..][..g.w]) {
                        *d = a;
                        *d += bv;
                    }
                }
            }
        }
    }
    out
}

/// The input gradient is the same-padded convolution of the output
/// gradient with the channel-transposed, spatially flipped kernel.
fn input_grad_kernel<T: Elem>(grad_out: &[T], weight: &[T], g: Geometry) -> Vec<T> {
    let k = g.k;
    let mut flipped = vec![T::default(); weight.len()];
    for o in 0..g.cout {
        for i in 0..g.cin {
            for ky in 0..k {
                for kx in 0..k {
                    flipped[((i * g.cout + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        weight[((o * g.cin + i) * k + ky) * k + kx];
                }
            }
        }
    }
    let t = Geometry {
        cin: g.cout,
        cout: g.cin,
        ..g
    };
    forward_kernel(grad_out, &flipped, None, t)
}

#[inline]
fn dot<T: Elem>(a: &[T], b: &[T]) -> T {
    // Eight independent lanes let the compiler vectorize the reduction while
    // keeping a fixed summation order.
    let mut lanes = [T::default(); 8];
    let ac = a.chunks_exact(8);
    let bc = b.chunks_exact(8);
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = T::default();
    for (&x, &y) in ar.iter().zip(br) {
        acc += x * y;
    }
    for l in lanes {
        acc += l;
    }
    acc
}

/// gw[o,i,ky,kx] = sum_{b,y,x} gout[b,o,y,x] * in[b,i,y+ky-p,x+kx-p]
fn weight_grad_kernel<T: Elem>(input: &[T], grad_out: &[T], g: Geometry) -> Vec<T> {
    let p = g.pad();
    let (hp, wp) = (g.h + 2 * p, g.w + 2 * p);
    let xp = pad_planes(input, g.batch * g.cin, g);
    let len = sweep_len(g);
    // Output gradient in the padded row stride, zeros in the extra columns.
    let mut gp = vec![T::default(); g.batch * g.cout * len];
    for (n, plane) in grad_out.chunks_exact(g.h * g.w).enumerate() {
        let dst = &mut gp[n * len..][..len];
        for (y, row) in plane.chunks_exact(g.w).enumerate() {
            dst[y * wp..][..g.w].copy_from_slice(row);
        }
    }
    let mut gw = vec![T::default(); g.cout * g.cin * g.k * g.k];
    for o in 0..g.cout {
        for i in 0..g.cin {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let mut acc = T::default();
                    for b in 0..g.batch {
                        let go = &gp[(b * g.cout + o) * len..][..len];
                        let src = &xp[(b * g.cin + i) * hp * wp + ky * wp + kx..][..len];
                        acc += dot(go, src);
                    }
                    gw[((o * g.cin + i) * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    }
    gw
}

fn contiguous<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => bail!("conv2d_same: operand must be contiguous"),
    }
}

struct ConvSame;

impl CustomOp3 for ConvSame {
    fn name(&self) -> &'static str {
        "conv2d-same"
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
        let (batch, cin, h, w) = l1.shape().dims4()?;
        let (cout, _, k, _) = l2.shape().dims4()?;
        let g = Geometry {
            batch,
            cin,
            cout,
            h,
            w,
            k,
        };
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(forward_kernel(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                Some(contiguous::<f32>(s3, l3)?),
                g,
            )),
            DType::F64 => CpuStorage::F64(forward_kernel(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                Some(contiguous::<f64>(s3, l3)?),
                g,
            )),
            dt => bail!("conv2d_same: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from((batch, cout, h, w))))
    }

    fn bwd(
        &self,
        input: &Tensor,
        weight: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad_res = grad_res.contiguous()?;
        let gin = grad_res.apply_op2_no_bwd(weight, &InputGrad)?;
        let gw = input.apply_op2_no_bwd(&grad_res, &WeightGrad { k: weight.dim(2)? })?;
        let (b, c, h, w) = grad_res.dims4()?;
        let gb = grad_res.reshape((b, c, h * w))?.sum(2)?.sum(0)?;
        Ok((Some(gin), Some(gw), Some(gb)))
    }
}

/// (grad_out, weight) -> grad_input
struct InputGrad;

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "conv2d-same-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (batch, cout, h, w) = l1.shape().dims4()?;
        let (_, cin, k, _) = l2.shape().dims4()?;
        let g = Geometry {
            batch,
            cin,
            cout,
            h,
            w,
            k,
        };
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(input_grad_kernel(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                g,
            )),
            DType::F64 => CpuStorage::F64(input_grad_kernel(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                g,
            )),
            dt => bail!("conv2d_same: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from((batch, cin, h, w))))
    }
}

/// (input, grad_out) -> grad_weight
struct WeightGrad {
    k: usize,
}

impl CustomOp2 for WeightGrad {
    fn name(&self) -> &'static str {
        "conv2d-same-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (batch, cin, h, w) = l1.shape().dims4()?;
        let (_, cout, _, _) = l2.shape().dims4()?;
        let g = Geometry {
            batch,
            cin,
            cout,
            h,
            w,
            k: self.k,
        };
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(weight_grad_kernel(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                g,
            )),
            DType::F64 => CpuStorage::F64(weight_grad_kernel(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                g,
            )),
            dt => bail!("conv2d_same: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from((cout, cin, self.k, self.k))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn forward_matches_stock_convolution() {
        for k in [1usize, 3] {
            let x = rand(&[2, 3, 7, 9], 1);
            let w = rand(&[4, 3, k, k], 2);
            let b = rand(&[4], 6);
            let ours = conv2d_same(&x, &w, &b).unwrap();
            let reference = x
                .conv2d(&w, k / 2, 1, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            let diff = (ours - reference)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(diff < 1e-12, "k={k} diff={diff}");
        }
    }

    #[test]
    fn gradients_match_stock_convolution() {
        let x = Var::from_tensor(&rand(&[2, 3, 6, 5], 3)).unwrap();
        let w = Var::from_tensor(&rand(&[4, 3, 3, 3], 4)).unwrap();
        let b = Var::from_tensor(&rand(&[4], 7)).unwrap();
        let probe = rand(&[2, 4, 6, 5], 5);

        let ours = (conv2d_same(&x, &w, &b).unwrap() * &probe).unwrap().sum_all().unwrap();
        let g1 = ours.backward().unwrap();
        let stock = x
            .conv2d(&w, 1, 1, 1, 1)
            .unwrap()
            .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        let g2 = (stock * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &b] {
            let a = g1.get(v).unwrap();
            let b = g2.get(v).unwrap();
            let diff = (a - b)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(diff < 1e-10, "diff={diff}");
        }
    }

    #[test]
    fn rejects_even_kernels_and_channel_mismatch() {
        let x = rand(&[1, 2, 4, 4], 0);
        let b = rand(&[1], 0);
        assert!(conv2d_same(&x, &rand(&[1, 2, 2, 2], 0), &b).is_err());
        assert!(conv2d_same(&x, &rand(&[1, 3, 3, 3], 0), &b).is_err());
        assert!(conv2d_same(&x, &rand(&[1, 2, 3, 3], 0), &rand(&[2], 0)).is_err());
    }
}
