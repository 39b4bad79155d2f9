//! im2col/GEMM kernels for 3D convolution and its adjoints.
//!
//! Inputs are `[C, D, H, W]` or batched `[N, C, D, H, W]`. Convolution is
//! cross-correlation (no kernel flip). Samples are processed in parallel,
//! and per-sample partial weight gradients are summed in sample order so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::Dims3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: Dims3,
    pub stride: Dims3,
    pub padding: Dims3,
}

impl ConvGeometry {
    pub fn new(kernel: Dims3, stride: Dims3, padding: Dims3) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

pub fn conv3d_output_extent(input: Dims3, g: &ConvGeometry) -> Result<Dims3> {
    let mut out = [0; 3];
    for i in 0..3 {
        if g.stride[i] == 0 || g.kernel[i] == 0 {
            return Err(Error::Dimension(format!("zero kernel or stride in {g:?}")));
        }
        let padded = input[i] + 2 * g.padding[i];
        if padded < g.kernel[i] {
            return Err(Error::Dimension(format!(
                "kernel {:?} does not fit padded input {input:?} (padding {:?})",
                g.kernel, g.padding
            )));
        }
        out[i] = (padded - g.kernel[i]) / g.stride[i] + 1;
    }
    Ok(out)
}

pub fn conv3d_transposed_output_extent(input: Dims3, g: &ConvGeometry) -> Result<Dims3> {
    let mut out = [0; 3];
    for i in 0..3 {
        if g.stride[i] == 0 || g.kernel[i] == 0 || input[i] == 0 {
            return Err(Error::Dimension(format!(
                "degenerate transposed conv {g:?} on {input:?}"
            )));
        }
        let full = (input[i] - 1) * g.stride[i] + g.kernel[i];
        if full <= 2 * g.padding[i] {
            return Err(Error::Dimension(format!(
                "padding {:?} consumes the whole transposed output",
                g.padding
            )));
        }
        out[i] = full - 2 * g.padding[i];
    }
    Ok(out)
}

/// Split a 4D/5D activation into (batch, channels, spatial, batched?).
fn activation_dims(shape: &[usize]) -> Result<(usize, usize, Dims3, bool)> {
    match *shape {
        [c, d, h, w] => Ok((1, c, [d, h, w], false)),
        [n, c, d, h, w] => Ok((n, c, [d, h, w], true)),
        _ => Err(Error::Dimension(format!(
            "expected [C,D,H,W] or [N,C,D,H,W], got {shape:?}"
        ))),
    }
}

fn weight_dims(shape: &[usize]) -> Result<(usize, usize, Dims3)> {
    match *shape {
        [a, b, kd, kh, kw] => Ok((a, b, [kd, kh, kw])),
        _ => Err(Error::Dimension(format!(
            "expected 5D weight, got {shape:?}"
        ))),
    }
}

fn activation_shape(n: usize, c: usize, s: Dims3, batched: bool) -> Vec<usize> {
    if batched {
        vec![n, c, s[0], s[1], s[2]]
    } else {
        vec![c, s[0], s[1], s[2]]
    }
}

/// Unfold one sample `[C, D, H, W]` into columns `[C*kd*kh*kw, od*oh*ow]`.
fn im2col<T: Real>(x: &[T], c: usize, ins: Dims3, g: &ConvGeometry, outs: Dims3, cols: &mut [T]) {
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [id, ih, iw] = ins;
    let [od, oh, ow] = outs;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for z in 0..od {
                        let zz = (z * sd + a) as isize - pd as isize;
                        let z_ok = zz >= 0 && (zz as usize) < id;
                        for y in 0..oh {
                            let yy = (y * sh + b) as isize - ph as isize;
                            if !z_ok || yy < 0 || yy as usize >= ih {
                                dst[q..q + ow].fill(T::zero());
                                q += ow;
                                continue;
                            }
                            let base = (zz as usize * ih + yy as usize) * iw;
                            for xo in 0..ow {
                                let xx = (xo * sw + e) as isize - pw as isize;
                                dst[q] = if xx >= 0 && (xx as usize) < iw {
                                    xc[base + xx as usize]
                                } else {
                                    T::zero()
                                };
                                q += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto `[C, D, H, W]`.
fn col2im<T: Real>(cols: &[T], c: usize, ins: Dims3, g: &ConvGeometry, outs: Dims3, x: &mut [T]) {
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [id, ih, iw] = ins;
    let [od, oh, ow] = outs;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for z in 0..od {
                        let zz = (z * sd + a) as isize - pd as isize;
                        let z_ok = zz >= 0 && (zz as usize) < id;
                        for y in 0..oh {
                            let yy = (y * sh + b) as isize - ph as isize;
                            if !z_ok || yy < 0 || yy as usize >= ih {
                                q += ow;
                                continue;
                            }
                            let base = (zz as usize * ih + yy as usize) * iw;
                            for xo in 0..ow {
                                let xx = (xo * sw + e) as isize - pw as isize;
                                if xx >= 0 && (xx as usize) < iw {
                                    let t = &mut xc[base + xx as usize];
                                    *t = *t + src[q];
                                }
                                q += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn debug_check_finite<T: Real>(t: &Tensor<T>, what: &str) {
    debug_assert!(t.all_finite(), "{what} produced a non-finite value");
}

/// 3D cross-correlation. `weight` is `[C_out, C_in, kd, kh, kw]`.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, cin, ins, batched) = activation_dims(input.shape())?;
    let (cout, wcin, kernel) = weight_dims(weight.shape())?;
    if wcin != cin || kernel != g.kernel {
        return Err(Error::Dimension(format!(
            "weight {:?} incompatible with input channels {cin} / kernel {:?}",
            weight.shape(),
            g.kernel
        )));
    }
    let outs = conv3d_output_extent(ins, g)?;
    let k = cin * g.kernel_volume();
    let p: usize = outs.iter().product();
    let in_len = cin * ins.iter().product::<usize>();
    let w = weight.data();
    let mut out = vec![T::zero(); n * cout * p];
    out.par_chunks_mut(cout * p).enumerate().for_each(|(s, o)| {
        let mut cols = vec![T::zero(); k * p];
        im2col(
            &input.data()[s * in_len..(s + 1) * in_len],
            cin,
            ins,
            g,
            outs,
            &mut cols,
        );
        T::gemm(
            cout,
            k,
            p,
            T::one(),
            w,
            k,
            1,
            &cols,
            p,
            1,
            T::zero(),
            o,
            p,
            1,
        );
    });
    let t = Tensor::new(activation_shape(n, cout, outs, batched), out)?;
    debug_check_finite(&t, "conv3d");
    Ok(t)
}

/// Gradient of `conv3d` with respect to its input (of spatial extents `ins`).
pub fn conv3d_grad_input<T: Real>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
    ins: Dims3,
) -> Result<Tensor<T>> {
    let (n, cout, outs, batched) = activation_dims(grad_out.shape())?;
    let (wcout, cin, _) = weight_dims(weight.shape())?;
    if wcout != cout || conv3d_output_extent(ins, g)? != outs {
        return Err(Error::Dimension(
            "conv3d_grad_input: inconsistent shapes".into(),
        ));
    }
    let k = cin * g.kernel_volume();
    let p: usize = outs.iter().product();
    let in_len = cin * ins.iter().product::<usize>();
    let w = weight.data();
    let mut dx = vec![T::zero(); n * in_len];
    dx.par_chunks_mut(in_len).enumerate().for_each(|(s, dxs)| {
        let mut cols = vec![T::zero(); k * p];
        let dy = &grad_out.data()[s * cout * p..(s + 1) * cout * p];
        // cols = W^T dY
        T::gemm(
            k,
            cout,
            p,
            T::one(),
            w,
            1,
            k,
            dy,
            p,
            1,
            T::zero(),
            &mut cols,
            p,
            1,
        );
        col2im(&cols, cin, ins, g, outs, dxs);
    });
    Tensor::new(activation_shape(n, cin, ins, batched), dx)
}

/// Gradient of `conv3d` with respect to its weight.
pub fn conv3d_grad_weight<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, cin, ins, _) = activation_dims(input.shape())?;
    let (n2, cout, outs, _) = activation_dims(grad_out.shape())?;
    if n != n2 || conv3d_output_extent(ins, g)? != outs {
        return Err(Error::Dimension(
            "conv3d_grad_weight: inconsistent shapes".into(),
        ));
    }
    let k = cin * g.kernel_volume();
    let p: usize = outs.iter().product();
    let in_len = cin * ins.iter().product::<usize>();
    let partials: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut cols = vec![T::zero(); k * p];
            im2col(
                &input.data()[s * in_len..(s + 1) * in_len],
                cin,
                ins,
                g,
                outs,
                &mut cols,
            );
            let dy = &grad_out.data()[s * cout * p..(s + 1) * cout * p];
            let mut dw = vec![T::zero(); cout * k];
            // dW = dY cols^T
            T::gemm(
                cout,
                p,
                k,
                T::one(),
                dy,
                p,
                1,
                &cols,
                1,
                p,
                T::zero(),
                &mut dw,
                k,
                1,
            );
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); cout * k];
    for part in partials {
        for (a, b) in dw.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    let [kd, kh, kw] = g.kernel;
    Tensor::new(vec![cout, cin, kd, kh, kw], dw)
}

/// Transposed 3D convolution. `weight` is `[C_in, C_out, kd, kh, kw]`; the
/// output extent per axis is `(n-1)*s - 2p + k`.
pub fn conv3d_transposed<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, cin, ins, batched) = activation_dims(input.shape())?;
    let (wcin, cout, kernel) = weight_dims(weight.shape())?;
    if wcin != cin || kernel != g.kernel {
        return Err(Error::Dimension(format!(
            "transposed weight {:?} incompatible with input channels {cin} / kernel {:?}",
            weight.shape(),
            g.kernel
        )));
    }
    let outs = conv3d_transposed_output_extent(ins, g)?;
    let k = cout * g.kernel_volume();
    let p: usize = ins.iter().product();
    let out_len = cout * outs.iter().product::<usize>();
    let w = weight.data();
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(s, o)| {
        let x = &input.data()[s * cin * p..(s + 1) * cin * p];
        let mut cols = vec![T::zero(); k * p];
        // cols = Wt^T x, Wt viewed as [C_in, C_out*k]
        T::gemm(
            k,
            cin,
            p,
            T::one(),
            w,
            1,
            k,
            x,
            p,
            1,
            T::zero(),
            &mut cols,
            p,
            1,
        );
        col2im(&cols, cout, outs, g, ins, o);
    });
    let t = Tensor::new(activation_shape(n, cout, outs, batched), out)?;
    debug_check_finite(&t, "conv3d_transposed");
    Ok(t)
}

/// Gradient of `conv3d_transposed` with respect to its weight. The gradient
/// with respect to the input is `conv3d(grad_out, weight)`.
pub fn conv3d_transposed_grad_weight<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, cin, ins, _) = activation_dims(input.shape())?;
    let (n2, cout, outs, _) = activation_dims(grad_out.shape())?;
    if n != n2 || conv3d_transposed_output_extent(ins, g)? != outs {
        return Err(Error::Dimension(
            "conv3d_transposed_grad_weight: inconsistent shapes".into(),
        ));
    }
    let k = cout * g.kernel_volume();
    let p: usize = ins.iter().product();
    let out_len = cout * outs.iter().product::<usize>();
    let partials: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut cols = vec![T::zero(); k * p];
            im2col(
                &grad_out.data()[s * out_len..(s + 1) * out_len],
                cout,
                outs,
                g,
                ins,
                &mut cols,
            );
            let x = &input.data()[s * cin * p..(s + 1) * cin * p];
            let mut dw = vec![T::zero(); cin * k];
            T::gemm(
                cin,
                p,
                k,
                T::one(),
                x,
                p,
                1,
                &cols,
                1,
                p,
                T::zero(),
                &mut dw,
                k,
                1,
            );
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); cin * k];
    for part in partials {
        for (a, b) in dw.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    let [kd, kh, kw] = g.kernel;
    Tensor::new(vec![cin, cout, kd, kh, kw], dw)
}

/// Sum contiguous non-overlapping depth windows of a 5D weight (axis 2).
pub fn sum_pool_depth<T: Real>(weight: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (a, b, [kd, kh, kw]) = weight_dims(weight.shape())?;
    if window == 0 || kd % window != 0 {
        return Err(Error::Adaptation(format!(
            "sum-pooling window {window} does not divide depth kernel {kd}"
        )));
    }
    let nd = kd / window;
    let plane = kh * kw;
    let mut out = Tensor::zeros(&[a, b, nd, kh, kw]);
    let src = weight.data();
    let dst = out.data_mut();
    for ab in 0..a * b {
        for z in 0..kd {
            let o = (ab * nd + z / window) * plane;
            let i = (ab * kd + z) * plane;
            for q in 0..plane {
                dst[o + q] = dst[o + q] + src[i + q];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`sum_pool_depth`]: repeat each pooled depth slice `window` times.
pub(crate) fn sum_pool_depth_adjoint<T: Real>(grad: &Tensor<T>, window: usize) -> Tensor<T> {
    let s = grad.shape();
    let (a, b, nd, kh, kw) = (s[0], s[1], s[2], s[3], s[4]);
    let kd = nd * window;
    let plane = kh * kw;
    let mut out = Tensor::zeros(&[a, b, kd, kh, kw]);
    let src = grad.data();
    let dst = out.data_mut();
    for ab in 0..a * b {
        for z in 0..kd {
            let o = (ab * kd + z) * plane;
            let i = (ab * nd + z / window) * plane;
            dst[o..o + plane].copy_from_slice(&src[i..i + plane]);
        }
    }
    out
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let n = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    if n == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(k: usize, s: usize, p: usize) -> ConvGeometry {
        ConvGeometry::new([k; 3], [s; 3], [p; 3])
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[1, 3, 4, 5], 1.0, &mut rng);
        let w = Tensor::ones(&[1, 1, 1, 1, 1]);
        assert_eq!(conv3d(&x, &w, &g(1, 1, 0)).unwrap(), x);
        assert_eq!(conv3d_transposed(&x, &w, &g(1, 1, 0)).unwrap(), x);
    }

    #[test]
    fn ones_block_sums_to_eight() {
        let x = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        let w = Tensor::ones(&[1, 1, 2, 2, 2]);
        let y = conv3d(&x, &w, &g(2, 2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 8.0);
    }

    #[test]
    fn transposed_broadcasts_single_voxel() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], 2.5);
        let w = Tensor::ones(&[1, 1, 2, 2, 2]);
        let y = conv3d_transposed(&x, &w, &g(2, 2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn output_extents() {
        let geo = ConvGeometry::new([3, 3, 3], [1, 2, 2], [1, 1, 1]);
        assert_eq!(conv3d_output_extent([5, 6, 7], &geo).unwrap(), [5, 3, 4]);
        assert_eq!(
            conv3d_transposed_output_extent([2, 3, 4], &g(2, 2, 0)).unwrap(),
            [4, 6, 8]
        );
        assert!(conv3d_output_extent([1, 1, 1], &g(3, 1, 0)).is_err());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 1, 1, 1]);
        assert!(matches!(
            conv3d(&x, &w, &g(1, 1, 0)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            conv3d(&Tensor::<f64>::zeros(&[4, 4]), &w, &g(1, 1, 0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn sum_pool_examples() {
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3, 3]);
        let p = sum_pool_depth(&w, 3).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1, 3, 3]);
        assert!(p.data().iter().all(|&v| v == 3.0));
        assert_eq!(sum_pool_depth(&w, 1).unwrap(), w);
        assert!(matches!(sum_pool_depth(&w, 2), Err(Error::Adaptation(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f64>::randn(&[2, 1, 4, 2, 2], 1.0, &mut rng);
        let p = sum_pool_depth(&w, 2).unwrap();
        for o in 0..2 {
            for z in 0..2 {
                for y in 0..2 {
                    for x in 0..2 {
                        let expect = w.get(&[o, 0, 2 * z, y, x]) + w.get(&[o, 0, 2 * z + 1, y, x]);
                        assert_eq!(p.get(&[o, 0, z, y, x]), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::<f64>::zeros(&[4]);
        assert_eq!(softmax_lastdim(&t).data(), &[0.25; 4]);
        let c: f64 = 0.7;
        let s = softmax_lastdim(&Tensor::new(vec![2], vec![1.3, 1.3 + c]).unwrap());
        assert!((s.data()[0] - 1.0 / (1.0 + c.exp())).abs() < 1e-15);
        assert!((s.data()[1] - c.exp() / (1.0 + c.exp())).abs() < 1e-15);
        let s = softmax_lastdim(&Tensor::<f64>::new(vec![2], vec![1000.0, 0.0]).unwrap());
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
    }
}
