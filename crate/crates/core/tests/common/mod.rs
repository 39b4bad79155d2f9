//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spadnet::geometry::Dims3;
use spadnet::metrics::BinaryMask;
use spadnet::tensor::ConvGeometry;
use spadnet::{Spacing, Tensor};

/// `max |a - b| / max |b|`, or the absolute error when `b` vanishes.
pub fn max_rel_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.data().iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn at(t: &Tensor<f64>, i: [usize; 5]) -> f64 {
    t.get(&i)
}

/// Nested-loop cross-correlation on `[N, C_in, D, H, W]` with a
/// `[C_out, C_in, kd, kh, kw]` weight and zero padding.
pub fn conv3d_naive(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeometry) -> Tensor<f64> {
    let [n, cin, d, h, wd] = x.shape().try_into().expect("5-d input");
    let [cout, _, kd, kh, kw] = w.shape().try_into().expect("5-d weight");
    let ins = [d, h, wd];
    let outs: Vec<usize> = (0..3)
        .map(|i| (ins[i] + 2 * g.padding[i] - g.kernel[i]) / g.stride[i] + 1)
        .collect();
    let mut out = Tensor::zeros(&[n, cout, outs[0], outs[1], outs[2]]);
    for s in 0..n {
        for co in 0..cout {
            for od in 0..outs[0] {
                for oh in 0..outs[1] {
                    for ow in 0..outs[2] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for c in 0..kw {
                                        let p = [
                                            (od * g.stride[0] + a) as isize - g.padding[0] as isize,
                                            (oh * g.stride[1] + b) as isize - g.padding[1] as isize,
                                            (ow * g.stride[2] + c) as isize - g.padding[2] as isize,
                                        ];
                                        if (0..3).all(|k| p[k] >= 0 && (p[k] as usize) < ins[k]) {
                                            acc += at(w, [co, ci, a, b, c])
                                                * at(
                                                    x,
                                                    [
                                                        s,
                                                        ci,
                                                        p[0] as usize,
                                                        p[1] as usize,
                                                        p[2] as usize,
                                                    ],
                                                );
                                        }
                                    }
                                }
                            }
                        }
                        out.set(&[s, co, od, oh, ow], acc);
                    }
                }
            }
        }
    }
    out
}

/// Nested-loop transposed convolution: every input voxel scatters
/// `x · w[ci, co]` to `i·s + a - p`. The weight is `[C_in, C_out, kd, kh, kw]`.
pub fn conv3d_transposed_naive(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeometry) -> Tensor<f64> {
    let [n, cin, d, h, wd] = x.shape().try_into().expect("5-d input");
    let [_, cout, kd, kh, kw] = w.shape().try_into().expect("5-d weight");
    let ins = [d, h, wd];
    let outs: Vec<usize> = (0..3)
        .map(|i| (ins[i] - 1) * g.stride[i] + g.kernel[i] - 2 * g.padding[i])
        .collect();
    let mut out = Tensor::zeros(&[n, cout, outs[0], outs[1], outs[2]]);
    for s in 0..n {
        for ci in 0..cin {
            for id in 0..d {
                for ih in 0..h {
                    for iw in 0..wd {
                        let v = at(x, [s, ci, id, ih, iw]);
                        for co in 0..cout {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for c in 0..kw {
                                        let o = [
                                            (id * g.stride[0] + a) as isize - g.padding[0] as isize,
                                            (ih * g.stride[1] + b) as isize - g.padding[1] as isize,
                                            (iw * g.stride[2] + c) as isize - g.padding[2] as isize,
                                        ];
                                        if (0..3).all(|k| o[k] >= 0 && (o[k] as usize) < outs[k]) {
                                            let idx = [
                                                s,
                                                co,
                                                o[0] as usize,
                                                o[1] as usize,
                                                o[2] as usize,
                                            ];
                                            let cur = out.get(&idx);
                                            out.set(&idx, cur + v * at(w, [ci, co, a, b, c]));
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// A random convolution problem with spatial extents up to 8 and at most
/// 4 channels.
#[derive(Debug, Clone)]
pub struct ConvCase {
    pub x: Tensor<f64>,
    pub w: Tensor<f64>,
    pub geometry: ConvGeometry,
    pub transposed: bool,
}

pub fn random_conv_case<R: Rng>(rng: &mut R, transposed: bool) -> ConvCase {
    let n = rng.random_range(1..=2);
    let cin = rng.random_range(1..=4);
    let cout = rng.random_range(1..=4);
    let mut kernel = [0usize; 3];
    let mut stride = [0usize; 3];
    let mut padding = [0usize; 3];
    let mut ins = [0usize; 3];
    for k in 0..3 {
        kernel[k] = rng.random_range(1..=3);
        stride[k] = rng.random_range(1..=2);
        padding[k] = rng.random_range(0..kernel[k]);
        ins[k] = if transposed {
            rng.random_range(1..=5)
        } else {
            rng.random_range(kernel[k].saturating_sub(2 * padding[k]).max(1)..=8)
        };
    }
    if transposed {
        // Keep at least one output voxel per axis.
        for k in 0..3 {
            while (ins[k] - 1) * stride[k] + kernel[k] <= 2 * padding[k] {
                padding[k] -= 1;
            }
        }
    }
    let x = Tensor::uniform(&[n, cin, ins[0], ins[1], ins[2]], 1.0, rng);
    let wshape = if transposed {
        [cin, cout, kernel[0], kernel[1], kernel[2]]
    } else {
        [cout, cin, kernel[0], kernel[1], kernel[2]]
    };
    let w = Tensor::uniform(&wshape, 1.0, rng);
    ConvCase {
        x,
        w,
        geometry: ConvGeometry::new(kernel, stride, padding),
        transposed,
    }
}

/// Input `[1, C, D, H, W]` whose values vary in-plane and across channels
/// but not along depth.
pub fn depth_constant<R: Rng>(rng: &mut R, c: usize, d: usize, h: usize, w: usize) -> Tensor<f64> {
    let plane = Tensor::<f64>::uniform(&[c, h, w], 1.0, rng);
    Tensor::from_fn(&[1, c, d, h, w], |i| {
        let (wi, hi, ci) = (i % w, (i / w) % h, i / (w * h * d));
        plane.data()[(ci * h + hi) * w + wi]
    })
}

pub fn depth_slice(t: &Tensor<f64>, d: usize) -> Vec<f64> {
    let s = t.shape();
    let (c, depth, plane) = (s[1], s[2], s[3] * s[4]);
    (0..c)
        .flat_map(|ci| t.data()[(ci * depth + d) * plane..(ci * depth + d + 1) * plane].to_vec())
        .collect()
}

pub fn slice_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (
        Tensor::new(vec![a.len()], a.to_vec()).unwrap(),
        Tensor::new(vec![b.len()], b.to_vec()).unwrap(),
    );
    max_rel_error(&a, &b)
}

pub fn random_mask<R: Rng>(rng: &mut R, dims: Dims3, spacing: Spacing, density: f64) -> BinaryMask {
    let n: usize = dims.iter().product();
    let mut data: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
    if !data.iter().any(|&b| b) {
        data[rng.random_range(0..n)] = true;
    }
    BinaryMask::new(dims, data, spacing).expect("consistent mask")
}

/// Surface voxels by direct neighbour inspection: set voxels with an unset
/// or out-of-bounds 6-neighbour.
pub fn surface_brute(m: &BinaryMask) -> Vec<Dims3> {
    let dims = m.dims();
    let inside = |p: [isize; 3]| {
        (0..3).all(|k| p[k] >= 0 && (p[k] as usize) < dims[k])
            && m.get(p[0] as usize, p[1] as usize, p[2] as usize)
    };
    let mut out = Vec::new();
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                if !m.get(d, h, w) {
                    continue;
                }
                let p = [d as isize, h as isize, w as isize];
                let offsets = [
                    [1, 0, 0],
                    [-1, 0, 0],
                    [0, 1, 0],
                    [0, -1, 0],
                    [0, 0, 1],
                    [0, 0, -1],
                ];
                if offsets
                    .iter()
                    .any(|o| !inside([p[0] + o[0], p[1] + o[1], p[2] + o[2]]))
                {
                    out.push([d, h, w]);
                }
            }
        }
    }
    out
}

fn mm(p: Dims3, s: [f64; 3]) -> [f64; 3] {
    [p[0] as f64 * s[0], p[1] as f64 * s[1], p[2] as f64 * s[2]]
}

/// All-pairs directed distances `d(s, ∂B)` for `s ∈ ∂A`, in millimetres.
pub fn directed_brute(a: &BinaryMask, b: &BinaryMask) -> Vec<f64> {
    let s = a.spacing().axis_scales();
    let (sa, sb) = (surface_brute(a), surface_brute(b));
    sa.iter()
        .map(|&p| {
            let p = mm(p, s);
            sb.iter()
                .map(|&q| {
                    let q = mm(q, s);
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn dice_brute(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        inter += usize::from(*x && *y);
        total += usize::from(*x) + usize::from(*y);
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub fn assd_brute(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (ab, ba) = (directed_brute(a, b), directed_brute(b, a));
    (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64
}

pub fn hausdorff_brute(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    max(directed_brute(a, b)).max(max(directed_brute(b, a)))
}

/// Isotropic, thick-slice or thin-slice spacing.
pub fn random_spacing(rng: &mut ChaCha8Rng) -> Spacing {
    match rng.random_range(0..3) {
        0 => Spacing::isotropic(1.0).unwrap(),
        1 => Spacing::new(rng.random_range(1.0..5.0), 0.7, 0.7).unwrap(),
        _ => Spacing::new(rng.random_range(0.3..1.0), 1.3, 1.3).unwrap(),
    }
}

/// Two masks of one random shape up to 8×8×8 sharing a spacing.
pub fn random_pair(seed: u64) -> (BinaryMask, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [
        rng.random_range(1..=8),
        rng.random_range(1..=8),
        rng.random_range(1..=8),
    ];
    let spacing = random_spacing(&mut rng);
    let density = rng.random_range(0.1..0.7);
    (
        random_mask(&mut rng, dims, spacing, density),
        random_mask(&mut rng, dims, spacing, density),
    )
}
