//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spadnet::datapipe::VolumeGrid;
use spadnet::metrics::BinaryMask;
use spadnet::{Spacing, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[-1, 1]` tensor.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

/// Single-channel volume of smooth blobs on a `dims` grid.
pub fn blob_volume(dims: [usize; 3], spacing: Spacing) -> VolumeGrid {
    let [d, h, w] = dims;
    let data = (0..d * h * w)
        .map(|i| {
            let (z, y, x) = ((i / (h * w)) as f32, ((i / w) % h) as f32, (i % w) as f32);
            ((0.3 * z).sin() * (0.2 * y).cos() + (0.15 * x).sin()).max(0.0)
        })
        .collect();
    VolumeGrid::new(1, dims, data, spacing, "mr").expect("consistent volume")
}

/// Two overlapping random masks of the given shape.
pub fn mask_pair(dims: [usize; 3], spacing: Spacing, seed: u64) -> (BinaryMask, BinaryMask) {
    let mut r = rng(seed);
    let n: usize = dims.iter().product();
    let mut draw = || (0..n).map(|_| r.random_bool(0.4)).collect::<Vec<_>>();
    let (a, b) = (draw(), draw());
    (
        BinaryMask::new(dims, a, spacing).expect("consistent mask"),
        BinaryMask::new(dims, b, spacing).expect("consistent mask"),
    )
}
