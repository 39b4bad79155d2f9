use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spadnet::datapipe::{
    crop_depth, crop_extent, crop_sample, da_bucket_batches, preprocess, RawSpacing, RawVolume,
    VolumeGrid,
};
use spadnet::{AnisotropyDegree, Spacing};

/// Voxel values encode their own position (plus one), so a crop can be
/// traced back to where it came from.
fn labelled(dims: [usize; 3]) -> VolumeGrid {
    let n: usize = dims.iter().product();
    VolumeGrid::new(
        1,
        dims,
        (1..=n).map(|i| i as f32).collect(),
        Spacing::isotropic(1.0).unwrap(),
        "ct",
    )
    .unwrap()
}

fn position(value: f32, dims: [usize; 3]) -> [isize; 3] {
    let i = value as usize - 1;
    [
        (i / (dims[1] * dims[2])) as isize,
        ((i / dims[2]) % dims[1]) as isize,
        (i % dims[2]) as isize,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_item_appears_once_per_epoch(
        das in prop::collection::vec(0u32..8, 0..200),
        batch_size in 1usize..12,
        seed in any::<u64>(),
    ) {
        let das: Vec<AnisotropyDegree> = das.into_iter().map(AnisotropyDegree).collect();
        let plan = da_bucket_batches(&das, batch_size, seed).unwrap();
        let mut seen: Vec<usize> = plan.batches.iter().flat_map(|b| b.items.iter().copied()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..das.len()).collect::<Vec<_>>());
        for batch in &plan.batches {
            prop_assert!(!batch.items.is_empty() && batch.items.len() <= batch_size);
            prop_assert!(batch.items.iter().all(|&i| das[i] == batch.da));
        }
    }

    #[test]
    fn crops_follow_the_rule_and_stay_inside(
        dims in prop::array::uniform3(1usize..12),
        da in 0u32..=10,
        depth_base in 1usize..80,
        plane in 1usize..12,
        seed in any::<u64>(),
    ) {
        let da = AnisotropyDegree(da);
        let expected_depth = depth_base.div_ceil(1 << da.get()).max(1);
        prop_assert_eq!(crop_depth(depth_base, da), expected_depth);
        let size = crop_extent(da, depth_base, plane);
        prop_assert_eq!(size, [expected_depth, plane, plane]);

        let v = labelled(dims);
        let crop = crop_sample(&v, da, (depth_base, plane), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(crop.dims, size);
        // Every copied voxel sits at one common offset from its source.
        let mut offset: Option<[isize; 3]> = None;
        for d in 0..size[0] {
            for h in 0..size[1] {
                for w in 0..size[2] {
                    let x = crop.get(0, d, h, w);
                    if x == 0.0 {
                        continue;
                    }
                    let src = position(x, dims);
                    let o = [src[0] - d as isize, src[1] - h as isize, src[2] - w as isize];
                    prop_assert_eq!(*offset.get_or_insert(o), o);
                }
            }
        }
        // Zero padding appears only where the volume is smaller than the crop.
        let copied = crop.data.iter().filter(|&&x| x != 0.0).count();
        let overlap: usize = (0..3).map(|k| dims[k].min(size[k])).product();
        prop_assert_eq!(copied, overlap);
    }

    #[test]
    fn preprocessing_twice_changes_nothing(
        dims in prop::array::uniform3(1usize..10),
        border in prop::array::uniform3(0usize..3),
        spacing in prop::array::uniform3(0.5f64..3.0),
        rgb in any::<bool>(),
        values in prop::collection::vec(0.0f32..1.0, 3 * 16 * 16 * 16),
    ) {
        let channels = if rgb { 3 } else { 1 };
        // Interior values in (0, 1] inside a zero border on every side.
        let full = [dims[0] + 2 * border[0], dims[1] + 2 * border[1], dims[2] + 2 * border[2]];
        let n: usize = full.iter().product();
        let mut data = vec![0.0f32; channels * n];
        for c in 0..channels {
            for d in 0..dims[0] {
                for h in 0..dims[1] {
                    for w in 0..dims[2] {
                        let i = ((c * full[0] + d + border[0]) * full[1] + h + border[1]) * full[2] + w + border[2];
                        data[i] = values[i % values.len()] + 0.01;
                    }
                }
            }
        }
        // In-plane spacing must be isotropic after the depth axis moves first.
        let axes = [spacing[0], spacing[1], spacing[1]];
        let raw = RawVolume {
            channels,
            dims: full,
            data,
            spacing: RawSpacing::Axes(axes),
            modality: if rgb { "rgb".into() } else { "gray".into() },
            depth_axis: None,
        };
        let once = preprocess(raw, None).unwrap();
        let twice = preprocess(RawVolume::from(once.clone()), None).unwrap();
        prop_assert_eq!(&once.dims, &twice.dims);
        prop_assert_eq!(&once.spacing, &twice.spacing);
        prop_assert_eq!(&once.data, &twice.data);
    }
}

#[test]
fn two_d_images_keep_a_single_slice() {
    let raw = RawVolume {
        channels: 1,
        dims: [6, 1, 5],
        data: (0..30).map(|i| (i % 4) as f32).collect(),
        spacing: RawSpacing::TwoD { s_plane: 0.5 },
        modality: "gray".into(),
        depth_axis: None,
    };
    let once = preprocess(raw, None).unwrap();
    assert_eq!(once.dims[0], 1);
    assert!(once.spacing.is_two_d());
    let twice = preprocess(RawVolume::from(once.clone()), None).unwrap();
    assert_eq!(once.data, twice.data);
}
