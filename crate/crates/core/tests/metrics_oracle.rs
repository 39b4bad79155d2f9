mod common;

use common::{assd_brute, dice_brute, hausdorff_brute, random_pair, surface_brute};
use proptest::prelude::*;
use spadnet::metrics::{assd, boundary_voxels, dice, hausdorff, BinaryMask};
use spadnet::Spacing;

fn shifted(m: &BinaryMask, by: [usize; 3], dims: [usize; 3]) -> BinaryMask {
    BinaryMask::from_fn(dims, m.spacing(), |d, h, w| {
        d >= by[0] && h >= by[1] && w >= by[2] && {
            let p = [d - by[0], h - by[1], w - by[2]];
            p.iter().zip(m.dims()).all(|(&x, n)| x < n) && m.get(p[0], p[1], p[2])
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matches_brute_force(seed in any::<u64>()) {
        let (a, b) = random_pair(seed);
        prop_assert_eq!(dice(&a, &b).unwrap(), dice_brute(&a, &b));
        prop_assert_eq!(boundary_voxels(&a), surface_brute(&a));
        prop_assert!((assd(&a, &b).unwrap() - assd_brute(&a, &b)).abs() <= 1e-9);
        prop_assert!((hausdorff(&a, &b).unwrap() - hausdorff_brute(&a, &b)).abs() <= 1e-9);
    }

    #[test]
    fn symmetric_and_ordered(seed in any::<u64>()) {
        let (a, b) = random_pair(seed);
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        let (ab, ba) = (assd(&a, &b).unwrap(), assd(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-12);
        let h = hausdorff(&a, &b).unwrap();
        prop_assert_eq!(h, hausdorff(&b, &a).unwrap());
        prop_assert!(ab <= h + 1e-12);
    }

    /// Masks are padded by one empty voxel on every side first, so the shift
    /// cannot move a surface voxel onto the volume border.
    #[test]
    fn translation_invariant(seed in any::<u64>(), by in prop::array::uniform3(0usize..3)) {
        let (a, b) = random_pair(seed);
        let n = a.dims();
        let pad = |m: &BinaryMask| shifted(m, [1, 1, 1], [n[0] + 5, n[1] + 5, n[2] + 5]);
        let (a, b) = (pad(&a), pad(&b));
        let dims = a.dims();
        let (sa, sb) = (shifted(&a, by, dims), shifted(&b, by, dims));
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&sa, &sb).unwrap());
        prop_assert!((assd(&a, &b).unwrap() - assd(&sa, &sb).unwrap()).abs() <= 1e-12);
        prop_assert!((hausdorff(&a, &b).unwrap() - hausdorff(&sa, &sb).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn depth_spacing_scales_depth_offsets() {
    let iso = Spacing::isotropic(1.0).unwrap();
    let aniso = Spacing::new(2.0, 1.0, 1.0).unwrap();
    let a = |s| BinaryMask::from_fn([6, 1, 1], s, |d, _, _| d == 0);
    let b = |s| BinaryMask::from_fn([6, 1, 1], s, |d, _, _| d == 4);
    assert_eq!(hausdorff(&a(iso), &b(iso)).unwrap(), 4.0);
    assert_eq!(hausdorff(&a(aniso), &b(aniso)).unwrap(), 8.0);
}
