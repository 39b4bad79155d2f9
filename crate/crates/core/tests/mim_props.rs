use proptest::prelude::*;
use spadnet::datapipe::VolumeGrid;
use spadnet::mim::{mim_loss, sample_mask, VitConfig, VitModel};
use spadnet::tokenizer::{entropy, TokenDistributionGrid, Tokenizer, TokenizerConfig};
use spadnet::verify::{run_checks, Scope};
use spadnet::Spacing;

fn normalised(weights: Vec<f64>, vocab: usize) -> Vec<f64> {
    let mut p = weights;
    for row in p.chunks_mut(vocab) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    p
}

/// Teacher and prediction over the same grid, plus a mask seed and ratio.
fn grids() -> impl Strategy<Value = (TokenDistributionGrid, TokenDistributionGrid, u64, f64)> {
    (prop::array::uniform3(1usize..5), 2usize..8).prop_flat_map(|(dims, vocab)| {
        let n = dims.iter().product::<usize>() * vocab;
        let row = move |w: Vec<f64>| {
            TokenDistributionGrid::new(
                dims,
                vocab,
                normalised(w, vocab),
                Spacing::isotropic(1.0).unwrap(),
            )
            .unwrap()
        };
        (
            prop::collection::vec(0.01f64..1.0, n).prop_map(row),
            prop::collection::vec(0.01f64..1.0, n).prop_map(row),
            any::<u64>(),
            0.05f64..1.0,
        )
    })
}

fn spacing_for(da: u32) -> Spacing {
    if da == 6 {
        Spacing::two_d(1.0).unwrap()
    } else {
        Spacing::new(f64::from(1u32 << da) * 1.2, 1.0, 1.0).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cross_entropy_is_bounded_by_teacher_entropy((teacher, pred, seed, ratio) in grids()) {
        let mask = sample_mask(teacher.dims, ratio, seed).unwrap();
        prop_assume!(!mask.is_empty());
        let h = mask.masked.iter().map(|&s| entropy(teacher.row(s))).sum::<f64>() / mask.len() as f64;
        let ce = mim_loss(&pred, &teacher, &mask).unwrap();
        prop_assert!(ce >= h - 1e-12);
        prop_assert!((mim_loss(&teacher, &teacher, &mask).unwrap() - h).abs() <= 1e-12);
        let differs = mask.masked.iter().any(|&s| teacher.row(s) != pred.row(s));
        if differs {
            prop_assert!(ce > h);
        }
    }

    #[test]
    fn mask_size_is_exact(dims in prop::array::uniform3(1usize..12), ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let mask = sample_mask(dims, ratio, seed).unwrap();
        let cells: usize = dims.iter().product();
        prop_assert_eq!(mask.len(), (ratio * cells as f64).round() as usize);
        prop_assert!(mask.masked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(mask.masked.iter().all(|&s| s < cells));
    }
}

#[test]
fn token_and_patch_grids_align_for_every_degree() {
    let tok_cfg = TokenizerConfig {
        widths: vec![2, 2, 2, 2],
        codebook_size: 4,
        code_dim: 2,
        ..Default::default()
    };
    let tok = Tokenizer::<f64>::new(tok_cfg, 1).unwrap();
    let vit_cfg = VitConfig {
        width: 8,
        blocks: 1,
        heads: 2,
        mlp_hidden: 8,
        head_hidden: 8,
        vocab: 4,
        ..Default::default()
    };
    let vit = VitModel::<f64>::new(vit_cfg, 2).unwrap();
    for da in 0..=6u32 {
        let spacing = spacing_for(da);
        let dims = if da == 6 { [1, 32, 16] } else { [32, 16, 32] };
        let tok_grid = tok.grid_extents(dims, &spacing).unwrap();
        let (patch_grid, _, _) = vit.grid_for(dims, &spacing).unwrap();
        assert_eq!(tok_grid, patch_grid, "da {da}");

        let n: usize = dims.iter().product();
        let v = VolumeGrid::new(
            1,
            dims,
            (0..n).map(|i| (i % 7) as f32 / 7.0).collect(),
            spacing,
            "mr",
        )
        .unwrap();
        let mask = sample_mask(patch_grid, 0.55, u64::from(da)).unwrap();
        let pred = vit.forward_masked(&v, &mask).unwrap();
        assert_eq!(pred.dims, tok.encode(&v).unwrap().dims);
    }
}

#[test]
fn attention_scores_are_translation_invariant() {
    let report = run_checks(&"rope".parse::<Scope>().unwrap(), 5).unwrap();
    let check = report
        .checks
        .iter()
        .find(|c| c.name == "rope_attention_relativity")
        .unwrap();
    assert!(check.passed && check.max_error <= 1e-9, "{check:?}");
}
