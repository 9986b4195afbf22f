use menet_core::data::{
    make_patch_grid, one_hot_decode, one_hot_encode, read_nifti, stitch_patches, write_nifti,
    zscore_normalize, LabelVolume, Volume,
};
use menet_core::loss::{categorical_dice_loss, soft_dice, ClassWeights};
use menet_core::metrics::{compose_regions, dice_sens_spec, confusion, hausdorff95, Mask};
use menet_core::tensor::{
    conv3d, conv_output_extent, conv_transpose3d, deconv_output_extent, softmax_channels, ConvSpec,
};
use menet_core::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

fn conv_problem() -> impl Strategy<Value = (ConvSpec, [usize; 3])> {
    (1usize..=3, 1usize..=2, 0usize..=1, 1usize..=3, 1usize..=3, [3usize..=6, 3usize..=6, 3usize..=6])
        .prop_map(|(k, s, p, ci, co, e)| (ConvSpec::cube(k, s, p, ci, co), e))
}

fn codes(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 4]), n)
}

fn mask(n: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::weighted(0.3), n * n * n)
        .prop_map(move |bits| Mask::new([n; 3], bits).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear(
        (spec, e) in conv_problem(),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, e[0], e[1], e[2], spec.in_channels];
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&spec.conv_weight_shape(), -1.0, 1.0, &mut rng);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv3d(&mix, &w, None, &spec).unwrap();
        let rhs = conv3d(&x, &w, None, &spec).unwrap().scale(a)
            .add(&conv3d(&y, &w, None, &spec).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn transposed_conv_is_adjoint((spec, e) in conv_problem(), seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let small = [0, 1, 2].map(|a| conv_output_extent(e[a], spec.kernel[a], spec.stride[a], spec.padding[a]));
        prop_assume!(small.iter().all(|r| r.is_ok()));
        let small = small.map(|r| r.unwrap());
        let big = [0, 1, 2].map(|a| deconv_output_extent(small[a], spec.kernel[a], spec.stride[a], spec.padding[a]).unwrap());
        let x = Tensor::uniform(&[1, big[0], big[1], big[2], spec.in_channels], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&spec.conv_weight_shape(), -1.0, 1.0, &mut rng);
        let cx = conv3d(&x, &w, None, &spec).unwrap();
        let y = Tensor::uniform(cx.shape(), -1.0, 1.0, &mut rng);
        let tspec = ConvSpec::new(spec.kernel, spec.stride, spec.padding, spec.out_channels, spec.in_channels).unwrap();
        let back = conv_transpose3d(&y, &w, None, &tspec).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let (lhs, rhs) = (cx.dot(&y).unwrap(), x.dot(&back).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn down_then_up_restores_even_extents(half in 1usize..=64) {
        let i = 2 * half;
        let down = conv_output_extent(i, 3, 2, 1).unwrap();
        prop_assert_eq!(down, half);
        prop_assert_eq!(deconv_output_extent(down, 2, 2, 0).unwrap(), i);
        prop_assert_eq!(conv_output_extent(i, 3, 1, 1).unwrap(), i);
    }

    #[test]
    fn softmax_rows_sum_to_one(t in tensor(vec![5, 4]), scale in 1.0f64..800.0) {
        let p = softmax_channels(&t.scale(scale));
        for row in p.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dice_scores_bounded(logits in tensor(vec![12, 4]), c in codes(12)) {
        let labels = LabelVolume::new([12, 1, 1], [1.0; 3], c).unwrap();
        let g = one_hot_encode(&labels).unwrap().reshape(&[12, 4]).unwrap();
        let p = softmax_channels(&logits.scale(3.0));
        let sd = soft_dice(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&sd));
        prop_assert!((sd - soft_dice(&g, &p).unwrap()).abs() < 1e-15);
        let loss = categorical_dice_loss(&p, &g, &ClassWeights::default()).unwrap();
        prop_assert!((-1.0..=0.0).contains(&loss));
        prop_assert!(loss >= categorical_dice_loss(&g, &g, &ClassWeights::default()).unwrap());
    }

    #[test]
    fn one_hot_round_trip(c in codes(60)) {
        let labels = LabelVolume::new([5, 4, 3], [1.0; 3], c.clone()).unwrap();
        let t = one_hot_encode(&labels).unwrap();
        prop_assert_eq!(t.shape(), &[3, 4, 5, 4]);
        prop_assert_eq!(one_hot_decode(&t).unwrap(), c);
    }

    #[test]
    fn zscore_standardizes(v in prop::collection::vec(-1e3f64..1e3, 27)) {
        let vol = Volume::new([3, 3, 3], [1.0; 3], v).unwrap();
        let z = zscore_normalize(&vol);
        let n = z.data.len() as f64;
        let mean = z.data.iter().sum::<f64>() / n;
        let var = z.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-9 || z.data.iter().all(|&x| x == 0.0));
        let again = zscore_normalize(&z);
        for (a, b) in again.data.iter().zip(&z.data) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn patch_grid_covers_volume(
        ext in [8usize..=40, 8usize..=40, 4usize..=20],
        frac in [0.2f64..=1.0, 0.2f64..=1.0, 0.2f64..=1.0],
        sfrac in [0.1f64..=1.0, 0.1f64..=1.0, 0.1f64..=1.0],
    ) {
        let patch = [0, 1, 2].map(|a| ((ext[a] as f64 * frac[a]) as usize).max(1));
        let stride = [0, 1, 2].map(|a| ((patch[a] as f64 * sfrac[a]) as usize).max(1));
        let grid = make_patch_grid(ext, patch, stride).unwrap();
        prop_assert!(grid.coverage().iter().all(|&c| c > 0));
        for o in &grid.origins {
            prop_assert!((0..3).all(|a| o[a] + patch[a] <= ext[a]));
        }
    }

    #[test]
    fn stitching_agreeing_patches_is_identity(c in codes(12 * 10 * 6)) {
        let labels = LabelVolume::new([12, 10, 6], [1.0; 3], c.clone()).unwrap();
        let full = one_hot_encode(&labels).unwrap();
        let grid = make_patch_grid([12, 10, 6], [8, 8, 4], [3, 2, 1]).unwrap();
        let patches: Vec<Tensor> = grid.origins.iter().map(|o| {
            Tensor::from_fn(&[1, 4, 8, 8, 4], |i| {
                let (ch, v) = (i % 4, i / 4);
                let (x, y, z) = (v % 8, (v / 8) % 8, v / 64);
                let src = ((z + o[2]) * 10 + (y + o[1])) * 12 + (x + o[0]);
                full.data()[src * 4 + ch]
            })
        }).collect();
        let stitched = stitch_patches(&grid, &patches).unwrap();
        let back = stitched.to_labels([1.0; 3]).unwrap();
        prop_assert_eq!(back.codes, c);
    }

    #[test]
    fn regions_nest(c in codes(216)) {
        let labels = LabelVolume::new([6, 6, 6], [1.0; 3], c).unwrap();
        let r = compose_regions(&labels);
        prop_assert!(r.et.is_subset_of(&r.tc));
        prop_assert!(r.tc.is_subset_of(&r.wt));
    }

    #[test]
    fn overlap_metrics_symmetric(a in mask(6), b in mask(6)) {
        let ab = dice_sens_spec(confusion(&a, &b).unwrap());
        let ba = dice_sens_spec(confusion(&b, &a).unwrap());
        prop_assert_eq!(ab.0, ba.0);
        prop_assert_eq!(dice_sens_spec(confusion(&a, &a).unwrap()).0, 1.0);
        let h_ab = hausdorff95(&a, &b, [1.0, 2.0, 0.5]).unwrap();
        let h_ba = hausdorff95(&b, &a, [1.0, 2.0, 0.5]).unwrap();
        prop_assert_eq!(h_ab, h_ba);
        if !a.is_empty() {
            prop_assert_eq!(hausdorff95(&a, &a, [1.0; 3]).unwrap(), Some(0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn nifti_round_trip(
        dims in [1usize..=6, 1usize..=6, 1usize..=6],
        spacing in [0.25f64..4.0, 0.25f64..4.0, 0.25f64..4.0],
        seed in any::<u64>(),
        gz in any::<bool>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let spacing = spacing.map(|s| s as f32 as f64);
        let n = dims.iter().product();
        let vol = Volume::new(dims, spacing, (0..n).map(|_| rng.gen_range(-1e4..1e4)).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gz { "v.nii.gz" } else { "v.nii" });
        write_nifti(&vol, &path).unwrap();
        let back = read_nifti(&path).unwrap();
        prop_assert_eq!(back.dims, vol.dims);
        prop_assert_eq!(back.spacing, vol.spacing);
        prop_assert!(back.data.iter().zip(&vol.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
