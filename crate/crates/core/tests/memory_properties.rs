use memseg::encoder::FeaturePyramid;
use memseg::memory::*;
use memseg::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pyramid(rng: &mut ChaCha8Rng, c: usize, s: usize) -> FeaturePyramid {
    let mut t = |ch: usize, side: usize| Tensor::from_fn([1, ch, side, side], |_| rng.gen_range(-1.0..1.0));
    FeaturePyramid {
        levels: [t(c, 4 * s), t(2 * c, 2 * s), t(4 * c, s)],
    }
}

fn pool(seed: u64, n: usize) -> (MemoryPool, FeaturePyramid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n).map(|_| pyramid(&mut rng, 2, 2)).collect();
    let ii = pyramid(&mut rng, 2, 2);
    (MemoryPool::new(items, (0..n).map(|i| format!("m{i}")).collect(), seed).unwrap(), ii)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn differences_are_nonnegative(seed in any::<u64>(), n in 1usize..6) {
        let (p, ii) = pool(seed, n);
        for d in difference_all(&p, &ii).unwrap() {
            for t in &d {
                prop_assert!(t.data().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn selection_ignores_uniform_rescaling(seed in any::<u64>(), n in 1usize..6, s in 0.01f64..100.0) {
        let (p, ii) = pool(seed, n);
        let dis = difference_all(&p, &ii).unwrap();
        let scaled: Vec<[Tensor; 3]> = dis.iter().map(|d| d.each_ref().map(|t| t.map(|v| v * s))).collect();
        for mode in [ArgminMode::Global, ArgminMode::PerScale] {
            prop_assert_eq!(
                best_difference(&dis, mode).unwrap().indices,
                best_difference(&scaled, mode).unwrap().indices
            );
        }
    }

    #[test]
    fn streaming_selection_matches_materialised(seed in any::<u64>(), n in 1usize..6) {
        let (p, ii) = pool(seed, n);
        for mode in [ArgminMode::Global, ArgminMode::PerScale] {
            let a = best_difference(&difference_all(&p, &ii).unwrap(), mode).unwrap();
            prop_assert_eq!(select_best(&p, &ii, mode).unwrap(), a);
        }
    }

    #[test]
    fn coarsest_map_scales_with_its_input(seed in any::<u64>(), k in -4i32..5, s in 0.1f64..10.0) {
        let (p, ii) = pool(seed, 3);
        let di = select_best(&p, &ii, ArgminMode::Global).unwrap();
        let m3 = &attention_maps(&di)[2];
        // powers of two scale every float operation exactly
        let pow = 2f64.powi(k);
        let mut scaled = di.clone();
        scaled.levels[2] = di.levels[2].map(|v| v * pow);
        let got = &attention_maps(&scaled)[2];
        for (a, b) in got.data().iter().zip(m3.data()) {
            prop_assert_eq!(*a, b * pow);
        }
        scaled.levels[2] = di.levels[2].map(|v| v * s);
        for (a, b) in attention_maps(&scaled)[2].data().iter().zip(m3.data()) {
            prop_assert!((a - b * s).abs() <= 1e-12 * (1.0 + (b * s).abs()));
        }
    }

    #[test]
    fn concat_then_slice_is_identity(seed in any::<u64>()) {
        let (p, ii) = pool(seed, 3);
        let di = select_best(&p, &ii, ArgminMode::Global).unwrap();
        let ci = concat_info(&ii, &di).unwrap();
        for k in 0..3 {
            let c = ii.levels[k].channels();
            prop_assert_eq!(&ci[k].slice_channels(0..c).unwrap(), &ii.levels[k]);
            prop_assert_eq!(&ci[k].slice_channels(c..2 * c).unwrap(), &di.levels[k]);
        }
    }

    #[test]
    fn pipeline_is_deterministic(seed in any::<u64>()) {
        let (p, ii) = pool(seed, 4);
        let a = select_best(&p, &ii, ArgminMode::Global).unwrap();
        let b = select_best(&p, &ii, ArgminMode::Global).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(concat_info(&ii, &a).unwrap(), concat_info(&ii, &b).unwrap());
        prop_assert_eq!(attention_maps(&a), attention_maps(&b));
    }
}
