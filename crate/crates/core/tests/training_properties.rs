mod common;

use memseg::data_io::TextureSource;
use memseg::training::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arr(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((1, n), v).unwrap()
}

proptest! {
    #[test]
    fn total_loss_is_nonnegative(
        pairs in prop::collection::vec((any::<bool>(), 0.0f64..=1.0), 1..50),
    ) {
        let s = arr(pairs.iter().map(|p| p.0 as u8 as f64).collect());
        let p = arr(pairs.iter().map(|p| p.1).collect());
        let parts = total_loss(&s, &p, &LossConfig::default()).unwrap();
        prop_assert!(parts.l1 >= 0.0 && parts.focal >= 0.0 && parts.total >= 0.0);
    }

    #[test]
    fn total_loss_vanishes_only_at_the_target(
        s in prop::collection::vec(any::<bool>(), 1..50),
        flip in any::<prop::sample::Index>(),
        off in 1e-3f64..1.0,
    ) {
        let target = arr(s.iter().map(|&b| b as u8 as f64).collect());
        let exact = total_loss(&target, &target, &LossConfig::default()).unwrap();
        // the clamp leaves a residue of order eps^gamma * eps
        prop_assert!(exact.total < 1e-30);
        let mut wrong = target.clone();
        let i = flip.index(s.len());
        wrong[[0, i]] = (target[[0, i]] - off).abs();
        prop_assert!(total_loss(&target, &wrong, &LossConfig::default()).unwrap().total > 0.0);
    }

    #[test]
    fn focal_decreases_in_pt(gamma in 0.1f64..6.0, a in 0.0001f64..0.9999, b in 0.0001f64..0.9999) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let cfg = LossConfig { gamma, ..LossConfig::default() };
        let one = arr(vec![1.0]);
        let f = |p: f64| focal_loss(&one, &arr(vec![p]), &cfg).unwrap();
        prop_assert!(f(hi) < f(lo));
        // for negatives p_t = 1 - p
        let zero = arr(vec![0.0]);
        let g = |p: f64| focal_loss(&zero, &arr(vec![p]), &cfg).unwrap();
        prop_assert!(g(1.0 - hi) < g(1.0 - lo));
    }
}

#[test]
fn batch_contract() {
    let train = common::normals(5, 32, 2);
    let tex = TextureSource::procedural(0);
    let cfg = TrainConfig::default();
    let draw = |seed| make_batch(&train, 4, 4, &cfg.sim, &tex, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let b = draw(9);
    assert_eq!(b.images.shape(), [8, 3, 32, 32]);
    for n in 0..8 {
        let m = b.masks.item(n);
        let ones = m.iter().filter(|&&v| v == 1.0).count();
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        if n < 4 {
            assert_eq!(ones, 0);
            assert_eq!(b.images.item(n), train[b.sources[n]].to_tensor().data());
        } else {
            assert!(ones > 0);
            let src = train[b.sources[n]].to_tensor();
            for c in 0..3 {
                for p in 0..32 * 32 {
                    if m[p] == 0.0 {
                        assert_eq!(b.images.item(n)[c * 1024 + p], src.data()[c * 1024 + p]);
                    }
                }
            }
        }
    }
    let again = draw(9);
    assert_eq!(b.images, again.images);
    assert_eq!(b.masks, again.masks);
    assert!(make_batch(&Vec::new(), 4, 4, &cfg.sim, &tex, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn smoke_training_lowers_the_loss() {
    let images = common::normals(10, 32, 3);
    let mut model = memseg::network::SegModel::build(common::tiny_config(32), &images, 1).unwrap();
    let cfg = TrainConfig {
        iterations: 500,
        log_every: 0,
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &images, &TextureSource::procedural(1), &cfg, 4).unwrap();
    assert_eq!(trace.len(), 500);
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&trace[..50]), mean(&trace[450..]));
    assert!(last < first, "first {first} last {last}");
}
