mod common;

use memseg::data_io::{load_image, load_mask, scan_dataset, Label, Split};
use memseg::encoder::{EncoderConfig, FeaturePyramid};
use memseg::eval::{evaluate, load_test_set, synth_category, SynthSpec, ToySpec};
use memseg::network::SegModel;
use memseg::Error;

#[test]
fn synthetic_category_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        size: 32,
        family_seed: 4,
        n_train: 5,
        n_test_normal: 3,
        toy: ToySpec {
            count: 6,
            ..ToySpec::default()
        },
    };
    synth_category(dir.path(), "tex", &spec).unwrap();
    let train = scan_dataset(dir.path(), "tex", Split::Train).unwrap();
    assert_eq!(train.len(), 5);
    assert!(train.items.iter().all(|i| i.label == Label::Normal));
    let test = scan_dataset(dir.path(), "tex", Split::Test).unwrap();
    assert_eq!(test.len(), 9);
    assert_eq!(test.anomalous_count(), 6);
    let mut sorted = test.items.clone();
    sorted.sort_by(|a, b| a.image.cmp(&b.image));
    assert_eq!(sorted, test.items);
    for item in &test.items {
        let img = load_image(&item.image, 32).unwrap();
        assert!(img.min() >= 0.0 && img.max() <= 1.0);
        assert_eq!(img.array().dim().0, 3);
        if item.label == Label::Anomalous {
            let m = load_mask(item.mask.as_ref().unwrap(), 32).unwrap();
            assert_eq!(m.dim(), (32, 32));
            assert!(m.iter().any(|&v| v == 1.0));
        }
    }
    // rescanning gives the same index
    assert_eq!(scan_dataset(dir.path(), "tex", Split::Test).unwrap(), test);

    let model = SegModel::build(common::tiny_config(32), &common::normals(4, 32, 4), 0).unwrap();
    let samples = load_test_set(&test, 32).unwrap();
    let report = evaluate(&model, &samples, 10).unwrap();
    assert_eq!((report.n_normal, report.n_anomalous, report.n_pixel_images), (3, 6, 9));
    assert!((0.0..=1.0).contains(&report.image_auroc));
}

#[test]
fn shape_contract_for_sizes_divisible_by_32() {
    for size in [32, 64, 96] {
        let model = common::tiny_model(size);
        let img = &common::normals(1, size, 8)[0];
        let pyr: FeaturePyramid = model.encoder().extract_pyramid(&img.to_tensor()).unwrap();
        let w = model.encoder().widths();
        assert_eq!(
            pyr.shapes(),
            [
                [1, w[0], size / 4, size / 4],
                [1, w[1], size / 8, size / 8],
                [1, w[2], size / 16, size / 16]
            ]
        );
        let map = model.predict(img).unwrap();
        assert_eq!(map.dim(), (size, size));
        assert!(map.probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }
    let model = common::tiny_model(32);
    assert!(model.predict(&common::normals(1, 48, 8)[0]).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let model = common::tiny_model(32);
    model.save(&path, "seed = 3\n").unwrap();
    let back = SegModel::load(&path, None).unwrap();
    let img = &common::normals(1, 32, 9)[0];
    let (a, b) = (model.predict(img).unwrap(), back.predict(img).unwrap());
    assert!(a.probs.iter().zip(b.probs.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(model.tensor_digests(), back.tensor_digests());

    let other = EncoderConfig::Toy {
        widths: [4, 8, 8, 8],
        seed: 6,
    };
    match SegModel::load(&path, Some(&other)) {
        Err(Error::EncoderMismatch { checkpoint, provided }) => {
            assert!(checkpoint.starts_with("toy:") && provided.starts_with("toy:"));
            assert_ne!(checkpoint, provided);
        }
        other => panic!("expected encoder mismatch, got {:?}", other.map(|_| ())),
    }
}
