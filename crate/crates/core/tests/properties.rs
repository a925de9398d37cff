use conpres::metrics::{fid, kid, masked_ssim, ssim_map};
use conpres::types::NUM_DOMAINS;
use conpres::{DomainLabel, Image, SemanticMap};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(-1.0f32..=1.0, h * w).prop_map(move |d| Image::new(h, w, d).unwrap())
}

fn features(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| DMatrix::from_row_slice(rows, cols, &d))
}

fn spread(img: &Image) -> f32 {
    let (lo, hi) = img.data().iter().fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_bounded_and_symmetric(a in image(16, 20), b in image(16, 20)) {
        let ab = ssim_map(&a, &b).unwrap();
        let ba = ssim_map(&b, &a).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(x));
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_of_image_with_itself_is_one(a in image(16, 20)) {
        prop_assume!(spread(&a) > 0.1);
        for v in ssim_map(&a, &a).unwrap() {
            prop_assert!((v - 1.0).abs() < 1e-9);
        }
        let mask = SemanticMap::new(16, 20, 2, vec![1; 320]).unwrap();
        prop_assert!((masked_ssim(&a, &a, &mask).unwrap() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_identical_sets(a in features(24, 4), b in features(30, 4)) {
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab.abs()));
        prop_assert!(ab > -1e-8);
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn fid_is_translation_invariant(a in features(24, 3), b in features(24, 3), shift in -2.0f64..2.0) {
        let sa = a.map(|v| v + shift);
        let sb = b.map(|v| v + shift);
        let d0 = fid(&a, &b).unwrap();
        let d1 = fid(&sa, &sb).unwrap();
        prop_assert!((d0 - d1).abs() < 1e-7 * (1.0 + d0.abs()));
    }

    #[test]
    fn kid_is_symmetric(a in features(20, 5), b in features(20, 5)) {
        let ab = kid(&a, &b).unwrap().value;
        let ba = kid(&b, &a).unwrap().value;
        prop_assert!((ab - ba).abs() < 1e-10 * (1.0 + ab.abs()));
    }

    #[test]
    fn out_of_range_pixels_are_rejected(mut d in prop::collection::vec(-1.0f32..=1.0, 256), i in 0usize..256, excess in 1e-3f32..10.0, neg in any::<bool>()) {
        prop_assert!(Image::new(16, 16, d.clone()).is_ok());
        d[i] = if neg { -1.0 - excess } else { 1.0 + excess };
        prop_assert!(Image::new(16, 16, d).is_err());
    }

    #[test]
    fn byte_roundtrip_is_exact(bytes in prop::collection::vec(any::<u8>(), 256)) {
        let img = Image::from_u8(16, 16, &bytes).unwrap();
        prop_assert_eq!(img.to_u8(), bytes);
    }

    #[test]
    fn semantic_maps_survive_the_image_encoding(classes in 2u8..8, raw in prop::collection::vec(any::<u8>(), 256)) {
        let labels: Vec<u8> = raw.iter().map(|v| v % classes).collect();
        let map = SemanticMap::new(16, 16, classes, labels).unwrap();
        let back = SemanticMap::from_image(&map.to_image().unwrap(), classes).unwrap();
        prop_assert_eq!(back, map);
    }
}

#[test]
fn one_hot_codes_are_distinct_unit_vectors() {
    let codes: Vec<_> = DomainLabel::ALL.iter().map(|d| d.one_hot()).collect();
    assert_eq!(codes.len(), NUM_DOMAINS);
    for (i, c) in codes.iter().enumerate() {
        assert_eq!(c.iter().sum::<f32>(), 1.0);
        assert_eq!(c[DomainLabel::ALL[i].index()], 1.0);
        assert_eq!(DomainLabel::from_index(DomainLabel::ALL[i].index()), Some(DomainLabel::ALL[i]));
    }
}
