use prcnn_core::params::seeded_rng;
use prcnn_core::roi::*;
use prcnn_core::Tensor;
use proptest::prelude::*;
use rand::Rng;
use std::collections::BTreeMap;

#[path = "support/roi_oracle.rs"]
mod oracle;

use oracle::*;

#[test]
fn roi_align_matches_tent_oracle_on_random_cases() {
    let mut rng = seeded_rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let c = rng.gen_range(1..=3);
        let stride = [1, 2, 4, 8][rng.gen_range(0..4)];
        let out = [7, 14, 32][rng.gen_range(0..3)];
        let sr = rng.gen_range(1..=3);
        let f = Tensor::uniform([1, c, h, w], 1.0, &mut rng);
        let b = random_box(&mut rng, (w * stride) as f64, (h * stride) as f64);
        let got = roi_align(&f, &b, stride, out, sr).unwrap();
        let want = roi_align_oracle(&f, &b, stride, out, sr);
        for (g, o) in got.data().iter().zip(&want) {
            worst = worst.max((g - o).abs());
        }
    }
    assert!(worst < 1e-12, "worst deviation {worst:e}");
}

#[test]
fn two_by_two_example() {
    let f = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = RoiBox::new(0.0, 0.0, 2.0, 2.0, 1.0).unwrap();
    assert_eq!(roi_align(&f, &b, 1, 1, 1).unwrap().data(), &[2.5]);
}

fn pyramid(image: usize, c: usize, rng: &mut impl Rng) -> FeaturePyramid {
    let levels = PYRAMID_LEVELS
        .iter()
        .map(|&k| {
            let n = image.div_ceil(level_stride(k));
            (k, Tensor::uniform([1, c, n, n], 1.0, rng))
        })
        .collect::<BTreeMap<_, _>>();
    FeaturePyramid::new(image, image, levels).unwrap()
}

#[test]
fn pss_pools_every_level_worth_of_boxes_from_p2() {
    let mut rng = seeded_rng(5);
    let p = pyramid(1024, 2, &mut rng);
    let cfg = AssignConfig::default();
    // Side lengths chosen to fall on P2, P3, P4 and P5 respectively.
    let boxes: Vec<RoiBox> = [40.0, 150.0, 300.0, 700.0]
        .iter()
        .map(|&side| RoiBox::new(10.0, 20.0, 10.0 + side, 20.0 + side, 0.5).unwrap())
        .collect();
    let levels: Vec<u8> = boxes.iter().map(|b| fpn_assign_level(b, &cfg).unwrap()).collect();
    assert_eq!(levels, vec![2, 3, 4, 5]);
    let fpn = fpn_pool(&p, &boxes, &cfg, 14, 2).unwrap();
    assert_eq!(fpn.iter().map(|r| r.level).collect::<Vec<_>>(), levels);
    let pss = pss_pool(&p, &boxes, 32, 2).unwrap();
    for (r, b) in pss.iter().zip(&boxes) {
        assert_eq!(r.level, 2);
        assert_eq!(r.features, roi_align(p.level(2).unwrap(), b, 4, 32, 2).unwrap());
    }
}

#[test]
fn pss_requires_p2() {
    let mut rng = seeded_rng(1);
    let p3 = Tensor::uniform([1, 1, 8, 8], 1.0, &mut rng);
    let p = FeaturePyramid::new(64, 64, BTreeMap::from([(3, p3)])).unwrap();
    let b = RoiBox::new(0.0, 0.0, 8.0, 8.0, 1.0).unwrap();
    assert!(pss_pool(&p, &[b], 7, 2).is_err());
}

#[test]
fn subsampling_keeps_top_scores() {
    let mut rng = seeded_rng(3);
    let boxes: Vec<RoiBox> = (0..50)
        .map(|_| RoiBox::new(0.0, 0.0, 1.0, 1.0, (rng.gen_range(0..10) as f64) / 10.0).unwrap())
        .collect();
    let kept = subsample_parsing_rois(&boxes, PARSING_ROI_CAP);
    assert_eq!(kept.len(), 32);
    assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
    let mut all: Vec<f64> = boxes.iter().map(|b| b.score).collect();
    all.sort_by(|a, b| b.total_cmp(a));
    assert_eq!(kept.iter().map(|b| b.score).collect::<Vec<_>>(), all[..32].to_vec());
    assert_eq!(subsample_parsing_rois(&boxes[..5], 32).len(), 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pss_equals_direct_roi_align(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = seeded_rng(seed);
        let p = pyramid(128, 2, &mut rng);
        let boxes: Vec<RoiBox> = (0..n).map(|_| random_box(&mut rng, 128.0, 128.0)).collect();
        let pooled = pss_pool(&p, &boxes, 14, 2).unwrap();
        for (r, b) in pooled.iter().zip(&boxes) {
            prop_assert_eq!(r.level, 2);
            prop_assert_eq!(&r.features, &roi_align(p.level(2).unwrap(), b, 4, 14, 2).unwrap());
        }
    }

    #[test]
    fn translating_box_and_map_together_is_invariant(
        seed in any::<u64>(),
        dx in 0usize..5,
        dy in 0usize..5,
        stride in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let mut rng = seeded_rng(seed);
        let (h, w) = (8, 9);
        let f = Tensor::uniform([1, 2, h, w], 1.0, &mut rng);
        // Box strictly inside the map so clipping never applies.
        let s = stride as f64;
        let x1 = rng.gen_range(0.5..3.0) * s;
        let y1 = rng.gen_range(0.5..3.0) * s;
        let b = RoiBox::new(x1, y1, x1 + rng.gen_range(0.5..4.0) * s, y1 + rng.gen_range(0.5..4.0) * s, 0.5).unwrap();
        let mut shifted = Tensor::zeros([1, 2, h + dy, w + dx]);
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let at = shifted.offset(0, c, y + dy, x + dx);
                    shifted.data_mut()[at] = f.at(0, c, y, x);
                }
            }
        }
        let moved = b.translate((dx * stride) as f64, (dy * stride) as f64);
        let a = roi_align(&f, &b, stride, 7, 2).unwrap();
        let m = roi_align(&shifted, &moved, stride, 7, 2).unwrap();
        prop_assert!(a.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn level_is_monotone_in_box_size(a in 1.0f64..4000.0, b in 1.0f64..4000.0) {
        let cfg = AssignConfig::default();
        let (small, large) = if a <= b { (a, b) } else { (b, a) };
        let la = fpn_assign_level(&RoiBox::new(0.0, 0.0, small, small, 1.0).unwrap(), &cfg).unwrap();
        let lb = fpn_assign_level(&RoiBox::new(0.0, 0.0, large, large, 1.0).unwrap(), &cfg).unwrap();
        prop_assert!(la <= lb);
        prop_assert!((2..=5).contains(&la) && (2..=5).contains(&lb));
    }

    #[test]
    fn scale_cdf_is_a_monotone_count(
        scales in prop::collection::vec(0.0f64..1.0, 0..40),
        mut grid in prop::collection::vec(0.0f64..1.2, 1..12),
    ) {
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let cdf = scale_cdf(&scales, &grid).unwrap();
        for w in cdf.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
        for &(g, frac) in &cdf {
            let count = scales.iter().filter(|&&s| s <= g).count();
            let expected = if scales.is_empty() { 0.0 } else { count as f64 / scales.len() as f64 };
            prop_assert_eq!(frac, expected);
        }
    }
}

#[test]
fn scale_cdf_rejects_unsorted_grid() {
    assert!(scale_cdf(&[0.5], &[0.5, 0.5]).is_err());
    assert!(scale_cdf(&[0.5], &[0.6, 0.5]).is_err());
    let full = RoiBox::new(0.0, 0.0, 100.0, 50.0, 1.0).unwrap();
    let s = relative_scale(&full, 100.0, 50.0, ScaleMeasure::Area).unwrap();
    assert_eq!(scale_cdf(&[s], &[0.5, 1.0]).unwrap(), vec![(0.5, 0.0), (1.0, 1.0)]);
}
