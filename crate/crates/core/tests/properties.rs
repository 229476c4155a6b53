use proptest::prelude::*;
use std::collections::BTreeSet;

use weave_core::analyzer::{self, DensityMap, MapSource, MapTransform, Orientation};
use weave_core::dataset;
use weave_core::preprocess;
use weave_core::raster::{self, GrayImage};
use weave_core::regnet::{self, Arch, ArchConfig, RegModel};
use weave_core::spectral;

fn image(max_side: usize) -> impl Strategy<Value = GrayImage> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0u8..=255, h * w)
            .prop_map(move |px| GrayImage::new(h, w, 200.0, px.into_iter().map(f32::from).collect()).unwrap())
    })
}

fn sorted(img: &GrayImage) -> Vec<f32> {
    let mut v = img.pixels().to_vec();
    v.sort_by(f32::total_cmp);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quarter_turns_permute_pixels(img in image(24)) {
        let once = raster::rot90_cw(&img);
        prop_assert_eq!((once.height(), once.width()), (img.width(), img.height()));
        prop_assert_eq!(sorted(&once), sorted(&img));
        let full = raster::rot90_cw(&raster::rot90_cw(&raster::rot90_cw(&once)));
        prop_assert_eq!(full.pixels(), img.pixels());
    }

    #[test]
    fn flips_are_involutions(img in image(24)) {
        let hh = raster::flip_h(&raster::flip_h(&img));
        let vv = raster::flip_v(&raster::flip_v(&img));
        prop_assert_eq!(hh.pixels(), img.pixels());
        prop_assert_eq!(vv.pixels(), img.pixels());
        // Two quarter turns equal both flips.
        let half = raster::rot90_cw(&raster::rot90_cw(&img));
        let both = raster::flip_h(&raster::flip_v(&img));
        prop_assert_eq!(half.pixels(), both.pixels());
    }

    #[test]
    fn crops_compose(img in image(32), a in 0usize..8, b in 0usize..8, c in 0usize..8, d in 0usize..8) {
        let (h, w) = (img.height(), img.width());
        prop_assume!(a + c < h && b + d < w);
        let (h1, w1) = (h - a, w - b);
        let (h2, w2) = (h1 - c, w1 - d);
        let nested = raster::crop(&raster::crop(&img, a, b, h1, w1).unwrap(), c, d, h2, w2).unwrap();
        let direct = raster::crop(&img, a + c, b + d, h2, w2).unwrap();
        prop_assert_eq!(nested.pixels(), direct.pixels());
        prop_assert!(raster::crop(&img, a, b, h1 + 1, w1).is_err());
    }

    #[test]
    fn equalization_lut_is_monotone_and_stable(img in image(32)) {
        let (once, lut) = preprocess::equalize(&img);
        prop_assert!(lut.table().windows(2).all(|p| p[0] <= p[1]));
        prop_assert_eq!(*lut.table().last().unwrap(), 255.0);
        let (twice, _) = preprocess::equalize(&once);
        for (x, y) in once.pixels().iter().zip(twice.pixels()) {
            prop_assert!((x - y).abs() <= 1.0);
        }
    }

    #[test]
    fn kernel_rule_is_odd_bounded_and_nonincreasing(t in 4.0f64..30.0, dt in 0.0f64..5.0) {
        let k = preprocess::kernel_from_density(t);
        prop_assert!(k % 2 == 1 && k >= preprocess::MIN_KERNEL);
        prop_assert!(k as f64 <= 37.05 - 0.90 * t || k == preprocess::MIN_KERNEL);
        prop_assert!(preprocess::kernel_from_density(t + dt) <= k);
    }

    #[test]
    fn agreement_filter_matches_definition(
        fv in 4.0f64..30.0, fh in 4.0f64..30.0, dv in 4.0f64..30.0, dh in 4.0f64..30.0, thr in 0.0f64..0.2,
    ) {
        let expect = (fv - dv).abs() / dv < thr && (fh - dh).abs() / dh < thr;
        prop_assert_eq!(analyzer::agrees((fv, fh), (dv, dh), thr), expect);
        prop_assert!(analyzer::agrees((dv, dh), (dv, dh), thr) == (thr > 0.0));
        prop_assert_eq!(spectral::relative_agreement(fv, dv).unwrap(), (fv - dv).abs() / dv);
    }

    #[test]
    fn pearson_ignores_affine_changes(
        a in proptest::collection::vec(-10.0f64..10.0, 3..40),
        noise in proptest::collection::vec(-1.0f64..1.0, 40),
        scale in 0.1f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| x + n).collect();
        if let Some(r) = analyzer::pearson(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&r));
            let moved: Vec<f64> = b.iter().map(|x| scale * x + shift).collect();
            let r2 = analyzer::pearson(&a, &moved).unwrap();
            prop_assert!((r - r2).abs() < 1e-9);
            let negated: Vec<f64> = b.iter().map(|x| -x).collect();
            prop_assert!((analyzer::pearson(&a, &negated).unwrap() + r).abs() < 1e-9);
        }
    }

    #[test]
    fn sweep_tiles_stay_inside_and_cover(h in 200usize..3000, w in 200usize..3000, o in 0.0f64..0.95) {
        let g = analyzer::sweep_geometry(h, w, o).unwrap();
        prop_assert_eq!(g.stride, ((200.0 * (1.0 - o)).round() as usize).max(1));
        prop_assert!((g.rows - 1) * g.stride + 200 <= h && g.rows * g.stride + 200 > h);
        prop_assert!((g.cols - 1) * g.stride + 200 <= w && g.cols * g.stride + 200 > w);
        // Neighbouring patches share 200 - stride pixels.
        prop_assert!(((200 - g.stride) as f64 / 200.0 - o).abs() <= 0.5 / 200.0 + 1e-12);
    }

    #[test]
    fn map_transforms_are_involutions(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
        let mut m = DensityMap::new_missing(Orientation::Horizontal, MapSource::Ft, 200, rows, cols);
        for (k, v) in m.values.iter_mut().enumerate() {
            *v = ((seed.wrapping_mul(k as u64 + 1) >> 7) % 1000) as f64 / 10.0;
        }
        for t in [MapTransform::None, MapTransform::FlipH, MapTransform::FlipV] {
            let back = analyzer::transform_map(&analyzer::transform_map(&m, t), t);
            prop_assert_eq!(&back.values, &m.values);
        }
    }

    #[test]
    fn map_csv_round_trips(rows in 1usize..8, cols in 1usize..8, vals in proptest::collection::vec(prop::option::of(4.0f64..30.0), 64)) {
        let mut m = DensityMap::new_missing(Orientation::Vertical, MapSource::Model, 100, rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, vals[i * cols + j]);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        analyzer::write_map_csv(&m, &p).unwrap();
        let back = analyzer::read_map_csv(&p).unwrap();
        prop_assert_eq!((back.orientation, back.source, back.stride, back.rows, back.cols), (m.orientation, m.source, m.stride, m.rows, m.cols));
        for (x, y) in back.values.iter().zip(&m.values) {
            prop_assert!(x == y || (x.is_nan() && y.is_nan()));
        }
    }

    #[test]
    fn ramp_index_is_monotone(a in -10.0f64..40.0, b in -10.0f64..40.0) {
        let (lo, hi) = (4.0, 30.0);
        let (ia, ib) = (analyzer::ramp_index(a, lo, hi), analyzer::ramp_index(b, lo, hi));
        prop_assert!(ia <= 255 && ib <= 255);
        if a <= b {
            prop_assert!(ia <= ib);
        }
    }

    #[test]
    fn nmae_is_zero_only_on_exact_predictions(labels in proptest::collection::vec(4.0f64..30.0, 1..20), bump in 1e-6f64..5.0) {
        prop_assert_eq!(regnet::nmae(&labels, &labels).unwrap(), 0.0);
        let mut preds = labels.clone();
        preds[0] += bump;
        let e = regnet::nmae(&preds, &labels).unwrap();
        prop_assert!((e - bump / labels[0] / labels.len() as f64).abs() < 1e-12);
    }
}

fn tiny_model(seed: u64) -> RegModel {
    let cfg = ArchConfig {
        filters: 2,
        dense: vec![4, 1],
        input_side: 8,
        stage_blocks: vec![1],
        ..ArchConfig::default_for(Arch::Reg)
    };
    RegModel::new(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weight_files_reject_any_single_byte_change(seed in any::<u64>(), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.wlw");
        let model = tiny_model(seed);
        regnet::save_weights(&model, &p).unwrap();
        let back = regnet::load_weights(&p).unwrap();
        prop_assert_eq!(&back.config, &model.config);
        let mut bytes = std::fs::read(&p).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        std::fs::write(&p, &bytes).unwrap();
        prop_assert!(regnet::load_weights(&p).is_err());
    }
}

fn records(sizes: &[usize]) -> Vec<dataset::PatchRecord> {
    let prov = dataset::Provenance { off_y: 0, off_x: 0, flip: dataset::Flip::None, rotation_deg: 0.0, rot90: false };
    sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| {
            (0..n).map(move |_| dataset::PatchRecord {
                patch: GrayImage::filled(2, 2, 200.0, 0.0),
                label: 10.0,
                canvas_id: format!("c{c:03}"),
                provenance: prov,
            })
        })
        .collect()
}

proptest! {
    #[test]
    fn splits_are_canvas_disjoint_and_complete(sizes in proptest::collection::vec(1usize..50, 3..20)) {
        let recs = records(&sizes);
        let total = recs.len();
        let (a, b, c) = dataset::split_by_canvas(recs, (0.7, 0.15, 0.15)).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), total);
        prop_assert!(!a.is_empty() && !b.is_empty() && !c.is_empty());
        let ids = |s: &[dataset::PatchRecord]| s.iter().map(|r| r.canvas_id.clone()).collect::<BTreeSet<_>>();
        let (ia, ib, ic) = (ids(&a), ids(&b), ids(&c));
        prop_assert!(ia.is_disjoint(&ib) && ia.is_disjoint(&ic) && ib.is_disjoint(&ic));
        prop_assert_eq!(ia.len() + ib.len() + ic.len(), sizes.len());
    }
}
