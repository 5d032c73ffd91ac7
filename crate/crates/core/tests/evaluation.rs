use proptest::prelude::*;
use stitchforge::dataset::{procedural_image, synthesize_dataset, StitchQuadruple, SynthesisConfig};
use stitchforge::evaluation::{evaluate_with, image_fidelity, rmse_4pt, split_report, EvalReport, PSNR_CAP};
use stitchforge::{CornerOffsets, Error, ImagePlane};

#[test]
fn rmse_examples() {
    let gt = CornerOffsets::from_flat([1.0, -2.0, 3.0, 4.0, -5.0, 6.0, 7.0, -8.0]);
    assert_eq!(rmse_4pt(&gt, &gt), 0.0);
    let shifted = CornerOffsets::from_flat(gt.to_flat().map(|v| v + 2.0));
    assert_eq!(rmse_4pt(&shifted, &gt), 2.0);
}

fn offsets() -> impl Strategy<Value = CornerOffsets> {
    prop::array::uniform8(-50.0f64..50.0).prop_map(CornerOffsets::from_flat)
}

proptest! {
    #[test]
    fn rmse_is_a_metric(a in offsets(), b in offsets(), c in offsets()) {
        let ab = rmse_4pt(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, rmse_4pt(&b, &a));
        prop_assert_eq!(rmse_4pt(&a, &a), 0.0);
        prop_assert!(ab <= rmse_4pt(&a, &c) + rmse_4pt(&c, &b) + 1e-9);
    }

    #[test]
    fn split_means_are_ordered(errors in prop::collection::vec(0.0f64..100.0, 1..60)) {
        let r = split_report(&errors);
        let parts: Vec<f64> = [r.top_30, r.mid_30, r.bottom_40].into_iter().flatten().collect();
        for w in parts.windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-12);
        }
        prop_assert_eq!(r.count, errors.len());
    }
}

#[test]
fn split_examples() {
    let r = split_report(&[10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    assert_eq!(r.top_30, Some(2.0));
    assert_eq!(r.mid_30, Some(5.0));
    assert_eq!(r.bottom_40, Some(8.5));
    assert_eq!(r.overall, Some(5.5));

    let single = split_report(&[3.5]);
    assert_eq!((single.top_30, single.mid_30, single.bottom_40, single.overall), (None, None, Some(3.5), Some(3.5)));

    let flat = split_report(&[2.0; 7]);
    assert_eq!((flat.top_30, flat.mid_30, flat.bottom_40), (Some(2.0), Some(2.0), Some(2.0)));

    let empty = split_report(&[]);
    assert_eq!(empty.overall, None);
}

fn toy_dataset(n: usize, warped: bool) -> Vec<StitchQuadruple> {
    let corpus: Vec<ImagePlane> = (0..2).map(|s| procedural_image(160, 160, 1, s)).collect();
    let cfg = SynthesisConfig { patch_out: (64, 64), seed: 3, ..Default::default() };
    let cfg = if warped { cfg.warped() } else { cfg };
    synthesize_dataset(&corpus, &cfg, n).unwrap()
}

#[test]
fn oracle_predictor_scores_zero() {
    let data = toy_dataset(12, false);
    let report = evaluate_with(&data, 5, |q| Ok(q.offsets)).unwrap();
    assert!(report.samples.iter().all(|s| s.rmse == 0.0));
    assert_eq!(report.splits.overall, Some(0.0));
    assert!(report.identity.overall.unwrap() > 0.0);
    assert_eq!(report.overlap_buckets.iter().map(|b| b.count).sum::<usize>(), 12);
}

#[test]
fn identity_predictor_matches_identity_column() {
    let data = toy_dataset(20, true);
    let report = evaluate_with(&data, 0, |_| Ok(CornerOffsets::zeros())).unwrap();
    assert_eq!(report.splits, report.identity);
    let again = evaluate_with(&data, 0, |_| Ok(CornerOffsets::zeros())).unwrap();
    assert_eq!(report, again);
    // Perturbation-only patches keep most of their overlap.
    assert!(report.samples.iter().all(|s| s.overlap > 0.5));
}

#[test]
fn report_round_trips_and_renders() {
    let data = toy_dataset(6, false);
    let report = evaluate_with(&data, 4, |q| Ok(q.offsets + CornerOffsets::uniform(1.0, -1.0))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    report.write_json(&path).unwrap();
    assert_eq!(EvalReport::read_json(&path).unwrap(), report);
    let table = report.render_table();
    assert!(table.contains("identity") && table.contains("model"));
    assert!(report.overlap_curve_svg().starts_with("<svg"));

    let one = evaluate_with(&data[..1].to_vec(), 0, |q| Ok(q.offsets)).unwrap();
    assert!(one.render_table().contains('—'));
}

#[test]
fn empty_dataset_is_an_error() {
    let empty: Vec<StitchQuadruple> = Vec::new();
    assert!(matches!(evaluate_with(&empty, 0, |q| Ok(q.offsets)), Err(Error::DatasetEmpty)));
}

#[test]
fn fidelity_examples() {
    let img = ImagePlane::from_fn(24, 20, 3, |x, y, c| ((x * 3 + y * 5 + c) % 13) as f32 / 12.0 + 0.01);
    let same = image_fidelity(&img, &img).unwrap();
    assert_eq!(same.psnr, PSNR_CAP);
    assert!((same.ssim - 1.0).abs() < 1e-12);

    let zeros = ImagePlane::zeros(16, 16, 3);
    let ones = ImagePlane::filled(16, 16, 3, 1.0);
    assert_eq!(image_fidelity(&zeros, &ones).unwrap().psnr, 0.0);
    assert_eq!(image_fidelity(&ones, &zeros).unwrap().psnr, 0.0);

    let other = ImagePlane::from_fn(24, 20, 3, |x, y, _| ((x + y) % 7) as f32 / 6.0 * 0.9 + 0.05);
    let ab = image_fidelity(&img, &other).unwrap();
    let ba = image_fidelity(&other, &img).unwrap();
    assert!((ab.ssim - ba.ssim).abs() < 1e-12);
    assert!(ab.ssim < 1.0 && ab.psnr < PSNR_CAP);
}

#[test]
fn fidelity_ignores_pixels_outside_the_label() {
    let mut label = ImagePlane::zeros(16, 16, 1);
    for y in 0..8 {
        for x in 0..16 {
            label.set(x, y, 0, 0.5);
        }
    }
    let mut pred = label.clone();
    for y in 8..16 {
        for x in 0..16 {
            pred.set(x, y, 0, 1.0);
        }
    }
    assert_eq!(image_fidelity(&pred, &label).unwrap().psnr, PSNR_CAP);
}
