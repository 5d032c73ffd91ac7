use stitchforge::dataset::{
    procedural_image, read_dataset, synthesize_dataset, synthesize_quadruple, synthesize_record, write_dataset, QuadrupleSource,
    SynthesisConfig,
};
use stitchforge::geometry::{offsets_to_homography, warp_image};
use stitchforge::{CanvasSpec, CornerOffsets, Error, ImagePlane};

fn corpus() -> Vec<ImagePlane> {
    (0..3).map(|s| procedural_image(312, 312, 3, s)).collect()
}

fn small_cfg() -> SynthesisConfig {
    SynthesisConfig { patch_out: (64, 64), seed: 9, ..Default::default() }
}

#[test]
fn no_displacement_gives_identical_patches() {
    let cfg = SynthesisConfig { tau_frac: 0.0, rho_frac: 0.0, ..small_cfg() };
    let q = synthesize_record(&corpus(), &cfg, 0).unwrap();
    assert_eq!(q.reference, q.target);
    assert_eq!(q.offsets, CornerOffsets::zeros());
    assert_eq!((q.canvas.width, q.canvas.height), (64, 64));
    assert_eq!(q.label, q.reference);
}

#[test]
fn perturbation_only_identity_rmse_matches_closed_form() {
    let cfg = SynthesisConfig { rho_frac: 0.25, patch_out: (128, 128), seed: 1, ..Default::default() }.warped();
    let src = [procedural_image(312, 312, 1, 4)];
    let n = 1500;
    let mut total = 0.0;
    for i in 0..n {
        let mut rng = stitchforge::dataset::record_rng(cfg.seed, i);
        // Offsets alone decide the identity error, so sample through the full synthesizer on a small source.
        let q = synthesize_quadruple(&src[0], &cfg, &mut rng).unwrap();
        let d = q.offsets.to_flat();
        assert!(d.iter().all(|v| v.abs() <= 32.0 + 1e-9));
        total += (d.iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
    }
    let mean = total / n as f64;
    assert!((mean - 18.24).abs() < 0.4, "mean identity RMSE {mean}");
}

#[test]
fn warping_target_back_recovers_reference() {
    let cfg = small_cfg();
    let data = synthesize_dataset(&corpus(), &cfg, 6).unwrap();
    for q in &data {
        let (w, h) = (q.reference.width(), q.reference.height());
        let hmg = offsets_to_homography(&q.offsets, w, h).unwrap();
        let canvas = CanvasSpec::identity(w, h);
        let back = warp_image(&q.target, &hmg, &canvas).unwrap();
        let valid = warp_image(&ImagePlane::filled(w, h, 1, 1.0), &hmg, &canvas).unwrap();
        let (mut sum, mut count) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                if valid.get(x, y, 0) > 0.999 {
                    for c in 0..3 {
                        sum += (back.get(x, y, c) - q.reference.get(x, y, c)).abs() as f64;
                        count += 1;
                    }
                }
            }
        }
        assert!(count > 0);
        assert!(sum / (count as f64) < 0.02, "mean abs diff {}", sum / count as f64);
    }
}

#[test]
fn offsets_bounded_and_centered() {
    let cfg = SynthesisConfig { patch_out: (32, 32), seed: 3, ..Default::default() };
    let src = [procedural_image(96, 96, 1, 2)];
    let ((tw, th), (rw, rh)) = cfg.output_bounds();
    let n = 5000;
    let mut sums = [0.0; 8];
    for i in 0..n {
        let q = synthesize_record(&src, &cfg, i).unwrap();
        let d = q.offsets.to_flat();
        for (k, v) in d.iter().enumerate() {
            let bound = if k % 2 == 0 { tw + rw } else { th + rh };
            assert!(v.abs() <= bound + 1e-9);
            sums[k] += v;
        }
        assert_eq!((q.label.width(), q.label.height()), (q.canvas.width, q.canvas.height));
    }
    for (k, s) in sums.iter().enumerate() {
        let bound = if k % 2 == 0 { tw + rw } else { th + rh };
        assert!((s / n as f64).abs() <= 0.05 * bound, "component {k} mean {}", s / n as f64);
    }
}

#[test]
fn same_seed_same_bytes() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = synthesize_dataset(&corpus(), &small_cfg(), 3).unwrap();
    let b = synthesize_dataset(&corpus(), &small_cfg(), 3).unwrap();
    write_dataset(&a, dir_a.path()).unwrap();
    write_dataset(&b, dir_b.path()).unwrap();
    for rel in ["manifest", "imgs/000000_ref.png", "imgs/000002_tgt.png", "imgs/000001_label.png"] {
        assert_eq!(std::fs::read(dir_a.path().join(rel)).unwrap(), std::fs::read(dir_b.path().join(rel)).unwrap());
    }
}

#[test]
fn round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthesize_dataset(&corpus(), &small_cfg(), 2).unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    for (q, r) in data.iter().zip(back.iter()) {
        let r = r.unwrap();
        for (a, b) in q.offsets.to_flat().iter().zip(r.offsets.to_flat()) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert_eq!(q.canvas, r.canvas);
        for (a, b) in [(&q.reference, &r.reference), (&q.target, &r.target), (&q.label, &r.label)] {
            assert!(a.same_shape(b));
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }
}

#[test]
fn empty_dataset_and_missing_image() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&Vec::new(), dir.path()).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap().len(), 0);

    let dir = tempfile::tempdir().unwrap();
    let data = synthesize_dataset(&corpus(), &small_cfg(), 1).unwrap();
    write_dataset(&data, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("imgs/000000_tgt.png")).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::MissingImage { record, .. }) => assert_eq!(record, "000000"),
        other => panic!("expected MissingImage, got {other:?}"),
    }
}

#[test]
fn corrupt_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest"), "id\treference\n000000\tx\n").unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::CorruptManifest { .. })));
}
