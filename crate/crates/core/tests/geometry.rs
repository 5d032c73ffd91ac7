use nalgebra::{SMatrix, SVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stitchforge::geometry::{
    self, compute_canvas, offsets_to_homography, ops, patch_corners, rescale_offsets, solve_dlt, warp_image, CanvasSpec,
    CornerOffsets, Homography, Point2,
};
use stitchforge::ImagePlane;
use stitchforge_tensor::{Graph, Tensor};

fn random_offsets(rng: &mut ChaCha8Rng, tau: f64, rho: f64) -> CornerOffsets {
    let t = [rng.gen_range(-tau..=tau), rng.gen_range(-tau..=tau)];
    let mut d = [[0.0; 2]; 4];
    for v in &mut d {
        v[0] = t[0] + rng.gen_range(-rho..=rho);
        v[1] = t[1] + rng.gen_range(-rho..=rho);
    }
    CornerOffsets(d)
}

fn full_pivot_dlt(src: &[Point2; 4], dst: &[Point2; 4]) -> [f64; 9] {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y, u, v) = (src[i].u, src[i].v, dst[i].u, dst[i].v);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.full_piv_lu().solve(&b).expect("oracle system singular");
    [h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0]
}

#[test]
fn dlt_matches_full_pivot_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let src = patch_corners(128.0, 128.0);
        let dst = random_offsets(&mut rng, 64.0, 25.0).displaced(128.0, 128.0);
        let h = solve_dlt(&src, &dst).unwrap().to_flat();
        let oracle = full_pivot_dlt(&src, &dst);
        for k in 0..9 {
            assert!((h[k] - oracle[k]).abs() < 1e-6 * oracle[k].abs().max(1.0), "entry {k}: {} vs {}", h[k], oracle[k]);
        }
    }
}

#[test]
fn dlt_round_trip_thousand_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let off = random_offsets(&mut rng, 64.0, 25.0);
        let h = offsets_to_homography(&off, 128, 128).unwrap();
        for (c, d) in patch_corners(128.0, 128.0).iter().zip(off.displaced(128.0, 128.0)) {
            let p = h.project(*c);
            worst = worst.max((p.u - d.u).abs()).max((p.v - d.v).abs());
        }
    }
    assert!(worst <= 1e-6, "worst corner error {worst}");
}

#[test]
fn rescaled_offsets_agree_with_direct_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let off = random_offsets(&mut rng, 64.0, 25.0);
        let big = rescale_offsets(&off, 4.0, 4.0).unwrap();
        let h_big = offsets_to_homography(&big, 512, 512).unwrap();
        let h_small = offsets_to_homography(&off, 128, 128).unwrap();
        // Conjugating the small solve by the scale change gives the same map.
        let h_conj = Homography::scaling(4.0, 4.0) * h_small * Homography::scaling(0.25, 0.25);
        for c in patch_corners(512.0, 512.0) {
            let (a, b) = (h_big.project(c), h_conj.project(c));
            assert!((a.u - b.u).abs() < 1e-6 && (a.v - b.v).abs() < 1e-6);
        }
    }
}

fn gradient_image(w: usize, h: usize) -> ImagePlane {
    ImagePlane::from_fn(w, h, 1, |x, y, _| (x + 2 * y) as f32 / (w + 2 * h) as f32)
}

fn scalar_loop_warp(img: &ImagePlane, h: &Homography, canvas: &CanvasSpec) -> Vec<f64> {
    let m = h.inverse().unwrap().m;
    let px = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
            0.0
        } else {
            img.get(x as usize, y as usize, 0) as f64
        }
    };
    let mut out = Vec::new();
    for row in 0..canvas.height {
        for col in 0..canvas.width {
            let (x, y) = (col as f64 - canvas.origin.u, row as f64 - canvas.origin.v);
            let z = m[2][0] * x + m[2][1] * y + m[2][2];
            let sx = (m[0][0] * x + m[0][1] * y + m[0][2]) / z;
            let sy = (m[1][0] * x + m[1][1] * y + m[1][2]) / z;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            out.push(
                px(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + px(x0 + 1, y0) * fx * (1.0 - fy)
                    + px(x0, y0 + 1) * (1.0 - fx) * fy
                    + px(x0 + 1, y0 + 1) * fx * fy,
            );
        }
    }
    out
}

#[test]
fn warp_matches_scalar_loop_oracle() {
    let img = gradient_image(8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let off = random_offsets(&mut rng, 1.5, 1.5);
        let h = offsets_to_homography(&off, 8, 8).unwrap();
        let canvas = CanvasSpec::identity(8, 8);
        let got = warp_image(&img, &h, &canvas).unwrap();
        let want = scalar_loop_warp(&img, &h, &canvas);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
    }
}

#[test]
fn identity_and_integer_translation_warps() {
    let img = gradient_image(8, 8);
    let same = warp_image(&img, &Homography::identity(), &CanvasSpec::identity(8, 8)).unwrap();
    assert_eq!(same.data(), img.data());
    let shifted = warp_image(&img, &Homography::translation(3.0, 0.0), &CanvasSpec::identity(8, 8)).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            let want = if x < 3 { 0.0 } else { img.get(x - 3, y, 0) };
            assert_eq!(shifted.get(x, y, 0), want);
        }
    }
}

#[test]
fn warp_gradient_matches_finite_differences() {
    let img = Tensor::from_vec(&[1, 1, 8, 8], (0..64).map(|i| ((i * 37 % 64) as f64) / 64.0).collect());
    let h = offsets_to_homography(&CornerOffsets([[0.7, -0.4], [-0.3, 0.6], [0.5, 0.2], [-0.6, -0.5]]), 8, 8).unwrap();
    let minv = Tensor::from_vec(&[1, 9], h.inverse().unwrap().to_flat().to_vec());
    let weights = Tensor::from_vec(&[1, 1, 8, 8], (0..64).map(|i| ((i * 13 % 17) as f64 - 8.0) / 8.0).collect());
    let loss = |img: &Tensor<f64>, minv: &Tensor<f64>| {
        let mut g = Graph::new();
        let (iv, mv) = (g.leaf(img.clone()), g.leaf(minv.clone()));
        let w = ops::warp(&mut g, iv, mv, 8, 8, (0.0, 0.0));
        let c = g.constant(weights.clone());
        let p = g.mul(w, c);
        let l = g.sum(p);
        (g, l, iv, mv)
    };
    let (g, l, iv, mv) = loss(&img, &minv);
    let grads = g.backward(l);
    let eps = 1e-6;
    let check = |analytic: &Tensor<f64>, numeric: &[f64]| {
        for (a, n) in analytic.data().iter().zip(numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-3 || (a - n).abs() < 1e-8, "analytic {a} numeric {n}");
        }
    };
    let num_img: Vec<f64> = (0..64)
        .map(|i| {
            let (mut p, mut m) = (img.clone(), img.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let (gp, lp, ..) = loss(&p, &minv);
            let (gm, lm, ..) = loss(&m, &minv);
            (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps)
        })
        .collect();
    check(grads.get(iv).unwrap(), &num_img);
    let num_m: Vec<f64> = (0..9)
        .map(|i| {
            let (mut p, mut m) = (minv.clone(), minv.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let (gp, lp, ..) = loss(&img, &p);
            let (gm, lm, ..) = loss(&img, &m);
            (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps)
        })
        .collect();
    check(grads.get(mv).unwrap(), &num_m);
}

#[test]
fn canvas_arithmetic() {
    let c = compute_canvas(128, 128, (64.0, 64.0), (26.0, 26.0));
    assert_eq!((c.width, c.height, c.origin.u, c.origin.v), (312, 312, 92.0, 92.0));
    let c = compute_canvas(100, 100, (50.0, 50.0), (20.0, 20.0));
    assert_eq!((c.width, c.origin.u), (240, 70.0));
    assert_eq!(geometry::VERTEX_ORDER, ["top-left", "top-right", "bottom-left", "bottom-right"]);
}

proptest! {
    #[test]
    fn rescale_is_multiplicative(v in prop::array::uniform8(-100.0f64..100.0), a in 0.1f64..4.0, b in 0.1f64..4.0, c in 0.1f64..4.0, d in 0.1f64..4.0) {
        let x = CornerOffsets::from_flat(v);
        let twice = rescale_offsets(&rescale_offsets(&x, a, b).unwrap(), c, d).unwrap();
        let once = rescale_offsets(&x, a * c, b * d).unwrap();
        for (p, q) in twice.to_flat().iter().zip(once.to_flat()) {
            prop_assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
        }
    }

    #[test]
    fn warp_stays_in_unit_range(pixels in prop::collection::vec(0.0f32..=1.0, 64), v in prop::array::uniform8(-2.0f64..2.0)) {
        let img = ImagePlane::from_vec(8, 8, 1, pixels).unwrap();
        let h = offsets_to_homography(&CornerOffsets::from_flat(v), 8, 8).unwrap();
        let out = warp_image(&img, &h, &CanvasSpec::identity(8, 8)).unwrap();
        prop_assert!(out.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn dlt_composes_with_its_inverse(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = offsets_to_homography(&random_offsets(&mut rng, 64.0, 25.0), 128, 128).unwrap();
        let id = (h * h.inverse().unwrap()).normalized().unwrap().to_flat();
        for (a, b) in id.iter().zip(Homography::identity().to_flat()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
