use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stitchforge::correlation::{correlate, correlate_var, global_radius, memory_cells, slot};
use stitchforge_tensor::{Graph, Tensor};

fn random_features(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn at(v: &Tensor<f64>, k: usize, y: usize, x: usize) -> f64 {
    let (_, _, h, w) = v.dims4();
    v.data()[(k * h + y) * w + x]
}

#[test]
fn self_correlation_peaks_at_zero_displacement() {
    let f = random_features(1, [1, 5, 6, 6]);
    for r in [1, 3, global_radius(6, 6)] {
        let v = correlate(&f, &f, r).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert!((at(&v, slot(r, 0, 0), y, x) - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shifted_copy_peaks_at_the_shift() {
    let a = random_features(2, [1, 4, 6, 7]);
    let mut b = Tensor::zeros(&[1, 4, 6, 7]);
    for c in 0..4 {
        for y in 0..6 {
            for x in 0..7 {
                b.data_mut()[(c * 6 + y) * 7 + x] = a.data()[(c * 6 + y) * 7 + (x + 6) % 7];
            }
        }
    }
    let v = correlate(&a, &b, 2).unwrap();
    for y in 0..6 {
        for x in 0..6 {
            assert!((at(&v, slot(2, 0, 1), y, x) - 1.0).abs() < 1e-12);
            // The peak over all slots is the shift itself.
            let best = (0..25).max_by(|&i, &j| at(&v, i, y, x).total_cmp(&at(&v, j, y, x))).unwrap();
            assert_eq!(best, slot(2, 0, 1));
        }
    }
}

#[test]
fn out_of_bounds_slots_are_zero() {
    let f = random_features(3, [1, 3, 4, 4]);
    let v = correlate(&f, &f, 4).unwrap();
    assert_eq!(at(&v, slot(4, -1, 0), 0, 2), 0.0);
    assert_eq!(at(&v, slot(4, 0, 4), 1, 0), 0.0);
    assert_eq!(at(&v, slot(4, 4, 4), 0, 0), 0.0);
}

#[test]
fn gradient_matches_finite_differences() {
    let a = random_features(4, [1, 3, 4, 4]);
    let b = random_features(5, [1, 3, 4, 4]);
    let r = 2;
    let weights = random_features(6, [1, 25, 4, 4]);
    let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut g = Graph::new();
        let (av, bv) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let v = correlate_var(&mut g, av, bv, r).unwrap();
        let wv = g.constant(weights.clone());
        let p = g.mul(v, wv);
        let l = g.sum(p);
        (g, l, av, bv)
    };
    let (g, l, av, bv) = loss(&a, &b);
    let grads = g.backward(l);
    let eps = 1e-6;
    for (which, var) in [(0, av), (1, bv)] {
        let analytic = grads.get(var).unwrap();
        for i in 0..a.numel() {
            let (mut ap, mut am, mut bp, mut bm) = (a.clone(), a.clone(), b.clone(), b.clone());
            if which == 0 {
                ap.data_mut()[i] += eps;
                am.data_mut()[i] -= eps;
            } else {
                bp.data_mut()[i] += eps;
                bm.data_mut()[i] -= eps;
            }
            let (gp, lp, ..) = loss(&ap, &bp);
            let (gm, lm, ..) = loss(&am, &bm);
            let num = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
            let an = analytic.data()[i];
            let rel = (an - num).abs() / an.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-3, "input {which} element {i}: analytic {an} numeric {num}");
        }
    }
}

#[test]
fn memory_grows_with_fourth_power_of_scale() {
    let ratio = |w: usize| memory_cells(2 * w, 2 * w, 2 * w) as f64 / memory_cells(w, w, w) as f64;
    assert!(ratio(8) < ratio(64) && ratio(64) < 16.0);
    assert!((ratio(1024) - 16.0).abs() < 0.02);
}

proptest! {
    #[test]
    fn values_bounded_and_symmetric(seed in 0u64..500, r in 1usize..4) {
        let a = random_features(seed, [1, 3, 5, 5]);
        let b = random_features(seed + 1000, [1, 3, 5, 5]);
        let ab = correlate(&a, &b, r).unwrap();
        let ba = correlate(&b, &a, r).unwrap();
        prop_assert!(ab.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let ri = r as i64;
        for y in 0..5i64 {
            for x in 0..5i64 {
                for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        let (yb, xb) = (y + dy, x + dx);
                        if !(0..5).contains(&yb) || !(0..5).contains(&xb) {
                            continue;
                        }
                        let p = at(&ab, slot(r, dy, dx), y as usize, x as usize);
                        let q = at(&ba, slot(r, -dy, -dx), yb as usize, xb as usize);
                        prop_assert!((p - q).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn positive_scaling_leaves_volume_unchanged(seed in 0u64..500, k in 0.01f64..100.0) {
        let a = random_features(seed, [1, 4, 4, 4]);
        let b = random_features(seed + 7, [1, 4, 4, 4]);
        let scaled = b.map(|v| v * k);
        let v1 = correlate(&a, &b, 2).unwrap();
        let v2 = correlate(&a, &scaled, 2).unwrap();
        for (p, q) in v1.data().iter().zip(v2.data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }
}
