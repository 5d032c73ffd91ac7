//! Normalized feature correlation over a square displacement window.
//!
//! For features `a`, `b` of shape `[n, c, h, w]` and radius `r`, the volume
//! has shape `[n, (2r+1)^2, h, w]`. Slot `(dy + r) * (2r + 1) + (dx + r)` at
//! position `(y, x)` holds the cosine between `a(y, x)` and `b(y + dy, x + dx)`,
//! or 0 when the displaced position falls outside the map.

use stitchforge_tensor::{exec, CustomOp, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Norm floor for zero feature vectors.
pub const NORM_EPS: f64 = 1e-8;

/// Number of cells in a `w x h` volume with the given radius.
pub fn memory_cells(w: usize, h: usize, radius: usize) -> u64 {
    let side = 2 * radius as u64 + 1;
    w as u64 * h as u64 * side * side
}

/// Radius that covers every displacement of a `w x h` map.
pub fn global_radius(w: usize, h: usize) -> usize {
    w.max(h)
}

/// Channel index of displacement `(dy, dx)`.
pub fn slot(radius: usize, dy: i64, dx: i64) -> usize {
    let r = radius as i64;
    assert!(dy.abs() <= r && dx.abs() <= r, "displacement outside radius");
    ((dy + r) * (2 * r + 1) + (dx + r)) as usize
}

/// Unit-normalized features in `[n, h, w, c]` layout plus the per-position norms.
struct Normalized<T> {
    unit: Vec<T>,
    norms: Vec<T>,
}

fn normalize<T: Scalar>(f: &Tensor<T>) -> Normalized<T> {
    let (n, c, h, w) = f.dims4();
    let hw = h * w;
    let eps = T::lit(NORM_EPS);
    let mut unit = vec![T::zero(); n * hw * c];
    let mut norms = vec![T::zero(); n * hw];
    for b in 0..n {
        let src = &f.data()[b * c * hw..(b + 1) * c * hw];
        for p in 0..hw {
            let mut ss = T::zero();
            for ch in 0..c {
                let v = src[ch * hw + p];
                ss += v * v;
            }
            let norm = ss.sqrt();
            norms[b * hw + p] = norm;
            let denom = if norm > eps { norm } else { eps };
            for ch in 0..c {
                unit[(b * hw + p) * c + ch] = src[ch * hw + p] / denom;
            }
        }
    }
    Normalized { unit, norms }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

fn check_shapes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, radius: usize) -> Result<()> {
    if a.shape().len() != 4 || a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("correlation inputs {:?} and {:?}", a.shape(), b.shape())));
    }
    let (_, _, h, w) = a.dims4();
    if radius == 0 || radius > w.max(h) {
        return Err(Error::ShapeMismatch(format!("radius {radius} outside 1..={} for a {w}x{h} map", w.max(h))));
    }
    Ok(())
}

fn forward<T: Scalar>(na: &Normalized<T>, nb: &Normalized<T>, shape: (usize, usize, usize, usize), radius: usize) -> Tensor<T> {
    let (n, c, h, w) = shape;
    let side = 2 * radius + 1;
    let k = side * side;
    let r = radius as i64;
    let (one, neg) = (T::one(), -T::one());
    // One chunk per (sample, slot row dy): rows are independent.
    let mut out = Tensor::zeros(&[n, k, h, w]);
    exec::for_each_chunk_mut(out.data_mut(), side * h * w, |chunk, dst| {
        let (b, iy) = (chunk / side, chunk % side);
        let dy = iy as i64 - r;
        for ix in 0..side {
            let dx = ix as i64 - r;
            let plane = &mut dst[ix * h * w..(ix + 1) * h * w];
            for y in 0..h {
                let yb = y as i64 + dy;
                if yb < 0 || yb >= h as i64 {
                    continue;
                }
                for x in 0..w {
                    let xb = x as i64 + dx;
                    if xb < 0 || xb >= w as i64 {
                        continue;
                    }
                    let pa = (b * h + y) * w + x;
                    let pb = (b * h + yb as usize) * w + xb as usize;
                    let v = dot(&na.unit[pa * c..(pa + 1) * c], &nb.unit[pb * c..(pb + 1) * c]);
                    plane[y * w + x] = if v > one { one } else if v < neg { neg } else { v };
                }
            }
        }
    });
    out
}

/// Correlation volume of `a` against `b` (both `[n, c, h, w]`).
pub fn correlate<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    check_shapes(a, b, radius)?;
    Ok(forward(&normalize(a), &normalize(b), a.dims4(), radius))
}

/// Chain rule through `x / max(|x|, eps)` for one map: `du` is `[n, h, w, c]`.
fn unnormalize_grad<T: Scalar>(x: &Normalized<T>, du: &[T], shape: (usize, usize, usize, usize)) -> Tensor<T> {
    let (n, c, h, w) = shape;
    let hw = h * w;
    let eps = T::lit(NORM_EPS);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let o = out.data_mut();
    for b in 0..n {
        for p in 0..hw {
            let q = b * hw + p;
            let u = &x.unit[q * c..(q + 1) * c];
            let g = &du[q * c..(q + 1) * c];
            let norm = x.norms[q];
            if norm > eps {
                let proj = dot(u, g);
                for ch in 0..c {
                    o[(b * c + ch) * hw + p] = (g[ch] - u[ch] * proj) / norm;
                }
            } else {
                for ch in 0..c {
                    o[(b * c + ch) * hw + p] = g[ch] / eps;
                }
            }
        }
    }
    out
}

struct CorrelationOp<T> {
    radius: usize,
    na: Normalized<T>,
    nb: Normalized<T>,
}

impl<T: Scalar> CustomOp<T> for CorrelationOp<T> {
    fn name(&self) -> &'static str {
        "correlation"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let shape = inputs[0].dims4();
        let (_, c, h, w) = shape;
        let side = 2 * self.radius + 1;
        let k = side * side;
        let r = self.radius as i64;
        let g = grad.data();
        // Gather form: each output row of a gradient map only reads, so rows run in parallel.
        let gather = |from: &Normalized<T>, sign: i64| {
            let mut du = vec![T::zero(); inputs[0].numel()];
            exec::for_each_chunk_mut(&mut du, w * c, |row, dst| {
                let (b, y) = (row / h, row % h);
                for x in 0..w {
                    let acc = &mut dst[x * c..(x + 1) * c];
                    for dy in -r..=r {
                        // For the `a` side the partner is at p + d and the volume is read at p;
                        // for the `b` side the partner is at p - d and the volume is read there.
                        let py = y as i64 + sign * dy;
                        if py < 0 || py >= h as i64 {
                            continue;
                        }
                        for dx in -r..=r {
                            let px = x as i64 + sign * dx;
                            if px < 0 || px >= w as i64 {
                                continue;
                            }
                            let kk = ((dy + r) * side as i64 + (dx + r)) as usize;
                            let (vy, vx) = if sign > 0 { (y, x) } else { (py as usize, px as usize) };
                            let gv = g[((b * k + kk) * h + vy) * w + vx];
                            if gv == T::zero() {
                                continue;
                            }
                            let q = (b * h + py as usize) * w + px as usize;
                            for (a, v) in acc.iter_mut().zip(&from.unit[q * c..(q + 1) * c]) {
                                *a += gv * *v;
                            }
                        }
                    }
                }
            });
            du
        };
        let da = needs[0].then(|| unnormalize_grad(&self.na, &gather(&self.nb, 1), shape));
        let db = needs[1].then(|| unnormalize_grad(&self.nb, &gather(&self.na, -1), shape));
        vec![da, db]
    }
}

/// Records the correlation volume of `a` against `b` on the tape.
pub fn correlate_var<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, radius: usize) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    check_shapes(ta, tb, radius)?;
    let (na, nb) = (normalize(ta), normalize(tb));
    let out = forward(&na, &nb, ta.dims4(), radius);
    Ok(g.custom(&[a, b], out, Box::new(CorrelationOp { radius, na, nb })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_cell_counts() {
        assert_eq!(memory_cells(16, 16, 16), 278_784);
        assert_eq!(memory_cells(1, 1, 1), 9);
    }

    #[test]
    fn orthogonal_vectors_correlate_to_zero() {
        let a = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0f64, 0.0]);
        let b = Tensor::from_vec(&[1, 2, 1, 1], vec![0.0f64, 1.0]);
        let v = correlate(&a, &b, 1).unwrap();
        assert_eq!(v.data()[slot(1, 0, 0)], 0.0);
        let zero = Tensor::zeros(&[1, 2, 1, 1]);
        assert_eq!(correlate(&a, &zero, 1).unwrap().data()[slot(1, 0, 0)], 0.0);
    }

    #[test]
    fn rejects_bad_radius_and_shapes() {
        let a = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        assert!(correlate(&a, &a, 5).is_err());
        assert!(correlate(&a, &Tensor::zeros(&[1, 2, 4, 3]), 1).is_err());
    }
}
