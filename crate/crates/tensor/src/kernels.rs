//! Forward and backward kernels for the dense layers.
//!
//! Convolutions are lowered to im2col + gemm per batch item; batch items run
//! through [`exec`](crate::exec) so the parallel and sequential builds agree
//! bit for bit. Weight gradients are reduced over the batch in index order.

use crate::exec;
use crate::{Scalar, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const SAME3: ConvSpec = ConvSpec { stride: 1, pad: 1 };
    pub const DOWN3: ConvSpec = ConvSpec { stride: 2, pad: 1 };
    pub const POINT: ConvSpec = ConvSpec { stride: 1, pad: 0 };

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        assert!(input + 2 * self.pad >= kernel, "kernel larger than padded input");
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }
    fn l(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec == ConvSpec::POINT
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let l = g.l();
    let (s, p) = (g.spec.stride as isize, g.spec.pad as isize);
    for ci in 0..g.ci {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.l();
    let (s, p) = (g.spec.stride as isize, g.spec.pad as isize);
    for ci in 0..g.ci {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> ConvGeom {
    let (_, ci, h, wd) = x.dims4();
    let (_, wci, kh, kw) = w.dims4();
    assert_eq!(ci, wci, "conv2d: input has {ci} channels, weight expects {wci}");
    ConvGeom {
        ci,
        h,
        w: wd,
        kh,
        kw,
        ho: spec.out_size(h, kh),
        wo: spec.out_size(wd, kw),
        spec,
    }
}

/// `x`: `[n, ci, h, w]`, `w`: `[co, ci, kh, kw]`, `b`: `[co]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Tensor<T> {
    let (n, _, _, _) = x.dims4();
    let co = w.shape()[0];
    let g = conv_geom(x, w, spec);
    let (k, l) = (g.k(), g.l());
    let in_per = g.ci * g.h * g.w;
    let mut out = Tensor::zeros(&[n, co, g.ho, g.wo]);
    let xd = x.data();
    let wd = w.data();
    exec::for_each_chunk_mut(out.data_mut(), co * l, |i, o| {
        let xi = &xd[i * in_per..(i + 1) * in_per];
        if let Some(b) = b {
            for (c, &bv) in b.data().iter().enumerate() {
                o[c * l..(c + 1) * l].fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            T::gemm(co, k, l, T::one(), wd, k as isize, 1, xi, l as isize, 1, beta, o, l as isize, 1);
        } else {
            let mut col = vec![T::zero(); k * l];
            im2col(xi, &g, &mut col);
            T::gemm(co, k, l, T::one(), wd, k as isize, 1, &col, l as isize, 1, beta, o, l as isize, 1);
        }
    });
    out
}

/// Gradients of a convolution: `(dx, dw, db)`. `dx` is skipped when not needed.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
    gout: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, _, _, _) = x.dims4();
    let co = w.shape()[0];
    let g = conv_geom(x, w, spec);
    let (k, l) = (g.k(), g.l());
    let in_per = g.ci * g.h * g.w;
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();

    let parts = exec::map_range(n, |i| {
        let xi = &xd[i * in_per..(i + 1) * in_per];
        let gi = &gd[i * co * l..(i + 1) * co * l];
        let col_owned;
        let col: &[T] = if g.is_pointwise() {
            xi
        } else {
            let mut c = vec![T::zero(); k * l];
            im2col(xi, &g, &mut c);
            col_owned = c;
            &col_owned
        };
        // dw_i = gout_i [co, l] . col^T [l, k]
        let mut dw = vec![T::zero(); co * k];
        T::gemm(co, l, k, T::one(), gi, l as isize, 1, col, 1, l as isize, T::zero(), &mut dw, k as isize, 1);
        let db: Vec<T> = (0..co).map(|c| gi[c * l..(c + 1) * l].iter().copied().sum()).collect();
        let dx = need_dx.then(|| {
            // dcol = w^T [k, co] . gout_i [co, l]
            let mut dcol = vec![T::zero(); k * l];
            T::gemm(k, co, l, T::one(), wd, 1, k as isize, gi, l as isize, 1, T::zero(), &mut dcol, l as isize, 1);
            if g.is_pointwise() {
                dcol
            } else {
                let mut dxi = vec![T::zero(); in_per];
                col2im(&dcol, &g, &mut dxi);
                dxi
            }
        });
        (dw, db, dx)
    });

    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for (i, (pw, pb, px)) in parts.into_iter().enumerate() {
        for (a, b) in dw.data_mut().iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.data_mut().iter_mut().zip(pb) {
            *a += b;
        }
        if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
            dx.data_mut()[i * in_per..(i + 1) * in_per].copy_from_slice(&px);
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).
///
/// `x`: `[n, ci, h, w]`, `w`: `[ci, co, 2, 2]`, `b`: `[co]` -> `[n, co, 2h, 2w]`.
pub fn deconv2x2_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4();
    assert_eq!(w.shape()[0], ci, "deconv: channel mismatch");
    let co = w.shape()[1];
    let l = h * wd;
    let r = co * 4;
    let mut out = Tensor::zeros(&[n, co, 2 * h, 2 * wd]);
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    exec::for_each_chunk_mut(out.data_mut(), co * 4 * l, |i, o| {
        let xi = &xd[i * ci * l..(i + 1) * ci * l];
        let mut tmp = vec![T::zero(); r * l];
        // tmp[r, l] = wmat^T [r, ci] . x [ci, l]
        T::gemm(r, ci, l, T::one(), wdat, 1, r as isize, xi, l as isize, 1, T::zero(), &mut tmp, l as isize, 1);
        let (ow, oh) = (2 * wd, 2 * h);
        for c in 0..co {
            for ky in 0..2 {
                for kx in 0..2 {
                    let trow = &tmp[((c * 2 + ky) * 2 + kx) * l..][..l];
                    for y in 0..h {
                        let orow = &mut o[c * oh * ow + (2 * y + ky) * ow..][..ow];
                        for x in 0..wd {
                            orow[2 * x + kx] = trow[y * wd + x] + bd[c];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradients of [`deconv2x2_forward`]: `(dx, dw, db)`.
pub fn deconv2x2_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, wd) = x.dims4();
    let co = w.shape()[1];
    let l = h * wd;
    let r = co * 4;
    let (oh, ow) = (2 * h, 2 * wd);
    let xd = x.data();
    let wdat = w.data();
    let gd = gout.data();
    let parts = exec::map_range(n, |i| {
        let xi = &xd[i * ci * l..(i + 1) * ci * l];
        let gi = &gd[i * co * oh * ow..(i + 1) * co * oh * ow];
        let mut dtmp = vec![T::zero(); r * l];
        let mut db = vec![T::zero(); co];
        for c in 0..co {
            for ky in 0..2 {
                for kx in 0..2 {
                    let trow = &mut dtmp[((c * 2 + ky) * 2 + kx) * l..][..l];
                    for y in 0..h {
                        let grow = &gi[c * oh * ow + (2 * y + ky) * ow..][..ow];
                        for x in 0..wd {
                            trow[y * wd + x] = grow[2 * x + kx];
                            db[c] += grow[2 * x + kx];
                        }
                    }
                }
            }
        }
        // dw[ci, r] = x [ci, l] . dtmp^T [l, r]
        let mut dw = vec![T::zero(); ci * r];
        T::gemm(ci, l, r, T::one(), xi, l as isize, 1, &dtmp, 1, l as isize, T::zero(), &mut dw, r as isize, 1);
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); ci * l];
            T::gemm(ci, r, l, T::one(), wdat, r as isize, 1, &dtmp, l as isize, 1, T::zero(), &mut dx, l as isize, 1);
            dx
        });
        (dw, db, dx)
    });
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for (i, (pw, pb, px)) in parts.into_iter().enumerate() {
        for (a, b) in dw.data_mut().iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.data_mut().iter_mut().zip(pb) {
            *a += b;
        }
        if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
            dx.data_mut()[i * ci * l..(i + 1) * ci * l].copy_from_slice(&px);
        }
    }
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2. Returns the output and, per output element,
/// the flat index of the winning input element.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    assert!(ho > 0 && wo > 0, "maxpool2 on {h}x{w} input");
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let xd = x.data();
    let plane_out = ho * wo;
    // Each (sample, channel) plane is independent.
    let mut pairs: Vec<(&mut [T], &mut [u32])> = out
        .data_mut()
        .chunks_mut(plane_out)
        .zip(arg.chunks_mut(plane_out))
        .collect();
    let run = |p: usize, o: &mut [T], a: &mut [u32]| {
        let base = p * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                o[y * wo + xx] = xd[best];
                a[y * wo + xx] = best as u32;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if exec::parallel_enabled() {
        use rayon::prelude::*;
        pairs
            .par_iter_mut()
            .enumerate()
            .for_each(|(p, (o, a))| run(p, o, a));
        return (out, arg);
    }
    for (p, (o, a)) in pairs.iter_mut().enumerate() {
        run(p, o, a);
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(input_shape: &[usize], arg: &[u32], gout: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&a, &g) in arg.iter().zip(gout.data()) {
        d[a as usize] += g;
    }
    dx
}

/// `x`: `[n, in]`, `w`: `[out, in]`, `b`: `[out]` -> `[n, out]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, din) = x.dims2();
    let (dout, win) = w.dims2();
    assert_eq!(din, win, "linear: input width {din}, weight expects {win}");
    let mut y = Tensor::zeros(&[n, dout]);
    for row in y.data_mut().chunks_mut(dout) {
        row.copy_from_slice(b.data());
    }
    T::gemm(n, din, dout, T::one(), x.data(), din as isize, 1, w.data(), 1, din as isize, T::one(), y.data_mut(), dout as isize, 1);
    y
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, din) = x.dims2();
    let (dout, _) = w.dims2();
    let mut dx = Tensor::zeros(&[n, din]);
    T::gemm(n, dout, din, T::one(), gout.data(), dout as isize, 1, w.data(), din as isize, 1, T::zero(), dx.data_mut(), din as isize, 1);
    let mut dw = Tensor::zeros(&[dout, din]);
    T::gemm(dout, n, din, T::one(), gout.data(), 1, dout as isize, x.data(), din as isize, 1, T::zero(), dw.data_mut(), din as isize, 1);
    let mut db = Tensor::zeros(&[dout]);
    for row in gout.data().chunks(dout) {
        for (a, &g) in db.data_mut().iter_mut().zip(row) {
            *a += g;
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let (ho, wo) = (spec.out_size(h, kh), spec.out_size(wd, kw));
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for s in 0..n {
            for c in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[c];
                        for i in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((s * ci + i) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((c * ci + i) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * co + c) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (spec, k) in [(ConvSpec::SAME3, 3), (ConvSpec::DOWN3, 3), (ConvSpec::POINT, 1)] {
            let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
            let w = rand_tensor(&[4, 3, k, k], &mut rng);
            let b = rand_tensor(&[4], &mut rng);
            let got = conv2d_forward(&x, &w, Some(&b), spec);
            let want = naive_conv(&x, &w, &b, spec);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> is bilinear, so dx and dw must satisfy the adjoint identities.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spec in [ConvSpec::SAME3, ConvSpec::DOWN3] {
            let x = rand_tensor(&[2, 2, 6, 5], &mut rng);
            let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let zero_b = Tensor::zeros(&[3]);
            let y = conv2d_forward(&x, &w, Some(&zero_b), spec);
            let g = rand_tensor(y.shape(), &mut rng);
            let (dx, dw, db) = conv2d_backward(&x, &w, spec, &g, true);
            let dx = dx.unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
            assert!((db.sum() - g.sum()).abs() < 1e-10);
        }
    }

    #[test]
    fn deconv_backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 2, 2], &mut rng);
        let b = Tensor::zeros(&[2]);
        let y = deconv2x2_forward(&x, &w, &b);
        assert_eq!(y.shape(), &[2, 2, 8, 10]);
        let g = rand_tensor(y.shape(), &mut rng);
        let (dx, dw, _) = deconv2x2_backward(&x, &w, &g, true);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data().iter().zip(dx.unwrap().data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]);
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data(), &[5.0, 7.0]);
        let dx = maxpool2_backward(x.shape(), &arg, &Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]));
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn linear_shapes_and_values() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.5]);
        let b = Tensor::from_vec(&[2], vec![0.0, 1.0]);
        let y = linear_forward(&x, &w, &b);
        assert_eq!(y.data(), &[1.0, 4.0, -1.0, 1.0]);
        let (dx, dw, db) = linear_backward(&x, &w, &Tensor::full(&[2, 2], 1.0));
        assert_eq!(dx.data(), &[1.5, 0.5, 0.5, 1.5, 0.5, 0.5]);
        assert_eq!(dw.data(), &[0.0, 2.0, 4.0, 0.0, 2.0, 4.0]);
        assert_eq!(db.data(), &[2.0, 2.0]);
    }
}
