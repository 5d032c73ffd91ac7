//! Inverse warping with bilinear sampling and its exact gradients.
//!
//! Output pixel `z` (canvas coordinates) maps to reference coordinates
//! `y = z - origin` and samples the source at `M y`, where `M` is the inverse
//! of the forward homography. Neighbours outside the source read as 0.

use stitchforge_tensor::{exec, Scalar, Tensor};

use super::{CanvasSpec, Homography};
use crate::error::Result;
use crate::image::ImagePlane;

#[inline]
fn source_coords(m: &[f64; 9], y0: f64, y1: f64) -> Option<(f64, f64, f64)> {
    let dz = m[6] * y0 + m[7] * y1 + m[8];
    if dz <= 1e-12 || !dz.is_finite() {
        return None;
    }
    let sx = (m[0] * y0 + m[1] * y1 + m[2]) / dz;
    let sy = (m[3] * y0 + m[4] * y1 + m[5]) / dz;
    if !(sx.is_finite() && sy.is_finite()) || sx < -2.0 || sy < -2.0 || sx > 1e7 || sy > 1e7 {
        return None;
    }
    Some((sx, sy, dz))
}

struct Taps {
    idx: [Option<usize>; 4],
    fx: f64,
    fy: f64,
}

#[inline]
fn taps(sx: f64, sy: f64, w: usize, h: usize) -> Taps {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (fx, fy) = (sx - x0, sy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |x: i64, y: i64| (x >= 0 && y >= 0 && x < w as i64 && y < h as i64).then(|| y as usize * w + x as usize);
    Taps {
        idx: [at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)],
        fx,
        fy,
    }
}

impl Taps {
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }
}

/// Warps an NCHW batch. `inverse_maps[i]` is the row-major backward map of sample `i`.
pub fn warp_forward<T: Scalar>(
    src: &Tensor<T>,
    inverse_maps: &[[f64; 9]],
    out_h: usize,
    out_w: usize,
    origin: (f64, f64),
) -> Tensor<T> {
    let (n, c, h, w) = src.dims4();
    assert_eq!(inverse_maps.len(), n, "one map per batch item");
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let sd = src.data();
    let plane_out = out_h * out_w;
    exec::for_each_chunk_mut(out.data_mut(), c * plane_out, |b, o| {
        let m = &inverse_maps[b];
        let s = &sd[b * c * h * w..(b + 1) * c * h * w];
        for zy in 0..out_h {
            for zx in 0..out_w {
                let Some((sx, sy, _)) = source_coords(m, zx as f64 - origin.0, zy as f64 - origin.1) else {
                    continue;
                };
                let t = taps(sx, sy, w, h);
                let wts = t.weights();
                for ch in 0..c {
                    let plane = &s[ch * h * w..(ch + 1) * h * w];
                    let mut acc = 0.0;
                    for k in 0..4 {
                        if let Some(i) = t.idx[k] {
                            acc += wts[k] * plane[i].as_f64();
                        }
                    }
                    o[ch * plane_out + zy * out_w + zx] = T::lit(acc);
                }
            }
        }
    });
    out
}

/// Gradients of [`warp_forward`] with respect to the source and each inverse map.
pub fn warp_backward<T: Scalar>(
    src: &Tensor<T>,
    inverse_maps: &[[f64; 9]],
    origin: (f64, f64),
    grad_out: &Tensor<T>,
    need_src: bool,
) -> (Option<Tensor<T>>, Vec<[f64; 9]>) {
    let (n, c, h, w) = src.dims4();
    let (_, _, out_h, out_w) = grad_out.dims4();
    let sd = src.data();
    let gd = grad_out.data();
    let plane_out = out_h * out_w;
    let parts = exec::map_range(n, |b| {
        let m = &inverse_maps[b];
        let s = &sd[b * c * h * w..(b + 1) * c * h * w];
        let g = &gd[b * c * plane_out..(b + 1) * c * plane_out];
        let mut dsrc = need_src.then(|| vec![0.0f64; c * h * w]);
        let mut dm = [0.0f64; 9];
        for zy in 0..out_h {
            for zx in 0..out_w {
                let (y0, y1) = (zx as f64 - origin.0, zy as f64 - origin.1);
                let Some((sx, sy, dz)) = source_coords(m, y0, y1) else {
                    continue;
                };
                let t = taps(sx, sy, w, h);
                let wts = t.weights();
                let (fx, fy) = (t.fx, t.fy);
                let mut gsx = 0.0;
                let mut gsy = 0.0;
                for ch in 0..c {
                    let go = g[ch * plane_out + zy * out_w + zx].as_f64();
                    if go == 0.0 {
                        continue;
                    }
                    let plane = &s[ch * h * w..(ch + 1) * h * w];
                    let p = t.idx.map(|i| i.map_or(0.0, |i| plane[i].as_f64()));
                    gsx += go * ((1.0 - fy) * (p[1] - p[0]) + fy * (p[3] - p[2]));
                    gsy += go * ((1.0 - fx) * (p[2] - p[0]) + fx * (p[3] - p[1]));
                    if let Some(d) = dsrc.as_mut() {
                        for k in 0..4 {
                            if let Some(i) = t.idx[k] {
                                d[ch * h * w + i] += wts[k] * go;
                            }
                        }
                    }
                }
                if gsx != 0.0 || gsy != 0.0 {
                    let inv = 1.0 / dz;
                    dm[0] += gsx * y0 * inv;
                    dm[1] += gsx * y1 * inv;
                    dm[2] += gsx * inv;
                    dm[3] += gsy * y0 * inv;
                    dm[4] += gsy * y1 * inv;
                    dm[5] += gsy * inv;
                    let gz = -(gsx * sx + gsy * sy) * inv;
                    dm[6] += gz * y0;
                    dm[7] += gz * y1;
                    dm[8] += gz;
                }
            }
        }
        (dsrc, dm)
    });
    let mut dsrc = need_src.then(|| Tensor::zeros(src.shape()));
    let mut dms = Vec::with_capacity(n);
    for (b, (ds, dm)) in parts.into_iter().enumerate() {
        if let (Some(out), Some(ds)) = (dsrc.as_mut(), ds) {
            for (o, v) in out.data_mut()[b * c * h * w..(b + 1) * c * h * w].iter_mut().zip(ds) {
                *o = T::lit(v);
            }
        }
        dms.push(dm);
    }
    (dsrc, dms)
}

/// Warps `img` by `h` onto `canvas`: output pixel `z` shows `img` at
/// `h^-1 (z - canvas.origin)`.
pub fn warp_image(img: &ImagePlane, h: &Homography, canvas: &CanvasSpec) -> Result<ImagePlane> {
    let minv = h.inverse()?.to_flat();
    let t = img.to_tensor::<f64>();
    let out = warp_forward(&t, &[minv], canvas.height, canvas.width, (canvas.origin.u, canvas.origin.v));
    ImagePlane::from_tensor(&out, 0)
}
