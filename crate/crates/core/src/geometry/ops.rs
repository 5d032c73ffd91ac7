//! Differentiable geometry on the autodiff tape (batched, row-major 3x3 maps).

use stitchforge_tensor::{CustomOp, Graph, Scalar, Tensor, Var};

use super::{patch_corners, solve_dlt, solve_dlt_dst_gradient, warp_backward, warp_forward, CornerOffsets, Homography};
use crate::error::{Error, Result};

fn row9<T: Scalar>(t: &Tensor<T>, b: usize) -> [f64; 9] {
    std::array::from_fn(|i| t.data()[b * 9 + i].as_f64())
}

fn row8<T: Scalar>(t: &Tensor<T>, b: usize) -> [f64; 8] {
    std::array::from_fn(|i| t.data()[b * 8 + i].as_f64())
}

struct DltOp {
    patch_w: f64,
    patch_h: f64,
}

impl<T: Scalar> CustomOp<T> for DltOp {
    fn name(&self) -> &'static str {
        "dlt"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let offsets = inputs[0];
        let n = offsets.shape()[0];
        let src = patch_corners(self.patch_w, self.patch_h);
        let mut out = Tensor::zeros(offsets.shape());
        for b in 0..n {
            let dst = CornerOffsets::from_flat(row8(offsets, b)).displaced(self.patch_w, self.patch_h);
            let h = Homography::from_flat(row9(output, b));
            let g9 = row9(grad, b);
            let g8: [f64; 8] = std::array::from_fn(|i| g9[i]);
            // The forward pass succeeded on these corners, so the factorization does too.
            let d = solve_dlt_dst_gradient(&src, &dst, &h, &g8).unwrap_or([0.0; 8]);
            for (i, v) in d.iter().enumerate() {
                out.data_mut()[b * 8 + i] = T::lit(*v);
            }
        }
        vec![Some(out)]
    }
}

/// Batched offsets `[n, 8]` to homographies `[n, 9]` for a `patch_w x patch_h` patch.
pub fn dlt<T: Scalar>(g: &mut Graph<T>, offsets: Var, patch_w: f64, patch_h: f64) -> Result<Var> {
    let t = g.value(offsets);
    if t.shape().len() != 2 || t.shape()[1] != 8 {
        return Err(Error::ShapeMismatch(format!("dlt expects [n, 8] offsets, got {:?}", t.shape())));
    }
    let n = t.shape()[0];
    let src = patch_corners(patch_w, patch_h);
    let mut out = Vec::with_capacity(n * 9);
    for b in 0..n {
        let dst = CornerOffsets::from_flat(row8(t, b)).displaced(patch_w, patch_h);
        let h = solve_dlt(&src, &dst)?;
        out.extend(h.to_flat().map(T::lit));
    }
    Ok(g.custom(&[offsets], Tensor::from_vec(&[n, 9], out), Box::new(DltOp { patch_w, patch_h })))
}

struct Inverse3Op;

impl<T: Scalar> CustomOp<T> for Inverse3Op {
    fn name(&self) -> &'static str {
        "inverse3"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let n = inputs[0].shape()[0];
        let mut out = Tensor::zeros(inputs[0].shape());
        for b in 0..n {
            let m = row9(output, b);
            let gm = row9(grad, b);
            // dL/dH = -M^T G M^T
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        for l in 0..3 {
                            acc += m[k * 3 + i] * gm[k * 3 + l] * m[j * 3 + l];
                        }
                    }
                    out.data_mut()[b * 9 + i * 3 + j] = T::lit(-acc);
                }
            }
        }
        vec![Some(out)]
    }
}

/// Batched 3x3 inverse `[n, 9] -> [n, 9]`.
pub fn inverse3<T: Scalar>(g: &mut Graph<T>, h: Var) -> Result<Var> {
    let t = g.value(h);
    let n = t.shape()[0];
    let mut out = Vec::with_capacity(n * 9);
    for b in 0..n {
        let inv = Homography::from_flat(row9(t, b)).inverse()?;
        out.extend(inv.to_flat().map(T::lit));
    }
    Ok(g.custom(&[h], Tensor::from_vec(&[n, 9], out), Box::new(Inverse3Op)))
}

struct WarpOp {
    origin: (f64, f64),
}

impl<T: Scalar> CustomOp<T> for WarpOp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (img, maps) = (inputs[0], inputs[1]);
        let n = maps.shape()[0];
        let m: Vec<[f64; 9]> = (0..n).map(|b| row9(maps, b)).collect();
        let (dimg, dm) = warp_backward(img, &m, self.origin, grad, needs[0]);
        let dmaps = needs[1].then(|| Tensor::from_vec(&[n, 9], dm.iter().flatten().map(|&v| T::lit(v)).collect()));
        vec![dimg, dmaps]
    }
}

/// Warps `img` (`[n, c, h, w]`) with per-sample inverse maps `[n, 9]`.
pub fn warp<T: Scalar>(g: &mut Graph<T>, img: Var, inverse_maps: Var, out_h: usize, out_w: usize, origin: (f64, f64)) -> Var {
    let maps = g.value(inverse_maps);
    let n = maps.shape()[0];
    let m: Vec<[f64; 9]> = (0..n).map(|b| row9(maps, b)).collect();
    let out = warp_forward(g.value(img), &m, out_h, out_w, origin);
    g.custom(&[img, inverse_maps], out, Box::new(WarpOp { origin }))
}
