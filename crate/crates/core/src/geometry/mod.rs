//! Projective geometry: the 4-point parameterization, DLT, offset rescaling,
//! canvas layout and bilinear warping.
//!
//! Corners are always ordered top-left, top-right, bottom-left, bottom-right.
//! A `w x h` patch has its corners at `(0, 0)`, `(w, 0)`, `(0, h)` and `(w, h)`,
//! so resizing an image by `sigma` scales corner offsets by exactly `sigma`.

mod linalg;
pub mod ops;
mod warp;

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use warp::{warp_backward, warp_forward, warp_image};

/// Vertex order used by every offset vector in the crate.
pub const VERTEX_ORDER: [&str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];

/// Condition number of the (equilibrated) DLT system above which the
/// corners are considered degenerate.
pub const MAX_DLT_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub u: f64,
    pub v: f64,
}

impl Point2 {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Corner displacements `(du, dv)` for the four patch vertices.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CornerOffsets(pub [[f64; 2]; 4]);

impl CornerOffsets {
    pub const fn zeros() -> Self {
        Self([[0.0; 2]; 4])
    }

    /// Same displacement on every vertex.
    pub const fn uniform(du: f64, dv: f64) -> Self {
        Self([[du, dv]; 4])
    }

    /// `[du0, dv0, du1, dv1, du2, dv2, du3, dv3]`.
    pub fn from_flat(v: [f64; 8]) -> Self {
        Self([[v[0], v[1]], [v[2], v[3]], [v[4], v[5]], [v[6], v[7]]])
    }

    pub fn to_flat(&self) -> [f64; 8] {
        let d = &self.0;
        [d[0][0], d[0][1], d[1][0], d[1][1], d[2][0], d[2][1], d[3][0], d[3][1]]
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Largest `|du|` and `|dv|` over the vertices.
    pub fn max_abs(&self) -> (f64, f64) {
        self.0
            .iter()
            .fold((0.0f64, 0.0f64), |(a, b), d| (a.max(d[0].abs()), b.max(d[1].abs())))
    }

    /// Patch corners displaced by these offsets.
    pub fn displaced(&self, patch_w: f64, patch_h: f64) -> [Point2; 4] {
        let c = patch_corners(patch_w, patch_h);
        std::array::from_fn(|i| Point2::new(c[i].u + self.0[i][0], c[i].v + self.0[i][1]))
    }
}

impl Add for CornerOffsets {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let (a, b) = (self.to_flat(), rhs.to_flat());
        Self::from_flat(std::array::from_fn(|i| a[i] + b[i]))
    }
}

impl Sub for CornerOffsets {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let (a, b) = (self.to_flat(), rhs.to_flat());
        Self::from_flat(std::array::from_fn(|i| a[i] - b[i]))
    }
}

/// Corners of a `w x h` patch in vertex order.
pub fn patch_corners(w: f64, h: f64) -> [Point2; 4] {
    [Point2::new(0.0, 0.0), Point2::new(w, 0.0), Point2::new(0.0, h), Point2::new(w, h)]
}

/// 3x3 projective transform acting on column vectors `(u, v, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub const fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub const fn translation(du: f64, dv: f64) -> Self {
        Self {
            m: [[1.0, 0.0, du], [0.0, 1.0, dv], [0.0, 0.0, 1.0]],
        }
    }

    pub const fn scaling(su: f64, sv: f64) -> Self {
        Self {
            m: [[su, 0.0, 0.0], [0.0, sv, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Row-major entries.
    pub fn from_flat(v: [f64; 9]) -> Self {
        Self {
            m: [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]],
        }
    }

    pub fn to_flat(&self) -> [f64; 9] {
        let m = &self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    pub fn project(&self, p: Point2) -> Point2 {
        let m = &self.m;
        let w = m[2][0] * p.u + m[2][1] * p.v + m[2][2];
        Point2::new(
            (m[0][0] * p.u + m[0][1] * p.v + m[0][2]) / w,
            (m[1][0] * p.u + m[1][1] * p.v + m[1][2]) / w,
        )
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Scales so that `m[2][2] == 1`.
    pub fn normalized(&self) -> Result<Self> {
        let s = self.m[2][2];
        if s.abs() < 1e-12 || !s.is_finite() {
            return Err(Error::DegenerateCorners { condition: f64::INFINITY });
        }
        Ok(Self::from_flat(self.to_flat().map(|v| v / s)))
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if d.abs() < 1e-8 || !d.is_finite() {
            return Err(Error::DegenerateCorners { condition: f64::INFINITY });
        }
        Ok(Self::from_flat(linalg::adjugate3(&self.to_flat()).map(|v| v / d)))
    }
}

impl Mul for Homography {
    type Output = Homography;
    fn mul(self, rhs: Homography) -> Homography {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        Homography { m: out }
    }
}

/// The 8x8 inhomogeneous DLT system `A h = b` with `h = (m00..m21)`, `m22 = 1`.
pub(crate) fn dlt_system(src: &[Point2; 4], dst: &[Point2; 4]) -> ([[f64; 8]; 8], [f64; 8]) {
    let mut a = [[0.0; 8]; 8];
    let mut b = [0.0; 8];
    for i in 0..4 {
        let (x, y) = (src[i].u, src[i].v);
        let (u, v) = (dst[i].u, dst[i].v);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
        b[2 * i] = u;
        b[2 * i + 1] = v;
    }
    (a, b)
}

/// Homography mapping each `src[i]` onto `dst[i]`.
pub fn solve_dlt(src: &[Point2; 4], dst: &[Point2; 4]) -> Result<Homography> {
    let (a, b) = dlt_system(src, dst);
    let sys = linalg::EquilibratedLu::factor(&a)?;
    let h = sys.solve(&b);
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateCorners { condition: f64::INFINITY });
    }
    Ok(Homography::from_flat([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0]))
}

/// Gradient of a scalar loss with respect to the destination corners
/// (`[u0, v0, u1, v1, ...]`), given its gradient with respect to the
/// first eight homography entries.
pub fn solve_dlt_dst_gradient(src: &[Point2; 4], dst: &[Point2; 4], h: &Homography, grad_h: &[f64; 8]) -> Result<[f64; 8]> {
    let (a, _) = dlt_system(src, dst);
    let sys = linalg::EquilibratedLu::factor(&a)?;
    let lambda = sys.solve_transpose(grad_h);
    let (h6, h7) = (h.m[2][0], h.m[2][1]);
    let mut out = [0.0; 8];
    for i in 0..4 {
        let k = 1.0 + src[i].u * h6 + src[i].v * h7;
        out[2 * i] = lambda[2 * i] * k;
        out[2 * i + 1] = lambda[2 * i + 1] * k;
    }
    Ok(out)
}

/// DLT from the patch corners to the corners displaced by `offsets`.
pub fn offsets_to_homography(offsets: &CornerOffsets, patch_w: usize, patch_h: usize) -> Result<Homography> {
    let (w, h) = (patch_w as f64, patch_h as f64);
    solve_dlt(&patch_corners(w, h), &offsets.displaced(w, h))
}

/// Per-axis multiplicative rescaling of offsets for a resized image.
pub fn rescale_offsets(offsets: &CornerOffsets, sigma_w: f64, sigma_h: f64) -> Result<CornerOffsets> {
    if !(sigma_w > 0.0 && sigma_h > 0.0) {
        return Err(Error::NonPositiveScale(sigma_w, sigma_h));
    }
    Ok(CornerOffsets(offsets.0.map(|[du, dv]| [du * sigma_w, dv * sigma_h])))
}

/// Stitching domain hosting the reference patch and the warped target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub width: usize,
    pub height: usize,
    /// Position of the reference patch's top-left corner inside the canvas.
    pub origin: Point2,
}

impl CanvasSpec {
    /// Canvas equal to a `w x h` image.
    pub fn identity(w: usize, h: usize) -> Self {
        Self {
            width: w,
            height: h,
            origin: Point2::new(0.0, 0.0),
        }
    }

    /// Smallest multiple-of-8 canvas holding the `w x h` reference frame and
    /// the quadrilateral `quad` (in reference coordinates).
    pub fn enclosing(w: usize, h: usize, quad: &[Point2; 4]) -> Self {
        let (mut lo_u, mut lo_v, mut hi_u, mut hi_v) = (0.0f64, 0.0f64, w as f64, h as f64);
        for p in quad {
            lo_u = lo_u.min(p.u);
            lo_v = lo_v.min(p.v);
            hi_u = hi_u.max(p.u);
            hi_v = hi_v.max(p.v);
        }
        let (lo_u, lo_v) = (lo_u.floor(), lo_v.floor());
        let width = round_up8((hi_u.ceil() - lo_u) as usize);
        let height = round_up8((hi_v.ceil() - lo_v) as usize);
        Self {
            width,
            height,
            origin: Point2::new(-lo_u, -lo_v),
        }
    }
}

fn round_up8(v: usize) -> usize {
    v.div_ceil(8).max(1) * 8
}

/// Canvas sized for a patch plus the largest translation and perturbation on
/// each side, rounded up to a multiple of 8, with the patch centered.
pub fn compute_canvas(patch_w: usize, patch_h: usize, tau: (f64, f64), rho: (f64, f64)) -> CanvasSpec {
    assert!(tau.0 >= 0.0 && tau.1 >= 0.0 && rho.0 >= 0.0 && rho.1 >= 0.0, "tau and rho must be non-negative");
    let width = round_up8((patch_w as f64 + 2.0 * (tau.0 + rho.0)).ceil() as usize);
    let height = round_up8((patch_h as f64 + 2.0 * (tau.1 + rho.1)).ceil() as usize);
    CanvasSpec {
        width,
        height,
        origin: Point2::new(((width - patch_w) / 2) as f64, ((height - patch_h) / 2) as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_h(h: &Homography, want: [f64; 9]) {
        for (a, b) in h.to_flat().iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{h:?} vs {want:?}");
        }
    }

    #[test]
    fn vertex_order_is_tl_tr_bl_br() {
        assert_eq!(VERTEX_ORDER, ["top-left", "top-right", "bottom-left", "bottom-right"]);
        let c = patch_corners(4.0, 3.0);
        assert_eq!(c[1], Point2::new(4.0, 0.0));
        assert_eq!(c[2], Point2::new(0.0, 3.0));
    }

    #[test]
    fn unit_square_identity_and_translation() {
        let sq = patch_corners(1.0, 1.0);
        assert_h(&solve_dlt(&sq, &sq).unwrap(), Homography::identity().to_flat());
        let shifted = sq.map(|p| Point2::new(p.u + 5.0, p.v));
        let h = solve_dlt(&sq, &shifted).unwrap();
        assert_h(&h, [1.0, 0.0, 5.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn offsets_zero_and_uniform() {
        let h = offsets_to_homography(&CornerOffsets::zeros(), 128, 128).unwrap();
        assert_h(&h, Homography::identity().to_flat());
        let h = offsets_to_homography(&CornerOffsets::uniform(10.0, 0.0), 128, 128).unwrap();
        assert_h(&h, Homography::translation(10.0, 0.0).to_flat());
    }

    #[test]
    fn collinear_corners_are_degenerate() {
        let src = patch_corners(10.0, 10.0);
        let dst = [Point2::new(0.0, 0.0), Point2::new(1.0, 1.0), Point2::new(2.0, 2.0), Point2::new(3.0, 3.0)];
        assert!(matches!(solve_dlt(&src, &dst), Err(Error::DegenerateCorners { .. })));
    }

    #[test]
    fn rescale_examples() {
        let o = CornerOffsets::uniform(4.0, 6.0);
        assert_eq!(rescale_offsets(&o, 1.0, 1.0).unwrap(), o);
        assert_eq!(rescale_offsets(&o, 2.0, 0.5).unwrap(), CornerOffsets::uniform(8.0, 3.0));
        assert!(matches!(rescale_offsets(&o, 0.0, 1.0), Err(Error::NonPositiveScale(..))));
        assert!(rescale_offsets(&o, 1.0, -2.0).is_err());
    }

    #[test]
    fn canvas_examples() {
        let c = compute_canvas(128, 128, (64.0, 64.0), (26.0, 26.0));
        assert_eq!((c.width, c.height, c.origin), (312, 312, Point2::new(92.0, 92.0)));
        let c = compute_canvas(128, 128, (0.0, 0.0), (0.0, 0.0));
        assert_eq!((c.width, c.height, c.origin), (128, 128, Point2::new(0.0, 0.0)));
        let c = compute_canvas(100, 100, (50.0, 50.0), (20.0, 20.0));
        assert_eq!((c.width, c.height, c.origin), (240, 240, Point2::new(70.0, 70.0)));
    }

    #[test]
    fn enclosing_canvas_covers_quad() {
        let quad = CornerOffsets::uniform(-10.5, 20.0).displaced(64.0, 64.0);
        let c = CanvasSpec::enclosing(64, 64, &quad);
        assert_eq!(c.width % 8, 0);
        assert_eq!(c.origin, Point2::new(11.0, 0.0));
        assert!(c.width as f64 >= 64.0 + 11.0 && c.height as f64 >= 84.0);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let h = offsets_to_homography(&CornerOffsets::from_flat([3.0, -2.0, 5.0, 1.0, -4.0, 2.5, 1.0, -3.0]), 32, 32).unwrap();
        let id = (h * h.inverse().unwrap()).normalized().unwrap();
        assert_h(&id, Homography::identity().to_flat());
    }
}
