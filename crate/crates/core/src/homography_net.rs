//! Large-baseline homography estimator.
//!
//! A shared 8-layer extractor builds a three-level pyramid. The coarsest
//! level correlates reference and target globally and regresses a first
//! offset estimate; each finer level re-extracts target features after
//! warping by the running estimate, correlates locally, and regresses a
//! residual. Offsets are in network-input pixels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stitchforge_tensor::{Binding, ConvSpec, CustomOp, Graph, ParamStore, Scalar, Tensor, Var};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::correlation::{correlate_var, global_radius, memory_cells};
use crate::error::{Error, Result};
use crate::geometry::{ops, patch_corners, rescale_offsets, solve_dlt, CornerOffsets, Homography};
use crate::image::ImagePlane;
use crate::layers::{Conv, Dense};

/// How finer levels see the target under the running estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WarpMode {
    /// Warp the target image and re-run the extractor.
    #[default]
    Image,
    /// Warp the already extracted target feature map.
    Feature,
}

/// Distance between offset sets used by the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Mean Euclidean distance over the four vertices.
    #[default]
    L2Vertex,
    /// Mean over the four vertices of `|du| + |dv|`.
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HomographyNetConfig {
    /// Side of the square network input.
    pub net_size: usize,
    /// Filters of the four conv pairs of the extractor.
    pub extractor_widths: [usize; 4],
    /// Filters of the three stride-2 head convolutions.
    pub head_widths: [usize; 3],
    pub head_hidden: usize,
    pub pyramid_levels: usize,
    pub use_correlation: bool,
    /// Search radii at the 1/4 and 1/2 levels; the 1/8 level is global.
    pub local_radii: [usize; 2],
    pub warp_mode: WarpMode,
    /// Multiplier on the raw head output.
    pub output_scale: f64,
    pub seed: u64,
}

impl Default for HomographyNetConfig {
    fn default() -> Self {
        Self {
            net_size: 128,
            extractor_widths: [64, 128, 256, 512],
            head_widths: [256, 128, 64],
            head_hidden: 1024,
            pyramid_levels: 3,
            use_correlation: true,
            local_radii: [8, 4],
            warp_mode: WarpMode::Image,
            output_scale: 64.0,
            seed: 0,
        }
    }
}

impl HomographyNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.net_size == 0 || self.net_size % 8 != 0 {
            return Err(Error::InvalidConfig(format!("net_size {} must be a positive multiple of 8", self.net_size)));
        }
        if !(1..=3).contains(&self.pyramid_levels) {
            return Err(Error::InvalidConfig(format!("pyramid_levels {} outside 1..=3", self.pyramid_levels)));
        }
        if self.extractor_widths.contains(&0) || self.head_widths.contains(&0) || self.head_hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        for (i, r) in self.local_radii.iter().enumerate() {
            let side = self.level_size(i + 2);
            if *r == 0 || *r > side {
                return Err(Error::InvalidConfig(format!("radius {r} invalid for a {side}x{side} level")));
            }
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::InvalidConfig("output_scale must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side of the feature map used by `level` (1 = coarsest).
    pub fn level_size(&self, level: usize) -> usize {
        self.net_size >> (4 - level)
    }

    /// Pyramid index (0 = 1/2, 2 = 1/8) consumed by `level`.
    fn pyramid_index(level: usize) -> usize {
        3 - level
    }

    pub fn radius(&self, level: usize) -> usize {
        match level {
            1 => {
                let s = self.level_size(1);
                global_radius(s, s)
            }
            l => self.local_radii[l - 2],
        }
    }

    fn head_in_channels(&self, level: usize) -> usize {
        if self.use_correlation {
            let side = 2 * self.radius(level) + 1;
            side * side
        } else {
            2 * self.extractor_widths[4 - level]
        }
    }

    /// Correlation cells allocated per sample by one forward pass.
    pub fn correlation_cells(&self) -> u64 {
        if !self.use_correlation {
            return 0;
        }
        (1..=self.pyramid_levels)
            .map(|l| {
                let s = self.level_size(l);
                memory_cells(s, s, self.radius(l))
            })
            .sum()
    }
}

#[derive(Debug, Clone)]
struct Head {
    convs: [Conv; 3],
    hidden: Dense,
    out: Dense,
    in_channels: usize,
    side: usize,
}

/// Per-level residuals and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetPrediction {
    pub deltas: Vec<CornerOffsets>,
    pub total: CornerOffsets,
}

impl OffsetPrediction {
    pub fn from_deltas(deltas: Vec<CornerOffsets>) -> Self {
        let total = deltas.iter().fold(CornerOffsets::zeros(), |acc, d| acc + *d);
        Self { deltas, total }
    }
}

/// Graph nodes of one forward pass.
pub struct ForwardVars {
    /// `[n, 8]` residual per level, coarsest first.
    pub deltas: Vec<Var>,
    /// Correlation cells allocated per sample.
    pub correlation_cells: u64,
}

pub struct HomographyNet<T: Scalar> {
    config: HomographyNetConfig,
    params: ParamStore<T>,
    extractor: [Conv; 8],
    heads: Vec<Head>,
}

impl<T: Scalar> HomographyNet<T> {
    /// Rebuilds a trained network from a homography checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut net = Self::new(ck.network_config(ModelKind::Homography)?)?;
        ck.load_into(&mut net.params)?;
        Ok(net)
    }

    pub fn new(config: HomographyNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let w = config.extractor_widths;
        let chans = [1, w[0], w[0], w[1], w[1], w[2], w[2], w[3], w[3]];
        let extractor = std::array::from_fn(|i| {
            Conv::new(&mut params, &mut rng, &format!("extractor.conv{}", i + 1), chans[i], chans[i + 1], 3, ConvSpec::SAME3)
        });
        let mut heads = Vec::new();
        for level in 1..=config.pyramid_levels {
            let cin = config.head_in_channels(level);
            let hw = config.head_widths;
            let widths = [cin, hw[0], hw[1], hw[2]];
            let name = format!("head{level}");
            let convs = std::array::from_fn(|i| {
                Conv::new(&mut params, &mut rng, &format!("{name}.conv{}", i + 1), widths[i], widths[i + 1], 3, ConvSpec::DOWN3)
            });
            let mut side = config.level_size(level);
            for _ in 0..3 {
                side = ConvSpec::DOWN3.out_size(side, 3);
            }
            let flat = hw[2] * side * side;
            let hidden = Dense::new(&mut params, &mut rng, &format!("{name}.fc1"), flat, config.head_hidden);
            let out = Dense::zeroed(&mut params, &format!("{name}.fc2"), config.head_hidden, 8);
            heads.push(Head { convs, hidden, out, in_channels: cin, side: config.level_size(level) });
        }
        Ok(Self { config, params, extractor, heads })
    }

    pub fn config(&self) -> &HomographyNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Runs the extractor on `img` (`[n, 1, s, s]`) and returns the pyramid
    /// `[1/2, 1/4, 1/8]` truncated after index `upto`.
    pub fn extract_var(&self, g: &mut Graph<T>, p: &Binding, img: Var, upto: usize) -> Vec<Var> {
        let mut x = img;
        let mut levels = Vec::new();
        for (pair, convs) in self.extractor.chunks(2).enumerate() {
            if pair > 0 {
                x = g.maxpool2(x);
            }
            x = convs[0].apply_relu(g, p, x);
            x = convs[1].apply_relu(g, p, x);
            if pair > 0 {
                levels.push(x);
                if levels.len() > upto {
                    break;
                }
            }
        }
        levels
    }

    /// Feature pyramid of a single image, finest level first.
    pub fn extract_pyramid(&self, img: &ImagePlane) -> Result<Vec<Tensor<T>>> {
        if img.width() % 8 != 0 || img.height() % 8 != 0 {
            return Err(Error::IndivisibleInput { width: img.width(), height: img.height(), divisor: 8 });
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(img.to_gray().to_tensor());
        let levels = self.extract_var(&mut g, &p, x, 2);
        Ok(levels.iter().map(|v| g.value(*v).clone()).collect())
    }

    /// Head of `level` applied to a `[n, c, s, s]` volume; returns `[n, 8]`.
    pub fn regression_head_var(&self, g: &mut Graph<T>, p: &Binding, level: usize, vol: Var) -> Result<Var> {
        let head = self
            .heads
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::ShapeMismatch(format!("no head for level {level}")))?;
        let shape = g.value(vol).shape().to_vec();
        if shape.len() != 4 || shape[1] != head.in_channels || shape[2] != head.side || shape[3] != head.side {
            return Err(Error::ShapeMismatch(format!(
                "head {level} expects [n, {}, {}, {}], got {shape:?}",
                head.in_channels, head.side, head.side
            )));
        }
        let mut x = vol;
        for c in &head.convs {
            x = c.apply_relu(g, p, x);
        }
        let n = shape[0];
        let flat = g.value(x).numel() / n;
        x = g.reshape(x, &[n, flat]);
        x = head.hidden.apply(g, p, x);
        x = g.relu(x);
        let out = head.out.apply(g, p, x);
        Ok(if self.config.output_scale == 1.0 { out } else { g.scale(out, T::lit(self.config.output_scale)) })
    }

    fn level_volume(&self, g: &mut Graph<T>, level: usize, reference: Var, target: Var) -> Result<Var> {
        if self.config.use_correlation {
            correlate_var(g, reference, target, self.config.radius(level))
        } else {
            Ok(g.concat_channels(&[reference, target]))
        }
    }

    /// Inverse maps warping a `side x side` map by the running estimate
    /// (given in network pixels).
    fn running_maps(&self, g: &Graph<T>, running: &[Var], side: usize) -> Result<Tensor<T>> {
        let n = g.value(running[0]).shape()[0];
        let sigma = side as f64 / self.config.net_size as f64;
        let mut maps = Vec::with_capacity(n * 9);
        for b in 0..n {
            let mut flat = [0.0; 8];
            for v in running {
                for (k, f) in flat.iter_mut().enumerate() {
                    *f += g.value(*v).data()[b * 8 + k].as_f64();
                }
            }
            let off = rescale_offsets(&CornerOffsets::from_flat(flat), sigma, sigma)?;
            let h = solve_dlt(&patch_corners(side as f64, side as f64), &off.displaced(side as f64, side as f64))?;
            maps.extend(h.inverse()?.to_flat().map(T::lit));
        }
        Ok(Tensor::from_vec(&[n, 9], maps))
    }

    /// Full forward pass on `[n, 1, s, s]` reference and target batches.
    pub fn forward_var(&self, g: &mut Graph<T>, p: &Binding, reference: Var, target: Var) -> Result<ForwardVars> {
        let s = self.config.net_size;
        let shape = g.value(reference).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s || g.value(target).shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!("network expects [n, 1, {s}, {s}] inputs, got {shape:?}")));
        }
        let ref_pyr = self.extract_var(g, p, reference, 2);
        let tgt_pyr = self.extract_var(g, p, target, 2);
        let mut deltas = Vec::new();
        let vol = self.level_volume(g, 1, ref_pyr[2], tgt_pyr[2])?;
        deltas.push(self.regression_head_var(g, p, 1, vol)?);
        for level in 2..=self.config.pyramid_levels {
            let idx = HomographyNetConfig::pyramid_index(level);
            let side = self.config.level_size(level);
            let warped = match self.config.warp_mode {
                WarpMode::Image => {
                    let maps = self.running_maps(g, &deltas, s)?;
                    let maps = g.constant(maps);
                    let img = ops::warp(g, target, maps, s, s, (0.0, 0.0));
                    self.extract_var(g, p, img, idx)[idx]
                }
                WarpMode::Feature => {
                    let maps = self.running_maps(g, &deltas, side)?;
                    let maps = g.constant(maps);
                    ops::warp(g, tgt_pyr[idx], maps, side, side, (0.0, 0.0))
                }
            };
            let vol = self.level_volume(g, level, ref_pyr[idx], warped)?;
            deltas.push(self.regression_head_var(g, p, level, vol)?);
        }
        Ok(ForwardVars { deltas, correlation_cells: self.config.correlation_cells() })
    }

    /// Predicts offsets for a batch of `[n, 1, s, s]` image pairs.
    pub fn predict_batch(&self, reference: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<OffsetPrediction>> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let (r, t) = (g.constant(reference.clone()), g.constant(target.clone()));
        let out = self.forward_var(&mut g, &p, r, t)?;
        let n = reference.shape()[0];
        Ok((0..n)
            .map(|b| {
                let deltas = out
                    .deltas
                    .iter()
                    .map(|v| CornerOffsets::from_flat(std::array::from_fn(|k| g.value(*v).data()[b * 8 + k].as_f64())))
                    .collect();
                OffsetPrediction::from_deltas(deltas)
            })
            .collect())
    }

    /// Predicts offsets for one pair already at network size.
    pub fn predict_offsets(&self, reference: &ImagePlane, target: &ImagePlane) -> Result<OffsetPrediction> {
        let s = self.config.net_size;
        for img in [reference, target] {
            if img.width() != s || img.height() != s {
                return Err(Error::ShapeMismatch(format!("expected {s}x{s} input, got {}x{}", img.width(), img.height())));
            }
        }
        let r = reference.to_gray().to_tensor();
        let t = target.to_gray().to_tensor();
        Ok(self.predict_batch(&r, &t)?.remove(0))
    }
}

/// Result of size-free inference.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Offsets at the input resolution.
    pub offsets: CornerOffsets,
    pub homography: Homography,
    pub prediction: OffsetPrediction,
    /// Correlation cells allocated per pair; depends only on the network size.
    pub correlation_cells: u64,
}

/// Resizes both images to the network size, predicts, and rescales the
/// offsets back to the input resolution.
pub fn infer_homography<T: Scalar>(reference: &ImagePlane, target: &ImagePlane, net: &HomographyNet<T>) -> Result<Inference> {
    if reference.width() != target.width() || reference.height() != target.height() {
        return Err(Error::ShapeMismatch(format!(
            "reference {}x{} and target {}x{} differ",
            reference.width(),
            reference.height(),
            target.width(),
            target.height()
        )));
    }
    let (w, h) = (reference.width(), reference.height());
    if w < 32 || h < 32 {
        return Err(Error::InvalidImage(format!("{w}x{h} is below the 32x32 minimum")));
    }
    let s = net.config().net_size;
    let (r, t) = if (w, h) == (s, s) {
        (reference.to_gray(), target.to_gray())
    } else {
        (reference.to_gray().resize(s, s), target.to_gray().resize(s, s))
    };
    let prediction = net.predict_offsets(&r, &t)?;
    let offsets = rescale_offsets(&prediction.total, w as f64 / s as f64, h as f64 / s as f64)?;
    let homography = solve_dlt(&patch_corners(w as f64, h as f64), &offsets.displaced(w as f64, h as f64))?;
    Ok(Inference { offsets, homography, prediction, correlation_cells: net.config().correlation_cells() })
}

struct VertexDistance {
    l1: bool,
}

impl<T: Scalar> CustomOp<T> for VertexDistance {
    fn name(&self) -> &'static str {
        "vertex_distance"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let d = inputs[0].data();
        let mut out = Tensor::zeros(inputs[0].shape());
        for (v, (dist, gv)) in output.data().iter().zip(grad.data()).enumerate() {
            for k in 0..2 {
                let x = d[2 * v + k];
                out.data_mut()[2 * v + k] = if self.l1 {
                    if x > T::zero() {
                        *gv
                    } else if x < T::zero() {
                        -*gv
                    } else {
                        T::zero()
                    }
                } else if *dist > T::zero() {
                    *gv * x / *dist
                } else {
                    T::zero()
                };
            }
        }
        vec![Some(out)]
    }
}

/// Per-vertex distance of an `[n, 8]` difference: `[n, 4]`.
fn vertex_distance<T: Scalar>(g: &mut Graph<T>, diff: Var, norm: LossNorm) -> Var {
    let d = g.value(diff);
    let n = d.shape()[0];
    let out: Vec<T> = d
        .data()
        .chunks(2)
        .map(|c| match norm {
            LossNorm::L2Vertex => (c[0] * c[0] + c[1] * c[1]).sqrt(),
            LossNorm::L1 => c[0].abs() + c[1].abs(),
        })
        .collect();
    g.custom(&[diff], Tensor::from_vec(&[n, 4], out), Box::new(VertexDistance { l1: norm == LossNorm::L1 }))
}

/// Weighted sum over levels of the distance between the ground truth and
/// each partial sum of residuals, averaged over the batch.
pub fn homography_loss_var<T: Scalar>(g: &mut Graph<T>, deltas: &[Var], gt: Var, weights: &[f64], norm: LossNorm) -> Var {
    let mut partial: Option<Var> = None;
    let mut loss: Option<Var> = None;
    for (d, w) in deltas.iter().zip(weights) {
        let sum = match partial {
            None => *d,
            Some(p) => g.add(p, *d),
        };
        partial = Some(sum);
        let diff = g.sub(gt, sum);
        let dist = vertex_distance(g, diff, norm);
        let mean = g.mean(dist);
        let term = g.scale(mean, T::lit(*w));
        loss = Some(match loss {
            None => term,
            Some(l) => g.add(l, term),
        });
    }
    loss.expect("at least one level")
}

/// Loss of one prediction against the ground truth.
pub fn homography_loss(pred: &OffsetPrediction, gt: &CornerOffsets, weights: &[f64], norm: LossNorm) -> f64 {
    let mut partial = CornerOffsets::zeros();
    let mut loss = 0.0;
    for (d, w) in pred.deltas.iter().zip(weights) {
        partial = partial + *d;
        let diff = *gt - partial;
        let dist: f64 = diff
            .0
            .iter()
            .map(|[du, dv]| match norm {
                LossNorm::L2Vertex => (du * du + dv * dv).sqrt(),
                LossNorm::L1 => du.abs() + dv.abs(),
            })
            .sum::<f64>()
            / 4.0;
        loss += w * dist;
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(levels: usize, corr: bool) -> HomographyNetConfig {
        HomographyNetConfig {
            net_size: 32,
            extractor_widths: [2, 3, 4, 5],
            head_widths: [3, 3, 2],
            head_hidden: 6,
            pyramid_levels: levels,
            use_correlation: corr,
            local_radii: [2, 2],
            ..Default::default()
        }
    }

    #[test]
    fn paper_pyramid_shapes() {
        let cfg = HomographyNetConfig { head_hidden: 8, head_widths: [4, 4, 4], pyramid_levels: 1, ..Default::default() };
        let net = HomographyNet::<f32>::new(cfg).unwrap();
        let pyr = net.extract_pyramid(&ImagePlane::filled(128, 128, 1, 0.3)).unwrap();
        let shapes: Vec<_> = pyr.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 128, 64, 64], vec![1, 256, 32, 32], vec![1, 512, 16, 16]]);
    }

    #[test]
    fn untrained_net_predicts_zero() {
        for (levels, corr) in [(1, true), (3, true), (3, false)] {
            let net = HomographyNet::<f64>::new(tiny(levels, corr)).unwrap();
            let img = ImagePlane::from_fn(32, 32, 1, |x, y, _| ((x * 3 + y * 5) % 7) as f32 / 7.0);
            let p = net.predict_offsets(&img, &img).unwrap();
            assert_eq!(p.deltas.len(), levels);
            assert_eq!(p.total, CornerOffsets::zeros());
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = HomographyNet::<f32>::new(tiny(1, true)).unwrap();
        assert!(matches!(net.extract_pyramid(&ImagePlane::zeros(30, 32, 1)), Err(Error::IndivisibleInput { .. })));
    }

    #[test]
    fn loss_examples() {
        let w = [1.0, 0.25, 0.1];
        let gt = CornerOffsets::uniform(3.0, 4.0);
        let zero = OffsetPrediction::from_deltas(vec![CornerOffsets::zeros(); 3]);
        assert_eq!(homography_loss(&zero, &gt, &w, LossNorm::L2Vertex), 6.75);
        let exact = OffsetPrediction::from_deltas(vec![gt, CornerOffsets::zeros(), CornerOffsets::zeros()]);
        assert_eq!(homography_loss(&exact, &gt, &w, LossNorm::L2Vertex), 0.0);
    }
}
