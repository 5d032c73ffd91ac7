//! Content-aware deformation network.
//!
//! Two U-Nets share the canvas. The edge branch sees the edge maps of both
//! warped inputs and predicts the edge map of the stitched result; the image
//! branch sees both warped RGB images and concatenates the edge branch's
//! upsampled decoder features at every decoder stage. A small fusion block
//! turns the final features of both branches into the RGB output.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stitchforge_tensor::{Binding, ConvSpec, CustomOp, Graph, ParamStore, Scalar, Tensor, Var};

use crate::checkpoint::{load_checkpoint, Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::geometry::{warp_image, CanvasSpec, Homography};
use crate::image::{ImagePlane, LUMA};
use crate::layers::{Conv, Deconv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformationNetConfig {
    /// Filters of the four encoder stages (decoder mirrors the first three).
    pub widths: [usize; 4],
    pub fusion_width: usize,
    pub use_edge_branch: bool,
    pub seed: u64,
}

impl Default for DeformationNetConfig {
    fn default() -> Self {
        Self {
            widths: [64, 128, 256, 512],
            fusion_width: 64,
            use_edge_branch: true,
            seed: 0,
        }
    }
}

impl DeformationNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.fusion_width == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Pair of warped inputs on a shared canvas.
#[derive(Debug, Clone)]
pub struct StitchInputs {
    pub warped_reference: ImagePlane,
    pub warped_target: ImagePlane,
    pub canvas: CanvasSpec,
}

/// Places `reference` at the canvas origin and warps `target` by `h`.
/// Both results are RGB.
pub fn warp_pair(reference: &ImagePlane, target: &ImagePlane, h: &Homography, canvas: &CanvasSpec) -> Result<StitchInputs> {
    Ok(StitchInputs {
        warped_reference: warp_image(&reference.to_rgb(), &Homography::identity(), canvas)?,
        warped_target: warp_image(&target.to_rgb(), h, canvas)?,
        canvas: *canvas,
    })
}

/// Edge magnitude of a `[n, 1, h, w]` tensor: sum of absolute vertical and
/// horizontal backward differences (zero padding), clipped to `[0, 1]`.
pub fn edges_tensor<T: Scalar>(gray: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = gray.dims4();
    assert_eq!(c, 1, "edge map of a multi-channel tensor");
    let src = gray.data();
    let mut out = Tensor::zeros(gray.shape());
    let dst = out.data_mut();
    for b in 0..n {
        let base = b * h * w;
        for i in 0..h {
            for j in 0..w {
                let g = src[base + i * w + j];
                let up = if i > 0 { src[base + (i - 1) * w + j] } else { T::zero() };
                let left = if j > 0 { src[base + i * w + j - 1] } else { T::zero() };
                let e = (g - up).abs() + (g - left).abs();
                dst[base + i * w + j] = if e > T::one() { T::one() } else { e };
            }
        }
    }
    out
}

/// Edge map of a single-channel image.
pub fn extract_edges(gray: &ImagePlane) -> Result<ImagePlane> {
    if gray.channels() != 1 {
        return Err(Error::MultiChannelInput(gray.channels()));
    }
    ImagePlane::from_tensor(&edges_tensor(&gray.to_tensor::<f32>()), 0)
}

struct EdgeOp;

impl<T: Scalar> CustomOp<T> for EdgeOp {
    fn name(&self) -> &'static str {
        "edges"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let (n, _, h, w) = x.dims4();
        let src = x.data();
        let gr = grad.data();
        let sign = |v: T| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        };
        let mut out = Tensor::zeros(x.shape());
        let dst = out.data_mut();
        for b in 0..n {
            let base = b * h * w;
            for i in 0..h {
                for j in 0..w {
                    let k = base + i * w + j;
                    let g = src[k];
                    let dv = g - if i > 0 { src[k - w] } else { T::zero() };
                    let dh = g - if j > 0 { src[k - 1] } else { T::zero() };
                    if dv.abs() + dh.abs() > T::one() {
                        continue;
                    }
                    let (sv, sh) = (sign(dv) * gr[k], sign(dh) * gr[k]);
                    dst[k] += sv + sh;
                    if i > 0 {
                        dst[k - w] -= sv;
                    }
                    if j > 0 {
                        dst[k - 1] -= sh;
                    }
                }
            }
        }
        vec![Some(out)]
    }
}

/// Differentiable edge map of a `[n, 1, h, w]` variable.
pub fn edges_var<T: Scalar>(g: &mut Graph<T>, gray: Var) -> Var {
    let out = edges_tensor(g.value(gray));
    g.custom(&[gray], out, Box::new(EdgeOp))
}

fn luma_weight<T: Scalar>() -> Tensor<T> {
    Tensor::from_vec(&[1, 3, 1, 1], LUMA.iter().map(|&v| T::lit(v as f64)).collect())
}

/// Luma of a `[n, 3, h, w]` variable.
pub fn luma_var<T: Scalar>(g: &mut Graph<T>, rgb: Var) -> Var {
    let w = g.constant(luma_weight());
    g.conv2d(rgb, w, None, ConvSpec::POINT)
}

fn luma_tensor<T: Scalar>(rgb: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.constant(rgb.clone());
    let y = luma_var(&mut g, x);
    g.value(y).clone()
}

/// Encoder-decoder with skip connections; decoder stages can take extra
/// guidance features at their own resolution.
#[derive(Debug, Clone)]
struct UNet {
    enc: Vec<Conv>,
    up: Vec<Deconv>,
    dec: Vec<Conv>,
}

struct UNetOutput {
    features: Var,
    /// Upsampled decoder features, coarsest first.
    ups: Vec<Var>,
}

impl UNet {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        widths: [usize; 4],
        guided: bool,
    ) -> Self {
        let mut enc = Vec::new();
        let mut prev = cin;
        for (s, &w) in widths.iter().enumerate() {
            enc.push(Conv::new(store, rng, &format!("{name}.enc{s}a"), prev, w, 3, ConvSpec::SAME3));
            enc.push(Conv::new(store, rng, &format!("{name}.enc{s}b"), w, w, 3, ConvSpec::SAME3));
            prev = w;
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for s in (0..3).rev() {
            let w = widths[s];
            up.push(Deconv::new(store, rng, &format!("{name}.up{s}"), prev, w));
            let cat = if guided { 3 * w } else { 2 * w };
            dec.push(Conv::new(store, rng, &format!("{name}.dec{s}a"), cat, w, 3, ConvSpec::SAME3));
            dec.push(Conv::new(store, rng, &format!("{name}.dec{s}b"), w, w, 3, ConvSpec::SAME3));
            prev = w;
        }
        Self { enc, up, dec }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var, guides: Option<&[Var]>) -> UNetOutput {
        let mut skips = Vec::new();
        let mut h = x;
        for s in 0..4 {
            if s > 0 {
                h = g.maxpool2(h);
            }
            h = self.enc[2 * s].apply_relu(g, p, h);
            h = self.enc[2 * s + 1].apply_relu(g, p, h);
            if s < 3 {
                skips.push(h);
            }
        }
        let mut ups = Vec::new();
        for k in 0..3 {
            let u = self.up[k].apply(g, p, h);
            let u = g.relu(u);
            ups.push(u);
            let skip = skips[2 - k];
            let cat = match guides {
                Some(gs) => g.concat_channels(&[u, skip, gs[k]]),
                None => g.concat_channels(&[u, skip]),
            };
            h = self.dec[2 * k].apply_relu(g, p, cat);
            h = self.dec[2 * k + 1].apply_relu(g, p, h);
        }
        UNetOutput { features: h, ups }
    }
}

#[derive(Debug, Clone)]
struct EdgeBranch {
    unet: UNet,
    head: Conv,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DeformOutputs {
    /// Predicted edge map `[n, 1, h, w]`, absent without the edge branch.
    pub edges: Option<Var>,
    /// Stitched image `[n, 3, h, w]` in `[0, 1]`.
    pub image: Var,
}

/// Result of [`DeformationNet::stitch`].
#[derive(Debug, Clone)]
pub struct Stitched {
    pub image: ImagePlane,
    pub edges: Option<ImagePlane>,
}

#[derive(Debug, Clone)]
pub struct DeformationNet<T: Scalar> {
    config: DeformationNetConfig,
    params: ParamStore<T>,
    edge: Option<EdgeBranch>,
    image: UNet,
    fusion: [Conv; 3],
}

impl<T: Scalar> DeformationNet<T> {
    /// Rebuilds a trained network from a deformation checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut net = Self::new(ck.network_config(ModelKind::Deformation)?)?;
        ck.load_into(&mut net.params)?;
        Ok(net)
    }

    pub fn new(config: DeformationNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let w = config.widths;
        let edge = config.use_edge_branch.then(|| EdgeBranch {
            unet: UNet::new(&mut params, &mut rng, "edge", 2, w, false),
            head: Conv::new(&mut params, &mut rng, "edge.head", w[0], 1, 1, ConvSpec::POINT),
        });
        let image = UNet::new(&mut params, &mut rng, "image", 6, w, config.use_edge_branch);
        let fin = if config.use_edge_branch { 2 * w[0] } else { w[0] };
        let f = config.fusion_width;
        let fusion = [
            Conv::new(&mut params, &mut rng, "fusion.0", fin, f, 3, ConvSpec::SAME3),
            Conv::new(&mut params, &mut rng, "fusion.1", f, f, 3, ConvSpec::SAME3),
            Conv::new(&mut params, &mut rng, "fusion.out", f, 3, 1, ConvSpec::POINT),
        ];
        Ok(Self { config, params, edge, image, fusion })
    }

    pub fn config(&self) -> &DeformationNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Forward pass on warped inputs `[n, 3, h, w]`; `h` and `w` must be
    /// multiples of 8.
    pub fn forward_var(&self, g: &mut Graph<T>, p: &Binding, warped_ref: Var, warped_tgt: Var) -> Result<DeformOutputs> {
        let a = g.value(warped_ref);
        let b = g.value(warped_tgt);
        if a.shape() != b.shape() || a.shape().len() != 4 || a.shape()[1] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "warped inputs must share an [n, 3, h, w] shape, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (_, _, h, w) = a.dims4();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::IndivisibleInput { width: w, height: h, divisor: 8 });
        }
        let images = g.concat_channels(&[warped_ref, warped_tgt]);
        let (edges, guides, edge_features) = match &self.edge {
            Some(branch) => {
                let ea = edges_tensor(&luma_tensor(g.value(warped_ref)));
                let eb = edges_tensor(&luma_tensor(g.value(warped_tgt)));
                let ea = g.constant(ea);
                let eb = g.constant(eb);
                let input = g.concat_channels(&[ea, eb]);
                let out = branch.unet.forward(g, p, input, None);
                let logits = branch.head.apply(g, p, out.features);
                (Some(g.sigmoid(logits)), Some(out.ups), Some(out.features))
            }
            None => (None, None, None),
        };
        let img = self.image.forward(g, p, images, guides.as_deref());
        let fused = match edge_features {
            Some(ef) => g.concat_channels(&[ef, img.features]),
            None => img.features,
        };
        let h1 = self.fusion[0].apply_relu(g, p, fused);
        let h2 = self.fusion[1].apply_relu(g, p, h1);
        let logits = self.fusion[2].apply(g, p, h2);
        Ok(DeformOutputs { edges, image: g.sigmoid(logits) })
    }

    /// Runs the network on one warped pair.
    pub fn stitch(&self, inputs: &StitchInputs) -> Result<Stitched> {
        let (a, b) = (&inputs.warped_reference, &inputs.warped_target);
        if a.channels() != 3 || !a.same_shape(b) {
            return Err(Error::ShapeMismatch("warped inputs must be RGB images of equal size".into()));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let ra = g.constant(a.to_tensor());
        let rb = g.constant(b.to_tensor());
        let out = self.forward_var(&mut g, &p, ra, rb)?;
        Ok(Stitched {
            image: ImagePlane::from_tensor(g.value(out.image), 0)?,
            edges: out.edges.map(|e| ImagePlane::from_tensor(g.value(e), 0)).transpose()?,
        })
    }
}

/// Frozen feature extractor behind the content loss. Inputs are RGB in `[0, 1]`.
pub trait PerceptualExtractor<T: Scalar>: Send + Sync {
    fn features_var(&self, g: &mut Graph<T>, rgb: Var) -> Var;

    fn features(&self, rgb: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let x = g.constant(rgb.clone());
        let y = self.features_var(&mut g, x);
        g.value(y).clone()
    }
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Conv(Conv),
    Pool,
}

/// Plain conv/ReLU/max-pool stack with frozen weights.
#[derive(Debug, Clone)]
pub struct ConvFeatureExtractor<T: Scalar> {
    params: ParamStore<T>,
    stages: Vec<Stage>,
    /// Multiplier applied to the `[0, 1]` input.
    input_scale: f64,
}

/// Convolutions up to and including the ninth of VGG-19, `None` marking pools.
const VGG19_PREFIX: [Option<usize>; 12] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
];

/// ImageNet channel means in 0..255 units.
const VGG_MEAN: [f64; 3] = [123.68, 116.779, 103.939];

impl<T: Scalar> ConvFeatureExtractor<T> {
    /// Two randomly initialised 3x3 conv/ReLU layers at full resolution.
    pub fn random(seed: u64, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stages = vec![
            Stage::Conv(Conv::new(&mut params, &mut rng, "conv1", 3, width, 3, ConvSpec::SAME3)),
            Stage::Conv(Conv::new(&mut params, &mut rng, "conv2", width, width, 3, ConvSpec::SAME3)),
        ];
        Self { params, stages, input_scale: 255.0 }
    }

    /// Loads the first nine VGG-19 convolutions from a checkpoint file holding
    /// `conv{1..9}.weight` (`[out, in, 3, 3]`) and `conv{1..9}.bias`. The
    /// ImageNet mean subtraction is folded into the first bias.
    pub fn vgg19(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path).map_err(|e| Error::ExtractorUnavailable(format!("{}: {e}", path.display())))?;
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cin = 3;
        let mut index = 0;
        for stage in VGG19_PREFIX {
            let Some(cout) = stage else {
                stages.push(Stage::Pool);
                continue;
            };
            index += 1;
            let name = format!("conv{index}");
            let conv = Conv::new(&mut params, &mut rng, &name, cin, cout, 3, ConvSpec::SAME3);
            let fetch = |suffix: &str, shape: &[usize]| -> Result<Tensor<T>> {
                let key = format!("{name}.{suffix}");
                let t = ck
                    .tensor(&key)
                    .ok_or_else(|| Error::ExtractorUnavailable(format!("missing {key}")))?;
                if t.shape() != shape {
                    return Err(Error::ExtractorUnavailable(format!("{key} has shape {:?}, expected {shape:?}", t.shape())));
                }
                Ok(t.cast())
            };
            let w = fetch("weight", &[cout, cin, 3, 3])?;
            let mut b = fetch("bias", &[cout])?;
            if index == 1 {
                for o in 0..cout {
                    let mut shift = 0.0;
                    for (c, mean) in VGG_MEAN.iter().enumerate() {
                        let k: f64 = w.data()[(o * 3 + c) * 9..(o * 3 + c + 1) * 9].iter().map(|v| v.as_f64()).sum();
                        shift += k * mean;
                    }
                    b.data_mut()[o] = T::lit(b.data()[o].as_f64() - shift);
                }
            }
            params.set(&format!("{name}.weight"), w).map_err(Error::ExtractorUnavailable)?;
            params.set(&format!("{name}.bias"), b).map_err(Error::ExtractorUnavailable)?;
            stages.push(Stage::Conv(conv));
            cin = cout;
        }
        Ok(Self { params, stages, input_scale: 255.0 })
    }
}

impl<T: Scalar> PerceptualExtractor<T> for ConvFeatureExtractor<T> {
    fn features_var(&self, g: &mut Graph<T>, rgb: Var) -> Var {
        let p = g.bind(&self.params, false);
        let mut h = g.scale(rgb, T::lit(self.input_scale));
        for stage in &self.stages {
            h = match stage {
                Stage::Conv(c) => c.apply_relu(g, &p, h),
                Stage::Pool => g.maxpool2(h),
            };
        }
        h
    }
}

/// Mean absolute difference between predicted and label edge maps.
pub fn edge_loss_var<T: Scalar>(g: &mut Graph<T>, predicted: Var, label_edges: Var) -> Var {
    let d = g.sub(predicted, label_edges);
    let a = g.abs(d);
    g.mean(a)
}

/// Mean squared difference of extractor features.
pub fn content_loss_var<T: Scalar>(g: &mut Graph<T>, extractor: &dyn PerceptualExtractor<T>, output: Var, label: Var) -> Var {
    let fo = extractor.features_var(g, output);
    let fl = extractor.features_var(g, label);
    let fl = g.detach(fl);
    let d = g.sub(fo, fl);
    let s = g.square(d);
    g.mean(s)
}

/// Weighted sum of edge and content terms.
pub fn total_loss(edge: f64, content: f64, lambda_edge: f64, lambda_content: f64) -> f64 {
    lambda_edge * edge + lambda_content * content
}

/// Edge loss between two single-channel edge maps.
pub fn edge_loss(predicted: &ImagePlane, label_edges: &ImagePlane) -> Result<f64> {
    if !predicted.same_shape(label_edges) || predicted.channels() != 1 {
        return Err(Error::ShapeMismatch("edge maps must be single-channel and equally sized".into()));
    }
    let n = predicted.data().len() as f64;
    Ok(predicted.data().iter().zip(label_edges.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / n)
}

/// Content loss between two RGB images.
pub fn content_loss(extractor: &dyn PerceptualExtractor<f64>, output: &ImagePlane, label: &ImagePlane) -> Result<f64> {
    if !output.same_shape(label) || output.channels() != 3 {
        return Err(Error::ShapeMismatch("content loss needs RGB images of equal size".into()));
    }
    let fo = extractor.features(&output.to_tensor());
    let fl = extractor.features(&label.to_tensor());
    Ok(fo.data().iter().zip(fl.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / fo.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(edge: bool) -> DeformationNetConfig {
        DeformationNetConfig { widths: [4, 4, 8, 8], fusion_width: 4, use_edge_branch: edge, seed: 3 }
    }

    #[test]
    fn output_shapes_and_range() {
        for edge in [true, false] {
            let net = DeformationNet::<f32>::new(tiny(edge)).unwrap();
            let img = ImagePlane::from_fn(24, 16, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f32 / 10.0);
            let inputs = StitchInputs { warped_reference: img.clone(), warped_target: img, canvas: CanvasSpec::identity(24, 16) };
            let out = net.stitch(&inputs).unwrap();
            assert_eq!((out.image.width(), out.image.height(), out.image.channels()), (24, 16, 3));
            assert_eq!(out.edges.is_some(), edge);
        }
    }

    #[test]
    fn rejects_indivisible_canvas() {
        let net = DeformationNet::<f32>::new(tiny(true)).unwrap();
        let img = ImagePlane::filled(20, 16, 3, 0.5);
        let inputs = StitchInputs { warped_reference: img.clone(), warped_target: img, canvas: CanvasSpec::identity(20, 16) };
        assert!(matches!(net.stitch(&inputs), Err(Error::IndivisibleInput { .. })));
    }

    #[test]
    fn edge_gradient_matches_finite_differences() {
        let vals: Vec<f64> = (0..25).map(|i| ((i * 37 % 23) as f64) / 60.0).collect();
        let x0 = Tensor::from_vec(&[1, 1, 5, 5], vals);
        let weights: Vec<f64> = (0..25).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let f = |x: &Tensor<f64>| -> f64 { edges_tensor(x).data().iter().zip(&weights).map(|(a, b)| a * b).sum() };
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let e = edges_var(&mut g, x);
        let w = g.constant(Tensor::from_vec(&[1, 1, 5, 5], weights.clone()));
        let m = g.mul(e, w);
        let s = g.sum(m);
        let grads = g.backward(s);
        let an = grads.get(x).unwrap();
        for i in 0..25 {
            let mut xp = x0.clone();
            xp.data_mut()[i] += 1e-6;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - an.data()[i]).abs() < 1e-5, "{i}: {fd} vs {}", an.data()[i]);
        }
    }

    #[test]
    fn content_loss_zero_on_identical_images() {
        let ex = ConvFeatureExtractor::<f64>::random(1, 4);
        let img = ImagePlane::from_fn(8, 8, 3, |x, y, _| (x + y) as f32 / 14.0);
        assert_eq!(content_loss(&ex, &img, &img).unwrap(), 0.0);
        let other = ImagePlane::filled(8, 8, 3, 0.2);
        assert!(content_loss(&ex, &img, &other).unwrap() > 0.0);
    }
}
