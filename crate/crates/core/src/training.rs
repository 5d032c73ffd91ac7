//! Two-stage supervised training with Adam and exponential learning-rate decay.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stitchforge_tensor::{clip_global_norm, exec, Adam, Graph, ParamStore, Tensor, Var};

use crate::checkpoint::{collect_tensors, save_checkpoint, Checkpoint, CheckpointHeader, ModelKind};
use crate::dataset::{brightness_augment, QuadrupleSource, StitchQuadruple, SynthesisConfig};
use crate::deformation_net::{
    content_loss_var, edge_loss_var, edges_tensor, edges_var, luma_var, warp_pair, ConvFeatureExtractor, DeformationNet,
    DeformationNetConfig, PerceptualExtractor,
};
use crate::error::{Error, Result};
use crate::geometry::offsets_to_homography;
use crate::homography_net::{homography_loss_var, infer_homography, HomographyNet, HomographyNetConfig, LossNorm, WarpMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Homography,
    Deformation,
}

/// Which homography places the target on the canvas while training the
/// deformation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// The frozen homography network's prediction.
    #[default]
    Predicted,
    /// The record's ground-truth offsets.
    GroundTruth,
}

/// Flat training configuration; also the on-disk config file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr0: f64,
    pub decay_steps: f64,
    pub decay_rate: f64,
    /// Defaults to 100 (homography) or 25 (deformation).
    pub max_epochs: Option<u64>,
    /// Defaults to 4 (homography) or 1 (deformation).
    pub batch_size: Option<usize>,
    pub max_steps: Option<u64>,
    /// Stop after this many epochs without a lower mean epoch loss.
    pub early_stop_patience: Option<u64>,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub level_weights: [f64; 3],
    pub loss_norm: LossNorm,
    pub lambda_edge: f64,
    pub lambda_content: f64,
    /// Largest brightness shift applied to homography-stage inputs.
    pub brightness: f32,
    pub align_with: Alignment,

    pub pyramid_levels: usize,
    pub use_correlation: bool,
    pub use_edge_branch: bool,

    pub net_size: usize,
    pub extractor_widths: [usize; 4],
    pub head_widths: [usize; 3],
    pub head_hidden: usize,
    pub local_radii: [usize; 2],
    pub warp_mode: WarpMode,
    pub output_scale: f64,
    pub deform_widths: [usize; 4],
    pub fusion_width: usize,
    /// Weights file of the pretrained perceptual extractor; a fixed random
    /// extractor is used when unset.
    pub perceptual_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = HomographyNetConfig::default();
        Self {
            stage: Stage::Homography,
            lr0: 1e-4,
            decay_steps: 12_500.0,
            decay_rate: 0.95,
            max_epochs: None,
            batch_size: None,
            max_steps: None,
            early_stop_patience: None,
            grad_clip: None,
            seed: 0,
            level_weights: [1.0, 0.25, 0.1],
            loss_norm: LossNorm::L2Vertex,
            lambda_edge: 1.0,
            lambda_content: 2e-6,
            brightness: 0.1,
            align_with: Alignment::Predicted,
            pyramid_levels: net.pyramid_levels,
            use_correlation: net.use_correlation,
            use_edge_branch: true,
            net_size: net.net_size,
            extractor_widths: net.extractor_widths,
            head_widths: net.head_widths,
            head_hidden: net.head_hidden,
            local_radii: net.local_radii,
            warp_mode: net.warp_mode,
            output_scale: net.output_scale,
            deform_widths: [64, 128, 256, 512],
            fusion_width: 64,
            perceptual_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!("decay_rate must lie in (0, 1], got {}", self.decay_rate)));
        }
        if !(self.decay_steps > 0.0) {
            return Err(Error::InvalidConfig("decay_steps must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..=0.3).contains(&self.brightness) {
            return Err(Error::InvalidConfig(format!("brightness {} outside [0, 0.3]", self.brightness)));
        }
        self.homography_net_config().validate()
    }

    /// Reads a flat TOML file; missing keys keep their defaults.
    pub fn from_toml_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn epochs(&self) -> u64 {
        self.max_epochs.unwrap_or(match self.stage {
            Stage::Homography => 100,
            Stage::Deformation => 25,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch_size.unwrap_or(match self.stage {
            Stage::Homography => 4,
            Stage::Deformation => 1,
        })
    }

    pub fn homography_net_config(&self) -> HomographyNetConfig {
        HomographyNetConfig {
            net_size: self.net_size,
            extractor_widths: self.extractor_widths,
            head_widths: self.head_widths,
            head_hidden: self.head_hidden,
            pyramid_levels: self.pyramid_levels,
            use_correlation: self.use_correlation,
            local_radii: self.local_radii,
            warp_mode: self.warp_mode,
            output_scale: self.output_scale,
            seed: self.seed,
        }
    }

    pub fn deformation_net_config(&self) -> DeformationNetConfig {
        DeformationNetConfig {
            widths: self.deform_widths,
            fusion_width: self.fusion_width,
            use_edge_branch: self.use_edge_branch,
            seed: self.seed,
        }
    }

    /// The configured pretrained extractor, or the fixed random fallback.
    pub fn perceptual_extractor(&self) -> Result<ConvFeatureExtractor<f32>> {
        match &self.perceptual_weights {
            Some(path) => ConvFeatureExtractor::vgg19(path),
            None => Ok(ConvFeatureExtractor::random(RANDOM_EXTRACTOR_SEED, RANDOM_EXTRACTOR_WIDTH)),
        }
    }
}

const RANDOM_EXTRACTOR_SEED: u64 = 0x5eed_f00d;
const RANDOM_EXTRACTOR_WIDTH: usize = 32;

/// Learning rate after `step` optimizer updates (continuous decay).
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_rate.powf(step as f64 / cfg.decay_steps)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    /// Unweighted loss terms: per-level distances, or edge and content.
    pub terms: Vec<f64>,
}

/// Where a run writes its artifacts, and what it resumes from.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Rewritten at the end of every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Line-delimited JSON, appended one record per step.
    pub metrics: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stored in the checkpoint header.
    pub synthesis: Option<SynthesisConfig>,
}

pub struct Trained<M> {
    pub model: M,
    pub log: Vec<StepRecord>,
    /// Batches dropped because an intermediate homography was degenerate.
    pub skipped: usize,
}

impl<M> Trained<M> {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss)
    }
}

struct MetricsSink {
    file: Option<std::fs::File>,
}

impl MetricsSink {
    fn open(path: Option<&PathBuf>) -> Result<Self> {
        let file = match path {
            Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        Ok(Self { file })
    }

    fn push(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            serde_json::to_writer(&mut *f, rec)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Shared epoch/step bookkeeping for both stages.
struct Schedule<'a> {
    cfg: &'a TrainConfig,
    len: usize,
    step: u64,
    epoch: u64,
}

impl Schedule<'_> {
    fn order(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch);
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut rng);
        idx
    }

    fn out_of_steps(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }
}

struct EarlyStop {
    best: f64,
    stale: u64,
}

impl EarlyStop {
    fn update(&mut self, epoch_loss: f64, patience: Option<u64>) -> bool {
        if epoch_loss < self.best {
            self.best = epoch_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        patience.is_some_and(|p| self.stale >= p)
    }
}

fn load_batch(source: &dyn QuadrupleSource, indices: &[usize]) -> Result<Vec<StitchQuadruple>> {
    exec::map_range(indices.len(), |i| source.get(indices[i])).into_iter().collect()
}

fn optimizer_step(
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    mut grads: Vec<Option<Tensor<f32>>>,
    cfg: &TrainConfig,
    step: u64,
) -> f64 {
    if let Some(c) = cfg.grad_clip {
        clip_global_norm(&mut grads, c);
    }
    let lr = lr_at(step, cfg);
    adam.step(store, &grads, lr);
    lr
}

fn write_checkpoint(
    path: &std::path::Path,
    kind: ModelKind,
    network: serde_json::Value,
    net_size: usize,
    store: &ParamStore<f32>,
    adam: &Adam<f32>,
    sched: &Schedule,
    synthesis: Option<SynthesisConfig>,
) -> Result<()> {
    let (astep, m, v) = adam.state();
    let (tensors, data) = collect_tensors(store, Some((m, v)));
    let header = CheckpointHeader {
        kind,
        network,
        synthesis,
        net_size,
        step: sched.step,
        epoch: sched.epoch,
        adam_step: Some(astep),
        tensors,
    };
    save_checkpoint(path, &Checkpoint { header, tensors: data })
}

fn resume_into(ckpt: &Checkpoint, kind: ModelKind, network: &serde_json::Value, store: &mut ParamStore<f32>, adam: &mut Adam<f32>) -> Result<(u64, u64)> {
    if ckpt.header.kind != kind {
        return Err(Error::CheckpointIncompatible(format!("expected a {kind:?} checkpoint, found {:?}", ckpt.header.kind)));
    }
    if &ckpt.header.network != network {
        return Err(Error::CheckpointIncompatible("network configuration differs from the checkpoint".into()));
    }
    ckpt.load_into(store)?;
    if let Some((s, m, v)) = ckpt.adam_moments(store) {
        adam.restore(s, m, v).map_err(Error::CheckpointIncompatible)?;
    }
    Ok((ckpt.header.step, ckpt.header.epoch))
}

/// Grayscale `[n, 1, s, s]` batches of reference and target plus `[n, 8]` offsets.
fn homography_batch(
    batch: &[StitchQuadruple],
    net_size: usize,
    brightness: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let mut refs = Vec::new();
    let mut tgts = Vec::new();
    let mut gts = Vec::new();
    for q in batch {
        if q.reference.width() != net_size || q.reference.height() != net_size {
            return Err(Error::InvalidConfig(format!(
                "dataset patches are {}x{} but net_size is {net_size}",
                q.reference.width(),
                q.reference.height()
            )));
        }
        let mut shift = || if brightness > 0.0 { rng.gen_range(-brightness..=brightness) } else { 0.0 };
        let (sr, st) = (shift(), shift());
        refs.push(brightness_augment(&q.reference.to_gray(), sr).to_tensor());
        tgts.push(brightness_augment(&q.target.to_gray(), st).to_tensor());
        gts.extend(q.offsets.to_flat().map(|v| v as f32));
    }
    let n = batch.len();
    Ok((Tensor::stack(&refs), Tensor::stack(&tgts), Tensor::from_vec(&[n, 8], gts)))
}

/// Batch-mean distance between the ground truth and each partial sum.
fn level_distances(g: &Graph<f32>, deltas: &[Var], gt: Var, norm: LossNorm) -> Vec<f64> {
    let gt = g.value(gt).data();
    let n = gt.len() / 8;
    let mut partial = vec![0.0f64; gt.len()];
    deltas
        .iter()
        .map(|d| {
            for (p, v) in partial.iter_mut().zip(g.value(*d).data()) {
                *p += *v as f64;
            }
            let mut total = 0.0;
            for (gv, pv) in gt.chunks(2).zip(partial.chunks(2)) {
                let (du, dv) = (gv[0] as f64 - pv[0], gv[1] as f64 - pv[1]);
                total += match norm {
                    LossNorm::L2Vertex => (du * du + dv * dv).sqrt(),
                    LossNorm::L1 => du.abs() + dv.abs(),
                };
            }
            total / (4 * n) as f64
        })
        .collect()
}

/// Trains the homography network on `source`.
pub fn train_homography(source: &dyn QuadrupleSource, cfg: &TrainConfig, opts: &RunOptions) -> Result<Trained<HomographyNet<f32>>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    let net_cfg = cfg.homography_net_config();
    let network = serde_json::to_value(&net_cfg)?;
    let mut net = HomographyNet::<f32>::new(net_cfg)?;
    let mut adam = Adam::new(net.params());
    let mut sched = Schedule { cfg, len: source.len(), step: 0, epoch: 0 };
    if let Some(ck) = &opts.resume {
        (sched.step, sched.epoch) = resume_into(ck, ModelKind::Homography, &network, net.params_mut(), &mut adam)?;
    }
    let mut sink = MetricsSink::open(opts.metrics.as_ref())?;
    let mut log = Vec::new();
    let mut skipped = 0;
    let mut early = EarlyStop { best: f64::INFINITY, stale: 0 };
    let levels = net.config().pyramid_levels;
    let weights = &cfg.level_weights[..levels];

    while sched.epoch < cfg.epochs() && !sched.out_of_steps() {
        let (mut epoch_loss, mut epoch_steps) = (0.0, 0usize);
        for chunk in sched.order().chunks(cfg.batch()) {
            if sched.out_of_steps() {
                break;
            }
            let batch = load_batch(source, chunk)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.set_stream(sched.step);
            let (r, t, gt) = homography_batch(&batch, cfg.net_size, cfg.brightness, &mut rng)?;

            let mut g = Graph::new();
            let p = g.bind(net.params(), true);
            let (rv, tv, gv) = (g.constant(r), g.constant(t), g.constant(gt));
            let out = match net.forward_var(&mut g, &p, rv, tv) {
                Ok(o) => o,
                Err(Error::DegenerateCorners { condition }) => {
                    warn!("step {}: degenerate intermediate homography (condition {condition:.2e}), batch skipped", sched.step);
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let loss = homography_loss_var(&mut g, &out.deltas, gv, weights, cfg.loss_norm);
            let terms = level_distances(&g, &out.deltas, gv, cfg.loss_norm);
            let loss_value = g.value(loss).item() as f64;
            let mut grads = g.backward(loss);
            let grads = grads.for_binding(&p);
            drop(g);
            let lr = optimizer_step(net.params_mut(), &mut adam, grads, cfg, sched.step);
            let rec = StepRecord { step: sched.step, epoch: sched.epoch, lr, loss: loss_value, terms };
            sink.push(&rec)?;
            log.push(rec);
            sched.step += 1;
            epoch_loss += loss_value;
            epoch_steps += 1;
        }
        sched.epoch += 1;
        if let Some(path) = &opts.checkpoint {
            write_checkpoint(path, ModelKind::Homography, network.clone(), cfg.net_size, net.params(), &adam, &sched, opts.synthesis.clone())?;
        }
        if epoch_steps > 0 {
            let mean = epoch_loss / epoch_steps as f64;
            info!("epoch {} step {} mean loss {mean:.4}", sched.epoch, sched.step);
            if early.update(mean, cfg.early_stop_patience) {
                info!("early stop after epoch {}", sched.epoch);
                break;
            }
        }
    }
    Ok(Trained { model: net, log, skipped })
}

/// Warped inputs `[n, 3, h, w]`, labels `[n, 3, h, w]` and label edges `[n, 1, h, w]`.
fn deformation_batch(
    batch: &[StitchQuadruple],
    align: Alignment,
    homography: Option<&HomographyNet<f32>>,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let mut refs = Vec::new();
    let mut tgts = Vec::new();
    let mut labels = Vec::new();
    let canvas = batch[0].canvas;
    for q in batch {
        if (q.canvas.width, q.canvas.height) != (canvas.width, canvas.height) {
            return Err(Error::ShapeMismatch("records in one batch must share a canvas size".into()));
        }
        let h = match (align, homography) {
            (Alignment::GroundTruth, _) => offsets_to_homography(&q.offsets, q.reference.width(), q.reference.height())?,
            (Alignment::Predicted, Some(net)) => infer_homography(&q.reference, &q.target, net)?.homography,
            (Alignment::Predicted, None) => {
                return Err(Error::InvalidConfig("predicted alignment needs a trained homography network".into()))
            }
        };
        let pair = warp_pair(&q.reference, &q.target, &h, &q.canvas)?;
        refs.push(pair.warped_reference.to_tensor());
        tgts.push(pair.warped_target.to_tensor());
        labels.push(q.label.to_rgb().to_tensor());
    }
    let labels = Tensor::stack(&labels);
    let mut g = Graph::new();
    let l = g.constant(labels.clone());
    let gray = luma_var(&mut g, l);
    let edges = edges_tensor(g.value(gray));
    Ok((Tensor::stack(&refs), Tensor::stack(&tgts), labels, edges))
}

/// Trains the deformation network with the homography network frozen.
///
/// Without the edge branch the edge term compares the edge map of the
/// output image with the label's.
pub fn train_deformation(
    source: &dyn QuadrupleSource,
    cfg: &TrainConfig,
    homography: Option<&HomographyNet<f32>>,
    opts: &RunOptions,
) -> Result<Trained<DeformationNet<f32>>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    let extractor = cfg.perceptual_extractor()?;
    let net_cfg = cfg.deformation_net_config();
    let network = serde_json::to_value(&net_cfg)?;
    let mut net = DeformationNet::<f32>::new(net_cfg)?;
    let mut adam = Adam::new(net.params());
    let mut sched = Schedule { cfg, len: source.len(), step: 0, epoch: 0 };
    if let Some(ck) = &opts.resume {
        (sched.step, sched.epoch) = resume_into(ck, ModelKind::Deformation, &network, net.params_mut(), &mut adam)?;
    }
    let mut sink = MetricsSink::open(opts.metrics.as_ref())?;
    let mut log = Vec::new();
    let mut skipped = 0;
    let mut early = EarlyStop { best: f64::INFINITY, stale: 0 };

    while sched.epoch < cfg.epochs() && !sched.out_of_steps() {
        let (mut epoch_loss, mut epoch_steps) = (0.0, 0usize);
        for chunk in sched.order().chunks(cfg.batch()) {
            if sched.out_of_steps() {
                break;
            }
            let batch = load_batch(source, chunk)?;
            let (a, b, label, label_edges) = match deformation_batch(&batch, cfg.align_with, homography) {
                Ok(t) => t,
                Err(Error::DegenerateCorners { condition }) => {
                    warn!("step {}: degenerate homography (condition {condition:.2e}), batch skipped", sched.step);
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut g = Graph::new();
            let p = g.bind(net.params(), true);
            let (av, bv) = (g.constant(a), g.constant(b));
            let (lv, ev) = (g.constant(label), g.constant(label_edges));
            let out = net.forward_var(&mut g, &p, av, bv)?;
            let predicted_edges = match out.edges {
                Some(e) => e,
                None => {
                    let gray = luma_var(&mut g, out.image);
                    edges_var(&mut g, gray)
                }
            };
            let edge = edge_loss_var(&mut g, predicted_edges, ev);
            let content = content_loss_var(&mut g, &extractor as &dyn PerceptualExtractor<f32>, out.image, lv);
            let we = g.scale(edge, cfg.lambda_edge as f32);
            let wc = g.scale(content, cfg.lambda_content as f32);
            let loss = g.add(we, wc);
            let terms = vec![g.value(edge).item() as f64, g.value(content).item() as f64];
            let loss_value = g.value(loss).item() as f64;
            let mut grads = g.backward(loss);
            let grads = grads.for_binding(&p);
            drop(g);
            let lr = optimizer_step(net.params_mut(), &mut adam, grads, cfg, sched.step);
            let rec = StepRecord { step: sched.step, epoch: sched.epoch, lr, loss: loss_value, terms };
            sink.push(&rec)?;
            log.push(rec);
            sched.step += 1;
            epoch_loss += loss_value;
            epoch_steps += 1;
        }
        sched.epoch += 1;
        if let Some(path) = &opts.checkpoint {
            write_checkpoint(path, ModelKind::Deformation, network.clone(), cfg.net_size, net.params(), &adam, &sched, opts.synthesis.clone())?;
        }
        if epoch_steps > 0 {
            let mean = epoch_loss / epoch_steps as f64;
            info!("epoch {} step {} mean loss {mean:.4}", sched.epoch, sched.step);
            if early.update(mean, cfg.early_stop_patience) {
                info!("early stop after epoch {}", sched.epoch);
                break;
            }
        }
    }
    Ok(Trained { model: net, log, skipped })
}
