//! Training quadruples synthesized from an arbitrary image corpus.
//!
//! A patch is cut from a source image as the reference. Its four corners are
//! displaced by a shared random translation plus independent per-vertex
//! perturbations; the target is the source seen through that displacement,
//! cut at the same location. The label is the source content covering the
//! union of the reference patch and the displaced quadrilateral, laid out on
//! a canvas that fits the largest possible displacement.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stitchforge_tensor::exec;

use crate::error::{Error, Result};
use crate::geometry::{compute_canvas, offsets_to_homography, rescale_offsets, CanvasSpec, CornerOffsets, Point2};
use crate::image::ImagePlane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Source side over patch side.
    pub patch_ratio: f64,
    /// Largest translation as a fraction of the patch side.
    pub tau_frac: f64,
    /// Largest per-vertex perturbation as a fraction of the patch side.
    pub rho_frac: f64,
    /// Network-side patch size `(width, height)`.
    pub patch_out: (usize, usize),
    pub translation_enabled: bool,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            patch_ratio: 2.4,
            tau_frac: 0.5,
            rho_frac: 0.2,
            patch_out: (128, 128),
            translation_enabled: true,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    /// Perturbation-only variant.
    pub fn warped(mut self) -> Self {
        self.translation_enabled = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.patch_ratio > 1.0) {
            return Err(Error::InvalidConfig(format!("patch_ratio {} must exceed 1", self.patch_ratio)));
        }
        if !(self.tau_frac >= 0.0 && self.rho_frac >= 0.0 && self.tau_frac + self.rho_frac < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= tau_frac, rho_frac and tau_frac + rho_frac < 1, got {} and {}",
                self.tau_frac, self.rho_frac
            )));
        }
        if self.patch_out.0 == 0 || self.patch_out.1 == 0 {
            return Err(Error::InvalidConfig("patch_out must be positive".into()));
        }
        Ok(())
    }

    fn effective_tau(&self) -> f64 {
        if self.translation_enabled {
            self.tau_frac
        } else {
            0.0
        }
    }

    /// Translation and perturbation bounds in network pixels, per axis.
    pub fn output_bounds(&self) -> ((f64, f64), (f64, f64)) {
        let (w, h) = (self.patch_out.0 as f64, self.patch_out.1 as f64);
        let t = self.effective_tau();
        ((t * w, t * h), (self.rho_frac * w, self.rho_frac * h))
    }

    /// Canvas shared by every record of this configuration.
    pub fn canvas(&self) -> CanvasSpec {
        let (tau, rho) = self.output_bounds();
        compute_canvas(self.patch_out.0, self.patch_out.1, tau, rho)
    }
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchQuadruple {
    pub reference: ImagePlane,
    pub target: ImagePlane,
    /// Ground-truth corner displacements in network pixels.
    pub offsets: CornerOffsets,
    pub label: ImagePlane,
    pub canvas: CanvasSpec,
}

fn inside_convex(quad: &[Point2; 4], u: f64, v: f64) -> bool {
    // Corner order TL, TR, BL, BR; walk it as a polygon.
    let poly = [quad[0], quad[1], quad[3], quad[2]];
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (a, b) = (poly[i], poly[(i + 1) % 4]);
        let cross = (b.u - a.u) * (v - a.v) - (b.v - a.v) * (u - a.u);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Draws one quadruple from `source`.
pub fn synthesize_quadruple<R: Rng>(source: &ImagePlane, cfg: &SynthesisConfig, rng: &mut R) -> Result<StitchQuadruple> {
    cfg.validate()?;
    let (sw, sh) = (source.width(), source.height());
    let pw = (sw as f64 / cfg.patch_ratio).floor() as usize;
    let ph = (sh as f64 / cfg.patch_ratio).floor() as usize;
    if pw < 2 || ph < 2 {
        return Err(Error::PatchOutOfBounds { width: sw, height: sh, detail: "source too small for a patch".into() });
    }
    let tau = cfg.effective_tau();
    let (tw, th) = (tau * pw as f64, tau * ph as f64);
    let (rw, rh) = (cfg.rho_frac * pw as f64, cfg.rho_frac * ph as f64);
    let shift = [sym(rng, tw), sym(rng, th)];
    let mut d = [[0.0; 2]; 4];
    for v in &mut d {
        v[0] = shift[0] + sym(rng, rw);
        v[1] = shift[1] + sym(rng, rh);
    }
    let offsets = CornerOffsets(d);
    let quad = offsets.displaced(pw as f64, ph as f64);

    // Patch position: the reference and the displaced quad stay inside.
    let lo_u = quad.iter().map(|p| -p.u).fold(0.0f64, f64::max).ceil();
    let lo_v = quad.iter().map(|p| -p.v).fold(0.0f64, f64::max).ceil();
    let hi_u = quad.iter().map(|p| (sw - 1) as f64 - p.u).fold((sw - pw) as f64, f64::min).floor();
    let hi_v = quad.iter().map(|p| (sh - 1) as f64 - p.v).fold((sh - ph) as f64, f64::min).floor();
    if lo_u > hi_u || lo_v > hi_v {
        return Err(Error::PatchOutOfBounds {
            width: sw,
            height: sh,
            detail: format!("offsets {:?} on a {pw}x{ph} patch", offsets.to_flat()),
        });
    }
    let px = rng.gen_range(lo_u as i64..=hi_u as i64);
    let py = rng.gen_range(lo_v as i64..=hi_v as i64);

    let h = offsets_to_homography(&offsets, pw, ph)?;
    let reference = source.crop(px, py, pw, ph);
    let mut target = ImagePlane::zeros(pw, ph, source.channels());
    for y in 0..ph {
        for x in 0..pw {
            let q = h.project(Point2::new(x as f64, y as f64));
            for c in 0..source.channels() {
                target.set(x, y, c, source.sample(px as f64 + q.u, py as f64 + q.v, c));
            }
        }
    }

    let (ow, oh) = cfg.patch_out;
    let (sx, sy) = (ow as f64 / pw as f64, oh as f64 / ph as f64);
    let reference = reference.resize(ow, oh);
    let target = target.resize(ow, oh);
    let offsets = rescale_offsets(&offsets, sx, sy)?;
    let canvas = cfg.canvas();
    let label = compose_label(source, (px as f64, py as f64), (sx, sy), &reference, &offsets, &canvas);
    Ok(StitchQuadruple { reference, target, offsets, label, canvas })
}

fn sym<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.gen_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Reference pixels verbatim inside the patch, source content inside the
/// displaced quad, zero elsewhere.
fn compose_label(
    source: &ImagePlane,
    patch_pos: (f64, f64),
    scale: (f64, f64),
    reference: &ImagePlane,
    offsets: &CornerOffsets,
    canvas: &CanvasSpec,
) -> ImagePlane {
    let (ow, oh) = (reference.width(), reference.height());
    let quad = offsets.displaced(ow as f64, oh as f64);
    let (fx, fy) = (1.0 / scale.0, 1.0 / scale.1);
    let (ox, oy) = (canvas.origin.u as i64, canvas.origin.v as i64);
    let mut label = ImagePlane::zeros(canvas.width, canvas.height, source.channels());
    for z1 in 0..canvas.height {
        for z0 in 0..canvas.width {
            let (y0, y1) = (z0 as i64 - ox, z1 as i64 - oy);
            if y0 >= 0 && y1 >= 0 && (y0 as usize) < ow && (y1 as usize) < oh {
                for c in 0..source.channels() {
                    label.set(z0, z1, c, reference.get(y0 as usize, y1 as usize, c));
                }
            } else if inside_convex(&quad, y0 as f64, y1 as f64) {
                let su = patch_pos.0 + y0 as f64 * fx;
                let sv = patch_pos.1 + y1 as f64 * fy;
                for c in 0..source.channels() {
                    label.set(z0, z1, c, source.sample_area(su, sv, c, fx, fy));
                }
            }
        }
    }
    label
}

/// Adds `shift` to every pixel and clips to `[0, 1]`.
pub fn brightness_augment(img: &ImagePlane, shift: f32) -> ImagePlane {
    let data = img.data().iter().map(|v| (v + shift).clamp(0.0, 1.0)).collect();
    ImagePlane::from_vec(img.width(), img.height(), img.channels(), data).expect("same shape")
}

/// Random generator for record `index` of a dataset seeded with `seed`.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Record `index` drawn from the corpus. Draws are retried on a fresh
/// stream position when a displacement leaves the source.
pub fn synthesize_record(corpus: &[ImagePlane], cfg: &SynthesisConfig, index: u64) -> Result<StitchQuadruple> {
    if corpus.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    let mut rng = record_rng(cfg.seed, index);
    let mut last = None;
    for _ in 0..16 {
        let src = &corpus[rng.gen_range(0..corpus.len())];
        match synthesize_quadruple(src, cfg, &mut rng) {
            Ok(q) => return Ok(q),
            Err(e @ Error::PatchOutOfBounds { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// `count` records, generated in parallel with per-record seeds.
pub fn synthesize_dataset(corpus: &[ImagePlane], cfg: &SynthesisConfig, count: usize) -> Result<Vec<StitchQuadruple>> {
    exec::map_range(count, |i| synthesize_record(corpus, cfg, i as u64)).into_iter().collect()
}

/// Smooth multi-scale texture with a few flat shapes, for tests and demos.
pub fn procedural_image(width: usize, height: usize, channels: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f32; width * height * channels];
    let mut amp = 0.5f32;
    let mut cell = (width.max(height) / 4).max(4) as f64;
    while cell >= 3.0 {
        let gw = (width as f64 / cell).ceil() as usize + 2;
        let gh = (height as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f32> = (0..gw * gh * channels).map(|_| rng.gen::<f32>()).collect();
        for y in 0..height {
            for x in 0..width {
                let (fx, fy) = (x as f64 / cell, y as f64 / cell);
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let smooth = |t: f64| (t * t * (3.0 - 2.0 * t)) as f32;
                let (tx, ty) = (smooth(fx.fract()), smooth(fy.fract()));
                for c in 0..channels {
                    let at = |i: usize, j: usize| lattice[(j * gw + i) * channels + c];
                    let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                    let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                    acc[(y * width + x) * channels + c] += amp * (top * (1.0 - ty) + bot * ty);
                }
            }
        }
        amp *= 0.55;
        cell /= 2.0;
    }
    let norm: f32 = {
        let (lo, hi) = acc.iter().fold((f32::MAX, f32::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
        if hi > lo {
            hi - lo
        } else {
            1.0
        }
    };
    let lo = acc.iter().copied().fold(f32::MAX, f32::min);
    let mut img = ImagePlane::from_vec(width, height, channels, acc.iter().map(|v| (v - lo) / norm).collect()).expect("normalized");
    for _ in 0..rng.gen_range(3..7) {
        let (cx, cy) = (rng.gen_range(0..width) as f64, rng.gen_range(0..height) as f64);
        let (rx, ry) = (rng.gen_range(0.05..0.2) * width as f64, rng.gen_range(0.05..0.2) * height as f64);
        let color: Vec<f32> = (0..channels).map(|_| rng.gen()).collect();
        let ellipse = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let hit = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if hit {
                    for (c, v) in color.iter().enumerate() {
                        let old = img.get(x, y, c);
                        img.set(x, y, c, 0.35 * old + 0.65 * v);
                    }
                }
            }
        }
    }
    img.box_blur(1)
}

/// Loads every decodable image under `dir` (non-recursive, sorted by name).
pub fn load_corpus(dir: &Path) -> Result<Vec<ImagePlane>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    paths.iter().map(ImagePlane::load).collect()
}

/// Anything that yields quadruples by index.
pub trait QuadrupleSource: Send + Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<StitchQuadruple>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl QuadrupleSource for Vec<StitchQuadruple> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<StitchQuadruple> {
        self.as_slice().get(index).cloned().ok_or(Error::DatasetEmpty)
    }
}

/// Generates record `i` on demand; memory stays bounded by the corpus.
pub struct SyntheticSource {
    corpus: Vec<ImagePlane>,
    config: SynthesisConfig,
    len: usize,
}

impl SyntheticSource {
    pub fn new(corpus: Vec<ImagePlane>, config: SynthesisConfig, len: usize) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        Ok(Self { corpus, config, len })
    }

    pub fn config(&self) -> &SynthesisConfig {
        &self.config
    }
}

impl QuadrupleSource for SyntheticSource {
    fn len(&self) -> usize {
        self.len
    }

    fn get(&self, index: usize) -> Result<StitchQuadruple> {
        synthesize_record(&self.corpus, &self.config, index as u64)
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub reference: String,
    pub target: String,
    pub label: String,
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    pub d5: f64,
    pub d6: f64,
    pub d7: f64,
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub origin_u: f64,
    pub origin_v: f64,
}

impl ManifestRecord {
    pub fn offsets(&self) -> CornerOffsets {
        CornerOffsets::from_flat([self.d0, self.d1, self.d2, self.d3, self.d4, self.d5, self.d6, self.d7])
    }

    pub fn canvas(&self) -> CanvasSpec {
        CanvasSpec {
            width: self.canvas_width,
            height: self.canvas_height,
            origin: Point2::new(self.origin_u, self.origin_v),
        }
    }
}

pub const MANIFEST: &str = "manifest";

/// Writes images under `dir/imgs` and the tab-separated manifest; returns
/// the manifest path.
pub fn write_dataset<'a>(records: impl IntoIterator<Item = &'a StitchQuadruple>, dir: &Path) -> Result<PathBuf> {
    let imgs = dir.join("imgs");
    fs::create_dir_all(&imgs)?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(&manifest).map_err(|e| csv_error(&manifest, e))?;
    let mut wrote_any = false;
    for (i, q) in records.into_iter().enumerate() {
        let id = format!("{i:06}");
        let rel = |kind: &str| format!("imgs/{id}_{kind}.png");
        q.reference.save(dir.join(rel("ref")))?;
        q.target.save(dir.join(rel("tgt")))?;
        q.label.save(dir.join(rel("label")))?;
        let d = q.offsets.to_flat();
        w.serialize(ManifestRecord {
            id: id.clone(),
            reference: rel("ref"),
            target: rel("tgt"),
            label: rel("label"),
            d0: d[0],
            d1: d[1],
            d2: d[2],
            d3: d[3],
            d4: d[4],
            d5: d[5],
            d6: d[6],
            d7: d[7],
            canvas_width: q.canvas.width,
            canvas_height: q.canvas.height,
            origin_u: q.canvas.origin.u,
            origin_v: q.canvas.origin.v,
        })
        .map_err(|e| csv_error(&manifest, e))?;
        wrote_any = true;
    }
    if !wrote_any {
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(&manifest, e))?;
    }
    w.flush()?;
    Ok(manifest)
}

const MANIFEST_HEADER: [&str; 16] = [
    "id", "reference", "target", "label", "d0", "d1", "d2", "d3", "d4", "d5", "d6", "d7", "canvas_width", "canvas_height",
    "origin_u", "origin_v",
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::CorruptManifest { path: path.to_path_buf(), detail: e.to_string() }
}

/// A dataset on disk; images load lazily.
#[derive(Debug, Clone)]
pub struct DiskDataset {
    dir: PathBuf,
    records: Vec<ManifestRecord>,
}

impl DiskDataset {
    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<StitchQuadruple>> + '_ {
        (0..self.records.len()).map(|i| self.get(i))
    }
}

/// Opens the manifest in `dir` and checks that every image exists.
pub fn read_dataset(dir: &Path) -> Result<DiskDataset> {
    let manifest = dir.join(MANIFEST);
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(&manifest).map_err(|e| csv_error(&manifest, e))?;
    let mut records = Vec::new();
    for row in r.deserialize::<ManifestRecord>() {
        let rec = row.map_err(|e| csv_error(&manifest, e))?;
        if !rec.offsets().is_finite() {
            return Err(Error::CorruptManifest { path: manifest.clone(), detail: format!("record {}: non-finite offsets", rec.id) });
        }
        for p in [&rec.reference, &rec.target, &rec.label] {
            let path = dir.join(p);
            if !path.is_file() {
                return Err(Error::MissingImage { record: rec.id.clone(), path });
            }
        }
        records.push(rec);
    }
    Ok(DiskDataset { dir: dir.to_path_buf(), records })
}

impl QuadrupleSource for DiskDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn get(&self, index: usize) -> Result<StitchQuadruple> {
        let rec = self.records.get(index).ok_or(Error::DatasetEmpty)?;
        let load = |rel: &str| {
            let path = self.dir.join(rel);
            if !path.is_file() {
                return Err(Error::MissingImage { record: rec.id.clone(), path });
            }
            ImagePlane::load(path)
        };
        Ok(StitchQuadruple {
            reference: load(&rec.reference)?,
            target: load(&rec.target)?,
            offsets: rec.offsets(),
            label: load(&rec.label)?,
            canvas: rec.canvas(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brightness_examples() {
        let img = ImagePlane::filled(4, 4, 1, 0.5);
        assert_eq!(brightness_augment(&img, 0.0), img);
        assert!(brightness_augment(&img, 0.2).data().iter().all(|v| (v - 0.7).abs() < 1e-6));
        assert!(brightness_augment(&img, -0.8).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn paper_canvas_for_default_config() {
        let c = SynthesisConfig::default().canvas();
        assert_eq!((c.width, c.height, c.origin.u), (312, 312, 92.0));
    }

    #[test]
    fn rejects_bad_fractions() {
        let cfg = SynthesisConfig { tau_frac: 0.6, rho_frac: 0.5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn quad_membership() {
        let quad = CornerOffsets::zeros().displaced(10.0, 10.0);
        assert!(inside_convex(&quad, 5.0, 5.0));
        assert!(inside_convex(&quad, 0.0, 0.0));
        assert!(!inside_convex(&quad, 11.0, 5.0));
    }
}
