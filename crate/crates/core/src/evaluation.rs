//! Corner-offset error metrics, percentile-split reports and image fidelity.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stitchforge_tensor::exec;

use crate::dataset::{QuadrupleSource, StitchQuadruple};
use crate::error::{Error, Result};
use crate::geometry::{CornerOffsets, Point2};
use crate::homography_net::{infer_homography, HomographyNet};
use crate::image::ImagePlane;

/// Root mean square over the eight offset coordinates.
pub fn rmse_4pt(pred: &CornerOffsets, gt: &CornerOffsets) -> f64 {
    let (p, g) = (pred.to_flat(), gt.to_flat());
    (p.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 8.0).sqrt()
}

/// Means of the best 30%, the next 30% and the worst 40% of a set of errors.
/// Empty splits are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub count: usize,
    pub top_30: Option<f64>,
    pub mid_30: Option<f64>,
    pub bottom_40: Option<f64>,
    pub overall: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Sorts ascending and splits at `floor(0.3 n)` and `floor(0.6 n)`.
pub fn split_report(errors: &[f64]) -> SplitReport {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let a = (3 * n) / 10;
    let b = (6 * n) / 10;
    SplitReport {
        count: n,
        top_30: mean(&sorted[..a]),
        mid_30: mean(&sorted[a..b]),
        bottom_40: mean(&sorted[b..]),
        overall: mean(&sorted),
    }
}

/// Area of `quad ∩ [0, w] x [0, h]` over `w h`. Corners come in TL, TR, BL, BR order.
pub fn overlap_rate(quad: &[Point2; 4], w: f64, h: f64) -> f64 {
    let mut poly = vec![quad[0], quad[1], quad[3], quad[2]];
    // Sutherland-Hodgman against each rectangle edge: keep points with f(p) >= 0.
    let edges: [&dyn Fn(Point2) -> f64; 4] = [&|p| p.u, &|p| w - p.u, &|p| p.v, &|p| h - p.v];
    for f in edges {
        let mut out = Vec::new();
        for i in 0..poly.len() {
            let (cur, next) = (poly[i], poly[(i + 1) % poly.len()]);
            let (fc, fn_) = (f(cur), f(next));
            if fc >= 0.0 {
                out.push(cur);
            }
            if (fc >= 0.0) != (fn_ >= 0.0) {
                let t = fc / (fc - fn_);
                out.push(Point2::new(cur.u + t * (next.u - cur.u), cur.v + t * (next.v - cur.v)));
            }
        }
        poly = out;
        if poly.is_empty() {
            return 0.0;
        }
    }
    let mut area = 0.0;
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        area += p.u * q.v - q.u * p.v;
    }
    (area.abs() / 2.0) / (w * h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub index: usize,
    pub rmse: f64,
    pub identity_rmse: f64,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_rmse: Option<f64>,
    pub mean_identity_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleResult>,
    pub splits: SplitReport,
    pub identity: SplitReport,
    pub overlap_buckets: Vec<OverlapBucket>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Plain-text table of both split reports.
    pub fn render_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "—".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>10} {:>10}", "", "0-30%", "30-60%", "60-100%", "average");
        for (name, r) in [("identity", &self.identity), ("model", &self.splits)] {
            let _ = writeln!(
                s,
                "{:<10} {:>10} {:>10} {:>10} {:>10}",
                name,
                cell(r.top_30),
                cell(r.mid_30),
                cell(r.bottom_40),
                cell(r.overall)
            );
        }
        let _ = writeln!(s, "samples: {}", self.splits.count);
        s
    }

    /// Mean RMSE against overlap rate for the model and the identity baseline.
    pub fn overlap_curve_svg(&self) -> String {
        let (w, h, m) = (480.0, 320.0, 40.0);
        let ymax = self
            .overlap_buckets
            .iter()
            .flat_map(|b| [b.mean_rmse, b.mean_identity_rmse])
            .flatten()
            .fold(1e-9, f64::max);
        let x = |v: f64| m + v * (w - 2.0 * m);
        let y = |v: f64| h - m - v / ymax * (h - 2.0 * m);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
            h - m,
            w - m
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">overlap rate</text>"#, w / 2.0, h - 8.0);
        let _ = writeln!(s, r#"<text x="6" y="{}">RMSE (max {ymax:.2})</text>"#, m - 12.0);
        for (pick, colour) in [(0usize, "#c0392b"), (1, "#7f8c8d")] {
            let pts: Vec<String> = self
                .overlap_buckets
                .iter()
                .filter_map(|b| {
                    let v = if pick == 0 { b.mean_rmse } else { b.mean_identity_rmse };
                    v.map(|v| format!("{:.1},{:.1}", x((b.lo + b.hi) / 2.0), y(v)))
                })
                .collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, pts.join(" "));
        }
        let _ = writeln!(s, r##"<text x="{}" y="{m}" fill="#c0392b">model</text>"##, w - m - 60.0);
        let _ = writeln!(s, r##"<text x="{}" y="{}" fill="#7f8c8d">identity</text>"##, w - m - 60.0, m + 14.0);
        s.push_str("</svg>\n");
        s
    }
}

/// Scores `predict` on every record of `source`, bucketing by overlap rate
/// into `buckets` equal bins over `[0, 1]` (no bucketing when zero).
pub fn evaluate_with(
    source: &dyn QuadrupleSource,
    buckets: usize,
    predict: impl Fn(&StitchQuadruple) -> Result<CornerOffsets> + Sync,
) -> Result<EvalReport> {
    if source.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    let samples: Vec<SampleResult> = exec::map_range(source.len(), |i| -> Result<SampleResult> {
        let q = source.get(i)?;
        let pred = predict(&q)?;
        let (pw, ph) = (q.reference.width() as f64, q.reference.height() as f64);
        Ok(SampleResult {
            index: i,
            rmse: rmse_4pt(&pred, &q.offsets),
            identity_rmse: rmse_4pt(&CornerOffsets::zeros(), &q.offsets),
            overlap: overlap_rate(&q.offsets.displaced(pw, ph), pw, ph),
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let rmse: Vec<f64> = samples.iter().map(|s| s.rmse).collect();
    let ident: Vec<f64> = samples.iter().map(|s| s.identity_rmse).collect();
    let overlap_buckets = (0..buckets)
        .map(|k| {
            let lo = k as f64 / buckets as f64;
            let hi = (k + 1) as f64 / buckets as f64;
            let inside: Vec<&SampleResult> = samples
                .iter()
                .filter(|s| s.overlap >= lo && (s.overlap < hi || (k + 1 == buckets && s.overlap <= hi)))
                .collect();
            OverlapBucket {
                lo,
                hi,
                count: inside.len(),
                mean_rmse: mean(&inside.iter().map(|s| s.rmse).collect::<Vec<_>>()),
                mean_identity_rmse: mean(&inside.iter().map(|s| s.identity_rmse).collect::<Vec<_>>()),
            }
        })
        .collect();
    Ok(EvalReport { splits: split_report(&rmse), identity: split_report(&ident), samples, overlap_buckets })
}

/// Evaluates a homography network at each record's own resolution.
pub fn evaluate_model(net: &HomographyNet<f32>, source: &dyn QuadrupleSource, buckets: usize) -> Result<EvalReport> {
    evaluate_with(source, buckets, |q| Ok(infer_homography(&q.reference, &q.target, net)?.offsets))
}

/// PSNR cap for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR and SSIM (11x11 Gaussian window, sigma 1.5) over the pixels where
/// `label` is non-zero in any channel; the whole image when it is all zero.
pub fn image_fidelity(pred: &ImagePlane, label: &ImagePlane) -> Result<Fidelity> {
    if !pred.same_shape(label) {
        return Err(Error::ShapeMismatch("prediction and label sizes differ".into()));
    }
    let (w, h, c) = (label.width(), label.height(), label.channels());
    let mut mask: Vec<bool> = (0..w * h).map(|i| (0..c).any(|k| label.data()[i * c + k] != 0.0)).collect();
    if !mask.contains(&true) {
        mask.fill(true);
    }
    let count = mask.iter().filter(|m| **m).count();

    let mut se = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for k in 0..c {
            let d = (pred.data()[i * c + k] - label.data()[i * c + k]) as f64;
            se += d * d;
        }
    }
    let mse = se / (count * c) as f64;
    let psnr = if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) };

    let kernel: Vec<f64> = (-5i64..=5).map(|d| (-(d * d) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let ssim_sum: f64 = exec::map_range(h, |y| {
        let mut acc = 0.0;
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for k in 0..c {
                let (mut sw, mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5i64..=5 {
                    let yy = y as i64 + dy;
                    if yy < 0 || yy >= h as i64 {
                        continue;
                    }
                    for dx in -5i64..=5 {
                        let xx = x as i64 + dx;
                        if xx < 0 || xx >= w as i64 {
                            continue;
                        }
                        let wt = kernel[(dy + 5) as usize] * kernel[(dx + 5) as usize];
                        let j = (yy as usize * w + xx as usize) * c + k;
                        let (a, b) = (pred.data()[j] as f64, label.data()[j] as f64);
                        sw += wt;
                        ma += wt * a;
                        mb += wt * b;
                        aa += wt * a * a;
                        bb += wt * b * b;
                        ab += wt * a * b;
                    }
                }
                let (ma, mb) = (ma / sw, mb / sw);
                let va = aa / sw - ma * ma;
                let vb = bb / sw - mb * mb;
                let cov = ab / sw - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        acc
    })
    .into_iter()
    .sum();
    Ok(Fidelity { psnr, ssim: ssim_sum / (count * c) as f64 })
}
