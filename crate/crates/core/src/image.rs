//! Interleaved (HWC) float images with values in `[0, 1]`.

use std::path::Path;

use stitchforge_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Luma weights used for grayscale conversion.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        let mut img = Self::zeros(width, height, channels);
        img.data.fill(value.clamp(0.0, 1.0));
        img
    }

    /// Validating constructor over interleaved pixels.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("dimensions {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut img = Self::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c).clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn to_gray(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(3)
            .map(|p| (LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).clamp(0.0, 1.0))
            .collect();
        Self {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        Self {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![T::zero(); w * h * c];
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    out[(k * h + y) * w + x] = T::lit(self.data[(y * w + x) * c + k] as f64);
                }
            }
        }
        Tensor::from_vec(&[1, c, h, w], out)
    }

    /// Reads sample `index` of an NCHW tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if index >= n || (c != 1 && c != 3) || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!("cannot read image {index} of {:?}", t.shape())));
        }
        let base = index * c * h * w;
        let src = t.data();
        let mut img = Self::zeros(w, h, c);
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    let v = src[base + (k * h + y) * w + x].as_f64() as f32;
                    img.data[(y * w + x) * c + k] = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                }
            }
        }
        Ok(img)
    }

    /// Bilinear sample with zero outside the image.
    pub fn sample(&self, x: f64, y: f64, c: usize) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let px = |xx: i64, yy: i64| -> f32 {
            if xx < 0 || yy < 0 || xx >= self.width as i64 || yy >= self.height as i64 {
                0.0
            } else {
                self.get(xx as usize, yy as usize, c)
            }
        };
        let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
        let bot = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Resamples to `width x height`. Output pixel `(x, y)` looks at source
    /// position `(x * W / width, y * H / height)`, averaging a box of the
    /// scale factor's size when shrinking.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Self::zeros(width, height, self.channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..self.channels {
                    out.data[(y * width + x) * self.channels + c] = self.sample_area(x as f64 * sx, y as f64 * sy, c, sx, sy);
                }
            }
        }
        out
    }

    /// Mean of bilinear samples over a `footprint_x x footprint_y` box centred
    /// on `(x, y)`, clamped to the image; a plain bilinear sample when the
    /// footprint is at most one pixel.
    pub fn sample_area(&self, x: f64, y: f64, c: usize, footprint_x: f64, footprint_y: f64) -> f32 {
        let mx = footprint_x.ceil().max(1.0) as usize;
        let my = footprint_y.ceil().max(1.0) as usize;
        let mut acc = 0.0f32;
        for j in 0..my {
            let oy = if my == 1 { 0.0 } else { ((j as f64 + 0.5) / my as f64 - 0.5) * footprint_y };
            for i in 0..mx {
                let ox = if mx == 1 { 0.0 } else { ((i as f64 + 0.5) / mx as f64 - 0.5) * footprint_x };
                let px = (x + ox).clamp(0.0, (self.width - 1) as f64);
                let py = (y + oy).clamp(0.0, (self.height - 1) as f64);
                acc += self.sample(px, py, c);
            }
        }
        (acc / (mx * my) as f32).clamp(0.0, 1.0)
    }

    /// Box blur with the given radius, clamping at the border.
    pub fn box_blur(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (w, h, ch) = (self.width, self.height, self.channels);
        let r = radius as i64;
        let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
            let mut dst = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..ch {
                        let mut acc = 0.0;
                        for k in -r..=r {
                            let (xx, yy) = if horizontal {
                                ((x as i64 + k).clamp(0, w as i64 - 1) as usize, y)
                            } else {
                                (x, (y as i64 + k).clamp(0, h as i64 - 1) as usize)
                            };
                            acc += src[(yy * w + xx) * ch + c];
                        }
                        dst[(y * w + x) * ch + c] = acc / (2 * r + 1) as f32;
                    }
                }
            }
            dst
        };
        let tmp = pass(&self.data, true);
        Self {
            width: w,
            height: h,
            channels: ch,
            data: pass(&tmp, false),
        }
    }

    /// Copy of the `width x height` window at `(x, y)`; pixels outside are 0.
    pub fn crop(&self, x: i64, y: i64, width: usize, height: usize) -> Self {
        let mut out = Self::zeros(width, height, self.channels);
        for yy in 0..height {
            for xx in 0..width {
                let (sx, sy) = (x + xx as i64, y + yy as i64);
                if sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height {
                    for c in 0..self.channels {
                        out.data[(yy * width + xx) * self.channels + c] = self.get(sx as usize, sy as usize, c);
                    }
                }
            }
        }
        out
    }

    /// Loads an 8-bit file. Grayscale files stay single-channel; everything
    /// else becomes RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        if !img.color().has_color() && !img.color().has_alpha() {
            let gray = img.to_luma8();
            let (w, h) = gray.dimensions();
            let data = gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            return Self::from_vec(w as usize, h as usize, 1, data);
        }
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::from_vec(w as usize, h as usize, 3, data)
    }

    /// 8-bit quantized pixels, rounded to nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Writes an 8-bit file; the format follows the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path.as_ref(), &self.to_u8(), self.width as u32, self.height as u32, color)?;
        Ok(())
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImagePlane::from_vec(1, 1, 1, vec![1.5]).is_err());
        assert!(ImagePlane::from_vec(2, 1, 1, vec![0.5]).is_err());
        assert!(ImagePlane::from_vec(1, 1, 2, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = ImagePlane::from_fn(5, 4, 3, |x, y, c| (x + 2 * y + c) as f32 / 20.0);
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[1, 3, 4, 5]);
        assert_eq!(ImagePlane::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImagePlane::from_fn(8, 6, 1, |x, y, _| (x * y) as f32 / 40.0);
        assert_eq!(img.resize(8, 6), img);
        let flat = ImagePlane::filled(64, 48, 3, 0.25);
        let small = flat.resize(16, 12);
        assert!(small.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn gray_uses_luma() {
        let img = ImagePlane::from_vec(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((img.to_gray().get(0, 0, 0) - 0.299).abs() < 1e-7);
    }
}
