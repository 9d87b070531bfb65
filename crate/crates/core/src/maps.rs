//! Row-major scalar maps and planar RGB images.

use sweepfuse_tensor::{Element, Tensor};

use crate::error::{Error, Result};

/// Single-channel `f32` map, row-major, top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Map {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::contract(format!(
                "map of {width}×{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_extent(&self, other: &Map) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear sample at a continuous pixel position. Returns `None` outside
    /// `[0, w−1]×[0, h−1]` or when any contributing tap is not positive
    /// (positive values mark valid depths).
    pub fn sample_positive(&self, x: f64, y: f64) -> Option<f64> {
        let taps = bilinear_taps(x, y, self.width, self.height)?;
        let mut acc = 0.0;
        for (idx, w) in taps {
            if w == 0.0 {
                continue;
            }
            let v = self.data[idx] as f64;
            if !(v > 0.0) {
                return None;
            }
            acc += w * v;
        }
        Some(acc)
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![self.height, self.width], |i| T::lit(self.data[i] as f64))
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [h, w] => Self::new(w, h, t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => Err(Error::contract(format!("expected a 2D tensor, got shape {:?}", t.shape()))),
        }
    }

    /// Area-average resampling by `scale` (output pixel `x` covers source
    /// interval `[x/scale, (x+1)/scale)`), cropped to `width × height`.
    pub fn area_resample(&self, scale: f64, width: usize, height: usize) -> Result<Map> {
        let out = area_resample(&self.data, 1, self.width, self.height, scale, width, height)?;
        Map::new(width, height, out)
    }
}

/// Three-channel planar image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `[3, height, width]`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::contract(format!(
                "image of {width}×{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![3, self.height, self.width], |i| T::lit(self.data[i] as f64))
    }

    /// Per-channel standardization to zero mean and unit variance. Constant
    /// channels map to zero.
    pub fn standardized<T: Element>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..3 {
            let ch = &self.data[c * plane..(c + 1) * plane];
            let n = plane.max(1) as f64;
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
            out.extend(ch.iter().map(|&v| T::lit((v as f64 - mean) * inv)));
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("shape matches data")
    }

    pub fn area_resample(&self, scale: f64, width: usize, height: usize) -> Result<Image> {
        let out = area_resample(&self.data, 3, self.width, self.height, scale, width, height)?;
        Image::new(width, height, out)
    }
}

/// Four bilinear taps `(flat index, weight)` for a position inside
/// `[0, w−1]×[0, h−1]`. Coordinates within 1e-9 of an integer snap to it so
/// that exact pixel positions reproduce pixel values exactly.
pub(crate) fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> Option<[(usize, f64); 4]> {
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let (x, y) = (snap(x), snap(y));
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Some([
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ])
}

/// One axis of an area-average resampler: for each output cell, the source
/// cells it overlaps and their normalized overlap weights.
fn area_weights(src: usize, dst: usize, scale: f64) -> Result<Vec<Vec<(usize, f64)>>> {
    let span = 1.0 / scale;
    if dst as f64 * span > src as f64 + 1e-9 {
        return Err(Error::config(format!("cannot resample {src} cells to {dst} at scale {scale}")));
    }
    Ok((0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * span, (o + 1) as f64 * span);
            let first = lo.floor() as usize;
            let last = ((hi - 1e-12).ceil() as usize).min(src);
            let mut taps: Vec<(usize, f64)> = (first..last)
                .map(|s| (s, (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0)))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect())
}

fn area_resample(
    data: &[f32],
    channels: usize,
    w: usize,
    h: usize,
    scale: f64,
    out_w: usize,
    out_h: usize,
) -> Result<Vec<f32>> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::config(format!("area resampling needs 0 < scale ≤ 1, got {scale}")));
    }
    let wx = area_weights(w, out_w, scale)?;
    let wy = area_weights(h, out_h, scale)?;
    let mut out = Vec::with_capacity(channels * out_w * out_h);
    for c in 0..channels {
        let plane = &data[c * w * h..(c + 1) * w * h];
        for ty in &wy {
            for tx in &wx {
                let mut acc = 0.0f64;
                for &(sy, a) in ty {
                    for &(sx, b) in tx {
                        acc += a * b * plane[sy * w + sx] as f64;
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    Ok(out)
}
