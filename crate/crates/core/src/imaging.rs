//! 8-bit RGB images, binary masks and PNG glue.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed PNG: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("{path}: PNG encoding failed: {detail}")]
    Encode { path: PathBuf, detail: String },
}

/// Interleaved (HWC) 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height * 3).then_some(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-major floats in `[0, 1]`.
    pub fn to_planar_f32(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c] as f32 / 255.0;
            }
        }
        out
    }

    /// Inverse of [`Image::to_planar_f32`]; values are clamped and rounded
    /// half-to-even.
    pub fn from_planar_f32(width: usize, height: usize, planes: &[f32]) -> Self {
        let hw = width * height;
        assert_eq!(planes.len(), 3 * hw, "planar buffer size");
        let mut img = Self::new(width, height);
        for p in 0..hw {
            for c in 0..3 {
                img.data[p * 3 + c] = quantize(planes[c * hw + p]);
            }
        }
        img
    }

    /// Axis-aligned crop; panics when the rectangle leaves the image.
    pub fn crop(&self, rect: Rect) -> Image {
        assert!(rect.x + rect.w <= self.width && rect.y + rect.h <= self.height, "crop out of bounds");
        let mut out = Image::new(rect.w, rect.h);
        for y in 0..rect.h {
            let src = ((rect.y + y) * self.width + rect.x) * 3;
            out.data[y * rect.w * 3..(y + 1) * rect.w * 3].copy_from_slice(&self.data[src..src + rect.w * 3]);
        }
        out
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        let planes = self.to_planar_f32();
        let out = resize_planes_bilinear(&planes, 3, self.width, self.height, width, height);
        Image::from_planar_f32(width, height, &out)
    }

    /// Luma used for gradient statistics.
    pub fn luma(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.get(x, y);
        (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Bilinear resize of `channels` stacked planes (half-pixel centres, edge clamp).
pub fn resize_planes_bilinear(
    planes: &[f32],
    channels: usize,
    w: usize,
    h: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f32> {
    let mut out = vec![0.0; channels * out_w * out_h];
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let taps = |o: usize, scale: f64, n: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (src - i0 as f64).min(1.0))
    };
    for oy in 0..out_h {
        let (y0, y1, fy) = taps(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = taps(ox, sx, w);
            for c in 0..channels {
                let p = &planes[c * w * h..(c + 1) * w * h];
                let top = p[y0 * w + x0] as f64 * (1.0 - fx) + p[y0 * w + x1] as f64 * fx;
                let bot = p[y1 * w + x0] as f64 * (1.0 - fx) + p[y1 * w + x1] as f64 * fx;
                out[c * out_w * out_h + oy * out_w + ox] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

/// Binary per-pixel mask (`true` = defect).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width * height).then_some(Self { width, height, bits })
    }

    pub fn from_rect(width: usize, height: usize, rect: Rect) -> Self {
        let mut m = Self::empty(width, height);
        m.fill_rect(rect);
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn fill_rect(&mut self, r: Rect) {
        for y in r.y..(r.y + r.h).min(self.height) {
            for x in r.x..(r.x + r.w).min(self.width) {
                self.set(x, y, true);
            }
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Mask { bits, ..*self }
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Mask { bits, ..*self }
    }

    /// 3x3 dilation; out-of-image neighbours are ignored.
    pub fn dilate(&self) -> Mask {
        self.morph(true)
    }

    /// 3x3 erosion; out-of-image neighbours are ignored.
    pub fn erode(&self) -> Mask {
        self.morph(false)
    }

    /// Dilation followed by erosion on a zero-padded canvas, so the result
    /// never grows into the image border.
    pub fn close(&self) -> Mask {
        let (w, h) = (self.width, self.height);
        let mut padded = Mask::empty(w + 2, h + 2);
        for y in 0..h {
            for x in 0..w {
                padded.set(x + 1, y + 1, self.get(x, y));
            }
        }
        let closed = padded.dilate().erode();
        let mut out = Mask::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, closed.get(x + 1, y + 1));
            }
        }
        out
    }

    fn morph(&self, dilate: bool) -> Mask {
        let (w, h) = (self.width, self.height);
        let mut out = Mask::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = !dilate;
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let b = self.get(nx, ny);
                        acc = if dilate { acc || b } else { acc && b };
                    }
                }
                out.set(x, y, acc);
            }
        }
        out
    }
}

/// Decoded PNG plus what the codec had to do to produce 8-bit RGB.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub image: Image,
    pub downconverted_16bit: bool,
    pub promoted_gray: bool,
    pub dropped_alpha: bool,
}

pub fn decode_png(path: &Path) -> Result<Decoded, CodecError> {
    let file = File::open(path).map_err(|source| CodecError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let decode_err = |detail: String| CodecError::Decode {
        path: path.to_path_buf(),
        detail,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let samples = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(decode_err("palette was not expanded".into())),
    };
    let sixteen = info.bit_depth == png::BitDepth::Sixteen;
    let bytes_per_sample = if sixteen { 2 } else { 1 };
    if buf.len() < w * h * samples * bytes_per_sample {
        return Err(decode_err("short pixel buffer".into()));
    }
    if sixteen {
        log::warn!("{}: 16-bit PNG downconverted to 8 bits", path.display());
    }
    let sample = |i: usize| -> u8 {
        if sixteen {
            // big-endian; keep the high byte
            buf[i * 2]
        } else {
            buf[i]
        }
    };
    let mut image = Image::new(w, h);
    for p in 0..w * h {
        let base = p * samples;
        let rgb = match samples {
            1 | 2 => {
                let g = sample(base);
                [g, g, g]
            }
            _ => [sample(base), sample(base + 1), sample(base + 2)],
        };
        image.put(p % w, p / w, rgb);
    }
    Ok(Decoded {
        image,
        downconverted_16bit: sixteen,
        promoted_gray: samples <= 2,
        dropped_alpha: samples == 2 || samples == 4,
    })
}

pub fn read_image(path: &Path) -> Result<Image, CodecError> {
    decode_png(path).map(|d| d.image)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<(), CodecError> {
    let file = File::create(path).map_err(|source| CodecError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let enc_err = |e: png::EncodingError| CodecError::Encode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer.write_image_data(data).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

pub fn encode_png(image: &Image, path: &Path) -> Result<(), CodecError> {
    write_png(path, image.width, image.height, png::ColorType::Rgb, &image.data)
}

/// Masks are stored as 8-bit grayscale, 255 = defect.
pub fn encode_mask_png(mask: &Mask, path: &Path) -> Result<(), CodecError> {
    let data: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, mask.width, mask.height, png::ColorType::Grayscale, &data)
}

/// Any pixel brighter than mid-gray in any channel counts as defect.
pub fn decode_mask_png(path: &Path) -> Result<Mask, CodecError> {
    let img = read_image(path)?;
    let bits = img.data.chunks_exact(3).map(|px| px.iter().any(|&v| v > 127)).collect();
    Ok(Mask {
        width: img.width,
        height: img.height,
        bits,
    })
}
