//! Image loading and resolution policies.
//!
//! `square`: pad the short side symmetrically, bilinear-resize to `R x R`,
//! center-crop (a no-op after an exact resize), normalize.
//! `short_side`: scale so the short side becomes `R`, then center-crop both
//! sides down to multiples of the encoder factor `D`, normalize.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

/// 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRGB {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image needs {} bytes, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(ImageRGB { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(3 * width * height).collect();
        ImageRGB { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Parse a binary PPM (P6, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRGB> {
    let mut r = HeaderReader { bytes, pos: 0 };
    if bytes.get(..2) != Some(b"P6".as_slice()) {
        return Err(r.fail("not a binary PPM: expected magic P6"));
    }
    r.pos = 2;
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(r.fail(format!("maxval {maxval} unsupported (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(r.fail("zero image dimension"));
    }
    if !bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(r.fail("expected whitespace after maxval"));
    }
    r.pos += 1;
    let need = 3 * width * height;
    let payload = &bytes[r.pos..];
    if payload.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("truncated payload: need {need} bytes after offset {}, have {}", r.pos, payload.len()),
        });
    }
    ImageRGB::new(width, height, payload[..need].to_vec())
}

pub fn encode_ppm(img: &ImageRGB) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn save_ppm(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Float planar image `[3][h][w]` in 0..255 units.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Planes {
    pub fn from_rgb(img: &ImageRGB) -> Self {
        let n = img.width * img.height;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = f32::from(px[c]);
            }
        }
        Planes {
            width: img.width,
            height: img.height,
            data,
        }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Place on a `width x height` canvas at `(x0, y0)`, filling the rest.
    pub fn pad(&self, width: usize, height: usize, x0: usize, y0: usize, fill: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for (c, &f) in fill.iter().enumerate() {
            for y in 0..height {
                for x in 0..width {
                    let inside = (y0..y0 + self.height).contains(&y) && (x0..x0 + self.width).contains(&x);
                    data.push(if inside { self.at(c, y - y0, x - x0) } else { f });
                }
            }
        }
        Planes { width, height, data }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in y0..y0 + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
            }
        }
        Planes { width, height, data }
    }

    pub fn center_crop(&self, width: usize, height: usize) -> Self {
        self.crop((self.width - width) / 2, (self.height - height) / 2, width, height)
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(inp - 1);
                    (i0, i1, (src - i0 as f64) as f32)
                })
                .collect()
        };
        let xs = taps(width, self.width);
        let ys = taps(height, self.height);
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
                    let bot = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Planes { width, height, data }
    }

    /// `(x / 255 - mean) / std` as a `[1, 3, H, W]` tensor.
    pub fn normalize(&self, mean: [f32; 3], std: [f32; 3]) -> Tensor<f32> {
        let n = self.width * self.height;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / n;
                (v / 255.0 - mean[c]) / std[c]
            })
            .collect();
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("positive dims")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Square,
    ShortSide,
}

impl std::str::FromStr for ResizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(ResizeMode::Square),
            "short_side" => Ok(ResizeMode::ShortSide),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected square or short_side)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    /// Per-channel normalization mean, so padded pixels normalize to zero.
    Mean,
    Constant([u8; 3]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub mode: ResizeMode,
    pub target: usize,
    /// Encoder downsampling factor `D`.
    pub factor: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub fill: Fill,
}

impl PreprocessConfig {
    pub fn new(mode: ResizeMode, target: usize, factor: usize) -> Self {
        PreprocessConfig {
            mode,
            target,
            factor,
            mean: CLIP_MEAN,
            std: CLIP_STD,
            fill: Fill::Mean,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.target == 0 || self.factor == 0 {
            return Err(Error::Config("target and factor must be positive".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("std entries must be positive".into()));
        }
        match self.mode {
            ResizeMode::Square if !self.target.is_multiple_of(self.factor) => Err(Error::NotMultiple {
                value: self.target,
                factor: self.factor,
            }),
            ResizeMode::ShortSide if self.target < self.factor => Err(Error::Config(format!(
                "short side {} is below the factor {}",
                self.target, self.factor
            ))),
            _ => Ok(()),
        }
    }

    fn fill_value(&self) -> [f32; 3] {
        match self.fill {
            Fill::Mean => self.mean.map(|m| m * 255.0),
            Fill::Constant(rgb) => rgb.map(f32::from),
        }
    }
}

fn check_nonempty(img: &ImageRGB) -> Result<()> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate {}x{} image",
            img.width, img.height
        )));
    }
    Ok(())
}

pub fn preprocess_square(img: &ImageRGB, cfg: &PreprocessConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    check_nonempty(img)?;
    let side = img.width.max(img.height);
    let planes = Planes::from_rgb(img).pad(
        side,
        side,
        (side - img.width) / 2,
        (side - img.height) / 2,
        cfg.fill_value(),
    );
    let r = cfg.target;
    Ok(planes.resize(r, r).center_crop(r, r).normalize(cfg.mean, cfg.std))
}

/// Output size for the short-side policy: `(width, height)`.
pub fn short_side_dims(width: usize, height: usize, target: usize, factor: usize) -> (usize, usize, usize, usize) {
    let short = width.min(height) as f64;
    let scale = target as f64 / short;
    let rw = ((width as f64 * scale).round() as usize).max(1);
    let rh = ((height as f64 * scale).round() as usize).max(1);
    (rw, rh, rw / factor * factor, rh / factor * factor)
}

pub fn preprocess_short_side(img: &ImageRGB, cfg: &PreprocessConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    check_nonempty(img)?;
    let (rw, rh, cw, ch) = short_side_dims(img.width, img.height, cfg.target, cfg.factor);
    Ok(Planes::from_rgb(img)
        .resize(rw, rh)
        .center_crop(cw, ch)
        .normalize(cfg.mean, cfg.std))
}

pub fn preprocess(img: &ImageRGB, cfg: &PreprocessConfig) -> Result<Tensor<f32>> {
    match cfg.mode {
        ResizeMode::Square => preprocess_square(img, cfg),
        ResizeMode::ShortSide => preprocess_short_side(img, cfg),
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"CVT0";

/// Raw tensor file: `CVT0`, u32 rank, u32 dims, f32 payload, little-endian.
pub fn encode_tensor_file(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor_file(bytes: &[u8]) -> Result<Tensor<f32>> {
    let word = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or(Error::Format {
                offset: bytes.len(),
                msg: format!("truncated header at offset {off}"),
            })
    };
    if bytes.get(..4) != Some(TENSOR_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            expected: "CVT0".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    let rank = word(4)? as usize;
    let shape = (0..rank)
        .map(|i| word(8 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let n: usize = shape.iter().product();
    let payload = &bytes[start..];
    if payload.len() != 4 * n {
        return Err(Error::Format {
            offset: start,
            msg: format!("payload holds {} bytes, shape {shape:?} needs {}", payload.len(), 4 * n),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor_file(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_tensor_file(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_tensor_file(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
