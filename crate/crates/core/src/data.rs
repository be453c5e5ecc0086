//! Image I/O, bicubic degradation, patch extraction, augmentation and luma.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::{Dims, Real, Tensor4};
use crate::train::{TrainSample, TrainSet};

pub const PATCH_SIZE: usize = 81;
pub const DEFAULT_PATCHES_PER_IMAGE: usize = 64;
/// Name of the optional file listing dataset images, one relative path per line.
pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: PNG decode failed: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("{path}: unsupported PNG format: {reason}")]
    Unsupported { path: PathBuf, reason: String },
    #[error("{path}: PNG encode failed: {reason}")]
    Encode { path: PathBuf, reason: String },
    #[error("image {h}x{w} is too small for scale {scale}")]
    TooSmall { h: usize, w: usize, scale: usize },
    #[error("degraded image {h}x{w} is smaller than the {patch}x{patch} patch")]
    PatchTooLarge { h: usize, w: usize, patch: usize },
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("no PNG images found in {0}")]
    EmptyDataset(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Y,
}

/// Planar image with real values nominally in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    colorspace: ColorSpace,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, colorspace: ColorSpace, data: Vec<f64>) -> Result<Self, DataError> {
        let channels = match colorspace {
            ColorSpace::Rgb => 3,
            ColorSpace::Y => 1,
        };
        if height == 0 || width == 0 {
            return Err(DataError::Invalid(format!("dimensions {height}x{width} must be positive")));
        }
        if data.len() != channels * height * width {
            return Err(DataError::Invalid(format!(
                "{} values for a {channels}-channel {height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            colorspace,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, colorspace: ColorSpace, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let channels = if colorspace == ColorSpace::Rgb { 3 } else { 1 };
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, colorspace, data).expect("consistent by construction")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self, DataError> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(DataError::Invalid(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(h, w, self.colorspace, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    /// Rounds to the nearest integer and clamps to [0, 255].
    pub fn quantize(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| v.round().clamp(0.0, 255.0)).collect(),
            ..self.clone()
        }
    }

    /// Batch-of-one tensor with values divided by 255.
    pub fn to_tensor<T: Real>(&self) -> Tensor4<T> {
        let d = Dims::new(1, self.channels, self.height, self.width);
        Tensor4::from_vec(d, self.data.iter().map(|&v| T::from_f64(v / 255.0)).collect()).expect("sizes agree")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor) for sample `n`.
    pub fn from_tensor<T: Real>(t: &Tensor4<T>, n: usize) -> Result<Self, DataError> {
        let d = t.dims();
        let cs = match d.c {
            3 => ColorSpace::Rgb,
            1 => ColorSpace::Y,
            c => return Err(DataError::Invalid(format!("{c} channels cannot form an image"))),
        };
        let s = t.sample(n);
        Self::new(d.h, d.w, cs, s.data().iter().map(|v| Real::to_f64(*v) * 255.0).collect())
    }
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageBuffer, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let decode_err = |e: png::DecodingError| DataError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let unsupported = |reason: String| DataError::Unsupported {
        path: path.to_path_buf(),
        reason,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unsupported(format!("{:?} bit depth (only 8-bit is supported)", info.bit_depth)));
    }
    let colorspace = match info.color_type {
        png::ColorType::Rgb => ColorSpace::Rgb,
        png::ColorType::Grayscale => ColorSpace::Y,
        other => return Err(unsupported(format!("{other:?} color type (only 8-bit RGB or grayscale)"))),
    };
    let size = reader.output_buffer_size().ok_or_else(|| unsupported("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (h, w) = (frame.height as usize, frame.width as usize);
    let channels = if colorspace == ColorSpace::Rgb { 3 } else { 1 };
    let stride = frame.line_size;
    let img = ImageBuffer::from_fn(h, w, colorspace, |c, y, x| buf[y * stride + x * channels + c] as f64);
    Ok(img)
}

/// Writes `img` as 8-bit PNG after rounding and clamping to [0, 255].
pub fn save_png(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<(), DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let enc_err = |e: png::EncodingError| DataError::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let file = File::create(path).map_err(io)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(match img.colorspace {
        ColorSpace::Rgb => png::ColorType::Rgb,
        ColorSpace::Y => png::ColorType::Grayscale,
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(enc_err)?;
    let mut bytes = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                bytes.push(img.get(c, y, x).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    writer.write_image_data(&bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

/// Cubic convolution kernel with a = -0.5.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Sparse resampling weights along one axis: for each output index, the
/// (input index, weight) taps, edge-clamped and normalized to sum to 1.
///
/// Output pixel `i` samples input coordinate `(i + 0.5) / scale - 0.5`;
/// when shrinking, the kernel is stretched by `1 / scale` to prefilter.
pub fn resample_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    let taps = width.ceil() as i64 + 2;
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let left = (u - width / 2.0).floor() as i64;
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(taps as usize);
            for k in 0..taps {
                let j = left + k;
                let wgt = kscale * cubic(kscale * (u - j as f64));
                if wgt == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as i64 - 1) as usize;
                match row.iter_mut().find(|(p, _)| *p == idx) {
                    Some(e) => e.1 += wgt,
                    None => row.push((idx, wgt)),
                }
            }
            let total: f64 = row.iter().map(|e| e.1).sum();
            row.iter_mut().for_each(|e| e.1 /= total);
            row
        })
        .collect()
}

/// Separable bicubic resize (rows, then columns).
pub fn bicubic_resize(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer, DataError> {
    if out_h == 0 || out_w == 0 {
        return Err(DataError::Invalid(format!("output dimensions {out_h}x{out_w} must be positive")));
    }
    let wy = resample_weights(img.height, out_h);
    let wx = resample_weights(img.width, out_w);
    let mut data = vec![0.0; img.channels * out_h * out_w];
    let mut tmp = vec![0.0; img.height * out_w];
    for c in 0..img.channels {
        for y in 0..img.height {
            for (x, taps) in wx.iter().enumerate() {
                tmp[y * out_w + x] = taps.iter().map(|&(j, w)| w * img.get(c, y, j)).sum();
            }
        }
        for (y, taps) in wy.iter().enumerate() {
            for x in 0..out_w {
                data[(c * out_h + y) * out_w + x] = taps.iter().map(|&(j, w)| w * tmp[j * out_w + x]).sum();
            }
        }
    }
    ImageBuffer::new(out_h, out_w, img.colorspace, data)
}

/// Center crop so both dimensions are multiples of `s`.
pub fn modcrop(img: &ImageBuffer, s: usize) -> Result<ImageBuffer, DataError> {
    if s == 0 || img.height < s || img.width < s {
        return Err(DataError::TooSmall {
            h: img.height,
            w: img.width,
            scale: s,
        });
    }
    let h = img.height / s * s;
    let w = img.width / s * s;
    img.crop((img.height - h) / 2, (img.width - w) / 2, h, w)
}

/// Center crop to multiples of `s`, then bicubic downscale by exactly `s`.
pub fn degrade(hr: &ImageBuffer, s: usize) -> Result<ImageBuffer, DataError> {
    let cropped = modcrop(hr, s)?;
    if s == 1 {
        return Ok(cropped);
    }
    bicubic_resize(&cropped, cropped.height / s, cropped.width / s)
}

/// Aligned LR/HR crops; `hr` is exactly `scale` times larger than `lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub lr: ImageBuffer,
    pub hr: ImageBuffer,
    pub scale: usize,
    /// LR-grid position of the top-left corner.
    pub origin: (usize, usize),
}

impl PatchPair {
    pub fn to_sample(&self) -> TrainSample {
        TrainSample {
            lr: self.lr.to_tensor(),
            hr: self.hr.to_tensor(),
            scale: self.scale as u32,
        }
    }
}

/// Random aligned patches: LR `patch`x`patch` at (y, x) of the degraded
/// image, HR `patch*s` square at (s*y, s*x) of the cropped original.
pub fn extract_patches(hr: &ImageBuffer, s: usize, patch: usize, count: usize, seed: u64) -> Result<Vec<PatchPair>, DataError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let hr = modcrop(hr, s)?;
    let lr = degrade(&hr, s)?;
    if lr.height < patch || lr.width < patch || patch == 0 {
        return Err(DataError::PatchTooLarge {
            h: lr.height,
            w: lr.width,
            patch,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let y = rng.random_range(0..=lr.height - patch);
            let x = rng.random_range(0..=lr.width - patch);
            Ok(PatchPair {
                lr: lr.crop(y, x, patch, patch)?,
                hr: hr.crop(s * y, s * x, patch * s, patch * s)?,
                scale: s,
                origin: (y, x),
            })
        })
        .collect()
}

/// Decodes `code` in 0..8 into (horizontal flip, quarter turns).
pub fn augment_parts(code: u8) -> (bool, u8) {
    (code >= 4, code % 4)
}

/// Code whose transform undoes `code`'s.
pub fn inverse_code(code: u8) -> u8 {
    let (flip, rot) = augment_parts(code);
    if flip {
        code
    } else {
        (4 - rot) % 4
    }
}

/// Source coordinate for output (y, x) of an `h`x`w` plane under `code`:
/// horizontal flip first, then `rot` counter-clockwise quarter turns.
fn source_coord(code: u8, h: usize, w: usize, y: usize, x: usize) -> (usize, usize) {
    let (flip, rot) = augment_parts(code);
    // a CCW turn of an (h, w) plane gives (w, h) with out[y][x] = in[x][w-1-y]
    let (mut sy, mut sx) = (y, x);
    let (mut ch, mut cw) = if rot % 2 == 1 { (w, h) } else { (h, w) };
    for _ in 0..rot {
        let (ny, nx) = (sx, ch - 1 - sy);
        sy = ny;
        sx = nx;
        std::mem::swap(&mut ch, &mut cw);
    }
    if flip {
        sx = w - 1 - sx;
    }
    (sy, sx)
}

fn augment_dims(code: u8, h: usize, w: usize) -> (usize, usize) {
    if augment_parts(code).1 % 2 == 1 {
        (w, h)
    } else {
        (h, w)
    }
}

pub fn augment_image(img: &ImageBuffer, code: u8) -> ImageBuffer {
    let (oh, ow) = augment_dims(code, img.height, img.width);
    ImageBuffer::from_fn(oh, ow, img.colorspace, |c, y, x| {
        let (sy, sx) = source_coord(code, img.height, img.width, y, x);
        img.get(c, sy, sx)
    })
}

pub fn augment_tensor<T: Real>(t: &Tensor4<T>, code: u8) -> Tensor4<T> {
    if code == 0 {
        return t.clone();
    }
    let d = t.dims();
    let (oh, ow) = augment_dims(code, d.h, d.w);
    Tensor4::from_fn(Dims::new(d.n, d.c, oh, ow), |n, c, y, x| {
        let (sy, sx) = source_coord(code, d.h, d.w, y, x);
        t.at(n, c, sy, sx)
    })
}

/// Same flip/rotation applied to both halves of the pair.
pub fn augment(pair: &PatchPair, code: u8) -> PatchPair {
    PatchPair {
        lr: augment_image(&pair.lr, code),
        hr: augment_image(&pair.hr, code),
        scale: pair.scale,
        origin: pair.origin,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LumaRange {
    /// Y in [16, 235].
    #[default]
    Studio,
    /// Y in [0, 255].
    Full,
}

/// BT.601 luma; Y images pass through unchanged.
pub fn rgb_to_y_with(img: &ImageBuffer, range: LumaRange) -> ImageBuffer {
    if img.colorspace == ColorSpace::Y {
        return img.clone();
    }
    let (off, kr, kg, kb) = match range {
        LumaRange::Studio => (16.0, 65.481, 128.553, 24.966),
        LumaRange::Full => (0.0, 76.245, 149.685, 29.07),
    };
    ImageBuffer::from_fn(img.height, img.width, ColorSpace::Y, |_, y, x| {
        off + (kr * img.get(0, y, x) + kg * img.get(1, y, x) + kb * img.get(2, y, x)) / 255.0
    })
}

pub fn rgb_to_y(img: &ImageBuffer) -> ImageBuffer {
    rgb_to_y_with(img, LumaRange::Studio)
}

/// FNV-1a over the seed, image path and patch index.
pub fn image_seed(seed: u64, path: &Path, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&seed.to_le_bytes());
    eat(path.to_string_lossy().as_bytes());
    eat(&index.to_le_bytes());
    h
}

/// PNG files of a dataset directory: the manifest's entries when present,
/// otherwise every `.png` directly inside `root`, sorted by name.
pub fn list_images(root: impl AsRef<Path>) -> Result<Vec<PathBuf>, DataError> {
    let root = root.as_ref();
    let io = |source| DataError::Io {
        path: root.to_path_buf(),
        source,
    };
    let manifest = root.join(MANIFEST_NAME);
    let mut paths: Vec<PathBuf> = if manifest.is_file() {
        std::fs::read_to_string(&manifest)
            .map_err(io)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| root.join(l))
            .collect()
    } else {
        let mut v: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        v
    };
    paths.dedup();
    if paths.is_empty() {
        return Err(DataError::EmptyDataset(root.to_path_buf()));
    }
    Ok(paths)
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub scales: Vec<u32>,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub seed: u64,
}

/// Training set from HR images: per image and scale, seeded random patches.
/// Images too small for a scale are skipped and counted.
pub fn build_train_set(paths: &[PathBuf], spec: &DatasetSpec) -> Result<(TrainSet, usize), DataError> {
    let per_image: Vec<Result<(Vec<TrainSample>, usize), DataError>> = paths
        .par_iter()
        .map(|path| {
            let img = load_png(path)?;
            let mut samples = Vec::new();
            let mut skipped = 0;
            for (k, &s) in spec.scales.iter().enumerate() {
                let seed = image_seed(spec.seed, path, k as u64);
                match extract_patches(&img, s as usize, spec.patch_size, spec.patches_per_image, seed) {
                    Ok(p) => samples.extend(p.iter().map(PatchPair::to_sample)),
                    Err(DataError::TooSmall { .. } | DataError::PatchTooLarge { .. }) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((samples, skipped))
        })
        .collect();
    let mut all = Vec::new();
    let mut skipped = 0;
    for r in per_image {
        let (s, k) = r?;
        all.extend(s);
        skipped += k;
    }
    Ok((TrainSet::new(all), skipped))
}
