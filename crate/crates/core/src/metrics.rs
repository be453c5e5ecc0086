//! PSNR, SSIM, parameter and FLOP accounting, timing and dataset evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{self, ColorSpace, DataError, ImageBuffer};
use crate::graph::{Graph, GraphError, NodeKind, ParameterStore};
use crate::tensor::{Dims, Real, Tensor4};

/// Quoted totals for the published model, printed beside measurements.
pub const PAPER_REPORTED_PARAMS: &str = "2,178K";
pub const PAPER_REPORTED_FLOPS: &str = "15.05G";
/// SR output side at which the quoted FLOPs were measured.
pub const PAPER_FLOPS_SR_SIZE: usize = 162;
/// Quoted GPU seconds for x2 outputs of 256, 512 and 1024 pixels square.
pub const PAPER_REPORTED_SECONDS: [(usize, f64); 3] = [(256, 0.0234), (512, 0.0337), (1024, 0.0418)];

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("image dimensions differ: {0}x{1}x{2} vs {3}x{4}x{5}")]
    DimMismatch(usize, usize, usize, usize, usize, usize),
    #[error("shave {shave} leaves nothing of a {h}x{w} image")]
    Shave { shave: usize, h: usize, w: usize },
    #[error("SSIM needs at least 11x11 pixels (got {0}x{1})")]
    TooSmall(usize, usize),
    #[error("timing needs at least 3 repeats (got {0})")]
    Repeats(usize),
    #[error("model input has {model} channels but {image} has {channels}")]
    Channels {
        model: usize,
        image: String,
        channels: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn same_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricError> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(MetricError::DimMismatch(a.channels(), a.height(), a.width(), b.channels(), b.height(), b.width()));
    }
    Ok(())
}

/// PSNR on a 0-255 scale after removing `shave` pixels from every side;
/// identical regions give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, shave: usize) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if 2 * shave >= h.min(w) {
        return Err(MetricError::Shave { shave, h, w });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        for y in shave..h - shave {
            for x in shave..w - shave {
                let d = a.get(c, y, x) - b.get(c, y, x);
                sum += d * d;
                count += 1;
            }
        }
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-region separable Gaussian filter of one plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region, averaged across channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall(h, w));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..a.channels() {
        let pa = &a.data()[c * plane..(c + 1) * plane];
        let pb = &b.data()[c * plane..(c + 1) * plane];
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let mu_a = filter_valid(pa, h, w, &g);
        let mu_b = filter_valid(pb, h, w, &g);
        let aa = filter_valid(&prod(pa, pa), h, w, &g);
        let bb = filter_valid(&prod(pb, pb), h, w, &g);
        let ab = filter_valid(&prod(pa, pb), h, w, &g);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Parameter totals from two independent paths, plus a per-block breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    /// Sum of `in*out*k*k + out` over the graph's distinct conv specs.
    pub analytic: usize,
    /// Sum of stored tensor lengths.
    pub enumerated: usize,
    /// Enumerated totals grouped by the first segment of the parameter key.
    pub per_block: IndexMap<String, usize>,
}

pub fn count_params<T: Real>(graph: &Graph, store: &ParameterStore<T>) -> ParamReport {
    let analytic = graph.param_specs().values().map(|s| s.out_channels * s.in_channels * s.kernel * s.kernel + s.out_channels).sum();
    let mut per_block: IndexMap<String, usize> = IndexMap::new();
    let mut enumerated = 0;
    for (key, slot) in store.iter() {
        let n = slot.weights.data().len() + slot.bias.len();
        enumerated += n;
        let block = key.split('.').next().unwrap_or(key).to_string();
        *per_block.entry(block).or_default() += n;
    }
    ParamReport {
        analytic,
        enumerated,
        per_block,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopItem {
    pub id: String,
    pub kind: &'static str,
    /// Multiply-accumulates (convs only).
    pub macs: u64,
    /// Bias additions for convs; element operations for relu, add, concat and shuffle.
    pub other: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub input: Dims,
    pub items: Vec<FlopItem>,
    pub conv_macs: u64,
    pub bias_adds: u64,
    pub relu_ops: u64,
    pub add_ops: u64,
    pub data_moves: u64,
}

impl FlopReport {
    /// Convolution FLOPs counted as `2 * MACs + bias adds`.
    pub fn conv_flops(&self) -> u64 {
        2 * self.conv_macs + self.bias_adds
    }
}

/// FLOPs of every node in the graph for an `h`x`w` single-image input.
pub fn count_flops(graph: &Graph, h: usize, w: usize) -> Result<FlopReport, MetricError> {
    flops_masked(graph, h, w, None)
}

/// FLOPs of the nodes evaluated for one scale's branch.
pub fn count_flops_branch(graph: &Graph, h: usize, w: usize, scale: u32) -> Result<FlopReport, MetricError> {
    let mask = graph.branch_mask(scale)?;
    flops_masked(graph, h, w, Some(&mask))
}

fn flops_masked(graph: &Graph, h: usize, w: usize, mask: Option<&[bool]>) -> Result<FlopReport, MetricError> {
    let input = Dims::new(1, graph.ingress_channels(), h, w);
    let dims = graph.infer_dims(input)?;
    let mut report = FlopReport {
        input,
        items: Vec::new(),
        conv_macs: 0,
        bias_adds: 0,
        relu_ops: 0,
        add_ops: 0,
        data_moves: 0,
    };
    for (idx, node) in graph.nodes().iter().enumerate() {
        if mask.is_some_and(|m| !m[idx]) {
            continue;
        }
        let out = dims[idx];
        let elems = out.len() as u64;
        let (macs, other) = match &node.kind {
            NodeKind::Input => continue,
            NodeKind::Conv { spec, .. } => {
                let macs = (spec.kernel * spec.kernel * spec.in_channels * spec.out_channels * out.h * out.w) as u64;
                report.conv_macs += macs;
                report.bias_adds += elems;
                (macs, elems)
            }
            NodeKind::Relu => {
                report.relu_ops += elems;
                (0, elems)
            }
            NodeKind::Add => {
                let ops = elems * (node.inputs.len() as u64 - 1);
                report.add_ops += ops;
                (0, ops)
            }
            NodeKind::Concat | NodeKind::SplitUpper | NodeKind::SplitLower | NodeKind::PixelShuffle(_) => {
                report.data_moves += elems;
                (0, elems)
            }
        };
        report.items.push(FlopItem {
            id: node.id.clone(),
            kind: node.kind.name(),
            macs,
            other,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean: f64,
    pub min: f64,
    pub repeats: usize,
}

/// Wall-clock seconds per forward pass of the `scale` branch on an `h`x`w`
/// input, excluding one warm-up pass.
pub fn time_inference<T: Real>(
    graph: &Graph,
    store: &ParameterStore<T>,
    h: usize,
    w: usize,
    scale: u32,
    repeats: usize,
) -> Result<Timing, MetricError> {
    if repeats < 3 {
        return Err(MetricError::Repeats(repeats));
    }
    let x = Tensor4::<T>::from_fn(Dims::new(1, graph.ingress_channels(), h, w), |_, c, y, x| {
        T::from_f64(((c * 7 + y * 3 + x) % 17) as f64 / 17.0)
    });
    graph.forward_scale(store, &x, scale)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let trace = graph.forward_scale(store, &x, scale)?;
        std::hint::black_box(trace.output(scale));
        times.push(t.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / repeats as f64;
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Timing { mean, min, repeats })
}

/// How LR images are brought back to HR size during evaluation.
pub enum Upscaler<'a> {
    Bicubic,
    Model {
        graph: &'a Graph,
        store: &'a ParameterStore<f32>,
    },
}

impl Upscaler<'_> {
    pub fn id(&self) -> &'static str {
        match self {
            Upscaler::Bicubic => "bicubic",
            Upscaler::Model { .. } => "model",
        }
    }

    /// Upscales an 8-bit-valued LR image by `scale`; output is unclamped.
    pub fn upscale(&self, lr: &ImageBuffer, scale: usize) -> Result<ImageBuffer, MetricError> {
        match self {
            Upscaler::Bicubic => Ok(data::bicubic_resize(lr, lr.height() * scale, lr.width() * scale)?),
            Upscaler::Model { graph, store } => {
                if graph.ingress_channels() != lr.channels() {
                    return Err(MetricError::Channels {
                        model: graph.ingress_channels(),
                        image: "input".into(),
                        channels: lr.channels(),
                    });
                }
                let x: Tensor4<f32> = lr.to_tensor();
                let trace = graph.forward_scale(store, &x, scale as u32)?;
                Ok(ImageBuffer::from_tensor(trace.output(scale as u32).expect("selected branch evaluated"), 0)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub scale: usize,
    pub shave: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    pub fn mean_seconds(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.seconds))
    }

    /// Aligned plain-text table; timings are omitted so the text is reproducible.
    pub fn to_table(&self) -> String {
        let wid = self.rows.iter().map(|r| r.image.len()).chain([5]).max().unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(s, "model: {}  scale: x{}  shave: {}", self.model_id, self.scale, self.shave);
        let _ = writeln!(s, "{:<wid$}  {:>9}  {:>7}", "image", "PSNR(dB)", "SSIM");
        for r in &self.rows {
            let _ = writeln!(s, "{:<wid$}  {:>9.4}  {:>7.4}", r.image, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "{:<wid$}  {:>9.4}  {:>7.4}", "mean", self.mean_psnr(), self.mean_ssim());
        s
    }

    /// `image,psnr_db,ssim,seconds` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr_db,ssim,seconds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.image, r.psnr, r.ssim, r.seconds);
        }
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub clamp: bool,
    pub luma: data::LumaRange,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            clamp: true,
            luma: data::LumaRange::Studio,
        }
    }
}

/// Scores one HR image: degrade, quantize the LR image to 8 bits, upscale,
/// clamp and round, convert both to luma, then PSNR/SSIM with shave = scale.
pub fn evaluate_image(hr: &ImageBuffer, upscaler: &Upscaler, scale: usize, options: EvalOptions) -> Result<(f64, f64), MetricError> {
    let hr = data::modcrop(hr, scale)?;
    let lr = data::degrade(&hr, scale)?.quantize();
    let sr = upscaler.upscale(&lr, scale)?;
    let sr = if options.clamp { sr.quantize() } else { sr };
    let (ya, yb) = match hr.colorspace() {
        ColorSpace::Rgb => (data::rgb_to_y_with(&sr, options.luma), data::rgb_to_y_with(&hr, options.luma)),
        ColorSpace::Y => (sr, hr),
    };
    Ok((psnr(&ya, &yb, scale)?, ssim_shaved(&ya, &yb, scale)?))
}

/// SSIM on the region left after removing `shave` pixels per side.
pub fn ssim_shaved(a: &ImageBuffer, b: &ImageBuffer, shave: usize) -> Result<f64, MetricError> {
    if shave == 0 {
        return ssim(a, b);
    }
    let (h, w) = (a.height(), a.width());
    if 2 * shave >= h.min(w) {
        return Err(MetricError::Shave { shave, h, w });
    }
    let crop = |img: &ImageBuffer| img.crop(shave, shave, h - 2 * shave, w - 2 * shave);
    ssim(&crop(a)?, &crop(b)?)
}

/// Evaluates every image of a dataset directory, rows in listing order.
pub fn evaluate(dataset: &Path, upscaler: &Upscaler, scale: usize, options: EvalOptions) -> Result<EvalReport, MetricError> {
    let paths = data::list_images(dataset)?;
    evaluate_paths(&paths, upscaler, scale, options)
}

pub fn evaluate_paths(paths: &[PathBuf], upscaler: &Upscaler, scale: usize, options: EvalOptions) -> Result<EvalReport, MetricError> {
    let rows: Vec<Result<EvalRow, MetricError>> = paths
        .par_iter()
        .map(|path| {
            let hr = data::load_png(path)?;
            let t = Instant::now();
            let (p, s) = evaluate_image(&hr, upscaler, scale, options)?;
            Ok(EvalRow {
                image: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                psnr: p,
                ssim: s,
                seconds: t.elapsed().as_secs_f64(),
            })
        })
        .collect();
    Ok(EvalReport {
        model_id: upscaler.id().to_string(),
        scale,
        shave: scale,
        rows: rows.into_iter().collect::<Result<_, _>>()?,
    })
}
