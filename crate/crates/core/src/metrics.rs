//! Full-reference (PSNR, SSIM, pluggable LPIPS) and no-reference (LOE, DE,
//! EME) image quality measures, plus the per-image report.

use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::color::rgb_to_gray;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 120.0;
pub const PSNR_MIN_MSE: f64 = 1e-12;
pub const LOE_MAX_SIDE: usize = 100;
pub const EME_BLOCK: usize = 8;
pub const EME_EPS: f64 = 1e-4;

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over all channels, capped at 120 dB.
pub fn psnr(est: &Image, gt: &Image) -> Result<f64> {
    same_size(est, gt)?;
    let n = est.data().len() as f64;
    let mse = est.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MIN_MSE {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean single-scale SSIM on luma.
pub fn ssim(est: &Image, gt: &Image) -> Result<f64> {
    same_size(est, gt)?;
    no_grad(|| {
        let s = loss::ssim(&Var::constant(est.to_tensor()), &Var::constant(gt.to_tensor()))?;
        Ok(s.value().data()[0])
    })
}

/// Nearest-neighbour downsample of a lightness plane so the long side is ≤ 100.
fn loe_plane(img: &Image) -> (Vec<f64>, usize, usize) {
    let (h, w) = (img.height(), img.width());
    let scale = (LOE_MAX_SIDE as f64 / h.max(w) as f64).min(1.0);
    let (dh, dw) = (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1));
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let sy = ((y as f64 + 0.5) * h as f64 / dh as f64) as usize;
        for x in 0..dw {
            let sx = ((x as f64 + 0.5) * w as f64 / dw as f64) as usize;
            let [r, g, b] = img.pixel(sy.min(h - 1), sx.min(w - 1));
            out.push(r.max(g).max(b));
        }
    }
    (out, dh, dw)
}

/// Lightness order error: for each pixel, the number of pixels whose
/// relative order (`≥`) flips between the two images, averaged over pixels.
pub fn loe(enh: &Image, orig: &Image) -> Result<f64> {
    same_size(enh, orig)?;
    let (le, ..) = loe_plane(enh);
    let (lo, ..) = loe_plane(orig);
    let n = le.len();
    // sort-free O(n²) count is fine at ≤ 100×100
    let mut flips = 0u64;
    for p in 0..n {
        for q in 0..n {
            if (le[p] >= le[q]) != (lo[p] >= lo[q]) {
                flips += 1;
            }
        }
    }
    Ok(flips as f64 / n as f64)
}

/// Shannon entropy in bits of the 256-bin histogram of 8-bit luma.
pub fn de(img: &Image) -> f64 {
    let mut hist = [0u64; 256];
    for v in rgb_to_gray(img) {
        hist[(v * 255.0).round().clamp(0.0, 255.0) as usize] += 1;
    }
    let n = img.pixel_count() as f64;
    -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Mean over luma tiles (partial edge tiles included) of `20·log10((max+ε)/(min+ε))`.
pub fn eme(img: &Image, block: usize) -> Result<f64> {
    if block == 0 {
        return Err(Error::InvalidArgument("EME block must be positive".into()));
    }
    let (h, w) = (img.height(), img.width());
    let gray = rgb_to_gray(img);
    let mut total = 0.0;
    let mut tiles = 0usize;
    for ty in (0..h).step_by(block) {
        for tx in (0..w).step_by(block) {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in ty..(ty + block).min(h) {
                for x in tx..(tx + block).min(w) {
                    lo = lo.min(gray[y * w + x]);
                    hi = hi.max(gray[y * w + x]);
                }
            }
            total += 20.0 * ((hi + EME_EPS) / (lo + EME_EPS)).log10();
            tiles += 1;
        }
    }
    Ok(total / tiles as f64)
}

/// A perceptual feature network supplying per-layer activations
/// (`[1, C_l, H_l, W_l]`) and non-negative per-channel layer weights.
pub trait PerceptualExtractor {
    fn layers(&self, img: &Image) -> Result<Vec<Tensor>>;
    fn layer_weights(&self) -> Vec<Vec<f64>>;
}

/// Learned perceptual distance: unit-normalise features along channels,
/// weight squared differences per channel, average spatially, average layers.
pub fn lpips(est: &Image, gt: &Image, extractor: &dyn PerceptualExtractor) -> Result<f64> {
    same_size(est, gt)?;
    let (fa, fb) = (extractor.layers(est)?, extractor.layers(gt)?);
    let weights = extractor.layer_weights();
    if fa.len() != fb.len() || fa.len() != weights.len() || fa.is_empty() {
        return Err(Error::Extractor("layer count disagrees with weights".into()));
    }
    let mut total = 0.0;
    for ((a, b), wl) in fa.iter().zip(&fb).zip(&weights) {
        let (_, c, h, w) = a.dims4();
        if a.shape() != b.shape() || wl.len() != c {
            return Err(Error::Extractor(format!("layer shape {:?} / {} weights", a.shape(), wl.len())));
        }
        let plane = h * w;
        let mut acc = 0.0;
        for i in 0..plane {
            let norm = |t: &Tensor| (0..c).map(|ch| t.data()[ch * plane + i].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (na, nb) = (norm(a), norm(b));
            for (ch, wc) in wl.iter().enumerate() {
                let d = a.data()[ch * plane + i] / na - b.data()[ch * plane + i] / nb;
                acc += wc * d * d;
            }
        }
        total += acc / plane as f64;
    }
    Ok(total / fa.len() as f64)
}

/// Metrics of one image; `lpips` is `None` when no extractor is plugged in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: String,
    pub ssim: f64,
    pub psnr: f64,
    pub lpips: Option<f64>,
    pub loe: f64,
    pub de: f64,
    pub eme: f64,
}

pub fn evaluate_image(
    name: &str,
    est: &Image,
    gt: &Image,
    orig: &Image,
    perceptual: Option<&dyn PerceptualExtractor>,
) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        image: name.to_string(),
        ssim: ssim(est, gt)?,
        psnr: psnr(est, gt)?,
        lpips: perceptual.map(|p| lpips(est, gt, p)).transpose()?,
        loe: loe(est, orig)?,
        de: de(est),
        eme: eme(est, EME_BLOCK)?,
    })
}

pub const CSV_HEADER: &str = "image,ssim,psnr,lpips,loe,de,eme";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean: ImageMetrics,
}

impl MetricReport {
    pub fn new(per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Dataset("no images to evaluate".into()));
        }
        let n = per_image.len() as f64;
        let avg = |f: &dyn Fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let lpips = per_image
            .iter()
            .map(|m| m.lpips)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        let mean = ImageMetrics {
            image: "mean".into(),
            ssim: avg(&|m| m.ssim),
            psnr: avg(&|m| m.psnr),
            lpips,
            loe: avg(&|m| m.loe),
            de: avg(&|m| m.de),
            eme: avg(&|m| m.eme),
        };
        Ok(Self { per_image, mean })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for m in self.per_image.iter().chain(std::iter::once(&self.mean)) {
            let lp = m.lpips.map(|v| format!("{v}")).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{},{},{}\n", m.image, m.ssim, m.psnr, lp, m.loe, m.de, m.eme));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
