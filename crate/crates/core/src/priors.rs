//! Illumination-independent guidance: structure (difference of Gaussians on
//! lightness), chroma magnitude, and deep texture activations.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{no_grad, Var};
use crate::color::{srgb_to_lab, LabImage};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::image::{reflect_index, Image};
use crate::layout::resize_tensor;
use crate::tensor::Tensor;

pub const DOG_SIGMA1: f64 = 1.0;
pub const DOG_SIGMA2: f64 = 1.6;
/// Below this spread a map counts as constant and normalises to zeros.
pub const NORM_EPS: f64 = 1e-8;
pub const CHROMA_EPS: f64 = 1e-5;
/// Value written into switched-off guidance channels.
pub const ABLATION_FILL: f64 = 1e-6;

/// Sampled 2-D Gaussian, normalised to unit sum.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub sigma: f64,
    pub size: usize,
    pub weights: Vec<f64>,
}

/// `exp(-(x²+y²)/(2σ²)) / (2πσ²)` — the continuous density at an offset.
pub fn gaussian_density(sigma: f64, x: f64, y: f64) -> f64 {
    (-(x * x + y * y) / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma)
}

pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<GaussianKernel> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gaussian sigma must be positive, got {sigma}")));
    }
    if size < 3 || size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("gaussian size must be odd and >= 3, got {size}")));
    }
    let r = (size / 2) as f64;
    let mut weights = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            weights.push(gaussian_density(sigma, x as f64 - r, y as f64 - r));
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(GaussianKernel { sigma, size, weights })
}

/// Kernel size covering ±3σ of the wider Gaussian.
pub fn dog_size(sigma2: f64) -> usize {
    2 * (3.0 * sigma2).ceil() as usize + 1
}

/// `G_σ1 − G_σ2` on a common support.
pub fn dog_kernel(sigma1: f64, sigma2: f64) -> Result<GaussianKernel> {
    let size = dog_size(sigma2);
    let g1 = gaussian_kernel(sigma1, size)?;
    let g2 = gaussian_kernel(sigma2, size)?;
    Ok(GaussianKernel {
        sigma: sigma1,
        size,
        weights: g1.weights.iter().zip(&g2.weights).map(|(a, b)| a - b).collect(),
    })
}

/// Same-size correlation with mirror padding (the kernels used here are symmetric,
/// so this equals convolution).
pub fn filter_reflect(plane: &[f64], h: usize, w: usize, k: &GaussianKernel) -> Vec<f64> {
    let r = (k.size / 2) as isize;
    let rows: Vec<Vec<usize>> = (0..h).map(|y| (-r..=r).map(|d| reflect_index(y as isize + d, h)).collect()).collect();
    let cols: Vec<Vec<usize>> = (0..w).map(|x| (-r..=r).map(|d| reflect_index(x as isize + d, w)).collect()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, &sy) in rows[y].iter().enumerate() {
                let krow = &k.weights[ky * k.size..(ky + 1) * k.size];
                let prow = &plane[sy * w..(sy + 1) * w];
                for (kw, &sx) in krow.iter().zip(&cols[x]) {
                    acc += kw * prow[sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-map min-max normalisation to `[0, 1]`; near-constant maps become zeros.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi - lo >= NORM_EPS) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Signed band-pass response of the lightness plane, before `|·|` and normalisation.
pub fn dog_response(l: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = dog_kernel(DOG_SIGMA1, DOG_SIGMA2).expect("constant sigmas are valid");
    filter_reflect(l, h, w, &k)
}

/// Structure prior: normalised magnitude of the DoG response.
pub fn dog_feature(l: &[f64], h: usize, w: usize) -> Vec<f64> {
    let r: Vec<f64> = dog_response(l, h, w).into_iter().map(f64::abs).collect();
    min_max_normalize(&r)
}

/// `sqrt(a² + b² + 1e-5)` per pixel.
pub fn chroma_magnitude(lab: &LabImage) -> Vec<f64> {
    lab.a.iter().zip(&lab.b).map(|(a, b)| (a * a + b * b + CHROMA_EPS).sqrt()).collect()
}

/// Colour prior: normalised chroma magnitude.
pub fn color_feature(lab: &LabImage) -> Vec<f64> {
    min_max_normalize(&chroma_magnitude(lab))
}

/// Deep texture features: `[1, 3, H, W]` image tensor in, `[1, C, H, W]` out.
pub trait TextureExtractor {
    fn channels(&self) -> usize;
    fn min_size(&self) -> usize;
    /// Activations at the extractor's native resolution.
    fn activations(&self, x: &Tensor) -> Result<Tensor>;

    fn extract(&self, img: &Image) -> Result<Tensor> {
        img.ensure_min_size(self.min_size(), "texture extractor")?;
        let act = self.activations(&img.to_tensor())?;
        Ok(resize_tensor(&act, img.height(), img.width()))
    }
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Default extractor: four 3×3 conv + ReLU layers, stride 2 in the second and
/// fourth, so activations sit at 1/4 resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvExtractor {
    pub layers: Vec<(Tensor, Tensor)>,
    pub strides: Vec<usize>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

const EXTRACTOR_KIND: &str = "texture-extractor";

impl ConvExtractor {
    /// Widths `[c/2, c/2, c, c]`; with `c = 128` this is 3→64→64→128→128.
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let half = (channels / 2).max(1);
        let widths = [half, half, channels, channels];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let mut layers = Vec::new();
        for &c_out in &widths {
            let fan_in = c_in * 9;
            // He-uniform keeps activations from vanishing through the ReLU stack
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..c_out * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
            layers.push((Tensor::from_parts(vec![c_out, c_in, 3, 3], w), Tensor::zeros(&[c_out])));
            c_in = c_out;
        }
        Self {
            layers,
            strides: vec![1, 2, 1, 2],
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            EXTRACTOR_KIND,
            serde_json::json!({ "strides": self.strides, "mean": self.mean, "std": self.std }),
        );
        for (i, (w, b)) in self.layers.iter().enumerate() {
            c.push(format!("conv{i}.weight"), w.clone());
            c.push(format!("conv{i}.bias"), b.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != EXTRACTOR_KIND {
            return Err(Error::Extractor(format!("expected a {EXTRACTOR_KIND} file, found `{}`", c.kind)));
        }
        let strides: Vec<usize> = serde_json::from_value(c.meta["strides"].clone())
            .map_err(|e| Error::Extractor(format!("strides: {e}")))?;
        let mean: [f64; 3] =
            serde_json::from_value(c.meta["mean"].clone()).map_err(|e| Error::Extractor(format!("mean: {e}")))?;
        let std: [f64; 3] =
            serde_json::from_value(c.meta["std"].clone()).map_err(|e| Error::Extractor(format!("std: {e}")))?;
        let mut layers = Vec::new();
        let mut c_in = 3;
        for i in 0..strides.len() {
            let w = c.get(&format!("conv{i}.weight"));
            let b = c.get(&format!("conv{i}.bias"));
            let (Some(w), Some(b)) = (w, b) else {
                return Err(Error::Extractor(format!("missing layer {i}")));
            };
            let s = w.shape();
            if s.len() != 4 || s[1] != c_in || s[2] != 3 || s[3] != 3 || b.shape() != [s[0]] {
                return Err(Error::Extractor(format!("layer {i} has shape {s:?}")));
            }
            c_in = s[0];
            layers.push((w.clone(), b.clone()));
        }
        if layers.is_empty() || std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Extractor("empty layer list or nonpositive std".into()));
        }
        Ok(Self { layers, strides, mean, std })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl TextureExtractor for ConvExtractor {
    fn channels(&self) -> usize {
        self.layers.last().map_or(0, |(w, _)| w.shape()[0])
    }

    fn min_size(&self) -> usize {
        8
    }

    fn activations(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4();
        if c != 3 && c != 1 {
            return Err(Error::Shape(format!("extractor expects 1 or 3 channels, got {c}")));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * 3 * plane);
        for b in 0..n {
            for ch in 0..3 {
                // grey inputs are replicated across the three colour channels
                let src = if c == 1 { 0 } else { ch };
                let s = &x.data()[(b * c + src) * plane..(b * c + src + 1) * plane];
                data.extend(s.iter().map(|v| (v - self.mean[ch]) / self.std[ch]));
            }
        }
        let input = Tensor::from_parts(vec![n, 3, h, w], data);
        Ok(no_grad(|| {
            let mut a = Var::constant(input);
            for ((wt, bs), &stride) in self.layers.iter().zip(&self.strides) {
                let wt = Var::constant(wt.clone());
                let bs = Var::constant(bs.clone());
                a = a.conv2d(&wt, Some(&bs), stride, (1, 1)).relu();
            }
            a.value().clone()
        }))
    }
}

/// Which guidance parts are active; a disabled part is filled with a tiny constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Ablation {
    pub structure: bool,
    pub color: bool,
    pub texture: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::all_on()
    }
}

impl Ablation {
    pub fn all_on() -> Self {
        Self { structure: true, color: true, texture: true }
    }

    pub fn all_off() -> Self {
        Self { structure: false, color: false, texture: false }
    }

    pub fn is_all_on(&self) -> bool {
        *self == Self::all_on()
    }

    /// Overwrites disabled channels of a `[N, 2 + C_tex, H, W]` guidance tensor.
    pub fn apply(&self, f_inv: &mut Tensor) {
        let (n, c, h, w) = f_inv.dims4();
        let plane = h * w;
        let data = f_inv.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let on = match ch {
                    0 => self.structure,
                    1 => self.color,
                    _ => self.texture,
                };
                if !on {
                    data[(b * c + ch) * plane..(b * c + ch + 1) * plane].fill(ABLATION_FILL);
                }
            }
        }
    }
}

/// The three priors and their channel concatenation, all `[1, ·, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidancePack {
    pub f_dog: Tensor,
    pub f_color: Tensor,
    pub f_tex: Tensor,
    pub f_inv: Tensor,
}

pub fn fuse_guidance(f_dog: Tensor, f_color: Tensor, f_tex: Tensor) -> Result<GuidancePack> {
    for (name, t, c) in [("f_dog", &f_dog, Some(1)), ("f_color", &f_color, Some(1)), ("f_tex", &f_tex, None)] {
        if t.rank() != 4 || c.is_some_and(|c| t.shape()[1] != c) {
            return Err(Error::Shape(format!("{name} has shape {:?}", t.shape())));
        }
    }
    let f_inv = Tensor::cat_channels(&[&f_dog, &f_color, &f_tex])?;
    Ok(GuidancePack { f_dog, f_color, f_tex, f_inv })
}

pub fn guidance(img: &Image, extractor: &dyn TextureExtractor) -> Result<GuidancePack> {
    let (h, w) = (img.height(), img.width());
    let lab = srgb_to_lab(img);
    let f_dog = Tensor::from_parts(vec![1, 1, h, w], dog_feature(&lab.l, h, w));
    let f_color = Tensor::from_parts(vec![1, 1, h, w], color_feature(&lab));
    let f_tex = extractor.extract(img)?;
    fuse_guidance(f_dog, f_color, f_tex)
}

/// Guidance for every element of a `[N, 3, H, W]` batch, stacked as `[N, 2 + C, H, W]`.
pub fn guidance_batch(x: &Tensor, extractor: &dyn TextureExtractor) -> Result<Tensor> {
    let (n, ..) = x.dims4();
    let packs = (0..n)
        .map(|i| Ok(guidance(&Image::from_tensor(x, i)?, extractor)?.f_inv))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&packs)
}
