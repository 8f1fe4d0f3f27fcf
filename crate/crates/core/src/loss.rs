//! Training objective: pixel, structural, exposure, smoothness and HSV terms.
//!
//! Every term takes `[N, 3, H, W]` variables in `[0, 1]` and returns a scalar.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::color::{hue_saturation, luma};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::layout::{avg_pool2, tile_mean};
use crate::priors::gaussian_kernel;
use crate::tensor::Tensor;

pub const SMOOTH_L1_DELTA: f64 = 0.01;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Floor for per-scale terms raised to fractional powers.
pub const MS_SSIM_FLOOR: f64 = 1e-6;
pub const EXPOSURE_TILE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelVariant {
    L1,
    SmoothL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimVariant {
    Ssim,
    MsSsim,
}

/// Term names in reporting order.
pub const TERMS: [&str; 5] = ["l1", "ssim", "exp", "tv", "hsv"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub lambda_hue: f64,
    pub lambda_sat: f64,
    /// Target exposure level.
    pub exposure: f64,
    pub pixel: PixelVariant,
    pub structure: SsimVariant,
    pub use_l1: bool,
    pub use_ssim: bool,
    pub use_exp: bool,
    pub use_tv: bool,
    pub use_hsv: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            w3: 0.1,
            lambda_hue: 1.0,
            lambda_sat: 1.0,
            exposure: 0.6,
            pixel: PixelVariant::SmoothL1,
            structure: SsimVariant::MsSsim,
            use_l1: true,
            use_ssim: true,
            use_exp: true,
            use_tv: true,
            use_hsv: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w1, self.w2, self.w3, self.lambda_hue, self.lambda_sat];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.exposure > 0.0 && self.exposure < 1.0) {
            return Err(Error::Config(format!("loss.exposure must lie in (0, 1), got {}", self.exposure)));
        }
        Ok(())
    }

    fn enabled(&self, term: &str) -> bool {
        match term {
            "l1" => self.use_l1,
            "ssim" => self.use_ssim,
            "exp" => self.use_exp,
            "tv" => self.use_tv,
            _ => self.use_hsv,
        }
    }

    /// Multiplier of a term inside the total.
    pub fn factor(&self, term: &str) -> f64 {
        match term {
            "ssim" => self.w1,
            "exp" => self.w2,
            "tv" => self.w3,
            _ => 1.0,
        }
    }
}

fn check_pair(est: &Var, gt: &Var) -> Result<()> {
    if est.shape() != gt.shape() {
        return Err(Error::Shape(format!("estimate {:?} vs reference {:?}", est.shape(), gt.shape())));
    }
    Ok(())
}

pub fn pixel_loss(est: &Var, gt: &Var, variant: PixelVariant) -> Result<Var> {
    check_pair(est, gt)?;
    let d = est.sub(gt).abs();
    Ok(match variant {
        PixelVariant::L1 => d.mean_all(),
        PixelVariant::SmoothL1 => {
            // q = min(|d|, δ):  q²/(2δ) + (|d| − q)
            let excess = d.add_scalar(-SMOOTH_L1_DELTA).relu();
            let q = d.sub(&excess);
            q.square().mul_scalar(0.5 / SMOOTH_L1_DELTA).add(&excess).mean_all()
        }
    })
}

fn ssim_window() -> Var {
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW).expect("constant window is valid");
    Var::constant(Tensor::from_parts(vec![1, 1, SSIM_WINDOW, SSIM_WINDOW], k.weights))
}

/// Per-window `(ssim, cs)` maps of two `[N, 1, H, W]` luma planes (valid windows only).
fn ssim_maps(x: &Var, y: &Var) -> (Var, Var) {
    let win = ssim_window();
    let blur = |v: &Var| v.conv2d(&win, None, 1, (0, 0));
    let (mx, my) = (blur(x), blur(y));
    let (mx2, my2, mxy) = (mx.square(), my.square(), mx.mul(&my));
    let sx = blur(&x.square()).sub(&mx2);
    let sy = blur(&y.square()).sub(&my2);
    let sxy = blur(&x.mul(y)).sub(&mxy);
    let cs = sxy.mul_scalar(2.0).add_scalar(SSIM_C2).div(&sx.add(&sy).add_scalar(SSIM_C2));
    let l = mxy.mul_scalar(2.0).add_scalar(SSIM_C1).div(&mx2.add(&my2).add_scalar(SSIM_C1));
    (l.mul(&cs), cs)
}

fn ensure_ssim_size(shape: &[usize]) -> Result<()> {
    let (h, w) = (shape[2], shape[3]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    Ok(())
}

/// Mean single-scale SSIM on luma over all windows of the batch.
pub fn ssim(est: &Var, gt: &Var) -> Result<Var> {
    check_pair(est, gt)?;
    ensure_ssim_size(est.shape())?;
    Ok(ssim_maps(&luma(est), &luma(gt)).0.mean_all())
}

/// Number of dyadic scales at which an 11×11 window still fits (at most 5).
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut s = 0;
    let mut side = h.min(w);
    while s < MS_SSIM_WEIGHTS.len() && side >= SSIM_WINDOW {
        s += 1;
        side /= 2;
    }
    s
}

/// Multi-scale SSIM over the usable scales with renormalised exponents,
/// averaged over the batch.
pub fn ms_ssim(est: &Var, gt: &Var) -> Result<Var> {
    check_pair(est, gt)?;
    ensure_ssim_size(est.shape())?;
    let scales = ms_ssim_scales(est.shape()[2], est.shape()[3]);
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (luma(est), luma(gt));
    let mut log_sum: Option<Var> = None;
    for s in 0..scales {
        let (ssim_map, cs_map) = ssim_maps(&x, &y);
        let last = s + 1 == scales;
        let term = if last { ssim_map } else { cs_map };
        let per_image = term.mean_axes(&[1, 2, 3]).clamp_min(MS_SSIM_FLOOR);
        let weighted = per_image.ln().mul_scalar(MS_SSIM_WEIGHTS[s] / total);
        log_sum = Some(match log_sum {
            Some(a) => a.add(&weighted),
            None => weighted,
        });
        if !last {
            x = avg_pool2(&x);
            y = avg_pool2(&y);
        }
    }
    Ok(log_sum.expect("at least one scale").exp().mean_all())
}

pub fn ssim_loss(est: &Var, gt: &Var, variant: SsimVariant) -> Result<Var> {
    let s = match variant {
        SsimVariant::Ssim => ssim(est, gt)?,
        SsimVariant::MsSsim => ms_ssim(est, gt)?,
    };
    Ok(s.neg().add_scalar(1.0))
}

/// Mean over 16×16 luma regions (edge regions partial) of `|μ − E|`.
pub fn exposure_loss(est: &Var, target: f64) -> Var {
    tile_mean(&luma(est), EXPOSURE_TILE).add_scalar(-target).abs().mean_all()
}

/// Squared forward differences summed, divided by the element count.
pub fn tv_loss(est: &Var) -> Var {
    let (n, c, h, w) = est.value().dims4();
    let count = (n * c * h * w) as f64;
    let mut total = Var::constant(Tensor::scalar(0.0));
    if w > 1 {
        let dx = est.narrow(3, 1, w - 1).sub(&est.narrow(3, 0, w - 1));
        total = total.add(&dx.square().sum_all());
    }
    if h > 1 {
        let dy = est.narrow(2, 1, h - 1).sub(&est.narrow(2, 0, h - 1));
        total = total.add(&dy.square().sum_all());
    }
    total.mul_scalar(1.0 / count)
}

/// Circular hue distance plus saturation difference, averaged over pixels.
pub fn hsv_loss(est: &Var, gt: &Var, lambda_hue: f64, lambda_sat: f64) -> Result<Var> {
    check_pair(est, gt)?;
    let (e, g) = (hue_saturation(est), hue_saturation(gt));
    let dh = e.narrow(1, 0, 1).sub(&g.narrow(1, 0, 1)).abs();
    let circ = dh.minimum(&dh.neg().add_scalar(2.0 * PI));
    let ds = e.narrow(1, 1, 1).sub(&g.narrow(1, 1, 1)).abs();
    Ok(circ.mean_all().mul_scalar(lambda_hue).add(&ds.mean_all().mul_scalar(lambda_sat)))
}

/// Total objective with its unweighted terms; disabled terms are `None`.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Var,
    pub terms: Vec<(&'static str, Option<Var>)>,
}

impl LossBreakdown {
    pub fn total_value(&self) -> f64 {
        self.total.value().data()[0]
    }

    pub fn term_value(&self, name: &str) -> Option<f64> {
        self.terms
            .iter()
            .find(|(n, _)| *n == name)
            .and_then(|(_, v)| v.as_ref().map(|v| v.value().data()[0]))
    }

    /// First term whose value is not finite.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms
            .iter()
            .find(|(_, v)| v.as_ref().is_some_and(|v| !v.value().data()[0].is_finite()))
            .map(|(n, _)| *n)
    }
}

pub fn total_loss(est: &Var, gt: &Var, w: &LossWeights) -> Result<LossBreakdown> {
    check_pair(est, gt)?;
    let mut terms = Vec::with_capacity(TERMS.len());
    let mut total = Var::constant(Tensor::scalar(0.0));
    for name in TERMS {
        if !w.enabled(name) {
            terms.push((name, None));
            continue;
        }
        let v = match name {
            "l1" => pixel_loss(est, gt, w.pixel)?,
            "ssim" => ssim_loss(est, gt, w.structure)?,
            "exp" => exposure_loss(est, w.exposure),
            "tv" => tv_loss(est),
            _ => hsv_loss(est, gt, w.lambda_hue, w.lambda_sat)?,
        };
        total = total.add(&v.mul_scalar(w.factor(name)));
        terms.push((name, Some(v)));
    }
    Ok(LossBreakdown { total, terms })
}

/// Per-term values by name; `None` for a disabled term.
pub type TermValues = Vec<(&'static str, Option<f64>)>;

/// Value-only evaluation on images (no graph is recorded).
pub fn image_losses(est: &Image, gt: &Image, w: &LossWeights) -> Result<(f64, TermValues)> {
    no_grad(|| {
        let b = total_loss(&Var::constant(est.to_tensor()), &Var::constant(gt.to_tensor()), w)?;
        let terms = TERMS.iter().map(|n| (*n, b.term_value(n))).collect();
        Ok((b.total_value(), terms))
    })
}
