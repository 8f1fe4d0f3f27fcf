//! Colour-space conversions: sRGB to CIELAB (D65), hexcone HSV with hue in
//! radians, and BT.601 luma. Each has a plain per-pixel form and, where the
//! losses need it, a differentiable form over `[N, 3, H, W]` variables.

use std::f64::consts::PI;

use crate::autograd::Var;
use crate::image::Image;
use crate::tensor::Tensor;

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Linear sRGB to XYZ (D65).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    pub l: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsvImage {
    pub height: usize,
    pub width: usize,
    /// Hue in radians, `[0, 2π)`.
    pub h: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// CIELAB of one sRGB pixel. The reference white is the image of sRGB white
/// under the conversion matrix, so achromatic inputs map to `a = b = 0`.
pub fn lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    let mut white = [0.0; 3];
    for (row, m) in RGB_TO_XYZ.iter().enumerate() {
        xyz[row] = m[0] * lin[0] + m[1] * lin[1] + m[2] * lin[2];
        white[row] = m[0] + m[1] + m[2];
    }
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    [(116.0 * fy - 16.0).max(0.0), 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn srgb_to_lab(img: &Image) -> LabImage {
    let n = img.pixel_count();
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in img.pixels() {
        let [pl, pa, pb] = lab_pixel(p);
        l.push(pl);
        a.push(pa);
        b.push(pb);
    }
    LabImage { height: img.height(), width: img.width(), l, a, b }
}

/// Hexcone HSV of one pixel; hue in radians, 0 when undefined (`S = 0`).
pub fn hsv_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return [0.0, s, max];
    }
    let sector = if max == r {
        (g - b) / delta
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut h = sector * PI / 3.0;
    if h < 0.0 {
        h += 2.0 * PI;
    }
    if h >= 2.0 * PI {
        h -= 2.0 * PI;
    }
    [h, s, max]
}

/// Inverse of [`hsv_pixel`].
pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let hp = (h / (PI / 3.0)).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn rgb_to_hsv(img: &Image) -> HsvImage {
    let n = img.pixel_count();
    let (mut h, mut s, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in img.pixels() {
        let [ph, ps, pv] = hsv_pixel(p);
        h.push(ph);
        s.push(ps);
        v.push(pv);
    }
    HsvImage { height: img.height(), width: img.width(), h, s, v }
}

pub fn luma_pixel(rgb: [f64; 3]) -> f64 {
    LUMA_WEIGHTS[0] * rgb[0] + LUMA_WEIGHTS[1] * rgb[1] + LUMA_WEIGHTS[2] * rgb[2]
}

/// BT.601 luma, row-major `H x W`.
pub fn rgb_to_gray(img: &Image) -> Vec<f64> {
    img.pixels().map(luma_pixel).collect()
}

/// Differentiable luma: `[N, 3, H, W] -> [N, 1, H, W]`.
pub fn luma(x: &Var) -> Var {
    let w = Var::constant(Tensor::from_parts(vec![1, 3, 1, 1], LUMA_WEIGHTS.to_vec()));
    x.mul(&w).sum_axes(&[1])
}

/// Partial derivatives of `(hue, saturation)` with respect to `(r, g, b)`.
fn hue_sat_jacobian(rgb: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let (imax, max) = argmax3(rgb);
    let (imin, min) = argmin3(rgb, imax);
    let delta = max - min;
    let mut dh = [0.0; 3];
    let mut ds = [0.0; 3];
    if max > 0.0 {
        // s = delta / max
        ds[imax] += 1.0 / max - delta / (max * max);
        ds[imin] -= 1.0 / max;
    }
    if delta > 0.0 {
        // h = (π/3) · num / delta with num = x[p] - x[q]
        let (p, q) = match imax {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        let num = rgb[p] - rgb[q];
        let c = PI / 3.0;
        dh[p] += c / delta;
        dh[q] -= c / delta;
        let dd = -c * num / (delta * delta);
        dh[imax] += dd;
        dh[imin] -= dd;
    }
    (dh, ds)
}

fn argmax3(v: [f64; 3]) -> (usize, f64) {
    // Same tie order as `hsv_pixel`: r, then g, then b.
    let max = v[0].max(v[1]).max(v[2]);
    let i = if max == v[0] {
        0
    } else if max == v[1] {
        1
    } else {
        2
    };
    (i, max)
}

fn argmin3(v: [f64; 3], exclude: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if i != exclude && x < best.1 {
            best = (i, x);
        }
    }
    best
}

/// Differentiable hue (radians) and saturation: `[N, 3, H, W] -> [N, 2, H, W]`.
///
/// The hue gradient is zero on achromatic pixels, where hue is undefined.
pub fn hue_saturation(x: &Var) -> Var {
    let (n, c, h, w) = x.value().dims4();
    assert_eq!(c, 3, "hue_saturation expects RGB input");
    let plane = h * w;
    let xd = x.value().data();
    let mut out = vec![0.0; n * 2 * plane];
    for b in 0..n {
        for i in 0..plane {
            let rgb = [xd[(b * 3) * plane + i], xd[(b * 3 + 1) * plane + i], xd[(b * 3 + 2) * plane + i]];
            let [hh, ss, _] = hsv_pixel(rgb);
            out[(b * 2) * plane + i] = hh;
            out[(b * 2 + 1) * plane + i] = ss;
        }
    }
    let value = Tensor::from_parts(vec![n, 2, h, w], out);
    Var::from_op(value, vec![x.clone()], move |g, p, _| {
        let xd = p[0].value().data();
        let gd = g.data();
        let mut gx = vec![0.0; xd.len()];
        for b in 0..n {
            for i in 0..plane {
                let idx = [(b * 3) * plane + i, (b * 3 + 1) * plane + i, (b * 3 + 2) * plane + i];
                let (dh, ds) = hue_sat_jacobian([xd[idx[0]], xd[idx[1]], xd[idx[2]]]);
                let (gh, gs) = (gd[(b * 2) * plane + i], gd[(b * 2 + 1) * plane + i]);
                for k in 0..3 {
                    gx[idx[k]] += gh * dh[k] + gs * ds[k];
                }
            }
        }
        vec![Some(Tensor::from_parts(p[0].shape().to_vec(), gx))]
    })
}
