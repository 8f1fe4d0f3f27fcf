//! Independent nested-loop reference implementations and shared fixtures.
//! Nothing here calls into the library's numeric code; modules only supply
//! their parameter values.
#![allow(dead_code)]

use std::f64::consts::PI;

use dstnet::attention::{CrossAttention, Lca};
use dstnet::autograd::Var;
use dstnet::image::Image;
use dstnet::msfb::{Maff, Msfb, P3dBlock};
use dstnet::nn::{ChannelNorm, Conv2d, Init, VolumeConv};
use dstnet::tensor::Tensor;

pub mod suites;

// ---------------------------------------------------------------- fixtures

/// splitmix64-driven uniform values in `[lo, hi)`.
pub fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    (0..n)
        .map(|_| {
            s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = s;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            lo + (hi - lo) * (z >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

pub fn tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::new(shape, uniform(seed, shape.iter().product(), lo, hi)).unwrap()
}

pub fn var(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Var {
    Var::constant(tensor(seed, shape, lo, hi))
}

pub fn image(seed: u64, h: usize, w: usize, lo: f64, hi: f64) -> Image {
    Image::new(h, w, uniform(seed, h * w * 3, lo, hi)).unwrap()
}

/// Smooth, non-saturating fixture scene (values ≤ 0.5).
pub fn scene(kind: usize, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |y, x| {
        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
        match kind % 3 {
            0 => [0.05 + 0.4 * fx, 0.1 + 0.3 * fy, 0.25],
            1 => {
                let d = ((fy - 0.5).powi(2) + (fx - 0.4).powi(2)).sqrt();
                let v = if d < 0.25 { 0.45 } else { 0.1 };
                [v, 0.5 * v + 0.05, 0.3 - 0.4 * v]
            }
            _ => {
                let s = 0.2 + 0.15 * ((x as f64) * 0.7).sin() * ((y as f64) * 0.4).cos();
                [s, 0.35 - 0.5 * s.abs(), 0.1 + 0.3 * fx * fy]
            }
        }
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn vals(v: &Var) -> Vec<f64> {
    v.value().data().to_vec()
}

// ---------------------------------------------------------------- scalars

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

/// Plain 4-D array, NCHW.
#[derive(Clone, Debug)]
pub struct A4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl A4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, d: vec![0.0; n * c * h * w] }
    }
    pub fn from_var(v: &Var) -> Self {
        let s = v.shape();
        Self { n: s[0], c: s[1], h: s[2], w: s[3], d: vals(v) }
    }
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((b * self.c + c) * self.h + y) * self.w + x]
    }
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let (cc, h, w) = (self.c, self.h, self.w);
        self.d[((b * cc + c) * h + y) * w + x] = v;
    }
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { d: self.d.iter().map(|v| f(*v)).collect(), ..self.clone() }
    }
    pub fn zip(&self, o: &A4, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.n, self.c, self.h, self.w), (o.n, o.c, o.h, o.w));
        Self { d: self.d.iter().zip(&o.d).map(|(a, b)| f(*a, *b)).collect(), ..self.clone() }
    }
    pub fn add(&self, o: &A4) -> Self {
        self.zip(o, |a, b| a + b)
    }
    pub fn cat(parts: &[&A4]) -> Self {
        let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut out = A4::zeros(n, c, h, w);
        for b in 0..n {
            let mut c0 = 0;
            for p in parts {
                for ch in 0..p.c {
                    for y in 0..h {
                        for x in 0..w {
                            out.set(b, c0 + ch, y, x, p.at(b, ch, y, x));
                        }
                    }
                }
                c0 += p.c;
            }
        }
        out
    }
}

// ---------------------------------------------------------------- convolutions

/// Zero-padded cross-correlation.
pub fn conv2d(x: &A4, wt: &[f64], c_out: usize, k: usize, bias: Option<&[f64]>, stride: usize, pad: usize) -> A4 {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = A4::zeros(x.n, c_out, oh, ow);
    for b in 0..x.n {
        for o in 0..c_out {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for i in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += wt[((o * x.c + i) * k + ky) * k + kx] * x.at(b, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, o, y, xx, acc);
                }
            }
        }
    }
    out
}

pub fn conv(layer: &Conv2d, x: &A4) -> A4 {
    let k = layer.weight.shape()[2];
    let bias = layer.bias.as_ref().map(vals);
    conv2d(x, &vals(&layer.weight), layer.weight.shape()[0], k, bias.as_deref(), layer.stride, layer.padding.0)
}

/// Single-channel 3-D correlation over the `(C, H, W)` volume, zero padded.
pub fn vol3d(x: &A4, k: &[f64], ext: [usize; 3], bias: f64) -> A4 {
    let [kd, kh, kw] = ext;
    let mut out = A4::zeros(x.n, x.c, x.h, x.w);
    for b in 0..x.n {
        for z in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = bias;
                    for a in 0..kd {
                        for bb in 0..kh {
                            for cc in 0..kw {
                                let iz = z as isize + a as isize - (kd / 2) as isize;
                                let iy = y as isize + bb as isize - (kh / 2) as isize;
                                let ix = xx as isize + cc as isize - (kw / 2) as isize;
                                if iz < 0 || iy < 0 || ix < 0 || iz >= x.c as isize || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += k[(a * kh + bb) * kw + cc] * x.at(b, iz as usize, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, z, y, xx, acc);
                }
            }
        }
    }
    out
}

pub fn volume(layer: &VolumeConv, x: &A4) -> A4 {
    let s = layer.kernel.shape();
    vol3d(x, &vals(&layer.kernel), [s[0], s[1], s[2]], vals(&layer.bias)[0])
}

/// Mirror index without edge repetition.
pub fn mirror(i: isize, n: usize) -> usize {
    let mut i = i;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n as isize {
            i = 2 * (n as isize - 1) - i;
        } else {
            return i as usize;
        }
    }
}

// ---------------------------------------------------------------- attention

pub fn cross_attention(m: &CrossAttention, x_img: &A4, x_feat: &A4) -> A4 {
    let (n, c, h, w) = (x_img.n, x_img.c, x_img.h, x_img.w);
    let ws = m.window.min(h).min(w);
    let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
    let (wq, wk, wv) = (vals(&m.w_q.weight), vals(&m.w_k.weight), vals(&m.w_v.weight));
    let project = |wm: &[f64], src: &A4, b: usize, y: usize, x: usize| -> Vec<f64> {
        let (sy, sx) = (mirror(y as isize, h), mirror(x as isize, w));
        (0..c).map(|o| (0..c).map(|i| wm[o * c + i] * src.at(b, i, sy, sx)).sum()).collect()
    };
    let mut out = x_img.clone();
    for b in 0..n {
        for wy in (0..hp).step_by(ws) {
            for wx in (0..wp).step_by(ws) {
                let cells: Vec<(usize, usize)> =
                    (0..ws).flat_map(|dy| (0..ws).map(move |dx| (wy + dy, wx + dx))).collect();
                let keys: Vec<Vec<f64>> = cells.iter().map(|&(y, x)| project(&wk, x_feat, b, y, x)).collect();
                let values: Vec<Vec<f64>> = cells.iter().map(|&(y, x)| project(&wv, x_feat, b, y, x)).collect();
                for &(y, x) in &cells {
                    if y >= h || x >= w {
                        continue;
                    }
                    let q = project(&wq, x_img, b, y, x);
                    let scores: Vec<f64> = keys
                        .iter()
                        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for ch in 0..c {
                        let a: f64 = e.iter().zip(&values).map(|(ei, v)| ei / z * v[ch]).sum();
                        out.set(b, ch, y, x, x_img.at(b, ch, y, x) + a);
                    }
                }
            }
        }
    }
    out
}

pub fn channel_norm(m: &ChannelNorm, x: &A4) -> A4 {
    let (g, be) = (vals(&m.gamma), vals(&m.beta));
    let mut out = x.clone();
    for b in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let v: Vec<f64> = (0..x.c).map(|c| x.at(b, c, y, xx)).collect();
                let mean = v.iter().sum::<f64>() / x.c as f64;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / x.c as f64;
                for c in 0..x.c {
                    out.set(b, c, y, xx, (v[c] - mean) / (var + m.eps).sqrt() * g[c] + be[c]);
                }
            }
        }
    }
    out
}

fn matvec(wm: &[f64], rows: usize, v: &[f64]) -> Vec<f64> {
    let cols = v.len();
    (0..rows).map(|r| (0..cols).map(|i| wm[r * cols + i] * v[i]).sum()).collect()
}

pub fn lca(m: &Lca, x: &A4) -> A4 {
    let hidden = m.fc1.weight.shape()[0];
    let (w1, w2) = (vals(&m.fc1.weight), vals(&m.fc2.weight));
    let normed = channel_norm(&m.norm, x);
    let mut out = normed.clone();
    for b in 0..x.n {
        let plane = (x.h * x.w) as f64;
        let mut avg = vec![0.0; x.c];
        let mut mx = vec![f64::NEG_INFINITY; x.c];
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    avg[c] += x.at(b, c, y, xx) / plane;
                    mx[c] = mx[c].max(x.at(b, c, y, xx));
                }
            }
        }
        let mlp = |d: &[f64]| matvec(&w2, x.c, &matvec(&w1, hidden, d).into_iter().map(relu).collect::<Vec<_>>());
        let (ga, gm) = (mlp(&avg), mlp(&mx));
        for c in 0..x.c {
            let gate = sigmoid(ga[c] + gm[c]);
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(b, c, y, xx, normed.at(b, c, y, xx) * gate);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------- msfb

pub fn p3d_block(m: &P3dBlock, x: &A4) -> A4 {
    let paths = [&m.ch, &m.cw, &m.hw, &m.origin];
    let mut sum = A4::zeros(x.n, x.c, x.h, x.w);
    for pth in paths {
        sum = sum.add(&volume(pth, x).map(relu));
    }
    conv(&m.mix, &sum).add(x).map(relu)
}

pub fn maff(m: &Maff, branches: &[A4]) -> A4 {
    let f0 = &branches[0];
    let (n, c, h, w) = (f0.n, f0.c, f0.h, f0.w);
    let mut f_in = A4::zeros(n, c, h, w);
    for f in branches {
        f_in = f_in.add(f);
    }
    // context from the global average
    let mut ctx = A4::zeros(n, c, 1, 1);
    for b in 0..n {
        for ch in 0..c {
            let mean = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| f_in.at(b, ch, y, x)).sum::<f64>() / (h * w) as f64;
            ctx.set(b, ch, 0, 0, mean);
        }
    }
    let ctx = conv(&m.global, &ctx);
    let local = conv(&m.local, &f_in);
    let mut u = local.clone();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    u.set(b, ch, y, x, relu(local.at(b, ch, y, x) + ctx.at(b, ch, 0, 0)));
                }
            }
        }
    }
    // channel attention
    let hidden = m.se1.weight.shape()[0];
    let (s1, s2) = (vals(&m.se1.weight), vals(&m.se2.weight));
    for b in 0..n {
        let avg: Vec<f64> = (0..c)
            .map(|ch| (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| u.at(b, ch, y, x)).sum::<f64>() / (h * w) as f64)
            .collect();
        let s: Vec<f64> = matvec(&s2, c, &matvec(&s1, hidden, &avg).into_iter().map(relu).collect::<Vec<_>>())
            .into_iter()
            .map(sigmoid)
            .collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = u.at(b, ch, y, x) * s[ch];
                    u.set(b, ch, y, x, v);
                }
            }
        }
    }
    // spatial attention
    let mut pooled = A4::zeros(n, 2, h, w);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let v: Vec<f64> = (0..c).map(|ch| u.at(b, ch, y, x)).collect();
                pooled.set(b, 0, y, x, v.iter().sum::<f64>() / c as f64);
                pooled.set(b, 1, y, x, v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    let sm = conv(&m.spatial, &pooled);
    let mut att = u.clone();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    att.set(b, ch, y, x, u.at(b, ch, y, x) * sigmoid(sm.at(b, 0, y, x)));
                }
            }
        }
    }
    let gated: Vec<A4> = m
        .rep
        .iter()
        .zip(branches)
        .map(|(r, f)| conv(r, &att).map(sigmoid).zip(f, |g, v| g * v))
        .collect();
    let logits = conv(&m.psi, &A4::cat(&gated.iter().collect::<Vec<_>>()));
    let mut fused = A4::zeros(n, c, h, w);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let l: Vec<f64> = (0..branches.len()).map(|i| logits.at(b, i, y, x)).collect();
                let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for ch in 0..c {
                    let v: f64 = (0..branches.len()).map(|i| e[i] / z * branches[i].at(b, ch, y, x)).sum();
                    fused.set(b, ch, y, x, v);
                }
            }
        }
    }
    conv(&m.out, &fused)
}

/// Second difference `[1, −2, 1]` along one axis and a Sobel stencil
/// (`[−1, 0, 1]/2` derivative, `[1, 2, 1]/4` smoothing) along each axis.
pub fn gradient_kernels() -> (Vec<(Vec<f64>, [usize; 3])>, Vec<(Vec<f64>, [usize; 3])>) {
    let second = vec![1.0, -2.0, 1.0];
    let lap = vec![(second.clone(), [1, 1, 3]), (second.clone(), [1, 3, 1]), (second, [3, 1, 1])];
    let deriv = [-0.5, 0.0, 0.5];
    let smooth = [0.25, 0.5, 0.25];
    let sob = (0..3)
        .rev()
        .map(|axis| {
            let mut k = Vec::new();
            for d in 0..3 {
                for y in 0..3 {
                    for x in 0..3 {
                        let i = [d, y, x];
                        k.push((0..3).map(|a| if a == axis { deriv[i[a]] } else { smooth[i[a]] }).product());
                    }
                }
            }
            (k, [3, 3, 3])
        })
        .collect();
    (lap, sob)
}

pub fn stencil_energy(x: &A4, kernels: &[(Vec<f64>, [usize; 3])]) -> A4 {
    let mut acc = A4::zeros(x.n, x.c, x.h, x.w);
    for (k, ext) in kernels {
        acc = acc.add(&vol3d(x, k, *ext, 0.0).map(f64::abs));
    }
    acc.map(gelu)
}

pub fn msfb(m: &Msfb, x: &A4) -> A4 {
    let (lap_k, sob_k) = gradient_kernels();
    let f_lap = stencil_energy(x, &lap_k);
    let f_sob = stencil_energy(x, &sob_k);
    let branches = |inp: &A4| m.blocks.iter().map(|b| p3d_block(b, inp)).collect::<Vec<_>>();
    let h1 = maff(&m.maff1, &branches(x)).add(&f_lap).add(x);
    let h2 = maff(&m.maff2, &branches(&h1)).add(&f_sob).add(x).add(&h1);
    let fused = maff(&m.maff3, &[h2, h1, f_lap, f_sob, x.clone()]);
    fused.add(&conv(&m.res, x).map(gelu))
}

// ---------------------------------------------------------------- priors

pub fn gauss(sigma: f64, size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - r, x as f64 - r);
            k.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Normalised |DoG| (σ = 1, 1.6; 11×11 support; mirror padding).
pub fn dog_feature(l: &[f64], h: usize, w: usize) -> Vec<f64> {
    let size = 11;
    let (g1, g2) = (gauss(1.0, size), gauss(1.6, size));
    let r = (size / 2) as isize;
    let mut resp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..size {
                for kx in 0..size {
                    let sy = mirror(y as isize + ky as isize - r, h);
                    let sx = mirror(x as isize + kx as isize - r, w);
                    acc += (g1[ky * size + kx] - g2[ky * size + kx]) * l[sy * w + sx];
                }
            }
            resp[y * w + x] = acc.abs();
        }
    }
    let lo = resp.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = resp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-8 {
        return vec![0.0; h * w];
    }
    resp.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

// ---------------------------------------------------------------- losses

pub fn luma_of(x: &A4) -> A4 {
    let mut out = A4::zeros(x.n, 1, x.h, x.w);
    for b in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                out.set(b, 0, y, xx, 0.299 * x.at(b, 0, y, xx) + 0.587 * x.at(b, 1, y, xx) + 0.114 * x.at(b, 2, y, xx));
            }
        }
    }
    out
}

pub fn l1(est: &A4, gt: &A4) -> f64 {
    est.d.iter().zip(&gt.d).map(|(a, b)| (a - b).abs()).sum::<f64>() / est.d.len() as f64
}

pub fn smooth_l1(est: &A4, gt: &A4, delta: f64) -> f64 {
    est.d
        .iter()
        .zip(&gt.d)
        .map(|(a, b)| {
            let d = (a - b).abs();
            if d < delta {
                0.5 * d * d / delta
            } else {
                d - 0.5 * delta
            }
        })
        .sum::<f64>()
        / est.d.len() as f64
}

/// Mean SSIM and contrast-structure over valid 11×11 Gaussian windows of one plane.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    let size = 11;
    let g = gauss(1.5, size);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut ssum, mut csum, mut count) = (0.0, 0.0, 0.0);
    for oy in 0..=h - size {
        for ox in 0..=w - size {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..size {
                for kx in 0..size {
                    let k = g[ky * size + kx];
                    let (a, b) = (x[(oy + ky) * w + ox + kx], y[(oy + ky) * w + ox + kx]);
                    mx += k * a;
                    my += k * b;
                    xx += k * a * a;
                    yy += k * b * b;
                    xy += k * a * b;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            let cs = (2.0 * cov + c2) / (vx + vy + c2);
            let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            ssum += l * cs;
            csum += cs;
            count += 1.0;
        }
    }
    (ssum / count, csum / count)
}

fn plane(a: &A4, b: usize) -> Vec<f64> {
    a.d[b * a.h * a.w..(b + 1) * a.h * a.w].to_vec()
}

/// Mean SSIM of the luma planes over all windows of the batch.
pub fn ssim(est: &A4, gt: &A4) -> f64 {
    let (le, lg) = (luma_of(est), luma_of(gt));
    (0..est.n).map(|b| ssim_plane(&plane(&le, b), &plane(&lg, b), est.h, est.w).0).sum::<f64>() / est.n as f64
}

fn pool2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = (x[2 * y * w + 2 * xx] + x[2 * y * w + 2 * xx + 1] + x[(2 * y + 1) * w + 2 * xx] + x[(2 * y + 1) * w + 2 * xx + 1]) / 4.0;
        }
    }
    (out, oh, ow)
}

/// MS-SSIM with the standard five exponents truncated to the scales where an
/// 11×11 window fits, renormalised; averaged over the batch.
pub fn ms_ssim(est: &A4, gt: &A4) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let mut scales = 0;
    let mut side = est.h.min(est.w);
    while scales < 5 && side >= 11 {
        scales += 1;
        side /= 2;
    }
    let total: f64 = weights[..scales].iter().sum();
    let (le, lg) = (luma_of(est), luma_of(gt));
    let mut acc = 0.0;
    for b in 0..est.n {
        let (mut x, mut y, mut h, mut w) = (plane(&le, b), plane(&lg, b), est.h, est.w);
        let mut prod = 1.0;
        for s in 0..scales {
            let (sv, cs) = ssim_plane(&x, &y, h, w);
            let term = if s + 1 == scales { sv } else { cs };
            prod *= term.max(1e-6).powf(weights[s] / total);
            let (px, ph, pw) = pool2(&x, h, w);
            y = pool2(&y, h, w).0;
            x = px;
            h = ph;
            w = pw;
        }
        acc += prod;
    }
    acc / est.n as f64
}

pub fn exposure(est: &A4, target: f64) -> f64 {
    let l = luma_of(est);
    let tile = 16;
    let mut total = 0.0;
    let mut count = 0.0;
    for b in 0..est.n {
        for ty in (0..est.h).step_by(tile) {
            for tx in (0..est.w).step_by(tile) {
                let mut s = 0.0;
                let mut k = 0.0;
                for y in ty..(ty + tile).min(est.h) {
                    for x in tx..(tx + tile).min(est.w) {
                        s += l.at(b, 0, y, x);
                        k += 1.0;
                    }
                }
                total += (s / k - target).abs();
                count += 1.0;
            }
        }
    }
    total / count
}

pub fn tv(est: &A4) -> f64 {
    let mut s = 0.0;
    for b in 0..est.n {
        for c in 0..est.c {
            for y in 0..est.h {
                for x in 0..est.w {
                    if x + 1 < est.w {
                        s += (est.at(b, c, y, x + 1) - est.at(b, c, y, x)).powi(2);
                    }
                    if y + 1 < est.h {
                        s += (est.at(b, c, y + 1, x) - est.at(b, c, y, x)).powi(2);
                    }
                }
            }
        }
    }
    s / est.d.len() as f64
}

/// Hue in radians on `[0, 2π)` and saturation, textbook hexcone definition.
pub fn hue_sat(r: f64, g: f64, b: f64) -> (f64, f64) {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let c = mx - mn;
    let s = if mx > 0.0 { c / mx } else { 0.0 };
    if c == 0.0 {
        return (0.0, s);
    }
    let deg = if mx == r {
        60.0 * ((g - b) / c)
    } else if mx == g {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    let deg = deg.rem_euclid(360.0);
    (deg.to_radians(), s)
}

pub fn hsv(est: &A4, gt: &A4, lambda_hue: f64, lambda_sat: f64) -> f64 {
    let (mut dh, mut ds, mut k) = (0.0, 0.0, 0.0);
    for b in 0..est.n {
        for y in 0..est.h {
            for x in 0..est.w {
                let (he, se) = hue_sat(est.at(b, 0, y, x), est.at(b, 1, y, x), est.at(b, 2, y, x));
                let (hg, sg) = hue_sat(gt.at(b, 0, y, x), gt.at(b, 1, y, x), gt.at(b, 2, y, x));
                let d = (he - hg).abs();
                dh += d.min(2.0 * PI - d);
                ds += (se - sg).abs();
                k += 1.0;
            }
        }
    }
    lambda_hue * dh / k + lambda_sat * ds / k
}

// ---------------------------------------------------------------- gradient checking

/// Central finite differences of `f` at up to `max_coords` coordinates of `x`
/// (evenly strided), compared to `analytic`. Returns the norm-relative error
/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-12)` over the sampled coordinates.
pub fn fd_rel_err(x: &Tensor, analytic: &Tensor, f: &dyn Fn(&Tensor) -> f64, max_coords: usize) -> f64 {
    const H: f64 = 1e-6;
    let n = x.numel();
    let stride = n.div_ceil(max_coords.max(1)).max(1);
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for i in (0..n).step_by(stride) {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let num = (f(&xp) - f(&xm)) / (2.0 * H);
        let a = analytic.data()[i];
        diff += (a - num).powi(2);
        na += a * a;
        nn += num * num;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

pub fn init(seed: u64) -> Init {
    Init::new(seed)
}
