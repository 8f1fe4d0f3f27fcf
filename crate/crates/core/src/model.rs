//! The dual-stream enhancement network: guidance priors, a three-level
//! encoder–decoder with cross-stream attention and multi-scale fusion, an
//! iterative curve stage and a residual reconstruction head.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::Tfeb;
use crate::autograd::{no_grad, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::impl_parameterized;
use crate::layout::{crop, reflect_pad, upsample2};
use crate::msfb::Msfb;
use crate::nn::{Conv2d, Init, Parameterized};
use crate::priors::{guidance_batch, Ablation, ConvExtractor, TextureExtractor};
use crate::tensor::Tensor;

pub const LEVELS: usize = 3;
/// Input sides are padded to a multiple of this (two stride-2 stages).
pub const ALIGN: usize = 1 << (LEVELS - 1);
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_width: usize,
    pub curve_iters: usize,
    pub attn_window: usize,
    pub c_tex: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            curve_iters: 4,
            attn_window: 16,
            c_tex: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.curve_iters == 0 {
            return Err(Error::Config("model.curve_iters must be at least 1".into()));
        }
        if self.base_width < 3 {
            return Err(Error::Config("model.base_width must be at least 3 (gradient stencils span 3 channels)".into()));
        }
        if self.c_tex == 0 || self.attn_window == 0 {
            return Err(Error::Config("model.c_tex and model.attn_window must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; identifies parameter layout and init.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        [self.base_width, 2 * self.base_width, 4 * self.base_width]
    }

    pub fn guidance_channels(&self) -> usize {
        2 + self.c_tex
    }
}

/// `K` groups of per-colour curve maps, stored as one `[N, 3K, H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveParams {
    pub maps: Tensor,
}

impl CurveParams {
    pub fn iterations(&self) -> usize {
        self.maps.shape()[1] / 3
    }

    /// `[N, 3, H, W]` maps of iteration `n` (0-based).
    pub fn group(&self, n: usize) -> Tensor {
        self.maps.channels(3 * n, 3)
    }
}

/// One curve iteration on a scalar: `x + a·(x − x²)`.
pub fn curve_step(x: f64, a: f64) -> f64 {
    x + a * (x - x * x)
}

/// Applies `K` iterations of the quadratic curve; `a` is `[N, 3K, H, W]`.
pub fn apply_curves(img: &Var, a: &Var) -> Var {
    let k = a.shape()[1] / 3;
    let mut le = img.clone();
    for n in 0..k {
        let an = a.narrow(1, 3 * n, 3);
        le = le.add(&an.mul(&le.sub(&le.square())));
    }
    le
}

/// Plain-value form of [`apply_curves`] on an image.
pub fn apply_curves_image(img: &Image, a: &CurveParams) -> Result<Image> {
    let t = img.to_tensor();
    if a.maps.shape()[2..] != t.shape()[2..] {
        return Err(Error::Shape(format!("curve maps {:?} vs image {:?}", a.maps.shape(), t.shape())));
    }
    let out = no_grad(|| apply_curves(&Var::constant(t), &Var::constant(a.maps.clone())).value().clone());
    Image::from_tensor(&out, 0)
}

fn conv_gelu(conv: &Conv2d, x: &Var) -> Var {
    conv.forward(x).gelu()
}

/// Every intermediate the rest of the crate needs from one pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Final image `[N, 3, H, W]` in `(0, 1)`.
    pub output: Var,
    /// Curve-stage image.
    pub curve: Var,
    /// Curve maps `[N, 3K, H, W]` in `(−1, 1)`.
    pub curve_params: Var,
    pub x_up3: Var,
    pub y_up3: Var,
}

#[derive(Debug, Clone)]
pub struct EnhanceOutput {
    pub image: Image,
    pub curve_stage: Image,
    pub params: CurveParams,
}

/// Aligned network input with its (already ablated) guidance.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub input: Tensor,
    pub guidance: Tensor,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct DstNet {
    pub config: ModelConfig,
    pub extractor: ConvExtractor,

    pub guide_proj: Conv2d,
    pub feat_proj: Conv2d,
    pub img_in: Conv2d,
    pub img_down: Vec<Conv2d>,
    pub feat_enc: Vec<Conv2d>,
    pub tfeb: Vec<Tfeb>,
    pub msfb: Vec<Msfb>,
    pub img_up: Vec<Conv2d>,
    pub feat_up: Vec<Conv2d>,
    pub boost: Msfb,
    pub curve_head: Conv2d,
    pub x_out: Conv2d,
    pub y_out: Conv2d,
    pub m_end1: Conv2d,
    pub m_end2: Conv2d,
    pub conv_out: Conv2d,
}

impl_parameterized!(DstNet {
    guide_proj, feat_proj, img_in, img_down, feat_enc, tfeb, msfb, img_up, feat_up,
    boost, curve_head, x_out, y_out, m_end1, m_end2, conv_out
});

impl DstNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.seed);
        let w = config.widths();
        let c0 = w[0];
        let g = config.guidance_channels();
        let win = config.attn_window;
        // extractor weights get their own stream so changing it never shifts the network init
        let extractor = ConvExtractor::seeded(config.c_tex, config.seed ^ 0x7e57_u64);
        let img_down = (1..LEVELS).map(|l| Conv2d::new(&mut init, w[l - 1], w[l], 3, 2, true)).collect();
        let feat_enc = (0..LEVELS)
            .map(|l| {
                let c_in = if l == 0 { c0 } else { w[l - 1] };
                Conv2d::new(&mut init, c_in, w[l], 3, if l == 0 { 1 } else { 2 }, true)
            })
            .collect();
        let tfeb = (0..LEVELS).map(|l| Tfeb::new(&mut init, w[l], win)).collect();
        let msfb = (0..LEVELS).map(|l| Msfb::new(&mut init, w[l])).collect();
        // decoder level 1 sits at the bottleneck (no upsampling), levels 2-3 go up
        let up = |init: &mut Init| -> Vec<Conv2d> {
            vec![
                Conv2d::new(init, w[2], w[2], 1, 1, true),
                Conv2d::new(init, w[2], w[1], 1, 1, true),
                Conv2d::new(init, w[1], w[0], 1, 1, true),
            ]
        };
        let img_up = up(&mut init);
        let feat_up = up(&mut init);
        let k = config.curve_iters;
        Ok(Self {
            guide_proj: Conv2d::new(&mut init, g, c0, 1, 1, true),
            feat_proj: Conv2d::new(&mut init, g, 3, 1, 1, true),
            img_in: Conv2d::new(&mut init, 3, c0, 3, 1, true),
            img_down,
            feat_enc,
            tfeb,
            msfb,
            img_up,
            feat_up,
            boost: Msfb::new(&mut init, c0),
            curve_head: Conv2d::new(&mut init, c0, 3 * k, 1, 1, true),
            x_out: Conv2d::new(&mut init, c0, c0, 3, 1, true),
            y_out: Conv2d::new(&mut init, c0, c0, 3, 1, true),
            m_end1: Conv2d::new(&mut init, 2 * c0 + 6, c0, 3, 1, true),
            m_end2: Conv2d::new(&mut init, c0, 3, 3, 1, true),
            conv_out: Conv2d::new(&mut init, 3, 3, 3, 1, true),
            extractor,
            config,
        })
    }

    /// Parameter-group label used for per-module diagnostics.
    pub fn group_of(name: &str) -> &'static str {
        let head = name.split('.').next().unwrap_or("");
        match head {
            "guide_proj" | "feat_proj" => "priors",
            "tfeb" => "attention",
            "msfb" | "boost" => "msfb",
            "curve_head" => "curve",
            "x_out" | "y_out" | "m_end1" | "m_end2" | "conv_out" => "reconstruct",
            _ => "backbone",
        }
    }

    /// Pads a `[N, 3, H, W]` batch to the alignment and computes its guidance.
    pub fn prepare(&self, x: &Tensor, ablation: Ablation) -> Result<Prepared> {
        let (_, c, h, w) = x.dims4();
        if c != 3 {
            return Err(Error::Shape(format!("expected RGB input, got {c} channels")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::TooSmall(format!("network input needs at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")));
        }
        let (ph, pw) = (h.next_multiple_of(ALIGN) - h, w.next_multiple_of(ALIGN) - w);
        let input = no_grad(|| reflect_pad(&Var::constant(x.clone()), 0, ph, 0, pw).value().clone());
        let mut guidance = guidance_batch(&input, &self.extractor as &dyn TextureExtractor)?;
        ablation.apply(&mut guidance);
        Ok(Prepared { input, guidance, height: h, width: w })
    }

    /// Curve maps from the top-level decoder features.
    pub fn curve_params(&self, x_up3: &Var, y_up3: &Var) -> Result<Var> {
        Ok(self.curve_head.forward(&self.boost.forward(&x_up3.add(y_up3))?).tanh())
    }

    /// `σ(Conv_out(M_end(Cat(X_out, Y_out, I, I_feat)) + I_curve))`.
    pub fn reconstruct(&self, x_out: &Var, y_out: &Var, img: &Var, i_feat: &Var, i_curve: &Var) -> Var {
        let cat = Var::concat(&[x_out.clone(), y_out.clone(), img.clone(), i_feat.clone()], 1);
        let fine = self.m_end2.forward(&conv_gelu(&self.m_end1, &cat));
        self.conv_out.forward(&fine.add(i_curve)).sigmoid()
    }

    /// Network pass on aligned input and guidance (both full resolution).
    pub fn forward_aligned(&self, x: &Var, guidance: &Var) -> Result<Forward> {
        let (_, _, h, w) = x.value().dims4();
        if h % ALIGN != 0 || w % ALIGN != 0 {
            return Err(Error::Shape(format!("aligned input must be a multiple of {ALIGN}, got {h}x{w}")));
        }
        if guidance.shape()[1] != self.config.guidance_channels() || guidance.shape()[2..] != x.shape()[2..] {
            return Err(Error::Shape(format!("guidance {:?} does not match input {:?}", guidance.shape(), x.shape())));
        }
        // encoder
        let mut img = conv_gelu(&self.img_in, x);
        let mut feat = self.guide_proj.forward(guidance);
        let mut img_skips = Vec::with_capacity(LEVELS);
        let mut feat_skips = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            if l > 0 {
                img = conv_gelu(&self.img_down[l - 1], &img);
            }
            feat = conv_gelu(&self.feat_enc[l], &feat);
            img = self.tfeb[l].forward(&img, &feat)?;
            img = self.msfb[l].forward(&img)?;
            img_skips.push(img.clone());
            feat_skips.push(feat.clone());
        }
        // decoder: level 1 at the bottleneck, then two ×2 bilinear steps
        let decode = |convs: &[Conv2d], skips: &[Var]| -> Var {
            let mut y = convs[0].forward(&skips[2]);
            for (conv, skip) in convs[1..].iter().zip(skips[..2].iter().rev()) {
                y = conv.forward(&upsample2(&y)).add(skip);
            }
            y
        };
        let y_up3 = decode(&self.img_up, &img_skips);
        let x_up3 = decode(&self.feat_up, &feat_skips);

        let curve_params = self.curve_params(&x_up3, &y_up3)?;
        let curve = apply_curves(x, &curve_params);
        let x_out = conv_gelu(&self.x_out, &x_up3);
        let y_out = conv_gelu(&self.y_out, &y_up3);
        let i_feat = self.feat_proj.forward(guidance);
        let output = self.reconstruct(&x_out, &y_out, x, &i_feat, &curve);
        Ok(Forward { output, curve, curve_params, x_up3, y_up3 })
    }

    /// Full pass on a prepared batch; results are cropped to the original size.
    pub fn forward_prepared(&self, p: &Prepared) -> Result<Forward> {
        let x = Var::constant(p.input.clone());
        let g = Var::constant(p.guidance.clone());
        let f = self.forward_aligned(&x, &g)?;
        let c = |v: &Var| crop(v, 0, 0, p.height, p.width);
        Ok(Forward {
            output: c(&f.output),
            curve: c(&f.curve),
            curve_params: c(&f.curve_params),
            x_up3: c(&f.x_up3),
            y_up3: c(&f.y_up3),
        })
    }

    pub fn forward_batch(&self, x: &Tensor, ablation: Ablation) -> Result<Forward> {
        self.forward_prepared(&self.prepare(x, ablation)?)
    }

    /// Inference on one image.
    pub fn enhance(&self, img: &Image, ablation: Ablation) -> Result<EnhanceOutput> {
        let f = no_grad(|| self.forward_batch(&img.to_tensor(), ablation))?;
        Ok(EnhanceOutput {
            image: Image::from_tensor(f.output.value(), 0)?,
            curve_stage: Image::from_tensor(f.curve.value(), 0)?,
            params: CurveParams { maps: f.curve_params.value().clone() },
        })
    }

    /// Named parameter values, in visiting order.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.named_params().into_iter().map(|(n, v)| (n, v.value().clone())).collect()
    }
}
