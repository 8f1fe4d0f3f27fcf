//! Multi-scale spatial fusion: fixed 3-D gradient stencils, pseudo-3D residual
//! branches at five scales, and attention-weighted branch fusion.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::impl_parameterized;
use crate::nn::{Conv2d, Init, VolumeConv};
use crate::tensor::Tensor;

pub const SCALES: [usize; 5] = [1, 3, 5, 7, 9];
pub const BRANCHES: usize = 5;

/// Second-difference and Sobel kernels on the `[depth=C, H, W]` volume, one per
/// axis, stored as `[kd, kh, kw]`. Index 0/1/2 = width/height/channel.
#[derive(Debug, Clone)]
pub struct GradientStencils {
    pub lap: [Tensor; 3],
    pub sob: [Tensor; 3],
}

impl Default for GradientStencils {
    fn default() -> Self {
        Self::new()
    }
}

impl GradientStencils {
    pub fn new() -> Self {
        let second = [1.0, -2.0, 1.0];
        let lap = [
            Tensor::from_parts(vec![1, 1, 3], second.to_vec()),
            Tensor::from_parts(vec![1, 3, 1], second.to_vec()),
            Tensor::from_parts(vec![3, 1, 1], second.to_vec()),
        ];
        let sob = [sobel(2), sobel(1), sobel(0)];
        Self { lap, sob }
    }
}

/// 3×3×3 Sobel: central difference along `axis` (0 = depth, 1 = rows, 2 = cols),
/// `[1, 2, 1]` smoothing along the other two. Scaled by 1/32 (unit-sum smoothing,
/// half-step difference) so the response estimates a per-step derivative.
fn sobel(axis: usize) -> Tensor {
    const DERIV: [f64; 3] = [-0.5, 0.0, 0.5];
    const SMOOTH: [f64; 3] = [0.25, 0.5, 0.25];
    let mut data = Vec::with_capacity(27);
    for d in 0..3 {
        for y in 0..3 {
            for x in 0..3 {
                let idx = [d, y, x];
                let v: f64 = (0..3)
                    .map(|a| if a == axis { DERIV[idx[a]] } else { SMOOTH[idx[a]] })
                    .product();
                data.push(v);
            }
        }
    }
    Tensor::from_parts(vec![3, 3, 3], data)
}

fn stencil_energy(x: &Var, kernels: &[Tensor; 3]) -> Var {
    let mut acc: Option<Var> = None;
    for k in kernels {
        let r = x.conv3d_volume(&Var::constant(k.clone()), None).abs();
        acc = Some(match acc {
            Some(a) => a.add(&r),
            None => r,
        });
    }
    acc.expect("three stencils").gelu()
}

/// `(F_lap, F_sob)`, each `GELU(Σ_d |x ⊗ K_d|)` at the input shape.
pub fn p3d_gradients(x: &Var, s: &GradientStencils) -> Result<(Var, Var)> {
    let c = x.shape()[1];
    if c < 3 {
        return Err(Error::Shape(format!("gradient stencils need at least 3 channels, got {c}")));
    }
    Ok((stencil_energy(x, &s.lap), stencil_energy(x, &s.sob)))
}

/// Pseudo-3D residual block at one kernel scale.
#[derive(Debug, Clone)]
pub struct P3dBlock {
    pub ch: VolumeConv,
    pub cw: VolumeConv,
    pub hw: VolumeConv,
    pub origin: VolumeConv,
    pub mix: Conv2d,
    pub k: usize,
}

impl_parameterized!(P3dBlock { ch, cw, hw, origin, mix });

impl P3dBlock {
    pub fn new(init: &mut Init, channels: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "P3D scale must be odd");
        Self {
            ch: VolumeConv::new(init, [k, k, 1]),
            cw: VolumeConv::new(init, [k, 1, k]),
            hw: VolumeConv::new(init, [1, k, k]),
            origin: VolumeConv::new(init, [1, 1, 1]),
            mix: Conv2d::new(init, channels, channels, 3, 1, true),
            k,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let paths = [&self.ch, &self.cw, &self.hw, &self.origin];
        let sum = paths
            .iter()
            .map(|p| p.forward(x).relu())
            .reduce(|a, b| a.add(&b))
            .expect("four paths");
        self.mix.forward(&sum).add(x).relu()
    }

    pub fn zero_all(&mut self) {
        for p in [&mut self.ch, &mut self.cw, &mut self.hw, &mut self.origin] {
            p.zero_all();
        }
        self.mix.zero_all();
    }
}

/// Five-branch attention feature fusion.
#[derive(Debug, Clone)]
pub struct Maff {
    pub local: Conv2d,
    pub global: Conv2d,
    pub se1: Conv2d,
    pub se2: Conv2d,
    pub spatial: Conv2d,
    pub rep: Vec<Conv2d>,
    pub psi: Conv2d,
    pub out: Conv2d,
}

impl_parameterized!(Maff { local, global, se1, se2, spatial, rep, psi, out });

pub const SE_REDUCTION: usize = 4;

impl Maff {
    pub fn new(init: &mut Init, c: usize) -> Self {
        let hidden = (c / SE_REDUCTION).max(1);
        Self {
            local: Conv2d::new(init, c, c, 3, 1, true),
            global: Conv2d::new(init, c, c, 1, 1, true),
            se1: Conv2d::new(init, c, hidden, 1, 1, false),
            se2: Conv2d::new(init, hidden, c, 1, 1, false),
            spatial: Conv2d::new(init, 2, 1, 7, 1, false),
            rep: (0..BRANCHES).map(|_| Conv2d::new(init, c, c, 1, 1, true)).collect(),
            psi: Conv2d::new(init, BRANCHES * c, BRANCHES, 1, 1, true),
            out: Conv2d::new(init, c, c, 1, 1, true),
        }
    }

    /// Channel (squeeze-excitation) then spatial attention.
    pub fn attend(&self, u: &Var) -> Var {
        let s = self
            .se2
            .forward(&self.se1.forward(&u.mean_axes(&[2, 3])).relu())
            .sigmoid();
        let u = u.mul(&s);
        let pooled = Var::concat(&[u.mean_axes(&[1]), u.max_axes(&[1])], 1);
        let m = self.spatial.forward(&pooled).sigmoid();
        u.mul(&m)
    }

    /// Per-pixel branch weights `[N, 5, H, W]`, softmax-normalised over branches.
    pub fn weights(&self, branches: &[Var]) -> Result<Var> {
        if branches.len() != BRANCHES {
            return Err(Error::Shape(format!("fusion needs {BRANCHES} branches, got {}", branches.len())));
        }
        let shape = branches[0].shape();
        if let Some(b) = branches.iter().find(|b| b.shape() != shape) {
            return Err(Error::Shape(format!("branch shapes differ: {:?} vs {:?}", shape, b.shape())));
        }
        let f_in = branches[1..].iter().fold(branches[0].clone(), |a, b| a.add(b));
        let ctx = self.global.forward(&f_in.mean_axes(&[2, 3]));
        let f_att = self.attend(&self.local.forward(&f_in).add(&ctx).relu());
        let gated: Vec<Var> = self
            .rep
            .iter()
            .zip(branches)
            .map(|(rep, f)| rep.forward(&f_att).sigmoid().mul(f))
            .collect();
        Ok(self.psi.forward(&Var::concat(&gated, 1)).softmax(1))
    }

    pub fn forward(&self, branches: &[Var]) -> Result<Var> {
        let w = self.weights(branches)?;
        let fused = branches
            .iter()
            .enumerate()
            .map(|(i, f)| w.narrow(1, i, 1).mul(f))
            .reduce(|a, b| a.add(&b))
            .expect("five branches");
        Ok(self.out.forward(&fused))
    }

    pub fn zero_all(&mut self) {
        for c in [&mut self.local, &mut self.global, &mut self.se1, &mut self.se2, &mut self.spatial, &mut self.psi, &mut self.out] {
            c.zero_all();
        }
        self.rep.iter_mut().for_each(Conv2d::zero_all);
    }
}

/// Where a traced tensor was observed inside [`Msfb::forward_traced`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracePoint {
    /// Input handed to scale branch `branch` in stage `stage` (1 or 2).
    BranchInput { stage: usize, branch: usize },
    H1,
    H2,
}

#[derive(Debug, Clone)]
pub struct Msfb {
    pub blocks: Vec<P3dBlock>,
    pub maff1: Maff,
    pub maff2: Maff,
    pub maff3: Maff,
    pub res: Conv2d,
    pub stencils: GradientStencils,
}

impl_parameterized!(Msfb { blocks, maff1, maff2, maff3, res });

impl Msfb {
    pub fn new(init: &mut Init, c: usize) -> Self {
        Self {
            blocks: SCALES.iter().map(|&k| P3dBlock::new(init, c, k)).collect(),
            maff1: Maff::new(init, c),
            maff2: Maff::new(init, c),
            maff3: Maff::new(init, c),
            res: Conv2d::new(init, c, c, 1, 1, true),
            stencils: GradientStencils::new(),
        }
    }

    fn scales(&self, x: &Var, stage: usize, hook: &mut dyn FnMut(TracePoint, &Var)) -> Vec<Var> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(branch, b)| {
                hook(TracePoint::BranchInput { stage, branch }, x);
                b.forward(x)
            })
            .collect()
    }

    pub fn forward_traced(&self, x: &Var, hook: &mut dyn FnMut(TracePoint, &Var)) -> Result<Var> {
        let (f_lap, f_sob) = p3d_gradients(x, &self.stencils)?;
        let h1 = self.maff1.forward(&self.scales(x, 1, hook))?.add(&f_lap).add(x);
        hook(TracePoint::H1, &h1);
        let h2 = self
            .maff2
            .forward(&self.scales(&h1, 2, hook))?
            .add(&f_sob)
            .add(x)
            .add(&h1);
        hook(TracePoint::H2, &h2);
        let fused = self.maff3.forward(&[h2, h1, f_lap, f_sob, x.clone()])?;
        Ok(fused.add(&self.res.forward(x).gelu()))
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        self.forward_traced(x, &mut |_, _| {})
    }

    /// Zeroes every fusion and P3D parameter; the residual projection stays.
    pub fn zero_fusion(&mut self) {
        self.blocks.iter_mut().for_each(P3dBlock::zero_all);
        for m in [&mut self.maff1, &mut self.maff2, &mut self.maff3] {
            m.zero_all();
        }
    }
}
