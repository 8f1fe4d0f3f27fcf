//! Oracle and finite-difference suites, shared by the focused test files and
//! the acceptance runner.

use dstnet::attention::{CrossAttention, Tfeb};
use dstnet::autograd::{no_grad, Var};
use dstnet::color::srgb_to_lab;
use dstnet::loss::{exposure_loss, hsv_loss, ms_ssim, pixel_loss, ssim, tv_loss, PixelVariant};
use dstnet::model::{apply_curves, DstNet, ModelConfig};
use dstnet::msfb::{Maff, Msfb, P3dBlock};
use dstnet::nn::{set_param, Init, Parameterized};
use dstnet::priors::dog_feature;
use dstnet::tensor::Tensor;

use super::*;

/// Name, max abs error against the oracle, tolerance.
pub type OracleResult = (&'static str, f64, f64);

pub const BLOCK_TOL: f64 = 1e-5;
pub const CLOSED_FORM_TOL: f64 = 1e-9;
/// Smallest side at which an 11×11 SSIM window fits.
pub const SSIM_SIDE: usize = 11;

fn a4(v: &Var) -> A4 {
    A4::from_var(v)
}

pub fn oracle_cross_attention() -> OracleResult {
    // window 4 on 6×6 forces the bottom/right mirror padding path
    let m = CrossAttention::new(&mut Init::new(11), 4, 4);
    let (x, f) = (var(1, &[1, 4, 6, 6], -1.0, 1.0), var(2, &[1, 4, 6, 6], -1.0, 1.0));
    let got = m.forward(&x, &f).unwrap();
    ("cross_attention", max_abs_diff(&vals(&got), &cross_attention(&m, &a4(&x), &a4(&f)).d), BLOCK_TOL)
}

pub fn oracle_tfeb() -> OracleResult {
    let m = Tfeb::new(&mut Init::new(12), 4, 4);
    let (x, f) = (var(3, &[1, 4, 6, 6], -1.0, 1.0), var(4, &[1, 4, 6, 6], -1.0, 1.0));
    let got = m.forward(&x, &f).unwrap();
    let want = lca(&m.lca, &cross_attention(&m.attn, &a4(&x), &a4(&f)));
    ("tfeb", max_abs_diff(&vals(&got), &want.d), BLOCK_TOL)
}

pub fn oracle_p3d_block() -> OracleResult {
    let mut worst: f64 = 0.0;
    for (i, k) in [1usize, 3, 5].into_iter().enumerate() {
        let m = P3dBlock::new(&mut Init::new(20 + i as u64), 4, k);
        let x = var(5 + i as u64, &[1, 4, 6, 6], -1.0, 1.0);
        worst = worst.max(max_abs_diff(&vals(&m.forward(&x)), &p3d_block(&m, &a4(&x)).d));
    }
    ("p3d_block", worst, BLOCK_TOL)
}

pub fn oracle_maff() -> OracleResult {
    let m = Maff::new(&mut Init::new(30), 4);
    let branches: Vec<Var> = (0..5).map(|i| var(40 + i, &[1, 4, 6, 6], -1.0, 1.0)).collect();
    let got = m.forward(&branches).unwrap();
    let want = maff(&m, &branches.iter().map(a4).collect::<Vec<_>>());
    ("maff", max_abs_diff(&vals(&got), &want.d), BLOCK_TOL)
}

pub fn oracle_msfb() -> OracleResult {
    let m = Msfb::new(&mut Init::new(50), 4);
    let x = var(51, &[1, 4, 6, 6], -1.0, 1.0);
    let got = m.forward(&x).unwrap();
    ("msfb_forward", max_abs_diff(&vals(&got), &msfb(&m, &a4(&x)).d), BLOCK_TOL)
}

pub fn oracle_dog_feature() -> OracleResult {
    let mut worst: f64 = 0.0;
    for (seed, (h, w)) in [(60, (6, 6)), (61, (5, 7)), (62, (12, 9))] {
        let img = image(seed, h, w, 0.0, 1.0);
        let l = srgb_to_lab(&img).l;
        worst = worst.max(max_abs_diff(&dog_feature(&l, h, w), &super::dog_feature(&l, h, w)));
    }
    ("dog_feature", worst, BLOCK_TOL)
}

fn pair(seed: u64, h: usize, w: usize) -> (Var, Var) {
    (var(seed, &[1, 3, h, w], 0.0, 1.0), var(seed + 1, &[1, 3, h, w], 0.0, 1.0))
}

fn scalar(v: &Var) -> f64 {
    v.value().data()[0]
}

pub fn oracle_pixel() -> OracleResult {
    let (e, g) = pair(70, 6, 6);
    // small offsets so both SmoothL1 branches are exercised
    let g2 = Var::constant(Tensor::new(&[1, 3, 6, 6], vals(&e).iter().zip(uniform(72, 108, -0.02, 0.02)).map(|(a, d)| a + d).collect()).unwrap());
    let mut worst: f64 = 0.0;
    for gt in [&g, &g2] {
        let (ea, ga) = (a4(&e), a4(gt));
        worst = worst.max((scalar(&pixel_loss(&e, gt, PixelVariant::L1).unwrap()) - l1(&ea, &ga)).abs());
        worst = worst.max((scalar(&pixel_loss(&e, gt, PixelVariant::SmoothL1).unwrap()) - smooth_l1(&ea, &ga, 0.01)).abs());
    }
    ("loss.pixel (1x3x6x6)", worst, CLOSED_FORM_TOL)
}

pub fn oracle_ssim() -> OracleResult {
    let mut worst: f64 = 0.0;
    for (seed, side) in [(80, SSIM_SIDE), (82, 14)] {
        let (e, g) = pair(seed, side, side);
        worst = worst.max((scalar(&ssim(&e, &g).unwrap()) - super::ssim(&a4(&e), &a4(&g))).abs());
    }
    ("loss.ssim (1x3x11x11, 1x3x14x14)", worst, CLOSED_FORM_TOL)
}

pub fn oracle_ms_ssim() -> OracleResult {
    let mut worst: f64 = 0.0;
    // 11 → one scale, 23 → two, 46 → three
    for (seed, side) in [(90, SSIM_SIDE), (92, 23), (94, 46)] {
        let (e, g) = pair(seed, side, side);
        // correlated pair keeps every scale's cs positive
        let g = Var::constant(Tensor::new(e.shape(), vals(&e).iter().zip(vals(&g)).map(|(a, b)| 0.7 * a + 0.3 * b).collect()).unwrap());
        worst = worst.max((scalar(&ms_ssim(&e, &g).unwrap()) - super::ms_ssim(&a4(&e), &a4(&g))).abs());
    }
    ("loss.ms_ssim (11/23/46 px)", worst, CLOSED_FORM_TOL)
}

pub fn oracle_exposure() -> OracleResult {
    let mut worst: f64 = 0.0;
    for (seed, (h, w)) in [(100, (6, 6)), (101, (20, 35))] {
        let e = var(seed, &[1, 3, h, w], 0.0, 1.0);
        worst = worst.max((scalar(&exposure_loss(&e, 0.6)) - exposure(&a4(&e), 0.6)).abs());
    }
    ("loss.exposure (1x3x6x6, 1x3x20x35)", worst, CLOSED_FORM_TOL)
}

pub fn oracle_tv() -> OracleResult {
    let e = var(110, &[1, 3, 6, 6], 0.0, 1.0);
    ("loss.tv (1x3x6x6)", (scalar(&tv_loss(&e)) - tv(&a4(&e))).abs(), CLOSED_FORM_TOL)
}

pub fn oracle_hsv() -> OracleResult {
    let (e, g) = pair(120, 6, 6);
    let got = scalar(&hsv_loss(&e, &g, 0.7, 1.3).unwrap());
    ("loss.hsv (1x3x6x6)", (got - hsv(&a4(&e), &a4(&g), 0.7, 1.3)).abs(), CLOSED_FORM_TOL)
}

pub fn oracle_suite() -> Vec<OracleResult> {
    vec![
        oracle_cross_attention(),
        oracle_tfeb(),
        oracle_p3d_block(),
        oracle_maff(),
        oracle_msfb(),
        oracle_dog_feature(),
        oracle_pixel(),
        oracle_ssim(),
        oracle_ms_ssim(),
        oracle_exposure(),
        oracle_tv(),
        oracle_hsv(),
    ]
}

// ---------------------------------------------------------------- gradients

pub const GRAD_TOL: f64 = 1e-3;
const COORDS: usize = 10;

/// Worst norm-relative FD error over every input and every parameter whose
/// name passes `filter`. `f` maps (module, inputs) to an output that is
/// projected onto fixed random weights to form the scalar objective.
pub fn grad_check<M: Parameterized + Clone>(
    module: &M,
    inputs: &[Tensor],
    filter: &dyn Fn(&str) -> bool,
    f: &dyn Fn(&M, &[Var]) -> Var,
) -> (f64, String) {
    let out_shape = no_grad(|| f(module, &inputs.iter().cloned().map(Var::constant).collect::<Vec<_>>())).shape().to_vec();
    let proj = Var::constant(tensor(999, &out_shape, -1.0, 1.0));
    let objective = |m: &M, xs: &[Var]| f(m, xs).mul(&proj).sum_all();

    let leaves: Vec<Var> = inputs.iter().cloned().map(Var::parameter).collect();
    let grads = objective(module, &leaves).backward();
    let zero = |t: &Tensor| Tensor::zeros(t.shape());

    let mut worst = (0.0, String::new());
    let mut record = |name: String, e: f64| {
        if e > worst.0 || worst.1.is_empty() {
            worst = (e.max(worst.0), if e >= worst.0 { name } else { worst.1.clone() });
        }
    };
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[i]).cloned().unwrap_or_else(|| zero(x));
        let fx = |xi: &Tensor| {
            no_grad(|| {
                let xs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| Var::constant(if j == i { xi.clone() } else { t.clone() }))
                    .collect();
                objective(module, &xs).value().data()[0]
            })
        };
        record(format!("input{i}"), fd_rel_err(x, &analytic, &fx, COORDS));
    }
    let consts: Vec<Var> = inputs.iter().cloned().map(Var::constant).collect();
    let params = module.named_params();
    for (pi, (name, pv)) in params.iter().enumerate() {
        if !filter(name) {
            continue;
        }
        let analytic = grads.get(pv).cloned().unwrap_or_else(|| zero(pv.value()));
        let fp = |t: &Tensor| {
            let mut m = module.clone();
            set_param(m.named_params_mut()[pi].1, t.clone());
            no_grad(|| objective(&m, &consts).value().data()[0])
        };
        record(name.clone(), fd_rel_err(pv.value(), &analytic, &fp, COORDS));
    }
    worst
}

/// Name, worst relative error, worst tensor.
pub type GradResult = (&'static str, f64, String);

#[derive(Clone)]
struct NoParams;
impl Parameterized for NoParams {
    fn visit<'a>(&'a self, _: &str, _: &mut Vec<(String, &'a Var)>) {}
    fn visit_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Var)>) {}
}

fn loss_grad(name: &'static str, side: usize, f: fn(&Var, &Var) -> Var) -> GradResult {
    let est = tensor(200, &[1, 3, side, side], 0.05, 0.95);
    // correlated reference keeps SSIM terms away from the clamp
    let gt = Tensor::new(est.shape(), est.data().iter().zip(uniform(201, est.numel(), 0.05, 0.95)).map(|(a, b)| 0.6 * a + 0.4 * b).collect()).unwrap();
    let gtv = Var::constant(gt);
    let (e, w) = grad_check(&NoParams, &[est], &|_| true, &|_, xs| f(&xs[0], &gtv));
    (name, e, w)
}

pub fn grad_losses() -> Vec<GradResult> {
    vec![
        loss_grad("loss.l1 (6x6)", 6, |e, g| pixel_loss(e, g, PixelVariant::L1).unwrap()),
        loss_grad("loss.smooth_l1 (6x6)", 6, |e, g| pixel_loss(e, g, PixelVariant::SmoothL1).unwrap()),
        loss_grad("loss.ssim (11x11)", SSIM_SIDE, |e, g| ssim(e, g).unwrap()),
        loss_grad("loss.ms_ssim (23x23, 2 scales)", 23, |e, g| ms_ssim(e, g).unwrap()),
        loss_grad("loss.exposure (6x6)", 6, |e, _| exposure_loss(e, 0.6)),
        loss_grad("loss.tv (6x6)", 6, |e, _| tv_loss(e)),
        loss_grad("loss.hsv (6x6)", 6, |e, g| hsv_loss(e, g, 1.0, 1.0).unwrap()),
    ]
}

pub fn grad_tfeb() -> GradResult {
    let m = Tfeb::new(&mut Init::new(210), 4, 4);
    let xs = [tensor(211, &[1, 4, 6, 6], -1.0, 1.0), tensor(212, &[1, 4, 6, 6], -1.0, 1.0)];
    let (e, w) = grad_check(&m, &xs, &|_| true, &|m, x| m.forward(&x[0], &x[1]).unwrap());
    ("tfeb (1x4x6x6)", e, w)
}

pub fn grad_msfb() -> GradResult {
    let m = Msfb::new(&mut Init::new(220), 4);
    let xs = [tensor(221, &[1, 4, 6, 6], -1.0, 1.0)];
    let (e, w) = grad_check(&m, &xs, &|_| true, &|m, x| m.forward(&x[0]).unwrap());
    ("msfb (1x4x6x6)", e, w)
}

fn tiny_net(seed: u64) -> DstNet {
    DstNet::new(ModelConfig { base_width: 4, curve_iters: 2, attn_window: 4, c_tex: 4, seed }).unwrap()
}

pub fn grad_curve_head() -> GradResult {
    let net = tiny_net(230);
    let xs = [tensor(231, &[1, 4, 8, 8], -1.0, 1.0), tensor(232, &[1, 4, 8, 8], -1.0, 1.0)];
    let (e, w) = grad_check(
        &net,
        &xs,
        &|n| n.starts_with("boost") || n.starts_with("curve_head"),
        &|m, x| m.curve_params(&x[0], &x[1]).unwrap(),
    );
    ("curve head (1x4x8x8)", e, w)
}

pub fn grad_curve_apply() -> GradResult {
    let xs = [tensor(240, &[1, 3, 6, 6], 0.0, 1.0), tensor(241, &[1, 12, 6, 6], -0.99, 0.99)];
    let (e, w) = grad_check(&NoParams, &xs, &|_| true, &|_, x| apply_curves(&x[0], &x[1]));
    ("curve iteration (K=4, 6x6)", e, w)
}

pub fn grad_reconstruct() -> GradResult {
    let net = tiny_net(250);
    let xs = [
        tensor(251, &[1, 4, 8, 8], -1.0, 1.0),
        tensor(252, &[1, 4, 8, 8], -1.0, 1.0),
        tensor(253, &[1, 3, 8, 8], 0.0, 1.0),
        tensor(254, &[1, 3, 8, 8], -1.0, 1.0),
        tensor(255, &[1, 3, 8, 8], 0.0, 1.0),
    ];
    let group = |n: &str| DstNet::group_of(n) == "reconstruct";
    let (e, w) = grad_check(&net, &xs, &group, &|m, x| m.reconstruct(&x[0], &x[1], &x[2], &x[3], &x[4]));
    ("reconstruct (1x4x8x8)", e, w)
}

pub fn gradient_suite() -> Vec<GradResult> {
    let mut v = grad_losses();
    v.extend([grad_tfeb(), grad_msfb(), grad_curve_head(), grad_curve_apply(), grad_reconstruct()]);
    v
}
