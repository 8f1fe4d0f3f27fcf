//! Parameter containers and the small set of layers the network is built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::tensor::Tensor;

/// Anything holding named trainable parameters.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Var)>);

    fn named_params(&self) -> Vec<(String, &Var)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Var)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.value().numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameterized for Var {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        out.push((prefix.to_string(), self));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Var)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        if let Some(v) = self {
            v.visit(prefix, out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Var)>) {
        if let Some(v) = self {
            v.visit_mut(prefix, out);
        }
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        for (i, v) in self.iter().enumerate() {
            v.visit(&join(prefix, &i.to_string()), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Var)>) {
        for (i, v) in self.iter_mut().enumerate() {
            v.visit_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`Parameterized`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_parameterized {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Parameterized for $ty {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::autograd::Var)>) {
                $( $crate::nn::Parameterized::visit(&self.$field, &$crate::nn::join_name(prefix, stringify!($field)), out); )*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut $crate::autograd::Var)>) {
                $( $crate::nn::Parameterized::visit_mut(&mut self.$field, &$crate::nn::join_name(prefix, stringify!($field)), out); )*
            }
        }
    };
}

#[doc(hidden)]
pub fn join_name(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

/// Seeded fan-in-scaled uniform initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Var {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform_bound(shape, bound)
    }

    pub fn uniform_bound(&mut self, shape: &[usize], bound: f64) -> Var {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Var::parameter(Tensor::from_parts(shape.to_vec(), data))
    }
}

/// Replaces a parameter with a fresh leaf holding `value`.
pub fn set_param(p: &mut Var, value: Tensor) {
    assert_eq!(p.shape(), value.shape(), "parameter shape is fixed");
    *p = Var::parameter(value);
}

pub fn zero_param(p: &mut Var) {
    let z = Tensor::zeros(p.shape());
    *p = Var::parameter(z);
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: (usize, usize),
}

impl_parameterized!(Conv2d { weight, bias });

impl Conv2d {
    /// Square `k x k` kernel, "same" padding at stride 1.
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Self {
        let fan_in = c_in * k * k;
        let weight = init.uniform(&[c_out, c_in, k, k], fan_in);
        let bias = bias.then(|| init.uniform(&[c_out], fan_in));
        Self {
            weight,
            bias,
            stride,
            padding: (k / 2, k / 2),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Zeroes the kernel (bias untouched).
    pub fn zero_weight(&mut self) {
        zero_param(&mut self.weight);
    }

    pub fn zero_all(&mut self) {
        zero_param(&mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            zero_param(b);
        }
    }
}

/// Single-channel 3-D convolution over a `[C, H, W]` feature volume.
#[derive(Debug, Clone)]
pub struct VolumeConv {
    pub kernel: Var,
    pub bias: Var,
}

impl_parameterized!(VolumeConv { kernel, bias });

impl VolumeConv {
    pub fn new(init: &mut Init, extent: [usize; 3]) -> Self {
        let fan_in = extent.iter().product();
        Self {
            kernel: init.uniform(&extent, fan_in),
            bias: init.uniform(&[1], fan_in),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.conv3d_volume(&self.kernel, Some(&self.bias))
    }

    pub fn zero_all(&mut self) {
        zero_param(&mut self.kernel);
        zero_param(&mut self.bias);
    }
}

/// Layer normalisation over the channel axis at every pixel, with affine.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl_parameterized!(ChannelNorm { gamma, beta });

impl ChannelNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Var::parameter(Tensor::ones(&[1, channels, 1, 1])),
            beta: Var::parameter(Tensor::zeros(&[1, channels, 1, 1])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let mean = x.mean_axes(&[1]);
        let centered = x.sub(&mean);
        let var = centered.square().mean_axes(&[1]);
        let inv = var.add_scalar(self.eps).powf(-0.5);
        centered.mul(&inv).mul(&self.gamma).add(&self.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Pair {
        a: Conv2d,
        b: Vec<VolumeConv>,
    }
    impl_parameterized!(Pair { a, b });

    #[test]
    fn names_are_dotted_paths() {
        let mut init = Init::new(1);
        let p = Pair {
            a: Conv2d::new(&mut init, 2, 3, 3, 1, true),
            b: vec![VolumeConv::new(&mut init, [3, 1, 1])],
        };
        let names: Vec<String> = p.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a.weight", "a.bias", "b.0.kernel", "b.0.bias"]);
        assert_eq!(p.param_count(), 2 * 3 * 9 + 3 + 3 + 1);
    }

    #[test]
    fn init_is_seeded() {
        let a = Init::new(7).uniform(&[4], 4);
        let b = Init::new(7).uniform(&[4], 4);
        assert_eq!(a.value(), b.value());
        assert!(a.value().data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn channel_norm_standardises_each_pixel() {
        let x = Var::constant(Tensor::new(&[1, 3, 1, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 9.0]).unwrap());
        let y = ChannelNorm::new(3).forward(&x);
        for px in 0..2 {
            let vals: Vec<f64> = (0..3).map(|c| y.value().data()[c * 2 + px]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 3.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
