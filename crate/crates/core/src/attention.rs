//! Cross-stream windowed attention followed by channel recalibration.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::impl_parameterized;
use crate::layout::{crop, reflect_pad, window_merge_map, window_partition_map};
use crate::nn::{ChannelNorm, Conv2d, Init};

/// Single-head attention: queries from the image stream, keys and values from
/// the guidance stream. Projections are stored as bias-free 1×1 convolutions,
/// so `w_q[o, i]` maps input channel `i` to query channel `o`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub w_q: Conv2d,
    pub w_k: Conv2d,
    pub w_v: Conv2d,
    pub window: usize,
}

impl_parameterized!(CrossAttention { w_q, w_k, w_v });

impl CrossAttention {
    pub fn new(init: &mut Init, channels: usize, window: usize) -> Self {
        Self {
            w_q: Conv2d::new(init, channels, channels, 1, 1, false),
            w_k: Conv2d::new(init, channels, channels, 1, 1, false),
            w_v: Conv2d::new(init, channels, channels, 1, 1, false),
            window: window.max(1),
        }
    }

    /// Attention window actually used for an `h x w` map.
    pub fn effective_window(&self, h: usize, w: usize) -> usize {
        self.window.min(h).min(w).max(1)
    }

    pub fn forward(&self, x_img: &Var, x_feat: &Var) -> Result<Var> {
        if x_img.shape() != x_feat.shape() {
            return Err(Error::Shape(format!(
                "image stream {:?} and feature stream {:?} differ",
                x_img.shape(),
                x_feat.shape()
            )));
        }
        let (n, c, h, w) = x_img.value().dims4();
        let ws = self.effective_window(h, w);
        let (ph, pw) = ((ws - h % ws) % ws, (ws - w % ws) % ws);
        let q = reflect_pad(&self.w_q.forward(x_img), 0, ph, 0, pw);
        let kv_in = reflect_pad(x_feat, 0, ph, 0, pw);
        let k = self.w_k.forward(&kv_in);
        let v = self.w_v.forward(&kv_in);
        let shape = [n, c, h + ph, w + pw];
        let part = Rc::new(window_partition_map(shape, ws));
        let (q, k, v) = (q.sparse_map(&part), k.sparse_map(&part), v.sparse_map(&part));
        let scores = q.bmm(&k, true).mul_scalar(1.0 / (c as f64).sqrt());
        let attended = scores.softmax(2).bmm(&v, false);
        let merged = attended.sparse_map(&Rc::new(window_merge_map(shape, ws)));
        Ok(x_img.add(&crop(&merged, 0, 0, h, w)))
    }
}

/// Channel gate from pooled descriptors through a shared two-layer MLP, applied
/// to the channel-normalised input.
#[derive(Debug, Clone)]
pub struct Lca {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub norm: ChannelNorm,
}

impl_parameterized!(Lca { fc1, fc2, norm });

pub const LCA_REDUCTION: usize = 4;

impl Lca {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        let hidden = (channels / LCA_REDUCTION).max(1);
        Self {
            fc1: Conv2d::new(init, channels, hidden, 1, 1, false),
            fc2: Conv2d::new(init, hidden, channels, 1, 1, false),
            norm: ChannelNorm::new(channels),
        }
    }

    fn mlp(&self, d: &Var) -> Var {
        self.fc2.forward(&self.fc1.forward(d).relu())
    }

    /// `[N, C, 1, 1]` gate in `(0, 1)`.
    pub fn gate(&self, x: &Var) -> Var {
        let avg = x.mean_axes(&[2, 3]);
        let max = x.max_axes(&[2, 3]);
        self.mlp(&avg).add(&self.mlp(&max)).sigmoid()
    }

    /// Normalised input scaled by an explicit gate.
    pub fn apply_gate(&self, x: &Var, gate: &Var) -> Var {
        self.norm.forward(x).mul(gate)
    }

    pub fn forward(&self, x: &Var) -> Var {
        self.apply_gate(x, &self.gate(x))
    }
}

/// Transformer feature extraction block.
#[derive(Debug, Clone)]
pub struct Tfeb {
    pub attn: CrossAttention,
    pub lca: Lca,
}

impl_parameterized!(Tfeb { attn, lca });

impl Tfeb {
    pub fn new(init: &mut Init, channels: usize, window: usize) -> Self {
        Self {
            attn: CrossAttention::new(init, channels, window),
            lca: Lca::new(init, channels),
        }
    }

    pub fn forward(&self, x_img: &Var, x_feat: &Var) -> Result<Var> {
        Ok(self.lca.forward(&self.attn.forward(x_img, x_feat)?))
    }
}
