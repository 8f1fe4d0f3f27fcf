//! Fixed spatial re-indexing and resampling of `[N, C, H, W]` tensors, built as
//! [`SparseMap`]s so they are differentiable through [`Var::sparse_map`].

use std::rc::Rc;

use crate::autograd::{SparseMap, Var};
use crate::image::reflect_index;
use crate::tensor::Tensor;

fn idx(c: usize, h: usize, w: usize, n: usize, ch: usize, y: usize, x: usize) -> usize {
    ((n * c + ch) * h + y) * w + x
}

/// Mirror padding (edge not repeated) on the spatial axes.
pub fn reflect_pad_map(shape: [usize; 4], top: usize, bottom: usize, left: usize, right: usize) -> SparseMap {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut index = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                let sy = reflect_index(y as isize - top as isize, h);
                for x in 0..ow {
                    let sx = reflect_index(x as isize - left as isize, w);
                    index.push(idx(c, h, w, b, ch, sy, sx));
                }
            }
        }
    }
    SparseMap::gather(vec![n, c, oh, ow], n * c * h * w, index)
}

pub fn crop_map(shape: [usize; 4], top: usize, left: usize, oh: usize, ow: usize) -> SparseMap {
    let [n, c, h, w] = shape;
    assert!(top + oh <= h && left + ow <= w, "crop outside input");
    let mut index = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    index.push(idx(c, h, w, b, ch, top + y, left + x));
                }
            }
        }
    }
    SparseMap::gather(vec![n, c, oh, ow], n * c * h * w, index)
}

/// Source taps of half-pixel-centred linear interpolation along one axis.
fn linear_taps(out: usize, input: usize) -> Vec<[(usize, f64); 2]> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = src - i0 as f64;
            [(i0, 1.0 - t), (i1, t)]
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres (no corner alignment).
pub fn bilinear_map(shape: [usize; 4], oh: usize, ow: usize) -> SparseMap {
    let [n, c, h, w] = shape;
    let ty = linear_taps(oh, h);
    let tx = linear_taps(ow, w);
    let mut rows = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y_taps in &ty {
                for x_taps in &tx {
                    let mut row = Vec::with_capacity(4);
                    for &(sy, wy) in y_taps {
                        for &(sx, wx) in x_taps {
                            if wy * wx != 0.0 {
                                row.push((idx(c, h, w, b, ch, sy, sx), wy * wx));
                            }
                        }
                    }
                    rows.push(row);
                }
            }
        }
    }
    SparseMap::from_rows(vec![n, c, oh, ow], n * c * h * w, rows)
}

/// Mean over `tile x tile` blocks; edge blocks may be partial and average
/// only the pixels they contain.
pub fn tile_mean_map(shape: [usize; 4], tile: usize) -> SparseMap {
    let [n, c, h, w] = shape;
    let (th, tw) = (h.div_ceil(tile), w.div_ceil(tile));
    let mut rows = Vec::with_capacity(n * c * th * tw);
    for b in 0..n {
        for ch in 0..c {
            for ty in 0..th {
                for tx in 0..tw {
                    let ys = ty * tile..((ty + 1) * tile).min(h);
                    let xs = tx * tile..((tx + 1) * tile).min(w);
                    let count = (ys.len() * xs.len()) as f64;
                    let mut row = Vec::with_capacity(ys.len() * xs.len());
                    for y in ys {
                        for x in xs.clone() {
                            row.push((idx(c, h, w, b, ch, y, x), 1.0 / count));
                        }
                    }
                    rows.push(row);
                }
            }
        }
    }
    SparseMap::from_rows(vec![n, c, th, tw], n * c * h * w, rows)
}

/// 2x2 average pooling with stride 2 (odd trailing row/column dropped).
pub fn avg_pool2_map(shape: [usize; 4]) -> SparseMap {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut rows = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    rows.push(vec![
                        (idx(c, h, w, b, ch, 2 * y, 2 * x), 0.25),
                        (idx(c, h, w, b, ch, 2 * y, 2 * x + 1), 0.25),
                        (idx(c, h, w, b, ch, 2 * y + 1, 2 * x), 0.25),
                        (idx(c, h, w, b, ch, 2 * y + 1, 2 * x + 1), 0.25),
                    ]);
                }
            }
        }
    }
    SparseMap::from_rows(vec![n, c, oh, ow], n * c * h * w, rows)
}

/// Non-overlapping `win x win` windows as token matrices:
/// `[N, C, H, W] -> [N * (H/win) * (W/win), win * win, C]`.
pub fn window_partition_map(shape: [usize; 4], win: usize) -> SparseMap {
    let [n, c, h, w] = shape;
    assert!(h % win == 0 && w % win == 0, "spatial size must be a multiple of the window");
    let (nh, nw) = (h / win, w / win);
    let mut index = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..win {
                    for tx in 0..win {
                        for ch in 0..c {
                            index.push(idx(c, h, w, b, ch, wy * win + ty, wx * win + tx));
                        }
                    }
                }
            }
        }
    }
    SparseMap::gather(vec![n * nh * nw, win * win, c], n * c * h * w, index)
}

/// Inverse of [`window_partition_map`].
pub fn window_merge_map(shape: [usize; 4], win: usize) -> SparseMap {
    let [n, c, h, w] = shape;
    let (nh, nw) = (h / win, w / win);
    let mut index = vec![0; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let window = (b * nh + y / win) * nw + x / win;
                    let token = (y % win) * win + x % win;
                    index[idx(c, h, w, b, ch, y, x)] = (window * win * win + token) * c + ch;
                }
            }
        }
    }
    SparseMap::gather(vec![n, c, h, w], n * c * h * w, index)
}

fn shape4(x: &Var) -> [usize; 4] {
    let (n, c, h, w) = x.value().dims4();
    [n, c, h, w]
}

pub fn reflect_pad(x: &Var, top: usize, bottom: usize, left: usize, right: usize) -> Var {
    if top + bottom + left + right == 0 {
        return x.clone();
    }
    x.sparse_map(&Rc::new(reflect_pad_map(shape4(x), top, bottom, left, right)))
}

pub fn crop(x: &Var, top: usize, left: usize, oh: usize, ow: usize) -> Var {
    let s = shape4(x);
    if top == 0 && left == 0 && oh == s[2] && ow == s[3] {
        return x.clone();
    }
    x.sparse_map(&Rc::new(crop_map(s, top, left, oh, ow)))
}

pub fn resize_bilinear(x: &Var, oh: usize, ow: usize) -> Var {
    x.sparse_map(&Rc::new(bilinear_map(shape4(x), oh, ow)))
}

pub fn upsample2(x: &Var) -> Var {
    let s = shape4(x);
    resize_bilinear(x, 2 * s[2], 2 * s[3])
}

pub fn tile_mean(x: &Var, tile: usize) -> Var {
    x.sparse_map(&Rc::new(tile_mean_map(shape4(x), tile)))
}

pub fn avg_pool2(x: &Var) -> Var {
    x.sparse_map(&Rc::new(avg_pool2_map(shape4(x))))
}

/// Non-differentiable bilinear resize of a plain tensor.
pub fn resize_tensor(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = t.dims4();
    if (h, w) == (oh, ow) {
        return t.clone();
    }
    bilinear_map([n, c, h, w], oh, ow).apply(t)
}
