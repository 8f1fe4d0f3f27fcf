//! Browser demo bindings. Images cross the boundary as RGBA bytes (the
//! layout of `ImageData.data`); everything else is plain numbers.

use dstnet::color::lab_pixel;
use dstnet::data::{darken, synthetic_scene};
use dstnet::image::Image;
use dstnet::metrics::{de, eme, loe, psnr, ssim, EME_BLOCK};
use dstnet::model::curve_step;
use dstnet::priors::{color_feature, dog_feature};
use dstnet::color::srgb_to_lab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

pub fn from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<Image, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!("expected {} RGBA bytes, got {}", width * height * 4, rgba.len()));
    }
    let data = rgba.chunks_exact(4).flat_map(|p| p[..3].iter().map(|&v| v as f64 / 255.0)).collect();
    Image::new(height, width, data).map_err(|e| e.to_string())
}

pub fn to_rgba(img: &Image) -> Vec<u8> {
    let q = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    img.pixels().flat_map(|[r, g, b]| [q(r), q(g), q(b), 255]).collect()
}

fn gray_rgba(plane: &[f64]) -> Vec<u8> {
    plane.iter().flat_map(|&v| {
        let g = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        [g, g, g, 255]
    }).collect()
}

/// Seeded test scene.
#[wasm_bindgen]
pub fn scene(width: usize, height: usize, seed: u64) -> Vec<u8> {
    to_rgba(&synthetic_scene(height, width, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// `(x, LE_K(x))` samples of the iterated curve with one shared `a`, flattened.
#[wasm_bindgen]
pub fn curve_points(a: f64, iterations: u32, samples: usize) -> Vec<f64> {
    let n = samples.max(2);
    (0..n)
        .flat_map(|i| {
            let x = i as f64 / (n - 1) as f64;
            let y = (0..iterations).fold(x, |v, _| curve_step(v, a));
            [x, y]
        })
        .collect()
}

/// Applies the iterated curve with one global `a` to every channel.
#[wasm_bindgen]
pub fn apply_curve(rgba: &[u8], width: usize, height: usize, a: f64, iterations: u32) -> Result<Vec<u8>, JsError> {
    if !(-1.0..=1.0).contains(&a) {
        return Err(JsError::new("a must lie in [-1, 1]"));
    }
    let img = from_rgba(rgba, width, height).map_err(err)?;
    Ok(to_rgba(&img.map(|v| (0..iterations).fold(v, |x, _| curve_step(x, a)))))
}

/// Guidance prior as a grey image: `"structure"` (DoG on L) or `"color"` (chroma magnitude).
#[wasm_bindgen]
pub fn prior(rgba: &[u8], width: usize, height: usize, which: &str) -> Result<Vec<u8>, JsError> {
    let img = from_rgba(rgba, width, height).map_err(err)?;
    let lab = srgb_to_lab(&img);
    let plane = match which {
        "structure" => dog_feature(&lab.l, height, width),
        "color" => color_feature(&lab),
        other => return Err(JsError::new(&format!("unknown prior `{other}`"))),
    };
    Ok(gray_rgba(&plane))
}

/// Mean CIELAB lightness of an image, for the page's readout.
#[wasm_bindgen]
pub fn mean_lightness(rgba: &[u8], width: usize, height: usize) -> Result<f64, JsError> {
    let img = from_rgba(rgba, width, height).map_err(err)?;
    Ok(img.pixels().map(|p| lab_pixel(p)[0]).sum::<f64>() / img.pixel_count() as f64)
}

/// Gamma darkening plus Gaussian noise, as used for synthetic pairs.
#[wasm_bindgen]
pub fn darken_image(rgba: &[u8], width: usize, height: usize, gamma: f64, sigma: f64, seed: u64) -> Result<Vec<u8>, JsError> {
    if !(gamma > 0.0) || !(sigma >= 0.0) {
        return Err(JsError::new("gamma must be > 0 and sigma >= 0"));
    }
    let img = from_rgba(rgba, width, height).map_err(err)?;
    Ok(to_rgba(&darken(&img, gamma, sigma, &mut ChaCha8Rng::seed_from_u64(seed))))
}

/// `[psnr, ssim, loe, de, eme]` of `est` against `reference` (LOE uses it as the original).
#[wasm_bindgen]
pub fn metrics(est: &[u8], reference: &[u8], width: usize, height: usize) -> Result<Vec<f64>, JsError> {
    let a = from_rgba(est, width, height).map_err(err)?;
    let b = from_rgba(reference, width, height).map_err(err)?;
    let s = if width >= 11 && height >= 11 { ssim(&a, &b).map_err(err)? } else { f64::NAN };
    Ok(vec![psnr(&a, &b).map_err(err)?, s, loe(&a, &b).map_err(err)?, de(&a), eme(&a, EME_BLOCK).map_err(err)?])
}
