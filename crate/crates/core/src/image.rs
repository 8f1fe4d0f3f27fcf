use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB image with interleaved `H x W x 3` samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} samples, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from a per-pixel function; samples are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn ensure_min_size(&self, min: usize, what: &str) -> Result<()> {
        if self.height < min || self.width < min {
            return Err(Error::TooSmall(format!(
                "{what} needs at least {min}x{min}, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// `[1, 3, H, W]` planar tensor.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.pixel_count();
        let mut data = vec![0.0; 3 * plane];
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = p[c];
            }
        }
        Tensor::from_parts(vec![1, 3, self.height, self.width], data)
    }

    /// `[N, 3, H, W]` batch of equally sized images.
    pub fn batch_tensor(images: &[Image]) -> Result<Tensor> {
        let parts: Vec<Tensor> = images.iter().map(Image::to_tensor).collect();
        Tensor::stack_batch(&parts)
    }

    /// Reads batch element `index` of a `[N, 3, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Image> {
        if t.rank() != 4 || t.shape()[1] != 3 {
            return Err(Error::Shape(format!("expected [N,3,H,W], got {:?}", t.shape())));
        }
        let (n, _, h, w) = t.dims4();
        if index >= n {
            return Err(Error::Shape(format!("batch index {index} out of {n}")));
        }
        let plane = h * w;
        let base = index * 3 * plane;
        let d = t.data();
        let mut data = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                let v = d[base + c * plane + i];
                data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Ok(Image { height: h, width: w, data })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(height, width, |y, x| self.pixel(top + y, left + x)))
    }

    /// Mirror-pads (edge sample not repeated) so both sides reach the minimum,
    /// splitting the padding evenly between the two ends.
    pub fn reflect_pad_to(&self, min_height: usize, min_width: usize) -> Image {
        let (ph, pw) = (min_height.saturating_sub(self.height), min_width.saturating_sub(self.width));
        if ph == 0 && pw == 0 {
            return self.clone();
        }
        let (top, left) = (ph / 2, pw / 2);
        Image::from_fn(self.height + ph, self.width + pw, |y, x| {
            let sy = reflect_index(y as isize - top as isize, self.height);
            let sx = reflect_index(x as isize - left as isize, self.width);
            self.pixel(sy, sx)
        })
    }
}

/// Maps any integer coordinate into `0..n` by mirror reflection without
/// repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}
