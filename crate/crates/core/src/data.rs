//! Paired low/normal-light datasets, the train/test split, preprocessing and
//! a synthetic pair generator.

use std::cell::RefCell;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;

/// One low/ground-truth pair, on disk or in memory.
#[derive(Debug, Clone)]
pub enum Pair {
    Files { low: PathBuf, gt: PathBuf },
    Memory { name: String, low: Image, gt: Image },
}

impl Pair {
    pub fn name(&self) -> String {
        match self {
            Pair::Files { low, .. } => low.file_name().map_or_else(|| low.display().to_string(), |n| n.to_string_lossy().into_owned()),
            Pair::Memory { name, .. } => name.clone(),
        }
    }

    /// Decodes both images and checks that their sizes agree.
    pub fn load(&self) -> Result<(Image, Image)> {
        let (low, gt) = match self {
            Pair::Memory { low, gt, .. } => (low.clone(), gt.clone()),
            Pair::Files { low, gt } => load_files(low, gt)?,
        };
        if (low.height(), low.width()) != (gt.height(), gt.width()) {
            return Err(Error::Dataset(format!(
                "pair `{}`: low is {}x{}, ground truth is {}x{}",
                self.name(),
                low.height(),
                low.width(),
                gt.height(),
                gt.width()
            )));
        }
        Ok((low, gt))
    }
}

#[cfg(feature = "io")]
fn load_files(low: &Path, gt: &Path) -> Result<(Image, Image)> {
    Ok((crate::io::load_image(low)?, crate::io::load_image(gt)?))
}

#[cfg(not(feature = "io"))]
fn load_files(_low: &Path, _gt: &Path) -> Result<(Image, Image)> {
    Err(Error::Dataset("this build has no image decoding (feature `io` disabled)".into()))
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Pairs under `root`: a `manifest.txt` of `low<TAB>gt` lines (paths relative to
/// `root`) if present, otherwise `root/low/*` matched to `root/high/*` by file name.
pub fn discover(root: &Path) -> Result<Vec<Pair>> {
    if !root.is_dir() {
        return Err(Error::MissingPath(root.to_path_buf()));
    }
    let manifest = root.join(MANIFEST_NAME);
    if manifest.is_file() {
        return read_manifest(&manifest, root);
    }
    let (low_dir, high_dir) = (root.join("low"), root.join("high"));
    for d in [&low_dir, &high_dir] {
        if !d.is_dir() {
            return Err(Error::MissingPath(d.clone()));
        }
    }
    let mut names: Vec<_> = std::fs::read_dir(&low_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name())
        .collect();
    names.sort();
    let mut pairs = Vec::with_capacity(names.len());
    for n in names {
        let gt = high_dir.join(&n);
        if !gt.is_file() {
            return Err(Error::Dataset(format!("no ground truth for {}", low_dir.join(&n).display())));
        }
        pairs.push(Pair::Files { low: low_dir.join(&n), gt });
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", low_dir.display())));
    }
    Ok(pairs)
}

pub fn read_manifest(path: &Path, root: &Path) -> Result<Vec<Pair>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (low, gt) = line
            .split_once('\t')
            .ok_or_else(|| Error::Dataset(format!("{}:{}: expected `low<TAB>gt`", path.display(), i + 1)))?;
        pairs.push(Pair::Files { low: root.join(low), gt: root.join(gt) });
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("{} lists no pairs", path.display())));
    }
    Ok(pairs)
}

/// Type-level split marker.
pub trait SplitTag {
    const NAME: &'static str;
}

#[derive(Debug, Clone, Copy)]
pub struct Train;
#[derive(Debug, Clone, Copy)]
pub struct Test;

impl SplitTag for Train {
    const NAME: &'static str = "train";
}
impl SplitTag for Test {
    const NAME: &'static str = "test";
}

/// One recorded dataset read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Access {
    pub split: &'static str,
    pub index: usize,
    pub purpose: &'static str,
}

pub type AccessLog = Rc<RefCell<Vec<Access>>>;

#[derive(Debug, Clone)]
pub struct PairedDataset<S: SplitTag> {
    pairs: Vec<Pair>,
    log: AccessLog,
    _split: PhantomData<S>,
}

impl<S: SplitTag> PairedDataset<S> {
    pub fn from_pairs(pairs: Vec<Pair>) -> Self {
        Self { pairs, log: AccessLog::default(), _split: PhantomData }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split_name(&self) -> &'static str {
        S::NAME
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn access_log(&self) -> AccessLog {
        Rc::clone(&self.log)
    }

    /// Loads pair `index`, recording the read.
    pub fn get(&self, index: usize, purpose: &'static str) -> Result<(Image, Image)> {
        self.log.borrow_mut().push(Access { split: S::NAME, index, purpose });
        self.pairs
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("index {index} out of {}", self.pairs.len())))?
            .load()
    }
}

/// `max(1, round(n / 10))`.
pub fn test_count(n: usize) -> usize {
    ((n as f64 / 10.0).round() as usize).max(1)
}

/// Deterministic shuffled 9:1 split; both halves share one access log.
pub fn split_dataset(pairs: Vec<Pair>, seed: u64) -> Result<(PairedDataset<Train>, PairedDataset<Test>)> {
    if pairs.len() < 2 {
        return Err(Error::Dataset(format!("need at least 2 pairs to split, got {}", pairs.len())));
    }
    let n_test = test_count(pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<Pair>> = pairs.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Pair> {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| slots[i].take().expect("each index used once")).collect()
    };
    let test = take(&order[..n_test]);
    let train = take(&order[n_test..]);
    let log = AccessLog::default();
    Ok((
        PairedDataset { pairs: train, log: Rc::clone(&log), _split: PhantomData },
        PairedDataset { pairs: test, log, _split: PhantomData },
    ))
}

/// Visit order of `len` items in `epoch`; a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let stream = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
    order
}

/// Top-left corner of a centred `crop x crop` window.
pub fn center_crop_origin(h: usize, w: usize, crop: usize) -> (usize, usize) {
    ((h.saturating_sub(crop)) / 2, (w.saturating_sub(crop)) / 2)
}

/// Aligned centre crop of both images (mirror-padded first if smaller than `crop`).
pub fn preprocess(low: &Image, gt: &Image, crop: usize) -> Result<(Image, Image)> {
    if (low.height(), low.width()) != (gt.height(), gt.width()) {
        return Err(Error::Dataset(format!(
            "pair sizes differ: {}x{} vs {}x{}",
            low.height(),
            low.width(),
            gt.height(),
            gt.width()
        )));
    }
    let one = |img: &Image| -> Result<Image> {
        let padded = img.reflect_pad_to(crop, crop);
        let (top, left) = center_crop_origin(padded.height(), padded.width(), crop);
        padded.crop(top, left, crop, crop)
    };
    Ok((one(low)?, one(gt)?))
}

/// Gamma-darkens and adds Gaussian noise: `clamp(clean^γ + N(0, σ²))`.
pub fn darken(clean: &Image, gamma: f64, sigma: f64, rng: &mut impl Rng) -> Image {
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut out = clean.map(|v| v.powf(gamma));
    if sigma > 0.0 {
        let data: Vec<f64> = out.data().iter().map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0)).collect();
        out = Image::new(out.height(), out.width(), data).expect("clamped samples");
    }
    out
}

/// Smooth colourful test scene: gradients, a disc and stripes, seeded.
pub fn synthetic_scene(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    let base: [f64; 3] = [rng.random_range(0.3..0.8), rng.random_range(0.3..0.8), rng.random_range(0.3..0.8)];
    let tilt: [f64; 3] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let (cy, cx) = (rng.random_range(0.3..0.7) * h as f64, rng.random_range(0.3..0.7) * w as f64);
    let radius = rng.random_range(0.15..0.3) * h.min(w) as f64;
    let disc: [f64; 3] = [rng.random_range(0.5..1.0), rng.random_range(0.2..1.0), rng.random_range(0.0..0.6)];
    let period = rng.random_range(4.0..9.0);
    Image::from_fn(h, w, |y, x| {
        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
        let stripe = 0.08 * ((x as f64 + y as f64) * std::f64::consts::TAU / period).sin();
        let inside = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() < radius;
        let mut px = [0.0; 3];
        for c in 0..3 {
            px[c] = if inside { disc[c] } else { base[c] + tilt[c] * (fy - fx) } + stripe;
        }
        px
    })
}

/// `n` in-memory pairs: seeded scenes darkened with γ ∈ [2, 4] and σ ≤ 0.03.
pub fn synthetic_pairs(n: usize, size: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let gt = synthetic_scene(size, size, &mut rng);
            let gamma = rng.random_range(2.0..=4.0);
            let sigma = rng.random_range(0.0..=0.03);
            let low = darken(&gt, gamma, sigma, &mut rng);
            Pair::Memory { name: format!("synthetic_{i:03}.png"), low, gt }
        })
        .collect()
}
