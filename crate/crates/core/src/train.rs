//! Adam, the step-decay schedule and the training loop.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{epoch_order, preprocess, PairedDataset, Test, Train};
use crate::error::{Error, Result};
use crate::layout::crop;
use crate::loss::{total_loss, LossWeights, TERMS};
use crate::metrics::psnr;
use crate::model::{DstNet, ModelConfig};
use crate::nn::{set_param, Parameterized};
use crate::priors::Ablation;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch: usize,
    pub decay_factor: f64,
    /// Epochs between decays.
    pub decay_every: u64,
    pub epochs: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub crop: usize,
    pub seed: u64,
    /// Training sets up to this size keep cropped pairs and their guidance in memory.
    pub cache_items: usize,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.005,
            batch: 9,
            decay_factor: 0.5,
            decay_every: 50,
            epochs: 100,
            max_steps: None,
            crop: 192,
            seed: 0,
            cache_items: 64,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("train.lr0 must be finite and >= 0, got {}", self.lr0)));
        }
        if self.batch == 0 || self.decay_every == 0 {
            return Err(Error::Config("train.batch and train.decay_every must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("train.decay_factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.crop < crate::model::MIN_SIDE {
            return Err(Error::Config(format!("train.crop must be at least {}", crate::model::MIN_SIDE)));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, one pair per parameter in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Self {
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One bias-corrected update. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut [(String, &mut Var)], grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let mut value = p.value().clone();
            let pd = value.data_mut();
            for j in 0..pd.len() {
                let gj = g.as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
                pd[j] -= lr * update;
            }
            set_param(p, value);
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    pub terms: [Option<f64>; 5],
}

pub const LOG_HEADER: &str = "step,epoch,lr,total,l1,ssim,exp,tv,hsv";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},{},{}", self.step, self.epoch, self.lr, self.total);
        for t in &self.terms {
            s.push(',');
            if let Some(v) = t {
                s.push_str(&v.to_string());
            }
        }
        s
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// A cropped, aligned training item.
#[derive(Debug, Clone)]
struct Item {
    input: Tensor,
    guidance: Tensor,
    gt: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub rows: Vec<LogRow>,
    pub steps: u64,
    pub epochs_completed: u64,
    pub best_psnr: Option<f64>,
}

pub struct Trainer {
    pub net: DstNet,
    pub cfg: TrainConfig,
    pub adam: Adam,
    /// Current epoch (the one the next step belongs to).
    pub epoch: u64,
    /// Items of the current epoch already consumed.
    pub epoch_pos: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub best_psnr: Option<f64>,
    cache: HashMap<usize, Item>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = DstNet::new(cfg.model.clone())?;
        Ok(Self::from_parts(net, cfg, None, 0, 0, 0, None))
    }

    pub(crate) fn from_parts(
        net: DstNet,
        cfg: TrainConfig,
        adam: Option<Adam>,
        epoch: u64,
        epoch_pos: usize,
        step: u64,
        best_psnr: Option<f64>,
    ) -> Self {
        let shapes: Vec<Vec<usize>> = net.named_params().iter().map(|(_, v)| v.shape().to_vec()).collect();
        Self {
            adam: adam.unwrap_or_else(|| Adam::new(&shapes)),
            net,
            cfg,
            epoch,
            epoch_pos,
            step,
            best_psnr,
            cache: HashMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.epoch, &self.cfg)
    }

    fn item(&mut self, ds: &PairedDataset<Train>, idx: usize) -> Result<Item> {
        if let Some(it) = self.cache.get(&idx) {
            return Ok(it.clone());
        }
        let (low, gt) = ds.get(idx, "train")?;
        let (low, gt) = preprocess(&low, &gt, self.cfg.crop)?;
        let p = self.net.prepare(&low.to_tensor(), Ablation::all_on())?;
        let it = Item { input: p.input, guidance: p.guidance, gt: gt.to_tensor() };
        if ds.len() <= self.cfg.cache_items {
            self.cache.insert(idx, it.clone());
        }
        Ok(it)
    }

    /// One optimizer step on the next mini-batch of the current epoch.
    /// Returns the log row and whether the step finished the epoch.
    pub fn train_step(&mut self, ds: &PairedDataset<Train>) -> Result<(LogRow, bool)> {
        if ds.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let order = epoch_order(ds.len(), self.cfg.seed, self.epoch);
        let end = (self.epoch_pos + self.cfg.batch).min(ds.len());
        let items = order[self.epoch_pos..end].iter().map(|&i| self.item(ds, i)).collect::<Result<Vec<_>>>()?;
        let stack = |f: fn(&Item) -> &Tensor| Tensor::stack_batch(&items.iter().map(|it| f(it).clone()).collect::<Vec<_>>());
        let input = stack(|it| &it.input)?;
        let guidance = stack(|it| &it.guidance)?;
        let gt = Var::constant(stack(|it| &it.gt)?);
        let (h, w) = (gt.shape()[2], gt.shape()[3]);

        let fwd = self.net.forward_aligned(&Var::constant(input), &Var::constant(guidance))?;
        let out = crop(&fwd.output, 0, 0, h, w);
        let breakdown = total_loss(&out, &gt, &self.cfg.loss)?;
        if let Some(term) = breakdown.non_finite_term() {
            return Err(Error::NonFiniteLoss { term: term.to_string(), step: self.step });
        }
        if !breakdown.total_value().is_finite() {
            return Err(Error::NonFiniteLoss { term: "total".into(), step: self.step });
        }
        let grads = breakdown.total.backward();
        let lr = self.lr();
        let mut params = self.net.named_params_mut();
        let g: Vec<Option<Tensor>> = params.iter().map(|(_, p)| grads.get(p).cloned()).collect();
        self.adam.step(&mut params, &g, lr);

        let mut terms = [None; 5];
        for (slot, name) in terms.iter_mut().zip(TERMS) {
            *slot = breakdown.term_value(name);
        }
        let row = LogRow { step: self.step, epoch: self.epoch, lr, total: breakdown.total_value(), terms };
        self.step += 1;
        self.epoch_pos = end;
        let finished = end >= ds.len();
        if finished {
            self.epoch += 1;
            self.epoch_pos = 0;
        }
        Ok((row, finished))
    }

    /// Mean PSNR over full-size (alignment-padded, uncropped) test images.
    pub fn validate(&self, ds: &PairedDataset<Test>) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::Dataset("test split is empty".into()));
        }
        let mut total = 0.0;
        for i in 0..ds.len() {
            let (low, gt) = ds.get(i, "validate")?;
            let out = no_grad(|| self.net.enhance(&low, Ablation::all_on()))?;
            total += psnr(&out.image, &gt)?;
        }
        Ok(total / ds.len() as f64)
    }

    fn done(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Trains until `epochs` or `max_steps`. With `out`, appends to
    /// `train_log.csv`, writes `last.bin` after every epoch (and at the end)
    /// and `best.bin` whenever validation PSNR improves.
    pub fn run(
        &mut self,
        train: &PairedDataset<Train>,
        test: Option<&PairedDataset<Test>>,
        out: Option<&Path>,
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<TrainSummary> {
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("train_log.csv");
                let fresh = self.step == 0 || !path.exists();
                let mut f = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&path)?;
                if fresh {
                    writeln!(f, "{LOG_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let start_epoch = self.epoch;
        let mut rows = Vec::new();
        while !self.done() {
            let (row, epoch_done) = self.train_step(train)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", row.to_csv())?;
            }
            on_row(&row);
            rows.push(row);
            if epoch_done {
                self.end_epoch(test, out)?;
            }
        }
        if let Some(dir) = out {
            Checkpoint::from_trainer(self).save(&dir.join("last.bin"))?;
        }
        Ok(TrainSummary {
            steps: rows.len() as u64,
            rows,
            epochs_completed: self.epoch - start_epoch,
            best_psnr: self.best_psnr,
        })
    }

    fn end_epoch(&mut self, test: Option<&PairedDataset<Test>>, out: Option<&Path>) -> Result<()> {
        let improved = match test {
            Some(ds) => {
                let p = self.validate(ds)?;
                let better = self.best_psnr.is_none_or(|b| p > b);
                if better {
                    self.best_psnr = Some(p);
                }
                better
            }
            None => false,
        };
        if let Some(dir) = out {
            let ck = Checkpoint::from_trainer(self);
            ck.save(&dir.join("last.bin"))?;
            if improved {
                ck.save(&dir.join("best.bin"))?;
            }
        }
        Ok(())
    }
}
