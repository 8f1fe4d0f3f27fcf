//! The four end-to-end commands: train, enhance, eval, ablate.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Settings, DATA_ROOT_ENV};
use crate::data::{discover, split_dataset, synthetic_pairs, PairedDataset, Test, Train};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{grid, load_image, save_png};
use crate::metrics::{evaluate_image, ImageMetrics, MetricReport};
use crate::model::DstNet;
use crate::priors::Ablation;
use crate::train::{TrainSummary, Trainer};

/// Train/test splits from `data.root` (or `$DSTNET_DATA_ROOT`), or synthetic pairs.
pub fn load_splits(s: &Settings) -> Result<(PairedDataset<Train>, PairedDataset<Test>)> {
    let pairs = match s.data_root() {
        Some(root) => discover(&root)?,
        None if s.data.synthetic > 0 => synthetic_pairs(s.data.synthetic, s.data.synthetic_size, s.train.seed),
        None => {
            return Err(Error::MissingPath(PathBuf::from(format!(
                "<unset: give data.root or ${DATA_ROOT_ENV}>"
            ))))
        }
    };
    split_dataset(pairs, s.train.seed)
}

/// Trains (optionally resuming), writing the snapshot, log and checkpoints to `out`.
pub fn cmd_train(s: &Settings, out: &Path, resume: Option<&Path>, on_row: impl FnMut(&crate::train::LogRow)) -> Result<TrainSummary> {
    let (train, test) = load_splits(s)?;
    s.write_snapshot(out)?;
    let mut trainer = match resume {
        Some(p) => Checkpoint::load(p)?.into_trainer(s.train.clone())?,
        None => Trainer::new(s.train.clone())?,
    };
    trainer.run(&train, Some(&test), Some(out), on_row)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EnhanceSummary {
    pub written: Vec<PathBuf>,
    pub failed: Vec<(PathBuf, String)>,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Enhances every image in `in_dir` into `out_dir/<stem>.png`. Decode
/// failures are collected, not fatal. With `gt_dir`, grids get a gt panel.
pub fn cmd_enhance(net: &DstNet, in_dir: &Path, out_dir: &Path, gt_dir: Option<&Path>, with_grid: bool) -> Result<EnhanceSummary> {
    std::fs::create_dir_all(out_dir)?;
    let mut summary = EnhanceSummary::default();
    for path in image_files(in_dir)? {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let result = (|| -> Result<PathBuf> {
            let img = load_image(&path)?;
            let out = net.enhance(&img, Ablation::all_on())?;
            let dest = out_dir.join(format!("{stem}.png"));
            save_png(&out.image, &dest)?;
            if with_grid {
                let gt = gt_dir.map(|d| d.join(path.file_name().unwrap_or_default())).filter(|p| p.is_file());
                let gt = gt.map(|p| load_image(&p)).transpose()?;
                let mut panels = vec![&img, &out.curve_stage, &out.image];
                if let Some(g) = gt.as_ref().filter(|g| (g.height(), g.width()) == (img.height(), img.width())) {
                    panels.push(g);
                }
                save_png(&grid(&panels)?, &out_dir.join(format!("{stem}_grid.png")))?;
            }
            Ok(dest)
        })();
        match result {
            Ok(p) => summary.written.push(p),
            Err(e) => summary.failed.push((path, e.to_string())),
        }
    }
    Ok(summary)
}

/// Per-image metrics of the model on full-size pairs.
pub fn evaluate<S: crate::data::SplitTag>(net: &DstNet, ds: &PairedDataset<S>, ablation: Ablation) -> Result<(MetricReport, Vec<Image>)> {
    let mut rows = Vec::with_capacity(ds.len());
    let mut outputs = Vec::with_capacity(ds.len());
    for (i, pair) in ds.pairs().iter().enumerate() {
        let (low, gt) = ds.get(i, "evaluate")?;
        let est = net.enhance(&low, ablation)?.image;
        rows.push(evaluate_image(&pair.name(), &est, &gt, &low, None)?);
        outputs.push(est);
    }
    Ok((MetricReport::new(rows)?, outputs))
}

/// Writes `metrics.csv` and `metrics.json` for the test split.
pub fn cmd_eval(net: &DstNet, test: &PairedDataset<Test>, out_dir: &Path) -> Result<MetricReport> {
    let (report, _) = evaluate(net, test, Ablation::all_on())?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), report.to_csv())?;
    std::fs::write(out_dir.join("metrics.json"), report.to_json()?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub mean: ImageMetrics,
    /// Feature rows: whether any output differs from the baseline.
    pub differs: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub baseline: ImageMetrics,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str = "row,ssim,psnr,lpips,loe,de,eme";

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        let line = |name: &str, m: &ImageMetrics| {
            let lp = m.lpips.map(|v| v.to_string()).unwrap_or_default();
            format!("{name},{},{},{lp},{},{},{}\n", m.ssim, m.psnr, m.loe, m.de, m.eme)
        };
        s.push_str(&line("baseline", &self.baseline));
        for r in &self.rows {
            s.push_str(&line(&r.name, &r.mean));
        }
        s
    }
}

enum RowKind {
    Features(Ablation),
    LossOff(&'static str),
}

fn row_kind(name: &str) -> Result<RowKind> {
    let on = Ablation::all_on();
    Ok(match name {
        "all_on" => RowKind::Features(on),
        "no_structure" => RowKind::Features(Ablation { structure: false, ..on }),
        "no_color" => RowKind::Features(Ablation { color: false, ..on }),
        "no_texture" => RowKind::Features(Ablation { texture: false, ..on }),
        "no_priors" => RowKind::Features(Ablation::all_off()),
        other => match other.strip_prefix("no_").and_then(|t| crate::loss::TERMS.iter().find(|n| **n == t)) {
            Some(term) => RowKind::LossOff(term),
            None => return Err(Error::Config(format!("unknown ablation row `{other}`"))),
        },
    })
}

/// Baseline evaluation plus one row per plan entry. Feature rows use the
/// 1e-6 fill and must change at least one output; `all_on` must reproduce
/// the baseline exactly. Loss rows fine-tune a copy with that term disabled.
pub fn cmd_ablate(
    ck: &Checkpoint,
    s: &Settings,
    train: &PairedDataset<Train>,
    test: &PairedDataset<Test>,
    out_dir: &Path,
) -> Result<AblationReport> {
    let net = ck.clone().into_model()?;
    let (base, base_out) = evaluate(&net, test, Ablation::all_on())?;
    let mut rows = Vec::new();
    for name in &s.ablate.rows {
        let row = match row_kind(name)? {
            RowKind::Features(ab) => {
                let (rep, outs) = evaluate(&net, test, ab)?;
                let differs = outs.iter().zip(&base_out).any(|(a, b)| a != b);
                if ab.is_all_on() && differs {
                    return Err(Error::InvalidArgument("all-on ablation diverged from the baseline".into()));
                }
                if !ab.is_all_on() && !differs {
                    return Err(Error::InvalidArgument(format!("ablation `{name}` did not change any output")));
                }
                AblationRow { name: name.clone(), mean: rep.mean, differs: Some(differs) }
            }
            RowKind::LossOff(term) => {
                let mut cfg = ck.train.clone().unwrap_or_else(|| s.train.clone());
                cfg.model = ck.model.clone();
                match term {
                    "l1" => cfg.loss.use_l1 = false,
                    "ssim" => cfg.loss.use_ssim = false,
                    "exp" => cfg.loss.use_exp = false,
                    "tv" => cfg.loss.use_tv = false,
                    _ => cfg.loss.use_hsv = false,
                }
                let mut t = ck.clone().into_trainer(cfg)?;
                t.cfg.max_steps = Some(t.step + s.ablate.finetune_steps);
                t.cfg.epochs = u64::MAX;
                t.run(train, None, None, |_| {})?;
                let (rep, _) = evaluate(&t.net, test, Ablation::all_on())?;
                AblationRow { name: name.clone(), mean: rep.mean, differs: None }
            }
        };
        rows.push(row);
    }
    let report = AblationReport { baseline: base.mean, rows };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("ablation.csv"), report.to_csv())?;
    std::fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
