//! Pipelines shared by the command-line tool: synthetic datasets, split
//! plans, training with checkpoints and run logs, evaluation and inference.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{Protocol, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    make_folds, make_lodo, predict_image, report, ImageMetrics, MetricsReport, Prediction,
    Segmenter,
};
use crate::io::{read_mask, read_rgb, write_gray, write_rgb, write_text, Manifest, ManifestEntry};
use crate::model::Model;
use crate::preprocess::{assemble_four_channel, PreprocessConfig};
use crate::raster::{Plane, RgbImage};
use crate::synth::{generate, skeleton_breaks, SynthConfig, SynthSample};
use crate::train::{
    prepare, stream, validation_dice, EpochStats, Prepared, StopDecision, Trainer, STREAM_INIT,
    STREAM_SYNTH,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Sample `index` of the synthetic dataset described by `params`.
pub fn synth_sample(params: &SynthConfig, index: usize) -> SynthSample {
    generate(
        params,
        &mut stream(params.seed, &[STREAM_SYNTH, index as u64]),
    )
}

pub fn synth_mask_plane(s: &SynthSample) -> Plane {
    let n = s.image.height;
    Plane::new(n, s.image.width, s.mask.iter().map(|&v| v as f64).collect())
        .expect("mask matches image")
}

/// Preprocessed synthetic samples `range` at the configured network size.
pub fn synth_prepared(cfg: &RunConfig, range: std::ops::Range<usize>) -> Result<Vec<Prepared>> {
    range
        .map(|i| {
            let s = synth_sample(&cfg.synth.params, i);
            prepare(
                &cfg.synth.dataset,
                &format!("{i:04}"),
                &s.image,
                &synth_mask_plane(&s),
                &cfg.preprocess,
                cfg.model.full_resolution,
            )
        })
        .collect()
}

/// Centreline sidecar: one row per point, `segment root parent width leaf row col`.
pub fn centreline_tsv(s: &SynthSample) -> String {
    let mut out = String::from("segment\troot\tparent\twidth\tleaf\trow\tcol\n");
    for (i, seg) in s.segments.iter().enumerate() {
        let parent = seg
            .parent
            .map(|p| p.to_string())
            .unwrap_or_else(|| "-".into());
        for &(r, c) in &seg.points {
            out.push_str(&format!(
                "{i}\t{}\t{parent}\t{}\t{}\t{r:.3}\t{c:.3}\n",
                seg.root, seg.width, seg.leaf as u8
            ));
        }
    }
    out
}

/// Writes `images/`, `masks/`, `meta/` and `manifest.tsv` under `out`.
pub fn write_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    for dir in ["images", "masks", "meta"] {
        std::fs::create_dir_all(out.join(dir))
            .map_err(|e| Error::io(out.join(dir).display().to_string(), e))?;
    }
    for i in 0..cfg.synth.count {
        let s = synth_sample(&cfg.synth.params, i);
        let id = format!("{i:04}");
        let image = out.join("images").join(format!("{id}.png"));
        let mask = out.join("masks").join(format!("{id}.png"));
        write_rgb(&image, &s.image)?;
        write_gray(&mask, &synth_mask_plane(&s))?;
        write_text(
            &out.join("meta").join(format!("{id}.tsv")),
            &centreline_tsv(&s),
        )?;
        entries.push(ManifestEntry {
            dataset: cfg.synth.dataset.clone(),
            image,
            mask,
        });
    }
    let manifest = Manifest { entries };
    write_text(&out.join("manifest.tsv"), &manifest.render(out))?;
    Ok(manifest)
}

/// Reads and preprocesses manifest entries.
pub fn load_prepared(
    manifest: &Manifest,
    indices: &[usize],
    cfg: &PreprocessConfig,
    size: usize,
) -> Result<Vec<Prepared>> {
    indices
        .iter()
        .map(|&i| {
            let e = &manifest.entries[i];
            let img = read_rgb(&e.image)?;
            let mask = read_mask(&e.mask)?;
            prepare(&e.dataset, &e.id(), &img, &mask, cfg, size)
        })
        .collect()
}

/// Index sets of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Training runs of the configured protocol. Cross-validation validates on
/// the held-out fold; `single` keeps the last `val_fraction` of the manifest
/// for validation and testing.
pub fn plan_splits(cfg: &RunConfig, manifest: &Manifest) -> Result<Vec<Split>> {
    let p = &cfg.protocol;
    Ok(match p.kind {
        Protocol::Cv5 => make_folds(manifest, p.folds, p.split_seed)?
            .folds
            .into_iter()
            .enumerate()
            .map(|(k, f)| Split {
                name: format!("fold{k}"),
                train: f.train,
                validation: f.held_out.clone(),
                test: f.held_out,
            })
            .collect(),
        Protocol::Lodo => make_lodo(manifest, p.split_seed)?
            .into_iter()
            .map(|l| Split {
                name: format!("lodo-{}", l.held_out_dataset),
                train: l.train,
                validation: l.validation,
                test: l.test,
            })
            .collect(),
        Protocol::Single => {
            let n = manifest.entries.len();
            let nv = ((n as f64) * p.val_fraction).round() as usize;
            if nv == 0 || nv >= n {
                return Err(Error::config(
                    "protocol.val_fraction",
                    format!("leaves no train or validation images out of {n}"),
                ));
            }
            let held: Vec<usize> = (n - nv..n).collect();
            vec![Split {
                name: "single".into(),
                train: (0..n - nv).collect(),
                validation: held.clone(),
                test: held,
            }]
        }
    })
}

/// Append-only tab-separated run log with a reproducibility header.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub path: PathBuf,
}

pub const LOG_COLUMNS: &str =
    "kind\tepoch\tstep\tlr\tloss\tdice\tbce\tcldice\tgrad_norm\tclipped_norm\tval_dice\tw1\tw2\tw3\tw4\thard";

impl RunLog {
    /// Opens `path`, writing the header when the file is new.
    pub fn open(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let log = RunLog {
            path: path.to_path_buf(),
        };
        if !path.exists() {
            log.append(&format!(
                "# config_hash\t{:016x}\n# seed\t{}\n# version\t{VERSION}\n{LOG_COLUMNS}\n",
                cfg.hash(),
                cfg.seed
            ))?;
        }
        Ok(log)
    }

    pub fn append(&self, text: &str) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        let ctx = || self.path.display().to_string();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(ctx(), e))?;
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(ctx(), e))
    }

    pub fn epoch_rows(&self, stats: &EpochStats, val: f64) -> Result<()> {
        let mut s = String::new();
        for r in &stats.steps {
            s.push_str(&format!(
                "step\t{}\t{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t\t\t\t\t\t\n",
                r.epoch,
                r.step,
                r.lr,
                r.total,
                r.dice,
                r.bce,
                r.cldice,
                r.grad_norm,
                r.clipped_norm
            ));
        }
        let w = stats.fusion_weights;
        let hard: Vec<String> = stats.hard.iter().map(|h| h.to_string()).collect();
        let step = stats
            .steps
            .last()
            .map(|r| r.step.to_string())
            .unwrap_or_default();
        s.push_str(&format!(
            "epoch\t{}\t{step}\t\t{:.6}\t\t\t\t\t\t{val:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            stats.epoch,
            stats.mean_total,
            w[0],
            w[1],
            w[2],
            w[3],
            hard.join(",")
        ));
        self.append(&s)
    }
}

/// Fresh trainer for `cfg`; the model is initialised from the run seed.
pub fn new_trainer(cfg: &RunConfig) -> Result<Trainer> {
    let model = Model::init(&cfg.model, &mut stream(cfg.seed, &[STREAM_INIT]))?;
    Ok(Trainer::new(
        cfg.seed,
        model,
        cfg.schedule.clone(),
        cfg.loss.clone(),
        cfg.augment.clone(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Validation Dice before the first step, when training started fresh.
    pub initial_val: Option<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Where a training run writes its artefacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Stop after this many epochs in total (for staged runs).
    pub epoch_limit: Option<usize>,
}

/// Trains until the step budget, the epoch limit or early stopping ends the
/// run. With an output directory, `last.ckpt` is rewritten every epoch,
/// `best.ckpt` whenever validation Dice improves, and `log.tsv` grows.
pub fn train_run(
    cfg: &RunConfig,
    trainer: &mut Trainer,
    train: &[Prepared],
    val: &[Prepared],
    out: &RunOutput,
) -> Result<TrainOutcome> {
    let log = match &out.dir {
        Some(d) => Some(RunLog::open(&d.join("log.tsv"), cfg)?),
        None => None,
    };
    let mut initial_val = None;
    if trainer.epoch == 0 && trainer.step == 0 {
        let d = validation_dice(&mut trainer.model, val)?;
        if let Some(l) = &log {
            l.append(&format!("init\t0\t0\t\t\t\t\t\t\t\t{d:.6}\t\t\t\t\t\n"))?;
        }
        initial_val = Some(d);
    }
    let mut best_epoch = 0;
    let mut stopped_early = false;
    while trainer.epoch < cfg.schedule.max_epochs && !trainer.budget_exhausted() {
        if out.epoch_limit.is_some_and(|l| trainer.epoch >= l) {
            break;
        }
        let stats = trainer.train_epoch(train)?;
        let (d, decision) = trainer.validate(val)?;
        if let Some(l) = &log {
            l.epoch_rows(&stats, d)?;
        }
        let (best, stop) = match decision {
            StopDecision::Continue { best_epoch } => (best_epoch, false),
            StopDecision::Stop { best_epoch } => (best_epoch, true),
        };
        best_epoch = best;
        if let Some(dir) = &out.dir {
            let ckpt = Checkpoint::from_trainer(trainer, cfg);
            if best == stats.epoch {
                ckpt.save(&dir.join("best.ckpt"))?;
            }
            ckpt.save(&dir.join("last.ckpt"))?;
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        initial_val,
        best_epoch,
        stopped_early,
    })
}

/// Per-image metrics of `model` on prepared images, at network resolution.
pub fn evaluate<S: Segmenter>(
    model: &mut S,
    data: &[Prepared],
    fold: Option<usize>,
    tta: bool,
) -> Result<Vec<ImageMetrics>> {
    data.iter()
        .map(|p| {
            let pred = predict_image(model, &p.input, tta)?;
            let mut m = ImageMetrics::from_prediction(&p.dataset, &p.id, fold, &pred, &p.target)?;
            m.breaks = Some(skeleton_breaks(&pred.mask, &p.target, pred.size, pred.size));
            Ok(m)
        })
        .collect()
}

/// Evaluates every manifest entry and aggregates the rows.
pub fn evaluate_manifest<S: Segmenter>(
    model: &mut S,
    manifest: &Manifest,
    cfg: &RunConfig,
    tta: bool,
) -> Result<MetricsReport> {
    let all: Vec<usize> = (0..manifest.entries.len()).collect();
    let data = load_prepared(manifest, &all, &cfg.preprocess, cfg.model.full_resolution)?;
    let rows = evaluate(model, &data, None, tta)?;
    let expected: Vec<String> = all.iter().map(|&i| manifest.label(i)).collect();
    Ok(report(rows, &expected))
}

/// Probability map and mask at the image's own resolution.
pub fn infer_image<S: Segmenter>(
    model: &mut S,
    img: &RgbImage,
    cfg: &RunConfig,
    tta: bool,
) -> Result<(Plane, Plane)> {
    let size = cfg.model.full_resolution;
    let x = assemble_four_channel(img, &cfg.preprocess, (size, size));
    let pred: Prediction = predict_image(model, &x, tta)?;
    let prob = Plane::new(size, size, pred.prob)?.resize(img.height, img.width);
    let mask = prob.map(|p| (p >= 0.5) as u8 as f64);
    Ok((prob, mask))
}
