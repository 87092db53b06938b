use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hmsv::checkpoint::Checkpoint;
use hmsv::config::RunConfig;
use hmsv::eval::{make_folds, make_lodo, render_lodo, report};
use hmsv::io::{read_rgb, read_text, write_gray, write_text, Manifest};
use hmsv::run::{
    evaluate, infer_image, load_prepared, new_trainer, plan_splits, train_run, write_synth,
    RunOutput,
};
use hmsv::Error;

#[derive(Parser)]
#[command(name = "hmsv", version, about = "Multi-scale vessel segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(Common),
    /// Write the cross-validation and leave-one-dataset-out plans.
    Splits(Common),
    /// Train the configured protocol, or one fold of it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: Option<usize>,
        /// Continue from a checkpoint written by `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-image metrics of a checkpoint on the manifest or one fold's test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value_t = 0, value_parser = parse_tta)]
        tta: u8,
    },
    /// Probability and mask images for single inputs.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0, value_parser = parse_tta)]
        tta: u8,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

fn parse_tta(s: &str) -> Result<u8, String> {
    match s {
        "0" => Ok(0),
        "8" => Ok(8),
        _ => Err("must be 0 or 8".into()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => 3,
        Error::Numerical(_) => 4,
        Error::Invalid(_) | Error::Tensor(_) => 1,
    }
}

fn load_config(c: &Common) -> hmsv::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::parse(&read_text(p)?)?,
        None => RunConfig::paper(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.out = o.clone();
    }
    Ok(cfg)
}

fn set_threads(c: &Common) -> hmsv::Result<()> {
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(hmsv::Error::Config {
                field: "threads".into(),
                message: "must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| hmsv::Error::Invalid(e.to_string()))?;
    }
    Ok(())
}

fn select<T>(items: Vec<T>, fold: Option<usize>) -> hmsv::Result<Vec<(usize, T)>> {
    let n = items.len();
    let all = items.into_iter().enumerate();
    match fold {
        None => Ok(all.collect()),
        Some(k) if k < n => Ok(all.filter(|(i, _)| *i == k).collect()),
        Some(k) => Err(Error::Config {
            field: "fold".into(),
            message: format!("{k} out of range; the protocol has {n} runs"),
        }),
    }
}

fn synth(c: &Common) -> hmsv::Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.synth.params.seed = s;
    }
    let dir = match &c.out {
        Some(o) => o.clone(),
        None => cfg
            .paths
            .manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    let m = write_synth(&cfg, &dir)?;
    println!(
        "{} images -> {}",
        m.entries.len(),
        dir.join("manifest.tsv").display()
    );
    Ok(())
}

fn splits(c: &Common) -> hmsv::Result<()> {
    let cfg = load_config(c)?;
    let m = Manifest::load(&cfg.paths.manifest)?;
    let folds = make_folds(&m, cfg.protocol.folds, cfg.protocol.split_seed)?;
    write_text(&cfg.paths.out.join("folds.tsv"), &folds.render(&m))?;
    println!(
        "{} folds -> {}",
        folds.folds.len(),
        cfg.paths.out.join("folds.tsv").display()
    );
    match make_lodo(&m, cfg.protocol.split_seed) {
        Ok(lodo) => {
            write_text(&cfg.paths.out.join("lodo.tsv"), &render_lodo(&lodo, &m))?;
            println!(
                "{} LODO plans -> {}",
                lodo.len(),
                cfg.paths.out.join("lodo.tsv").display()
            );
        }
        Err(e) => println!("LODO skipped: {e}"),
    }
    Ok(())
}

fn train(c: &Common, fold: Option<usize>, resume: Option<&Path>) -> hmsv::Result<()> {
    let resumed = resume
        .map(|p| Checkpoint::load(p)?.to_trainer())
        .transpose()?;
    let mut cfg = match &resumed {
        Some((cfg, _)) if c.config.is_none() => cfg.clone(),
        _ => load_config(c)?,
    };
    if let Some(o) = &c.out {
        cfg.paths.out = o.clone();
    }
    let m = Manifest::load(&cfg.paths.manifest)?;
    let runs = select(plan_splits(&cfg, &m)?, fold)?;
    if resumed.is_some() && runs.len() != 1 {
        return Err(Error::Config {
            field: "fold".into(),
            message: "--resume needs --fold when the protocol has several runs".into(),
        });
    }
    let mut resumed = resumed.map(|(_, t)| t);
    for (_, split) in runs {
        let size = cfg.model.full_resolution;
        let train = load_prepared(&m, &split.train, &cfg.preprocess, size)?;
        let val = load_prepared(&m, &split.validation, &cfg.preprocess, size)?;
        let mut trainer = match resumed.take() {
            Some(t) => t,
            None => new_trainer(&cfg)?,
        };
        let dir = cfg.paths.out.join(&split.name);
        let out = RunOutput {
            dir: Some(dir.clone()),
            epoch_limit: None,
        };
        let o = train_run(&cfg, &mut trainer, &train, &val, &out)?;
        println!(
            "{}: {} epochs, {} steps, best epoch {}, best val Dice {:.4}{}",
            split.name,
            trainer.epoch,
            trainer.step,
            o.best_epoch,
            trainer
                .val_history
                .get(o.best_epoch)
                .copied()
                .unwrap_or(f64::NAN),
            if o.stopped_early { " (early stop)" } else { "" }
        );
    }
    Ok(())
}

fn eval(c: &Common, ckpt: &Path, fold: Option<usize>, tta: bool) -> hmsv::Result<()> {
    let (ck_cfg, mut trainer) = Checkpoint::load(ckpt)?.to_trainer()?;
    let cfg = if c.config.is_some() {
        load_config(c)?
    } else {
        ck_cfg
    };
    let m = Manifest::load(&cfg.paths.manifest)?;
    let (indices, fold_tag): (Vec<usize>, Option<usize>) = match fold {
        None => ((0..m.entries.len()).collect(), None),
        Some(k) => {
            let (_, s) = select(plan_splits(&cfg, &m)?, Some(k))?.remove(0);
            (s.test, Some(k))
        }
    };
    let data = load_prepared(&m, &indices, &cfg.preprocess, cfg.model.full_resolution)?;
    let rows = evaluate(&mut trainer.model, &data, fold_tag, tta)?;
    let expected: Vec<String> = indices.iter().map(|&i| m.label(i)).collect();
    let rep = report(rows, &expected);
    let out = c.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    let tag = if tta { "tta8" } else { "tta0" };
    write_text(&out.join(format!("metrics_{tag}.tsv")), &rep.to_tsv())?;
    write_text(&out.join(format!("summary_{tag}.txt")), &rep.to_text())?;
    print!("{}", rep.to_text());
    Ok(())
}

fn infer(c: &Common, ckpt: &Path, tta: bool, images: &[PathBuf]) -> hmsv::Result<()> {
    let (cfg, mut trainer) = Checkpoint::load(ckpt)?.to_trainer()?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        context: out.display().to_string(),
        source: e,
    })?;
    for path in images {
        let img = read_rgb(path)?;
        let (prob, mask) = infer_image(&mut trainer.model, &img, &cfg, tta)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        write_gray(&out.join(format!("{stem}_prob.png")), &prob)?;
        write_gray(&out.join(format!("{stem}_mask.png")), &mask)?;
        println!(
            "{} -> {}",
            path.display(),
            out.join(format!("{stem}_mask.png")).display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(c) => set_threads(c).and_then(|_| synth(c)),
        Command::Splits(c) => splits(c),
        Command::Train {
            common,
            fold,
            resume,
        } => set_threads(common).and_then(|_| train(common, *fold, resume.as_deref())),
        Command::Eval {
            common,
            checkpoint,
            fold,
            tta,
        } => set_threads(common).and_then(|_| eval(common, checkpoint, *fold, *tta == 8)),
        Command::Infer {
            common,
            checkpoint,
            tta,
            images,
        } => set_threads(common).and_then(|_| infer(common, checkpoint, *tta == 8, images)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
