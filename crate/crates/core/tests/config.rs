mod common;

use hmsv::checkpoint::{Checkpoint, MAGIC};
use hmsv::config::RunConfig;
use hmsv::error::Error;
use hmsv::io::*;
use hmsv::model::ModelConfig;
use hmsv::raster::{Plane, RgbImage};
use hmsv::run::{new_trainer, synth_prepared, train_run, RunLog, RunOutput, LOG_COLUMNS};
use serde_json::json;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.model = ModelConfig::uniform(32, &[4, 8], 16, 0.4);
    cfg.synth.params.size = 32;
    cfg.schedule.max_steps = 12;
    cfg
}

#[test]
fn published_constants_table() {
    let flat = RunConfig::parse("").unwrap().to_flat();
    let table = [
        ("loss.w_dice", json!(0.4)),
        ("loss.w_bce", json!(0.3)),
        ("loss.w_cldice", json!(0.3)),
        ("loss.deep_supervision", json!([0.5, 0.2, 0.15, 0.15])),
        ("loss.label_smoothing", json!(0.05)),
        ("schedule.lr_max", json!(1e-3)),
        ("schedule.lr_min", json!(1e-6)),
        ("schedule.cycle_len", json!(40.0)),
        ("schedule.cycle_mult", json!(2.0)),
        ("schedule.clip_norm", json!(1.0)),
        ("schedule.batch_size", json!(2)),
        ("schedule.patience", json!(30)),
        ("schedule.hem_start", json!(20)),
        ("schedule.hem_fraction", json!(0.15)),
        ("schedule.hem_ratio", json!(3.0)),
        ("preprocess.lab_clip", json!(2.0)),
        ("preprocess.green_clip", json!(3.0)),
        ("preprocess.tiles", json!([8, 8])),
        ("model.fusion_prior", json!([0.4, 0.25, 0.2, 0.15])),
        ("model.full_resolution", json!(512)),
        ("augment.mixup_alpha", json!(0.2)),
        ("augment.p_mixup", json!(0.5)),
        ("augment.clahe_clip", json!(4.0)),
        ("augment.elastic_alpha", json!(120.0)),
        ("augment.elastic_sigma", json!(6.0)),
        ("augment.rotate_limit", json!(30.0)),
        ("augment.shift_limit", json!(0.1)),
        ("augment.scale_limit", json!(0.1)),
        ("augment.gamma_range", json!([0.8, 1.2])),
    ];
    for (key, want) in table {
        assert_eq!(flat.get(key), Some(&want), "{key}");
    }
}

#[test]
fn text_round_trip() {
    for cfg in [RunConfig::paper(), RunConfig::toy(), small_config()] {
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
    let shipped = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/toy.cfg"
    ))
    .unwrap();
    assert_eq!(
        RunConfig::parse(&shipped).unwrap().model,
        ModelConfig::toy()
    );
}

#[test]
fn overrides_and_errors_name_the_key() {
    let cfg = RunConfig::parse(
        "profile = toy\nseed = 7\nloss.w_cldice = 0.0 # off\nloss.w_dice = 0.5\nloss.w_bce = 0.5",
    )
    .unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.loss.w_cldice, 0.0);
    for (text, key) in [
        ("schedule.batch_size = two", "schedule.batch_size"),
        ("schedule.batch_size = 1.5", "schedule.batch_size"),
        ("loss.w_nope = 1", "loss.w_nope"),
        ("profile = huge", "profile"),
        ("model.fusion_prior = [1, 2]", "model.fusion_prior"),
    ] {
        match RunConfig::parse(text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, key, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
    assert!(matches!(
        RunConfig::parse("no equals sign"),
        Err(Error::Config { .. })
    ));
    assert!(RunConfig::parse("protocol.val_fraction = 1.5").is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = small_config();
    let data = synth_prepared(&cfg, 0..6).unwrap();
    let mut t = new_trainer(&cfg).unwrap();
    train_run(
        &cfg,
        &mut t,
        &data[..4],
        &data[4..],
        &RunOutput {
            dir: None,
            epoch_limit: Some(1),
        },
    )
    .unwrap();
    let bytes = Checkpoint::from_trainer(&t, &cfg).to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a/b.ckpt");
    Checkpoint::read_from(&mut &bytes[..])
        .unwrap()
        .save(&path)
        .unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), bytes);
    let (cfg2, t2) = loaded.to_trainer().unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(Checkpoint::from_trainer(&t2, &cfg2).to_bytes(), bytes);
}

#[test]
fn checkpoint_rejects_bad_files() {
    let cfg = small_config();
    let t = new_trainer(&cfg).unwrap();
    let bytes = Checkpoint::from_trainer(&t, &cfg).to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::read_from(&mut &bad[..]),
        Err(Error::Checkpoint(_))
    ));
    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(matches!(
        Checkpoint::read_from(&mut &v2[..]),
        Err(Error::Checkpoint(_))
    ));
    assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::read_from(&mut &long[..]).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let cfg = small_config();
    let data = synth_prepared(&cfg, 0..6).unwrap();
    let (train, val) = (&data[..4], &data[4..]);
    let mut straight = new_trainer(&cfg).unwrap();
    train_run(&cfg, &mut straight, train, val, &RunOutput::default()).unwrap();

    let mut first = new_trainer(&cfg).unwrap();
    train_run(
        &cfg,
        &mut first,
        train,
        val,
        &RunOutput {
            dir: None,
            epoch_limit: Some(2),
        },
    )
    .unwrap();
    let bytes = Checkpoint::from_trainer(&first, &cfg).to_bytes();
    let (cfg2, mut resumed) = Checkpoint::read_from(&mut &bytes[..])
        .unwrap()
        .to_trainer()
        .unwrap();
    train_run(&cfg2, &mut resumed, train, val, &RunOutput::default()).unwrap();

    assert_eq!(resumed.step, straight.step);
    assert_eq!(resumed.model.params, straight.model.params);
    assert_eq!(
        Checkpoint::from_trainer(&resumed, &cfg).to_bytes(),
        Checkpoint::from_trainer(&straight, &cfg).to_bytes()
    );
}

#[test]
fn run_log_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.tsv");
    let cfg = small_config();
    let log = RunLog::open(&path, &cfg).unwrap();
    log.append("x\n").unwrap();
    RunLog::open(&path, &cfg).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], format!("# config_hash\t{:016x}", cfg.hash()));
    assert_eq!(lines[1], format!("# seed\t{}", cfg.seed));
    assert!(lines[2].starts_with("# version\t"));
    assert_eq!(lines[3], LOG_COLUMNS);
    assert_eq!(lines[4..], ["x"]);
}

#[test]
fn image_and_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = RgbImage::new(3, 2, (0..18).map(|v| v * 13).collect()).unwrap();
    let p = dir.path().join("i.png");
    write_rgb(&p, &img).unwrap();
    assert_eq!(read_rgb(&p).unwrap(), img);
    let mask = Plane::new(2, 3, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let q = dir.path().join("m.png");
    write_gray(&q, &mask).unwrap();
    assert_eq!(read_mask(&q).unwrap(), mask);
    assert!(matches!(
        read_rgb(&dir.path().join("missing.png")),
        Err(Error::Image { .. })
    ));

    let m = Manifest {
        entries: vec![ManifestEntry {
            dataset: "d".into(),
            image: p.clone(),
            mask: q.clone(),
        }],
    };
    let mp = dir.path().join("manifest.tsv");
    write_text(&mp, &m.render(dir.path())).unwrap();
    assert!(std::fs::read_to_string(&mp)
        .unwrap()
        .contains("d\ti.png\tm.png"));
    assert_eq!(Manifest::load(&mp).unwrap(), m);
    assert!(Manifest::parse("wrong\theader\n", dir.path()).is_err());
    assert!(Manifest::parse("dataset\timage\tmask\na\tb\n", dir.path()).is_err());
}
