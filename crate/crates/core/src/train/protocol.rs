use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::eval::{evaluate, Evaluation};
use super::report::{format_history, format_report};
use super::trainer::{finetune, train_with, EpochStats, TrainConfig, TrainOutcome};
use crate::data::{
    format_manifest, make_protocol_splits, validation_split, Dataset, LensClass, ProtocolKind, ProtocolSpec,
    SampleRecord, Split, Target,
};
use crate::error::Result;
use crate::model::{DfcaNet, LoadReport, ModelConfig, Task};
use crate::nn::Mode;

pub const REPORT_FILE: &str = "report.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "best.dfca";
pub const SPLITS_FILE: &str = "splits.csv";
pub const LOG_FILE: &str = "run.log";

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub evaluation: Evaluation,
    pub training: TrainOutcome,
    pub param_count: usize,
    pub transfer: Option<LoadReport>,
    /// Run metadata written to the log and appended to the report.
    pub log: Vec<(String, String)>,
    pub train: Vec<SampleRecord>,
    pub validation: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    pub model: ModelConfig,
}

/// Target and output layer a protocol trains for.
pub fn target_for(spec: &ProtocolSpec, records: &[SampleRecord]) -> (Target, Task) {
    if spec.kind == ProtocolKind::LensDetection {
        let mut classes: Vec<LensClass> = records.iter().map(|r| r.lens_class).collect();
        classes.sort();
        classes.dedup();
        let k = classes.len();
        (Target::LensClass(classes), Task::Lens { classes: k })
    } else {
        (Target::Binary, Task::Pad)
    }
}

fn rows_by_sensor(records: &[SampleRecord]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.sensor.clone()).or_insert(0) += 1;
    }
    m
}

fn class_counts(records: &[SampleRecord]) -> String {
    LensClass::ALL
        .iter()
        .map(|c| format!("{}:{}", c, records.iter().filter(|r| r.lens_class == *c).count()))
        .collect::<Vec<_>>()
        .join(",")
}

/// Splits, trains (or fine-tunes from `spec.checkpoint`), evaluates, and
/// writes the report, history, best checkpoint, split manifest and run log
/// into `out_dir`.
pub fn run_protocol(
    spec: &ProtocolSpec,
    records: &[SampleRecord],
    model: &ModelConfig,
    cfg: &TrainConfig,
    threshold: f64,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    let records: Vec<SampleRecord> = records
        .iter()
        .map(|r| SampleRecord {
            label: spec.relabel.label(r.lens_class),
            ..r.clone()
        })
        .collect();
    let splits = make_protocol_splits(&records, spec)?;
    let (train_recs, val_recs) = validation_split(&splits.train, cfg.val_fraction, spec.seed)?;
    let all: Vec<SampleRecord> = splits.train.iter().chain(&splits.test).cloned().collect();
    let (target, task) = target_for(spec, &all);

    let mut model_cfg = model.clone();
    model_cfg.task = task;
    model_cfg.head.dropout = cfg.dropout;
    model_cfg.validate()?;
    let size = model_cfg.image_size;
    let train_set = Dataset::load(train_recs.clone(), size, target.clone())?;
    let val_set = Dataset::load(val_recs.clone(), size, target.clone())?;
    let test_set = Dataset::load(splits.test.clone(), size, target)?;

    let mut net = DfcaNet::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let (training, transfer) = match &spec.checkpoint {
        Some(path) => {
            let (o, r) = finetune(&mut net, path, &train_set, &val_set, cfg, on_epoch)?;
            (o, Some(r))
        }
        None => (train_with(&mut net, &train_set, &val_set, cfg, on_epoch)?, None),
    };
    net.set_mode(Mode::Infer);
    let evaluation = evaluate(&net, &test_set, threshold, cfg.batch_size)?;

    let on_off = |b: bool| if b { "on" } else { "off" }.to_string();
    let mut log: Vec<(String, String)> = vec![
        ("protocol".into(), spec.kind.name().into()),
        ("soft_lens_as".into(), format!("{:?}", spec.relabel.soft_lens_as).to_lowercase()),
        ("ifcnet".into(), on_off(model_cfg.use_ifcnet)),
        ("cam".into(), on_off(model_cfg.use_cam)),
        ("param_count".into(), net.param_count().to_string()),
        ("param_audit".into(), model_cfg.expected_param_count().to_string()),
        ("train_samples".into(), train_set.len().to_string()),
        ("val_samples".into(), val_set.len().to_string()),
        ("test_samples".into(), test_set.len().to_string()),
        ("train_classes".into(), class_counts(&splits.train)),
        ("test_classes".into(), class_counts(&splits.test)),
        ("train_attack".into(), splits.train.iter().filter(|r| r.label.target() == 1).count().to_string()),
        ("train_bonafide".into(), splits.train.iter().filter(|r| r.label.target() == 0).count().to_string()),
        (
            "train_sensors".into(),
            rows_by_sensor(&splits.train).keys().cloned().collect::<Vec<_>>().join(","),
        ),
        (
            "test_sensors".into(),
            rows_by_sensor(&splits.test).keys().cloned().collect::<Vec<_>>().join(","),
        ),
    ];
    for (side, recs) in [("train_rows", &splits.train), ("test_rows", &splits.test)] {
        for (s, n) in rows_by_sensor(recs) {
            log.push((format!("{side}.{s}"), n.to_string()));
        }
    }
    if spec.kind == ProtocolKind::CrossDatabase {
        let leaked = splits.train.iter().filter(|r| spec.test_sensors.contains(&r.sensor)).count();
        log.push(("train_rows_of_test_sensors".into(), leaked.to_string()));
    }
    log.push((
        "best_epoch".into(),
        training.best_epoch.map_or_else(|| "none".into(), |e| e.to_string()),
    ));
    if let Some(t) = &transfer {
        log.push(("transferred".into(), t.loaded.len().to_string()));
        log.push(("reinitialized".into(), t.skipped.join(",")));
    }

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(REPORT_FILE), format_report(&evaluation.report, &log))?;
    std::fs::write(out_dir.join(HISTORY_FILE), format_history(&training.history))?;
    std::fs::write(
        out_dir.join(LOG_FILE),
        log.iter().map(|(k, v)| format!("{k}={v}\n")).collect::<String>(),
    )?;
    net.save(&out_dir.join(CHECKPOINT_FILE))?;
    let mut marked: Vec<SampleRecord> = Vec::new();
    for (recs, split) in [(&splits.train, Split::Train), (&splits.test, Split::Test)] {
        marked.extend(recs.iter().map(|r| SampleRecord { split, ..r.clone() }));
    }
    std::fs::write(out_dir.join(SPLITS_FILE), format_manifest(&marked, Path::new("")))?;

    Ok(ProtocolOutcome {
        evaluation,
        training,
        param_count: net.param_count(),
        transfer,
        log,
        train: train_recs,
        validation: val_recs,
        test: splits.test,
        model: model_cfg,
    })
}

/// Paths of the artifacts `run_protocol` writes into `dir`.
pub fn artifact_paths(dir: &Path) -> [PathBuf; 5] {
    [REPORT_FILE, HISTORY_FILE, CHECKPOINT_FILE, SPLITS_FILE, LOG_FILE].map(|f| dir.join(f))
}
