use std::path::{Path, PathBuf};

use dfca_core::data::{
    decode_and_resize, load_manifest, make_protocol_splits, parse_counts, synth_generate, AugmentConfig, Dataset,
    Label, ProtocolKind, SampleRecord,
};
use dfca_core::gradcheck::{run_suite, Checker, Scale};
use dfca_core::model::{Ablation, DfcaNet, LoadMode, ModelConfig, Stage};
use dfca_core::nn::Mode;
use dfca_core::train::{evaluate, format_report, run_protocol, target_for};

use crate::config::{self, RunConfig, SynthRun, DATA_ROOT_VAR};
use crate::error::CliError;
use crate::{AblateArg, DumpArgs, EvalArgs, GradcheckArgs, LabelArg, PresetArg, ProtocolArg, SplitArg, SynthArgs, TrainArgs};

const COUNTS_HINT: &str = "--counts takes five comma-separated image counts in the order normal,soft,textured,print,scan, e.g. --counts 200,200,200,200,0";

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut run: SynthRun = match &a.config {
        Some(p) => config::read(p)?,
        None => SynthRun::default(),
    };
    if let Some(c) = &a.counts {
        run.counts = parse_counts(c).map_err(|e| CliError::Usage(format!("{e}\n{COUNTS_HINT}")))?;
    }
    if run.counts.iter().sum::<usize>() == 0 {
        return Err(CliError::Usage(format!("nothing to generate: every count is zero\n{COUNTS_HINT}")));
    }
    if let Some(s) = a.seed {
        run.synth.seed = s;
    }
    if let Some(n) = a.image_size {
        run.synth.image_size = n;
    }
    run.synth.validate()?;
    let written = config::write(&run, &a.out)?;
    let out = synth_generate(&run.synth, &run.counts, &a.out)?;
    println!("images={}", out.records.len());
    println!("manifest={}", out.manifest.display());
    println!("config={}", written.display());
    Ok(())
}

fn protocol_kind(p: ProtocolArg) -> ProtocolKind {
    match p {
        ProtocolArg::Intra => ProtocolKind::Intra,
        ProtocolArg::Inter => ProtocolKind::Inter,
        ProtocolArg::Combined => ProtocolKind::Combined,
        ProtocolArg::CrossDatabase => ProtocolKind::CrossDatabase,
        ProtocolArg::Incremental => ProtocolKind::Incremental,
        ProtocolArg::LensDetection => ProtocolKind::LensDetection,
    }
}

fn ablation(a: AblateArg) -> Ablation {
    match a {
        AblateArg::None => Ablation::Full,
        AblateArg::NoIfcnet => Ablation::BackboneCam,
        AblateArg::NoCam => Ablation::BackboneIfcnet,
        AblateArg::BackboneOnly => Ablation::BackboneOnly,
    }
}

/// Config file, then presets, then individual flags.
fn resolve(a: &TrainArgs, finetune: bool) -> Result<RunConfig, CliError> {
    let mut c: RunConfig = match &a.config {
        Some(p) => config::read(p)?,
        None => {
            let mut c = RunConfig::default();
            if finetune {
                c.protocol.kind = ProtocolKind::Incremental;
            }
            c
        }
    };
    if let Some(m) = &a.manifest {
        c.manifest = Some(m.clone());
    }
    if c.manifest.is_none() {
        if let Ok(root) = std::env::var(DATA_ROOT_VAR) {
            c.manifest = Some(Path::new(&root).join("manifest.csv"));
        }
    }
    let p = &mut c.protocol;
    if let Some(k) = a.protocol {
        p.kind = protocol_kind(k);
    }
    let lists = [
        (&a.train_sensors, &mut p.train_sensors),
        (&a.test_sensors, &mut p.test_sensors),
        (&a.train_datasets, &mut p.train_datasets),
        (&a.test_datasets, &mut p.test_datasets),
    ];
    for (flag, field) in lists {
        if let Some(v) = flag {
            *field = v.clone();
        }
    }
    if let Some(n) = a.test_subsample {
        p.test_subsample = Some(n);
    }
    if let Some(l) = a.soft_lens_as {
        p.relabel.soft_lens_as = match l {
            LabelArg::Attack => Label::Attack,
            LabelArg::Bonafide => Label::Bonafide,
        };
    }
    if let Some(ck) = &a.from_checkpoint {
        p.checkpoint = Some(ck.clone());
    }
    if let Some(s) = a.seed {
        p.seed = s;
        c.train.seed = s;
    }
    match a.model {
        Some(PresetArg::Paper) => c.model = ModelConfig::default(),
        Some(PresetArg::Desk) => c.model = ModelConfig::desk(),
        None => {}
    }
    if let Some(ab) = a.ablate {
        c.model = c.model.clone().with_ablation(ablation(ab));
    }
    if let Some(n) = a.image_size {
        c.model.image_size = n;
    }
    let t = &mut c.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.dropout {
        t.dropout = v;
    }
    if let Some(v) = a.val_fraction {
        t.val_fraction = v;
    }
    if a.no_augment {
        t.augment = Some(AugmentConfig::identity());
    }
    if let Some(v) = a.threshold {
        c.threshold = v;
    }
    if let Some(id) = &a.run_id {
        c.run_id = id.clone();
    }
    if c.run_id.is_empty() || c.run_id.contains(['/', '\\']) || c.run_id == "." || c.run_id == ".." {
        return Err(CliError::Usage(format!("run id {:?} must be a plain directory name", c.run_id)));
    }
    if finetune && c.protocol.checkpoint.is_none() {
        return Err(CliError::Usage("finetune needs --from-checkpoint".into()));
    }
    c.normalize()?;
    Ok(c)
}

fn manifest_path(c: &RunConfig) -> Result<&Path, CliError> {
    c.manifest
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("no manifest: pass --manifest or set {DATA_ROOT_VAR}")))
}

pub fn train(a: TrainArgs, finetune: bool) -> Result<(), CliError> {
    let mut c = resolve(&a, finetune)?;
    c.train.validate()?;
    let dir = a.out.join(&c.run_id);
    config::write(&c, &dir)?;
    let records = load_manifest(manifest_path(&c)?, c.protocol.relabel)?;
    let epochs = c.train.epochs;
    let outcome = run_protocol(&c.protocol, &records, &c.model, &c.train, c.threshold, &dir, &mut |s| {
        eprintln!(
            "epoch {}/{epochs} train_loss={:.5} val_loss={:.5} val_acc={:.2}",
            s.epoch, s.train_loss, s.val_loss, s.val_acc
        );
    })?;
    // The effective model (task and dropout as trained) is what eval and dump rebuild.
    c.model = outcome.model.clone();
    config::write(&c, &dir)?;
    print!("{}", std::fs::read_to_string(dir.join("report.txt")).map_err(|e| CliError::Data(e.to_string()))?);
    eprintln!("outputs in {}", dir.display());
    Ok(())
}

fn load_model(checkpoint: &Path, model: &ModelConfig, seed: u64) -> Result<DfcaNet<f32>, CliError> {
    let mut net = DfcaNet::<f32>::new(model.clone(), seed)?;
    net.load(checkpoint, &LoadMode::Strict)?;
    net.set_mode(Mode::Infer);
    Ok(net)
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let c = config::beside(&a.checkpoint)?;
    let manifest = match &a.manifest {
        Some(m) => m.clone(),
        None => manifest_path(&c)?.to_path_buf(),
    };
    let records = load_manifest(&manifest, c.protocol.relabel)?;
    let splits = make_protocol_splits(&records, &c.protocol)?;
    let all: Vec<SampleRecord> = splits.train.iter().chain(&splits.test).cloned().collect();
    let (target, task) = target_for(&c.protocol, &all);
    let chosen = match a.split {
        SplitArg::Train => splits.train,
        SplitArg::Test => splits.test,
        SplitArg::All => all,
    };
    let mut model = c.model.clone();
    model.task = task;
    let net = load_model(&a.checkpoint, &model, c.train.seed)?;
    let data = Dataset::load(chosen, model.image_size, target)?;
    let threshold = a.threshold.unwrap_or(c.threshold);
    let e = evaluate(&net, &data, threshold, c.train.batch_size)?;
    let split = match a.split {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    };
    let text = format_report(
        &e.report,
        &[
            ("split".into(), split.into()),
            ("checkpoint".into(), a.checkpoint.display().to_string()),
        ],
    );
    if let Some(out) = &a.out {
        std::fs::write(out, &text).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    }
    print!("{text}");
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let mut checker = Checker {
        seed: a.seed,
        fault: a.inject_fault.clone(),
        ..Default::default()
    };
    if let Some(t) = a.tolerance {
        checker.tolerance = t;
    }
    let crate::ScaleArg::Tiny = a.scale;
    let results = run_suite(&checker, Scale::Tiny)?;
    if let Some(f) = &a.inject_fault {
        if !results.iter().any(|r| &r.name == f) {
            let names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
            return Err(CliError::Usage(format!("no check named {f}; checks are {}", names.join(", "))));
        }
    }
    println!("{:<24} {:>10} {:>7} {:>7}  result", "check", "rel_err", "points", "skipped");
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        println!("{:<24} {:>10.2e} {:>7} {:>7}  {verdict}", r.name, r.rel_error, r.points, r.skipped);
    }
    let worst = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!("max_rel_err={worst:.2e} tolerance={:.0e} checks={}", checker.tolerance, results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Stage names a model built from `m` exposes.
fn stage_names(m: &ModelConfig) -> Vec<String> {
    let mut names = vec!["backbone".to_string()];
    if m.use_ifcnet {
        let blocks = m.ifcnet.stages.iter().filter(|s| matches!(s, Stage::Block { .. })).count();
        names.extend((1..=blocks).map(|i| format!("fcblock{i}")));
    }
    if m.use_cam {
        names.push("cam".into());
    }
    names.push("embedding".into());
    names
}

pub fn dump(a: DumpArgs) -> Result<(), CliError> {
    let c = config::beside(&a.checkpoint)?;
    let valid = stage_names(&c.model);
    if let Some(bad) = a.stages.iter().find(|s| !valid.contains(s)) {
        return Err(CliError::Usage(format!("unknown stage {bad}; valid stages: {}", valid.join(", "))));
    }
    let net = load_model(&a.checkpoint, &c.model, c.train.seed)?;
    let size = c.model.image_size;
    let image = decode_and_resize(&a.image, (size, size))?;
    let dir: PathBuf = match &a.out {
        Some(d) => d.clone(),
        None => a.checkpoint.parent().unwrap_or(Path::new(".")).join("maps"),
    };
    for p in net.dump_feature_maps(&image, &a.stages, &dir)? {
        println!("{}", p.display());
    }
    Ok(())
}
