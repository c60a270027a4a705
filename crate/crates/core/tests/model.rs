mod common;

use common::*;
use dfca_core::model::{
    Ablation, BackboneConfig, Cam, CamConfig, Checkpoint, DfcaNet, FcBlock, FcConv, FcConvConfig, IfcNet,
    IfcNetConfig, LoadMode, ModelConfig, Stage, Task,
};
use dfca_core::nn::{Mode, ParamStore, Session};
use dfca_core::Tensor;

const BN_EPS: f64 = 1e-5;

fn table1_configs() -> Vec<(FcConvConfig, usize)> {
    vec![
        (FcConvConfig::new(128, 3, 7, 11), 56),
        (FcConvConfig::new(256, 3, 5, 9), 28),
        (FcConvConfig::new(512, 3, 3, 7), 14),
    ]
}

fn small_model(task: Task) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        backbone: BackboneConfig {
            stem_channels: 8,
            layers: 2,
            growth: 4,
            out_channels: 8,
            ..Default::default()
        },
        ifcnet: IfcNetConfig {
            stages: vec![
                Stage::Block { channels: 8, k1: 3, k2: 3, pool: 3 },
                Stage::Transition { channels: 16 },
                Stage::Block { channels: 16, k1: 3, k2: 1, pool: 2 },
            ],
        },
        head: dfca_core::model::HeadConfig { hidden: 16, dropout: 0.2 },
        task,
        ..Default::default()
    }
}

#[test]
fn fcconv_preserves_shape_for_table1_configs() {
    for (cfg, side) in table1_configs() {
        let mut store = ParamStore::<f32>::new();
        let fc = FcConv::new(&mut store, "fc", cfg, &mut rng(1)).unwrap();
        let mut s = Session::new(&store, Mode::Infer, 0).without_grads();
        let x = s.input(random_tensor(&[1, side, side, cfg.channels], 1.0, &mut rng(2)));
        let y = fc.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).shape(), &[1, side, side, cfg.channels]);
    }
}

#[test]
fn fcconv_rejects_odd_channels_and_oversized_pool() {
    let mut store = ParamStore::<f32>::new();
    assert!(FcConv::new(&mut store, "odd", FcConvConfig::new(5, 3, 3, 2), &mut rng(0)).is_err());
    let fc = FcConv::new(&mut store, "fc", FcConvConfig::new(4, 3, 3, 9), &mut rng(0)).unwrap();
    let mut s = Session::new(&store, Mode::Infer, 0);
    let x = s.input(Tensor::ones(&[1, 8, 8, 4]));
    assert!(fc.forward(&mut s, x).is_err());
    let x = s.input(Tensor::ones(&[1, 8, 8, 6]));
    assert!(fc.forward(&mut s, x).is_err());
}

#[test]
fn fcconv_zero_weights_give_zero() {
    for mode in [Mode::Train, Mode::Infer] {
        let mut store = ParamStore::<f32>::new();
        let fc = FcConv::new(&mut store, "fc", FcConvConfig::new(4, 3, 5, 3), &mut rng(3)).unwrap();
        zero_weights(&mut store);
        let mut s = Session::new(&store, mode, 0);
        let x = s.input(random_tensor(&[2, 8, 8, 4], 2.0, &mut rng(4)));
        let y = fc.forward(&mut s, x).unwrap();
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fcconv_matches_reference_in_train_and_infer_statistics() {
    // Infer mode with random running statistics; the reference applies them directly.
    for case in 0..4u64 {
        let mut r = rng(100 + case);
        let mut store = ParamStore::<f64>::new();
        let cfg = FcConvConfig::new(6, 3, [1, 3, 5, 3][case as usize], 2 + case as usize % 3);
        let fc = FcConv::new(&mut store, "fc", cfg, &mut r).unwrap();
        randomize(&mut store, "fc", 0.5, &mut r);
        let x: Tensor<f64> = random_tensor(&[2, 7, 9, 6], 1.0, &mut r);
        let mut s = Session::new(&store, Mode::Infer, 0);
        let xv = s.input(x.clone());
        let y = fc.forward(&mut s, xv).unwrap();
        let expected = fcconv_reference(&store, "fc", &Map::from_tensor(&x), cfg.pool, BN_EPS);
        assert!(max_abs_diff(&to_f64(s.value(y)), &expected.d) < 1e-12);
    }
}

#[test]
fn fcconv_param_count_is_counted_exactly() {
    for (cfg, _) in table1_configs() {
        let mut store = ParamStore::<f32>::new();
        FcConv::new(&mut store, "fc", cfg, &mut rng(0)).unwrap();
        assert_eq!(store.trainable_count(), cfg.param_count());
    }
}

/// Each of the four branch convolutions sees C/2 channels, so when the global
/// kernel is smaller than k1 the FC-Conv is cheaper than one k1×k1 C→C
/// convolution. The Table 1 settings use k2 ≥ k1, which makes the FC-Conv the
/// larger of the two; both facts are pinned here.
#[test]
fn fcconv_versus_regular_conv_parameters() {
    let regular = |c: usize, k: usize| k * k * c * c + c;
    for c in [8, 64, 128, 256, 512] {
        for (k1, k2) in [(3, 1), (5, 3), (7, 3), (7, 5)] {
            let cfg = FcConvConfig::new(c, k1, k2, 2);
            assert!(cfg.param_count() < regular(c, k1), "c={c} k1={k1} k2={k2}");
        }
    }
    for (cfg, _) in table1_configs() {
        assert!(cfg.param_count() > regular(cfg.channels, cfg.k1));
    }
}

#[test]
fn fcblock_residual_wiring() {
    let cfg = FcConvConfig::new(4, 3, 3, 2);
    let mut store = ParamStore::<f64>::new();
    let block = FcBlock::new(&mut store, "b", cfg, &mut rng(5)).unwrap();
    randomize(&mut store, "b", 0.4, &mut rng(6));
    let x: Tensor<f64> = random_tensor(&[1, 6, 6, 4], 1.0, &mut rng(7));

    let mut s = Session::new(&store, Mode::Infer, 0);
    let xv = s.input(x.clone());
    let y = block.forward(&mut s, xv).unwrap();
    let y = s.value(y).clone();

    let mut s = Session::new(&store, Mode::Infer, 0);
    let xv = s.input(x.clone());
    let first = block.convs[0].forward(&mut s, xv).unwrap();
    let mid = block.convs[1].forward(&mut s, first).unwrap();
    let last = block.convs[2].forward(&mut s, mid).unwrap();
    let sum = s.graph.add(last, first).unwrap();
    assert_eq!(s.value(sum), &y);

    // Zeroing the second and third convolutions leaves only the residual.
    let first_out = s.value(first).clone();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, e)| e.name.starts_with("b.fcconv2") || e.name.starts_with("b.fcconv3"))
        .map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec()))
        .collect();
    for (id, name, shape) in ids {
        let v = if name.ends_with("gamma") || name.ends_with("running_var") {
            Tensor::ones(&shape)
        } else {
            Tensor::zeros(&shape)
        };
        store.set(id, v).unwrap();
    }
    let mut s = Session::new(&store, Mode::Infer, 0);
    let xv = s.input(x.clone());
    let y = block.forward(&mut s, xv).unwrap();
    assert_eq!(s.value(y), &first_out);

    zero_weights(&mut store);
    let mut s = Session::new(&store, Mode::Train, 0);
    let xv = s.input(x);
    let y = block.forward(&mut s, xv).unwrap();
    assert!(s.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn ifcnet_stage_shapes_for_56x56x128() {
    let mut store = ParamStore::<f32>::new();
    let net = IfcNet::new(&mut store, "ifcnet", &IfcNetConfig::default(), 128, &mut rng(8)).unwrap();
    let mut s = Session::new(&store, Mode::Infer, 0).without_grads();
    let x = s.input(random_tensor(&[1, 56, 56, 128], 1.0, &mut rng(9)));
    let y = net.forward(&mut s, x).unwrap();
    assert_eq!(s.value(y).shape(), &[1, 14, 14, 512]);
    let shapes: Vec<_> = s.taps().iter().map(|(n, v)| (n.clone(), s.value(*v).shape().to_vec())).collect();
    let expected = [
        ("fcblock1", [1, 56, 56, 128]),
        ("fcblock2", [1, 56, 56, 128]),
        ("fcblock3", [1, 28, 28, 256]),
        ("fcblock4", [1, 28, 28, 256]),
        ("fcblock5", [1, 14, 14, 512]),
    ];
    assert_eq!(shapes.len(), expected.len());
    for ((name, shape), (en, es)) in shapes.iter().zip(expected) {
        assert_eq!(name, en);
        assert_eq!(shape, &es);
    }
    assert!(net.forward(&mut s, x).is_ok());
    let bad = s.input(Tensor::ones(&[1, 56, 56, 64]));
    assert!(net.forward(&mut s, bad).is_err());
}

#[test]
fn ifcnet_batch_independence_and_zero_weights() {
    let cfg = IfcNetConfig {
        stages: vec![
            Stage::Block { channels: 4, k1: 3, k2: 3, pool: 3 },
            Stage::Transition { channels: 8 },
            Stage::Block { channels: 8, k1: 3, k2: 1, pool: 2 },
        ],
    };
    let mut store = ParamStore::<f32>::new();
    let net = IfcNet::new(&mut store, "n", &cfg, 4, &mut rng(10)).unwrap();
    randomize(&mut store, "n", 0.3, &mut rng(11));
    let a: Tensor<f32> = random_tensor(&[1, 8, 8, 4], 1.0, &mut rng(12));
    let b: Tensor<f32> = random_tensor(&[1, 8, 8, 4], 1.0, &mut rng(13));
    let both = Tensor::stack(&[a.clone().reshaped(&[8, 8, 4]).unwrap(), b.clone().reshaped(&[8, 8, 4]).unwrap()]).unwrap();
    let run = |store: &ParamStore<f32>, x: Tensor<f32>| {
        let mut s = Session::new(store, Mode::Infer, 0);
        let v = s.input(x);
        let y = net.forward(&mut s, v).unwrap();
        s.value(y).clone()
    };
    let joint = run(&store, both);
    let (ya, yb) = (run(&store, a), run(&store, b));
    let split: Vec<f32> = ya.data().iter().chain(yb.data()).copied().collect();
    let diff = joint.data().iter().zip(&split).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
    assert!(diff < 1e-6, "{diff}");

    zero_weights(&mut store);
    let y = run(&store, random_tensor(&[2, 8, 8, 4], 1.0, &mut rng(14)));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn cam_examples() {
    let store = ParamStore::<f64>::new();
    let x: Tensor<f64> = random_tensor(&[2, 3, 4, 5], 1.0, &mut rng(15));
    let mut s = Session::new(&store, Mode::Infer, 0);
    let xv = s.input(x.clone());
    let y = Cam::new(CamConfig { beta: 0.0 }).unwrap().forward(&mut s, xv).unwrap();
    assert_eq!(s.value(y), &x);

    let c = Tensor::<f64>::full(&[1, 3, 3, 4], 0.7);
    let xv = s.input(c);
    let y = Cam::new(CamConfig::default()).unwrap().forward(&mut s, xv).unwrap();
    assert!(s.value(y).data().iter().all(|&v| (v - 1.4).abs() < 1e-15));

    // channel0 = [1, 0], channel1 = [0, 1] over a 1×2 map
    let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let xv = s.input(x.clone());
    let y = Cam::new(CamConfig::default()).unwrap().forward(&mut s, xv).unwrap();
    let e = std::f64::consts::E;
    let (hi, lo) = (e / (e + 1.0), 1.0 / (e + 1.0));
    // U = [[hi, lo], [lo, hi]]; refined pixel p, channel i = Σ_j U_ij Q_jp
    let expected = [1.0 + hi, lo, lo, 1.0 + hi];
    assert!(max_abs_diff(s.value(y).data(), &expected) < 1e-12);
    let (_, oracle) = cam_reference(&Map::from_tensor(&x), 1.0);
    assert!(max_abs_diff(&oracle.d, &expected) < 1e-12);

    assert!(Cam::new(CamConfig { beta: 1.5 }).is_err());
}

#[test]
fn backbone_shapes_and_connectivity() {
    let cfg = ModelConfig::default();
    let mut model = DfcaNet::<f32>::new(cfg.clone(), 0).unwrap();
    model.set_mode(Mode::Infer);
    let expect = (1..=cfg.backbone.layers).map(|j| 16 + (j - 1) * 12).collect::<Vec<_>>();
    assert_eq!(model.backbone().dense_input_channels(), expect);
    for (side, out) in [(224, 56), (112, 28)] {
        let mut s = model.session(0).unwrap();
        let x = s.input(random_tensor(&[1, side, side, 3], 1.0, &mut rng(16)));
        let y = model.backbone().forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).shape(), &[1, out, out, 128]);
    }
    let mut s = model.session(0).unwrap();
    let x = s.input(Tensor::ones(&[1, 30, 32, 3]));
    assert!(model.backbone().forward(&mut s, x).is_err());
}

#[test]
fn model_outputs_and_mode_requirement() {
    let mut model = DfcaNet::<f32>::new(small_model(Task::Pad), 1).unwrap();
    assert!(model.session(0).is_err());
    assert!(model.predict(&Tensor::ones(&[1, 32, 32, 3])).is_err());
    model.set_mode(Mode::Infer);
    let x: Tensor<f32> = random_tensor(&[3, 32, 32, 3], 1.0, &mut rng(17));
    let p = model.predict(&x).unwrap();
    assert_eq!(p.shape(), &[3, 1]);
    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));

    let mut lens = DfcaNet::<f32>::new(small_model(Task::Lens { classes: 3 }), 1).unwrap();
    lens.set_mode(Mode::Infer);
    let p = lens.predict(&x).unwrap();
    assert_eq!(p.shape(), &[3, 3]);
    for row in p.data().chunks(3) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn parameter_counts_match_config_arithmetic() {
    for task in [Task::Pad, Task::Lens { classes: 3 }] {
        for a in Ablation::ALL {
            let cfg = small_model(task).with_ablation(a);
            let model = DfcaNet::<f32>::new(cfg.clone(), 2).unwrap();
            assert_eq!(model.param_count(), cfg.expected_param_count(), "{a:?}");
        }
    }
    let full = ModelConfig::default();
    let model = DfcaNet::<f32>::new(full.clone(), 0).unwrap();
    assert_eq!(model.param_count(), full.expected_param_count());
    let bare = DfcaNet::<f32>::new(full.clone().with_ablation(Ablation::BackboneOnly), 0).unwrap();
    assert!(bare.param_count() < model.param_count());
}

#[test]
fn checkpoint_round_trip_and_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = DfcaNet::<f32>::new(small_model(Task::Pad), 3).unwrap();
    model.set_mode(Mode::Infer);
    let x: Tensor<f32> = random_tensor(&[2, 32, 32, 3], 1.0, &mut rng(18));
    let before = model.predict(&x).unwrap();
    let (p1, p2) = (dir.path().join("a.dfca"), dir.path().join("b.dfca"));
    model.save(&p1).unwrap();

    let mut other = DfcaNet::<f32>::new(small_model(Task::Pad), 99).unwrap();
    other.set_mode(Mode::Infer);
    let report = other.load(&p1, &LoadMode::Strict).unwrap();
    assert!(report.skipped.is_empty());
    other.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert!(other.store().bit_equal(model.store()));
    let after = other.predict(&x).unwrap();
    assert!(before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let mut lens = DfcaNet::<f32>::new(small_model(Task::Lens { classes: 3 }), 4).unwrap();
    assert!(lens.load(&p1, &LoadMode::Strict).is_err());
    let prefixes = vec!["backbone.".into(), "ifcnet.".into(), "cam.".into()];
    let report = lens.load(&p1, &LoadMode::Transfer { prefixes }).unwrap();
    let head: Vec<String> = lens
        .store()
        .iter()
        .map(|(_, e)| e.name.clone())
        .filter(|n| n.starts_with("head."))
        .collect();
    assert_eq!(report.skipped, head);
    assert_eq!(report.loaded.len() + head.len(), lens.store().len());

    let report = lens.load(&p1, &LoadMode::Transfer { prefixes: vec![] }).unwrap();
    assert_eq!(report.skipped, vec!["head.out.weight".to_string(), "head.out.bias".to_string()]);

    let mut bytes = std::fs::read(&p1).unwrap();
    bytes[1] = b'x';
    std::fs::write(&p2, &bytes).unwrap();
    assert!(Checkpoint::load(&p2).is_err());
}

#[test]
fn external_checkpoint_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let src = DfcaNet::<f32>::new(small_model(Task::Pad), 5).unwrap();
    let path = dir.path().join("backbone.dfca");
    src.save(&path).unwrap();
    let mut cfg = small_model(Task::Pad);
    cfg.backbone.variant = dfca_core::model::BackboneVariant::ExternalCheckpoint;
    assert!(DfcaNet::<f32>::new(cfg.clone(), 6).is_err());
    cfg.backbone.checkpoint = Some(path);
    let model = DfcaNet::<f32>::new(cfg, 6).unwrap();
    for (_, e) in model.store().iter().filter(|(_, e)| e.name.starts_with("backbone.")) {
        let id = src.store().id(&e.name).unwrap();
        assert_eq!(src.store().get(id), &*e.value);
    }
}

#[test]
fn feature_map_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = DfcaNet::<f32>::new(ModelConfig::default(), 7).unwrap();
    let img: Tensor<f32> = random_tensor(&[224, 224, 3], 1.0, &mut rng(19));
    assert!(model.dump_feature_maps(&img, &["backbone".into()], dir.path()).is_err());
    model.set_mode(Mode::Infer);
    assert!(model.dump_feature_maps(&img, &[], dir.path()).unwrap().is_empty());
    assert!(model.dump_feature_maps(&img, &["decoder".into()], dir.path()).is_err());
    let files = model.dump_feature_maps(&img, &["backbone".into()], dir.path()).unwrap();
    assert_eq!(files.len(), 1);
    let ck = Checkpoint::load(&files[0]).unwrap();
    assert_eq!(ck.entries.len(), 1);
    assert_eq!(ck.entries[0].shape, vec![56, 56, 128]);
    let dumped: Tensor<f32> = ck.entries[0].to_tensor().unwrap();

    let mut s = model.session(0).unwrap();
    let x = s.input(img.reshaped(&[1, 224, 224, 3]).unwrap());
    let y = model.backbone().forward(&mut s, x).unwrap();
    assert_eq!(s.value(y).data(), dumped.data());
}
