use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::Rng;
use spoofnet::activations::{ActivationKind, ActivationSpec};
use spoofnet::evaluation::{Key, Partition, Protocol, TrialRecord};
use spoofnet::frontend::{feature_path, write_features, FeatureMatrix};
use spoofnet::model::{load_checkpoint, Arch, Model, ModelConfig};
use spoofnet::numerics::{grad_check_many, Graph, Tensor};
use spoofnet::training::{ocs_loss, train, OcsParams, TrainConfig, TrainLayout};
use spoofnet::{seed_rng, Error};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        arch: Arch::SeResnet18,
        activation: ActivationSpec::init(ActivationKind::Arelu).unwrap(),
        se_reduction: 2,
        stem_channels: 2,
        stage_channels: vec![4, 4, 4, 4],
        final_channels: 4,
        attention_dim: 4,
        embedding_dim: 8,
        ..ModelConfig::default()
    }
}

/// `n` maps per class per partition; spoof maps carry a strong offset on
/// a band of rows.
fn write_corpus(dir: &Path, n: usize, frames: usize, seed: u64) -> Protocol {
    let mut rng = seed_rng(seed);
    let mut records = Vec::new();
    for (tag, partition) in [("T", Partition::Train), ("D", Partition::Dev)] {
        for i in 0..n {
            for key in [Key::Bonafide, Key::Spoof] {
                let utt = format!("X_{tag}_{:04}{}", i, key.label());
                let values: Vec<f64> = (0..60 * frames)
                    .map(|j| {
                        let row = j / frames;
                        let base = rng.random_range(-1.0..1.0);
                        if key == Key::Spoof && (20..30).contains(&row) {
                            base + 2.0
                        } else {
                            base
                        }
                    })
                    .collect();
                let m = FeatureMatrix::new(utt.clone(), 60, frames, values).unwrap();
                write_features(&feature_path(dir, &utt), &m).unwrap();
                records.push(TrialRecord {
                    speaker_id: "S".into(),
                    utt_id: utt,
                    attack_id: if key == Key::Spoof { "A01".into() } else { "-".into() },
                    key,
                    partition,
                });
            }
        }
    }
    Protocol::from_records(records).unwrap()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr0: 3e-3,
        epochs: 1,
        crop_frames: 32,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn two_step_dry_run() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("f");
    fs::create_dir_all(&feats).unwrap();
    let protocol = write_corpus(&feats, 32, 40, 1);
    let cfg = TrainConfig {
        max_steps: Some(2),
        ..quick_cfg()
    };
    let mut model = Model::<f32>::build(&tiny_model(), 1).unwrap();
    let out = dir.path().join("run");
    let summary = train(&mut model, &feats, &protocol, &cfg, &out).unwrap();
    assert_eq!(summary.steps, 2);
    let layout = TrainLayout::new(&out);
    let log = fs::read_to_string(layout.loss_log()).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,epoch,lr,loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,0,0.003,") && lines[2].starts_with("2,0,0.003,"));
    let (_, step) = load_checkpoint(&layout.best_checkpoint()).unwrap();
    assert_eq!(step, 2);
    assert!(layout.epoch_checkpoint(0).join("manifest.json").is_file());
    assert!(layout.summary().is_file());
}

#[test]
fn fixed_seed_runs_are_identical_and_loss_falls() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("f");
    fs::create_dir_all(&feats).unwrap();
    let protocol = write_corpus(&feats, 16, 40, 2);
    let cfg = TrainConfig { epochs: 3, ..quick_cfg() };
    let run = |name: &str| {
        let mut model = Model::<f32>::build(&tiny_model(), 3).unwrap();
        let out = dir.path().join(name);
        let s = train(&mut model, &feats, &protocol, &cfg, &out).unwrap();
        (s, out)
    };
    let (a, out_a) = run("a");
    let (b, out_b) = run("b");
    assert_eq!(a, b);
    let read = |p: &Path| fs::read(p).unwrap();
    assert_eq!(read(&out_a.join("loss.csv")), read(&out_b.join("loss.csv")));
    for entry in fs::read_dir(out_a.join("best")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(read(&out_a.join("best").join(&name)), read(&out_b.join("best").join(&name)));
    }
    let first = a.epochs.first().unwrap().mean_loss;
    let last = a.epochs.last().unwrap().mean_loss;
    assert!(last < first, "mean loss went {first} -> {last}");
}

#[test]
fn missing_features_abort_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let protocol = write_corpus(dir.path(), 4, 20, 3);
    fs::remove_file(feature_path(dir.path(), "X_T_00011")).unwrap();
    fs::remove_file(feature_path(dir.path(), "X_D_00000")).unwrap();
    let mut model = Model::<f32>::build(&tiny_model(), 1).unwrap();
    let out = dir.path().join("run");
    let err = train(&mut model, dir.path(), &protocol, &quick_cfg(), &out).unwrap_err();
    match err {
        Error::MissingFeatures { missing } => assert_eq!(missing, ["X_T_00011", "X_D_00000"]),
        other => panic!("unexpected {other}"),
    }
    assert!(!out.join("loss.csv").exists());
}

fn loss_of(emb: &[f64], n: usize, d: usize, labels: &[usize], w0: &[f64], p: &OcsParams) -> f64 {
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::from_f64([n, d], emb).unwrap());
    let w = g.constant(Tensor::from_f64([d], w0).unwrap());
    let l = ocs_loss(&mut g, e, labels, w, p).unwrap();
    g.value(l).item().unwrap()
}

/// Unit vector at angle θ from e1 in the (e1, e2) plane.
fn at_cos(c: f64) -> Vec<f64> {
    vec![c, (1.0 - c * c).sqrt(), 0.0]
}

#[test]
fn ocs_boundary_and_monotonicity() {
    let w0 = [2.0, 0.0, 0.0];
    for k in [0.5, 1.0, 20.0, 64.0] {
        let p = OcsParams { k, m0: 0.9, m1: 0.2 };
        let l0 = loss_of(&at_cos(0.9), 1, 3, &[0], &w0, &p);
        let l1 = loss_of(&at_cos(0.2), 1, 3, &[1], &w0, &p);
        assert!((l0 - 2f64.ln()).abs() < 1e-12 && (l1 - 2f64.ln()).abs() < 1e-12, "k={k}: {l0} {l1}");
    }
    let p = OcsParams::default();
    let cosines: Vec<f64> = (0..=20).map(|i| -1.0 + i as f64 * 0.1).collect();
    let bona: Vec<f64> = cosines.iter().map(|&c| loss_of(&at_cos(c), 1, 3, &[0], &w0, &p)).collect();
    let spoof: Vec<f64> = cosines.iter().map(|&c| loss_of(&at_cos(c), 1, 3, &[1], &w0, &p)).collect();
    assert!(bona.windows(2).all(|w| w[1] < w[0]));
    assert!(spoof.windows(2).all(|w| w[1] > w[0]));
    assert!(bona.iter().chain(&spoof).all(|&l| l >= 0.0));
    let zero = [0.0, 0.0, 0.0];
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::from_f64([1, 3], &zero).unwrap());
    let w = g.constant(Tensor::from_f64([3], &w0).unwrap());
    assert!(matches!(ocs_loss(&mut g, e, &[0], w, &p), Err(Error::Normalization(_))));
}

#[test]
fn ocs_gradient_matches_finite_differences() {
    // Embeddings near the margins keep the k = 20 softplus unsaturated.
    let w0 = [1.0, -0.5, 0.25, 2.0];
    let norm = (w0.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let u: Vec<f64> = w0.iter().map(|v| v / norm).collect();
    let o = [0.5, 1.0, 0.0, -0.125];
    let dot: f64 = o.iter().zip(&u).map(|(a, b)| a * b).sum();
    let o: Vec<f64> = o.iter().zip(&u).map(|(a, b)| a - dot * b).collect();
    let on = o.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut emb = Vec::new();
    for (c, s) in [(0.85, 1.5), (0.25, 0.7), (0.95, 2.0)] {
        let sin = (1.0f64 - c * c).sqrt();
        emb.extend((0..4).map(|i| s * (c * u[i] + sin * o[i] / on)));
    }
    let inputs = [
        Tensor::from_f64([3, 4], &emb).unwrap(),
        Tensor::from_f64([4], &w0).unwrap(),
    ];
    let r = grad_check_many(
        |g, v| ocs_loss(g, v[0], &[0, 1, 0], v[1], &OcsParams::default()),
        &inputs,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(r.pass && r.skipped.is_empty(), "{r:?}");
}

proptest! {
    #[test]
    fn ocs_is_scale_invariant(
        seed in any::<u64>(),
        scales in prop::collection::vec(0.01f64..100.0, 4),
    ) {
        let mut rng = seed_rng(seed);
        let d = 5;
        let emb: Vec<f64> = (0..4 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = emb.iter().enumerate().map(|(i, v)| v * scales[i / d]).collect();
        let labels = [0, 1, 1, 0];
        let p = OcsParams::default();
        let a = loss_of(&emb, 4, d, &labels, &w0, &p);
        let b = loss_of(&scaled, 4, d, &labels, &w0, &p);
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
    }
}
