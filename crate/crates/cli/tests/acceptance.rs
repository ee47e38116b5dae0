//! Acceptance suite. Every criterion runs in sequence inside one test (so
//! the timed ones get the machine to themselves) and prints one PASS/FAIL
//! line to stderr.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use spoofnet::activations::{arelu, elsa, relu, rrelu, ActivationKind, ActivationSpec, Mode, RRELU_LOWER, RRELU_UPPER};
use spoofnet::diagnostics::gradient_suite;
use spoofnet::evaluation::{
    compute_eer, compute_min_tdcf, evaluate, fuse_scores, parse_protocol, MetricReport, Partition, ScoreSet,
    TdcfParams, TdcfVersion,
};
use spoofnet::frontend::FeatureMatrix;
use spoofnet::model::{load_checkpoint, Arch, InteriorPolicy, Model, ModelConfig};
use spoofnet::numerics::{Graph, Tensor};
use spoofnet::training::{ocs_loss, score_utterances, train, OcsParams, TrainLayout, TrainSummary};
use spoofnet::{seed_rng, SeedRng};
use spoofnet_cli::config::RunConfig;
use spoofnet_cli::run;
use spoofnet_cli::synth::synth_dataset;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn uniform(rng: &mut SeedRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

// ------------------------------------------------------------------ 1

fn gradient_suite_passes() -> Outcome {
    let start = Instant::now();
    let results = gradient_suite(100, 1).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.pass || r.skipped > 0)
        .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_err))
        .collect();
    check(failed.is_empty(), format!("failing blocks: {}", failed.join(", ")))?;
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(format!(
        "{} blocks x 100 trials, worst rel err {worst:.2e}, {:.1}s",
        results.len(),
        elapsed.as_secs_f64()
    ))
}

// ------------------------------------------------------------------ 2

fn arelu_decomposes() -> Outcome {
    let n = 1_000_000;
    let mut rng = seed_rng(2);
    let xs = uniform(&mut rng, n, -50.0, 50.0);
    let mut worst = 0.0f64;
    for (alpha, beta) in [(0.9, 2.0), (0.3, -1.5), (1.7, 0.0), (-0.4, 4.0)] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([n], &xs).unwrap());
        let a = g.constant(Tensor::from_f64([1], &[alpha]).unwrap());
        let b = g.constant(Tensor::from_f64([1], &[beta]).unwrap());
        let y = arelu(&mut g, x, a, b).map_err(|e| e.to_string())?;
        let r = relu(&mut g, x).map_err(|e| e.to_string())?;
        let (y, r) = (g.value(y).data(), g.value(r).data());
        for i in 0..n {
            worst = worst.max((y[i] - (r[i] + elsa(xs[i], alpha, beta))).abs());
        }
    }
    check(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("4 (alpha, beta) pairs x 1e6 inputs, max |AReLU - ReLU - ELSA| = {worst:e}"))
}

// ------------------------------------------------------------------ 3

fn rrelu_modes() -> Outcome {
    let (l, u) = (RRELU_LOWER, RRELU_UPPER);
    check((l, u) == (0.125, 0.333), "unexpected RReLU defaults")?;
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([1], &[-1.0]).unwrap());
    let y = rrelu(&mut g, x, l, u, Mode::Eval, None).map_err(|e| e.to_string())?;
    let slope = -g.value(y).data()[0];
    check(slope == (l + u) / 2.0, format!("eval slope {slope}"))?;
    check((slope - 0.229).abs() < 1e-15, format!("eval slope {slope}"))?;

    let n = 100_000;
    let x = g.constant(Tensor::from_f64([n], &vec![-1.0; n]).unwrap());
    let mut rng = seed_rng(3);
    let y = rrelu(&mut g, x, l, u, Mode::Train, Some(&mut rng)).map_err(|e| e.to_string())?;
    let mean = -g.value(y).data().iter().sum::<f64>() / n as f64;
    let rel = (mean - 0.229).abs() / 0.229;
    check(rel < 0.01, format!("train mean slope {mean} ({:.3}% off)", rel * 100.0))?;
    Ok(format!("eval slope {slope}, train mean slope {mean:.5} over 1e5 draws ({:.3}% off)", rel * 100.0))
}

// ------------------------------------------------------------------ 4

fn narrow(arch: Arch, activation: ActivationSpec) -> ModelConfig {
    ModelConfig {
        arch,
        activation,
        se_reduction: 4,
        stem_channels: 4,
        stage_channels: vec![8, 8, 16, 16],
        final_channels: 16,
        attention_dim: 8,
        embedding_dim: 32,
        ..ModelConfig::default()
    }
}

fn random_map(rng: &mut SeedRng, frames: usize) -> FeatureMatrix {
    FeatureMatrix::new("u".into(), 60, frames, uniform(rng, 60 * frames, -2.0, 2.0)).unwrap()
}

fn ensemble_identity() -> Outcome {
    let mut rng = seed_rng(4);
    let maps: Vec<FeatureMatrix> = (0..3).map(|_| random_map(&mut rng, 64)).collect();
    let refs: Vec<&FeatureMatrix> = maps.iter().collect();
    for policy in [InteriorPolicy::FirstLastOnly, InteriorPolicy::AllSites] {
        let mut plain = narrow(Arch::SeResnet18, ActivationSpec::Relu);
        plain.interior_activation_policy = policy;
        let mut ens = plain.clone();
        ens.activation = ActivationSpec::ensemble_of(&[ActivationKind::Relu]).unwrap();
        let a = Model::<f32>::build(&plain, 7).unwrap().infer(&refs).unwrap();
        let b = Model::<f32>::build(&ens, 7).unwrap().infer(&refs).unwrap();
        let bits = |v: &(Vec<Vec<f64>>, Vec<f64>)| -> Vec<u64> {
            v.0.iter().flatten().chain(&v.1).map(|x| x.to_bits()).collect()
        };
        check(bits(&a) == bits(&b), format!("outputs differ under {policy:?}"))?;
    }
    let xs = uniform(&mut rng, 10_000, -5.0, 5.0);
    let two = ActivationSpec::ensemble_of(&[ActivationKind::Relu, ActivationKind::Relu]).unwrap();
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([xs.len()], &xs).unwrap());
    let y = two.apply(&mut g, x, Mode::Eval, None).unwrap();
    let exact = g.value(y).data().iter().zip(&xs).all(|(y, x)| *y == 2.0 * x.max(0.0));
    check(exact, "ensemble{relu, relu} differs from 2 relu")?;
    Ok("ensemble{relu} model bit-identical under both placement policies; ensemble{relu, relu} = 2 relu exactly".into())
}

// ------------------------------------------------------------------ 5

fn expected_shapes(l: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("input", vec![1, 60, l]),
        ("stem", vec![16, 18, l]),
        ("stage1", vec![64, 18, l]),
        ("stage2", vec![128, 9, l / 2]),
        ("stage3", vec![256, 5, l / 4]),
        ("stage4", vec![512, 3, l / 8]),
        ("final_conv", vec![256, 1, l / 8]),
        ("pool", vec![512]),
        ("fc", vec![256]),
        ("softmax", vec![2]),
    ]
}

fn shapes_conform() -> Outcome {
    let mut n = 0;
    for l in [96, 400] {
        for arch in [Arch::Resnet18, Arch::SeResnet18] {
            for use_batchnorm in [true, false] {
                let cfg = ModelConfig {
                    arch,
                    use_batchnorm,
                    ..ModelConfig::default()
                };
                let model = Model::<f32>::build(&cfg, 5).map_err(|e| e.to_string())?;
                let trace = model.trace_shapes(l).map_err(|e| e.to_string())?;
                let got: Vec<(&str, Vec<usize>)> = trace.iter().map(|(k, s)| (k.as_str(), s.clone())).collect();
                check(
                    got == expected_shapes(l),
                    format!("L={l} {arch:?} bn={use_batchnorm}: {got:?}"),
                )?;
                n += 1;
            }
        }
    }
    Ok(format!("{n} full-width traces (L in {{96, 400}}, both archs, BN on/off) match"))
}

// ------------------------------------------------------------------ 6

fn brute_rates(bona: &[f64], spoof: &[f64]) -> Vec<(f64, f64)> {
    let mut cands: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands.push(f64::INFINITY);
    cands
        .into_iter()
        .map(|t| {
            let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
            let frr = bona.iter().filter(|&&b| b < t).count() as f64 / bona.len() as f64;
            (far, frr)
        })
        .collect()
}

fn brute_eer(bona: &[f64], spoof: &[f64]) -> f64 {
    let r = brute_rates(bona, spoof);
    for i in 0..r.len() {
        let d = r[i].0 - r[i].1;
        if d == 0.0 {
            return r[i].0;
        }
        if d < 0.0 {
            let dp = r[i - 1].0 - r[i - 1].1;
            let w = dp / (dp - d);
            return (1.0 - w) * r[i - 1].1 + w * r[i].1;
        }
    }
    unreachable!("the reject-all point always has FAR - FRR <= 0")
}

fn brute_tdcf(bona: &[f64], spoof: &[f64], p: &TdcfParams) -> f64 {
    let (c0, c1, c2) = match p.version {
        TdcfVersion::Asvspoof2019 => (
            0.0,
            p.pi_tar * (p.c_miss_cm - p.c_miss_asv * p.p_miss_asv) - p.pi_non * p.c_fa_asv * p.p_fa_asv,
            p.c_fa_cm * p.pi_spoof * (1.0 - p.p_miss_spoof_asv),
        ),
        TdcfVersion::Revised => {
            let c0 = p.pi_tar * p.c_miss_asv * p.p_miss_asv + p.pi_non * p.c_fa_asv * p.p_fa_asv;
            (c0, p.pi_tar * p.c_miss_asv - c0, p.pi_spoof * p.c_fa_cm * (1.0 - p.p_miss_spoof_asv))
        }
    };
    brute_rates(bona, spoof)
        .into_iter()
        .map(|(far, frr)| (c0 + c1 * frr + c2 * far) / (c0 + c1.min(c2)))
        .fold(f64::INFINITY, f64::min)
}

fn metric_oracles() -> Outcome {
    let mut rng = seed_rng(6);
    let params = [
        TdcfParams::default(),
        TdcfParams {
            p_miss_asv: 0.03,
            p_fa_asv: 0.05,
            p_miss_spoof_asv: 0.3,
            ..TdcfParams::default()
        },
        TdcfParams {
            version: TdcfVersion::Revised,
            p_miss_asv: 0.03,
            p_fa_asv: 0.05,
            p_miss_spoof_asv: 0.3,
            ..TdcfParams::default()
        },
    ];
    let (mut eer_err, mut tdcf_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let nb = rng.random_range(1..=100);
        let ns = rng.random_range(1..=100);
        let grid = rng.random_bool(0.5);
        let mut draw = |shift: f64| {
            let v: f64 = rng.random_range(-1.0..1.0) + shift;
            if grid {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        };
        let b: Vec<f64> = (0..nb).map(|_| draw(0.4)).collect();
        let s: Vec<f64> = (0..ns).map(|_| draw(0.0)).collect();
        let set = ScoreSet::from_labeled(&b, &s).unwrap();
        eer_err = eer_err.max((compute_eer(&set).unwrap().eer - brute_eer(&b, &s)).abs());
        for p in &params {
            let m = compute_min_tdcf(&set, p).unwrap().min_tdcf;
            check((0.0..=1.0).contains(&m), format!("min-tDCF {m} outside [0, 1]"))?;
            tdcf_err = tdcf_err.max((m - brute_tdcf(&b, &s, p)).abs());
        }
    }
    check(eer_err <= 1e-9, format!("EER deviates by {eer_err:e}"))?;
    check(tdcf_err <= 1e-12, format!("min-tDCF deviates by {tdcf_err:e}"))?;
    let perfect = ScoreSet::from_labeled(&[0.9, 0.7, 0.8], &[0.1, -0.3]).unwrap();
    check(compute_eer(&perfect).unwrap().eer == 0.0, "perfect separation EER != 0")?;
    for p in &params {
        let m = compute_min_tdcf(&perfect, p).unwrap().min_tdcf;
        // The revised cost keeps the ASV-only term, so a perfect CM bottoms
        // out at C0 / (C0 + min(C1, C2)) rather than 0.
        let floor = brute_tdcf(&[1.0], &[0.0], p);
        match p.version {
            TdcfVersion::Asvspoof2019 => check(m == 0.0, format!("perfect separation min-tDCF {m}"))?,
            TdcfVersion::Revised => check(
                m > 0.0 && (m - floor).abs() <= 1e-12,
                format!("perfect separation revised min-tDCF {m}, expected {floor}"),
            )?,
        }
    }
    Ok(format!(
        "1000 random sets: max EER error {eer_err:e}, max min-tDCF error {tdcf_err:e} (3 parameter sets); perfect separation gives EER 0 and min-tDCF 0 (ASVspoof2019 cost)"
    ))
}

// ------------------------------------------------------------------ 7

fn ocs_loss_of(emb: &[f64], d: usize, labels: &[usize], w0: &[f64], p: &OcsParams) -> f64 {
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::from_f64([labels.len(), d], emb).unwrap());
    let w = g.constant(Tensor::from_f64([d], w0).unwrap());
    let l = ocs_loss(&mut g, e, labels, w, p).unwrap();
    g.value(l).item().unwrap()
}

fn ocs_boundaries() -> Outcome {
    let ln2 = 2f64.ln();
    let mut worst_boundary = 0.0f64;
    for k in [0.1, 1.0, 5.0, 20.0, 100.0] {
        for (m0, m1) in [(0.9, 0.2), (0.5, -0.3), (0.99, 0.0)] {
            let p = OcsParams { k, m0, m1 };
            // Embeddings in the (e1, e2) plane at cosine m_y from w0 = e1.
            for (label, c) in [(0usize, m0), (1, m1)] {
                let emb = [c * 3.0, (1.0 - c * c).sqrt() * 3.0, 0.0];
                let l = ocs_loss_of(&emb, 3, &[label], &[0.5, 0.0, 0.0], &p);
                worst_boundary = worst_boundary.max((l - ln2).abs());
                worst_boundary = worst_boundary.max((p.sample_loss(c, label) - ln2).abs());
            }
        }
    }
    check(worst_boundary <= 1e-12, format!("boundary loss off by {worst_boundary:e}"))?;

    let mut rng = seed_rng(7);
    let mut worst_scale = 0.0f64;
    let p = OcsParams::default();
    for _ in 0..200 {
        let (n, d) = (8, 16);
        let emb = uniform(&mut rng, n * d, -1.0, 1.0);
        let w0 = uniform(&mut rng, d, -1.0, 1.0);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let scales = uniform(&mut rng, n, 1e-3, 1e3);
        let scaled: Vec<f64> = emb.iter().enumerate().map(|(i, v)| v * scales[i / d]).collect();
        let diff = (ocs_loss_of(&emb, d, &labels, &w0, &p) - ocs_loss_of(&scaled, d, &labels, &w0, &p)).abs();
        worst_scale = worst_scale.max(diff);
    }
    check(worst_scale <= 1e-9, format!("rescaling changed the loss by {worst_scale:e}"))?;
    Ok(format!(
        "loss at margin = log 2 within {worst_boundary:e}; rescaling invariance within {worst_scale:e}"
    ))
}

// ------------------------------------------------------------------ 8, 9

struct Trained {
    label: String,
    summary: TrainSummary,
    scores: ScoreSet,
    report: MetricReport,
    elapsed: Duration,
}

fn train_and_score(
    cfg: &RunConfig,
    activation: ActivationSpec,
    data: &Path,
    out: &Path,
) -> Result<Trained, String> {
    let protocol = parse_protocol(&data.join("protocol.txt")).map_err(|e| e.to_string())?;
    let features = data.join("features");
    let mut model_cfg = cfg.model.clone();
    model_cfg.activation = activation.clone();
    let start = Instant::now();
    let mut model = Model::<f32>::build(&model_cfg, cfg.seed).map_err(|e| e.to_string())?;
    let summary = train(&mut model, &features, &protocol, &cfg.train, out).map_err(|e| e.to_string())?;
    let (best, _) = load_checkpoint(&TrainLayout::new(out).best_checkpoint()).map_err(|e| e.to_string())?;
    let eval: Vec<&str> = protocol
        .partition(Partition::Eval)
        .map(|r| r.utt_id.as_str())
        .collect();
    let scores = score_utterances(&best, &features, eval)
        .and_then(|s| s.with_keys(&protocol))
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let report = evaluate(&scores, &cfg.tdcf).map_err(|e| e.to_string())?;
    Ok(Trained {
        label: activation.label(),
        summary,
        scores,
        report,
        elapsed,
    })
}

fn loss_trend(t: &Trained) -> (f64, f64) {
    let first = t.summary.epochs.first().map_or(f64::NAN, |e| e.mean_loss);
    let last = t.summary.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
    (first, last)
}

fn synthetic_end_to_end(work: &Path, trained: &mut Vec<Trained>) -> Outcome {
    let cfg = RunConfig::load(&workspace_file("configs/synth_small.json")).map_err(|e| e.to_string())?;
    let cfg = cfg.with_seed(Some(2024));
    check(cfg.synth.n_per_class == 256, "config must ask for 256 samples per class")?;
    let data = work.join("synth");
    synth_dataset(&cfg.synth, cfg.seed, &data).map_err(|e| e.to_string())?;

    let arelu = cfg.model.activation.clone();
    check(arelu.kind() == ActivationKind::Arelu, "config must select AReLU")?;
    let a = train_and_score(&cfg, arelu, &data, &work.join("arelu"))?;
    let b = train_and_score(&cfg, ActivationSpec::Relu, &data, &work.join("relu"))?;
    let mut lines = Vec::new();
    for t in [&a, &b] {
        let (first, last) = loss_trend(t);
        lines.push(format!(
            "{}: eval EER {:.4}, min-tDCF {:.4}, epoch loss {first:.4} -> {last:.4}, {:.0}s",
            t.label,
            t.report.eer,
            t.report.min_tdcf,
            t.elapsed.as_secs_f64()
        ));
    }
    let (first, last) = loss_trend(&a);
    let (rfirst, rlast) = loss_trend(&b);
    trained.push(a);
    trained.push(b);
    let a = &trained[0];
    check(a.elapsed < Duration::from_secs(300), format!("AReLU run took {:?}", a.elapsed))?;
    check(a.report.eer < 0.05, format!("AReLU held-out EER {}", a.report.eer))?;
    check(last < first, format!("AReLU epoch loss {first} -> {last}"))?;
    check(rlast < rfirst, format!("ReLU epoch loss {rfirst} -> {rlast}"))?;
    Ok(lines.join("; "))
}

fn fusion(trained: &[Trained]) -> Outcome {
    check(trained.len() == 2, "needs the two models from criterion 8")?;
    let p = TdcfParams::default();
    for t in trained {
        let fused = fuse_scores(&[t.scores.clone(), t.scores.clone()]).map_err(|e| e.to_string())?;
        let r = evaluate(&fused, &p).map_err(|e| e.to_string())?;
        check(r == t.report, format!("fuse(S, S) changed the {} metrics", t.label))?;
    }
    let fused = fuse_scores(&[trained[0].scores.clone(), trained[1].scores.clone()]).map_err(|e| e.to_string())?;
    let r = evaluate(&fused, &p).map_err(|e| e.to_string())?;
    let worse = trained[0].report.eer.max(trained[1].report.eer);
    let n = (r.n_bonafide.min(r.n_spoof)) as f64;
    let noise = (worse.max(1.0 / n) * (1.0 - worse) / n).sqrt();
    Ok(format!(
        "fuse(S, S) exact for both; fused AReLU+ReLU EER {:.4} (worse single {:.4}, ~1 s.e. {:.4}), min-tDCF {:.4}",
        r.eer, worse, noise, r.min_tdcf
    ))
}

// ------------------------------------------------------------------ 10

fn pipeline(root: &Path) -> Result<(), String> {
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let config = s(workspace_file("configs/synth_small.json"));
    let data = root.join("data");
    let steps: Vec<Vec<String>> = vec![
        vec!["synth-data".into(), "--out".into(), s(data.clone()), "--n-per-class".into(), "16".into()],
        vec![
            "train".into(),
            "--protocol".into(),
            s(data.join("protocol.txt")),
            "--features".into(),
            s(data.join("features")),
            "--out".into(),
            s(root.join("run")),
            "--epochs".into(),
            "2".into(),
        ],
        vec![
            "score".into(),
            "--checkpoint".into(),
            s(root.join("run/best")),
            "--features".into(),
            s(data.join("features")),
            "--protocol".into(),
            s(data.join("protocol.txt")),
            "--partition".into(),
            "all".into(),
            "--out".into(),
            s(root.join("scores.txt")),
        ],
        vec![
            "evaluate".into(),
            "--scores".into(),
            s(root.join("scores.txt")),
            "--protocol".into(),
            s(data.join("protocol.txt")),
            "--out".into(),
            s(root.join("report.json")),
        ],
    ];
    for mut argv in steps {
        argv.extend(["--config".into(), config.clone(), "--seed".into(), "77".into()]);
        let code = run(argv.clone());
        check(code == 0, format!("{} exited {code}", argv[0]))?;
    }
    Ok(())
}

/// Relative paths of every file under `root`, except run manifests (they
/// carry a timestamp and the invoking paths).
fn artifacts(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
                continue;
            }
            let rel = p.strip_prefix(root).unwrap().to_path_buf();
            let name = rel.file_name().unwrap().to_string_lossy();
            let run_manifest = name.ends_with(".manifest.json") || (name == "manifest.json" && rel.components().count() == 2);
            if !run_manifest {
                out.push(rel);
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn determinism(work: &Path) -> Outcome {
    let (a, b) = (work.join("det_a"), work.join("det_b"));
    pipeline(&a)?;
    pipeline(&b)?;
    let files = artifacts(&a);
    check(files == artifacts(&b), "the two runs wrote different file sets")?;
    for must in ["run/loss.csv", "scores.txt", "run/best/manifest.json"] {
        check(files.contains(&PathBuf::from(must)), format!("{must} missing"))?;
    }
    for rel in &files {
        let same = fs::read(a.join(rel)).unwrap() == fs::read(b.join(rel)).unwrap();
        check(same, format!("{} differs", rel.display()))?;
    }
    Ok(format!(
        "{} files (loss log, checkpoints, scores, report, data) byte-identical",
        files.len()
    ))
}

// ------------------------------------------------------------------ driver

fn report(n: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let (status, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // Written straight to the process stderr so the lines survive output
    // capture.
    let _ = writeln!(std::io::stderr().lock(), "criterion {n:>2} {status}  {title}: {detail}");
    result.is_ok()
}

#[test]
fn acceptance_criteria() {
    let work = tempfile::tempdir().unwrap();
    let mut trained = Vec::new();
    let results = [
        report(1, "gradient suite", gradient_suite_passes),
        report(2, "AReLU = ReLU + ELSA", arelu_decomposes),
        report(3, "RReLU modes", rrelu_modes),
        report(4, "ensemble identity", ensemble_identity),
        report(5, "layer shapes", shapes_conform),
        report(6, "metric oracles", metric_oracles),
        report(7, "OC-softmax boundary values", ocs_boundaries),
        report(8, "synthetic end-to-end", || synthetic_end_to_end(work.path(), &mut trained)),
        report(9, "score fusion", || fusion(&trained)),
        report(10, "determinism", || determinism(work.path())),
    ];
    let failed: Vec<usize> = (1..=10).filter(|i| !results[i - 1]).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
