//! Implementation of each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use spoofnet::diagnostics::gradient_suite;
use spoofnet::evaluation::{
    det_csv, det_points, evaluate, fuse_scores, parse_protocol, read_asv_scores, read_scores, write_scores,
    Partition, Protocol,
};
use spoofnet::frontend::{extract_file, feature_path, write_features};
use spoofnet::model::{load_checkpoint, Model};
use spoofnet::training::{score_utterances, train};
use spoofnet::{Error, Result};

use crate::config::{load_tdcf, resolve, RunConfig};
use crate::manifest::{beside, inside, Manifest};
use crate::synth::synth_dataset;
use crate::{Cli, Command, PartitionArg};

fn pick(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, field: &str, flag_name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::config(field, format!("required: pass --{flag_name} or set {field}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn load_protocol(path: &Path, m: &mut Manifest) -> Result<Protocol> {
    m.input(path)?;
    parse_protocol(path)
}

/// Runs the parsed command and returns its exit code.
pub fn execute(cli: &Cli, argv: &[String]) -> Result<i32> {
    let g = &cli.global;
    let mut cfg = resolve(g.config.as_deref(), g.seed)?;
    if let Command::Train { epochs, max_steps, .. } = &cli.command {
        if let Some(e) = epochs {
            cfg.train.epochs = *e;
        }
        if max_steps.is_some() {
            cfg.train.max_steps = *max_steps;
        }
        cfg.train.validate()?;
    }
    if let Command::SynthData {
        n_per_class, amplitude, ..
    } = &cli.command
    {
        if let Some(n) = n_per_class {
            cfg.synth.n_per_class = *n;
        }
        if let Some(a) = amplitude {
            cfg.synth.amplitude = *a;
        }
        cfg.synth.validate()?;
    }
    let mut m = Manifest::new(cli.command.name(), argv, &cfg);
    let mut code = 0;
    let default_manifest = match &cli.command {
        Command::ExtractFeatures {
            audio_dir,
            protocol,
            out,
        } => {
            let out = pick(out, &cfg.paths.feature_dir, "paths.feature_dir", "out")?;
            let audio = pick(audio_dir, &cfg.paths.audio_dir, "paths.audio_dir", "audio-dir")?;
            let protocol = protocol.clone().or_else(|| cfg.paths.protocol.clone());
            extract_features(&cfg, &audio, protocol.as_deref(), &out, g.jobs, &mut m)?;
            inside(&out)
        }
        Command::SynthData { out, .. } => {
            let o = synth_dataset(&cfg.synth, cfg.seed, out)?;
            m.output(&o.protocol);
            m.output(&o.features);
            inside(out)
        }
        Command::Train {
            protocol,
            features,
            out,
            ..
        } => {
            let protocol_path = pick(protocol, &cfg.paths.protocol, "paths.protocol", "protocol")?;
            let features = pick(features, &cfg.paths.feature_dir, "paths.feature_dir", "features")?;
            let out = pick(out, &cfg.paths.output_dir, "paths.output_dir", "out")?;
            let protocol = load_protocol(&protocol_path, &mut m)?;
            m.input(&features)?;
            let mut model = Model::<f32>::build(&cfg.model, cfg.seed)?;
            let summary = train(&mut model, &features, &protocol, &cfg.train, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            m.output(&out);
            inside(&out)
        }
        Command::Score {
            checkpoint,
            features,
            protocol,
            partition,
            out,
        } => {
            let protocol_path = pick(protocol, &cfg.paths.protocol, "paths.protocol", "protocol")?;
            let features = pick(features, &cfg.paths.feature_dir, "paths.feature_dir", "features")?;
            let protocol = load_protocol(&protocol_path, &mut m)?;
            m.input(checkpoint)?;
            m.input(&features)?;
            let (model, _) = load_checkpoint(checkpoint)?;
            let utts: Vec<&str> = protocol
                .records()
                .iter()
                .filter(|r| match partition {
                    PartitionArg::All => true,
                    PartitionArg::Train => r.partition == Partition::Train,
                    PartitionArg::Dev => r.partition == Partition::Dev,
                    PartitionArg::Eval => r.partition == Partition::Eval,
                })
                .map(|r| r.utt_id.as_str())
                .collect();
            if utts.is_empty() {
                return Err(Error::Dataset(format!("protocol has no {partition:?} utterances")));
            }
            let scores = score_utterances(&model, &features, utts)?;
            write_scores(out, &scores)?;
            m.output(out);
            beside(out)
        }
        Command::Evaluate {
            scores,
            protocol,
            tdcf,
            asv_scores,
            out,
        } => {
            let protocol_path = pick(protocol, &cfg.paths.protocol, "paths.protocol", "protocol")?;
            let protocol = load_protocol(&protocol_path, &mut m)?;
            m.input(scores)?;
            let mut params = match tdcf {
                Some(p) => {
                    m.input(p)?;
                    load_tdcf(p)?
                }
                None => cfg.tdcf.clone(),
            };
            if let Some(a) = asv_scores {
                m.input(a)?;
                params = params.with_asv_scores(&read_asv_scores(a)?)?;
            }
            let set = read_scores(scores)?.with_keys(&protocol)?;
            let report = evaluate(&set, &params)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            print!("{text}");
            match out {
                Some(o) => {
                    write_text(o, &text)?;
                    m.output(o);
                    beside(o)
                }
                None => with_suffix(scores, "evaluate"),
            }
        }
        Command::Det { scores, protocol, out } => {
            let protocol_path = pick(protocol, &cfg.paths.protocol, "paths.protocol", "protocol")?;
            let protocol = load_protocol(&protocol_path, &mut m)?;
            m.input(scores)?;
            let set = read_scores(scores)?.with_keys(&protocol)?;
            write_text(out, &det_csv(&det_points(&set)?))?;
            m.output(out);
            beside(out)
        }
        Command::Fuse { inputs, out } => {
            let mut sets = Vec::with_capacity(inputs.len());
            for p in inputs {
                m.input(p)?;
                sets.push(read_scores(p)?);
            }
            let fused = fuse_scores(&sets)?;
            write_scores(out, &fused)?;
            m.output(out);
            beside(out)
        }
        Command::Gradcheck { trials, out } => {
            let results = gradient_suite(*trials, cfg.seed)?;
            for r in &results {
                println!(
                    "{} {:<18} max rel err {:.3e} over {} coordinates ({} ill-conditioned draws replaced)",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.checked,
                    r.redrawn
                );
            }
            if results.iter().any(|r| !r.pass) {
                code = 1;
            }
            match out {
                Some(o) => {
                    write_text(o, &(serde_json::to_string_pretty(&results)? + "\n"))?;
                    m.output(o);
                    beside(o)
                }
                None => PathBuf::from("gradcheck.manifest.json"),
            }
        }
    };
    m.write(g.manifest.as_deref().unwrap_or(&default_manifest))?;
    Ok(code)
}

/// `<file>.<tag>.manifest.json`, for commands whose main output is stdout.
fn with_suffix(file: &Path, tag: &str) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{tag}.manifest.json"));
    file.with_file_name(name)
}

fn extract_features(
    cfg: &RunConfig,
    audio_dir: &Path,
    protocol: Option<&Path>,
    out: &Path,
    jobs: usize,
    m: &mut Manifest,
) -> Result<()> {
    let wavs: Vec<PathBuf> = match protocol {
        Some(p) => {
            let protocol = load_protocol(p, m)?;
            let wavs: Vec<PathBuf> = protocol
                .records()
                .iter()
                .map(|r| audio_dir.join(format!("{}.wav", r.utt_id)))
                .collect();
            let missing: Vec<String> = wavs
                .iter()
                .filter(|w| !w.is_file())
                .map(|w| w.display().to_string())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Dataset(format!("missing audio files: {}", missing.join(", "))));
            }
            wavs
        }
        None => {
            let mut wavs: Vec<PathBuf> = fs::read_dir(audio_dir)
                .map_err(|e| Error::io(format!("listing {}", audio_dir.display()), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            wavs.sort();
            wavs
        }
    };
    m.input(audio_dir)?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let results: Vec<Result<()>> = pool.install(|| {
        wavs.par_iter()
            .map(|w| {
                let feats = extract_file(w, &cfg.lfcc)?;
                write_features(&feature_path(out, feats.utt_id()), &feats)
            })
            .collect()
    });
    let failures: Vec<String> = results
        .into_iter()
        .zip(&wavs)
        .filter_map(|(r, w)| r.err().map(|e| format!("{}: {e}", w.display())))
        .collect();
    if !failures.is_empty() {
        return Err(Error::Dataset(format!(
            "{} of {} files failed:\n  {}",
            failures.len(),
            wavs.len(),
            failures.join("\n  ")
        )));
    }
    log::info!("extracted {} feature files into {}", wavs.len(), out.display());
    m.output(out);
    Ok(())
}
