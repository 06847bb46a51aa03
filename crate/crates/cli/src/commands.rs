use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use modvlad::config::{render_kv, KvConfig};
use modvlad::dataset::{
    generate_corpus, read_corpus, read_segment_labels, write_corpus, write_segment_labels, CorpusSpec,
};
use modvlad::evaluation::{map_at_k, rank_against_labels};
use modvlad::gradcheck::run_gradcheck;
use modvlad::localization::{candidate_recall, read_predictions, run_pipeline, LocalizeConfig, SegmentScorer};
use modvlad::model::{model_preset, Topology};
use modvlad::params::Parameters;
use modvlad::trainer::{self, write_diagnostics, Checkpoint, Stage, TrainConfig, TrainOutcome};
use serde_json::json;

use crate::manifest::RunManifest;
use crate::plot::line_chart_svg;
use crate::ConfigArgs;

const DEFAULT_PRESET: &str = "desk";

fn read_kv_file(path: &Path) -> Result<KvConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(KvConfig::parse(&text)?)
}

fn apply_overrides(kv: &mut KvConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = KvConfig::parse_override(o)?;
        kv.set(k, v);
    }
    Ok(())
}

/// Config file, then `--set`, then dedicated flags.
fn layered_config(args: &ConfigArgs) -> Result<KvConfig> {
    let mut kv = match &args.config {
        Some(p) => read_kv_file(p)?,
        None => KvConfig::default(),
    };
    apply_overrides(&mut kv, &args.overrides)?;
    if let Some(p) = &args.preset {
        kv.set("preset", p.clone());
    }
    if let Some(s) = args.seed {
        kv.set("seed", s.to_string());
    }
    if let Some(w) = args.workers {
        kv.set("workers", w.to_string());
    }
    Ok(kv)
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

pub fn gen_data(
    spec: Option<PathBuf>,
    preset: Option<String>,
    overrides: &[String],
    seed: Option<u64>,
    out: &Path,
) -> Result<ExitCode> {
    let mut manifest = RunManifest::start("gen-data");
    let mut kv = match &spec {
        Some(p) => {
            manifest.input(p)?;
            read_kv_file(p)?
        }
        None => KvConfig::default(),
    };
    apply_overrides(&mut kv, overrides)?;
    if let Some(p) = preset {
        kv.set("preset", p);
    }
    if let Some(s) = seed {
        kv.set("seed", s.to_string());
    }
    let spec_values = CorpusSpec::from_kv(&mut kv)?;
    kv.finish()?;
    let data = generate_corpus(&spec_values)?;
    create_out(out)?;

    let cfg_text = spec_values.to_kv();
    let files: [(&str, Box<dyn Fn(&Path) -> modvlad::Result<()>>); 6] = [
        ("train.modc", Box::new(|p| write_corpus(p, &data.train))),
        ("finetune.modc", Box::new(|p| write_corpus(p, &data.finetune))),
        ("eval.modc", Box::new(|p| write_corpus(p, &data.eval))),
        ("finetune_segments.csv", Box::new(|p| write_segment_labels(p, &data.finetune_labels))),
        ("eval_segments.csv", Box::new(|p| write_segment_labels(p, &data.eval_labels))),
        ("corpus.cfg", Box::new(|p| modvlad::write_atomic(p, cfg_text.as_bytes()))),
    ];
    for (name, write) in &files {
        let path = out.join(name);
        write(&path)?;
        manifest.output(&path)?;
    }
    manifest.config(spec.as_deref(), &[("spec", cfg_text.replace('\n', "; "))]);
    manifest.seed = Some(spec_values.seed);
    manifest.finish(out)?;
    println!(
        "generated {} train, {} finetune, {} eval videos in {}",
        data.train.records.len(),
        data.finetune.records.len(),
        data.eval.records.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn save_training(
    outcome: &TrainOutcome,
    train: &TrainConfig,
    topology: &Topology,
    preset: &str,
    manifest: &mut RunManifest,
    out: &Path,
) -> Result<()> {
    let ckpt = out.join("checkpoint.modk");
    outcome.checkpoint.save(&ckpt)?;
    manifest.output(&ckpt)?;
    let diag = out.join("diagnostics.csv");
    write_diagnostics(&diag, &outcome.diagnostics)?;
    manifest.output(&diag)?;
    let mut pairs = vec![("preset", preset.to_string())];
    pairs.extend(train.to_kv());
    pairs.extend(topology.to_kv());
    let resolved = out.join("resolved.cfg");
    modvlad::write_atomic(&resolved, render_kv(&pairs).as_bytes())?;
    manifest.output(&resolved)?;
    manifest.config(None, &pairs);
    manifest.seed = Some(train.seed);
    println!(
        "trained {} steps ({} examples); final loss {:.6}; checkpoint {}",
        outcome.checkpoint.step,
        outcome.checkpoint.examples_seen,
        outcome.step_losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

pub fn pretrain(
    corpus_path: &Path,
    args: &ConfigArgs,
    tree: Option<String>,
    temperature: Option<f64>,
    out: &Path,
) -> Result<ExitCode> {
    let mut manifest = RunManifest::start("pretrain");
    let mut kv = layered_config(args)?;
    if let Some(t) = tree {
        kv.set("tree", t);
    }
    if let Some(t) = temperature {
        kv.set("temperature", t.to_string());
    }
    let preset = kv.take_str("preset").unwrap_or_else(|| DEFAULT_PRESET.into());
    let mut train = TrainConfig::preset(&preset, Stage::Pretrain)?;
    train.apply_kv(&mut kv)?;

    let corpus = read_corpus(corpus_path)?;
    manifest.input(corpus_path)?;
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    let h = corpus.header;
    let dims = (h.visual_dim as usize, h.audio_dim as usize, h.class_count as usize);
    let base = Topology::single(model_preset(&preset, dims.0, dims.1, dims.2)?);
    let topology = Topology::from_kv(&mut kv, base)?;
    kv.finish()?;
    let m = &topology.model;
    if (m.visual_dim, m.audio_dim, m.class_count) != dims {
        bail!(modvlad::Error::Config(format!(
            "model expects {}/{}/{} visual/audio/classes, corpus has {}/{}/{}",
            m.visual_dim, m.audio_dim, m.class_count, dims.0, dims.1, dims.2
        )));
    }
    create_out(out)?;
    let examples = trainer::video_examples(&corpus);
    let outcome = trainer::pretrain(&examples, topology.clone(), &train)?;
    save_training(&outcome, &train, &topology, &preset, &mut manifest, out)?;
    manifest.config_path = args.config.as_ref().map(|p| p.display().to_string());
    manifest.finish(out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn finetune(
    checkpoint: &Path,
    corpus_path: &Path,
    labels_path: &Path,
    args: &ConfigArgs,
    temperature: Option<f64>,
    out: &Path,
) -> Result<ExitCode> {
    let mut manifest = RunManifest::start("finetune");
    let mut kv = layered_config(args)?;
    if let Some(t) = temperature {
        kv.set("temperature", t.to_string());
    }
    let preset = kv.take_str("preset").unwrap_or_else(|| DEFAULT_PRESET.into());
    let mut train = TrainConfig::preset(&preset, Stage::Finetune)?;
    train.apply_kv(&mut kv)?;

    let ckpt = Checkpoint::load(checkpoint)?;
    manifest.input(checkpoint)?;
    let mut expected = Topology::from_kv(&mut kv, ckpt.topology().clone())?;
    kv.finish()?;

    let corpus = read_corpus(corpus_path)?;
    let labels = read_segment_labels(labels_path)?;
    manifest.input(corpus_path)?;
    manifest.input(labels_path)?;
    let h = corpus.header;
    expected.model.visual_dim = h.visual_dim as usize;
    expected.model.audio_dim = h.audio_dim as usize;
    expected.model.class_count = h.class_count as usize;
    ckpt.check_topology(&expected)?;
    create_out(out)?;
    let examples = trainer::segment_examples(&corpus, &labels)?;
    log::info!("finetuning on {} labeled segments", examples.len());
    let outcome = trainer::finetune(&ckpt, &examples, &train)?;
    save_training(&outcome, &train, &expected, &preset, &mut manifest, out)?;
    manifest.config_path = args.config.as_ref().map(|p| p.display().to_string());
    manifest.finish(out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn localize(
    video_model: &Path,
    segment_model: Option<&Path>,
    corpus_path: &Path,
    labels: Option<&Path>,
    cfg: LocalizeConfig,
    out: &Path,
) -> Result<ExitCode> {
    let mut manifest = RunManifest::start("localize");
    cfg.validate()?;
    let video = Checkpoint::load(video_model)?;
    manifest.input(video_model)?;
    let segment = match segment_model {
        Some(p) => {
            manifest.input(p)?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let corpus = read_corpus(corpus_path)?;
    manifest.input(corpus_path)?;
    let scorer = match &segment {
        Some(s) => SegmentScorer::Model(&s.model),
        None => SegmentScorer::Dummy,
    };
    let result = run_pipeline(&video.model, scorer, &corpus.records, &cfg)?;
    create_out(out)?;
    let csv = out.join("predictions.csv");
    result.write_csv(&csv)?;
    manifest.output(&csv)?;

    let mut summary = serde_json::to_value(result.summary(&cfg))?;
    let per_class: BTreeMap<String, usize> = result
        .per_class
        .iter()
        .map(|(c, v)| (c.to_string(), v.len()))
        .collect();
    summary["per_class_counts"] = json!(per_class);
    summary["segment_scorer"] = json!(if segment.is_some() { "model" } else { "dummy" });
    if let Some(l) = labels {
        let truth = read_segment_labels(l)?;
        manifest.input(l)?;
        let recall = candidate_recall(&result.candidates, &truth);
        summary["candidate_recall"] = json!(recall);
        println!("candidate recall {recall:.6}");
    }
    let summary_path = out.join("summary.json");
    modvlad::write_atomic(&summary_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    manifest.output(&summary_path)?;
    manifest.config(
        None,
        &[
            ("candidates", cfg.candidates.to_string()),
            ("top_k", cfg.top_k.to_string()),
            ("stride", cfg.stride.to_string()),
            ("alpha", cfg.alpha.to_string()),
            ("beta", cfg.beta.to_string()),
            ("workers", cfg.workers.to_string()),
        ],
    );
    manifest.finish(out)?;
    println!(
        "ranked {} segments over {} classes into {}",
        result.predictions().count(),
        result.per_class.len(),
        csv.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn evaluate(
    predictions: &Path,
    labels: &Path,
    k: usize,
    class_count: Option<u32>,
    plot: Option<&Path>,
    out: &Path,
) -> Result<ExitCode> {
    let mut manifest = RunManifest::start("evaluate");
    let preds = read_predictions(predictions)?;
    let truth = read_segment_labels(labels)?;
    manifest.input(predictions)?;
    manifest.input(labels)?;
    let classes = class_count.unwrap_or_else(|| {
        preds
            .iter()
            .map(|p| p.class_id)
            .chain(truth.iter().map(|t| t.class_id))
            .max()
            .map_or(0, |c| c + 1)
    });
    let lists = rank_against_labels(&preds, &truth, 0..classes);
    let report = map_at_k(&lists, k)?;
    create_out(out)?;
    let metrics = out.join("metrics.json");
    modvlad::write_atomic(&metrics, serde_json::to_string_pretty(&report)?.as_bytes())?;
    manifest.output(&metrics)?;
    if let Some(diag) = plot {
        manifest.input(diag)?;
        let svg_path = out.join("distill_loss.svg");
        let series = distill_series(diag)?;
        let svg = line_chart_svg("distillation loss per step", &series);
        modvlad::write_atomic(&svg_path, svg.as_bytes())?;
        manifest.output(&svg_path)?;
        for (node, pts) in &series {
            if let Some((step, min)) = pts.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)) {
                println!(
                    "{node}: distill loss {:.6} at step 0, minimum {min:.6} at step {step}, {:.6} at the end",
                    pts[0].1,
                    pts[pts.len() - 1].1
                );
            }
        }
    }
    manifest.config(None, &[("k", k.to_string()), ("class_count", classes.to_string())]);
    manifest.finish(out)?;
    println!("MAP@{k} = {:.6} over {classes} classes", report.map);
    Ok(ExitCode::SUCCESS)
}

/// Per-node `(step, distill_loss)` series of mixture nodes.
fn distill_series(path: &Path) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("step,node_path,label_loss,distill_loss,reg_loss") {
        bail!(modvlad::Error::Format {
            offset: 0,
            msg: format!("{} is not a diagnostics log", path.display()),
        });
    }
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let parsed = (f.len() == 5)
            .then(|| Some((f[0].parse::<f64>().ok()?, f[3].parse::<f64>().ok()?)))
            .flatten();
        let Some((step, distill)) = parsed else {
            bail!(modvlad::Error::Format {
                offset: n as u64 + 2,
                msg: format!("bad diagnostics row `{line}` (line {})", n + 2),
            });
        };
        series.entry(f[1].to_string()).or_default().push((step, distill));
    }
    series.retain(|_, pts| pts.iter().any(|p| p.1 != 0.0));
    Ok(series)
}

pub fn gradcheck(preset: &str, seeds: usize, out: Option<&Path>) -> Result<ExitCode> {
    let report = run_gradcheck(preset, seeds)?;
    for e in &report.entries {
        println!("{:<13} {:<28} max rel err {:.3e}", e.suite, e.tensor, e.max_rel_err);
    }
    if let Some(out) = out {
        create_out(out)?;
        let path = out.join("gradcheck.json");
        modvlad::write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    let worst = report.max_rel_err();
    if report.passed() {
        println!("gradcheck passed: max rel err {worst:.3e} < {:.0e}", report.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        bail!(modvlad::Error::Contract(format!(
            "gradcheck failed: max rel err {worst:.3e} >= {:.0e}",
            report.tolerance
        )))
    }
}

pub fn inspect(path: &Path) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(path)?;
    let mut text = format!("checkpoint {}\n", path.display());
    for (k, v) in ckpt.topology().to_kv() {
        text += &format!("  {k:<18} {v}\n");
    }
    text += &format!("  {:<18} {}\n", "step", ckpt.step);
    text += &format!("  {:<18} {}\n", "examples_seen", ckpt.examples_seen);
    text += &format!("  {:<18} {}\n", "optimizer_state", ckpt.optimizer.is_some());
    text += &format!("  {:<18} {}\n", "parameters", ckpt.model.param_count());
    text += "tensors:\n";
    ckpt.model.visit(&mut |name, m| {
        text += &format!(
            "  {name:<32} {:>5} x {:<5} norm {:.6}\n",
            m.rows(),
            m.cols(),
            m.sum_sq().sqrt()
        );
    });
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
    Ok(ExitCode::SUCCESS)
}
