use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use mepoi_core::geodata::{generate_world, read_traces, read_world, simulate_traces, write_labels, write_traces, write_world, World};
use mepoi_core::pipeline::{preprocess, read_preprocessed, write_preprocessed};
use mepoi_core::probes::{markdown_summary, read_report, run_suite, write_report, ProbeInputs, ProbeMode, Task};
use mepoi_core::prototypes::read_embeddings;
use mepoi_core::textalign::{embed_world, export_prompts};
use mepoi_core::train::{export_embeddings, TrainData, Trainer};
use mepoi_core::transfer::{precompute_transfer, read_priors, write_priors};
use mepoi_core::Real;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::Command;

/// Subdirectory of the reports dir holding the random-embedding control.
pub const CONTROL_DIR: &str = "control";

pub fn run(cmd: Command, cfg: &RunConfig, force: bool) -> Result<()> {
    let p = &cfg.paths;
    match cmd {
        Command::Generate => generate(cfg, force),
        Command::Preprocess => {
            let world = load_world(cfg)?;
            require(&p.traces, "GPS traces", "generate")?;
            fresh(&[&p.visits], force)?;
            let points = read_traces(&p.traces)?;
            let pre = preprocess(&points, &world, &cfg.preprocess)?;
            write_preprocessed(&p.visits, &pre)?;
            let (a, s) = (pre.partition.anchors.len(), pre.partition.sparse.len());
            journal(cfg, "preprocess", json!({"points": points.len(), "visits": pre.visit_count(), "sequences": pre.sequences.len(), "anchors": a, "sparse": s}))?;
            println!("preprocess: {} points -> {} visits in {} sequences; {a} anchors, {s} sparse POIs", points.len(), pre.visit_count(), pre.sequences.len());
            Ok(())
        }
        Command::Precompute => {
            let world = load_world(cfg)?;
            require(&p.visits, "preprocessed visits", "preprocess")?;
            fresh(&[&p.priors], force)?;
            let pre = read_preprocessed(&p.visits, &world)?;
            let out = precompute_transfer(&world, &pre.partition, &pre.distributions, &cfg.kernel)?;
            write_priors(&p.priors, &out.priors)?;
            journal(cfg, "precompute", json!({"sparse": out.priors.len(), "kernel_evaluations": out.kernel_evaluations, "seconds": out.seconds}))?;
            println!("precompute: {} priors, {} kernel evaluations in {:.2}s", out.priors.len(), out.kernel_evaluations, out.seconds);
            Ok(())
        }
        Command::Pretrain => pretrain(cfg, force),
        Command::ExportPrompts => {
            let world = load_world(cfg)?;
            fresh(&[&p.prompts], force)?;
            let n = export_prompts(&p.prompts, &world)?;
            println!("export-prompts: {n} prompts in {}", p.prompts.display());
            Ok(())
        }
        Command::ExportEmbeddings => {
            let world = load_world(cfg)?;
            require(&p.checkpoint, "checkpoint", "pretrain")?;
            fresh(&[&p.embeddings], force)?;
            let emb = export_embeddings::<Real>(&p.checkpoint, &world, &p.embeddings, true)?;
            journal(cfg, "export-embeddings", json!({"pois": emb.poi_ids.len(), "dim": emb.dim}))?;
            println!("export-embeddings: {} x {} written to {}", emb.poi_ids.len(), emb.dim, p.embeddings.display());
            Ok(())
        }
        Command::Finetune => finetune(cfg, force),
        Command::Report => {
            require(&p.reports, "probe reports", "finetune")?;
            println!("{}", markdown_summary(&read_report(&p.reports)?));
            let control = p.reports.join(CONTROL_DIR);
            if control.exists() {
                println!("Random-embedding control:\n\n{}", markdown_summary(&read_report(&control)?));
            }
            Ok(())
        }
        Command::DefaultConfig => unreachable!("handled before config loading"),
    }
}

fn generate(cfg: &RunConfig, force: bool) -> Result<()> {
    let p = &cfg.paths;
    fresh(&[&p.world, &p.labels, &p.traces], force)?;
    let world = generate_world(&cfg.world)?;
    let sim = simulate_traces(&world, &cfg.world)?;
    for path in [&p.world, &p.labels, &p.traces] {
        ensure_parent(path)?;
    }
    write_world(&p.world, &world)?;
    write_labels(&p.labels, &world)?;
    write_traces(&p.traces, &sim.points)?;
    journal(cfg, "generate", json!({"pois": world.len(), "points": sim.points.len(), "stays": sim.stays.len()}))?;
    println!("generate: {} POIs, {} GPS points, {} planted stays", world.len(), sim.points.len(), sim.stays.len());
    Ok(())
}

fn pretrain(cfg: &RunConfig, force: bool) -> Result<()> {
    let p = &cfg.paths;
    let world = load_world(cfg)?;
    require(&p.visits, "preprocessed visits", "preprocess")?;
    let priors = if cfg.pretrain.lambda_sparse > 0.0 {
        require(&p.priors, "transferred priors", "precompute")?;
        Some(read_priors(&p.priors)?)
    } else {
        None
    };
    let pre = read_preprocessed(&p.visits, &world)?;
    let text = if cfg.pretrain.lambda_text > 0.0 { Some(embed_world(&world, &cfg.text)?) } else { None };
    let m = &cfg.model;
    let data = TrainData::build(&world, cfg.world.bbox, &pre, priors.as_ref(), text, &m.encoder, m.transformer.window)?;

    let mut trainer = if p.checkpoint.exists() && !force {
        let mut t = Trainer::<Real>::load(&p.checkpoint).context("cannot resume checkpoint; use --force to start over")?;
        if t.epochs_done >= cfg.pretrain.epochs {
            bail!(
                "checkpoint {} already holds {} epochs; use --force to retrain",
                p.checkpoint.display(),
                t.epochs_done
            );
        }
        let mut saved = t.config.clone();
        saved.epochs = cfg.pretrain.epochs;
        if saved != cfg.pretrain {
            bail!("checkpoint {} was written with a different [pretrain] section; use --force to retrain", p.checkpoint.display());
        }
        t.config.epochs = cfg.pretrain.epochs;
        println!("pretrain: resuming after epoch {}", t.epochs_done);
        t
    } else {
        if p.checkpoint.exists() {
            std::fs::remove_dir_all(&p.checkpoint)?;
        }
        Trainer::<Real>::for_data(m, &world.ids(), &data, cfg.pretrain.clone())?
    };

    ensure_parent(&p.checkpoint)?;
    let mut log = open_log(cfg)?;
    let mut write_err = None;
    let report = trainer.fit(&data, Some(&p.checkpoint), &mut |s| {
        let line = json!({"ts": now(), "stage": "pretrain", "step": s});
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("cannot write the log file");
    }
    for e in &report.epochs {
        writeln!(log, "{}", json!({"ts": now(), "stage": "pretrain", "epoch": e}))?;
    }
    match report.epochs.last() {
        Some(last) => println!(
            "pretrain: {} epochs in {:.1}s, final loss {:.4} (contrastive {:.4}, anchor {:.4}, sparse {:.4}, text {:.4})",
            trainer.epochs_done, report.seconds, last.total, last.contrastive, last.kl_anchor, last.kl_sparse, last.text_align
        ),
        None => println!("pretrain: nothing to do"),
    }
    Ok(())
}

fn finetune(cfg: &RunConfig, force: bool) -> Result<()> {
    let p = &cfg.paths;
    let world = load_world(cfg)?;
    require(&p.embeddings, "embeddings", "export-embeddings")?;
    fresh(&[&p.reports], force)?;
    let tasks = cfg.probe.tasks.iter().map(|t| Task::parse(t)).collect::<Result<Vec<_>, _>>()?;
    let modes = cfg.probe.modes.iter().map(|m| ProbeMode::parse(m)).collect::<Result<Vec<_>, _>>()?;
    if tasks.is_empty() || modes.is_empty() || cfg.probe.seeds == 0 {
        bail!("probe needs at least one task, one mode and one seed");
    }
    let seeds: Vec<u64> = (0..cfg.probe.seeds as u64).map(|i| cfg.seed + i).collect();
    let emb = read_embeddings::<Real>(&p.embeddings)?;
    let text = if modes.iter().any(|&m| m != ProbeMode::MobilityOnly) { Some(embed_world(&world, &cfg.text)?) } else { None };
    let inputs = ProbeInputs::new(&world, &emb, text.as_deref())?;
    let runs = run_suite::<Real>(&world, &inputs, &tasks, &modes, &seeds, &cfg.probe.head)?;
    if p.reports.exists() {
        std::fs::remove_dir_all(&p.reports)?;
    }
    write_report(&p.reports, &runs)?;
    println!("{}", markdown_summary(&runs));
    if cfg.probe.random_control {
        let control = inputs.random_control(cfg.seed);
        let runs = run_suite::<Real>(&world, &control, &tasks, &[ProbeMode::MobilityOnly], &seeds, &cfg.probe.head)?;
        write_report(&p.reports.join(CONTROL_DIR), &runs)?;
        println!("Random-embedding control:\n\n{}", markdown_summary(&runs));
    }
    journal(cfg, "finetune", json!({"tasks": cfg.probe.tasks, "modes": cfg.probe.modes, "seeds": seeds}))?;
    Ok(())
}

fn load_world(cfg: &RunConfig) -> Result<World> {
    require(&cfg.paths.world, "world file", "generate")?;
    Ok(read_world(&cfg.paths.world)?)
}

fn require(path: &Path, what: &str, command: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {what} at {}; run `mepoi {command}` first", path.display());
    }
    Ok(())
}

fn fresh(outputs: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = outputs.iter().find(|p| p.exists()) {
        bail!("{} already exists; use --force to overwrite", p.display());
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn open_log(cfg: &RunConfig) -> Result<std::fs::File> {
    let path = &cfg.paths.log;
    ensure_parent(path)?;
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("cannot open log file {}", path.display()))
}

fn journal(cfg: &RunConfig, stage: &str, fields: Value) -> Result<()> {
    let mut line = json!({"ts": now(), "stage": stage, "seed": cfg.seed});
    if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    writeln!(open_log(cfg)?, "{line}")?;
    Ok(())
}
