use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use posealign_core::data::{
    load_dataset, pairing_plan, save_dataset, synth_generate, truth_sidecar_path, DataError, Dataset, Domain,
    SynthConfig,
};
use posealign_core::geometry::{
    box_deviation_bound_off_axis, box_extent, depth_ratio, gpa_solve, project_pose, project_pose_approx, RootPosition,
};
use posealign_core::metrics::evaluate;
use posealign_core::par::Exec;
use posealign_core::pipeline::{
    adapt as run_adapt, alignment_study, evaluate_lifter, pretrain as run_pretrain, AdaptEvent, GanState,
    LifterMeta, LifterState, PipelineError, PretrainConfig, TrainConfig,
};
use posealign_core::skeleton::{Pose3D, SkeletonDef};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{create_out_dir, overrides, read_json, resolve, write_json, write_manifest, write_text};
use crate::error::{io, CliError, Result};
use crate::{AdaptArgs, EvalArgs, GpaArgs, PretrainArgs, ProjectArgs, SynthArgs};

pub struct Context {
    pub skel: SkeletonDef,
    pub exec: Exec,
}

impl Context {
    pub fn new(skeleton: Option<&Path>, sequential: bool) -> Result<Self> {
        let skel = match skeleton {
            Some(p) => SkeletonDef::load(p)?,
            None => SkeletonDef::h36m16(),
        };
        Ok(Self { skel, exec: if sequential { Exec::Sequential } else { Exec::Parallel } })
    }

    fn load(&self, path: &Path, domain: Domain) -> Result<Dataset> {
        Ok(load_dataset(path, &self.skel, domain)?)
    }
}

fn csv_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| io(path.display(), e))?))
}

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<()> {
    if ctx.skel != SkeletonDef::h36m16() {
        return Err(CliError::Usage("the synthetic pose family is defined for the built-in skeleton only".into()));
    }
    let file = match &a.config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    let section = |name: &str, count: Option<usize>, seed: u64| -> Value {
        let mut v = file.get(name).cloned().unwrap_or_else(|| json!({}));
        crate::config::merge(&mut v, overrides([("count", count.map(Value::from)), ("seed", Some(seed.into()))]));
        v
    };
    let resolve_section = |defaults: SynthConfig, patch: Value| -> Result<SynthConfig> {
        let mut base = serde_json::to_value(&defaults).expect("config serializes");
        crate::config::merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| CliError::Usage(format!("config: {e}")))
    };
    // the target stream gets its own seed so the two sets are independent
    let target_seed = a.seed.wrapping_add(1);
    let src_cfg = resolve_section(SynthConfig::source_default(2000, a.seed), section("source", a.n_source, a.seed))?;
    let tar_cfg =
        resolve_section(SynthConfig::target_default(1000, target_seed), section("target", a.n_target, target_seed))?;
    if src_cfg.domain != Domain::Source || tar_cfg.domain != Domain::Target {
        return Err(CliError::Usage("synth configs must keep domains source/target".into()));
    }

    create_out_dir(&a.out)?;
    let cfg = json!({"source": src_cfg, "target": tar_cfg});
    let inputs: Vec<(&str, &PathBuf)> = a.config.iter().map(|p| ("config", p)).collect();
    write_manifest(&a.out, "synth", Some(a.seed), &cfg, &inputs)?;

    let src = synth_generate(&src_cfg)?;
    let tar = synth_generate(&tar_cfg)?;
    let target_path = a.out.join("target.jsonl");
    save_dataset(&src.dataset, a.out.join("source.jsonl"))?;
    save_dataset(&tar.dataset, &target_path)?;
    let truth = tar.truth.expect("target synthesis produces ground truth");
    save_dataset(&truth, truth_sidecar_path(&target_path))?;
    println!("wrote {} source and {} target records to {}", src.dataset.len(), tar.dataset.len(), a.out.display());
    Ok(())
}

pub fn pretrain(ctx: &Context, a: PretrainArgs) -> Result<()> {
    let source = ctx.load(&a.source, Domain::Source)?;
    let patch = overrides([
        ("epochs", a.epochs.map(Value::from)),
        ("iters_per_epoch", a.iters_per_epoch.map(Value::from)),
        ("batch_size", a.batch_size.map(Value::from)),
        ("lr", a.lr.map(Value::from)),
        ("seed", Some(a.seed.into())),
    ]);
    let mut cfg: PretrainConfig = resolve(&PretrainConfig::default(), a.config.as_deref(), patch)?;
    let joints = ctx.skel.joint_count();
    let (mut state, prior_steps) = match &a.resume {
        Some(path) => {
            let (state, meta) = LifterState::load(path, cfg.lr)?;
            if meta.joints != joints {
                return Err(CliError::Usage(format!("checkpoint has {} joints, skeleton has {joints}", meta.joints)));
            }
            cfg.lifter = meta.config;
            cfg.start_epoch = meta.next_epoch;
            (state, meta.steps)
        }
        None => (cfg.init_state(joints)?, 0),
    };

    create_out_dir(&a.out)?;
    let mut inputs = vec![("source", &a.source)];
    inputs.extend(a.config.iter().map(|p| ("config", p)));
    inputs.extend(a.resume.iter().map(|p| ("resume", p)));
    write_manifest(&a.out, "pretrain", Some(a.seed), &cfg, &inputs)?;

    let mut csv = String::from("epoch,iteration,loss\n");
    let report = run_pretrain(&mut state, &source, &cfg, ctx.exec, &mut |s| {
        let _ = writeln!(csv, "{},{},{}", s.epoch, s.iteration, s.loss);
    });
    write_text(&a.out.join("loss.csv"), &csv)?;
    let report = match report {
        Ok(r) => r,
        Err(PipelineError::NanDetected(dump)) => {
            write_json(&a.out.join("nan_dump.json"), &dump)?;
            return Err(PipelineError::NanDetected(dump).into());
        }
        Err(e) => return Err(e.into()),
    };
    let meta = LifterMeta {
        config: cfg.lifter,
        joints,
        seed: cfg.seed,
        steps: prior_steps + report.steps.len() as u64,
        next_epoch: cfg.epochs.max(cfg.start_epoch),
    };
    state.save(a.out.join("lifter.ckpt"), &meta)?;
    match report.steps.last() {
        Some(s) => println!("pretrained {} steps, last loss {:.1} mm^2", report.steps.len(), s.loss),
        None => println!("no training steps (start epoch {} >= epochs {})", cfg.start_epoch, cfg.epochs),
    }
    Ok(())
}

fn default_truth(target: &Path, explicit: Option<&PathBuf>) -> Option<PathBuf> {
    match explicit {
        Some(p) => Some(p.clone()),
        None => Some(truth_sidecar_path(target)).filter(|p| p.exists()),
    }
}

pub fn adapt(ctx: &Context, a: AdaptArgs) -> Result<()> {
    let patch = overrides([
        ("epochs", a.epochs.map(Value::from)),
        ("iters_per_epoch", a.iters_per_epoch.map(Value::from)),
        ("warmup_epochs", a.warmup_epochs.map(Value::from)),
        ("generator_interval", a.generator_interval.map(Value::from)),
        ("batch_size", a.batch_size.map(Value::from)),
        ("lr_lifter", a.lr_lifter.map(Value::from)),
        ("lr_generator", a.lr_generator.map(Value::from)),
        ("lr_discriminator", a.lr_discriminator.map(Value::from)),
        ("clip", a.clip.map(Value::from)),
        ("mode", a.mode.map(|m| serde_json::to_value(posealign_core::pipeline::AdaptMode::from(m)).unwrap())),
        ("canonical_depth", a.canonical_depth.map(Value::from)),
        (
            "lifter_update",
            a.lifter_update.map(|m| serde_json::to_value(posealign_core::pipeline::LifterUpdate::from(m)).unwrap()),
        ),
        ("pairing", a.pairing.map(|m| serde_json::to_value(posealign_core::data::Pairing::from(m)).unwrap())),
        ("pck_threshold", a.pck_threshold.map(Value::from)),
        ("seed", Some(a.seed.into())),
    ]);
    let cfg: TrainConfig = resolve(&TrainConfig::default(), a.config.as_deref(), patch)?;
    cfg.validate()?;
    let source = ctx.load(&a.source, Domain::Source)?;
    let target = ctx.load(&a.target, Domain::Target)?;
    let truth_path = default_truth(&a.target, a.truth.as_ref());
    let truth = truth_path.as_ref().map(|p| ctx.load(p, Domain::Truth)).transpose()?;
    let (mut lifter, meta) = LifterState::load(&a.lifter, cfg.lr_lifter)?;
    let mut gan = GanState::new(&cfg, &ctx.skel)?;

    create_out_dir(&a.out)?;
    let mut inputs = vec![("source", &a.source), ("target", &a.target), ("lifter", &a.lifter)];
    inputs.extend(truth_path.iter().map(|p| ("truth", p)));
    inputs.extend(a.config.iter().map(|p| ("config", p)));
    write_manifest(&a.out, "adapt", Some(a.seed), &cfg, &inputs)?;

    let study = alignment_study(&source, &target, 0, cfg.seed)?;
    study.write_stats_csv(csv_writer(&a.out.join("alignment_stats.csv"))?).map_err(|e| io("alignment_stats.csv", e))?;
    study
        .write_histogram_csv(csv_writer(&a.out.join("alignment_hist.csv"))?)
        .map_err(|e| io("alignment_hist.csv", e))?;

    let mut steps = String::from("kind,epoch,iteration,loss\n");
    let mut lifter_steps = 0u64;
    let outcome = run_adapt(&mut lifter, &mut gan, &source, &target, truth.as_ref(), &cfg, ctx.exec, &mut |ev| {
        let row = match ev {
            AdaptEvent::DiscriminatorStep { epoch, iteration, loss, .. } => ("discriminator", epoch, iteration, loss),
            AdaptEvent::GeneratorStep { epoch, iteration, loss } => ("generator", epoch, iteration, loss),
            AdaptEvent::LifterStep { epoch, iteration, loss, .. } => {
                lifter_steps += 1;
                ("lifter", epoch, iteration, loss)
            }
            AdaptEvent::EpochEnd(e) => {
                if let Some(m) = e.target_mpjpe {
                    eprintln!("epoch {}: target MPJPE {m:.1} mm", e.epoch);
                }
                return;
            }
        };
        let _ = writeln!(steps, "{},{},{},{}", row.0, row.1, row.2, row.3);
    });
    write_text(&a.out.join("steps.csv"), &steps)?;
    let outcome = match outcome {
        Ok(o) => o,
        Err(PipelineError::NanDetected(dump)) => {
            write_json(&a.out.join("nan_dump.json"), &dump)?;
            return Err(PipelineError::NanDetected(dump).into());
        }
        Err(e) => return Err(e.into()),
    };

    let meta = LifterMeta { steps: meta.steps + lifter_steps, ..meta };
    lifter.save(a.out.join("lifter.ckpt"), &meta)?;
    gan.save(a.out.join("gan.ckpt"))?;
    write_json(&a.out.join("report.json"), &outcome.report)?;
    write_text(&a.out.join("report.jsonl"), &outcome.report.to_jsonl())?;
    write_json(&a.out.join("timing.json"), &json!({"wall_clock_secs": outcome.wall_clock_secs}))?;
    match outcome.report.epochs.last() {
        Some(e) => println!(
            "adapted {} epochs ({:?}); final target MPJPE {}",
            outcome.report.epochs.len(),
            cfg.mode,
            e.target_mpjpe.map_or("n/a".to_string(), |m| format!("{m:.1} mm"))
        ),
        None => println!("no adaptation epochs; lifter unchanged"),
    }
    Ok(())
}

#[derive(Deserialize)]
struct PredictionLine {
    id: String,
    joints_3d: Vec<[f64; 3]>,
}

fn load_predictions(path: &Path, joints: usize) -> Result<HashMap<String, Pose3D>> {
    let text = fs::read_to_string(path).map_err(|e| io(path.display(), e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let p: PredictionLine = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        if p.joints_3d.len() != joints {
            return Err(CliError::Usage(format!(
                "{}: line {}: expected {joints} joints, got {}",
                path.display(),
                i + 1,
                p.joints_3d.len()
            )));
        }
        out.insert(p.id, Pose3D::new(p.joints_3d.iter().map(|j| (*j).into()).collect()));
    }
    Ok(out)
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<()> {
    let target = ctx.load(&a.target, Domain::Target)?;
    let truth_path = default_truth(&a.target, a.truth.as_ref())
        .ok_or_else(|| CliError::Usage(format!("missing ground-truth sidecar for {}", a.target.display())))?;
    if !truth_path.exists() {
        return Err(CliError::Usage(format!("missing ground-truth sidecar {}", truth_path.display())));
    }
    let truth = ctx.load(&truth_path, Domain::Truth)?;

    create_out_dir(&a.out)?;
    let mut inputs = vec![("target", &a.target), ("truth", &truth_path)];
    inputs.extend(a.lifter.iter().map(|p| ("lifter", p)));
    inputs.extend(a.predictions.iter().map(|p| ("predictions", p)));
    write_manifest(&a.out, "eval", None, &json!({"pck_threshold": a.pck_threshold}), &inputs)?;

    let report = if let Some(path) = &a.lifter {
        let (state, _) = LifterState::load(path, 1e-4)?;
        evaluate_lifter(&state.net, &target, &truth, a.pck_threshold, ctx.exec)?
    } else {
        let path = a.predictions.as_ref().expect("clap requires --lifter or --predictions");
        let preds = load_predictions(path, ctx.skel.joint_count())?;
        let gt_by_id: HashMap<&str, &Pose3D> =
            truth.records.iter().filter_map(|r| r.joints_3d.as_ref().map(|p| (r.id.as_str(), p))).collect();
        let mut ids = Vec::new();
        let mut p = Vec::new();
        let mut g = Vec::new();
        for r in &target.records {
            let gt = gt_by_id.get(r.id.as_str()).ok_or_else(|| CliError::Usage(format!("no ground truth for {}", r.id)))?;
            let pred = preds.get(&r.id).ok_or_else(|| CliError::Usage(format!("no prediction for {}", r.id)))?;
            ids.push(r.id.clone());
            p.push(pred.clone());
            g.push((*gt).clone());
        }
        evaluate(&ids, &p, &g, a.pck_threshold, ctx.exec).map_err(|e| CliError::Usage(e.to_string()))?
    };
    write_text(&a.out.join("eval.json"), &(report.to_json() + "\n"))?;
    report.write_csv(csv_writer(&a.out.join("per_record.csv"))?).map_err(|e| io("per_record.csv", e))?;
    println!("{}", report.summary_line());
    Ok(())
}

pub fn gpa(ctx: &Context, a: GpaArgs) -> Result<()> {
    let source = ctx.load(&a.source, Domain::Source)?;
    let target_text = fs::read_to_string(&a.target).map_err(|e| io(a.target.display(), e))?;
    if target_text.trim().is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    let target = ctx.load(&a.target, Domain::Target)?;
    if source.records.iter().any(|r| r.joints_3d.is_none()) {
        return Err(CliError::Usage("gpa needs source records with joints_3d".into()));
    }

    create_out_dir(&a.out)?;
    let cfg = json!({"seed": a.seed, "epoch": a.epoch});
    write_manifest(&a.out, "gpa", Some(a.seed), &cfg, &[("source", &a.source), ("target", &a.target)])?;

    let plan = pairing_plan(source.len(), target.len(), a.epoch, a.seed)?;
    let root = ctx.skel.root_index();
    let mut csv = String::from("source_id,target_id,x,y,z,box_residual,bound,status\n");
    let mut flagged = 0;
    for (s, &t) in source.records.iter().zip(&plan.targets) {
        let tar = &target.records[t];
        let s3 = s.joints_3d.as_ref().expect("checked above");
        let t2 = tar.joints_2d.as_ref().expect("target records carry 2D");
        let row = gpa_solve(t2, root, s3, &tar.camera).and_then(|r| {
            let exact = box_extent(&project_pose(s3, &r, &tar.camera)?).sum();
            let approx = project_pose_approx(s3, &r, &tar.camera)?;
            let want = box_extent(t2).sum();
            let bound = box_deviation_bound_off_axis(&approx, &tar.camera, depth_ratio(s3, &r));
            Ok((r, (exact - want).abs() / want, bound))
        });
        match row {
            Ok((r, residual, bound)) => {
                let _ = writeln!(csv, "{},{},{},{},{},{},{},ok", s.id, tar.id, r.x, r.y, r.z, residual, bound);
            }
            Err(e) => {
                flagged += 1;
                let _ = writeln!(csv, "{},{},,,,,,{}", s.id, tar.id, e.to_string().replace(',', ";"));
            }
        }
    }
    write_text(&a.out.join("gpa.csv"), &csv)?;
    println!("{} pairs, {flagged} flagged", source.len());
    Ok(())
}

pub fn project(ctx: &Context, a: ProjectArgs) -> Result<()> {
    if a.root.len() != 3 {
        return Err(CliError::Usage(format!("--root needs X,Y,Z, got {} values", a.root.len())));
    }
    let mut ds = ctx.load(&a.input, Domain::Truth)?;
    let root = RootPosition::new(a.root[0], a.root[1], a.root[2]);

    create_out_dir(&a.out)?;
    let cfg = json!({"root": [root.x, root.y, root.z], "approx": a.approx});
    write_manifest(&a.out, "project", None, &cfg, &[("input", &a.input)])?;

    for rec in &mut ds.records {
        let p3 = rec.joints_3d.as_ref().expect("truth records carry 3D");
        let p2 = if a.approx {
            project_pose_approx(p3, &root, &rec.camera)
        } else {
            project_pose(p3, &root, &rec.camera)
        }
        .map_err(|e| CliError::Usage(format!("{}: {e}", rec.id)))?;
        rec.joints_2d = Some(p2);
    }
    ds.domain = Domain::Source;
    save_dataset(&ds, a.out.join("projected.jsonl"))?;
    println!("projected {} records", ds.len());
    Ok(())
}
