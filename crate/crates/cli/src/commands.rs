//! Subcommand implementations. Each command reads its inputs from the
//! workspace, writes its artifacts and appends one manifest entry.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lmf_core::config::RunConfig;
use lmf_core::evalkit::{self, EvalReport, MaskPrediction, REPORT_CSV_HEADER};
use lmf_core::fields::{FieldConfig, Layer, LayeredFieldParams};
use lmf_core::io;
use lmf_core::pipeline::{method_label, Benchmark};
use lmf_core::renderer::render_frame;
use lmf_core::trainer::{refine, train, LogRow};
use lmf_core::{Error, GroundTruth};
use serde::{Deserialize, Serialize};

use crate::workspace::{tag, Entry, SceneMeta, Workspace};

/// Effective configuration plus where it came from.
pub struct Resolved {
    pub cfg: RunConfig,
    pub config_file: Option<PathBuf>,
}

/// Metadata stored next to each checkpoint as `<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub label: String,
    pub losses: String,
    pub refined: bool,
    pub seed: u64,
    pub parameters: usize,
    pub checksum: String,
    pub static_checksum: String,
    pub semi_static_checksum: String,
    pub dynamic_checksum: String,
    /// Checksum of the checkpoint this one was refined from.
    pub parent: Option<String>,
    pub refine_frames: Option<Vec<usize>>,
    pub final_loss: Option<f64>,
}

impl CheckpointInfo {
    fn new(params: &LayeredFieldParams, label: &str, cfg: &RunConfig, refined: bool) -> Self {
        CheckpointInfo {
            label: label.to_string(),
            losses: cfg.train.loss.toggles.names(),
            refined,
            seed: cfg.seed,
            parameters: params.len(),
            checksum: params.checksum(),
            static_checksum: params.partition_checksum(Layer::Static),
            semi_static_checksum: params.partition_checksum(Layer::SemiStatic),
            dynamic_checksum: params.partition_checksum(Layer::Dynamic),
            parent: None,
            refine_frames: None,
            final_loss: None,
        }
    }
}

fn sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn save_checkpoint(ws: &Workspace, params: &LayeredFieldParams, info: &CheckpointInfo) -> Result<(PathBuf, PathBuf)> {
    let path = ws.checkpoint(&info.label);
    io::save_checkpoint(&path, params)?;
    let side = sidecar(&path);
    fs::write(&side, serde_json::to_string_pretty(info)? + "\n")?;
    Ok((path, side))
}

fn load_checkpoint(path: &Path) -> Result<(LayeredFieldParams, Option<CheckpointInfo>)> {
    let params = io::load_checkpoint(path)?;
    let side = sidecar(path);
    let info = if side.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&side)?).with_context(|| format!("reading {}", side.display()))?)
    } else {
        None
    };
    Ok((params, info))
}

fn entry(command: &str, r: &Resolved) -> Entry {
    Entry {
        command: command.to_string(),
        seed: r.cfg.seed,
        config_file: r.config_file.as_ref().map(|p| p.display().to_string()),
        config: r.cfg.to_text(),
        ..Entry::default()
    }
}

pub fn generate(ws: &Workspace, r: &Resolved) -> Result<()> {
    let cfg = &r.cfg;
    ws.create()?;
    let bench = Benchmark::generate(cfg)?;
    let t_count = bench.scene.frames();
    let mut artifacts = Vec::new();
    let mut push = |p: PathBuf| artifacts.push(ws.rel(&p));
    for t in 0..t_count {
        io::write_ppm(&ws.frame(t), &bench.gt.rgb[t])?;
        io::write_mask(&ws.gt_dyn(t), &bench.gt.mask_dyn[t])?;
        io::write_mask(&ws.gt_ss(t), &bench.gt.mask_ss[t])?;
        io::write_pgm(&ws.pseudo(t), &bench.pseudo[t].values)?;
        for p in [ws.frame(t), ws.gt_dyn(t), ws.gt_ss(t), ws.pseudo(t)] {
            push(p);
        }
    }
    io::write_cameras_csv(&ws.cameras(), &bench.scene.cameras)?;
    let w = bench.scene.world_bounds;
    let meta = SceneMeta {
        preset: cfg.scene.clone(),
        seed: cfg.seed,
        frames: t_count,
        width: bench.scene.width,
        height: bench.scene.height,
        world_min: [w.min.x, w.min.y, w.min.z],
        world_max: [w.max.x, w.max.y, w.max.z],
        near: bench.scene.near,
        pseudo_threshold: cfg.degrade.threshold,
    };
    fs::write(ws.scene(), serde_json::to_string_pretty(&meta)? + "\n")?;
    fs::write(ws.config(), cfg.to_text())?;
    for p in [ws.cameras(), ws.scene(), ws.config()] {
        push(p);
    }
    let curve = evalkit::analyze_pseudo_masks(&bench.pseudo, &bench.gt, &[cfg.degrade.threshold])?;
    println!(
        "generated {t_count} frames of `{}` in {} (pseudo-mask precision {:.3}, recall {:.3})",
        cfg.scene,
        ws.root.display(),
        curve[0].precision,
        curve[0].recall
    );
    ws.record(Entry {
        artifacts,
        ..entry("generate", r)
    })
}

fn epoch_line(row: &LogRow, steps_per_epoch: usize) -> Option<String> {
    ((row.step + 1) % steps_per_epoch == 0).then(|| {
        format!(
            "epoch {:>3}  lr {:.2e}  rgb {:+.4}  pmf {:.4}  nmf {:.4}  total {:+.4}",
            row.epoch + 1,
            row.lr,
            row.report.l_rgb,
            row.report.l_pmf,
            row.report.l_nmf,
            row.report.l_total
        )
    })
}

pub fn train_cmd(ws: &Workspace, r: &Resolved) -> Result<PathBuf> {
    let cfg = &r.cfg;
    let meta = ws.load_scene()?;
    let data = ws.load_dataset(&meta, cfg.train.loss.toggles.uses_masks())?;
    let field = FieldConfig::for_scene(meta.world(), data.cameras[0].intrinsics(), meta.frames, meta.near);
    let init = LayeredFieldParams::init(field, cfg.seed)?;
    let label = method_label(cfg.train.loss.toggles, false);
    let log_path = ws.root.join(format!("checkpoints/{}.log.csv", tag(&label)));

    let mut rows = Vec::new();
    let result = train(&init, &data, &cfg.train, |row| {
        rows.push(*row);
        if let Some(line) = epoch_line(row, cfg.train.steps_per_epoch) {
            eprintln!("{line}");
        }
    });
    fs::write(&log_path, io::log_csv(&rows))?;
    let (params, _) = result.with_context(|| format!("training `{label}` failed; log at {}", log_path.display()))?;

    let mut info = CheckpointInfo::new(&params, &label, cfg, false);
    info.final_loss = rows.last().map(|r| r.report.l_total);
    let (ck, side) = save_checkpoint(ws, &params, &info)?;
    println!("trained {label}: {} parameters, checkpoint {}", params.len(), ck.display());
    ws.record(Entry {
        label: Some(label),
        checkpoint: Some(ws.rel(&ck)),
        artifacts: vec![ws.rel(&ck), ws.rel(&side), ws.rel(&log_path)],
        ..entry("train", r)
    })?;
    Ok(ck)
}

fn resolve_checkpoint(ws: &Workspace, given: Option<&Path>, commands: &[&str]) -> Result<PathBuf> {
    match given {
        Some(p) => {
            ws.require(p)?;
            Ok(p.to_path_buf())
        }
        None => ws
            .latest_checkpoint(commands)?
            .ok_or_else(|| Error::Missing(ws.root.join("checkpoints")).into()),
    }
}

pub fn refine_cmd(ws: &Workspace, r: &Resolved, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let cfg = &r.cfg;
    let meta = ws.load_scene()?;
    let ck = resolve_checkpoint(ws, checkpoint, &["train"])?;
    let (base, _) = load_checkpoint(&ck)?;
    let data = ws.load_dataset(&meta, cfg.refine.loss.toggles.uses_masks())?;
    let out = refine(&base, &data, &cfg.refine)?;
    if out.params.partition_checksum(Layer::Static) != base.partition_checksum(Layer::Static) {
        anyhow::bail!("internal error: refinement modified the static partition");
    }
    let label = method_label(cfg.refine.loss.toggles, true);
    let mut info = CheckpointInfo::new(&out.params, &label, cfg, true);
    info.losses = cfg.refine.loss.toggles.names();
    info.parent = Some(base.checksum());
    info.refine_frames = Some(out.frames.clone());
    info.final_loss = out.losses.last().copied();
    let (path, side) = save_checkpoint(ws, &out.params, &info)?;
    println!(
        "refined {label} on {} frames: objective {:.5} -> {:.5} ({} rejected steps), checkpoint {}",
        out.frames.len(),
        out.losses[0],
        out.losses.last().unwrap(),
        out.rejected_steps,
        path.display()
    );
    ws.record(Entry {
        label: Some(label),
        checkpoint: Some(ws.rel(&path)),
        artifacts: vec![ws.rel(&path), ws.rel(&side)],
        ..entry("refine", r)
    })?;
    Ok(path)
}

pub fn render_cmd(ws: &Workspace, r: &Resolved, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let cfg = &r.cfg;
    let meta = ws.load_scene()?;
    let ck = resolve_checkpoint(ws, checkpoint, &["train", "refine"])?;
    let (params, info) = load_checkpoint(&ck)?;
    let label = info.map(|i| i.label).unwrap_or_else(|| {
        ck.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
    });
    let cameras = io::read_cameras_csv(&ws.cameras())?;
    if params.config().frames != meta.frames {
        return Err(Error::Data(format!(
            "checkpoint covers {} frames, workspace has {}",
            params.config().frames,
            meta.frames
        ))
        .into());
    }
    let dir = ws.render_dir(&label);
    fs::create_dir_all(&dir)?;
    let mut artifacts = Vec::new();
    for &t in cfg.eval_frames() {
        let f = render_frame(&params, &cameras[t], t, &cfg.eval_render(), cfg.workers)?;
        let files = [
            dir.join(format!("rgb_{t:03}.ppm")),
            dir.join(format!("ss_{t:03}.pgm")),
            dir.join(format!("dyn_{t:03}.pgm")),
            dir.join(format!("unc_{t:03}.pgm")),
            dir.join(format!("ss_{t:03}.f64")),
            dir.join(format!("dyn_{t:03}.f64")),
        ];
        io::write_ppm(&files[0], &f.color)?;
        io::write_pgm(&files[1], &f.mask_ss)?;
        io::write_pgm(&files[2], &f.mask_dy)?;
        io::write_pgm(&files[3], &io::uncertainty_preview(&f.uncertainty))?;
        io::write_f64s(&files[4], &f.mask_ss.data)?;
        io::write_f64s(&files[5], &f.mask_dy.data)?;
        artifacts.extend(files.iter().map(|p| ws.rel(p)));
    }
    println!("rendered {label} at {} frames into {}", cfg.eval_frames().len(), dir.display());
    ws.record(Entry {
        label: Some(label),
        renders: Some(ws.rel(&dir)),
        artifacts,
        ..entry("render", r)
    })?;
    Ok(dir)
}

/// Loads mask predictions from a directory holding `ss_TTT` and `dyn_TTT`
/// images per frame, preferring exact `.f64` dumps over `.pgm` files.
fn load_predictions(dir: &Path, frames: &[usize], meta: &SceneMeta) -> Result<Vec<MaskPrediction>> {
    let load = |stem: String| -> Result<lmf_core::GrayImage> {
        let raw = dir.join(format!("{stem}.f64"));
        if raw.exists() {
            return Ok(io::read_gray_f64(&raw, meta.width, meta.height)?);
        }
        Ok(io::read_pgm(&dir.join(format!("{stem}.pgm")))?)
    };
    frames
        .iter()
        .map(|&t| {
            Ok(MaskPrediction {
                frame: t,
                mask_ss: load(format!("ss_{t:03}"))?,
                mask_dy: load(format!("dyn_{t:03}"))?,
            })
        })
        .collect()
}

pub struct EvalSource {
    pub predictions: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub label: Option<String>,
}

fn write_reports(ws: &Workspace, reports: &[EvalReport]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut curves = String::from("label,threshold,precision,recall,fpr,fnr\n");
    let mut diag = String::from("label,ss_on_dynamic,excluded_dyn,excluded_ss,excluded_union\n");
    for rep in reports {
        let p = ws.root.join(format!("reports/{}.csv", tag(&rep.label)));
        fs::write(&p, format!("{REPORT_CSV_HEADER}\n{}", rep.csv_rows()))?;
        written.push(p);
        for c in &rep.curve {
            writeln!(curves, "{},{},{},{},{},{}", rep.label, c.threshold, c.precision, c.recall, c.fpr, c.fnr)?;
        }
        let leak = rep.ss_on_dynamic.map(|v| v.to_string()).unwrap_or_else(|| "none".into());
        writeln!(
            diag,
            "{},{leak},{},{},{}",
            rep.label, rep.dynamic.excluded, rep.semi_static.excluded, rep.union.excluded
        )?;
    }
    let summary = ws.root.join("reports/summary.txt");
    fs::write(&summary, evalkit::summary_table(reports))?;
    let cp = ws.root.join("reports/curves.csv");
    fs::write(&cp, curves)?;
    let dp = ws.root.join("reports/diagnostics.csv");
    fs::write(&dp, diag)?;
    written.extend([summary, cp, dp]);
    Ok(written)
}

pub fn eval_cmd(ws: &Workspace, r: &Resolved, src: &EvalSource) -> Result<Vec<EvalReport>> {
    let cfg = &r.cfg;
    let meta = ws.load_scene()?;
    let gt: GroundTruth = ws.load_gt(&meta)?;
    let frames = cfg.eval_frames();
    let mut reports = Vec::new();

    let pseudo = ws.load_pseudo(&meta)?;
    let preds = evalkit::pseudo_mask_predictions(&pseudo, frames);
    reports.push(evalkit::evaluate(&preds, &gt, "pseudo")?);

    if let Some(dir) = &src.predictions {
        ws.require(dir)?;
        let label = src.label.clone().unwrap_or_else(|| {
            dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "external".into())
        });
        reports.push(evalkit::evaluate(&load_predictions(dir, frames, &meta)?, &gt, &label)?);
    } else if let Some(ck) = &src.checkpoint {
        ws.require(ck)?;
        let (params, info) = load_checkpoint(ck)?;
        let label = src.label.clone().or(info.map(|i| i.label)).unwrap_or_else(|| "model".into());
        let cameras = io::read_cameras_csv(&ws.cameras())?;
        let preds = evalkit::render_predictions(&params, &cameras, frames, &cfg.eval_render(), cfg.workers)?;
        reports.push(evalkit::evaluate(&preds, &gt, &label)?);
    } else {
        let sets = ws.render_sets()?;
        if sets.is_empty() {
            return Err(Error::Missing(ws.root.join("renders")).into());
        }
        for (label, dir) in sets {
            reports.push(evalkit::evaluate(&load_predictions(&dir, frames, &meta)?, &gt, &label)?);
        }
    }

    let written = write_reports(ws, &reports)?;
    print!("{}", evalkit::summary_table(&reports));
    ws.record(Entry {
        artifacts: written.iter().map(|p| ws.rel(p)).collect(),
        ..entry("eval", r)
    })?;
    Ok(reports)
}
