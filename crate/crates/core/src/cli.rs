//! Commands behind the `dacca` binary, usable directly as a library.
//!
//! The in-memory functions (`run_pretrain`, `run_adapt`, `evaluate_scenes`)
//! do the work; the `cmd_*` wrappers add the file formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Stage};
use crate::data::{self, BatchSampler, LaneScene, Manifest};
use crate::error::{Domain, Error, Result};
use crate::labels::ClassMap;
use crate::metrics::{self, EvalSummary, ImageEval, MetricsConfig};
use crate::model::SegModel;
use crate::selftrain::{StepReport, TrainerState};
use crate::tensor::Tensor;

/// Hex SHA-256 of the canonical config dump.
pub fn config_hash(cfg: &RunConfig) -> String {
    Sha256::digest(cfg.dump().as_bytes())
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Components switched off for an adaptation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub ccl: bool,
    pub dfa: bool,
    pub ubp: bool,
}

impl Ablation {
    /// Comma-separated subset of `ccl`, `dfa`, `ubp`, or `none`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut a = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "ccl" => a.ccl = true,
                "dfa" => a.dfa = true,
                "ubp" => a.ubp = true,
                "none" => {}
                other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(a)
    }

    /// Plain mean-teacher self-training.
    pub fn self_training_only() -> Self {
        Self {
            ccl: true,
            dfa: true,
            ubp: false,
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if self.ccl {
            cfg.use_ccl = false;
            cfg.lambda_c = 0.0;
        }
        if self.dfa {
            cfg.use_dfa = false;
        }
        if self.ubp {
            cfg.ubp = false;
        }
    }
}

/// Per-iteration hook; return `Err` to abort.
pub type StepHook<'a> = &'a mut dyn FnMut(&TrainerState, &StepReport) -> Result<()>;

fn source_pairs(batch: &[LaneScene]) -> Vec<(&Tensor, &ClassMap)> {
    batch.iter().map(|s| (&s.image, &s.label)).collect()
}

/// Source-only supervised training for `state.config.total_iters` steps,
/// continuing from `state.iter`.
pub fn run_pretrain(
    cfg: &RunConfig,
    state: &mut TrainerState,
    source: &[LaneScene],
    mut hook: Option<StepHook<'_>>,
) -> Result<Vec<StepReport>> {
    if source.iter().any(LaneScene::labels_hidden) {
        return Err(Error::Data("source scenes have no labels".into()));
    }
    let sampler = BatchSampler::new(source.len(), cfg.batch_size, cfg.train_seed, cfg.flip)?;
    let mut reports = Vec::new();
    while state.iter < state.config.total_iters {
        let batch = sampler.scenes_at(source, state.iter);
        let r = state.pretrain_step(&source_pairs(&batch))?;
        if let Some(h) = hook.as_mut() {
            h(state, &r)?;
        }
        reports.push(r);
    }
    Ok(reports)
}

pub fn pretrain_state(cfg: &RunConfig) -> Result<TrainerState> {
    TrainerState::new(SegModel::new(cfg.model_config())?, cfg.trainer_config(Stage::Pretrain))
}

/// Seed offset that keeps the target batch order independent of the source.
const TARGET_STREAM: u64 = 0x7461_7267_6574;

/// Refuses target scenes whose labels are readable.
pub fn ensure_hidden(target: &[LaneScene]) -> Result<()> {
    if let Some(i) = target.iter().position(|s| !s.labels_hidden()) {
        return Err(Error::Contract(format!(
            "target scene {i} carries visible labels; adaptation must not see them"
        )));
    }
    Ok(())
}

/// Adaptation from `init` with `cfg` (ablations already applied).
pub fn adapt_state(cfg: &RunConfig, init: SegModel) -> Result<TrainerState> {
    if !init.same_architecture(&SegModel::new(cfg.model_config())?) {
        return Err(Error::ArchitectureMismatch("initial checkpoint does not match the config".into()));
    }
    TrainerState::new(init, cfg.trainer_config(Stage::Adapt))
}

pub fn run_adapt(
    cfg: &RunConfig,
    state: &mut TrainerState,
    source: &[LaneScene],
    target: &[LaneScene],
    mut hook: Option<StepHook<'_>>,
) -> Result<Vec<StepReport>> {
    ensure_hidden(target)?;
    if source.iter().any(LaneScene::labels_hidden) {
        return Err(Error::Data("source scenes have no labels".into()));
    }
    let src = BatchSampler::new(source.len(), cfg.batch_size, cfg.train_seed, cfg.flip)?;
    let tgt = BatchSampler::new(target.len(), cfg.batch_size, cfg.train_seed ^ TARGET_STREAM, cfg.flip)?;
    let mut reports = Vec::new();
    while state.iter < state.config.total_iters {
        let sb = src.scenes_at(source, state.iter);
        let tb = tgt.scenes_at(target, state.iter);
        let timgs: Vec<&Tensor> = tb.iter().map(|s| &s.image).collect();
        let r = state.train_step(&source_pairs(&sb), &timgs)?;
        if let Some(h) = hook.as_mut() {
            h(state, &r)?;
        }
        reports.push(r);
    }
    Ok(reports)
}

/// Feature-resolution class map predicted for `image`.
pub fn predict_map(ckpt: &Checkpoint, image: &Tensor) -> Result<ClassMap> {
    let out = ckpt
        .model
        .forward(image, ckpt.banks.as_ref(), ckpt.dfa_inference, ckpt.dfa)?;
    ClassMap::argmax_of(&out.logits)
}

/// Predicted lanes and metrics for every scene.
pub fn evaluate_scenes(
    ckpt: &Checkpoint,
    scenes: &[LaneScene],
    mcfg: &MetricsConfig,
) -> Result<Vec<(Vec<data::LanePoints>, ImageEval)>> {
    let stride = ckpt.model.config.stride();
    scenes
        .iter()
        .map(|s| {
            let pred = metrics::extract_lanes(&predict_map(ckpt, &s.image)?, stride);
            let e = metrics::evaluate_image(&pred, &s.lanes, s.height(), s.width(), mcfg)?;
            Ok((pred, e))
        })
        .collect()
}

/// Source, hidden target and labeled target evaluation scenes, all drawn
/// from `cfg.data_seed` with the configured counts.
pub fn synthetic_splits(cfg: &RunConfig) -> (Vec<LaneScene>, Vec<LaneScene>, Vec<LaneScene>) {
    let sc = cfg.scene_config();
    let seed = cfg.data_seed.wrapping_mul(3);
    let source = data::generate_dataset(seed + 1, cfg.source_count, &sc, &cfg.style(Domain::Source));
    let target = data::generate_dataset(seed + 2, cfg.target_count, &sc, &cfg.style(Domain::Target))
        .iter()
        .map(LaneScene::hide_labels)
        .collect();
    let eval = data::generate_dataset(seed + 3, cfg.eval_count, &sc, &cfg.style(Domain::Target));
    (source, target, eval)
}

/// `base` with the data, model and training seeds all set to `seed`.
pub fn seeded(base: &RunConfig, seed: u64) -> RunConfig {
    RunConfig {
        data_seed: seed,
        model_seed: seed,
        train_seed: seed,
        ..base.clone()
    }
}

/// Pooled F1 of `ckpt` over `scenes`.
pub fn dataset_f1(ckpt: &Checkpoint, scenes: &[LaneScene], mcfg: &MetricsConfig) -> Result<f64> {
    let evals: Vec<ImageEval> = evaluate_scenes(ckpt, scenes, mcfg)?.into_iter().map(|(_, e)| e).collect();
    Ok(metrics::summarize(&evals).f1.f1)
}

/// Target-domain F1 of the three component-ablation rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationScores {
    pub source_only: f64,
    pub self_training: f64,
    pub full: f64,
}

/// Pretrains once on the source split, then adapts twice from the same
/// weights: plain self-training and the full method.
pub fn ablation_scores(cfg: &RunConfig) -> Result<AblationScores> {
    let (source, target, eval) = synthetic_splits(cfg);
    let mcfg = cfg.metrics_config();
    let mut pre = pretrain_state(cfg)?;
    run_pretrain(cfg, &mut pre, &source, None)?;
    let adapted = |ablation: Ablation| -> Result<f64> {
        let mut c = cfg.clone();
        ablation.apply(&mut c);
        let mut state = adapt_state(&c, pre.student.clone())?;
        run_adapt(&c, &mut state, &source, &target, None)?;
        dataset_f1(&Checkpoint::from_state(&state, true), &eval, &mcfg)
    };
    Ok(AblationScores {
        source_only: dataset_f1(&Checkpoint::from_model(pre.student.clone()), &eval, &mcfg)?,
        self_training: adapted(Ablation::self_training_only())?,
        full: adapted(Ablation::default())?,
    })
}

fn check_output_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Data(format!(
                "{} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub struct GenDataArgs<'a> {
    pub out: &'a Path,
    pub domain: Domain,
    pub count: usize,
    pub seed: u64,
    pub hide_labels: bool,
    pub force: bool,
}

pub fn cmd_gen_data(cfg: &RunConfig, args: &GenDataArgs<'_>) -> Result<Manifest> {
    check_output_dir(args.out, args.force)?;
    let scenes = data::generate_dataset(args.seed, args.count, &cfg.scene_config(), &cfg.style(args.domain));
    let manifest = Manifest {
        count: args.count,
        num_lanes: cfg.num_lanes,
        height: cfg.image_height,
        width: cfg.image_width,
        domain: args.domain,
        labels_hidden: args.hide_labels,
        seed: args.seed,
        config_hash: config_hash(cfg),
    };
    data::write_dataset(args.out, &manifest, &scenes)?;
    Ok(manifest)
}

fn write_loss_csv(path: &Path, reports: &[StepReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(StepReport::HEADER)?;
    for r in reports {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Loss CSV next to a checkpoint: `model.ckpt` -> `model.loss.csv`.
pub fn loss_csv_path(ckpt: &Path) -> std::path::PathBuf {
    ckpt.with_extension("loss.csv")
}

fn checkpoint_hook<'a>(
    out: &'a Path,
    every: u64,
    with_banks: bool,
) -> impl FnMut(&TrainerState, &StepReport) -> Result<()> + 'a {
    move |state, _| {
        if every > 0 && state.iter % every == 0 && state.iter < state.config.total_iters {
            Checkpoint::from_state(state, with_banks).save(&out.with_extension(format!("iter{}.ckpt", state.iter)))?;
        }
        Ok(())
    }
}

pub struct PretrainArgs<'a> {
    pub source: &'a Path,
    pub out: &'a Path,
    pub iters: Option<u64>,
    pub resume: Option<&'a Path>,
}

pub fn cmd_pretrain(cfg: &RunConfig, args: &PretrainArgs<'_>) -> Result<Vec<StepReport>> {
    let mut cfg = cfg.clone();
    if let Some(t) = args.iters {
        cfg.pretrain_iters = t;
    }
    let ds = data::read_dataset(args.source)?;
    if ds.manifest.labels_hidden {
        return Err(Error::Data(format!("{} has no labels", args.source.display())));
    }
    let mut state = match args.resume {
        Some(p) => Checkpoint::load(p)?.into_state(cfg.trainer_config(Stage::Pretrain))?,
        None => pretrain_state(&cfg)?,
    };
    let mut hook = checkpoint_hook(args.out, cfg.checkpoint_every, false);
    let reports = run_pretrain(&cfg, &mut state, &ds.scenes, Some(&mut hook))?;
    Checkpoint::from_state(&state, false).save(args.out)?;
    write_loss_csv(&loss_csv_path(args.out), &reports)?;
    Ok(reports)
}

pub struct AdaptArgs<'a> {
    pub source: &'a Path,
    pub target: &'a Path,
    pub init: &'a Path,
    pub out: &'a Path,
    pub iters: Option<u64>,
    pub ablation: Ablation,
}

pub fn cmd_adapt(cfg: &RunConfig, args: &AdaptArgs<'_>) -> Result<Vec<StepReport>> {
    let mut cfg = cfg.clone();
    if let Some(t) = args.iters {
        cfg.adapt_iters = t;
    }
    args.ablation.apply(&mut cfg);
    let target = data::read_dataset(args.target)?;
    if !target.manifest.labels_hidden {
        return Err(Error::Contract(format!(
            "{} exposes target labels; regenerate it with --hide-labels",
            args.target.display()
        )));
    }
    ensure_hidden(&target.scenes)?;
    let source = data::read_dataset(args.source)?;
    let init = Checkpoint::load(args.init)?;
    let mut state = adapt_state(&cfg, init.model)?;
    let mut hook = checkpoint_hook(args.out, cfg.checkpoint_every, true);
    let reports = run_adapt(&cfg, &mut state, &source.scenes, &target.scenes, Some(&mut hook))?;
    Checkpoint::from_state(&state, true).save(args.out)?;
    write_loss_csv(&loss_csv_path(args.out), &reports)?;
    Ok(reports)
}

pub struct EvalArgs<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub report: &'a Path,
    pub svg: Option<&'a Path>,
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs<'_>) -> Result<EvalSummary> {
    let ckpt = Checkpoint::load(args.ckpt)?;
    let ds = data::read_dataset(args.data)?;
    let mcfg = cfg.metrics_config();
    let results = evaluate_scenes(&ckpt, &ds.scenes, &mcfg)?;
    let evals: Vec<ImageEval> = results.iter().map(|(_, e)| e.clone()).collect();
    let summary = metrics::summarize(&evals);
    write_eval_csv(args.report, &evals, &summary)?;
    if let Some(svg) = args.svg {
        let preds: Vec<_> = results.into_iter().map(|(p, _)| p).collect();
        fs::write(svg, render_svg(&ds.scenes, &preds, &evals, cfg.svg_images))?;
    }
    Ok(summary)
}

pub const EVAL_HEADER: [&str; 10] = ["image", "accuracy", "fp_rate", "fn_rate", "precision", "recall", "f1", "tp", "fp", "fn"];

pub fn write_eval_csv(path: &Path, evals: &[ImageEval], summary: &EvalSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EVAL_HEADER)?;
    let row = |name: String, acc: f64, fp: f64, fn_: f64, f: &metrics::F1Result| {
        [
            name,
            acc.to_string(),
            fp.to_string(),
            fn_.to_string(),
            f.precision.to_string(),
            f.recall.to_string(),
            f.f1.to_string(),
            f.tp.to_string(),
            f.fp.to_string(),
            f.fn_.to_string(),
        ]
    };
    for (i, e) in evals.iter().enumerate() {
        w.write_record(row(format!("{i:04}"), e.lanes.accuracy, e.lanes.fp_rate, e.lanes.fn_rate, &e.f1))?;
    }
    w.write_record(row(
        "summary".into(),
        summary.accuracy,
        summary.fp_rate,
        summary.fn_rate,
        &summary.f1,
    ))?;
    w.flush()?;
    Ok(())
}

fn polyline(lane: &[(f64, f64)], ox: f64, oy: f64, scale: f64, color: &str) -> String {
    let pts: Vec<String> = lane
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", ox + (x + 0.5) * scale, oy + (y + 0.5) * scale))
        .collect();
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
        pts.join(" ")
    )
}

/// Accuracy histogram plus GT (green) and predicted (red) lanes of the
/// first `overlays` images.
pub fn render_svg(
    scenes: &[LaneScene],
    preds: &[Vec<data::LanePoints>],
    evals: &[ImageEval],
    overlays: usize,
) -> String {
    const BINS: usize = 10;
    let mut counts = [0usize; BINS];
    for e in evals {
        counts[((e.lanes.accuracy * BINS as f64) as usize).min(BINS - 1)] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let (hist_w, hist_h, pad) = (400.0f64, 160.0f64, 30.0f64);
    let k = overlays.min(scenes.len());
    let tile = 160.0;
    let width = (hist_w + 2.0 * pad).max(pad + k as f64 * (tile + pad));
    let height = hist_h + 3.0 * pad + if k > 0 { tile + pad } else { 0.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{pad}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"14\">per-image accuracy ({} images)</text>",
        pad - 10.0,
        evals.len()
    );
    let bar_w = hist_w / BINS as f64;
    for (i, &c) in counts.iter().enumerate() {
        let h = c as f64 / max * hist_h;
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"steelblue\"><title>{:.1}-{:.1}: {c}</title></rect>",
            pad + i as f64 * bar_w + 1.0,
            pad + hist_h - h,
            bar_w - 2.0,
            i as f64 / BINS as f64,
            (i + 1) as f64 / BINS as f64
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"black\"/>",
        pad + hist_w,
        y = pad + hist_h
    );
    for t in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{t:.1}</text>",
            pad + t * hist_w,
            pad + hist_h + 14.0
        );
    }
    let oy = hist_h + 2.5 * pad;
    for i in 0..k {
        let sc = &scenes[i];
        let scale = tile / sc.width().max(sc.height()) as f64;
        let ox = pad + i as f64 * (tile + pad);
        let _ = writeln!(
            s,
            "<rect x=\"{ox:.1}\" y=\"{oy:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#333\"/>",
            sc.width() as f64 * scale,
            sc.height() as f64 * scale
        );
        for lane in sc.lanes.iter().filter(|l| !l.is_empty()) {
            s.push_str(&polyline(lane, ox, oy, scale, "#2ca02c"));
        }
        for lane in preds[i].iter().filter(|l| !l.is_empty()) {
            s.push_str(&polyline(lane, ox, oy, scale, "#d62728"));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Contract(_) => 4,
        _ => 3,
    }
}
