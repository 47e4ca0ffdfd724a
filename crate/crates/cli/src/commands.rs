//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anytime4d_core::archive::{bundle_from_archive, bundle_to_archive, TensorArchive};
use anytime4d_core::evalmetrics::{acc_comp_nc, ate_rpe, depth_metrics, MetricReport};
use anytime4d_core::geometry::Vec3;
use anytime4d_core::rng::{self, streams};
use anytime4d_core::scenegen::{augment, generate, sample_clip, GroundTruthBundle, SceneSpec};
use anytime4d_nn::eval::align_pooled;
use anytime4d_nn::model::Model;
use anytime4d_nn::streaming::LatentCache;
use anytime4d_nn::training::{
    build_supervision_plan, load_checkpoint, save_checkpoint, step_seed, train_step, AdamW, Checkpoint,
    LossBreakdown,
};
use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::ply;
use crate::prediction::Prediction;

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub sequences: Vec<String>,
}

pub fn sequence_id(k: usize) -> String {
    format!("seq_{k:04}")
}

/// Seed of sequence `k` in a dataset.
pub fn sequence_seed(seed: u64, k: usize) -> u64 {
    rng::child_seed(rng::child_seed(seed, streams::DATASET), k as u64)
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> CliResult<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let mut ids = Vec::with_capacity(cfg.data.count);
    for k in 0..cfg.data.count {
        let spec = SceneSpec::random(sequence_seed(cfg.data.seed, k), &cfg.data.scene);
        let bundle = generate(&spec).map_err(|e| CliError::Config(e.to_string()))?;
        let id = sequence_id(k);
        let mut a = bundle_to_archive(&bundle)?;
        a.config = serde_json::to_value(&spec).map_err(anytime4d_core::Error::from)?;
        a.meta.insert("sequence".into(), json!(id));
        a.write(&out.join(&id))?;
        info!("wrote {id}: {} frames {}x{}", bundle.num_frames(), bundle.width(), bundle.height());
        ids.push(id);
    }
    let manifest = DatasetManifest {
        schema_version: 1,
        seed: cfg.data.seed,
        sequences: ids,
    };
    fs::write(
        out.join(DATASET_MANIFEST),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    cfg.dump(out)?;
    Ok(manifest)
}

pub fn read_bundle(dir: &Path) -> CliResult<GroundTruthBundle> {
    let a = TensorArchive::read(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    Ok(bundle_from_archive(&a)?)
}

pub fn load_dataset(dir: &Path) -> CliResult<(DatasetManifest, Vec<GroundTruthBundle>)> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if m.sequences.is_empty() {
        return Err(CliError::Data("dataset has no sequences".into()));
    }
    let bundles = m.sequences.iter().map(|id| read_bundle(&dir.join(id))).collect::<CliResult<_>>()?;
    Ok((m, bundles))
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}"))
}

fn save(out: &Path, model: &Model<f32>, opt: &AdamW<f32>, cfg: &RunConfig, step: usize) -> CliResult<PathBuf> {
    let dir = checkpoint_dir(out, step);
    let extra = serde_json::to_value(cfg).expect("config serializes");
    save_checkpoint(&dir, model, opt, &cfg.train, step, extra)?;
    Ok(dir)
}

/// Run configuration stored in a checkpoint.
pub fn checkpoint_run_config(ck: &Checkpoint) -> CliResult<RunConfig> {
    let mut cfg: RunConfig = serde_json::from_value(ck.extra.clone())
        .map_err(|e| CliError::Config(format!("checkpoint run config: {e}")))?;
    cfg.model = ck.model.config.clone();
    cfg.train = ck.train.clone();
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps: usize,
    pub last: Option<LossBreakdown>,
}

/// Trains on a dataset. With `resume`, continues from that checkpoint; the
/// model configuration must match.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let (_, bundles) = load_dataset(data)?;
    for b in &bundles {
        if b.num_frames() < cfg.data.clip_len {
            return Err(CliError::Data(format!(
                "sequence with {} frames is shorter than clip_len {}",
                b.num_frames(),
                cfg.data.clip_len
            )));
        }
        if b.height() % cfg.model.patch_size != 0 || b.width() % cfg.model.patch_size != 0 {
            return Err(CliError::Config(format!(
                "image {}x{} not divisible by patch size {}",
                b.height(),
                b.width(),
                cfg.model.patch_size
            )));
        }
    }
    fs::create_dir_all(out)?;
    cfg.dump(out)?;

    let (mut model, mut opt, start) = match resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if ck.model.config != cfg.model {
                return Err(CliError::Config("model config differs from the checkpoint".into()));
            }
            (ck.model, ck.opt, ck.step)
        }
        None => {
            let mut r = rng::stream(cfg.train.seed, streams::INIT);
            let m = Model::<f32>::new(cfg.model.clone(), &mut r)?;
            let opt = AdamW::new(&m.params);
            (m, opt, 0)
        }
    };
    if start > cfg.train.steps {
        return Err(CliError::Config(format!(
            "checkpoint step {start} is past train.steps {}",
            cfg.train.steps
        )));
    }

    let log_path = out.join(TRAIN_LOG);
    let mut log = String::new();
    if start > 0 {
        if let Ok(old) = fs::read_to_string(&log_path) {
            for line in old.lines().skip(1) {
                match line.split(',').next().and_then(|s| s.parse::<usize>().ok()) {
                    Some(s) if s < start => {
                        log.push_str(line);
                        log.push('\n');
                    }
                    _ => {}
                }
            }
        }
    }
    let mut log = format!("{}\n{log}", LossBreakdown::CSV_HEADER);
    let mut last_ck = if start == 0 { save(out, &model, &opt, cfg, 0)? } else { checkpoint_dir(out, start) };
    let mut last = None;

    for step in start..cfg.train.steps {
        let seed = step_seed(cfg.train.seed, step);
        let k = rng::stream(seed, streams::DATASET).gen_range(0..bundles.len());
        let clip = sample_clip(&bundles[k], seed, cfg.data.clip_len, cfg.data.max_stride)?
            .normalized()?
            .0;
        let images = cfg.data.augment.then(|| augment(&clip.frames, seed, &cfg.data.augmentation));
        let plan = build_supervision_plan(&clip, seed, &cfg.train.supervision)?;
        let r = match train_step(&mut model, &mut opt, &clip, images.as_deref(), &plan, &cfg.train, step) {
            Ok(r) => r,
            Err(e) => {
                fs::write(&log_path, &log)?;
                return Err(e.into());
            }
        };
        writeln!(log, "{}", r.loss.csv_row(step, r.lr, r.grad_norm)).expect("string write");
        if step % 50 == 0 {
            info!("step {step} loss {:.4} lr {:.2e}", r.loss.total, r.lr);
        }
        last = Some(r.loss);
        let done = step + 1;
        if done == cfg.train.steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            last_ck = save(out, &model, &opt, cfg, done)?;
            fs::write(&log_path, &log)?;
        }
    }
    fs::write(&log_path, &log)?;
    Ok(TrainOutcome {
        final_checkpoint: last_ck,
        steps: cfg.train.steps,
        last,
    })
}

#[derive(Debug, Clone, Default)]
pub struct QueryOptions {
    pub streaming: bool,
    pub allow_offline_weights: bool,
    pub ply: Option<PathBuf>,
}

/// Runs the model on a sequence archive and writes a prediction archive.
pub fn cmd_query(
    checkpoint: &Path,
    sequence: &Path,
    source: usize,
    targets: &[usize],
    out: &Path,
    opts: &QueryOptions,
) -> CliResult<Prediction> {
    let ck = load_checkpoint(checkpoint)?;
    let run_cfg = checkpoint_run_config(&ck)?;
    let bundle = read_bundle(sequence)?;
    let n = bundle.num_frames();
    if source >= n {
        return Err(CliError::Config(format!("source {source} out of range for {n} frames")));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(CliError::Config(format!("target {t} out of range for {n} frames")));
    }
    let model = ck.model;
    let times: Vec<_> = (0..n).map(|i| bundle.timestamp(i)).collect();
    let pred = if opts.streaming {
        if !model.config.causal && !(opts.allow_offline_weights || run_cfg.allow_offline_weights_for_streaming) {
            return Err(CliError::Config(
                "checkpoint was not trained causally; pass --allow-offline-weights to stream it anyway".into(),
            ));
        }
        let mut cache = LatentCache::new(&model.config, bundle.width(), bundle.height())?;
        for (i, f) in bundle.frames.iter().enumerate() {
            cache.ingest_frame(&model, f, times[i])?;
        }
        let geometry = (0..n).map(|i| cache.geometry(&model, i)).collect::<anytime4d_core::Result<Vec<_>>>()?;
        let base = anytime4d_nn::model::predicted_base(&geometry[source])?;
        let mut frame = anytime4d_core::representation::FactorizedFrame4D::new(times[source], base);
        let mut sorted = targets.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut motion = Vec::new();
        for &t in &sorted {
            let m = cache.query_streaming(&model, source, t)?;
            frame.insert(m.deltas.clone())?;
            motion.push(m);
        }
        Prediction::from_model(geometry, frame, motion)
    } else {
        let f = model.forward_4d(&bundle.frames, &times, source, targets)?;
        Prediction::from_model(f.geometry, f.frame, f.motion)
    };
    let check = |v: f64| v.is_finite();
    if !pred.frame.base.points.iter().all(|p| p.iter().all(|x| check(*x))) {
        return Err(CliError::Numeric("non-finite predicted geometry".into()));
    }
    let mut a = pred.to_archive()?;
    a.config = json!({ "checkpoint": checkpoint.display().to_string(), "sequence": sequence.display().to_string(),
        "source": source, "targets": targets, "streaming": opts.streaming, "model": model.config });
    a.write(out)?;

    if let Some(path) = &opts.ply {
        let img = &bundle.frames[source];
        let base = &pred.frame.base;
        let pts: Vec<(Vec3, [u8; 3])> = (0..base.points.len())
            .filter(|&i| base.valid[i])
            .map(|i| {
                let c = &img.data[i * 3..i * 3 + 3];
                (base.points[i], [ply::color_byte(c[0]), ply::color_byte(c[1]), ply::color_byte(c[2])])
            })
            .collect();
        let mut w = BufWriter::new(fs::File::create(path)?);
        ply::write_points(&mut w, &pts)?;
        let tracks: Vec<(Vec<Vec3>, [u8; 3])> = (0..base.points.len())
            .filter(|&i| base.valid[i])
            .map(|i| {
                let c = &img.data[i * 3..i * 3 + 3];
                let path = pred.frame.displacements.values().map(|f| base.points[i] + f.deltas[i]).collect();
                (path, [ply::color_byte(c[0]), ply::color_byte(c[1]), ply::color_byte(c[2])])
            })
            .collect();
        let tpath = path.with_extension("tracks.ply");
        let mut w = BufWriter::new(fs::File::create(&tpath)?);
        ply::write_tracks(&mut w, &tracks)?;
    }
    Ok(pred)
}

/// Reads a prediction archive, or a ground-truth archive treated as a
/// perfect prediction for `source`.
pub fn read_prediction(dir: &Path, source: usize) -> CliResult<Prediction> {
    let a = TensorArchive::read(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    if a.meta.get("kind").and_then(|v| v.as_str()) == Some("prediction") {
        Prediction::from_archive(&a)
    } else {
        let b = bundle_from_archive(&a)?.recentered_on(0).normalized()?.0;
        Prediction::from_bundle(&b, source)
    }
}

fn sim3_json(t: &anytime4d_core::geometry::Sim3) -> serde_json::Value {
    let q = t.rotation;
    json!({ "scale": t.scale, "rotation_wxyz": [q.w, q.i, q.j, q.k],
        "translation": [t.translation.x, t.translation.y, t.translation.z] })
}

/// Scores a prediction against normalized ground truth.
pub fn compute_metrics(pred: &Prediction, gt: &GroundTruthBundle, cfg: &RunConfig, name: &str) -> CliResult<MetricReport> {
    let n = gt.num_frames();
    if pred.num_frames() != n {
        return Err(CliError::Data(format!("prediction has {} frames, ground truth {n}", pred.num_frames())));
    }
    let (w, h) = (gt.width(), gt.height());
    if pred.frame.base.width != w || pred.frame.base.height != h {
        return Err(CliError::Data("prediction and ground truth differ in size".into()));
    }
    let mut report = MetricReport {
        name: name.to_string(),
        apd_thresholds: cfg.metrics.apd_thresholds.clone(),
        ..MetricReport::default()
    };

    // Dense tracking of the source frame toward every predicted target.
    let q = pred.frame.source.frame_index;
    let gt_base = gt.base_pointmap(q);
    let (mut p, mut g, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for (&tau, f) in &pred.frame.displacements {
        let gf = gt.displacement(q, tau);
        for i in 0..w * h {
            p.push(pred.frame.base.points[i] + f.deltas[i]);
            g.push(gt_base.points[i] + gf.deltas[i]);
            v.push(gt_base.valid[i] && gf.valid[i] && pred.frame.base.valid[i]);
        }
    }
    let mode = cfg.metrics.track_alignment()?;
    let (t, used) = align_pooled(&p, &g, &v, mode, &cfg.metrics.ransac)?;
    let aligned: Vec<Vec3> = p.iter().map(|x| t.apply(x)).collect();
    report.epe = Some(anytime4d_core::evalmetrics::epe(&aligned, &g, &v)?);
    report.apd = Some(anytime4d_core::evalmetrics::apd(&aligned, &g, &v, &cfg.metrics.apd_thresholds)?);
    let mut tj = sim3_json(&t);
    tj["method"] = json!(used);
    tj["requested"] = json!(cfg.metrics.track_alignment);
    report.alignment.insert("tracking".into(), tj);

    // Camera trajectory.
    if n >= 2 {
        let pe = ate_rpe(&pred.poses, &gt.poses)?;
        report.ate = Some(pe.ate);
        report.rpe_t = Some(pe.rpe_t);
        report.rpe_r = Some(pe.rpe_r);
        let mut pj = sim3_json(&pe.alignment);
        pj["method"] = json!(if pe.centroid_only { "centroid" } else { "umeyama" });
        report.alignment.insert("poses".into(), pj);
    }

    // Depth.
    let dmode = cfg.metrics.depth_alignment()?;
    let dm = depth_metrics(&pred.depths, &gt.depths, dmode)?;
    report.depth_rel = Some(dm.rel);
    report.depth_delta = Some(dm.delta);
    report.alignment.insert(
        "depth".into(),
        json!({ "method": cfg.metrics.depth_alignment, "scale": dm.scale, "shift": dm.shift }),
    );

    // Source-frame point cloud under the tracking alignment.
    let pc: Vec<Vec3> = (0..w * h)
        .filter(|&i| pred.frame.base.valid[i] && gt_base.valid[i])
        .map(|i| t.apply(&pred.frame.base.points[i]))
        .collect();
    let gc: Vec<Vec3> = gt_base.valid_points().copied().collect();
    let cm = acc_comp_nc(&pc, &gc, cfg.metrics.knn_for_normals)?;
    report.acc = Some(cm.acc);
    report.comp = Some(cm.comp);
    report.nc = cm.nc;
    report.alignment.insert(
        "cloud".into(),
        json!({ "method": "tracking", "knn_for_normals": cfg.metrics.knn_for_normals }),
    );
    for c in MetricReport::COLUMNS {
        if let Some(x) = report.get(c) {
            if !x.is_finite() {
                return Err(CliError::Numeric(format!("metric {c} is not finite")));
            }
        }
    }
    Ok(report)
}

pub fn write_report(report: &MetricReport, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(report).expect("report serializes") + "\n",
    )?;
    fs::write(
        out.join("metrics.csv"),
        format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row()),
    )?;
    Ok(())
}

pub fn cmd_metrics(cfg: &RunConfig, pred: &Path, gt: &Path, source: usize, name: &str, out: &Path) -> CliResult<MetricReport> {
    cfg.validate()?;
    let gt = read_bundle(gt)?.recentered_on(0).normalized()?.0;
    let pred = read_prediction(pred, source)?;
    let report = compute_metrics(&pred, &gt, cfg, name)?;
    write_report(&report, out)?;
    cfg.dump(out)?;
    Ok(report)
}

/// Group key of a report: its name up to the first `/`.
pub fn report_group(name: &str) -> &str {
    name.split('/').next().unwrap_or(name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub group: String,
    pub count: usize,
    pub means: BTreeMap<&'static str, f64>,
}

/// Per-group arithmetic means. Reports in a group must populate the same
/// metrics.
pub fn aggregate(reports: &[MetricReport]) -> CliResult<Vec<AggregateRow>> {
    if reports.is_empty() {
        return Err(CliError::Data("no reports".into()));
    }
    let mut groups: BTreeMap<String, Vec<&MetricReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(report_group(&r.name).to_string()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(group, rs)| {
            let cols = rs[0].populated();
            if rs.iter().any(|r| r.populated() != cols) {
                return Err(CliError::Data(format!("reports in group {group:?} have different metric sets")));
            }
            let means = cols
                .iter()
                .map(|&c| (c, rs.iter().map(|r| r.get(c).unwrap()).sum::<f64>() / rs.len() as f64))
                .collect();
            Ok(AggregateRow {
                group,
                count: rs.len(),
                means,
            })
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("group,count");
    for c in MetricReport::COLUMNS {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for r in rows {
        write!(s, "{},{}", r.group, r.count).expect("string write");
        for c in MetricReport::COLUMNS {
            s.push(',');
            if let Some(v) = r.means.get(c) {
                write!(s, "{v}").expect("string write");
            }
        }
        s.push('\n');
    }
    s
}

pub fn aggregate_table(rows: &[AggregateRow]) -> String {
    let cols: Vec<&str> = MetricReport::COLUMNS
        .iter()
        .copied()
        .filter(|c| rows.iter().any(|r| r.means.contains_key(c)))
        .collect();
    let gw = rows.iter().map(|r| r.group.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<gw$} {:>5}", "group", "n");
    for c in &cols {
        write!(s, " {c:>11}").expect("string write");
    }
    s.push('\n');
    for r in rows {
        write!(s, "{:<gw$} {:>5}", r.group, r.count).expect("string write");
        for c in &cols {
            match r.means.get(c) {
                Some(v) => write!(s, " {v:>11.4}").expect("string write"),
                None => write!(s, " {:>11}", "-").expect("string write"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> CliResult<Vec<AggregateRow>> {
    let mut reports = Vec::new();
    for p in inputs {
        let path = if p.is_dir() { p.join("metrics.json") } else { p.clone() };
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        reports.push(
            serde_json::from_str::<MetricReport>(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        );
    }
    let rows = aggregate(&reports)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.csv"), aggregate_csv(&rows))?;
    let table = aggregate_table(&rows);
    fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(rows)
}
