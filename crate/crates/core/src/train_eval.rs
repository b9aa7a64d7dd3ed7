//! Training loop, evaluation over splits and attribute cells, the ablation
//! runner and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::dataset::{group_records, Axis, DatasetManifest, GroundingRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::{iou, is_hit, prediction_to_pixel, to_norm, NormBox, PixelBox, ACC_THRESHOLD};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{named_rng, ParamStore};
use crate::vgnet::{LossWeights, ModalityMode, ModelConfig, PreparedInput, VgNet};
use crate::ama::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    /// Horizontal flip with probability 0.5, applied to both images.
    pub flip: bool,
    /// Brightness/contrast jitter amplitude on the RGB image; 0 disables.
    pub color_jitter: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            flip: true,
            color_jitter: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    pub augment: Augmentation,
    /// Validation accuracy is measured every this many epochs and after
    /// the last step.
    pub eval_every_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-4,
            epochs: 120,
            max_steps: None,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
            augment: Augmentation::default(),
            eval_every_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every_epochs == 0 {
            return Err(Error::Config(
                "batch_size, epochs and eval_every_epochs must be positive".into(),
            ));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive when set".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.augment.color_jitter) {
            return Err(Error::Config("augment.color_jitter must lie in [0, 1)".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// Decoded images of one record for the active streams.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub rgb: Option<Image>,
    pub tir: Option<Image>,
    pub expression: String,
    pub gt: NormBox,
}

/// Decodes the images each record needs under `mode`, in parallel.
pub fn load_samples(
    manifest: &DatasetManifest,
    records: &[&GroundingRecord],
    mode: ModalityMode,
    image_size: usize,
) -> Result<Vec<LoadedSample>> {
    let streams = mode.streams();
    records
        .par_iter()
        .map(|r| {
            let rgb = if streams.contains(&Stream::Rgb) {
                Some(Image::load_rgb(&manifest.resolve(&r.rgb_path), image_size)?)
            } else {
                None
            };
            let tir = if streams.contains(&Stream::Tir) {
                Some(Image::load_thermal(&manifest.resolve(&r.tir_path), image_size)?)
            } else {
                None
            };
            Ok(LoadedSample {
                id: r.id.clone(),
                rgb,
                tir,
                expression: r.expression.clone(),
                gt: to_norm(&r.bbox, r.dims)?,
            })
        })
        .collect()
}

/// Swaps the words "left" and "right" so that a mirrored sample still
/// matches its expression.
pub fn mirror_expression(expr: &str) -> String {
    expr.split(' ')
        .map(|w| match w {
            "left" => "right",
            "right" => "left",
            "Left" => "Right",
            "Right" => "Left",
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn augmented(model: &VgNet, s: &LoadedSample, aug: Augmentation, seed: u64, tag: &str) -> Result<(PreparedInput, NormBox)> {
    let mut rng = named_rng(seed, tag);
    let flip = aug.flip && rng.random_bool(0.5);
    let (bright, contrast) = if aug.color_jitter > 0.0 {
        let j = aug.color_jitter;
        (rng.random_range(1.0 - j..1.0 + j), rng.random_range(1.0 - j..1.0 + j))
    } else {
        (1.0, 1.0)
    };
    let mut rgb = s.rgb.clone();
    let mut tir = s.tir.clone();
    let mut gt = s.gt;
    let mut expr = s.expression.clone();
    if flip {
        rgb = rgb.map(|i| i.flip_horizontal());
        tir = tir.map(|i| i.flip_horizontal());
        gt = NormBox { cx: 1.0 - gt.cx, ..gt };
        expr = mirror_expression(&expr);
    }
    if bright != 1.0 || contrast != 1.0 {
        rgb = rgb.map(|i| i.map(|_, v| (((v - 0.5) * contrast + 0.5) * bright).clamp(0.0, 1.0)));
    }
    let input = model.prepare(rgb.as_ref(), tir.as_ref(), &expr)?;
    Ok((input, gt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were retained, by validation accuracy.
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub frozen_checksum: String,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters, or the final ones without a val split.
    pub best: VgNet,
    pub last: VgNet,
    pub log: TrainLog,
}

/// Trains the trainable tensors of a fresh model on the train split.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<TrainOutcome> {
    let model = VgNet::new(model_cfg.clone())?;
    train_model(model, cfg, manifest)
}

/// Trains an already built model.
pub fn train_model(mut model: VgNet, cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mode = model.config().modality;
    let size = model.config().encoder.image_size;
    let train_recs: Vec<&GroundingRecord> = manifest.split(Split::Train).collect();
    if train_recs.is_empty() {
        return Err(Error::EmptyInput("manifest has no train records".into()));
    }
    let val_recs: Vec<&GroundingRecord> = manifest.split(Split::Val).collect();
    let train_data = load_samples(manifest, &train_recs, mode, size)?;
    let val_data = load_samples(manifest, &val_recs, mode, size)?;
    let frozen_checksum = model.encoder().checksum();

    let mut opt = AdamW::new(cfg.optimizer, model.trainable_parameters());
    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch).min(cfg.max_steps.unwrap_or(usize::MAX));
    let mut log = TrainLog {
        step_losses: Vec::with_capacity(total),
        epochs: Vec::new(),
        best_epoch: None,
        best_val_acc: None,
        frozen_checksum: frozen_checksum.clone(),
    };
    let mut best: Option<ParamStore> = None;
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        epoch += 1;
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut named_rng(cfg.seed, &format!("epoch.{epoch}")));
        let mut epoch_losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            step += 1;
            let results: Vec<Result<(f64, Vec<_>)>> = batch
                .par_iter()
                .map(|&i| {
                    let tag = format!("aug.{epoch}.{i}");
                    let (input, gt) = augmented(&model, &train_data[i], cfg.augment, cfg.seed, &tag)?;
                    model.loss_and_grads(&input, &gt, cfg.loss)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut sum: Vec<(crate::params::ParamId, crate::tensor::Matrix)> = Vec::new();
            for r in results {
                let (l, grads) = r?;
                loss += l * scale;
                if sum.is_empty() {
                    sum = grads;
                    continue;
                }
                for ((_, acc), (_, g)) in sum.iter_mut().zip(grads) {
                    acc.add_assign(&g);
                }
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: format!("loss is {loss} in epoch {epoch}"),
                });
            }
            for (_, g) in sum.iter_mut() {
                *g = g.scale(scale);
                if !g.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        reason: "non-finite gradient".into(),
                    });
                }
            }
            opt.step(model.trainable_parameters_mut(), &sum, cfg.learning_rate);
            log.step_losses.push(loss);
            epoch_losses.push(loss);
        }
        let last = step >= total;
        let val_acc = if !val_data.is_empty() && (epoch % cfg.eval_every_epochs == 0 || last) {
            let preds = predict_samples(&model, &val_data, &val_recs)?;
            let hits = preds.iter().filter(|p| is_hit(p.iou, ACC_THRESHOLD)).count();
            Some(hits as f64 / preds.len() as f64)
        } else {
            None
        };
        if let Some(acc) = val_acc {
            if log.best_val_acc.is_none_or(|b| acc > b) {
                log.best_val_acc = Some(acc);
                log.best_epoch = Some(epoch);
                best = Some(model.trainable_parameters().clone());
            }
        }
        let mean_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        log::info!("epoch {epoch}: {} steps, mean loss {mean_loss:.6}, val {val_acc:?}", epoch_losses.len());
        log.epochs.push(EpochRecord {
            epoch,
            steps: epoch_losses.len(),
            mean_loss,
            val_acc,
        });
    }
    if model.encoder().checksum() != frozen_checksum {
        return Err(Error::Numeric("frozen tower changed during training".into()));
    }
    let mut best_model = model.clone();
    if let Some(p) = best {
        best_model.load_trainable(&p)?;
    }
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        log,
    })
}

/// One line of the prediction dump. Boxes are pixel corners
/// `[x1, y1, x2, y2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub id: String,
    pub pred_bbox: [f64; 4],
    pub gt_bbox: [f64; 4],
    pub iou: f64,
}

fn corners(b: &PixelBox) -> [f64; 4] {
    [b.x(), b.y(), b.right(), b.bottom()]
}

/// Pairs a predicted normalized box with its record.
pub fn dump_entry(r: &GroundingRecord, pred: &NormBox) -> Result<PredictionDump> {
    let px = prediction_to_pixel(pred, r.dims)?;
    Ok(PredictionDump {
        id: r.id.clone(),
        pred_bbox: corners(&px),
        gt_bbox: corners(&r.bbox),
        iou: iou(&px, &r.bbox),
    })
}

fn predict_samples(model: &VgNet, samples: &[LoadedSample], records: &[&GroundingRecord]) -> Result<Vec<PredictionDump>> {
    samples
        .par_iter()
        .zip(records)
        .map(|(s, r)| {
            let input = model.prepare(s.rgb.as_ref(), s.tir.as_ref(), &s.expression)?;
            dump_entry(r, &model.predict(&input)?.bbox)
        })
        .collect()
}

/// Predictions for every val and test record, in manifest order.
pub fn predict_manifest(model: &VgNet, manifest: &DatasetManifest) -> Result<Vec<PredictionDump>> {
    predict_splits(model, manifest, &[Split::Val, Split::Test])
}

pub fn predict_splits(model: &VgNet, manifest: &DatasetManifest, splits: &[Split]) -> Result<Vec<PredictionDump>> {
    let recs: Vec<&GroundingRecord> = manifest
        .records
        .iter()
        .filter(|r| splits.contains(&r.split))
        .collect();
    let c = model.config();
    let samples = load_samples(manifest, &recs, c.modality, c.encoder.image_size)?;
    predict_samples(model, &samples, &recs)
}

/// Share of dumped predictions whose IoU clears the threshold.
pub fn hit_rate(preds: &[PredictionDump]) -> Option<f64> {
    let hits = preds.iter().filter(|p| is_hit(p.iou, ACC_THRESHOLD)).count();
    (!preds.is_empty()).then(|| hits as f64 / preds.len() as f64)
}

pub fn write_predictions(path: &Path, preds: &[PredictionDump]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionDump>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Count and hits of one split or attribute cell. Accuracy is absent for
/// empty cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: String,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

impl Cell {
    fn new(key: &str, count: usize, correct: usize) -> Self {
        Self {
            key: key.to_string(),
            count,
            correct,
            accuracy: (count > 0).then(|| correct as f64 / count as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisBreakdown {
    pub axis: Axis,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub label: String,
    pub modality: ModalityMode,
    pub use_ama: bool,
    pub use_lavs: bool,
    pub r_v: usize,
    pub r_t: usize,
    pub seed: u64,
    pub trainable_params: usize,
    pub frozen_checksum: String,
}

impl ReportMeta {
    pub fn for_model(label: &str, model: &VgNet) -> Self {
        let c = model.config();
        Self {
            label: label.to_string(),
            modality: c.modality,
            use_ama: c.use_ama,
            use_lavs: c.use_lavs(),
            r_v: c.ama.r_v,
            r_t: c.ama.r_t,
            seed: c.seed,
            trainable_params: model.trainable_parameters().num_scalars(),
            frozen_checksum: model.encoder().checksum(),
        }
    }
}

/// Split accuracies (val, test, testA, testB, testC) and per-axis cells
/// over the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub splits: Vec<Cell>,
    pub breakdowns: Vec<AxisBreakdown>,
}

pub const SPLIT_KEYS: [&str; 5] = ["val", "test", "testA", "testB", "testC"];

impl EvalReport {
    pub fn split(&self, key: &str) -> Option<&Cell> {
        self.splits.iter().find(|c| c.key == key)
    }

    pub fn breakdown(&self, axis: Axis) -> Option<&AxisBreakdown> {
        self.breakdowns.iter().find(|b| b.axis == axis)
    }

    pub fn num_cells(&self) -> usize {
        self.splits.len() + self.breakdowns.iter().map(|b| b.cells.len()).sum::<usize>()
    }
}

/// Builds the report from a prediction dump; every val and test record
/// must have exactly one entry.
pub fn report_from_predictions(
    manifest: &DatasetManifest,
    preds: &[PredictionDump],
    meta: ReportMeta,
) -> Result<EvalReport> {
    let mut hit: BTreeMap<&str, bool> = BTreeMap::new();
    for p in preds {
        if hit.insert(p.id.as_str(), is_hit(p.iou, ACC_THRESHOLD)).is_some() {
            return Err(Error::Record {
                id: p.id.clone(),
                reason: "duplicate prediction".into(),
            });
        }
    }
    let lookup = |id: &str| {
        hit.get(id).copied().ok_or_else(|| Error::Record {
            id: id.to_string(),
            reason: "no prediction for record".into(),
        })
    };
    let cell = |key: &str, ids: &mut dyn Iterator<Item = &str>| -> Result<Cell> {
        let (mut n, mut k) = (0, 0);
        for id in ids {
            n += 1;
            k += usize::from(lookup(id)?);
        }
        Ok(Cell::new(key, n, k))
    };

    let subsets = manifest.assign_eval_subsets();
    let mut splits = vec![cell("val", &mut manifest.split(Split::Val).map(|r| r.id.as_str()))?];
    for key in &SPLIT_KEYS[1..] {
        splits.push(cell(key, &mut subsets[*key].iter().map(String::as_str))?);
    }
    let mut breakdowns = Vec::new();
    for axis in Axis::ALL {
        let groups = group_records(manifest.split(Split::Test), axis);
        let cells = axis
            .codes()
            .into_iter()
            .map(|code| cell(code, &mut groups[code].iter().map(String::as_str)))
            .collect::<Result<Vec<_>>>()?;
        breakdowns.push(AxisBreakdown { axis, cells });
    }
    Ok(EvalReport {
        meta,
        splits,
        breakdowns,
    })
}

#[derive(Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<PredictionDump>,
}

pub fn evaluate(model: &VgNet, manifest: &DatasetManifest, label: &str) -> Result<Evaluation> {
    let predictions = predict_manifest(model, manifest)?;
    let report = report_from_predictions(manifest, &predictions, ReportMeta::for_model(label, model))?;
    Ok(Evaluation { report, predictions })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }

    /// Format implied by a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        Self::parse(ext)
    }
}

fn pct(acc: Option<f64>) -> String {
    match acc {
        Some(a) => format!("{:.2}", 100.0 * a),
        None => "—".to_string(),
    }
}

fn csv_acc(acc: Option<f64>) -> String {
    acc.map(|a| format!("{a}")).unwrap_or_default()
}

fn attr_label(axis: Axis, code: &str) -> String {
    use crate::dataset::{Illumination, OcclusionClass, SceneType, SizeClass, Weather};
    let label = match axis {
        Axis::Scene => SceneType::from_code(code).map(|v| v.label()),
        Axis::Weather => Weather::from_code(code).map(|v| v.label()),
        Axis::Illumination => Illumination::from_code(code).map(|v| v.label()),
        Axis::Size => SizeClass::from_code(code).map(|v| v.label()),
        Axis::Occlusion => OcclusionClass::from_code(code).map(|v| v.label()),
    };
    label.map(str::to_string).unwrap_or_else(|_| code.to_string())
}

fn split_table_header(out: &mut String, lead: &[&str]) {
    let mut cols: Vec<&str> = lead.to_vec();
    cols.extend(SPLIT_KEYS);
    let _ = writeln!(out, "| {} |", cols.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(cols.len()));
}

fn split_row(r: &EvalReport) -> String {
    SPLIT_KEYS
        .iter()
        .map(|k| pct(r.split(k).and_then(|c| c.accuracy)))
        .collect::<Vec<_>>()
        .join(" | ")
}

/// Renders a report; the output depends only on the report value.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => {
            let mut out = String::from("section,key,count,correct,accuracy\n");
            for c in &report.splits {
                let _ = writeln!(out, "split,{},{},{},{}", c.key, c.count, c.correct, csv_acc(c.accuracy));
            }
            for b in &report.breakdowns {
                for c in &b.cells {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        b.axis.name(),
                        c.key,
                        c.count,
                        c.correct,
                        csv_acc(c.accuracy)
                    );
                }
            }
            Ok(out)
        }
        ReportFormat::Markdown => {
            let m = &report.meta;
            let mut out = format!("# Acc@0.5: {}\n\n", m.label);
            split_table_header(&mut out, &["Model", "Modality"]);
            let _ = writeln!(out, "| {} | {} | {} |", m.label, m.modality, split_row(report));
            let counts: Vec<String> = report.splits.iter().map(|c| format!("{} {}", c.key, c.count)).collect();
            let _ = writeln!(out, "\nSamples: {}.", counts.join(", "));
            let _ = writeln!(
                out,
                "\nAMA: {} (r_v {}, r_t {}); LAVS: {}; seed {}; {} trainable parameters.",
                on_off(m.use_ama),
                m.r_v,
                m.r_t,
                on_off(m.use_lavs),
                m.seed,
                m.trainable_params
            );
            for b in &report.breakdowns {
                let _ = writeln!(out, "\n## Test split by {}\n", b.axis.name());
                let _ = writeln!(out, "| Code | Attribute | Count | Correct | Acc@0.5 |");
                let _ = writeln!(out, "|---|---|---|---|---|");
                for c in &b.cells {
                    let _ = writeln!(
                        out,
                        "| {} | {} | {} | {} | {} |",
                        c.key,
                        attr_label(b.axis, &c.key),
                        c.count,
                        c.correct,
                        pct(c.accuracy)
                    );
                }
            }
            Ok(out)
        }
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn write_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    write_file(path, emit_report(report, format)?.as_bytes())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.json";

/// Everything besides the trainable weights needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub frozen_checksum: String,
    pub trainable_checksum: String,
}

/// Writes `weights.bin` (trainable tensors only), `config.json` and, when
/// given, `train_log.json` into `dir`.
pub fn save_checkpoint(dir: &Path, model: &VgNet, train: &TrainConfig, log: Option<&TrainLog>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = model.trainable_parameters();
    params.save(&dir.join(WEIGHTS_FILE))?;
    let meta = CheckpointMeta {
        model: model.config().clone(),
        train: train.clone(),
        frozen_checksum: model.encoder().checksum(),
        trainable_checksum: params.checksum(),
    };
    write_file(&dir.join(CONFIG_FILE), (serde_json::to_string_pretty(&meta)? + "\n").as_bytes())?;
    if let Some(log) = log {
        write_file(&dir.join(LOG_FILE), (serde_json::to_string_pretty(log)? + "\n").as_bytes())?;
    }
    Ok(())
}

/// Rebuilds the frozen towers from the stored config, checks them against
/// the recorded checksum and loads the trainable tensors.
pub fn load_checkpoint(dir: &Path) -> Result<(VgNet, CheckpointMeta)> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let mut model = VgNet::new(meta.model.clone())?;
    if model.encoder().checksum() != meta.frozen_checksum {
        return Err(Error::Checkpoint(format!(
            "frozen tower checksum {} does not match recorded {}",
            model.encoder().checksum(),
            meta.frozen_checksum
        )));
    }
    let params = ParamStore::load(&dir.join(WEIGHTS_FILE))?;
    if params.checksum() != meta.trainable_checksum {
        return Err(Error::Checkpoint("weights.bin does not match config.json".into()));
    }
    model
        .load_trainable(&params)
        .map_err(|e| Error::Checkpoint(format!("checkpoint does not fit the model config: {e}")))?;
    Ok((model, meta))
}

/// One configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSetting {
    pub label: &'static str,
    pub config: ModelConfig,
}

/// Valid AMA/LAVS rows for each modality: the baseline, AMA alone, and
/// AMA with LAVS where the modality allows it.
pub fn ablation_settings(base: &ModelConfig, modes: &[ModalityMode]) -> Vec<AblationSetting> {
    let mut out = Vec::new();
    for &modality in modes {
        let rows: &[(&str, bool, bool)] = if modality == ModalityMode::Rgbt {
            &[("Baseline", false, false), ("+AMA", true, false), ("+AMA+LAVS", true, true)]
        } else {
            &[("Baseline", false, false), ("+AMA", true, false)]
        };
        for &(label, ama, lavs) in rows {
            let mut config = base.clone();
            config.modality = modality;
            config.use_ama = ama;
            config.lavs.enabled = lavs;
            out.push(AblationSetting { label, config });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub checkpoint: Option<PathBuf>,
    pub report: EvalReport,
}

/// Trains and evaluates every valid setting in order. Checkpoints go to
/// `out_dir/<modality>-<label>` when a directory is given.
pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    manifest: &DatasetManifest,
    modes: &[ModalityMode],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for s in ablation_settings(base, modes) {
        s.config.validate()?;
        log::info!("ablation: {} {}", s.config.modality, s.label);
        let outcome = train(&s.config, train_cfg, manifest)?;
        let ckpt = out_dir.map(|d| d.join(row_slug(s.config.modality, s.label)));
        if let Some(dir) = &ckpt {
            save_checkpoint(dir, &outcome.best, train_cfg, Some(&outcome.log))?;
        }
        let eval = evaluate(&outcome.best, manifest, s.label)?;
        rows.push(AblationRow {
            label: s.label.to_string(),
            checkpoint: ckpt,
            report: eval.report,
        });
    }
    Ok(rows)
}

pub fn row_slug(modality: ModalityMode, label: &str) -> String {
    let l = match label {
        "Baseline" => "baseline",
        "+AMA" => "ama",
        "+AMA+LAVS" => "ama-lavs",
        other => other,
    };
    format!("{}-{l}", modality.name().to_ascii_lowercase())
}

pub fn emit_ablation(rows: &[AblationRow], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(rows)? + "\n"),
        ReportFormat::Csv => {
            let mut out = String::from("setting,modality,split,count,correct,accuracy\n");
            for r in rows {
                for c in &r.report.splits {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        r.label,
                        r.report.meta.modality,
                        c.key,
                        c.count,
                        c.correct,
                        csv_acc(c.accuracy)
                    );
                }
            }
            Ok(out)
        }
        ReportFormat::Markdown => {
            let mut out = String::from("# Ablation of AMA and LAVS\n\n");
            split_table_header(&mut out, &["Setting", "Modality", "AMA", "LAVS"]);
            for r in rows {
                let m = &r.report.meta;
                let mark = |b| if b { "✓" } else { "" };
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} |",
                    r.label,
                    m.modality,
                    mark(m.use_ama),
                    mark(m.use_lavs),
                    split_row(&r.report)
                );
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::record;
    use crate::dataset::{Illumination, SizeClass};

    fn meta() -> ReportMeta {
        ReportMeta {
            label: "m".into(),
            modality: ModalityMode::Rgbt,
            use_ama: true,
            use_lavs: true,
            r_v: 8,
            r_t: 32,
            seed: 0,
            trainable_params: 10,
            frozen_checksum: "x".into(),
        }
    }

    fn manifest() -> DatasetManifest {
        let recs = vec![
            record("a", SizeClass::Normal, Illumination::Normal, Split::Test),
            record("b", SizeClass::Small, Illumination::Weak, Split::Test),
            record("c", SizeClass::Normal, Illumination::Strong, Split::Val),
            record("d", SizeClass::Normal, Illumination::Normal, Split::Train),
        ];
        DatasetManifest::new(recs).unwrap()
    }

    fn oracle_dump(m: &DatasetManifest) -> Vec<PredictionDump> {
        m.records
            .iter()
            .filter(|r| r.split != Split::Train)
            .map(|r| dump_entry(r, &to_norm(&r.bbox, r.dims).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn perfect_predictor_scores_one_everywhere_with_counts() {
        let m = manifest();
        let r = report_from_predictions(&m, &oracle_dump(&m), meta()).unwrap();
        for c in &r.splits {
            if c.count > 0 {
                assert_eq!(c.accuracy, Some(1.0), "{}", c.key);
            }
        }
        assert_eq!(r.split("test").unwrap().count, 2);
        assert_eq!(r.split("testA").unwrap().count, 1);
        assert_eq!(r.split("testB").unwrap().count, 1);
        assert_eq!(r.split("testC").unwrap().count, 1);
        for b in &r.breakdowns {
            assert_eq!(b.cells.iter().map(|c| c.count).sum::<usize>(), 2);
        }
    }

    #[test]
    fn empty_subset_is_undefined_not_zero() {
        let recs = vec![record("a", SizeClass::Normal, Illumination::Normal, Split::Test)];
        let m = DatasetManifest::new(recs).unwrap();
        let r = report_from_predictions(&m, &oracle_dump(&m), meta()).unwrap();
        let b = r.split("testB").unwrap();
        assert_eq!((b.count, b.accuracy), (0, None));
        assert!(emit_report(&r, ReportFormat::Json).unwrap().contains("\"accuracy\": null"));
        assert!(emit_report(&r, ReportFormat::Markdown).unwrap().contains("| —"));
        assert!(emit_report(&r, ReportFormat::Csv).unwrap().contains("split,testB,0,0,\n"));
    }

    #[test]
    fn missing_prediction_is_an_error() {
        let m = manifest();
        let mut d = oracle_dump(&m);
        d.pop();
        assert!(report_from_predictions(&m, &d, meta()).is_err());
    }

    #[test]
    fn report_formats_are_stable() {
        let m = manifest();
        let r = report_from_predictions(&m, &oracle_dump(&m), meta()).unwrap();
        for f in [ReportFormat::Markdown, ReportFormat::Csv, ReportFormat::Json] {
            assert_eq!(emit_report(&r, f).unwrap(), emit_report(&r, f).unwrap());
        }
        let csv = emit_report(&r, ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), r.num_cells() + 1);
        let json = emit_report(&r, ReportFormat::Json).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(emit_report(&back, ReportFormat::Json).unwrap(), json);
        assert!(matches!(ReportFormat::parse("xml"), Err(Error::UnknownFormat(_))));
    }

    #[test]
    fn ablation_grid_has_only_valid_rows() {
        let s = ablation_settings(&ModelConfig::toy(), &[ModalityMode::Rgbt]);
        let labels: Vec<_> = s.iter().map(|s| s.label).collect();
        assert_eq!(labels, ["Baseline", "+AMA", "+AMA+LAVS"]);
        assert!(s.iter().all(|s| s.config.validate().is_ok()));
        let s = ablation_settings(&ModelConfig::toy(), &ModalityMode::ALL);
        assert_eq!(s.len(), 7);
        assert!(s.iter().all(|s| s.config.validate().is_ok()));
    }

    #[test]
    fn mirrored_expressions_swap_sides() {
        assert_eq!(mirror_expression("the red box left of the tree"), "the red box right of the tree");
        assert_eq!(mirror_expression("the car"), "the car");
    }
}
