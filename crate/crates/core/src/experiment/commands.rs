use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use log::{info, warn};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::manifest::{Artifacts, DatasetSource, RunManifest, Seeds, SplitRef, MANIFEST_FILE, SPLIT_FILE};
use crate::dataset::{
    generate_synthetic, load_and_resize, normalize, scan_dataset, split_dataset, DatasetIndex, DiskSource, ImageBatch,
    ImageSource, SplitAssignment, SplitFile, Subset, DEFAULT_RATIOS, DEFAULT_SIDE,
};
use crate::error::{Error, Result};
use crate::eval::{confusion_matrix, render_confusion, MetricsReport};
use crate::explain::{
    attribute, render_overlay, render_panel, select_background, verify_additivity_with_floor, AdditivityReport,
    GAP_FLOOR,
};
use crate::model::{
    argmax_rows, assemble_model, build_backbone, Architecture, BackboneSpec, HeadSpec, ModelHandle, Preprocessing,
    Weights,
};
use crate::train::{self, TrainConfig, TrainingHistory};

pub const INITIAL_HEAD: &str = "head_init.npz";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HISTORY_JSON: &str = "history.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const CONFUSION_PNG: &str = "confusion.png";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const EXPLAIN_DIR: &str = "explain";
pub const SYNTHETIC_DIR: &str = "data";

/// Images pushed through the model at once during evaluation.
const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum PrepareSource {
    Directory(PathBuf),
    Synthetic { classes: usize, per_class: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareOptions {
    pub source: PrepareSource,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub side: usize,
    pub runs_dir: PathBuf,
    pub run_id: Option<String>,
}

impl PrepareOptions {
    pub fn new(source: PrepareSource, runs_dir: impl Into<PathBuf>) -> Self {
        Self {
            source,
            ratios: DEFAULT_RATIOS,
            seed: 0,
            side: DEFAULT_SIDE,
            runs_dir: runs_dir.into(),
            run_id: None,
        }
    }
}

fn default_run_id() -> String {
    Utc::now().format("run-%Y%m%d-%H%M%S-%3f").to_string()
}

/// Indexes (or generates) the dataset, splits it and writes the split plus a
/// manifest stub into a fresh run directory, which is returned.
pub fn prepare(opts: &PrepareOptions) -> Result<PathBuf> {
    let run_id = opts.run_id.clone().unwrap_or_else(default_run_id);
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
        return Err(Error::Config(format!("invalid run id {run_id:?}")));
    }
    if opts.side == 0 {
        return Err(Error::Config("image side must be positive".into()));
    }
    crate::dataset::check_ratios(opts.ratios)?;
    let run_dir = opts.runs_dir.join(&run_id);
    if RunManifest::path(&run_dir).exists() {
        return Err(Error::Config(format!(
            "run directory {} already holds a run",
            run_dir.display()
        )));
    }
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

    let mut seeds = Seeds {
        split: opts.seed,
        ..Seeds::default()
    };
    let (index, dataset) = match &opts.source {
        PrepareSource::Directory(root) => {
            let root = fs::canonicalize(root).map_err(|e| Error::io(root, e))?;
            (scan_dataset(&root)?, DatasetSource::Directory { root })
        }
        &PrepareSource::Synthetic { classes, per_class } => {
            let data = generate_synthetic(classes, per_class, opts.side, opts.seed)?;
            let index = data.export(&run_dir.join(SYNTHETIC_DIR))?;
            seeds.synthetic = Some(opts.seed);
            let source = DatasetSource::Synthetic {
                classes,
                per_class,
                side: opts.side,
                seed: opts.seed,
                root: SYNTHETIC_DIR.into(),
            };
            (index, source)
        }
    };
    let split = split_dataset(&index, opts.ratios, opts.seed)?;
    SplitFile::new(&index, &split).save(&run_dir.join(SPLIT_FILE))?;
    info!(
        "{}: {} images in {} classes, split {}/{}/{}",
        run_id,
        index.len(),
        index.class_count(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    let now = Utc::now();
    let mut manifest = RunManifest {
        run_id,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        created: now,
        updated: now,
        dataset,
        split: SplitRef {
            path: SPLIT_FILE.into(),
            seed: opts.seed,
            ratios: opts.ratios,
            counts: [split.train.len(), split.val.len(), split.test.len()],
        },
        image_side: opts.side,
        backbone: None,
        head: None,
        train: None,
        seeds,
        artifacts: Artifacts {
            split: Some(SPLIT_FILE.into()),
            ..Artifacts::default()
        },
    };
    manifest.save(&run_dir)?;
    Ok(run_dir)
}

/// Accepts either a run directory or the path of its manifest.
pub fn resolve_run_dir(path: &Path) -> PathBuf {
    if path.file_name().is_some_and(|n| n == MANIFEST_FILE) && path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

/// A loaded run: manifest, the images on disk and their split.
pub struct RunData {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub source: DiskSource,
    pub split: SplitAssignment,
}

impl RunData {
    pub fn open(run_dir: &Path) -> Result<Self> {
        let dir = resolve_run_dir(run_dir);
        let manifest = RunManifest::load(&dir)?;
        let file = SplitFile::load(&dir.join(&manifest.split.path))?;
        let (index, split) = file.resolve(&manifest.dataset_root(&dir))?;
        Ok(Self {
            source: DiskSource {
                index,
                side: manifest.image_side,
            },
            dir,
            manifest,
            split,
        })
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.source.index
    }

    pub fn class_names(&self) -> &[String] {
        &self.source.index.class_names
    }

    fn load_model(&self) -> Result<ModelHandle> {
        let rel = self.manifest.artifacts.checkpoint.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "run {} has no checkpoint; run `train` first",
                self.manifest.run_id
            ))
        })?;
        let (model, names) = ModelHandle::load_checkpoint(&self.dir.join(rel))?;
        if names != self.class_names() {
            return Err(Error::Data(format!(
                "checkpoint classes {:?} do not match the split's {:?}",
                names,
                self.class_names()
            )));
        }
        Ok(model)
    }
}

/// How backbone weights are obtained for `train`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightsChoice {
    /// ImageNet weights for the four ImageNet backbones, random for `tiny`.
    Default,
    Random,
    Imagenet(Option<PathBuf>),
}

impl std::str::FromStr for WeightsChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "default" => WeightsChoice::Default,
            "random" => WeightsChoice::Random,
            "imagenet" => WeightsChoice::Imagenet(None),
            path => WeightsChoice::Imagenet(Some(PathBuf::from(path))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub architecture: Architecture,
    pub weights: WeightsChoice,
    pub config: TrainConfig,
}

impl TrainOptions {
    pub fn backbone_spec(&self, side: usize) -> BackboneSpec {
        let weights = match (&self.weights, self.architecture) {
            (WeightsChoice::Random, _) | (WeightsChoice::Default, Architecture::Tiny) => {
                Weights::Random { seed: self.config.seed }
            }
            (WeightsChoice::Default, _) => Weights::Imagenet { path: None },
            (WeightsChoice::Imagenet(path), _) => Weights::Imagenet { path: path.clone() },
        };
        let preprocessing = match weights {
            Weights::Imagenet { .. } => Preprocessing::Canonical,
            Weights::Random { .. } => Preprocessing::Unit,
        };
        BackboneSpec {
            input_shape: [side, side, 3],
            preprocessing,
            ..BackboneSpec::new(self.architecture, weights)
        }
    }
}

/// Builds the model, trains the head on the train split (validating on the
/// val split) and records checkpoint and history in the manifest.
pub fn train_run(run_dir: &Path, opts: &TrainOptions) -> Result<TrainingHistory> {
    let mut run = RunData::open(run_dir)?;
    let cfg = &opts.config;
    cfg.validate()?;
    let backbone_spec = opts.backbone_spec(run.manifest.image_side);
    let head_spec = HeadSpec::new(run.index().class_count()).with_dropout(cfg.dropout_rate);
    let mut model = assemble_model(build_backbone(&backbone_spec)?, head_spec.clone(), cfg.seed)?;
    info!(
        "{}: {} backbone, {} trainable / {} non-trainable parameters",
        run.manifest.run_id,
        opts.architecture,
        model.trainable_param_count(),
        model.nontrainable_param_count()
    );
    model.head().to_params().save_npz(&run.dir.join(INITIAL_HEAD))?;

    let train_set = Subset::new(&run.source, &run.split.train);
    let val_set = Subset::new(&run.source, &run.split.val);
    let val = (!run.split.val.is_empty()).then_some(&val_set);
    let history = train::train(&mut model, &train_set, val, cfg)?;
    if let Some(last) = history.last() {
        info!(
            "{}: epoch {} train accuracy {:.4}, loss {:.4}",
            run.manifest.run_id, last.epoch, last.train_accuracy, last.train_loss
        );
    }

    model.save_checkpoint(&run.dir.join(CHECKPOINT_DIR), run.class_names())?;
    history.save_json(&run.dir.join(HISTORY_JSON))?;
    history.save_csv(&run.dir.join(HISTORY_CSV))?;

    let m = &mut run.manifest;
    m.backbone = Some(backbone_spec);
    m.head = Some(head_spec);
    m.train = Some(cfg.clone());
    m.seeds.training = Some(cfg.seed);
    // anything downstream of the old checkpoint is stale now
    m.artifacts = Artifacts {
        split: m.artifacts.split.take(),
        initial_head: Some(INITIAL_HEAD.into()),
        checkpoint: Some(CHECKPOINT_DIR.into()),
        history: Some(HISTORY_JSON.into()),
        history_csv: Some(HISTORY_CSV.into()),
        ..Artifacts::default()
    };
    m.seeds.explain = None;
    m.save(&run.dir)?;
    Ok(history)
}

/// One line of `predictions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: PathBuf,
    pub y_true: usize,
    pub y_pred: usize,
    pub confidence: f64,
}

pub fn predict_source<S: ImageSource + ?Sized>(model: &ModelHandle, source: &S) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::with_capacity(source.len());
    let all: Vec<usize> = (0..source.len()).collect();
    for chunk in all.chunks(PREDICT_CHUNK) {
        let batch = ImageBatch::gather(source, chunk)?;
        let probs = model.predict_proba(batch.data.view())?;
        for ((row, label), pred) in probs.rows().into_iter().zip(&batch.labels).zip(argmax_rows(&probs)) {
            out.push((*label, pred, row[pred]));
        }
    }
    Ok(out)
}

pub fn write_predictions(rows: &[Prediction], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e)))
        .collect()
}

/// Scores the checkpoint on the test split and writes metrics, predictions
/// and the confusion matrix.
pub fn evaluate_run(run_dir: &Path) -> Result<MetricsReport> {
    let mut run = RunData::open(run_dir)?;
    let model = run.load_model()?;
    if run.split.test.is_empty() {
        return Err(Error::Data("the test split is empty".into()));
    }
    let test = Subset::new(&run.source, &run.split.test);
    let scored = predict_source(&model, &test)?;
    let rows: Vec<Prediction> = run
        .split
        .test
        .iter()
        .zip(&scored)
        .map(|(&i, &(y_true, y_pred, confidence))| Prediction {
            path: run.index().samples[i].path.clone(),
            y_true,
            y_pred,
            confidence,
        })
        .collect();
    let y_true: Vec<usize> = rows.iter().map(|r| r.y_true).collect();
    let y_pred: Vec<usize> = rows.iter().map(|r| r.y_pred).collect();
    let cm = confusion_matrix(&y_true, &y_pred, model.classes())?.with_names(run.class_names())?;
    let report = MetricsReport::from_confusion(&cm);

    report.save(&run.dir.join(METRICS_JSON))?;
    write_predictions(&rows, &run.dir.join(PREDICTIONS_CSV))?;
    render_confusion(&cm, &run.dir.join(CONFUSION_PNG), &run.dir.join(CONFUSION_CSV))?;
    info!(
        "{}: test accuracy {:.4} on {} images",
        run.manifest.run_id, report.accuracy, report.samples
    );

    let a = &mut run.manifest.artifacts;
    a.metrics = Some(METRICS_JSON.into());
    a.predictions = Some(PREDICTIONS_CSV.into());
    a.confusion_png = Some(CONFUSION_PNG.into());
    a.confusion_csv = Some(CONFUSION_CSV.into());
    run.manifest.save(&run.dir)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExplainTarget {
    /// Position within the test split.
    TestIndex(usize),
    Image(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSelection {
    All,
    One(usize),
}

impl std::str::FromStr for ClassSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(ClassSelection::All);
        }
        s.parse()
            .map(ClassSelection::One)
            .map_err(|_| Error::Config(format!("--classes expects `all` or a class index, got {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainOptions {
    pub target: ExplainTarget,
    pub classes: ClassSelection,
    pub n_samples: usize,
    /// Background images drawn from the train split; `None` takes up to
    /// `DEFAULT_BACKGROUND`.
    pub background: Option<usize>,
    pub seed: u64,
    /// Relative additivity tolerance.
    pub tolerance: f64,
    /// Smallest gap the tolerance is scaled by.
    pub gap_floor: f64,
}

impl ExplainOptions {
    pub fn new(target: ExplainTarget) -> Self {
        Self {
            target,
            classes: ClassSelection::All,
            n_samples: crate::explain::DEFAULT_SAMPLES,
            background: None,
            seed: 0,
            tolerance: 0.01,
            gap_floor: GAP_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResidual {
    pub class_index: usize,
    pub class_name: String,
    pub base_value: f64,
    pub explained_output: f64,
    #[serde(flatten)]
    pub additivity: AdditivityReport,
    pub attribution: PathBuf,
    pub overlay: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainOutcome {
    /// Relative to the run directory.
    pub dir: PathBuf,
    pub target: String,
    pub predicted: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub background: Vec<usize>,
    pub classes: Vec<ClassResidual>,
    pub panel: PathBuf,
}

impl ExplainOutcome {
    pub fn all_passed(&self) -> bool {
        self.classes.iter().all(|c| c.additivity.passed)
    }
}

pub const RESIDUALS_JSON: &str = "residuals.json";
pub const PANEL_PNG: &str = "panel.png";
/// Upscaling of attribution overlays.
const OVERLAY_SCALE: u32 = 4;

/// Attributes the chosen classes at one image and writes arrays, sidecars,
/// overlays, a per-class panel and a residual report.
pub fn explain_run(run_dir: &Path, opts: &ExplainOptions) -> Result<ExplainOutcome> {
    let mut run = RunData::open(run_dir)?;
    let model = run.load_model()?;
    let k = model.classes();
    let (x, stem): (Array3<f64>, String) = match &opts.target {
        &ExplainTarget::TestIndex(i) => {
            let &global = run.split.test.get(i).ok_or_else(|| {
                Error::Config(format!(
                    "test index {i} out of range for {} test images",
                    run.split.test.len()
                ))
            })?;
            (run.source.image(global)?, format!("test_{i:05}"))
        }
        ExplainTarget::Image(path) => {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            (
                normalize(&load_and_resize(path, run.manifest.image_side)?)?,
                format!("image_{stem}"),
            )
        }
    };
    let classes: Vec<usize> = match opts.classes {
        ClassSelection::All => (0..k).collect(),
        ClassSelection::One(c) if c < k => vec![c],
        ClassSelection::One(c) => return Err(Error::Config(format!("class {c} out of range for {k} classes"))),
    };
    for (name, v) in [("tolerance", opts.tolerance), ("gap floor", opts.gap_floor)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Config(format!("{name} {v} must be nonnegative")));
        }
    }

    let train_set = Subset::new(&run.source, &run.split.train);
    let m = opts
        .background
        .unwrap_or_else(|| crate::explain::DEFAULT_BACKGROUND.min(train_set.len()));
    let background = select_background(&train_set, m, opts.seed)?;
    let predicted = model.predict(x.view().insert_axis(ndarray::Axis(0)))?[0];

    let rel_dir = Path::new(EXPLAIN_DIR).join(&stem);
    let out_dir = run.dir.join(&rel_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut maps = Vec::with_capacity(classes.len());
    let mut residuals = Vec::with_capacity(classes.len());
    let names = run.class_names().to_vec();
    for &c in &classes {
        let attr = attribute(&model, x.view(), &background, c, opts.n_samples, opts.seed)?;
        let additivity = verify_additivity_with_floor(&attr, opts.tolerance, opts.gap_floor);
        if !additivity.passed {
            warn!(
                "class {}: additivity residual {:.3e} exceeds tolerance {:.3e}",
                names[c], additivity.residual, additivity.tolerance
            );
        }
        let base = format!("class_{:02}", c);
        let npz = rel_dir.join(format!("{base}.npz"));
        let png = rel_dir.join(format!("{base}.png"));
        attr.save(&run.dir.join(&npz), &run.dir.join(rel_dir.join(format!("{base}.json"))))?;
        render_overlay(x.view(), &attr, &run.dir.join(&png), OVERLAY_SCALE)?;
        residuals.push(ClassResidual {
            class_index: c,
            class_name: names[c].clone(),
            base_value: attr.base_value,
            explained_output: attr.explained_output,
            additivity,
            attribution: npz,
            overlay: png,
        });
        maps.push(attr);
    }
    let panel = rel_dir.join(PANEL_PNG);
    render_panel(x.view(), &maps, &run.dir.join(&panel), OVERLAY_SCALE)?;

    let outcome = ExplainOutcome {
        dir: rel_dir.clone(),
        target: stem,
        predicted,
        seed: opts.seed,
        n_samples: opts.n_samples,
        background: background.indices.clone(),
        classes: residuals,
        panel: panel.clone(),
    };
    let report_path = out_dir.join(RESIDUALS_JSON);
    let json = serde_json::to_string_pretty(&outcome).map_err(|e| Error::format(&report_path, e))?;
    fs::write(&report_path, json + "\n").map_err(|e| Error::io(&report_path, e))?;

    let a = &mut run.manifest.artifacts;
    let mut listed: BTreeSet<PathBuf> = a.attributions.drain(..).collect();
    for c in &outcome.classes {
        listed.insert(c.attribution.clone());
        listed.insert(c.overlay.clone());
    }
    listed.insert(panel);
    listed.insert(rel_dir.join(RESIDUALS_JSON));
    a.attributions = listed.into_iter().collect();
    run.manifest.seeds.explain = Some(opts.seed);
    run.manifest.save(&run.dir)?;
    Ok(outcome)
}
