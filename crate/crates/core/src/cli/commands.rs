use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{env_seed, load_dataset, parse_with_seed, DataConfig, HasModel, RunConfig};
use super::render::annotate;
use crate::checkpoint::Checkpoint;
use crate::data::{
    build_augmented_dataset, generate_synthetic_dataset, image_to_tensor, letterbox, load_samples,
    DatasetManifest, Sample, CLASS_NAMES, DEFAULT_STRENGTHS,
};
use crate::detector::{Model, ModelConfig};
use crate::error::{MarsError, Result};
use crate::evaluation::{
    evaluate_detections, evaluate_samples, oracle_detections, predict, run_ablation, table_variants,
    variant_from_label, AblationData, AblationSpec, DatasetMode, DomainMode, EvalConfig, EvalOutput,
    ImageEval, ResultsTable, RunCache, TableRow,
};
use crate::training::{fit, Adam, EpochRecord, History, TrainConfig, TrainObserver};

pub const LOCK_FILE: &str = ".mars.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<OutputLock> {
        fs::create_dir_all(dir).map_err(|e| MarsError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| MarsError::io(&path, e))?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(OutputLock { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| MarsError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it)?);
        text.push('\n');
    }
    write_file(path, text)
}

pub fn class_name(cfg: &ModelConfig, class_id: usize) -> String {
    if cfg.num_classes == CLASS_NAMES.len() {
        CLASS_NAMES[class_id].to_string()
    } else {
        format!("class{class_id}")
    }
}

struct TrainLogger<'a> {
    out_dir: &'a Path,
    history: File,
    history_path: PathBuf,
    final_epoch: usize,
    val: &'a [Sample],
    classes: &'a [String],
    eval: &'a EvalConfig,
}

impl TrainObserver for TrainLogger<'_> {
    fn epoch_end(&mut self, record: &EpochRecord, _model: &Model) -> Result<()> {
        log::info!("epoch {} loss {:.5}", record.epoch, record.loss.total);
        writeln!(self.history, "{}", serde_json::to_string(record)?)
            .map_err(|e| MarsError::io(&self.history_path, e))
    }

    fn checkpoint(&mut self, epoch: usize, model: &Model, optimizer: &Adam) -> Result<()> {
        let name = if epoch == self.final_epoch {
            "model.ckpt".to_string()
        } else {
            format!("epoch_{epoch:04}.ckpt")
        };
        Checkpoint::from_model(model, Some((epoch, optimizer))).save(&self.out_dir.join(name))
    }

    fn evaluate(&mut self, model: &Model) -> Result<Option<f64>> {
        Ok(Some(
            evaluate_samples(model, self.val, self.classes, self.eval)?
                .result
                .map,
        ))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub history: History,
}

/// Train from a run config. Writes `model.ckpt`, `history.jsonl` and
/// `resolved_config.toml` to the output directory.
pub fn cmd_train(config_path: &Path) -> Result<TrainOutcome> {
    let cfg = RunConfig::load(config_path)?;
    let out = cfg.output_dir.clone();
    let _lock = OutputLock::acquire(&out)?;
    write_file(&out.join("resolved_config.toml"), cfg.to_toml())?;
    let (train_m, val_m) = cfg.data.load(cfg.seed)?;
    if train_m.classes.len() != cfg.model.num_classes {
        return Err(MarsError::config(format!(
            "model.num_classes is {} but the dataset lists {} classes",
            cfg.model.num_classes,
            train_m.classes.len()
        )));
    }
    let size = cfg.model.input_size as u32;
    let train = load_samples(&train_m, size)?;
    let val = load_samples(&val_m, size)?;
    let mut model = Model::build(&cfg.model, cfg.seed)?;
    let mut opt = Adam::new(cfg.train.learning_rate);
    let history_path = out.join("history.jsonl");
    let mut logger = TrainLogger {
        out_dir: &out,
        history: File::create(&history_path).map_err(|e| MarsError::io(&history_path, e))?,
        history_path: history_path.clone(),
        final_epoch: cfg.train.epochs,
        val: &val,
        classes: &val_m.classes,
        eval: &cfg.eval,
    };
    let history = fit(&mut model, &train, &cfg.train, &mut opt, &mut logger)?;
    Ok(TrainOutcome {
        checkpoint: out.join("model.ckpt"),
        output_dir: out,
        history,
    })
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    /// Required unless `oracle` is set.
    pub checkpoint: Option<PathBuf>,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Replay the ground truth as detections instead of running a model.
    pub oracle: bool,
    /// Letterbox size in oracle mode.
    pub input_size: usize,
    pub eval: EvalConfig,
}

fn single_row_table(label: String, out: &EvalOutput) -> ResultsTable {
    let r = &out.result;
    let mut v = [0.0; 6];
    for (i, ap) in r.per_class_ap.iter().take(5).enumerate() {
        v[i] = *ap;
    }
    v[5] = r.map;
    ResultsTable {
        title: "Evaluation".into(),
        ap_mode: r.ap_mode,
        iou_threshold: r.iou_threshold,
        domain_training: None,
        validation: None,
        rows: vec![TableRow {
            label,
            values: Some(v),
            error: None,
        }],
    }
}

/// Evaluate a checkpoint (or the ground-truth oracle) on a dataset. Writes
/// `eval.csv`, `eval.md`, `eval.json` and `detections.jsonl`.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutput> {
    let v = args.eval.violations();
    if !v.is_empty() {
        return Err(MarsError::Config(v));
    }
    let manifest = load_dataset(&args.dataset)?;
    let (out, label) = if args.oracle {
        let samples = load_samples(&manifest, args.input_size as u32)?;
        let dets = oracle_detections(&samples);
        let images: Vec<ImageEval<'_>> = samples
            .iter()
            .zip(&dets)
            .map(|(s, d)| ImageEval {
                image_id: &s.id,
                detections: d,
                ground_truth: &s.objects,
            })
            .collect();
        (
            evaluate_detections(&images, &manifest.classes, &args.eval)?,
            "Oracle (ground truth)".to_string(),
        )
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| MarsError::config("eval needs --checkpoint unless --oracle is given"))?;
        let model = Checkpoint::load(path)?.to_model()?;
        if manifest.classes.len() != model.config().num_classes {
            return Err(MarsError::Data(format!(
                "class list mismatch: checkpoint predicts {} classes, dataset lists {:?}",
                model.config().num_classes,
                manifest.classes
            )));
        }
        let samples = load_samples(&manifest, model.config().input_size as u32)?;
        let label = model.config().variant_label();
        (
            evaluate_samples(&model, &samples, &manifest.classes, &args.eval)?,
            label,
        )
    };
    let _lock = OutputLock::acquire(&args.out_dir)?;
    let table = single_row_table(label, &out);
    write_file(&args.out_dir.join("eval.csv"), table.to_csv())?;
    write_file(&args.out_dir.join("eval.md"), table.to_markdown())?;
    write_file(
        &args.out_dir.join("eval.json"),
        serde_json::to_string_pretty(&out.result)? + "\n",
    )?;
    write_jsonl(&args.out_dir.join("detections.jsonl"), &out.records)?;
    Ok(out)
}

/// One detection in original-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub class: String,
    pub confidence: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone)]
pub struct DetectArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    /// Defaults to the image's directory.
    pub out_dir: Option<PathBuf>,
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
}

#[derive(Debug)]
pub struct DetectOutcome {
    pub detections: Vec<DetectionEntry>,
    pub rendered: PathBuf,
    pub list: PathBuf,
}

/// Detect on one image. Writes `<stem>.detected.png` with the boxes drawn
/// and `<stem>.detections.jsonl` with one line per box.
pub fn cmd_detect(args: &DetectArgs) -> Result<DetectOutcome> {
    let model = Checkpoint::load(&args.checkpoint)?.to_model()?;
    let img = image::open(&args.image)
        .map_err(|e| MarsError::Image {
            path: args.image.clone(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let cfg = model.config();
    let (canvas, t) = letterbox(&img, cfg.input_size as u32)?;
    let batch = image_to_tensor(&canvas).insert_axis(ndarray::Axis(0)).into_dyn();
    let eval = EvalConfig {
        conf_threshold: args.conf_threshold,
        nms_iou_threshold: args.nms_iou_threshold,
        ..Default::default()
    };
    let v = eval.violations();
    if !v.is_empty() {
        return Err(MarsError::Config(v));
    }
    let dets = predict(&model, &batch, &eval)?.remove(0);
    let (w, h) = img.dimensions();
    let mut rendered = img.clone();
    let mut entries = Vec::with_capacity(dets.len());
    for d in &dets {
        let b = t.inverse_box(&d.bbox).clip(w as f64, h as f64);
        let class = class_name(cfg, d.class_id);
        annotate(
            &mut rendered,
            &b,
            d.class_id,
            &format!("{class} {:.2}", d.confidence),
        );
        entries.push(DetectionEntry {
            class,
            confidence: d.confidence,
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        });
    }
    let out_dir = match &args.out_dir {
        Some(d) => d.clone(),
        None => args.image.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&out_dir).map_err(|e| MarsError::io(&out_dir, e))?;
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let png = out_dir.join(format!("{stem}.detected.png"));
    rendered.save(&png).map_err(|e| MarsError::Image {
        path: png.clone(),
        message: e.to_string(),
    })?;
    let list = out_dir.join(format!("{stem}.detections.jsonl"));
    write_jsonl(&list, &entries)?;
    Ok(DetectOutcome {
        detections: entries,
        rendered: png,
        list,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSelection {
    pub dataset: DatasetMode,
    pub domain: DomainMode,
    /// Row labels; the standard set when omitted.
    #[serde(default)]
    pub variants: Option<Vec<String>>,
}

/// Ablation spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFile {
    pub seed: u64,
    #[serde(default = "default_ablation_dir")]
    pub output_dir: PathBuf,
    /// All four dataset x domain tables with the standard rows.
    #[serde(default)]
    pub full_matrix: bool,
    #[serde(default, rename = "table")]
    pub tables: Vec<TableSelection>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl HasModel for AblationFile {
    fn model_mut(&mut self) -> &mut ModelConfig {
        &mut self.model
    }
}

fn default_ablation_dir() -> PathBuf {
    PathBuf::from("ablation")
}

/// Table order of the full matrix.
pub const FULL_MATRIX: [(DatasetMode, DomainMode); 4] = [
    (DatasetMode::Original, DomainMode::Off),
    (DatasetMode::Augmented, DomainMode::Off),
    (DatasetMode::Original, DomainMode::On),
    (DatasetMode::Augmented, DomainMode::On),
];

impl AblationFile {
    pub fn load(path: &Path) -> Result<AblationFile> {
        let text = fs::read_to_string(path).map_err(|e| MarsError::io(path, e))?;
        let mut f: AblationFile = parse_with_seed(&text, path)?;
        if let Some(s) = env_seed()? {
            f.seed = s;
        }
        f.train.seed = f.seed;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        for p in [&mut f.data.train, &mut f.data.val].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if f.output_dir.is_relative() {
            f.output_dir = base.join(&f.output_dir);
        }
        Ok(f)
    }

    pub fn selections(&self) -> Vec<TableSelection> {
        if self.full_matrix {
            FULL_MATRIX
                .iter()
                .map(|&(dataset, domain)| TableSelection {
                    dataset,
                    domain,
                    variants: None,
                })
                .collect()
        } else {
            self.tables.clone()
        }
    }

    /// One spec per requested table.
    pub fn specs(&self) -> Result<Vec<AblationSpec>> {
        let mut errs = Vec::new();
        if self.full_matrix && !self.tables.is_empty() {
            errs.push("full_matrix and [[table]] entries are mutually exclusive".to_string());
        }
        let sels = self.selections();
        if sels.is_empty() {
            errs.push("ablation requests no tables; set full_matrix or add [[table]] entries".into());
        }
        errs.extend(self.data.violations());
        let mut specs = Vec::new();
        for sel in sels {
            let variants = match &sel.variants {
                None => table_variants(sel.domain),
                Some(labels) => {
                    let mut out = Vec::new();
                    for l in labels {
                        match variant_from_label(l) {
                            Ok(v) => out.push(v),
                            Err(e) => errs.push(e.to_string()),
                        }
                    }
                    out
                }
            };
            let spec = AblationSpec {
                variants,
                dataset_mode: sel.dataset,
                domain_mode: sel.domain,
                model: self.model.clone(),
                train: self.train.clone(),
                eval: self.eval.clone(),
                init_seed: self.seed,
            };
            errs.extend(spec.violations());
            specs.push(spec);
        }
        errs.dedup();
        if errs.is_empty() {
            Ok(specs)
        } else {
            Err(MarsError::Config(errs))
        }
    }
}

struct LoadedSplit {
    train: Vec<Sample>,
    val: Vec<Sample>,
    classes: Vec<String>,
}

/// Run every requested table. Writes `<dataset>_<domain>.csv` and `.md` per
/// table, `tables.md` with all of them, and per-run artefacts under `runs/`.
pub fn cmd_ablate(spec_path: &Path) -> Result<Vec<ResultsTable>> {
    let file = AblationFile::load(spec_path)?;
    let specs = file.specs()?;
    let out = file.output_dir.clone();
    let _lock = OutputLock::acquire(&out)?;
    let mut splits: Vec<(DatasetMode, LoadedSplit)> = Vec::new();
    let mut cache = RunCache::default();
    let mut tables = Vec::new();
    let mut combined = String::new();
    for spec in &specs {
        if !splits.iter().any(|(m, _)| *m == spec.dataset_mode) {
            let data = DataConfig {
                mode: spec.dataset_mode,
                ..file.data.clone()
            };
            let (tm, vm) = data.load(file.seed)?;
            let size = file.model.input_size as u32;
            splits.push((
                spec.dataset_mode,
                LoadedSplit {
                    train: load_samples(&tm, size)?,
                    val: load_samples(&vm, size)?,
                    classes: tm.classes.clone(),
                },
            ));
        }
        let split = &splits
            .iter()
            .find(|(m, _)| *m == spec.dataset_mode)
            .expect("loaded")
            .1;
        let data = AblationData {
            train: &split.train,
            val: &split.val,
            classes: &split.classes,
        };
        let mut table = run_ablation(spec, &data, Some(&out), &mut cache)?;
        let augmented_val = spec.dataset_mode == DatasetMode::Augmented && file.data.augment_validation;
        table.validation = Some(if augmented_val { "augmented" } else { "original" }.to_string());
        let stem = format!(
            "{}_{}",
            spec.dataset_mode.as_str(),
            match spec.domain_mode {
                DomainMode::Off => "no_domain",
                DomainMode::On => "domain",
            }
        );
        write_file(&out.join(format!("{stem}.csv")), table.to_csv())?;
        let md = table.to_markdown();
        write_file(&out.join(format!("{stem}.md")), &md)?;
        combined.push_str(&md);
        combined.push('\n');
        tables.push(table);
    }
    write_file(&out.join("tables.md"), combined)?;
    Ok(tables)
}

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub n: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub image_size: u32,
    pub augment: bool,
}

/// Write a synthetic dataset: PNGs under `images/`, `manifest.json`, and
/// with `augment` also `manifest_augmented.json`.
pub fn cmd_synth(args: &SynthArgs) -> Result<DatasetManifest> {
    let mut m = generate_synthetic_dataset(args.n, args.image_size, args.seed)?;
    let _lock = OutputLock::acquire(&args.out_dir)?;
    m.materialize_images(&args.out_dir)?;
    m.save(&args.out_dir.join("manifest.json"))?;
    if args.augment {
        let aug = build_augmented_dataset(&m, &DEFAULT_STRENGTHS, args.seed)?;
        aug.save(&args.out_dir.join("manifest_augmented.json"))?;
    }
    Ok(m)
}
