//! Python bindings. Build with `maturin develop` from this directory; the
//! module is importable as `mars`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Axis;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mars_core::boxes::{iou as box_iou, BBox};
use mars_core::checkpoint::Checkpoint;
use mars_core::cli::{self, DetectArgs, EvalArgs, SynthArgs};
use mars_core::data::{
    self, apply_domain_augmentation, build_augmented_dataset, generate_synthetic_dataset, image_to_tensor,
    letterbox, DatasetManifest, LetterboxTransform, DEFAULT_STRENGTHS,
};
use mars_core::detector::{self, Backbone, Detection, ModelConfig};
use mars_core::error::MarsError;
use mars_core::evaluation::{self, ApMode, ClassDetection, EvalConfig, EvalResult};
use mars_core::graph::Mode;

fn py_err(e: MarsError) -> PyErr {
    match e {
        MarsError::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        MarsError::Annotation { .. } | MarsError::Data(_) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

type Quad = (f64, f64, f64, f64);
type Record = (String, usize, Vec<(String, Quad)>);

fn to_bbox(b: Quad) -> BBox {
    BBox::new(b.0, b.1, b.2, b.3)
}

fn to_quad(b: &BBox) -> Quad {
    (b.x_min, b.y_min, b.x_max, b.y_max)
}

fn ap_mode(name: &str) -> PyResult<ApMode> {
    match name {
        "all-point" => Ok(ApMode::AllPoint),
        "11-point" | "eleven-point" => Ok(ApMode::ElevenPoint),
        other => Err(PyValueError::new_err(format!(
            "unknown AP mode {other:?}, expected \"all-point\" or \"11-point\""
        ))),
    }
}

fn eval_config(conf: f64, nms_iou: f64, match_iou: f64, mode: &str) -> PyResult<EvalConfig> {
    let cfg = EvalConfig {
        conf_threshold: conf,
        nms_iou_threshold: nms_iou,
        match_iou_threshold: match_iou,
        ap_mode: ap_mode(mode)?,
        ..Default::default()
    };
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(py_err(MarsError::Config(v)));
    }
    Ok(cfg)
}

fn result_dict<'py>(py: Python<'py>, r: &EvalResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let ap: BTreeMap<&str, f64> = r
        .classes
        .iter()
        .map(String::as_str)
        .zip(r.per_class_ap.iter().copied())
        .collect();
    d.set_item("ap", ap)?;
    d.set_item("map", r.map)?;
    d.set_item("classes", r.classes.clone())?;
    d.set_item("iou_threshold", r.iou_threshold)?;
    Ok(d)
}

/// Intersection over union of two `(x_min, y_min, x_max, y_max)` boxes.
#[pyfunction]
fn iou(a: Quad, b: Quad) -> f64 {
    box_iou(&to_bbox(a), &to_bbox(b))
}

/// Greedy per-class NMS over `(box, class_id, confidence)` triples.
#[pyfunction]
#[pyo3(signature = (detections, iou_threshold = 0.45))]
fn nms(detections: Vec<(Quad, usize, f64)>, iou_threshold: f64) -> Vec<(Quad, usize, f64)> {
    let dets: Vec<Detection> = detections
        .into_iter()
        .map(|(b, class_id, confidence)| Detection {
            bbox: to_bbox(b),
            class_id,
            confidence,
        })
        .collect();
    detector::non_max_suppression(&dets, iou_threshold)
        .iter()
        .map(|d| (to_quad(&d.bbox), d.class_id, d.confidence))
        .collect()
}

/// Average precision for one class. `detections` holds
/// `(image_id, box, confidence)`; `ground_truth` maps image ids to boxes.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, iou_threshold = 0.5, mode = "all-point"))]
fn compute_ap(
    detections: Vec<(String, Quad, f64)>,
    ground_truth: BTreeMap<String, Vec<Quad>>,
    iou_threshold: f64,
    mode: &str,
) -> PyResult<f64> {
    let dets: Vec<ClassDetection> = detections
        .into_iter()
        .map(|(image_id, b, confidence)| ClassDetection {
            image_id,
            bbox: to_bbox(b),
            confidence,
        })
        .collect();
    let gt = ground_truth
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(to_bbox).collect()))
        .collect();
    Ok(evaluation::compute_ap(&dets, &gt, iou_threshold, ap_mode(mode)?).ap)
}

#[pyfunction]
fn compute_map(per_class_ap: Vec<f64>) -> f64 {
    evaluation::compute_map(&per_class_ap)
}

/// Maps original pixels onto a square canvas: `x' = x * scale + pad_x`.
#[pyclass(name = "LetterboxTransform", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLetterbox {
    inner: LetterboxTransform,
}

#[pymethods]
impl PyLetterbox {
    #[new]
    fn new(width: u32, height: u32, target: u32) -> PyResult<Self> {
        if width == 0 || height == 0 || target == 0 {
            return Err(PyValueError::new_err("sizes must be positive"));
        }
        Ok(PyLetterbox {
            inner: LetterboxTransform::for_size(width, height, target),
        })
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale
    }

    #[getter]
    fn pad(&self) -> (f64, f64) {
        (self.inner.pad_x, self.inner.pad_y)
    }

    fn forward_box(&self, b: Quad) -> Quad {
        to_quad(&self.inner.forward_box(&to_bbox(b)))
    }

    fn inverse_box(&self, b: Quad) -> Quad {
        to_quad(&self.inner.inverse_box(&to_bbox(b)))
    }

    fn __repr__(&self) -> String {
        format!(
            "LetterboxTransform(scale={}, pad_x={}, pad_y={})",
            self.inner.scale, self.inner.pad_x, self.inner.pad_y
        )
    }
}

/// An annotated image list, as stored in a `manifest.json`.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: DatasetManifest,
}

#[pymethods]
impl PyDataset {
    /// Load a manifest JSON file or a VOC directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: cli::load_dataset(&path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (n, image_size = 416, seed = 0))]
    fn synthetic(n: usize, image_size: u32, seed: u64) -> PyResult<Self> {
        Ok(PyDataset {
            inner: generate_synthetic_dataset(n, image_size, seed).map_err(py_err)?,
        })
    }

    /// One degraded copy per record and domain, domain 0 included.
    #[pyo3(signature = (seed = 0))]
    fn augmented(&self, seed: u64) -> PyResult<Self> {
        Ok(PyDataset {
            inner: build_augmented_dataset(&self.inner, &DEFAULT_STRENGTHS, seed).map_err(py_err)?,
        })
    }

    /// Write images under `dir/images` and the manifest to `dir/name`.
    #[pyo3(signature = (dir, name = "manifest.json"))]
    fn save(&mut self, dir: PathBuf, name: &str) -> PyResult<PathBuf> {
        self.inner.materialize_images(&dir).map_err(py_err)?;
        let path = dir.join(name);
        self.inner.save(&path).map_err(py_err)?;
        Ok(path)
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    #[getter]
    fn domains(&self) -> Vec<String> {
        self.inner.domains.clone()
    }

    /// `(image_id, domain_id, [(class, box), ...])` per record.
    fn records(&self) -> Vec<Record> {
        self.inner
            .records
            .iter()
            .map(|r| {
                let objs = r
                    .objects
                    .iter()
                    .map(|o| (o.class_name.clone(), to_quad(&o.bbox)))
                    .collect();
                (r.id.clone(), r.domain_id, objs)
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: detector::Model,
}

#[pymethods]
impl PyModel {
    /// Build a detector with fresh weights. `backbone` is "toy" or "full".
    #[new]
    #[pyo3(signature = (
        input_size = 416,
        backbone = "full",
        residual = false,
        channel_attention = false,
        residual_attention = false,
        multi_scale_attention = false,
        domain = false,
        seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        input_size: usize,
        backbone: &str,
        residual: bool,
        channel_attention: bool,
        residual_attention: bool,
        multi_scale_attention: bool,
        domain: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let base = match backbone {
            "toy" => ModelConfig::toy(input_size),
            "full" => ModelConfig {
                input_size,
                backbone: Backbone::Full,
                ..Default::default()
            },
            other => return Err(PyValueError::new_err(format!("unknown backbone {other:?}"))),
        };
        let cfg = ModelConfig {
            use_residual: residual,
            use_channel_attention: channel_attention,
            use_residual_attention: residual_attention,
            use_multi_scale_attention: multi_scale_attention,
            use_domain: domain,
            ..base
        };
        Ok(PyModel {
            inner: detector::Model::build(&cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyModel {
            inner: ck.to_model().map_err(py_err)?,
        })
    }

    /// Weights only; optimizer state is not written.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner, None)
            .save(&path)
            .map_err(py_err)
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.config().variant_label()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config().input_size
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Raw head output shapes, coarse to fine.
    fn output_shapes(&self) -> PyResult<Vec<Vec<usize>>> {
        let s = self.inner.config().input_size;
        let x = ndarray::ArrayD::<f64>::from_elem(vec![1, 3, s, s], 0.5);
        let out = self.inner.forward(&x, Mode::Eval).map_err(py_err)?;
        Ok(out.raw.scales.iter().map(|a| a.shape().to_vec()).collect())
    }

    /// Detections on one image file, in its own pixel frame:
    /// `(class, confidence, box)` sorted by confidence.
    #[pyo3(signature = (image, conf_threshold = 0.5, nms_iou_threshold = 0.45))]
    fn detect(
        &self,
        image: PathBuf,
        conf_threshold: f64,
        nms_iou_threshold: f64,
    ) -> PyResult<Vec<(String, f64, Quad)>> {
        let img = ::image::open(&image)
            .map_err(|e| {
                py_err(MarsError::Image {
                    path: image.clone(),
                    message: e.to_string(),
                })
            })?
            .to_rgb8();
        let cfg = self.inner.config();
        let (canvas, t) = letterbox(&img, cfg.input_size as u32).map_err(py_err)?;
        let batch = image_to_tensor(&canvas).insert_axis(Axis(0)).into_dyn();
        let eval = eval_config(conf_threshold, nms_iou_threshold, 0.5, "all-point")?;
        let dets = evaluation::predict(&self.inner, &batch, &eval)
            .map_err(py_err)?
            .remove(0);
        let (w, h) = img.dimensions();
        Ok(dets
            .iter()
            .map(|d| {
                let b = t.inverse_box(&d.bbox).clip(w as f64, h as f64);
                (cli::class_name(cfg, d.class_id), d.confidence, to_quad(&b))
            })
            .collect())
    }

    /// Per-class AP and mAP on a dataset.
    #[pyo3(signature = (dataset, conf_threshold = 0.05, nms_iou_threshold = 0.45, iou_threshold = 0.5, mode = "all-point"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        conf_threshold: f64,
        nms_iou_threshold: f64,
        iou_threshold: f64,
        mode: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = eval_config(conf_threshold, nms_iou_threshold, iou_threshold, mode)?;
        let out = evaluation::evaluate(&self.inner, &dataset.inner, &cfg).map_err(py_err)?;
        result_dict(py, &out.result)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({:?}, input_size={}, parameters={})",
            self.label(),
            self.input_size(),
            self.inner.num_parameters()
        )
    }
}

/// Degrade a PNG/JPEG into domain `domain_id` and write it to `out`.
#[pyfunction]
#[pyo3(signature = (src, out, domain_id, strength = 1.0, seed = 0))]
fn augment_image(src: PathBuf, out: PathBuf, domain_id: usize, strength: f64, seed: u64) -> PyResult<()> {
    let img = ::image::open(&src)
        .map_err(|e| {
            py_err(MarsError::Image {
                path: src.clone(),
                message: e.to_string(),
            })
        })?
        .to_rgb8();
    let done = apply_domain_augmentation(&img, domain_id, strength, seed).map_err(py_err)?;
    done.save(&out).map_err(|e| {
        py_err(MarsError::Image {
            path: out.clone(),
            message: e.to_string(),
        })
    })
}

/// Same as `mars train CONFIG`. Returns the checkpoint path.
#[pyfunction]
fn train(config: PathBuf) -> PyResult<PathBuf> {
    Ok(cli::cmd_train(&config).map_err(py_err)?.checkpoint)
}

/// Same as `mars eval`. Writes `eval.csv`, `eval.md` and
/// `detections.jsonl` to `out_dir`.
#[pyfunction]
#[pyo3(signature = (dataset, out_dir, checkpoint = None, oracle = false, input_size = 416, mode = "all-point"))]
fn evaluate<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    out_dir: PathBuf,
    checkpoint: Option<PathBuf>,
    oracle: bool,
    input_size: usize,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let args = EvalArgs {
        checkpoint,
        dataset,
        out_dir,
        oracle,
        input_size,
        eval: EvalConfig {
            ap_mode: ap_mode(mode)?,
            ..Default::default()
        },
    };
    let out = cli::cmd_eval(&args).map_err(py_err)?;
    result_dict(py, &out.result)
}

/// Same as `mars detect`. Returns the rendered image path.
#[pyfunction]
#[pyo3(signature = (checkpoint, image, out_dir = None, conf_threshold = 0.5, nms_iou_threshold = 0.45))]
fn detect(
    checkpoint: PathBuf,
    image: PathBuf,
    out_dir: Option<PathBuf>,
    conf_threshold: f64,
    nms_iou_threshold: f64,
) -> PyResult<PathBuf> {
    let args = DetectArgs {
        checkpoint,
        image,
        out_dir,
        conf_threshold,
        nms_iou_threshold,
    };
    Ok(cli::cmd_detect(&args).map_err(py_err)?.rendered)
}

/// Same as `mars ablate SPEC`. Returns each table as Markdown.
#[pyfunction]
fn ablate(spec: PathBuf) -> PyResult<Vec<String>> {
    let tables = cli::cmd_ablate(&spec).map_err(py_err)?;
    Ok(tables.iter().map(|t| t.to_markdown()).collect())
}

/// Same as `mars synth`. Returns the number of images written.
#[pyfunction]
#[pyo3(signature = (n, out_dir, seed = 0, image_size = 416, augment = false))]
fn synth(n: usize, out_dir: PathBuf, seed: u64, image_size: u32, augment: bool) -> PyResult<usize> {
    let args = SynthArgs {
        n,
        seed,
        out_dir,
        image_size,
        augment,
    };
    Ok(cli::cmd_synth(&args).map_err(py_err)?.len())
}

#[pymodule]
fn mars(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CLASS_NAMES", data::CLASS_NAMES.to_vec())?;
    m.add("DOMAIN_NAMES", data::DOMAIN_NAMES.to_vec())?;
    m.add_class::<PyLetterbox>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(compute_ap, m)?)?;
    m.add_function(wrap_pyfunction!(compute_map, m)?)?;
    m.add_function(wrap_pyfunction!(augment_image, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
