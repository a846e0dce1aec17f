//! Python bindings. Errors surface as `ValueError` (bad input or
//! configuration) or `OSError` (files).

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use spoofcue::config::ExperimentConfig;
use spoofcue::datamodel::{load_manifest, AttackType, EvalProtocol, Label};
use spoofcue::metrics::{compute_acer_report, select_threshold, MetricsReport};
use spoofcue::pipeline::{load_image, synth_dataset, ArtifactKind, PipelineConfig, SynthConfig};
use spoofcue::scoring::{ScoreRecord, DEFAULT_THRESHOLD};
use spoofcue::trainer::{evaluate_model, fit, score_image, ThresholdPolicy, TrainState};
use spoofcue::{generator::Generator, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn records(scores: &[f64], labels: &[String], attack_types: &[String]) -> Result<Vec<ScoreRecord>, Error> {
    if scores.len() != labels.len() || scores.len() != attack_types.len() {
        return Err(Error::Shape(format!(
            "{} scores, {} labels, {} attack types",
            scores.len(),
            labels.len(),
            attack_types.len()
        )));
    }
    scores
        .iter()
        .zip(labels)
        .zip(attack_types)
        .enumerate()
        .map(|(i, ((&score, label), pai))| {
            let label = match label.as_str() {
                "live" => Label::Live,
                "spoof" => Label::Spoof,
                other => return Err(Error::Config(format!("label {other:?} is neither live nor spoof"))),
            };
            Ok(ScoreRecord {
                sample_id: i.to_string(),
                score,
                label,
                attack_type: AttackType::new(pai.as_str())?,
            })
        })
        .collect()
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("threshold", r.threshold)?;
    d.set_item("apcer", r.apcer)?;
    d.set_item("bpcer", r.bpcer)?;
    d.set_item("acer", r.acer)?;
    d.set_item("hter", r.hter)?;
    let per = PyDict::new(py);
    for (k, v) in &r.apcer_per_pai {
        per.set_item(k.as_str(), v)?;
    }
    d.set_item("apcer_per_pai", per)?;
    let counts = PyDict::new(py);
    for (k, v) in &r.counts {
        counts.set_item(k, v)?;
    }
    d.set_item("counts", counts)?;
    Ok(d)
}

/// ACER report for parallel lists of scores, labels ("live"/"spoof") and
/// attack types ("live" for bona fide samples).
#[pyfunction]
#[pyo3(signature = (scores, labels, attack_types, threshold = DEFAULT_THRESHOLD))]
fn acer_report<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<String>,
    attack_types: Vec<String>,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let recs = records(&scores, &labels, &attack_types).map_err(py_err)?;
    let r = compute_acer_report(&recs, threshold).map_err(py_err)?;
    report_dict(py, &r)
}

/// Threshold balancing APCER and BPCER on a development set.
#[pyfunction]
fn eer_threshold(scores: Vec<f64>, labels: Vec<String>, attack_types: Vec<String>) -> PyResult<f64> {
    let recs = records(&scores, &labels, &attack_types).map_err(py_err)?;
    select_threshold(&recs).map_err(py_err)
}

/// Writes the procedural dataset and returns the number of samples.
#[pyfunction]
#[pyo3(signature = (
    out_dir,
    count = 100,
    size = 96,
    artifacts = vec!["moire".to_string(), "color_cast".to_string()],
    strength = 1.0,
    seed = 0,
    splits = (0.6, 0.2, 0.2),
))]
fn synth_data(
    py: Python<'_>,
    out_dir: PathBuf,
    count: usize,
    size: usize,
    artifacts: Vec<String>,
    strength: f64,
    seed: u64,
    splits: (f64, f64, f64),
) -> PyResult<usize> {
    let artifact_types = artifacts
        .iter()
        .map(|a| ArtifactKind::parse(a))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let cfg = SynthConfig {
        count,
        image_size: size,
        artifact_types,
        artifact_strength: strength,
        seed,
        split_fractions: [splits.0, splits.1, splits.2],
    };
    let m = py.detach(|| synth_dataset(&cfg, &out_dir)).map_err(py_err)?;
    Ok(m.samples.len())
}

fn load_protocol(path: Option<&Path>) -> Result<EvalProtocol, Error> {
    path.map_or_else(|| Ok(EvalProtocol::default()), EvalProtocol::load)
}

/// Trains from a manifest; `overrides` are `key=value` strings applied
/// after `config`.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config = None, overrides = Vec::new(), protocol = None, resume = None))]
fn train<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    overrides: Vec<String>,
    protocol: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let summary = py
        .detach(|| {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            for o in &overrides {
                cfg.apply_override(o)?;
            }
            cfg.train.checkpoint_dir = out_dir.clone();
            let m = load_manifest(&manifest)?;
            let p = load_protocol(protocol.as_deref())?;
            fit(&cfg, &m, &p, resume.as_deref())
        })
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("checkpoint", summary.checkpoint)?;
    d.set_item("log", summary.log)?;
    d.set_item("global_step", summary.global_step)?;
    d.set_item("total_loss", summary.last.map(|l| l.total))?;
    Ok(d)
}

/// A trained generator used for inference.
#[pyclass(frozen)]
struct CueModel {
    generator: Generator<f32>,
    pipeline: PipelineConfig,
}

#[pymethods]
impl CueModel {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        let (state, cfg) = TrainState::<f32>::load(&checkpoint).map_err(py_err)?;
        Ok(Self {
            generator: state.generator,
            pipeline: cfg.pipeline,
        })
    }

    /// Spoof score (mean absolute cue) of one image file.
    fn score(&self, py: Python<'_>, image: PathBuf) -> PyResult<f64> {
        py.detach(|| {
            let img = load_image(&image, None)?;
            score_image(&self.generator, &self.pipeline, &img, &image.to_string_lossy())
        })
        .map(|r| r.score)
        .map_err(py_err)
    }

    /// Cue map of one image as `(height, width, values)`, values in HWC order.
    fn cue_map(&self, py: Python<'_>, image: PathBuf) -> PyResult<(usize, usize, Vec<f32>)> {
        let r = py
            .detach(|| {
                let img = load_image(&image, None)?;
                score_image(&self.generator, &self.pipeline, &img, &image.to_string_lossy())
            })
            .map_err(py_err)?;
        let [h, w, _] = r.cue.image().shape();
        Ok((h, w, r.cue.values().to_vec()))
    }

    /// Report on the protocol's test set; `dev_eer` picks the threshold on
    /// the development set instead of using `threshold`.
    #[pyo3(signature = (manifest, protocol = None, threshold = DEFAULT_THRESHOLD, dev_eer = false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        manifest: PathBuf,
        protocol: Option<PathBuf>,
        threshold: f64,
        dev_eer: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let policy = if dev_eer {
            ThresholdPolicy::DevEer
        } else {
            ThresholdPolicy::Fixed(threshold)
        };
        let ev = py
            .detach(|| {
                let m = load_manifest(&manifest)?;
                let p = load_protocol(protocol.as_deref())?;
                evaluate_model(&self.generator, &self.pipeline, &m, &p, policy)
            })
            .map_err(py_err)?;
        report_dict(py, &ev.report)
    }
}

#[pymodule]
#[pyo3(name = "spoofcue")]
fn spoofcue_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(acer_report, m)?)?;
    m.add_function(wrap_pyfunction!(eer_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(synth_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<CueModel>()?;
    m.add("DEFAULT_THRESHOLD", DEFAULT_THRESHOLD)?;
    Ok(())
}
