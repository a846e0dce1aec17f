//! Joint optimisation of generator and classifier, learning-rate schedule,
//! checkpoints and test-time evaluation.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::TensorArchive;
use crate::classifier::{overlay_batch, sigmoid, Classifier, ClassifierInput};
use crate::config::ExperimentConfig;
use crate::datamodel::{resolve_protocol, AttackType, DatasetManifest, EvalProtocol, Label, LabeledSample};
use crate::generator::{FeatureTapSet, Generator, TapLayer};
use crate::image_tensor::{CueMap, ImageTensor};
use crate::losses::{
    classification_loss_grad, regression_loss_grad, total_loss, triplet_loss_grad, LossBreakdown,
    LossWeights, RegressionTarget, TripletConfig,
};
use crate::metrics::{compute_acer_report, select_threshold, MetricsReport};
use crate::nn::Module;
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::{load_sample, make_balanced_sampler, mix_seed, PipelineConfig};
use crate::scoring::{aggregate_video, spoof_score_values, write_scores, ScoreRecord};
use crate::tensor::{lit, Scalar, Tensor};
use crate::{Error, Result};

const GENERATOR_STREAM: u64 = 10;
const CLASSIFIER_STREAM: u64 = 11;
const SAMPLER_STREAM: u64 = 12;
const PATCH_STREAM: u64 = 13;
const EVAL_STREAM: u64 = 14;

const CHECKPOINT_KIND: &str = "spoofcue-train-state";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every_steps: u64,
    /// Linear warm-up over the first epoch.
    pub warmup: bool,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    pub triplet: TripletConfig,
    pub regression_target: RegressionTarget,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Extra checkpoint every this many steps; 0 disables.
    pub checkpoint_every_steps: u64,
    /// Stop after this many global steps; 0 means no limit.
    pub max_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 20,
            base_lr: 1e-3,
            decay_factor: 0.95,
            decay_every_steps: 600,
            warmup: true,
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            triplet: TripletConfig::default(),
            regression_target: RegressionTarget::LiveOnly,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint_every_steps: 0,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor {} must lie in (0, 1]",
                self.decay_factor
            )));
        }
        if self.decay_every_steps == 0 {
            return Err(Error::Config("decay_every_steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size {} must be even and positive",
                self.batch_size
            )));
        }
        self.adam.validate()?;
        self.loss_weights.validate()?;
        self.triplet.validate()
    }
}

/// Learning rate used for global step `step` (0-based).
pub fn lr_at(step: u64, steps_per_epoch: u64, config: &TrainConfig) -> f64 {
    let spe = steps_per_epoch.max(1);
    if config.warmup && step < spe {
        return config.base_lr * (step + 1) as f64 / spe as f64;
    }
    let post = if config.warmup { step - spe } else { step };
    config.base_lr * config.decay_factor.powi((post / config.decay_every_steps) as i32)
}

/// Everything needed to continue training bit-identically.
///
/// Random streams are pure functions of the seeds and `global_step`, so the
/// step counter doubles as the RNG state.
pub struct TrainState<T> {
    pub generator: Generator<T>,
    pub classifier: Classifier<T>,
    pub optimizer: Adam<T>,
    pub global_step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        let seed = cfg.train.seed;
        Ok(Self {
            generator: Generator::build(&cfg.generator, mix_seed(seed, GENERATOR_STREAM, 0))?,
            classifier: Classifier::build(&cfg.classifier, mix_seed(seed, CLASSIFIER_STREAM, 0))?,
            optimizer: Adam::new(cfg.train.adam),
            global_step: 0,
            epoch: 0,
        })
    }

    pub fn save(&mut self, path: impl AsRef<Path>, cfg: &ExperimentConfig) -> Result<()> {
        let meta = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "global_step": self.global_step,
            "epoch": self.epoch,
            "adam_t": self.optimizer.t,
            "config": cfg,
        });
        let mut ar = TensorArchive::new(meta);
        ar.store_module("generator", &mut self.generator);
        ar.store_module("classifier", &mut self.classifier);
        self.optimizer.store(&mut ar);
        ar.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, ExperimentConfig)> {
        let path = path.as_ref();
        let ar = TensorArchive::read(path)?;
        let meta = &ar.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::checkpoint(path, "not a training checkpoint"));
        }
        let field = |k: &str| {
            meta.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::checkpoint(path, format!("metadata lacks {k}")))
        };
        let cfg: ExperimentConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::checkpoint(path, format!("bad stored config: {e}")))?;
        let mut gen_cfg = cfg.generator.clone();
        gen_cfg.use_pretrained_encoder = false;
        let mut generator = Generator::build(&gen_cfg, 0)?;
        generator.config = cfg.generator.clone();
        ar.load_module("generator", &mut generator, path)?;
        let mut classifier = Classifier::build(&cfg.classifier, 0)?;
        ar.load_module("classifier", &mut classifier, path)?;
        let optimizer = Adam::load(cfg.train.adam, field("adam_t")?, &ar)
            .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        Ok((
            Self {
                generator,
                classifier,
                optimizer,
                global_step: field("global_step")?,
                epoch: field("epoch")?,
            },
            cfg,
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<Label>,
}

/// Per-sample L2 norms of each weighted loss term's gradient.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// `α1 · ∂Lr/∂C`.
    pub regression_cue_grad: Vec<f64>,
    /// `α3 · ∂La/∂C`, reaching the cue through the classifier input.
    pub classification_cue_grad: Vec<f64>,
    /// `α2 · ∂ΣLt/∂v` over the tapped feature vectors.
    pub triplet_feature_grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    pub lr: f64,
    pub diagnostics: StepDiagnostics,
}

fn l2<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

struct Forward<T> {
    cue: Tensor<T>,
    taps: FeatureTapSet<T>,
    classifier_input: Tensor<T>,
    probs: Vec<T>,
}

fn forward_pass<T: Scalar>(
    gen: &mut Generator<T>,
    cls: &mut Classifier<T>,
    batch: &Batch<T>,
) -> Result<Forward<T>> {
    if batch.labels.len() != batch.images.n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            batch.labels.len(),
            batch.images.n
        )));
    }
    let out = gen.forward(&batch.images)?;
    let classifier_input = match cls.config.input_mode {
        ClassifierInput::Overlay => overlay_batch(&batch.images, &out.cue)?,
        ClassifierInput::CueOnly => out.cue.clone(),
    };
    let probs = cls.forward(&classifier_input)?.into_iter().map(sigmoid).collect();
    Ok(Forward {
        cue: out.cue,
        taps: out.taps,
        classifier_input,
        probs,
    })
}

fn breakdown<T: Scalar>(
    f: &Forward<T>,
    labels: &[Label],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(LossBreakdown, Tensor<T>, FeatureTapSet<T>, Vec<T>)> {
    let (lr_val, d_reg) = regression_loss_grad(&f.cue, labels, cfg.regression_target);
    let margin = lit::<T>(cfg.triplet.margin);
    let mut triplet = Vec::new();
    let mut counts = Vec::new();
    let mut d_taps = Vec::new();
    for (tap, feats) in &f.taps.taps {
        let (v, n, g) = triplet_loss_grad(feats, labels, margin);
        triplet.push((*tap, v.as_f64()));
        counts.push((*tap, n));
        d_taps.push((*tap, g));
    }
    let (la, d_prob) = classification_loss_grad(&f.probs, labels);
    let regression = lr_val.as_f64();
    let classification = la.as_f64();
    let tsum: f64 = triplet.iter().map(|(_, v)| v).sum();
    let total = total_loss(regression, tsum, classification, &cfg.loss_weights).map_err(|e| match e {
        Error::NonFinite { detail, .. } => Error::NonFinite {
            step,
            detail: format!("{detail} per-tap Lt={triplet:?}"),
        },
        e => e,
    })?;
    let d_logit = d_prob
        .iter()
        .zip(&f.probs)
        .map(|(g, q)| *g * *q * (T::one() - *q))
        .collect();
    Ok((
        LossBreakdown {
            regression,
            triplet,
            triplet_counts: counts,
            classification,
            total,
        },
        d_reg,
        FeatureTapSet { taps: d_taps },
        d_logit,
    ))
}

/// Total loss of `batch` with training-mode statistics, without gradients.
pub fn batch_loss<T: Scalar>(
    gen: &mut Generator<T>,
    cls: &mut Classifier<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let f = forward_pass(gen, cls, batch)?;
    Ok(breakdown(&f, &batch.labels, cfg, 0)?.0)
}

/// Zeroes and then accumulates the gradient of the total loss in every
/// parameter of both networks.
pub fn compute_gradients<T: Scalar>(
    gen: &mut Generator<T>,
    cls: &mut Classifier<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(LossBreakdown, StepDiagnostics)> {
    let f = forward_pass(gen, cls, batch)?;
    let (losses, mut d_reg, mut d_taps, d_logit) = breakdown(&f, &batch.labels, cfg, step)?;
    let w = cfg.loss_weights;
    let (a1, a2, a3) = (lit::<T>(w.alpha1), lit::<T>(w.alpha2), lit::<T>(w.alpha3));

    gen.zero_grad();
    cls.zero_grad();
    let d_logit: Vec<T> = d_logit.into_iter().map(|g| g * a3).collect();
    // same shape for both input modes: the classifier input is I + C or C
    let d_input = cls.backward(&d_logit);
    debug_assert!(d_input.same_shape(&f.classifier_input));

    d_reg.scale(a1);
    for (_, g) in &mut d_taps.taps {
        for v in g.iter_mut().flatten() {
            *v *= a2;
        }
    }
    let n = batch.labels.len();
    let diagnostics = StepDiagnostics {
        regression_cue_grad: (0..n).map(|i| l2(d_reg.sample(i))).collect(),
        classification_cue_grad: (0..n).map(|i| l2(d_input.sample(i))).collect(),
        triplet_feature_grad: (0..n)
            .map(|i| {
                d_taps
                    .taps
                    .iter()
                    .map(|(_, g)| l2(&g[i]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect(),
    };
    let mut d_cue = d_reg;
    d_cue.add_assign(&d_input);
    gen.backward(&d_cue, &d_taps);
    Ok((losses, diagnostics))
}

/// One joint update of both networks at the scheduled learning rate.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    steps_per_epoch: u64,
) -> Result<StepOutcome> {
    let lr = lr_at(state.global_step, steps_per_epoch, cfg);
    let (losses, diagnostics) = compute_gradients(
        &mut state.generator,
        &mut state.classifier,
        batch,
        cfg,
        state.global_step,
    )?;
    state.optimizer.begin_step();
    state.optimizer.apply("generator", &mut state.generator, lr);
    state.optimizer.apply("classifier", &mut state.classifier, lr);
    state.global_step += 1;
    Ok(StepOutcome {
        losses,
        lr,
        diagnostics,
    })
}

/// Log line written per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub regression: f64,
    pub triplet: BTreeMap<String, f64>,
    pub classification: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: u64, epoch: u64, o: &StepOutcome) -> Self {
        Self {
            step,
            epoch,
            lr: o.lr,
            regression: o.losses.regression,
            triplet: o
                .losses
                .triplet
                .iter()
                .map(|(t, v)| (t.name().to_string(), *v))
                .collect(),
            classification: o.losses.classification,
            total: o.losses.total,
        }
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub global_step: u64,
    pub last: Option<LossBreakdown>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

pub fn step_checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

fn load_images(samples: &[LabeledSample]) -> Result<Vec<ImageTensor>> {
    samples.iter().map(load_sample).collect()
}

/// Trains from scratch, or continues from `resume`.
///
/// A resumed run keeps the stored model, data and optimisation settings and
/// takes only the run-control fields (`epochs`, `max_steps`,
/// `checkpoint_dir`, `checkpoint_every_steps`) from `cfg`.
pub fn fit(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    protocol: &EvalProtocol,
    resume: Option<&Path>,
) -> Result<FitSummary> {
    let (mut state, run_cfg) = match resume {
        Some(path) => {
            let (state, mut stored) = TrainState::<f32>::load(path)?;
            stored.train.epochs = cfg.train.epochs;
            stored.train.max_steps = cfg.train.max_steps;
            stored.train.checkpoint_dir = cfg.train.checkpoint_dir.clone();
            stored.train.checkpoint_every_steps = cfg.train.checkpoint_every_steps;
            (state, stored)
        }
        None => {
            cfg.validate()?;
            (TrainState::<f32>::init(cfg)?, cfg.clone())
        }
    };
    let tc = &run_cfg.train;
    let resolved = resolve_protocol(manifest, protocol)?;
    let labels: Vec<Label> = resolved.train.iter().map(|s| s.label).collect();
    let sampler = make_balanced_sampler(
        &labels,
        tc.batch_size,
        mix_seed(run_cfg.pipeline.seed, SAMPLER_STREAM, 0),
    )?;
    let images = load_images(&resolved.train)?;
    let spe = sampler.steps_per_epoch() as u64;

    let dir = &tc.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    log::info!(
        "training on {} samples, {spe} steps/epoch, {} epochs, from step {}",
        images.len(),
        tc.epochs,
        state.global_step
    );

    let mut last = None;
    let limit = if tc.max_steps == 0 { u64::MAX } else { tc.max_steps };
    'epochs: for epoch in state.global_step / spe..tc.epochs {
        let plan = sampler.epoch(epoch);
        let skip = (state.global_step - epoch * spe) as usize;
        for indices in plan.iter().skip(skip) {
            if state.global_step >= limit {
                break 'epochs;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                run_cfg.pipeline.seed,
                PATCH_STREAM,
                state.global_step,
            ));
            let views: Vec<ImageTensor> = indices
                .iter()
                .map(|&i| run_cfg.pipeline.train_view(&images[i], &mut rng))
                .collect();
            let batch = Batch {
                images: ImageTensor::batch(&views)?,
                labels: indices.iter().map(|&i| labels[i]).collect(),
            };
            let step = state.global_step;
            let outcome = train_step(&mut state, &batch, tc, spe)?;
            let rec = serde_json::to_string(&StepRecord::new(step, epoch, &outcome))
                .expect("record serialises");
            writeln!(log, "{rec}").map_err(|e| Error::io(&log_path, e))?;
            last = Some(outcome.losses);
            if tc.checkpoint_every_steps > 0 && state.global_step % tc.checkpoint_every_steps == 0 {
                state.save(dir.join(step_checkpoint_name(state.global_step)), &run_cfg)?;
            }
        }
        if state.global_step == (epoch + 1) * spe {
            state.epoch = epoch + 1;
            state.save(dir.join(LATEST_CHECKPOINT), &run_cfg)?;
            if let Some(l) = &last {
                log::info!("epoch {} done: total loss {:.5}", epoch + 1, l.total);
            }
        }
    }
    let checkpoint = dir.join(FINAL_CHECKPOINT);
    state.save(&checkpoint, &run_cfg)?;
    Ok(FitSummary {
        checkpoint,
        log: log_path,
        global_step: state.global_step,
        last,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Equal-error threshold on the protocol's development set.
    DevEer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub label: Label,
    pub attack_type: AttackType,
    pub tap: TapLayer,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub scores: Vec<ScoreRecord>,
    pub dev_scores: Vec<ScoreRecord>,
    pub embeddings: Vec<EmbeddingRecord>,
}

/// Score and embedding of one image under the test-time view policy.
pub struct ImageScore {
    pub score: f64,
    pub embedding: Vec<f32>,
    /// Cue map of the first view.
    pub cue: CueMap,
}

fn view_seed(seed: u64, sample_id: &str) -> u64 {
    let h = Sha256::digest(sample_id.as_bytes());
    mix_seed(seed, EVAL_STREAM, u64::from_le_bytes(h[..8].try_into().unwrap()))
}

/// Inference on one image: each view is scored with mean `|C|` and scores
/// and D4 embeddings are averaged over views.
pub fn score_image<T: Scalar>(
    gen: &Generator<T>,
    pipeline: &PipelineConfig,
    image: &ImageTensor,
    sample_id: &str,
) -> Result<ImageScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(view_seed(pipeline.seed, sample_id));
    let views = pipeline.eval_views(image, &mut rng);
    let out = gen.generate_with_taps(&ImageTensor::batch::<T>(&views)?, &[TapLayer::D4])?;
    let k = views.len() as f64;
    let score = (0..views.len())
        .map(|i| spoof_score_values(out.cue.sample(i)))
        .sum::<f64>()
        / k;
    let feats = out.taps.get(TapLayer::D4).expect("requested tap");
    let width = feats[0].len();
    let embedding = (0..width)
        .map(|j| (feats.iter().map(|f| f[j].as_f64()).sum::<f64>() / k) as f32)
        .collect();
    Ok(ImageScore {
        score,
        embedding,
        cue: CueMap(ImageTensor::from_batch(&out.cue, 0)),
    })
}

/// Scores samples, averaging frames that share a `video_id`.
pub fn score_samples<T: Scalar>(
    gen: &Generator<T>,
    pipeline: &PipelineConfig,
    manifest: &DatasetManifest,
    samples: &[LabeledSample],
) -> Result<(Vec<ScoreRecord>, Vec<EmbeddingRecord>)> {
    let mut frames: Vec<ScoreRecord> = Vec::with_capacity(samples.len());
    let mut embeddings = Vec::with_capacity(samples.len());
    for s in samples {
        let id = manifest.sample_id(s);
        let img = load_sample(s)?;
        let r = score_image(gen, pipeline, &img, &id)?;
        embeddings.push(EmbeddingRecord {
            sample_id: id.clone(),
            label: s.label,
            attack_type: s.attack_type.clone(),
            tap: TapLayer::D4,
            values: r.embedding,
        });
        frames.push(ScoreRecord {
            sample_id: id,
            score: r.score,
            label: s.label,
            attack_type: s.attack_type.clone(),
        });
    }
    if samples.iter().all(|s| s.video_id.is_none()) {
        return Ok((frames, embeddings));
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Vec<f64>, Label, AttackType)> = BTreeMap::new();
    for (s, r) in samples.iter().zip(frames) {
        let key = match &s.video_id {
            Some(v) => format!("video:{v}"),
            None => r.sample_id.clone(),
        };
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            (Vec::new(), r.label, r.attack_type.clone())
        });
        if entry.1 != r.label || entry.2 != r.attack_type {
            return Err(Error::Config(format!(
                "{key} mixes labels or attack types across frames"
            )));
        }
        entry.0.push(r.score);
    }
    let records = order
        .into_iter()
        .map(|k| {
            let (scores, label, attack_type) = groups.remove(&k).expect("grouped key");
            Ok(ScoreRecord {
                sample_id: k.strip_prefix("video:").unwrap_or(&k).to_string(),
                score: aggregate_video(&scores)?,
                label,
                attack_type,
            })
        })
        .collect::<Result<_>>()?;
    Ok((records, embeddings))
}

pub fn evaluate_model<T: Scalar>(
    gen: &Generator<T>,
    pipeline: &PipelineConfig,
    manifest: &DatasetManifest,
    protocol: &EvalProtocol,
    policy: ThresholdPolicy,
) -> Result<Evaluation> {
    let resolved = resolve_protocol(manifest, protocol)?;
    let (scores, embeddings) = score_samples(gen, pipeline, manifest, &resolved.test)?;
    let (threshold, dev_scores) = match policy {
        ThresholdPolicy::Fixed(t) => (t, Vec::new()),
        ThresholdPolicy::DevEer => {
            let (dev, _) = score_samples(gen, pipeline, manifest, &resolved.dev)?;
            (select_threshold(&dev)?, dev)
        }
    };
    let report = compute_acer_report(&scores, threshold)?;
    Ok(Evaluation {
        report,
        scores,
        dev_scores,
        embeddings,
    })
}

/// Loads a checkpoint and evaluates its generator at test time.
pub fn evaluate(
    checkpoint: impl AsRef<Path>,
    manifest: &DatasetManifest,
    protocol: &EvalProtocol,
    policy: ThresholdPolicy,
) -> Result<Evaluation> {
    let (state, cfg) = TrainState::<f32>::load(checkpoint)?;
    evaluate_model(&state.generator, &cfg.pipeline, manifest, protocol, policy)
}

impl Evaluation {
    /// Writes the report to `report_path` (key-value text) and its JSON form,
    /// scores and embeddings next to it as `<stem>.json`,
    /// `<stem>.scores.jsonl` and `<stem>.embeddings.jsonl`.
    pub fn write(&self, report_path: impl AsRef<Path>) -> Result<()> {
        let path = report_path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let sibling = |suffix: &str| {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            path.with_file_name(format!("{stem}{suffix}"))
        };
        self.report.write(path, Some(&sibling(".json")))?;
        write_scores(sibling(".scores.jsonl"), &self.scores)?;
        let emb = sibling(".embeddings.jsonl");
        let mut out = String::new();
        for e in &self.embeddings {
            out.push_str(&serde_json::to_string(e).expect("embedding serialises"));
            out.push('\n');
        }
        fs::write(&emb, out).map_err(|e| Error::io(&emb, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let c = TrainConfig::default();
        let spe = 25;
        assert_eq!(lr_at(spe - 1, spe, &c), 1e-3);
        assert!((lr_at(0, spe, &c) - 1e-3 / 25.0).abs() < 1e-18);
        assert!((lr_at(spe + 600, spe, &c) - 9.5e-4).abs() < 1e-15);
        assert!((lr_at(spe + 1200, spe, &c) - 9.025e-4).abs() < 1e-15);
        assert_eq!(lr_at(spe + 599, spe, &c), 1e-3);
    }

    #[test]
    fn schedule_is_nonincreasing_after_warmup() {
        let c = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for s in 40..5000 {
            let lr = lr_at(s, 40, &c);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.base_lr = 0.0;
        assert!(c.validate().is_err());
        c.base_lr = 1e-3;
        c.decay_factor = 1.5;
        assert!(c.validate().is_err());
        c.decay_factor = 1.0;
        c.decay_every_steps = 0;
        assert!(c.validate().is_err());
    }
}
