//! End-to-end training: Adam with decoupled weight decay over the combined
//! objective, shuffled batches with jittered frame sampling, per-epoch
//! evaluation with uniform sampling, JSON-lines logging, and bitwise
//! reproducible checkpoint/resume.

pub mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asl::{aggregate_video_scores, build_pseudo_gt, select_topk, AslError};
use crate::datagen::{
    sample_test_indices, sample_train_indices, DatasetError, DatasetReader, SplitTag, TrainExample,
};
use crate::encoder::EncoderConfig;
use crate::fusion::{FusionError, FusionKind};
use crate::losses::{two_way_loss_var, gce_actionness_loss_var, LogitMatrix, LossConfig, LossError};
use crate::metrics::{actionness_auc, map_c, map_s, EvalTable, MetricsError};
use crate::model::{Model, ModelConfig, ModelError};
use crate::numerics::{concat_rows, NumericsError, Tape, Tensor};

use checkpoint::{
    config_hash, read_snapshot, write_snapshot, CheckpointMeta, NamedTensor, Snapshot,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CHECKPOINT_INDEX_FILE: &str = "checkpoint.index.jsonl";
pub const STATE_FILE: &str = "state.bin";
pub const TRAIN_LOG_FILE: &str = "train.log.jsonl";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Salt separating the data-loop RNG stream from model initialization.
const LOOP_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("resume config does not match checkpoint config")]
    ConfigMismatch,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Asl(#[from] AslError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Frames sampled per clip (the model's T).
    pub frames: usize,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub view_fusion: FusionKind,
    pub frame_fusion: FusionKind,
    /// When false the view-level loss term is dropped and evaluation scores
    /// come from the MIL-aggregated frame-level head instead.
    pub use_view_loss: bool,
    /// Restrict input to these view indices (e.g. a single view).
    pub views: Option<Vec<usize>>,
    pub data_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            frames: 16,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            view_fusion: FusionKind::Max,
            frame_fusion: FusionKind::Max,
            use_view_loss: true,
            views: None,
            data_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::Config("learning rate and weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.frames == 0 {
            return Err(TrainError::Config("frames must be >= 1".into()));
        }
        self.loss.validate().map_err(TrainError::Loss)?;
        if let Some(views) = &self.views {
            if views.is_empty() {
                return Err(TrainError::Config("view subset cannot be empty".into()));
            }
        }
        Ok(())
    }

    /// Canonical JSON for hashing, with the epoch budget masked so a resume
    /// may extend it.
    pub fn hash_bytes(&self) -> Result<[u8; 32]> {
        let masked = TrainConfig { epochs: 0, ..self.clone() };
        Ok(config_hash(&serde_json::to_string(&masked)?))
    }
}

/// Mean loss components over a step or epoch; `view`, `frame`, and
/// `actionness` are unweighted, `total` is the weighted objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub view: f64,
    pub frame: f64,
    pub actionness: f64,
    pub total: f64,
}

/// Adam moment estimates, aligned with parameter registry order.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &crate::numerics::ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with decoupled weight decay; consumes the gradients
    /// accumulated in `params` and leaves the new values in place.
    pub fn apply(&mut self, params: &mut crate::numerics::ParamSet, lr: f64, wd: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let p = params.get(i);
            let shape = p.value.shape().to_vec();
            let mut m_new = Vec::with_capacity(p.value.numel());
            let mut v_new = Vec::with_capacity(p.value.numel());
            let mut value_new = Vec::with_capacity(p.value.numel());
            for (((&value, &grad), &m), &v) in
                p.value.data().iter().zip(p.grad.data()).zip(self.m[i].data()).zip(self.v[i].data())
            {
                let m1 = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad;
                let v1 = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad;
                let update = (m1 / bc1) / ((v1 / bc2).sqrt() + ADAM_EPS);
                m_new.push(m1);
                v_new.push(v1);
                value_new.push(value - lr * update - lr * wd * value);
            }
            self.m[i] = Tensor::new(shape.clone(), m_new).expect("finite moments");
            self.v[i] = Tensor::new(shape.clone(), v_new).expect("finite moments");
            params.set_value(i, Tensor::new(shape, value_new).expect("finite update"));
        }
    }
}

fn subset_views(mut example: TrainExample, views: &[usize]) -> TrainExample {
    let selected: Vec<Tensor> = views.iter().map(|&v| example.views[v].clone()).collect();
    example.views = selected;
    example
}

fn resolve_views(cfg: &TrainConfig, available: usize) -> Result<Vec<usize>> {
    match &cfg.views {
        None => Ok((0..available).collect()),
        Some(subset) => {
            for &v in subset {
                if v >= available {
                    return Err(TrainError::Config(format!(
                        "view {v} out of range ({available} views in dataset)"
                    )));
                }
            }
            Ok(subset.clone())
        }
    }
}

/// One optimization step over a batch: forward all views with shared
/// weights, build top-k selections and pseudo ground-truth per sample,
/// apply the combined objective, and take an Adam step.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let k = cfg.loss.resolve_k(cfg.frames);
    let need_selection = cfg.loss.beta1 != 0.0 || cfg.loss.beta2 != 0.0;

    let tape = Tape::new();
    let leaves = model.params.leaf_all(&tape)?;

    let mut view_rows = Vec::with_capacity(batch.len());
    let mut view_labels: Vec<bool> = Vec::with_capacity(batch.len() * model.cfg.num_classes);
    let mut frame_rows = Vec::new();
    let mut frame_labels: Vec<bool> = Vec::new();
    let mut gce_terms = Vec::new();

    for example in batch {
        let fwd = model.forward(&tape, &leaves, example)?;
        view_rows.push(fwd.view_logits);
        view_labels.extend_from_slice(&example.labels);
        if !need_selection {
            continue;
        }
        let sets = select_topk(&fwd.preds, k)?;
        match build_pseudo_gt(&sets, &example.labels, cfg.frames) {
            Ok(gt) => {
                if cfg.loss.beta1 != 0.0 {
                    let (_, mil_logits) = aggregate_video_scores(&tape, &fwd.preds, &sets)?;
                    frame_rows.push(mil_logits);
                    frame_labels.extend_from_slice(&example.labels);
                }
                if cfg.loss.beta2 != 0.0 {
                    gce_terms.push(gce_actionness_loss_var(
                        &tape,
                        fwd.preds.act_probs,
                        &gt.pos,
                        &gt.neg,
                        cfg.loss.q,
                    )?);
                }
            }
            // no positive class: frame-level and actionness losses skipped
            Err(AslError::DegenerateSample) => {}
            Err(e) => return Err(e.into()),
        }
    }

    let mut breakdown = LossBreakdown::default();
    let mut terms = Vec::new();

    if cfg.use_view_loss {
        let x = concat_rows(&tape, &view_rows)?;
        let lm = LogitMatrix::new(x.value(), view_labels)?;
        let term = two_way_loss_var(&tape, x, &lm, cfg.loss.alpha, cfg.loss.gamma)?;
        breakdown.view = term.scalar_value()?;
        terms.push((term, 1.0));
    }
    if cfg.loss.beta1 != 0.0 && !frame_rows.is_empty() {
        let x = concat_rows(&tape, &frame_rows)?;
        let lm = LogitMatrix::new(x.value(), frame_labels)?;
        let term = two_way_loss_var(&tape, x, &lm, cfg.loss.alpha, cfg.loss.gamma)?;
        breakdown.frame = term.scalar_value()?;
        terms.push((term, cfg.loss.beta1));
    }
    if cfg.loss.beta2 != 0.0 && !gce_terms.is_empty() {
        let mut acc = gce_terms[0];
        for term in &gce_terms[1..] {
            acc = acc.add(*term)?;
        }
        let mean = acc.affine(1.0 / gce_terms.len() as f64, 0.0)?;
        breakdown.actionness = mean.scalar_value()?;
        terms.push((mean, cfg.loss.beta2));
    }

    let mut total = None;
    for (term, weight) in terms {
        let weighted = if weight == 1.0 { term } else { term.affine(weight, 0.0)? };
        total = Some(match total {
            Some(acc) => crate::numerics::Var::add(acc, weighted)?,
            None => weighted,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.leaf(Tensor::scalar(0.0))?,
    };
    breakdown.total = total.scalar_value()?;
    if !breakdown.total.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: 0, step: 0, detail: format!("{breakdown:?}") });
    }

    let grads = tape.backward(total)?;
    model.params.zero_grads();
    model.params.accumulate(&grads, &leaves)?;
    adam.apply(&mut model.params, cfg.learning_rate, cfg.weight_decay);
    Ok(breakdown)
}

/// Evaluation scores and diagnostics over a list of dataset records.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub map_c: f64,
    pub map_s: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
    pub actionness_auc: Option<f64>,
    pub videos: usize,
}

/// Per-video dump of frame-level actionness and the pseudo-positive set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameDump {
    pub video: usize,
    pub labels: Vec<u8>,
    pub p_a: Vec<f64>,
    pub t_pos: Vec<usize>,
}

/// Evaluate on `indices` with deterministic uniform frame sampling.
/// Classification scores come from the view-level head (sigmoid), or from
/// the MIL-aggregated frame-level head when the view loss is disabled.
/// Localization AUC compares per-frame actionness against the planted
/// segment mask restricted to the views in use.
pub fn evaluate(
    model: &Model,
    reader: &DatasetReader,
    indices: &[usize],
    cfg: &TrainConfig,
    views: &[usize],
    mut dump: Option<&mut Vec<FrameDump>>,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(TrainError::Config("no evaluation records".into()));
    }
    let classes = model.cfg.num_classes;
    let k = cfg.loss.resolve_k(cfg.frames);
    let mut scores = Vec::with_capacity(indices.len() * classes);
    let mut labels = Vec::with_capacity(indices.len() * classes);
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;

    for &idx in indices {
        let meta = reader.read_meta(idx)?;
        let sampled = sample_test_indices(meta.frames, cfg.frames)?;
        let example = subset_views(reader.read_example(idx, &sampled)?, views);

        let tape = Tape::new();
        let leaves = model.params.leaf_all(&tape)?;
        let fwd = model.forward(&tape, &leaves, &example)?;

        let row = if cfg.use_view_loss {
            fwd.view_logits.value().sigmoid()?
        } else {
            let sets = select_topk(&fwd.preds, k)?;
            let (probs, _) = aggregate_video_scores(&tape, &fwd.preds, &sets)?;
            probs.value()
        };
        scores.extend_from_slice(row.data());
        labels.extend_from_slice(&example.labels);

        // localization against planted segments visible from the views in use
        let p_a: Vec<f64> = fwd.preds.act_probs.value().data().to_vec();
        let mask: Vec<bool> = sampled
            .iter()
            .map(|&raw| {
                meta.segments.iter().any(|seg| {
                    (seg.onset as usize..seg.offset as usize).contains(&raw)
                        && views.iter().any(|&v| seg.visible_views[v])
                })
            })
            .collect();
        if mask.iter().any(|&m| m) && mask.iter().any(|&m| !m) {
            auc_sum += actionness_auc(&p_a, &mask)?;
            auc_count += 1;
        }

        if let Some(sink) = dump.as_deref_mut() {
            let sets = select_topk(&fwd.preds, k)?;
            let t_pos = match build_pseudo_gt(&sets, &example.labels, cfg.frames) {
                Ok(gt) => gt.pos,
                Err(AslError::DegenerateSample) => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            sink.push(FrameDump {
                video: idx,
                labels: example.labels.iter().map(|&b| b as u8).collect(),
                p_a,
                t_pos,
            });
        }
    }

    let table = EvalTable::new(Tensor::new(vec![indices.len(), classes], scores)?, labels)
        .map_err(TrainError::Metrics)?;
    let c = map_c(&table)?;
    let s = map_s(&table)?;
    Ok(EvalReport {
        map_c: c.value,
        map_s: s.value,
        per_class_ap: c.per_item,
        excluded_classes: c.skipped,
        actionness_auc: if auc_count > 0 { Some(auc_sum / auc_count as f64) } else { None },
        videos: indices.len(),
    })
}

/// One line of the training log, written per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub view: f64,
    pub frame: f64,
    pub actionness: f64,
    pub total: f64,
    pub map_c: f64,
    pub map_s: f64,
    pub actionness_auc: Option<f64>,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub best_epoch: usize,
    pub best_map_c: f64,
    pub last_eval: EvalReport,
    pub best_eval: EvalReport,
    pub epochs: Vec<EpochLog>,
}

fn named_tensors(params: &crate::numerics::ParamSet, values: &[Tensor]) -> Vec<NamedTensor> {
    params
        .iter()
        .zip(values)
        .map(|(p, v)| NamedTensor { name: p.name.clone(), tensor: v.clone() })
        .collect()
}

fn set_params_by_name(model: &mut Model, tensors: &[NamedTensor]) -> Result<()> {
    if tensors.len() != model.params.len() {
        return Err(TrainError::BadCheckpoint(format!(
            "parameter count mismatch: {} vs {}",
            tensors.len(),
            model.params.len()
        )));
    }
    let values: Vec<Tensor> = model
        .params
        .iter()
        .zip(tensors)
        .map(|(p, nt)| {
            if p.name != nt.name || p.value.shape() != nt.tensor.shape() {
                Err(TrainError::BadCheckpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    p.name,
                    p.value.shape(),
                    nt.name,
                    nt.tensor.shape()
                )))
            } else {
                Ok(nt.tensor.clone())
            }
        })
        .collect::<Result<_>>()?;
    model.params.set_values(&values);
    Ok(())
}

/// Build the model for a dataset: dimensions come from the first record.
pub fn build_model(cfg: &TrainConfig, reader: &DatasetReader) -> Result<(Model, Vec<usize>)> {
    if reader.is_empty() {
        return Err(TrainError::Config("dataset has no records".into()));
    }
    let meta = reader.read_meta(0)?;
    let views = resolve_views(cfg, meta.views)?;
    let model_cfg = ModelConfig {
        encoder: cfg.encoder.clone(),
        num_classes: meta.classes,
        num_views: views.len(),
        channels: meta.channels,
        height: meta.height,
        width: meta.width,
        view_fusion: cfg.view_fusion,
        frame_fusion: cfg.frame_fusion,
    };
    let model = Model::init(model_cfg, cfg.seed)?;
    Ok((model, views))
}

/// Run the full training loop. Writes `train.log.jsonl`, a per-epoch
/// `state.bin`, and the best-epoch `checkpoint.bin` under `out_dir` when
/// given; `resume` continues from a previously written state file.
pub fn fit(
    cfg: &TrainConfig,
    data_dir: &Path,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let reader = DatasetReader::open(data_dir)?;
    let (mut model, views) = build_model(cfg, &reader)?;
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ LOOP_SEED_SALT);

    let train_idx = reader.indices_for(SplitTag::Train);
    let test_idx = reader.indices_for(SplitTag::Test);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(TrainError::Config("dataset must contain train and test records".into()));
    }
    let raw_len: Vec<usize> =
        (0..reader.len()).map(|i| reader.read_meta(i).map(|m| m.frames)).collect::<Result<_, _>>()?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let cfg_hash = cfg.hash_bytes()?;
    let mut start_epoch = 0usize;
    let mut best_epoch = 0usize;
    let mut best_map_c = f64::NEG_INFINITY;
    let mut best_params: Vec<Tensor> = model.params.values();

    if let Some(state_path) = resume {
        let snap = read_snapshot(state_path)?;
        if snap.meta.config_hash != cfg_hash {
            return Err(TrainError::ConfigMismatch);
        }
        set_params_by_name(&mut model, &snap.params)?;
        adam.m = snap.adam_m.iter().map(|nt| nt.tensor.clone()).collect();
        adam.v = snap.adam_v.iter().map(|nt| nt.tensor.clone()).collect();
        adam.step = snap.meta.adam_step;
        rng = ChaCha8Rng::seed_from_u64(snap.meta.rng_seed ^ LOOP_SEED_SALT);
        rng.set_word_pos(snap.meta.rng_word_pos);
        start_epoch = snap.meta.epochs_done as usize;
        best_epoch = snap.meta.best_epoch as usize;
        best_map_c = snap.meta.best_map_c;
        best_params = snap.best_params.iter().map(|nt| nt.tensor.clone()).collect();
        if best_params.len() != model.params.len() {
            return Err(TrainError::BadCheckpoint("state missing best parameters".into()));
        }
        log::info!("resumed at epoch {start_epoch} (best {best_map_c:.4} @ {best_epoch})");
    }

    let mut log_file = match out_dir {
        Some(dir) => {
            let path = dir.join(TRAIN_LOG_FILE);
            let file = if resume.is_some() {
                std::fs::OpenOptions::new().create(true).append(true).open(path)?
            } else {
                std::fs::File::create(path)?
            };
            Some(file)
        }
        None => None,
    };

    let mut epoch_logs = Vec::new();
    let mut last_eval = None;

    for epoch in start_epoch..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let indices = sample_train_indices(raw_len[idx], cfg.frames, &mut rng)?;
                batch.push(subset_views(reader.read_example(idx, &indices)?, &views));
            }
            let breakdown = match train_step(&mut model, &mut adam, &batch, cfg) {
                Ok(b) => b,
                Err(TrainError::NonFiniteLoss { detail, .. }) => {
                    let err = TrainError::NonFiniteLoss { epoch: epoch + 1, step, detail };
                    if let Some(dir) = out_dir {
                        let dump = serde_json::json!({
                            "error": err.to_string(),
                            "epoch": epoch + 1,
                            "step": step,
                        });
                        std::fs::write(dir.join(DIAGNOSTIC_FILE), serde_json::to_vec_pretty(&dump)?)?;
                    }
                    return Err(err);
                }
                Err(e) => return Err(e),
            };
            sums.view += breakdown.view;
            sums.frame += breakdown.frame;
            sums.actionness += breakdown.actionness;
            sums.total += breakdown.total;
            steps += 1;
        }

        let eval = evaluate(&model, &reader, &test_idx, cfg, &views, None)?;
        if eval.map_c > best_map_c {
            best_map_c = eval.map_c;
            best_epoch = epoch + 1;
            best_params = model.params.values();
        }
        let n = steps.max(1) as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            view: sums.view / n,
            frame: sums.frame / n,
            actionness: sums.actionness / n,
            total: sums.total / n,
            map_c: eval.map_c,
            map_s: eval.map_s,
            actionness_auc: eval.actionness_auc,
        };
        log::info!(
            "epoch {}: total {:.4} mAP_C {:.4} mAP_S {:.4}",
            entry.epoch,
            entry.total,
            entry.map_c,
            entry.map_s
        );
        if let Some(file) = log_file.as_mut() {
            serde_json::to_writer(&mut *file, &entry)?;
            file.write_all(b"\n")?;
        }
        epoch_logs.push(entry);
        last_eval = Some(eval);

        if let Some(dir) = out_dir {
            let state = Snapshot {
                config_json: serde_json::to_string(cfg)?,
                meta: CheckpointMeta {
                    config_hash: cfg_hash,
                    epochs_done: (epoch + 1) as u32,
                    best_epoch: best_epoch as u32,
                    best_map_c,
                    adam_step: adam.step,
                    rng_seed: cfg.seed,
                    rng_word_pos: rng.get_word_pos(),
                },
                params: named_tensors(&model.params, &model.params.values()),
                adam_m: named_tensors(&model.params, &adam.m),
                adam_v: named_tensors(&model.params, &adam.v),
                best_params: named_tensors(&model.params, &best_params),
            };
            write_snapshot(&state, &dir.join(STATE_FILE))?;
        }
    }

    // evaluation-only run, or metrics for the best epoch
    model.params.set_values(&best_params);
    let best_eval = evaluate(&model, &reader, &test_idx, cfg, &views, None)?;
    if cfg.epochs == 0 {
        best_map_c = best_eval.map_c;
    }
    let last_eval = last_eval.unwrap_or_else(|| best_eval.clone());

    if let Some(dir) = out_dir {
        let snapshot = Snapshot {
            config_json: serde_json::to_string(cfg)?,
            meta: CheckpointMeta {
                config_hash: cfg_hash,
                epochs_done: cfg.epochs as u32,
                best_epoch: best_epoch as u32,
                best_map_c,
                adam_step: adam.step,
                rng_seed: cfg.seed,
                rng_word_pos: 0,
            },
            params: named_tensors(&model.params, &best_params),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            best_params: Vec::new(),
        };
        let index = write_snapshot(&snapshot, &dir.join(CHECKPOINT_FILE))?;
        let mut index_file = std::fs::File::create(dir.join(CHECKPOINT_INDEX_FILE))?;
        for (name, shape, offset) in index {
            let line = serde_json::json!({ "name": name, "shape": shape, "offset": offset });
            serde_json::to_writer(&mut index_file, &line)?;
            index_file.write_all(b"\n")?;
        }
    }

    Ok(FitOutcome { best_epoch, best_map_c, last_eval, best_eval, epochs: epoch_logs })
}

/// Load an evaluation checkpoint: rebuild the model from the embedded
/// config and the dataset's dimensions, then restore the stored parameters.
pub fn load_checkpoint(
    checkpoint_path: &Path,
    reader: &DatasetReader,
) -> Result<(TrainConfig, Model, Vec<usize>)> {
    let snap = read_snapshot(checkpoint_path)?;
    let cfg: TrainConfig = serde_json::from_str(&snap.config_json)
        .map_err(|e| TrainError::BadCheckpoint(format!("embedded config: {e}")))?;
    let (mut model, views) = build_model(&cfg, reader)?;
    set_params_by_name(&mut model, &snap.params)?;
    Ok((cfg, model, views))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, sample_example, SynthConfig, WeakView};

    fn toy_synth(classes: usize, views: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            num_views: views,
            num_classes: classes,
            frames_per_video: 12,
            height: 8,
            width: 8,
            channels: 3,
            videos: 8,
            max_concurrent_actions: classes.min(2),
            visibility_prob: 1.0,
            noise_std: 0.05,
            train_ratio: 0.5,
            seed,
        }
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig { patch_size: 4, d_s: 6, d_t: 8, heads: 2, layers: 1, ff_dim: 8 },
            frames: 6,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    fn toy_batch(synth: &SynthConfig, cfg: &TrainConfig) -> Vec<TrainExample> {
        let videos = generate(synth).unwrap();
        let indices = sample_test_indices(synth.frames_per_video, cfg.frames).unwrap();
        videos.iter().map(|v| sample_example(WeakView::from(v), &indices)).collect()
    }

    fn toy_model(synth: &SynthConfig, cfg: &TrainConfig) -> Model {
        let model_cfg = ModelConfig {
            encoder: cfg.encoder.clone(),
            num_classes: synth.num_classes,
            num_views: synth.num_views,
            channels: synth.channels,
            height: synth.height,
            width: synth.width,
            view_fusion: cfg.view_fusion,
            frame_fusion: cfg.frame_fusion,
        };
        Model::init(model_cfg, cfg.seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_and_decay_leave_parameters_bitwise_unchanged() {
        let synth = toy_synth(3, 2, 1);
        let cfg = TrainConfig { learning_rate: 0.0, weight_decay: 0.0, ..toy_cfg() };
        let mut model = toy_model(&synth, &cfg);
        let before = model.params.values();
        let mut adam = AdamState::new(&model.params);
        let batch = toy_batch(&synth, &cfg);
        train_step(&mut model, &mut adam, &batch[..4], &cfg).unwrap();
        for (a, b) in before.iter().zip(model.params.values().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn one_step_is_bitwise_reproducible() {
        let synth = toy_synth(3, 2, 2);
        let cfg = toy_cfg();
        let batch = toy_batch(&synth, &cfg);
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut model = toy_model(&synth, &cfg);
            let mut adam = AdamState::new(&model.params);
            let breakdown = train_step(&mut model, &mut adam, &batch[..4], &cfg).unwrap();
            runs.push((breakdown, model.params.values()));
        }
        assert_eq!(runs[0].0, runs[1].0);
        for (a, b) in runs[0].1.iter().zip(runs[1].1.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fifty_steps_reduce_loss_on_separable_toy() {
        let synth = SynthConfig { noise_std: 0.0, ..toy_synth(2, 1, 3) };
        let cfg = TrainConfig { learning_rate: 1e-3, weight_decay: 0.0, ..toy_cfg() };
        let mut model = toy_model(&synth, &cfg);
        let mut adam = AdamState::new(&model.params);
        let batch = toy_batch(&synth, &cfg);
        let first = train_step(&mut model, &mut adam, &batch, &cfg).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = train_step(&mut model, &mut adam, &batch, &cfg).unwrap();
        }
        assert!(
            last.total < first.total,
            "loss should fall: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn unused_heads_stay_fixed_without_weight_decay() {
        // beta1 = beta2 = 0: the frame/actionness heads get no gradient
        let synth = toy_synth(3, 2, 4);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            loss: LossConfig { beta1: 0.0, beta2: 0.0, ..LossConfig::default() },
            ..toy_cfg()
        };
        let mut model = toy_model(&synth, &cfg);
        let head_idxs =
            [model.heads.class_w, model.heads.class_b, model.heads.act_w, model.heads.act_b];
        let before: Vec<Tensor> = head_idxs.iter().map(|&i| model.params.get(i).value.clone()).collect();
        let view_before = model.params.get(model.view_w).value.clone();
        let mut adam = AdamState::new(&model.params);
        let batch = toy_batch(&synth, &cfg);
        for _ in 0..3 {
            train_step(&mut model, &mut adam, &batch[..4], &cfg).unwrap();
        }
        for (&i, b) in head_idxs.iter().zip(&before) {
            assert_eq!(&model.params.get(i).value, b, "unused head must not move");
        }
        assert_ne!(model.params.get(model.view_w).value, view_before);
    }

    #[test]
    fn degenerate_batch_without_positives_still_steps() {
        // all-negative labels: frame and actionness losses are skipped,
        // view loss still applies
        let synth = toy_synth(3, 2, 5);
        let cfg = toy_cfg();
        let mut model = toy_model(&synth, &cfg);
        let mut adam = AdamState::new(&model.params);
        let mut batch = toy_batch(&synth, &cfg);
        for example in &mut batch {
            example.labels = vec![false; 3];
        }
        let breakdown = train_step(&mut model, &mut adam, &batch[..4], &cfg).unwrap();
        assert_eq!(breakdown.frame, 0.0);
        assert_eq!(breakdown.actionness, 0.0);
        // every positive set is empty, so each discrimination term is zero too
        assert_eq!(breakdown.view, 0.0);
        assert_eq!(breakdown.total, 0.0);
    }

    #[test]
    fn config_hash_ignores_epochs_only() {
        let a = toy_cfg();
        let b = TrainConfig { epochs: 99, ..a.clone() };
        let c = TrainConfig { seed: 123, ..a.clone() };
        assert_eq!(a.hash_bytes().unwrap(), b.hash_bytes().unwrap());
        assert_ne!(a.hash_bytes().unwrap(), c.hash_bytes().unwrap());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(TrainConfig { batch_size: 0, ..toy_cfg() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..toy_cfg() }.validate().is_err());
        assert!(TrainConfig { views: Some(vec![]), ..toy_cfg() }.validate().is_err());
        let bad_loss = LossConfig { q: 1.5, ..LossConfig::default() };
        assert!(TrainConfig { loss: bad_loss, ..toy_cfg() }.validate().is_err());
    }
}
