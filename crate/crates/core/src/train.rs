//! Two-stage training, the sparsity-adaptive sampler, and the run
//! configuration file format.
//!
//! Stage 1 trains the feature extractor, box detector, and
//! interactiveness head with `L_det + L_int`; stage 2 fine-tunes the
//! extractor and detector together with the verb decoder under
//! `L_det + L_verb`, leaving the interactiveness parameters untouched.
//! Everything is single-threaded and seeded, so two runs with the same
//! config are bit-identical.

use crate::losses::{
    bipartite_match, build_gt_pairs, detection_loss, interactiveness_loss, part_label_loss,
    verb_loss, DetectionVars, LossReport, LossWeights, MatchError, PredValues,
};
use crate::model::{
    encoder_forward, detector_forward, grid_pos, init_model, interactiveness_head_forward,
    scene_part_masks, verb_forward, EncoderInput, IntScheme, ModelConfig, ModelError,
};
use crate::nn::{AdamW, Checkpoint, ParamStore, Session, Trainable};
use crate::scene::{render_scene, tag_hard_cases, Dataset};
use crate::tape::Matrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}, scene {scene}")]
    Diverged { epoch: usize, scene: u64 },
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset uses {found} verb/object classes but the model expects {expected}")]
    VocabMismatch { found: usize, expected: usize },
    #[error("bad config: {0}")]
    Config(String),
}

/// Full run configuration: architecture, loss weights, schedule, seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// No-object class weight inside the classification loss.
    pub noobj_weight: f64,
    /// Sparse:crowded sampling ratio is 1:alpha.
    pub alpha: f64,
    pub lr: f64,
    /// Learning-rate multiplier applied at two thirds of stage-1 epochs.
    pub lr_drop: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub seed: u64,
    pub scheme: IntScheme,
    /// `false` forces uniform sampling regardless of `alpha`.
    pub sampler_enabled: bool,
    pub part_supervision: bool,
    pub nis_threshold: f64,
    pub nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lambda1: 1.0,
            lambda2: 2.5,
            lambda3: 1.0,
            noobj_weight: 0.1,
            alpha: 3.0,
            lr: 1e-4,
            lr_drop: 0.1,
            weight_decay: 1e-4,
            batch_size: 2,
            stage1_epochs: 30,
            stage2_epochs: 10,
            seed: 0,
            scheme: IntScheme::Merged,
            sampler_enabled: true,
            part_supervision: false,
            nis_threshold: 0.1,
            nms_iou: 0.6,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            l1: self.lambda1,
            giou: self.lambda2,
            cls: self.lambda3,
            noobj: self.noobj_weight,
        }
    }
}

/// Parses the plain `key = value` config format (`#` comments allowed).
/// Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<TrainConfig, TrainError> {
    let mut cfg = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            TrainError::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| TrainError::Config(format!("line {}: {what}", lineno + 1));
        let as_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad("expected a number"));
        let as_usize = |v: &str| v.parse::<usize>().map_err(|_| bad("expected an integer"));
        let as_bool = |v: &str| match v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(bad("expected true/false")),
        };
        match key {
            "lambda1" => cfg.lambda1 = as_f64(value)?,
            "lambda2" => cfg.lambda2 = as_f64(value)?,
            "lambda3" => cfg.lambda3 = as_f64(value)?,
            "noobj_weight" => cfg.noobj_weight = as_f64(value)?,
            "alpha" => cfg.alpha = as_f64(value)?,
            "nq" => cfg.model.n_queries = as_usize(value)?,
            "dc" => cfg.model.d_model = as_usize(value)?,
            "heads" => cfg.model.heads = as_usize(value)?,
            "ffn_width" => cfg.model.ffn_width = as_usize(value)?,
            "enc_layers" => cfg.model.enc_layers = as_usize(value)?,
            "box_layers" => cfg.model.box_layers = as_usize(value)?,
            "verb_layers" => cfg.model.verb_layers = as_usize(value)?,
            "n_obj" => cfg.model.n_obj = as_usize(value)?,
            "n_verb" => cfg.model.n_verb = as_usize(value)?,
            "image_size" => cfg.model.image_size = as_usize(value)? as u32,
            "grid_factor" => cfg.model.grid_factor = as_usize(value)?,
            "dropout" => cfg.model.dropout = as_f64(value)?,
            "stage1_epochs" => cfg.stage1_epochs = as_usize(value)?,
            "stage2_epochs" => cfg.stage2_epochs = as_usize(value)?,
            "lr" => cfg.lr = as_f64(value)?,
            "lr_drop" => cfg.lr_drop = as_f64(value)?,
            "weight_decay" => cfg.weight_decay = as_f64(value)?,
            "batch_size" => cfg.batch_size = as_usize(value)?,
            "seed" => cfg.seed = as_usize(value)? as u64,
            "nis_threshold" => cfg.nis_threshold = as_f64(value)?,
            "nms_iou" => cfg.nms_iou = as_f64(value)?,
            "part_supervision" => cfg.part_supervision = as_bool(value)?,
            "border_drop" => cfg.model.border_drop = as_bool(value)?,
            "sampler" => cfg.sampler_enabled = as_bool(value)?,
            "mask_fallback" => cfg.model.mask_fallback = as_bool(value)?,
            other => return Err(TrainError::Config(format!("unknown key `{other}`"))),
        }
    }
    cfg.model
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Writes a config back in the same `key = value` format.
pub fn write_config(cfg: &TrainConfig) -> String {
    format!(
        "lambda1 = {}\nlambda2 = {}\nlambda3 = {}\nnoobj_weight = {}\nalpha = {}\n\
         nq = {}\ndc = {}\nheads = {}\nffn_width = {}\nenc_layers = {}\nbox_layers = {}\n\
         verb_layers = {}\nn_obj = {}\nn_verb = {}\nimage_size = {}\ngrid_factor = {}\n\
         dropout = {}\nstage1_epochs = {}\nstage2_epochs = {}\nlr = {}\nlr_drop = {}\n\
         weight_decay = {}\nbatch_size = {}\nseed = {}\nnis_threshold = {}\nnms_iou = {}\n\
         part_supervision = {}\nborder_drop = {}\nsampler = {}\nmask_fallback = {}\n",
        cfg.lambda1,
        cfg.lambda2,
        cfg.lambda3,
        cfg.noobj_weight,
        cfg.alpha,
        cfg.model.n_queries,
        cfg.model.d_model,
        cfg.model.heads,
        cfg.model.ffn_width,
        cfg.model.enc_layers,
        cfg.model.box_layers,
        cfg.model.verb_layers,
        cfg.model.n_obj,
        cfg.model.n_verb,
        cfg.model.image_size,
        cfg.model.grid_factor,
        cfg.model.dropout,
        cfg.stage1_epochs,
        cfg.stage2_epochs,
        cfg.lr,
        cfg.lr_drop,
        cfg.weight_decay,
        cfg.batch_size,
        cfg.seed,
        cfg.nis_threshold,
        cfg.nms_iou,
        cfg.part_supervision,
        cfg.model.border_drop,
        cfg.sampler_enabled,
        cfg.model.mask_fallback,
    )
}

/// Weighted sampling with replacement: weight 1 for sparse scenes and
/// `alpha` for crowded ones, deterministic under the seed.
pub fn sparsity_adaptive_sampler(
    crowded: &[bool],
    alpha: f64,
    seed: u64,
    draws: usize,
) -> Result<Vec<usize>, TrainError> {
    if crowded.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let weights: Vec<f64> = crowded
        .iter()
        .map(|&c| if c { alpha } else { 1.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok((0..draws)
        .map(|_| {
            let x = rng.gen_range(0.0..total);
            cumulative.partition_point(|&c| c <= x).min(weights.len() - 1)
        })
        .collect())
}

/// Per-epoch log entry, serialized as JSONL by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub stage: u32,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossReport,
    /// Fraction of sampled scenes that were crowded this epoch.
    pub crowded_fraction: f64,
    pub fallback_events: usize,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

fn add_reports(acc: &mut LossReport, one: &LossReport) {
    acc.l_b += one.l_b;
    acc.l_u += one.l_u;
    acc.l_c += one.l_c;
    acc.l_det += one.l_det;
    acc.l_int += one.l_int;
    acc.l_verb += one.l_verb;
    if let Some(p) = one.l_part {
        *acc.l_part.get_or_insert(0.0) += p;
    }
}

fn scale_report(acc: &mut LossReport, k: f64) {
    acc.l_b *= k;
    acc.l_u *= k;
    acc.l_c *= k;
    acc.l_det *= k;
    acc.l_int *= k;
    acc.l_verb *= k;
    if let Some(p) = acc.l_part.as_mut() {
        *p *= k;
    }
}

fn checkpoint_header(cfg: &TrainConfig, stage: u32) -> serde_json::Value {
    serde_json::json!({
        "seed": cfg.seed,
        "stage": stage,
        "config": cfg,
    })
}

/// Runs one training stage over the dataset.
fn run_stage(
    mut params: ParamStore,
    dataset: &Dataset,
    cfg: &TrainConfig,
    stage: u32,
) -> Result<(ParamStore, Vec<EpochLog>), TrainError> {
    if dataset.images.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let weights = cfg.loss_weights();
    let crowded: Vec<bool> = dataset
        .images
        .iter()
        .map(|s| tag_hard_cases(s).crowded)
        .collect();
    let exclusions = match stage {
        1 => vec!["verb.".to_string()],
        _ => vec!["int.".to_string()],
    };
    let epochs = match stage {
        1 => cfg.stage1_epochs,
        _ => cfg.stage2_epochs,
    };
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(epochs);
    let drop_at = epochs.saturating_mul(2) / 3;

    for epoch in 0..epochs {
        if epoch == drop_at && epoch > 0 {
            opt.lr = cfg.lr * cfg.lr_drop;
        }
        let alpha = if cfg.sampler_enabled { cfg.alpha } else { 1.0 };
        let order = sparsity_adaptive_sampler(
            &crowded,
            alpha,
            cfg.seed ^ (stage as u64) << 32 ^ epoch as u64,
            dataset.images.len(),
        )?;
        let crowded_frac =
            order.iter().filter(|&&i| crowded[i]).count() as f64 / order.len() as f64;

        let mut epoch_report = LossReport::default();
        let mut fallback_events = 0usize;
        let mut batch_grads: BTreeMap<String, Matrix> = BTreeMap::new();
        let mut batch_fill = 0usize;

        for &scene_idx in &order {
            let scene = &dataset.images[scene_idx];
            let (report, grads, fallbacks) =
                scene_step(&params, scene, cfg, &weights, &exclusions, stage)?;
            if !report.l_det.is_finite()
                || !report.l_int.is_finite()
                || !report.l_verb.is_finite()
            {
                return Err(TrainError::Diverged {
                    epoch,
                    scene: scene.id,
                });
            }
            add_reports(&mut epoch_report, &report);
            fallback_events += fallbacks;
            for (name, g) in grads {
                batch_grads
                    .entry(name)
                    .and_modify(|acc| *acc += &g)
                    .or_insert(g);
            }
            batch_fill += 1;
            if batch_fill == cfg.batch_size {
                for g in batch_grads.values_mut() {
                    g.mapv_inplace(|v| v / cfg.batch_size as f64);
                }
                opt.step(&mut params, &batch_grads);
                batch_grads.clear();
                batch_fill = 0;
            }
        }
        if batch_fill > 0 {
            for g in batch_grads.values_mut() {
                g.mapv_inplace(|v| v / batch_fill as f64);
            }
            opt.step(&mut params, &batch_grads);
        }
        scale_report(&mut epoch_report, 1.0 / order.len() as f64);
        history.push(EpochLog {
            stage,
            epoch,
            lr: opt.lr,
            losses: epoch_report,
            crowded_fraction: crowded_frac,
            fallback_events,
        });
    }
    Ok((params, history))
}

/// One scene's forward/backward pass: returns the loss report, parameter
/// gradients, and the number of empty-mask fallbacks.
fn scene_step(
    params: &ParamStore,
    scene: &crate::scene::SceneAnnotation,
    cfg: &TrainConfig,
    weights: &LossWeights,
    exclusions: &[String],
    stage: u32,
) -> Result<(LossReport, BTreeMap<String, Matrix>, usize), TrainError> {
    let image = render_scene(scene);
    let mut sess = Session::new(params, Trainable::Excluding(exclusions.to_vec()));
    if cfg.model.dropout > 0.0 {
        sess.enable_dropout(cfg.model.dropout, cfg.seed ^ scene.id);
    }
    let pos = grid_pos(&mut sess, &cfg.model);
    let grid = encoder_forward(&mut sess, &cfg.model, EncoderInput::Image(&image), pos);
    let detector = detector_forward(&mut sess, &cfg.model, grid, pos);

    let gts = build_gt_pairs(scene, cfg.model.n_verb);
    let preds = PredValues {
        h_boxes: sess.tape.value(detector.h_boxes).clone(),
        o_boxes: sess.tape.value(detector.o_boxes).clone(),
        class_probs: sess.tape.value(detector.class_probs).clone(),
    };
    let matching = bipartite_match(&preds, &gts, weights)?;

    let det_vars = DetectionVars {
        h_boxes: detector.h_boxes,
        o_boxes: detector.o_boxes,
        class_logits: detector.class_logits,
    };
    let det = detection_loss(&mut sess.tape, det_vars, &gts, &matching, weights);

    let mut report = LossReport {
        l_b: sess.tape.scalar(det.l_b),
        l_u: sess.tape.scalar(det.l_u),
        l_c: sess.tape.scalar(det.l_c),
        l_det: sess.tape.scalar(det.l_det),
        ..Default::default()
    };

    let total = if stage == 1 {
        let part_masks = scene_part_masks(scene, &cfg.model);
        let int_out = interactiveness_head_forward(
            &mut sess,
            &cfg.model,
            cfg.scheme,
            grid,
            pos,
            &detector,
            &part_masks,
        )
        .map_err(ModelError::Attention)?;
        let l_int = interactiveness_loss(&mut sess.tape, int_out.int_logits(), &gts, &matching);
        report.l_int = sess.tape.scalar(l_int);
        let mut total = sess.tape.add(det.l_det, l_int);
        if cfg.part_supervision {
            if let Some(lp) = part_label_loss(&mut sess.tape, int_out.part_logits(), &gts, &matching)
            {
                report.l_part = Some(sess.tape.scalar(lp));
                total = sess.tape.add(total, lp);
            }
        }
        total
    } else {
        let verbs = verb_forward(&mut sess, &cfg.model, grid, pos, detector.embeddings);
        let l_verb = verb_loss(&mut sess.tape, verbs.verb_logits, &gts, &matching);
        report.l_verb = sess.tape.scalar(l_verb);
        sess.tape.add(det.l_det, l_verb)
    };

    let grads = sess.tape.backward(total);
    let param_grads = sess.param_grads(&grads);
    Ok((report, param_grads, sess.fallback_events.len()))
}

/// Stage 1: box detector plus interactiveness classifier.
pub fn train_stage1(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.model
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    validate_vocab(dataset, cfg)?;
    let params = init_model(&cfg.model, cfg.seed);
    let (params, history) = run_stage(params, dataset, cfg, 1)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            header: checkpoint_header(cfg, 1),
            params,
        },
        history,
    })
}

/// Stage 2: verb classifier fine-tuning from a stage-1 checkpoint. The
/// interactiveness subtree is frozen and must come out bit-identical.
pub fn train_stage2(
    dataset: &Dataset,
    cfg: &TrainConfig,
    stage1: &Checkpoint,
) -> Result<TrainOutcome, TrainError> {
    cfg.model
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    validate_vocab(dataset, cfg)?;
    let before_hash = stage1.params.content_hash("int.");
    let (params, history) = run_stage(stage1.params.clone(), dataset, cfg, 2)?;
    debug_assert_eq!(
        params.content_hash("int."),
        before_hash,
        "stage 2 must not touch interactiveness parameters"
    );
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            header: checkpoint_header(cfg, 2),
            params,
        },
        history,
    })
}

fn validate_vocab(dataset: &Dataset, cfg: &TrainConfig) -> Result<(), TrainError> {
    for scene in &dataset.images {
        for obj in &scene.objects {
            if obj.category as usize > cfg.model.n_obj {
                return Err(TrainError::VocabMismatch {
                    found: obj.category as usize,
                    expected: cfg.model.n_obj,
                });
            }
        }
        for int in &scene.interactions {
            if int.verbs.len() > cfg.model.n_verb {
                return Err(TrainError::VocabMismatch {
                    found: int.verbs.len(),
                    expected: cfg.model.n_verb,
                });
            }
        }
    }
    Ok(())
}
