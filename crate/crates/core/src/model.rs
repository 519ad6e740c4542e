//! The assembled detection pipeline: feature extractor, box decoder with
//! its heads, verb decoder, and the interactiveness head, plus the
//! geometry glue that turns predictions into attention masks.

use crate::attention::{
    decoder_stack, prediction_head, sinusoidal_pos_encoding, AttentionError, HeadKind, StackMasks,
};
use crate::geometry::{GridSpec, PixelBox};
use crate::interactiveness::{
    interactiveness_forward, intuitive_forward, IntHeadOptions, IntuitiveForward, MaskMode,
    MergedForward, DEC2_DEPTH,
};
use crate::mask::{
    border_random_drop, build_part_masks, build_progressive_masks, ProgressiveMasks, TokenMask,
    NUM_PARTS,
};
use crate::nn::{Initializer, ParamStore, Session};
use crate::scene::{render_scene, RenderedScene, SceneAnnotation};
use crate::tape::{Matrix, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Architecture hyperparameters. The interactiveness decoder is always
/// three layers deep; everything else is configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub n_queries: usize,
    pub n_obj: usize,
    pub n_verb: usize,
    pub enc_layers: usize,
    pub box_layers: usize,
    pub verb_layers: usize,
    pub importance_layers: usize,
    pub image_size: u32,
    pub grid_factor: usize,
    pub dropout: f64,
    /// Replace empty attention masks with all-ones instead of failing.
    pub mask_fallback: bool,
    /// Randomly drop part-mask border tokens by overlap ratio.
    pub border_drop: bool,
    pub border_drop_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ffn_width: 256,
            n_queries: 8,
            n_obj: 3,
            n_verb: 4,
            enc_layers: 1,
            box_layers: 2,
            verb_layers: 2,
            importance_layers: 1,
            image_size: 128,
            grid_factor: 8,
            dropout: 0.0,
            mask_fallback: true,
            border_drop: false,
            border_drop_seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

impl ModelConfig {
    pub fn grid(&self) -> GridSpec {
        GridSpec::with_factor(
            self.image_size as usize,
            self.image_size as usize,
            self.grid_factor,
        )
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by 4 (positional encoding)",
                self.d_model
            )));
        }
        if self.grid_factor == 0 || self.image_size as usize % self.grid_factor != 0 {
            return Err(ModelError::Config(format!(
                "image size {} not divisible by grid factor {}",
                self.image_size, self.grid_factor
            )));
        }
        Ok(())
    }
}

/// Registers every model parameter deterministically from a seed.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let d = cfg.d_model;
    let patch = cfg.grid_factor * cfg.grid_factor * 3;

    init.linear(&mut store, "stem.conv1", patch, d);
    init.linear(&mut store, "stem.conv2", d, d);
    crate::attention::init::encoder_stack(&mut init, &mut store, "enc", cfg.enc_layers, d, cfg.ffn_width);

    init.xavier(&mut store, "query.embed", cfg.n_queries, d);
    crate::attention::init::decoder_stack(&mut init, &mut store, "boxdec", cfg.box_layers, d, cfg.ffn_width);
    crate::attention::init::mlp3(&mut init, &mut store, "head.hbox", d, 4);
    crate::attention::init::mlp3(&mut init, &mut store, "head.obox", d, 4);
    init.linear(&mut store, "head.cls", d, cfg.n_obj + 1);

    crate::attention::init::decoder_stack(&mut init, &mut store, "verb.dec", cfg.verb_layers, d, cfg.ffn_width);
    init.linear(&mut store, "verb.head", d, cfg.n_verb);

    crate::interactiveness::init_interactiveness(
        &mut init,
        &mut store,
        d,
        cfg.ffn_width,
        cfg.importance_layers,
    );
    store
}

/// Input to the feature extractor.
pub enum EncoderInput<'a> {
    /// A rendered image; the strided convolutional stem tokenizes it.
    Image(&'a RenderedScene),
    /// Precomputed `(tokens, d_model)` features injected directly,
    /// bypassing the stem and encoder (unit tests, gradient checks).
    Features(Matrix),
}

/// Positional encoding for the configured grid, as a tape constant.
pub fn grid_pos(sess: &mut Session, cfg: &ModelConfig) -> Var {
    let spec = cfg.grid();
    sess.tape
        .constant(sinusoidal_pos_encoding(spec.grid_h, spec.grid_w, cfg.d_model))
}

/// Feature extraction: patchify conv, pointwise conv, then the shallow
/// transformer encoder. Injected features pass through unchanged.
pub fn encoder_forward(sess: &mut Session, cfg: &ModelConfig, input: EncoderInput, pos: Var) -> Var {
    match input {
        EncoderInput::Features(m) => {
            let spec = cfg.grid();
            assert_eq!(m.dim(), (spec.tokens(), cfg.d_model), "injected feature shape");
            sess.tape.leaf(m)
        }
        EncoderInput::Image(img) => {
            let spec = cfg.grid();
            assert_eq!(img.width, spec.image_w as usize);
            assert_eq!(img.height, spec.image_h as usize);
            let pixels = sess.tape.constant(img.pixels.clone());
            let patches = sess.tape.im2col(
                pixels,
                img.height,
                img.width,
                3,
                cfg.grid_factor,
                cfg.grid_factor,
            );
            let h = sess.linear(patches, "stem.conv1");
            let h = sess.tape.relu(h);
            let tokens = sess.linear(h, "stem.conv2");
            crate::attention::encoder_stack(sess, "enc", cfg.enc_layers, cfg.heads, tokens, pos)
        }
    }
}

/// Box-decoder outputs for one image.
pub struct DetectorOutput {
    /// Decoded embeddings, one row per proposal; query input to the
    /// downstream decoders.
    pub embeddings: Var,
    /// `N x 4` normalized `(cx, cy, w, h)` human boxes.
    pub h_boxes: Var,
    pub o_boxes: Var,
    pub class_logits: Var,
    pub class_probs: Var,
}

pub fn detector_forward(sess: &mut Session, cfg: &ModelConfig, grid: Var, pos: Var) -> DetectorOutput {
    let queries = sess.p("query.embed");
    let embeddings = decoder_stack(
        sess,
        "boxdec",
        cfg.box_layers,
        cfg.heads,
        queries,
        grid,
        pos,
        StackMasks::None,
    );
    let h_boxes = prediction_head(sess, HeadKind::HumanBox, "head.hbox", embeddings);
    let o_boxes = prediction_head(sess, HeadKind::ObjectBox, "head.obox", embeddings);
    let class_logits = sess.linear(embeddings, "head.cls");
    let class_probs = sess.tape.softmax_rows(class_logits);
    DetectorOutput {
        embeddings,
        h_boxes,
        o_boxes,
        class_logits,
        class_probs,
    }
}

pub struct VerbOutput {
    pub verb_logits: Var,
    pub verb_probs: Var,
}

pub fn verb_forward(
    sess: &mut Session,
    cfg: &ModelConfig,
    grid: Var,
    pos: Var,
    embeddings: Var,
) -> VerbOutput {
    let v = decoder_stack(
        sess,
        "verb.dec",
        cfg.verb_layers,
        cfg.heads,
        embeddings,
        grid,
        pos,
        StackMasks::None,
    );
    let verb_logits = sess.linear(v, "verb.head");
    let verb_probs = sess.tape.sigmoid(verb_logits);
    VerbOutput {
        verb_logits,
        verb_probs,
    }
}

/// The six body-part saliency masks of a scene, with the optional border
/// random drop applied per part.
pub fn scene_part_masks(scene: &SceneAnnotation, cfg: &ModelConfig) -> [TokenMask; NUM_PARTS] {
    let spec = cfg.grid();
    let persons = scene.person_part_boxes();
    let mut masks = build_part_masks(&persons, &spec);
    if cfg.border_drop {
        for (k, mask) in masks.iter_mut().enumerate() {
            let boxes: Vec<PixelBox> = persons.iter().flat_map(|p| p[k].iter().copied()).collect();
            *mask = border_random_drop(
                mask,
                &boxes,
                &spec,
                cfg.border_drop_seed ^ (k as u64).wrapping_mul(0x9e3779b97f4a7c15),
            );
        }
    }
    masks
}

/// Progressive mask stacks for every proposal, rasterized from the
/// predicted (detached) boxes.
pub fn proposal_progressive_masks(
    part_masks: &[TokenMask; NUM_PARTS],
    h_boxes: &Matrix,
    o_boxes: &Matrix,
    spec: &GridSpec,
) -> Vec<ProgressiveMasks> {
    (0..h_boxes.nrows())
        .map(|i| {
            let hb = PixelBox::from_normalized_cxcywh(
                [h_boxes[[i, 0]], h_boxes[[i, 1]], h_boxes[[i, 2]], h_boxes[[i, 3]]],
                spec.image_w,
                spec.image_h,
            );
            let ob = PixelBox::from_normalized_cxcywh(
                [o_boxes[[i, 0]], o_boxes[[i, 1]], o_boxes[[i, 2]], o_boxes[[i, 3]]],
                spec.image_w,
                spec.image_h,
            );
            let hum = crate::mask::rasterize_box(&hb, spec);
            let obj = crate::mask::rasterize_box(&ob, spec);
            build_progressive_masks(part_masks, &hum, &obj)
        })
        .collect()
}

/// Which interactiveness scheme to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntScheme {
    /// Filter-and-merge one-pass classification with progressive masks.
    Merged,
    /// Merged queries but one fixed schedule layer on all decoder layers
    /// (the no-progressive ablation; layer index is 0-based).
    MergedSameLayer(usize),
    /// Merged queries with all-ones masks (the no-saliency ablation).
    MergedAllOnes,
    /// The per-part scheme (no filtering or merging).
    Intuitive,
}

impl IntScheme {
    fn mask_mode(self) -> MaskMode {
        match self {
            IntScheme::Merged => MaskMode::Progressive,
            IntScheme::MergedSameLayer(j) => MaskMode::SameLayer(j),
            IntScheme::MergedAllOnes => MaskMode::AllOnes,
            IntScheme::Intuitive => MaskMode::Progressive,
        }
    }
}

/// Interactiveness outputs in either scheme.
pub enum IntOutput {
    Merged(MergedForward),
    Intuitive(IntuitiveForward),
}

impl IntOutput {
    pub fn p_int(&self) -> Var {
        match self {
            IntOutput::Merged(m) => m.p_int,
            IntOutput::Intuitive(i) => i.p_int,
        }
    }

    pub fn int_logits(&self) -> Var {
        match self {
            IntOutput::Merged(m) => m.int_logits,
            IntOutput::Intuitive(i) => i.int_logits,
        }
    }

    /// Logits carrying the optional part-level supervision: importance
    /// scores in the merged scheme, per-part interactiveness in the
    /// per-part scheme.
    pub fn part_logits(&self) -> Var {
        match self {
            IntOutput::Merged(m) => m.part_logits,
            IntOutput::Intuitive(i) => i.per_part_logits,
        }
    }

    pub fn token_ops(&self) -> u64 {
        match self {
            IntOutput::Merged(m) => m.token_ops,
            IntOutput::Intuitive(i) => i.token_ops,
        }
    }
}

/// Runs the configured interactiveness scheme on detector outputs.
#[allow(clippy::too_many_arguments)]
pub fn interactiveness_head_forward(
    sess: &mut Session,
    cfg: &ModelConfig,
    scheme: IntScheme,
    grid: Var,
    pos: Var,
    detector: &DetectorOutput,
    part_masks: &[TokenMask; NUM_PARTS],
) -> Result<IntOutput, AttentionError> {
    let opts = IntHeadOptions {
        heads: cfg.heads,
        importance_depth: cfg.importance_layers,
        fallback: cfg.mask_fallback,
        mode: scheme.mask_mode(),
        forced_selection: None,
    };
    match scheme {
        IntScheme::Intuitive => {
            let out = intuitive_forward(sess, &opts, grid, pos, detector.embeddings, part_masks)?;
            Ok(IntOutput::Intuitive(out))
        }
        _ => {
            let spec = cfg.grid();
            let stacks = proposal_progressive_masks(
                part_masks,
                sess.tape.value(detector.h_boxes),
                sess.tape.value(detector.o_boxes),
                &spec,
            );
            let out = interactiveness_forward(sess, &opts, grid, pos, detector.embeddings, &stacks)?;
            Ok(IntOutput::Merged(out))
        }
    }
}

/// Everything the evaluation pipeline needs from one image, as plain
/// values detached from any tape.
#[derive(Debug, Clone)]
pub struct EvalForward {
    pub h_boxes: Matrix,
    pub o_boxes: Matrix,
    pub class_probs: Matrix,
    pub p_int: Vec<f64>,
    pub part_scores: Option<Matrix>,
    pub selection: Option<Vec<[bool; NUM_PARTS]>>,
    pub merged_masks: Option<Vec<[TokenMask; DEC2_DEPTH]>>,
    pub verb_probs: Option<Matrix>,
    pub token_ops: u64,
    pub fallback_count: usize,
    /// `(label, head-mean attention)` records when capture was requested.
    pub attention: Option<Vec<(String, Matrix)>>,
}

/// Inference pass over one scene.
pub fn eval_forward(
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &SceneAnnotation,
    scheme: IntScheme,
    with_verb: bool,
    capture: bool,
) -> Result<EvalForward, ModelError> {
    let image = render_scene(scene);
    let mut sess = Session::inference(store);
    if capture {
        sess.enable_capture();
    }
    let pos = grid_pos(&mut sess, cfg);
    let grid = encoder_forward(&mut sess, cfg, EncoderInput::Image(&image), pos);
    let detector = detector_forward(&mut sess, cfg, grid, pos);
    let part_masks = scene_part_masks(scene, cfg);
    let int_out =
        interactiveness_head_forward(&mut sess, cfg, scheme, grid, pos, &detector, &part_masks)?;
    let verb_probs = with_verb.then(|| {
        let v = verb_forward(&mut sess, cfg, grid, pos, detector.embeddings);
        sess.tape.value(v.verb_probs).clone()
    });

    let p_int = sess
        .tape
        .value(int_out.p_int())
        .column(0)
        .iter()
        .cloned()
        .collect();
    let (part_scores, selection, merged_masks) = match &int_out {
        IntOutput::Merged(m) => (
            Some(sess.tape.value(m.part_scores).clone()),
            Some(m.selection.clone()),
            Some(m.merged_masks.clone()),
        ),
        IntOutput::Intuitive(i) => (Some(sess.tape.value(i.per_part_scores).clone()), None, None),
    };
    Ok(EvalForward {
        h_boxes: sess.tape.value(detector.h_boxes).clone(),
        o_boxes: sess.tape.value(detector.o_boxes).clone(),
        class_probs: sess.tape.value(detector.class_probs).clone(),
        p_int,
        part_scores,
        selection,
        merged_masks,
        verb_probs,
        token_ops: int_out.token_ops(),
        fallback_count: sess.fallback_events.len(),
        attention: sess.capture.take(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Trainable;
    use crate::scene::{generate_scene, DifficultyProfile};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            ffn_width: 32,
            n_queries: 4,
            enc_layers: 1,
            box_layers: 1,
            verb_layers: 1,
            image_size: 64,
            grid_factor: 16,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        let mut cfg = tiny_cfg();
        cfg.validate().unwrap();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        cfg.grid_factor = 48;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn injected_features_pass_through() {
        let cfg = tiny_cfg();
        let store = init_model(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = Matrix::from_shape_fn((16, 16), |_| rng.gen_range(-1.0..1.0));
        let mut sess = Session::inference(&store);
        let pos = grid_pos(&mut sess, &cfg);
        let grid = encoder_forward(&mut sess, &cfg, EncoderInput::Features(feats.clone()), pos);
        assert_eq!(sess.tape.value(grid), &feats);
    }

    #[test]
    fn image_grid_has_expected_shape() {
        let cfg = tiny_cfg();
        let store = init_model(&cfg, 3);
        let scene = generate_scene(7, 0, &DifficultyProfile {
            image_size: 64,
            ..Default::default()
        })
        .unwrap();
        let image = render_scene(&scene);
        let mut sess = Session::inference(&store);
        let pos = grid_pos(&mut sess, &cfg);
        let grid = encoder_forward(&mut sess, &cfg, EncoderInput::Image(&image), pos);
        // 64 / 16 = 4 tokens per side.
        assert_eq!(sess.tape.shape(grid), (16, 16));
    }

    #[test]
    fn constant_image_gives_constant_stem_features() {
        let cfg = tiny_cfg();
        let store = init_model(&cfg, 4);
        let image = RenderedScene {
            width: 64,
            height: 64,
            pixels: Matrix::from_elem((64 * 64, 3), 0.37),
        };
        // Run only the stem (pre-positional): every token row must match.
        let mut sess = Session::inference(&store);
        let px = sess.tape.constant(image.pixels.clone());
        let patches = sess.tape.im2col(px, 64, 64, 3, 16, 16);
        let h = sess.linear(patches, "stem.conv1");
        let h = sess.tape.relu(h);
        let tokens = sess.linear(h, "stem.conv2");
        let t = sess.tape.value(tokens);
        for r in 1..t.nrows() {
            assert_eq!(t.row(r), t.row(0));
        }
    }

    #[test]
    fn detector_emits_bounded_proposals() {
        let cfg = tiny_cfg();
        let store = init_model(&cfg, 5);
        let scene = generate_scene(8, 0, &DifficultyProfile {
            image_size: 64,
            ..Default::default()
        })
        .unwrap();
        let out = eval_forward(&store, &cfg, &scene, IntScheme::Merged, true, false).unwrap();
        assert_eq!(out.h_boxes.nrows(), cfg.n_queries);
        for &v in out.h_boxes.iter().chain(out.o_boxes.iter()) {
            assert!((0.0..=1.0).contains(&v));
        }
        for row in out.class_probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        for &p in &out.p_int {
            assert!(p > 0.0 && p < 1.0);
        }
        let verbs = out.verb_probs.unwrap();
        assert_eq!(verbs.dim(), (cfg.n_queries, cfg.n_verb));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_cfg();
        let store = init_model(&cfg, 6);
        let scene = generate_scene(9, 0, &DifficultyProfile {
            image_size: 64,
            ..Default::default()
        })
        .unwrap();
        let a = eval_forward(&store, &cfg, &scene, IntScheme::Merged, false, false).unwrap();
        let b = eval_forward(&store, &cfg, &scene, IntScheme::Merged, false, false).unwrap();
        assert_eq!(a.h_boxes, b.h_boxes);
        assert_eq!(a.p_int, b.p_int);
        assert_eq!(a.token_ops, b.token_ops);
    }

    #[test]
    fn fixture_forward_matches_reloaded_checkpoint() {
        // Serialize, reload, and re-run: outputs must agree to 1e-6 (they
        // are bit-exact because the checkpoint stores raw f64 bits).
        let cfg = tiny_cfg();
        let store = init_model(&cfg, 10);
        let scene = generate_scene(11, 0, &DifficultyProfile {
            image_size: 64,
            ..Default::default()
        })
        .unwrap();
        let before = eval_forward(&store, &cfg, &scene, IntScheme::Merged, true, false).unwrap();

        let dir = std::env::temp_dir().join("hoipart-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        crate::nn::Checkpoint {
            header: serde_json::json!({"seed": 10}),
            params: store,
        }
        .save(&path)
        .unwrap();
        let loaded = crate::nn::Checkpoint::load(&path).unwrap();
        let after = eval_forward(&loaded.params, &cfg, &scene, IntScheme::Merged, true, false).unwrap();

        let max_diff = before
            .h_boxes
            .iter()
            .zip(after.h_boxes.iter())
            .chain(before.o_boxes.iter().zip(after.o_boxes.iter()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6);
        assert_eq!(before.p_int, after.p_int);
    }

    #[test]
    fn ablation_schemes_run() {
        let cfg = tiny_cfg();
        let store = init_model(&cfg, 12);
        let scene = generate_scene(13, 0, &DifficultyProfile {
            image_size: 64,
            ..Default::default()
        })
        .unwrap();
        for scheme in [
            IntScheme::Merged,
            IntScheme::MergedSameLayer(1),
            IntScheme::MergedAllOnes,
            IntScheme::Intuitive,
        ] {
            let out = eval_forward(&store, &cfg, &scene, scheme, false, false).unwrap();
            assert_eq!(out.p_int.len(), cfg.n_queries);
        }
    }

    #[test]
    fn stage_exclusions_freeze_the_right_parameters() {
        let cfg = tiny_cfg();
        let store = init_model(&cfg, 14);
        let scene = generate_scene(15, 0, &DifficultyProfile {
            image_size: 64,
            ..Default::default()
        })
        .unwrap();
        let image = render_scene(&scene);

        // Stage-1 style session: verb excluded.
        let mut sess = Session::new(&store, Trainable::Excluding(vec!["verb.".into()]));
        let pos = grid_pos(&mut sess, &cfg);
        let grid = encoder_forward(&mut sess, &cfg, EncoderInput::Image(&image), pos);
        let det = detector_forward(&mut sess, &cfg, grid, pos);
        let parts = scene_part_masks(&scene, &cfg);
        let int_out = interactiveness_head_forward(
            &mut sess,
            &cfg,
            IntScheme::Merged,
            grid,
            pos,
            &det,
            &parts,
        )
        .unwrap();
        let loss = sess.tape.mean_all(int_out.p_int());
        let grads = sess.tape.backward(loss);
        let pg = sess.param_grads(&grads);
        assert!(pg.keys().any(|k| k.starts_with("int.")));
        assert!(pg.keys().any(|k| k.starts_with("boxdec.")));
        assert!(!pg.keys().any(|k| k.starts_with("verb.")));
    }
}
