//! The interactiveness classifier, in both schemes.
//!
//! The per-part scheme runs the masked decoder once per body part and
//! takes the maximum of the six part scores. The one-pass scheme first
//! scores part importance with an unmasked single-layer decoder, keeps the
//! top quarter of all `(proposal, part)` pairs image-wide, merges the
//! selected parts' masks (union) and queries (importance-weighted sum),
//! and classifies interactiveness in a single three-layer masked pass.

use crate::attention::{decoder_stack, resolve_mask_rows, AttentionError, StackMasks};
use crate::mask::{merge_masks, ProgressiveMasks, TokenMask, NUM_PARTS};
use crate::nn::Session;
use crate::tape::{Matrix, Var};

/// Fraction of pooled `(proposal, part)` pairs kept by the filter.
pub const TOP_FRACTION: f64 = 0.25;

/// Depth of the masked interactiveness decoder; the progressive schedule
/// is defined for exactly three layers.
pub const DEC2_DEPTH: usize = 3;

/// How the per-layer masks are chosen for the masked decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// The three-layer progressive schedule.
    Progressive,
    /// One schedule layer applied to every decoder layer (0-based index).
    SameLayer(usize),
    /// No spatial focus at all: every mask is all-ones.
    AllOnes,
}

#[derive(Debug, Clone)]
pub struct IntHeadOptions {
    pub heads: usize,
    /// Depth of the unmasked importance decoder.
    pub importance_depth: usize,
    /// Empty-mask fallback (all-ones substitution) enabled.
    pub fallback: bool,
    pub mode: MaskMode,
    /// Overrides top-25% filtering; used by tests and ablations.
    pub forced_selection: Option<Vec<[bool; NUM_PARTS]>>,
}

impl Default for IntHeadOptions {
    fn default() -> Self {
        Self {
            heads: 4,
            importance_depth: 1,
            fallback: true,
            mode: MaskMode::Progressive,
            forced_selection: None,
        }
    }
}

/// Pools all `(proposal, part)` scores, keeps the global top 25%
/// (`round(0.25 * 6 * N_q)` pairs, ties broken toward smaller proposal
/// then part index), then guarantees every proposal at least its own
/// argmax part so the merge is never empty.
pub fn select_topk_parts(scores: &Matrix) -> Vec<[bool; NUM_PARTS]> {
    let nq = scores.nrows();
    assert_eq!(scores.ncols(), NUM_PARTS);
    let mut order: Vec<(usize, usize)> = (0..nq)
        .flat_map(|i| (0..NUM_PARTS).map(move |k| (i, k)))
        .collect();
    order.sort_by(|&(ai, ak), &(bi, bk)| {
        scores[[bi, bk]]
            .total_cmp(&scores[[ai, ak]])
            .then(ai.cmp(&bi))
            .then(ak.cmp(&bk))
    });
    let target = (TOP_FRACTION * (nq * NUM_PARTS) as f64).round() as usize;
    let mut selected = vec![[false; NUM_PARTS]; nq];
    for &(i, k) in order.iter().take(target) {
        selected[i][k] = true;
    }
    for (i, sel) in selected.iter_mut().enumerate() {
        if !sel.iter().any(|&s| s) {
            let best = (0..NUM_PARTS)
                .max_by(|&a, &b| {
                    scores[[i, a]]
                        .total_cmp(&scores[[i, b]])
                        .then(b.cmp(&a))
                })
                .unwrap();
            sel[best] = true;
        }
    }
    selected
}

/// Importance scoring: a shallow unmasked decoder turns each box-decoder
/// embedding into a part-importance embedding, and a head maps it to six
/// sigmoid scores. Returns `(scores, logits)`.
pub fn part_importance_scores(
    sess: &mut Session,
    opts: &IntHeadOptions,
    grid: Var,
    pos: Var,
    decoded: Var,
) -> (Var, Var) {
    let d_part = decoder_stack(
        sess,
        "int.importance",
        opts.importance_depth,
        opts.heads,
        decoded,
        grid,
        pos,
        StackMasks::None,
    );
    let logits = sess.mlp2(d_part, "int.imp_head");
    let scores = sess.tape.sigmoid(logits);
    (scores, logits)
}

/// Per-part query transforms applied to the box-decoder embeddings.
pub fn part_queries(sess: &mut Session, decoded: Var) -> [Var; NUM_PARTS] {
    std::array::from_fn(|k| sess.mlp2(decoded, &format!("int.part.{k}")))
}

/// Merges queries: the selected parts' queries, weighted by their
/// importance scores, are summed onto the whole-image query.
pub fn merge_queries(
    sess: &mut Session,
    decoded: Var,
    parts: &[Var; NUM_PARTS],
    scores: Var,
    selection: &[[bool; NUM_PARTS]],
) -> Var {
    let d = sess.tape.shape(decoded).1;
    let mut merged = decoded;
    for k in 0..NUM_PARTS {
        if !selection.iter().any(|sel| sel[k]) {
            continue;
        }
        let indicator = Matrix::from_shape_fn((selection.len(), 1), |(i, _)| {
            selection[i][k] as u8 as f64
        });
        let ind = sess.tape.constant(indicator);
        let score_col = sess.tape.slice_cols(scores, k, 1);
        let weight = sess.tape.mul(score_col, ind);
        // Broadcast the per-proposal weight across the embedding width.
        let ones_row = sess.tape.constant(Matrix::ones((1, d)));
        let weight_full = sess.tape.matmul(weight, ones_row);
        let contrib = sess.tape.mul(parts[k], weight_full);
        merged = sess.tape.add(merged, contrib);
    }
    merged
}

fn effective_active(mask: &TokenMask) -> usize {
    let n = mask.count_active();
    if n == 0 {
        mask.h() * mask.w()
    } else {
        n
    }
}

/// One-pass (filter and merge) interactiveness forward.
pub struct MergedForward {
    pub p_int: Var,
    pub int_logits: Var,
    pub part_scores: Var,
    pub part_logits: Var,
    pub selection: Vec<[bool; NUM_PARTS]>,
    pub merged_masks: Vec<[TokenMask; DEC2_DEPTH]>,
    /// Cross-attention token operations executed by this pass
    /// (query rows x active tokens, summed over layers).
    pub token_ops: u64,
}

pub fn interactiveness_forward(
    sess: &mut Session,
    opts: &IntHeadOptions,
    grid: Var,
    pos: Var,
    decoded: Var,
    proposal_masks: &[ProgressiveMasks],
) -> Result<MergedForward, AttentionError> {
    let nq = sess.tape.shape(decoded).0;
    let tokens = sess.tape.shape(grid).0;
    assert_eq!(proposal_masks.len(), nq, "one mask stack per proposal");

    let (part_scores, part_logits) = part_importance_scores(sess, opts, grid, pos, decoded);
    let mut token_ops = (opts.importance_depth * nq * tokens) as u64;

    let selection = opts
        .forced_selection
        .clone()
        .unwrap_or_else(|| select_topk_parts(sess.tape.value(part_scores)));

    let parts = part_queries(sess, decoded);
    let merged_q = merge_queries(sess, decoded, &parts, part_scores, &selection);

    // Per-proposal merged masks for each decoder layer.
    let merged_masks: Vec<[TokenMask; DEC2_DEPTH]> = (0..nq)
        .map(|i| match opts.mode {
            MaskMode::AllOnes => {
                let (h, w) = (proposal_masks[i].layers[0][0].h(), proposal_masks[i].layers[0][0].w());
                Ok(std::array::from_fn(|_| TokenMask::ones(h, w)))
            }
            MaskMode::SameLayer(j0) => {
                let m = merge_masks(&proposal_masks[i], &selection[i])
                    .map_err(|_| AttentionError::EmptyMask {
                        proposal: i,
                        context: "int.merge".into(),
                    })?;
                Ok(std::array::from_fn(|_| m[j0].clone()))
            }
            MaskMode::Progressive => merge_masks(&proposal_masks[i], &selection[i]).map_err(|_| {
                AttentionError::EmptyMask {
                    proposal: i,
                    context: "int.merge".into(),
                }
            }),
        })
        .collect::<Result<_, AttentionError>>()?;

    let mut layer_mats = Vec::with_capacity(DEC2_DEPTH);
    for j in 0..DEC2_DEPTH {
        let rows: Vec<&TokenMask> = merged_masks.iter().map(|m| &m[j]).collect();
        for m in &rows {
            token_ops += effective_active(m) as u64;
        }
        let mut events = Vec::new();
        let mat = resolve_mask_rows(&rows, opts.fallback, &format!("int.dec2.{j}"), &mut events)?;
        sess.fallback_events.append(&mut events);
        layer_mats.push(mat);
    }

    let e_mer = decoder_stack(
        sess,
        "int.dec2",
        DEC2_DEPTH,
        opts.heads,
        merged_q,
        grid,
        pos,
        StackMasks::PerLayer(&layer_mats),
    );
    let int_logits = sess.mlp2(e_mer, "int.merged_head");
    let p_int = sess.tape.sigmoid(int_logits);

    Ok(MergedForward {
        p_int,
        int_logits,
        part_scores,
        part_logits,
        selection,
        merged_masks,
        token_ops,
    })
}

/// Per-part scheme forward: the shared masked decoder runs once without a
/// mask for image-wide context and once per body part, and the instance
/// score is the maximum over part scores.
pub struct IntuitiveForward {
    pub p_int: Var,
    pub int_logits: Var,
    pub per_part_scores: Var,
    pub per_part_logits: Var,
    pub token_ops: u64,
}

pub fn intuitive_forward(
    sess: &mut Session,
    opts: &IntHeadOptions,
    grid: Var,
    pos: Var,
    decoded: Var,
    part_masks: &[TokenMask; NUM_PARTS],
) -> Result<IntuitiveForward, AttentionError> {
    let nq = sess.tape.shape(decoded).0;
    let tokens = sess.tape.shape(grid).0;

    // Image-wide pass with no mask.
    let e0 = decoder_stack(
        sess,
        "int.dec2",
        DEC2_DEPTH,
        opts.heads,
        decoded,
        grid,
        pos,
        StackMasks::None,
    );
    let mut token_ops = (DEC2_DEPTH * nq * tokens) as u64;

    let parts = part_queries(sess, decoded);
    let mut logit_cols = Vec::with_capacity(NUM_PARTS);
    for (k, &pq) in parts.iter().enumerate() {
        let mask = match opts.mode {
            MaskMode::AllOnes => TokenMask::ones(part_masks[k].h(), part_masks[k].w()),
            _ => part_masks[k].clone(),
        };
        token_ops += (DEC2_DEPTH * nq * effective_active(&mask)) as u64;
        let rows: Vec<&TokenMask> = (0..nq).map(|_| &mask).collect();
        let mut events = Vec::new();
        let mat = resolve_mask_rows(&rows, opts.fallback, &format!("int.dec2.part{k}"), &mut events)?;
        sess.fallback_events.append(&mut events);

        let ek = decoder_stack(
            sess,
            "int.dec2",
            DEC2_DEPTH,
            opts.heads,
            pq,
            grid,
            pos,
            StackMasks::Shared(&mat),
        );
        let cat = sess.tape.concat_cols(&[ek, e0]);
        let logit_k = sess.mlp2(cat, "int.intuitive_head");
        logit_cols.push(logit_k);
    }
    let per_part_logits = sess.tape.concat_cols(&logit_cols);
    let per_part_scores = sess.tape.sigmoid(per_part_logits);

    // max_k sigmoid(x) = sigmoid(max_k x): fold the logits.
    let mut int_logits = logit_cols[0];
    for &col in &logit_cols[1..] {
        int_logits = sess.tape.emax(int_logits, col);
    }
    let p_int = sess.tape.sigmoid(int_logits);

    Ok(IntuitiveForward {
        p_int,
        int_logits,
        per_part_scores,
        per_part_logits,
        token_ops,
    })
}

/// Which interactiveness scheme a token-op count refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassMode {
    Intuitive,
    Merged,
}

/// Counts cross-attention token operations (query rows times active
/// tokens, summed over executed layers) without running the network.
///
/// The per-part scheme pays for the unmasked image-wide pass plus six
/// masked passes; the one-pass scheme pays for the importance pass plus a
/// single masked pass over the merged masks. Empty masks count at full
/// token cost, matching the all-ones fallback.
pub fn count_attention_token_ops(
    mode: PassMode,
    part_masks: &[TokenMask; NUM_PARTS],
    proposal_masks: &[ProgressiveMasks],
    selection: &[[bool; NUM_PARTS]],
    nq: usize,
    tokens: usize,
    dec2_depth: usize,
    importance_depth: usize,
) -> u64 {
    match mode {
        PassMode::Intuitive => {
            let mut ops = (dec2_depth * nq * tokens) as u64;
            for m in part_masks.iter() {
                ops += (dec2_depth * nq * effective_active(m)) as u64;
            }
            ops
        }
        PassMode::Merged => {
            let mut ops = (importance_depth * nq * tokens) as u64;
            for (i, stack) in proposal_masks.iter().enumerate() {
                let merged = merge_masks(stack, &selection[i]).expect("non-empty selection");
                // The progressive schedule and the decoder share a depth of
                // three; deeper configurations repeat the last layer mask.
                for j in 0..dec2_depth {
                    let m = &merged[j.min(merged.len() - 1)];
                    ops += effective_active(m) as u64;
                }
            }
            ops
        }
    }
}

/// Registers every interactiveness-head parameter.
pub fn init_interactiveness(
    init: &mut crate::nn::Initializer,
    store: &mut crate::nn::ParamStore,
    d: usize,
    ffn_width: usize,
    importance_depth: usize,
) {
    crate::attention::init::decoder_stack(init, store, "int.importance", importance_depth, d, ffn_width);
    crate::attention::init::mlp2(init, store, "int.imp_head", d, d, NUM_PARTS);
    for k in 0..NUM_PARTS {
        crate::attention::init::mlp2(init, store, &format!("int.part.{k}"), d, d, d);
    }
    crate::attention::init::decoder_stack(init, store, "int.dec2", DEC2_DEPTH, d, ffn_width);
    crate::attention::init::mlp2(init, store, "int.merged_head", d, d, 1);
    crate::attention::init::mlp2(init, store, "int.intuitive_head", 2 * d, d, 1);
}
