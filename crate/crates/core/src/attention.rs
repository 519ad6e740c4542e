//! Masked cross-attention, transformer layers, positional encodings, and
//! the prediction heads.
//!
//! Masking uses replacement semantics: scores at masked positions are
//! overwritten with a large negative sentinel before the softmax, so a
//! masked token's key and value never influence the output (the exponent
//! underflows to exactly zero in double precision). Queries attend to the
//! feature grid through these masks; query-to-query self-attention inside
//! decoder layers is never masked.

use crate::mask::TokenMask;
use crate::nn::Session;
use crate::tape::{Matrix, Tape, Var};
use thiserror::Error;

/// Magnitude of the finite stand-in for minus infinity in masked scores.
pub const MASK_SENTINEL: f64 = 4_294_967_295.0;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("all-zero attention mask for proposal {proposal} in {context} (fallback disabled)")]
    EmptyMask { proposal: usize, context: String },
    #[error("model width {d_model} not divisible by head count {heads}")]
    BadHeadSplit { d_model: usize, heads: usize },
    #[error("channel count {0} must be divisible by 4 for the 2-d encoding")]
    BadChannelCount(usize),
}

/// A query whose token mask was empty and was replaced by all-ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FallbackEvent {
    pub proposal: usize,
    pub context: String,
}

/// Layer geometry of one transformer decoder.
#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_width: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.d_model % self.heads != 0 {
            return Err(AttentionError::BadHeadSplit {
                d_model: self.d_model,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

/// Fixed 2-d sinusoidal encoding for an `h x w` grid, one row per token in
/// row-major order, `d` channels.
///
/// Channels split into four blocks of `d/4`: sin/cos over the row index,
/// then sin/cos over the column index, each at geometrically spaced
/// frequencies. Deterministic, values in `[-1, 1]`, distinct positions get
/// distinct rows.
pub fn sinusoidal_pos_encoding(h: usize, w: usize, d: usize) -> Matrix {
    assert!(d % 4 == 0, "channel count {d} must be divisible by 4");
    let quarter = d / 4;
    let mut out = Matrix::zeros((h * w, d));
    for row in 0..h {
        for col in 0..w {
            let s = row * w + col;
            for i in 0..quarter {
                let omega = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                out[[s, i]] = (row as f64 * omega).sin();
                out[[s, quarter + i]] = (row as f64 * omega).cos();
                out[[s, 2 * quarter + i]] = (col as f64 * omega).sin();
                out[[s, 3 * quarter + i]] = (col as f64 * omega).cos();
            }
        }
    }
    out
}

/// Turns per-query token masks into a dense `n x s` 0/1 matrix, applying
/// the empty-mask policy: with fallback enabled an all-zero row becomes
/// all-ones and the event is recorded; otherwise resolution fails.
pub fn resolve_mask_rows(
    masks: &[&TokenMask],
    fallback: bool,
    context: &str,
    events: &mut Vec<FallbackEvent>,
) -> Result<Matrix, AttentionError> {
    let s = masks.first().map(|m| m.h() * m.w()).unwrap_or(0);
    let mut out = Matrix::zeros((masks.len(), s));
    for (i, m) in masks.iter().enumerate() {
        if m.is_empty() {
            if !fallback {
                return Err(AttentionError::EmptyMask {
                    proposal: i,
                    context: context.to_string(),
                });
            }
            events.push(FallbackEvent {
                proposal: i,
                context: context.to_string(),
            });
            out.row_mut(i).fill(1.0);
        } else {
            for (j, &bit) in m.bits().iter().enumerate() {
                out[[i, j]] = bit as f64;
            }
        }
    }
    Ok(out)
}

/// Precomputed mask constants on a tape: the 0/1 keep matrix and the
/// additive sentinel term `(1 - keep) * -SENTINEL`.
pub fn mask_constants(tape: &mut Tape, mask: &Matrix) -> (Var, Var) {
    let keep = tape.constant(mask.clone());
    let bias = tape.constant(mask.mapv(|m| (1.0 - m) * -MASK_SENTINEL));
    (keep, bias)
}

/// Scaled dot-product attention with optional score masking.
///
/// Scores are `q · k^T / sqrt(d)`; masked positions are replaced by the
/// negative sentinel before the row softmax, so weights over the active
/// tokens sum to one and masked tokens get weight zero. Returns the output
/// rows and the attention weights.
pub fn masked_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<(Var, Var)>,
) -> (Var, Var) {
    let d = tape.shape(q).1;
    let logits = tape.matmul_nt(q, k);
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let masked = match mask {
        Some((keep, bias)) => {
            let kept = tape.mul(scaled, keep);
            tape.add(kept, bias)
        }
        None => scaled,
    };
    let attn = tape.softmax_rows(masked);
    let out = tape.matmul(attn, v);
    (out, attn)
}

/// Multi-head attention with learned projections under `prefix`
/// (`.q/.k/.v/.o` linear parameter pairs). The same mask applies to every
/// head. When capture is enabled on the session, the head-mean attention
/// matrix is recorded under `label`.
pub fn multi_head_attention(
    sess: &mut Session,
    prefix: &str,
    heads: usize,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    mask: Option<&Matrix>,
    label: &str,
) -> Var {
    let q = sess.linear(q_in, &format!("{prefix}.q"));
    let k = sess.linear(k_in, &format!("{prefix}.k"));
    let v = sess.linear(v_in, &format!("{prefix}.v"));
    let d = sess.tape.shape(q).1;
    assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let consts = mask.map(|m| mask_constants(&mut sess.tape, m));

    let mut outs = Vec::with_capacity(heads);
    let mut attn_mean: Option<Matrix> = None;
    for h in 0..heads {
        let qh = sess.tape.slice_cols(q, h * dh, dh);
        let kh = sess.tape.slice_cols(k, h * dh, dh);
        let vh = sess.tape.slice_cols(v, h * dh, dh);
        let (oh, attn) = masked_attention(&mut sess.tape, qh, kh, vh, consts);
        outs.push(oh);
        if sess.capture.is_some() {
            let a = sess.tape.value(attn).mapv(|x| x / heads as f64);
            attn_mean = Some(match attn_mean {
                Some(acc) => acc + a,
                None => a,
            });
        }
    }
    if let (Some(mean), Some(cap)) = (attn_mean, sess.capture.as_mut()) {
        cap.push((label.to_string(), mean));
    }
    let cat = sess.tape.concat_cols(&outs);
    sess.linear(cat, &format!("{prefix}.o"))
}

/// Per-layer mask selection for a decoder stack.
pub enum StackMasks<'a> {
    /// No cross-attention masking.
    None,
    /// One mask matrix shared by every layer.
    Shared(&'a Matrix),
    /// One mask matrix per layer, `len == depth`.
    PerLayer(&'a [Matrix]),
}

impl StackMasks<'_> {
    fn layer(&self, j: usize) -> Option<&Matrix> {
        match self {
            StackMasks::None => None,
            StackMasks::Shared(m) => Some(m),
            StackMasks::PerLayer(ms) => Some(&ms[j]),
        }
    }
}

/// One pre-norm decoder layer: query self-attention, masked cross-attention
/// into the feature tokens, feed-forward, each with a residual.
pub fn decoder_layer(
    sess: &mut Session,
    prefix: &str,
    heads: usize,
    x: Var,
    mem_k: Var,
    mem_v: Var,
    mask: Option<&Matrix>,
) -> Var {
    let sa_in = sess.layer_norm(x, &format!("{prefix}.ln1"));
    let sa = multi_head_attention(
        sess,
        &format!("{prefix}.self"),
        heads,
        sa_in,
        sa_in,
        sa_in,
        None,
        "",
    );
    let sa = sess.maybe_dropout(sa);
    let x = sess.tape.add(x, sa);

    let ca_in = sess.layer_norm(x, &format!("{prefix}.ln2"));
    let ca = multi_head_attention(
        sess,
        &format!("{prefix}.cross"),
        heads,
        ca_in,
        mem_k,
        mem_v,
        mask,
        prefix,
    );
    let ca = sess.maybe_dropout(ca);
    let x = sess.tape.add(x, ca);

    let ff_in = sess.layer_norm(x, &format!("{prefix}.ln3"));
    let h = sess.linear(ff_in, &format!("{prefix}.ffn.l1"));
    let h = sess.tape.relu(h);
    let h = sess.linear(h, &format!("{prefix}.ffn.l2"));
    let h = sess.maybe_dropout(h);
    sess.tape.add(x, h)
}

/// A stack of decoder layers with a final norm. Keys are the feature
/// tokens plus their positional encoding; values are the raw tokens.
pub fn decoder_stack(
    sess: &mut Session,
    prefix: &str,
    depth: usize,
    heads: usize,
    queries: Var,
    features: Var,
    pos: Var,
    masks: StackMasks,
) -> Var {
    let mem_k = sess.tape.add(features, pos);
    let mut x = queries;
    for j in 0..depth {
        x = decoder_layer(
            sess,
            &format!("{prefix}.{j}"),
            heads,
            x,
            mem_k,
            features,
            masks.layer(j),
        );
    }
    sess.layer_norm(x, &format!("{prefix}.ln_out"))
}

/// One pre-norm encoder layer over the token grid; position is added to
/// queries and keys inside the attention, not to values.
pub fn encoder_layer(sess: &mut Session, prefix: &str, heads: usize, x: Var, pos: Var) -> Var {
    let sa_in = sess.layer_norm(x, &format!("{prefix}.ln1"));
    let qk = sess.tape.add(sa_in, pos);
    let sa = multi_head_attention(
        sess,
        &format!("{prefix}.self"),
        heads,
        qk,
        qk,
        sa_in,
        None,
        "",
    );
    let sa = sess.maybe_dropout(sa);
    let x = sess.tape.add(x, sa);

    let ff_in = sess.layer_norm(x, &format!("{prefix}.ln2"));
    let h = sess.linear(ff_in, &format!("{prefix}.ffn.l1"));
    let h = sess.tape.relu(h);
    let h = sess.linear(h, &format!("{prefix}.ffn.l2"));
    let h = sess.maybe_dropout(h);
    sess.tape.add(x, h)
}

pub fn encoder_stack(
    sess: &mut Session,
    prefix: &str,
    depth: usize,
    heads: usize,
    mut x: Var,
    pos: Var,
) -> Var {
    for j in 0..depth {
        x = encoder_layer(sess, &format!("{prefix}.{j}"), heads, x, pos);
    }
    sess.layer_norm(x, &format!("{prefix}.ln_out"))
}

/// The prediction heads hanging off decoded embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    HumanBox,
    ObjectBox,
    ObjectClass,
    Verb,
    Interactiveness,
    PartScore,
}

/// Applies a prediction head under `prefix` to embedding rows.
///
/// Box heads emit sigmoid-bounded `(cx, cy, w, h)` in `[0,1]^4`; the class
/// head emits a softmax distribution including the no-object class; the
/// remaining heads emit independent sigmoid scores.
pub fn prediction_head(sess: &mut Session, kind: HeadKind, prefix: &str, x: Var) -> Var {
    match kind {
        HeadKind::HumanBox | HeadKind::ObjectBox => {
            let y = sess.mlp3(x, prefix);
            sess.tape.sigmoid(y)
        }
        HeadKind::ObjectClass => {
            let y = sess.linear(x, prefix);
            sess.tape.softmax_rows(y)
        }
        HeadKind::Verb => {
            let y = sess.linear(x, prefix);
            sess.tape.sigmoid(y)
        }
        HeadKind::Interactiveness | HeadKind::PartScore => {
            let y = sess.mlp2(x, prefix);
            sess.tape.sigmoid(y)
        }
    }
}

/// Parameter registration mirrors of the forward functions.
pub mod init {
    use crate::nn::{Initializer, ParamStore};

    pub fn mha(init: &mut Initializer, store: &mut ParamStore, prefix: &str, d: usize) {
        for part in ["q", "k", "v", "o"] {
            init.linear(store, &format!("{prefix}.{part}"), d, d);
        }
    }

    pub fn decoder_layer(
        init: &mut Initializer,
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ffn_width: usize,
    ) {
        mha(init, store, &format!("{prefix}.self"), d);
        mha(init, store, &format!("{prefix}.cross"), d);
        for ln in ["ln1", "ln2", "ln3"] {
            init.layer_norm(store, &format!("{prefix}.{ln}"), d);
        }
        init.linear(store, &format!("{prefix}.ffn.l1"), d, ffn_width);
        init.linear(store, &format!("{prefix}.ffn.l2"), ffn_width, d);
    }

    pub fn decoder_stack(
        init: &mut Initializer,
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        d: usize,
        ffn_width: usize,
    ) {
        for j in 0..depth {
            decoder_layer(init, store, &format!("{prefix}.{j}"), d, ffn_width);
        }
        init.layer_norm(store, &format!("{prefix}.ln_out"), d);
    }

    pub fn encoder_layer(
        init: &mut Initializer,
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ffn_width: usize,
    ) {
        mha(init, store, &format!("{prefix}.self"), d);
        for ln in ["ln1", "ln2"] {
            init.layer_norm(store, &format!("{prefix}.{ln}"), d);
        }
        init.linear(store, &format!("{prefix}.ffn.l1"), d, ffn_width);
        init.linear(store, &format!("{prefix}.ffn.l2"), ffn_width, d);
    }

    pub fn encoder_stack(
        init: &mut Initializer,
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        d: usize,
        ffn_width: usize,
    ) {
        for j in 0..depth {
            encoder_layer(init, store, &format!("{prefix}.{j}"), d, ffn_width);
        }
        init.layer_norm(store, &format!("{prefix}.ln_out"), d);
    }

    pub fn mlp2(
        init: &mut Initializer,
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) {
        init.linear(store, &format!("{prefix}.l1"), d_in, d_hidden);
        init.linear(store, &format!("{prefix}.l2"), d_hidden, d_out);
    }

    pub fn mlp3(
        init: &mut Initializer,
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_out: usize,
    ) {
        init.linear(store, &format!("{prefix}.l1"), d, d);
        init.linear(store, &format!("{prefix}.l2"), d, d);
        init.linear(store, &format!("{prefix}.l3"), d, d_out);
    }
}
