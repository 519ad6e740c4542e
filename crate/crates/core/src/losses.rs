//! Bipartite matching and the set-prediction losses.
//!
//! Ground-truth pairs are assigned to proposals by a minimum-cost
//! bipartite matching whose cost reuses the loss weights: an L1 box term
//! over both boxes, a GIoU term, and a classification term. Matched
//! proposals are supervised on boxes, classes, interactiveness, and verbs;
//! unmatched proposals train toward the no-object class and zero
//! interactiveness. Each loss exists twice: as tape nodes for training and
//! as a plain scalar route used by the verification suite.

use crate::geometry::{giou, PixelBox};
use crate::mask::NUM_PARTS;
use crate::scene::SceneAnnotation;
use crate::tape::{Matrix, Tape, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("{gts} ground-truth pairs exceed {proposals} proposals")]
    TooManyGts { gts: usize, proposals: usize },
}

/// Loss weights; `l1`, `giou`, `cls` double as the matching-cost weights.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
    /// Down-weight for the no-object class inside the classification loss.
    pub noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            giou: 2.5,
            cls: 1.0,
            noobj: 0.1,
        }
    }
}

/// One ground-truth human-object pair in normalized coordinates.
#[derive(Debug, Clone)]
pub struct GtPair {
    /// Human box as normalized `(cx, cy, w, h)`.
    pub h_cxcywh: [f64; 4],
    /// Object box as normalized `(cx, cy, w, h)`.
    pub o_cxcywh: [f64; 4],
    /// 0-based object class.
    pub class: usize,
    /// Multi-hot verb targets.
    pub verbs: Vec<f64>,
    pub interactive: bool,
    pub part_labels: Option<[bool; NUM_PARTS]>,
}

fn corners_to_cxcywh(b: &PixelBox, w0: f64, h0: f64) -> [f64; 4] {
    [
        (b.x1 + b.x2) / 2.0 / w0,
        (b.y1 + b.y2) / 2.0 / h0,
        (b.x2 - b.x1) / w0,
        (b.y2 - b.y1) / h0,
    ]
}

fn cxcywh_to_corners(v: [f64; 4]) -> PixelBox {
    PixelBox::new(
        v[0] - v[2] / 2.0,
        v[1] - v[3] / 2.0,
        v[0] + v[2] / 2.0,
        v[1] + v[3] / 2.0,
    )
}

/// Extracts the ground-truth pairs of a scene, including listed
/// non-interactive pairs (their verb vector is all zeros).
pub fn build_gt_pairs(scene: &SceneAnnotation, n_verb: usize) -> Vec<GtPair> {
    let (w0, h0) = (scene.width as f64, scene.height as f64);
    scene
        .interactions
        .iter()
        .map(|int| {
            let person = PixelBox::from_wh(scene.persons[int.person].bbox);
            let object = PixelBox::from_wh(scene.objects[int.object].bbox);
            let mut verbs = vec![0.0; n_verb];
            for (v, &bit) in int.verbs.iter().enumerate().take(n_verb) {
                verbs[v] = bit as f64;
            }
            GtPair {
                h_cxcywh: corners_to_cxcywh(&person, w0, h0),
                o_cxcywh: corners_to_cxcywh(&object, w0, h0),
                class: (scene.objects[int.object].category as usize).saturating_sub(1),
                verbs,
                interactive: int.interactive,
                part_labels: int.part_labels,
            }
        })
        .collect()
}

/// Value-level view of the detector outputs used for matching.
#[derive(Debug, Clone)]
pub struct PredValues {
    /// `N x 4` normalized `(cx, cy, w, h)` human boxes.
    pub h_boxes: Matrix,
    /// `N x 4` normalized object boxes.
    pub o_boxes: Matrix,
    /// `N x (C+1)` class distribution including no-object.
    pub class_probs: Matrix,
}

fn row4(m: &Matrix, i: usize) -> [f64; 4] {
    [m[[i, 0]], m[[i, 1]], m[[i, 2]], m[[i, 3]]]
}

fn l1_4(a: [f64; 4], b: [f64; 4]) -> f64 {
    (0..4).map(|i| (a[i] - b[i]).abs()).sum()
}

/// Matching cost between one ground-truth pair and one proposal.
pub fn pair_cost(gt: &GtPair, preds: &PredValues, i: usize, w: &LossWeights) -> f64 {
    let hb = row4(&preds.h_boxes, i);
    let ob = row4(&preds.o_boxes, i);
    let l1 = l1_4(hb, gt.h_cxcywh) + l1_4(ob, gt.o_cxcywh);
    let giou_term = 2.0
        - giou(&cxcywh_to_corners(hb), &cxcywh_to_corners(gt.h_cxcywh))
        - giou(&cxcywh_to_corners(ob), &cxcywh_to_corners(gt.o_cxcywh));
    let cls_term = 1.0 - preds.class_probs[[i, gt.class]];
    w.l1 * l1 + w.giou * giou_term + w.cls * cls_term
}

/// Minimum-cost assignment of rows to columns for an `n x m` cost matrix
/// with `n <= m`, via the potentials (Jonker-Volgenant style) method.
/// Deterministic: ties resolve toward smaller column index.
pub fn hungarian_min(cost: &Matrix) -> Vec<usize> {
    let n = cost.nrows();
    let m = cost.ncols();
    assert!(n <= m, "assignment needs rows <= cols");
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut matched = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if matched[j] > 0 {
            assignment[matched[j] - 1] = j - 1;
        }
    }
    assignment
}

/// The result of matching ground truth onto proposals.
#[derive(Debug, Clone)]
pub struct Matching {
    /// Proposal index assigned to each ground-truth pair.
    pub gt_to_proposal: Vec<usize>,
    /// Inverse map; `None` marks unmatched (background) proposals.
    pub proposal_to_gt: Vec<Option<usize>>,
}

/// Matches ground-truth pairs to proposals by minimum total cost.
pub fn bipartite_match(
    preds: &PredValues,
    gts: &[GtPair],
    weights: &LossWeights,
) -> Result<Matching, MatchError> {
    let nq = preds.h_boxes.nrows();
    if gts.len() > nq {
        return Err(MatchError::TooManyGts {
            gts: gts.len(),
            proposals: nq,
        });
    }
    let cost = Matrix::from_shape_fn((gts.len(), nq), |(g, i)| {
        pair_cost(&gts[g], preds, i, weights)
    });
    let gt_to_proposal = hungarian_min(&cost);
    let mut proposal_to_gt = vec![None; nq];
    for (g, &p) in gt_to_proposal.iter().enumerate() {
        proposal_to_gt[p] = Some(g);
    }
    Ok(Matching {
        gt_to_proposal,
        proposal_to_gt,
    })
}

/// Tape handles for the detector outputs entering the loss.
#[derive(Debug, Clone, Copy)]
pub struct DetectionVars {
    /// `N x 4` sigmoid box outputs, `(cx, cy, w, h)`.
    pub h_boxes: Var,
    pub o_boxes: Var,
    /// `N x (C+1)` pre-softmax class logits.
    pub class_logits: Var,
}

/// Scalar summary of one batch's losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub l_b: f64,
    pub l_u: f64,
    pub l_c: f64,
    pub l_det: f64,
    pub l_int: f64,
    pub l_verb: f64,
    pub l_part: Option<f64>,
}

/// GIoU column for predicted boxes against fixed ground-truth boxes,
/// expressed in tape ops so it differentiates.
fn giou_column(tape: &mut Tape, pred_cxcywh: Var, gt_corners: &Matrix) -> Var {
    let cx = tape.slice_cols(pred_cxcywh, 0, 1);
    let cy = tape.slice_cols(pred_cxcywh, 1, 1);
    let w = tape.slice_cols(pred_cxcywh, 2, 1);
    let h = tape.slice_cols(pred_cxcywh, 3, 1);
    let half_w = tape.scale(w, 0.5);
    let half_h = tape.scale(h, 0.5);
    let px1 = tape.sub(cx, half_w);
    let px2 = tape.add(cx, half_w);
    let py1 = tape.sub(cy, half_h);
    let py2 = tape.add(cy, half_h);

    let g = gt_corners;
    let n = g.nrows();
    let col = |tape: &mut Tape, c: usize| {
        tape.constant(Matrix::from_shape_fn((n, 1), |(r, _)| g[[r, c]]))
    };
    let gx1 = col(tape, 0);
    let gy1 = col(tape, 1);
    let gx2 = col(tape, 2);
    let gy2 = col(tape, 3);

    let ix1 = tape.emax(px1, gx1);
    let iy1 = tape.emax(py1, gy1);
    let ix2 = tape.emin(px2, gx2);
    let iy2 = tape.emin(py2, gy2);
    let iw_raw = tape.sub(ix2, ix1);
    let ih_raw = tape.sub(iy2, iy1);
    let iw = tape.relu(iw_raw);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);

    let parea = tape.mul(w, h);
    let garea = tape.constant(Matrix::from_shape_fn((n, 1), |(r, _)| {
        (g[[r, 2]] - g[[r, 0]]) * (g[[r, 3]] - g[[r, 1]])
    }));
    let pg = tape.add(parea, garea);
    let union = tape.sub(pg, inter);

    let cx1 = tape.emin(px1, gx1);
    let cy1 = tape.emin(py1, gy1);
    let cx2 = tape.emax(px2, gx2);
    let cy2 = tape.emax(py2, gy2);
    let cw = tape.sub(cx2, cx1);
    let ch = tape.sub(cy2, cy1);
    let carea = tape.mul(cw, ch);

    let iou = tape.div(inter, union);
    let slack = tape.sub(carea, union);
    let penalty = tape.div(slack, carea);
    tape.sub(iou, penalty)
}

/// Stable binary cross-entropy from logits: `mean(softplus(x) - x * t)`.
fn bce_mean(tape: &mut Tape, logits: Var, targets: &Matrix) -> Var {
    let t = tape.constant(targets.clone());
    let sp = tape.softplus(logits);
    let xt = tape.mul(logits, t);
    let per = tape.sub(sp, xt);
    tape.mean_all(per)
}

/// Box and classification losses over one image.
pub struct DetectionLoss {
    pub l_b: Var,
    pub l_u: Var,
    pub l_c: Var,
    pub l_det: Var,
}

pub fn detection_loss(
    tape: &mut Tape,
    vars: DetectionVars,
    gts: &[GtPair],
    matching: &Matching,
    weights: &LossWeights,
) -> DetectionLoss {
    let nq = tape.shape(vars.h_boxes).0;
    let n_classes = tape.shape(vars.class_logits).1;
    let g = gts.len();

    let (l_b, l_u) = if g == 0 {
        let zero = tape.constant(Matrix::zeros((1, 1)));
        (zero, zero)
    } else {
        let idx = matching.gt_to_proposal.clone();
        let hb = tape.select_rows(vars.h_boxes, &idx);
        let ob = tape.select_rows(vars.o_boxes, &idx);
        let gt_h = Matrix::from_shape_fn((g, 4), |(r, c)| gts[r].h_cxcywh[c]);
        let gt_o = Matrix::from_shape_fn((g, 4), |(r, c)| gts[r].o_cxcywh[c]);

        let gh = tape.constant(gt_h.clone());
        let go = tape.constant(gt_o.clone());
        let dh = tape.sub(hb, gh);
        let dho = tape.sub(ob, go);
        let ah = tape.abs(dh);
        let ao = tape.abs(dho);
        let sh = tape.sum_all(ah);
        let so = tape.sum_all(ao);
        let l1_sum = tape.add(sh, so);
        let l_b = tape.scale(l1_sum, 1.0 / g as f64);

        let gt_h_corners = Matrix::from_shape_fn((g, 4), |(r, c)| {
            let b = cxcywh_to_corners(gts[r].h_cxcywh);
            [b.x1, b.y1, b.x2, b.y2][c]
        });
        let gt_o_corners = Matrix::from_shape_fn((g, 4), |(r, c)| {
            let b = cxcywh_to_corners(gts[r].o_cxcywh);
            [b.x1, b.y1, b.x2, b.y2][c]
        });
        let giou_h = giou_column(tape, hb, &gt_h_corners);
        let giou_o = giou_column(tape, ob, &gt_o_corners);
        let giou_sum0 = tape.add(giou_h, giou_o);
        let giou_total = tape.sum_all(giou_sum0);
        let neg = tape.scale(giou_total, -1.0 / g as f64);
        let two = tape.constant(Matrix::from_elem((1, 1), 2.0));
        let l_u = tape.add(two, neg);
        (l_b, l_u)
    };

    // Weighted cross-entropy over all proposals; unmatched rows target the
    // no-object class at reduced weight.
    let mut onehot = Matrix::zeros((nq, n_classes));
    let mut weight_sum = 0.0;
    for i in 0..nq {
        let (target, w) = match matching.proposal_to_gt.get(i).copied().flatten() {
            Some(gi) => (gts[gi].class, 1.0),
            None => (n_classes - 1, weights.noobj),
        };
        onehot[[i, target]] = w;
        weight_sum += w;
    }
    let logp = tape.log_softmax_rows(vars.class_logits);
    let oh = tape.constant(onehot);
    let picked = tape.mul(logp, oh);
    let total = tape.sum_all(picked);
    let l_c = tape.scale(total, -1.0 / weight_sum);

    let lb_w = tape.scale(l_b, weights.l1);
    let lu_w = tape.scale(l_u, weights.giou);
    let lc_w = tape.scale(l_c, weights.cls);
    let partial = tape.add(lb_w, lu_w);
    let l_det = tape.add(partial, lc_w);

    DetectionLoss { l_b, l_u, l_c, l_det }
}

/// Binary cross-entropy on the interactiveness logits over every
/// proposal; the target is 1 exactly for proposals matched to an
/// interactive ground-truth pair.
pub fn interactiveness_loss(
    tape: &mut Tape,
    int_logits: Var,
    gts: &[GtPair],
    matching: &Matching,
) -> Var {
    let nq = tape.shape(int_logits).0;
    let targets = Matrix::from_shape_fn((nq, 1), |(i, _)| {
        match matching.proposal_to_gt.get(i).copied().flatten() {
            Some(g) if gts[g].interactive => 1.0,
            _ => 0.0,
        }
    });
    bce_mean(tape, int_logits, &targets)
}

/// Binary cross-entropy on verb logits of matched proposals.
pub fn verb_loss(tape: &mut Tape, verb_logits: Var, gts: &[GtPair], matching: &Matching) -> Var {
    if gts.is_empty() {
        return tape.constant(Matrix::zeros((1, 1)));
    }
    let n_verb = tape.shape(verb_logits).1;
    let idx = matching.gt_to_proposal.clone();
    let picked = tape.select_rows(verb_logits, &idx);
    let targets = Matrix::from_shape_fn((gts.len(), n_verb), |(g, v)| gts[g].verbs[v]);
    bce_mean(tape, picked, &targets)
}

/// Optional part-level supervision: binary cross-entropy on the part
/// scores of matched proposals whose ground truth carries part labels.
pub fn part_label_loss(
    tape: &mut Tape,
    part_logits: Var,
    gts: &[GtPair],
    matching: &Matching,
) -> Option<Var> {
    let labeled: Vec<(usize, [bool; NUM_PARTS])> = matching
        .gt_to_proposal
        .iter()
        .enumerate()
        .filter_map(|(g, &p)| gts[g].part_labels.map(|l| (p, l)))
        .collect();
    if labeled.is_empty() {
        return None;
    }
    let idx: Vec<usize> = labeled.iter().map(|(p, _)| *p).collect();
    let picked = tape.select_rows(part_logits, &idx);
    let targets = Matrix::from_shape_fn((labeled.len(), NUM_PARTS), |(r, k)| {
        labeled[r].1[k] as u8 as f64
    });
    Some(bce_mean(tape, picked, &targets))
}

/// Plain scalar binary cross-entropy on probabilities, with the
/// `0 * ln 0 = 0` convention so exact predictions cost exactly zero.
pub fn bce_scalar(p: &[f64], t: &[f64]) -> f64 {
    assert_eq!(p.len(), t.len());
    let term = |p: f64, t: f64| -> f64 {
        let a = if t > 0.0 { -t * p.ln() } else { 0.0 };
        let b = if t < 1.0 { -(1.0 - t) * (1.0 - p).ln() } else { 0.0 };
        a + b
    };
    p.iter().zip(t).map(|(&p, &t)| term(p, t)).sum::<f64>() / p.len() as f64
}

/// Independent scalar recomputation of every loss for verification.
pub fn loss_report_oracle(
    preds: &PredValues,
    int_probs: &[f64],
    verb_probs: &Matrix,
    gts: &[GtPair],
    matching: &Matching,
    weights: &LossWeights,
) -> LossReport {
    let g = gts.len();
    let (mut l_b, mut l_u) = (0.0, 0.0);
    for (gi, &pi) in matching.gt_to_proposal.iter().enumerate() {
        let hb = row4(&preds.h_boxes, pi);
        let ob = row4(&preds.o_boxes, pi);
        l_b += l1_4(hb, gts[gi].h_cxcywh) + l1_4(ob, gts[gi].o_cxcywh);
        l_u += 2.0
            - giou(&cxcywh_to_corners(hb), &cxcywh_to_corners(gts[gi].h_cxcywh))
            - giou(&cxcywh_to_corners(ob), &cxcywh_to_corners(gts[gi].o_cxcywh));
    }
    if g > 0 {
        l_b /= g as f64;
        l_u /= g as f64;
    }

    let nq = preds.h_boxes.nrows();
    let n_classes = preds.class_probs.ncols();
    let mut nll = 0.0;
    let mut wsum = 0.0;
    for i in 0..nq {
        let (target, w) = match matching.proposal_to_gt.get(i).copied().flatten() {
            Some(gi) => (gts[gi].class, 1.0),
            None => (n_classes - 1, weights.noobj),
        };
        nll += -w * preds.class_probs[[i, target]].ln();
        wsum += w;
    }
    let l_c = nll / wsum;
    let l_det = weights.l1 * l_b + weights.giou * l_u + weights.cls * l_c;

    let int_targets: Vec<f64> = (0..nq)
        .map(|i| match matching.proposal_to_gt.get(i).copied().flatten() {
            Some(gi) if gts[gi].interactive => 1.0,
            _ => 0.0,
        })
        .collect();
    let l_int = bce_scalar(int_probs, &int_targets);

    let l_verb = if g == 0 {
        0.0
    } else {
        let mut p = Vec::new();
        let mut t = Vec::new();
        for (gi, &pi) in matching.gt_to_proposal.iter().enumerate() {
            for v in 0..verb_probs.ncols() {
                p.push(verb_probs[[pi, v]]);
                t.push(gts[gi].verbs[v]);
            }
        }
        bce_scalar(&p, &t)
    };

    LossReport {
        l_b,
        l_u,
        l_c,
        l_det,
        l_int,
        l_verb,
        l_part: None,
    }
}
