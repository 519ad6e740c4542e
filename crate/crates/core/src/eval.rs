//! Metrics and inference post-processing: greedy matching, average
//! precision, non-interaction suppression, pairwise NMS, and hard-case
//! split reports.
//!
//! A prediction counts as a true positive only when both its human and
//! object boxes overlap an unmatched ground-truth pair of the same class
//! with IoU strictly greater than 0.5. Average precision integrates the
//! precision envelope over all recall points.

use crate::geometry::{iou, PixelBox};
use crate::model::{eval_forward, EvalForward, IntScheme, ModelConfig};
use crate::nn::ParamStore;
use crate::scene::{tag_hard_cases, Dataset, OcclusionBand, SceneAnnotation};
use crate::tape::Matrix;
use serde::{Deserialize, Serialize};

/// IoU threshold above which (strictly) a box pair can match ground truth.
pub const MATCH_IOU: f64 = 0.5;

/// One scored human-object prediction.
#[derive(Debug, Clone)]
pub struct Detection {
    pub h_box: PixelBox,
    pub o_box: PixelBox,
    /// 0-based object class.
    pub category: usize,
    /// Verb index for HOI-category predictions; `None` for plain
    /// interactiveness predictions.
    pub verb: Option<usize>,
    pub score: f64,
}

/// One ground-truth pair prepared for matching.
#[derive(Debug, Clone)]
pub struct GtInstance {
    pub h_box: PixelBox,
    pub o_box: PixelBox,
    pub category: usize,
    /// Verb indices active for this pair.
    pub verbs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone)]
pub struct ImageGts {
    pub image_id: u64,
    pub pairs: Vec<GtInstance>,
}

/// Matching outcome for one prediction, pooled across images for AP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredMatch {
    pub score: f64,
    pub tp: bool,
}

/// Per-image record of matched predictions, for dumps and debugging.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub image_id: u64,
    pub matches: Vec<ScoredMatch>,
    pub gt_count: usize,
}

/// Greedy score-descending matching for one image: a prediction is a true
/// positive when both IoUs strictly exceed 0.5 against an unmatched
/// ground-truth pair of the same class; among eligible pairs the one with
/// the largest `min(iou_h, iou_o)` wins. Each ground truth matches once.
pub fn match_predictions(dets: &[Detection], gts: &[GtInstance], image_id: u64) -> EvalRecord {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut gt_used = vec![false; gts.len()];
    let mut matches = Vec::with_capacity(dets.len());
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] || gt.category != det.category {
                continue;
            }
            let ih = iou(&det.h_box, &gt.h_box);
            let io = iou(&det.o_box, &gt.o_box);
            if ih > MATCH_IOU && io > MATCH_IOU {
                let overlap = ih.min(io);
                if best.map_or(true, |(_, b)| overlap > b) {
                    best = Some((gi, overlap));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                matches.push(ScoredMatch {
                    score: det.score,
                    tp: true,
                });
            }
            None => matches.push(ScoredMatch {
                score: det.score,
                tp: false,
            }),
        }
    }
    EvalRecord {
        image_id,
        matches,
        gt_count: gts.len(),
    }
}

/// All-point-interpolated average precision over pooled matches.
///
/// Returns `None` when there is no ground truth (the category is skipped
/// from means). Every true positive contributes `1/total_gt` times the
/// maximum precision at or beyond its rank.
pub fn average_precision(pooled: &[ScoredMatch], total_gt: usize) -> Option<f64> {
    if total_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[b].score.total_cmp(&pooled[a].score).then(a.cmp(&b)));

    // Precision at each rank, then the envelope (suffix maximum).
    let mut precisions = Vec::with_capacity(order.len());
    let mut tp_cum = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if pooled[i].tp {
            tp_cum += 1;
        }
        precisions.push(tp_cum as f64 / (rank + 1) as f64);
    }
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if pooled[i].tp {
            ap += envelope[rank] / total_gt as f64;
        }
    }
    Some(ap)
}

/// Interactiveness AP: every interactive pair is one pooled class.
pub fn interactiveness_ap(dets: &[ImageDetections], gts: &[ImageGts]) -> Option<f64> {
    let mut pooled = Vec::new();
    let mut total_gt = 0usize;
    for (d, g) in dets.iter().zip(gts) {
        debug_assert_eq!(d.image_id, g.image_id);
        let rec = match_predictions(&d.detections, &g.pairs, d.image_id);
        pooled.extend(rec.matches);
        total_gt += g.pairs.len();
    }
    average_precision(&pooled, total_gt)
}

/// Mean AP over `(verb, object-class)` categories; categories without
/// ground truth are skipped and reported as `None`.
pub struct HoiMapReport {
    pub map: Option<f64>,
    /// `(verb, class, gt_count, ap)` per category.
    pub per_category: Vec<(usize, usize, usize, Option<f64>)>,
}

pub fn hoi_map(
    dets: &[ImageDetections],
    gts: &[ImageGts],
    n_verb: usize,
    n_obj: usize,
) -> HoiMapReport {
    let mut per_category = Vec::new();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for verb in 0..n_verb {
        for class in 0..n_obj {
            let mut pooled = Vec::new();
            let mut total_gt = 0usize;
            for (d, g) in dets.iter().zip(gts) {
                let cat_dets: Vec<Detection> = d
                    .detections
                    .iter()
                    .filter(|det| det.verb == Some(verb) && det.category == class)
                    .cloned()
                    .collect();
                let cat_gts: Vec<GtInstance> = g
                    .pairs
                    .iter()
                    .filter(|gt| gt.category == class && gt.verbs.contains(&verb))
                    .cloned()
                    .collect();
                total_gt += cat_gts.len();
                let rec = match_predictions(&cat_dets, &cat_gts, d.image_id);
                pooled.extend(rec.matches);
            }
            let ap = average_precision(&pooled, total_gt);
            if let Some(a) = ap {
                sum += a;
                counted += 1;
            }
            per_category.push((verb, class, total_gt, ap));
        }
    }
    HoiMapReport {
        map: (counted > 0).then(|| sum / counted as f64),
        per_category,
    }
}

/// Matches each verb-set proposal to the interactiveness-set proposal of
/// the same predicted class maximizing the summed human and object IoU.
/// Returns the matched interactiveness score per proposal, zero when no
/// class-consistent candidate exists.
pub fn match_for_nis(
    verb_props: &[(PixelBox, PixelBox, usize)],
    int_props: &[(PixelBox, PixelBox, usize, f64)],
) -> Vec<f64> {
    verb_props
        .iter()
        .map(|(h, o, class)| {
            let mut best: Option<(f64, f64)> = None; // (iou sum, p_int)
            for (ih, io, iclass, p_int) in int_props {
                if iclass != class {
                    continue;
                }
                let s = iou(h, ih) + iou(o, io);
                if best.map_or(true, |(bs, _)| s > bs) {
                    best = Some((s, *p_int));
                }
            }
            best.map_or(0.0, |(_, p)| p)
        })
        .collect()
}

/// Non-interaction suppression: keep proposals whose matched
/// interactiveness score reaches the threshold.
pub fn nis_filter<T>(proposals: Vec<T>, scores: &[f64], threshold: f64) -> Vec<T> {
    proposals
        .into_iter()
        .zip(scores)
        .filter(|(_, &s)| s >= threshold)
        .map(|(p, _)| p)
        .collect()
}

/// Pairwise NMS: walking detections by descending score, a detection is
/// suppressed when some kept detection of the same HOI class overlaps it
/// with both human and object IoU above the threshold.
pub fn pairwise_nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for det in dets {
        let suppressed = kept.iter().any(|k| {
            k.category == det.category
                && k.verb == det.verb
                && iou(&k.h_box, &det.h_box) > iou_threshold
                && iou(&k.o_box, &det.o_box) > iou_threshold
        });
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Ground-truth instances of a scene for the interactiveness benchmark
/// (interactive pairs only).
pub fn scene_gt_instances(scene: &SceneAnnotation) -> Vec<GtInstance> {
    scene
        .interactive_pairs()
        .map(|int| GtInstance {
            h_box: PixelBox::from_wh(scene.persons[int.person].bbox),
            o_box: PixelBox::from_wh(scene.objects[int.object].bbox),
            category: (scene.objects[int.object].category as usize).saturating_sub(1),
            verbs: int
                .verbs
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1)
                .map(|(i, _)| i)
                .collect(),
        })
        .collect()
}

fn argmax_class(probs: &Matrix, row: usize, n_obj: usize) -> usize {
    (0..n_obj)
        .max_by(|&a, &b| probs[[row, a]].total_cmp(&probs[[row, b]]).then(b.cmp(&a)))
        .unwrap_or(0)
}

/// Turns one forward pass into interactiveness detections (scored by the
/// interactiveness head) after pairwise NMS.
pub fn interactiveness_detections(
    out: &EvalForward,
    cfg: &ModelConfig,
    nms_iou: f64,
) -> Vec<Detection> {
    let size = cfg.image_size as f64;
    let dets: Vec<Detection> = (0..out.h_boxes.nrows())
        .map(|i| {
            let h = PixelBox::from_normalized_cxcywh(
                [
                    out.h_boxes[[i, 0]],
                    out.h_boxes[[i, 1]],
                    out.h_boxes[[i, 2]],
                    out.h_boxes[[i, 3]],
                ],
                size,
                size,
            );
            let o = PixelBox::from_normalized_cxcywh(
                [
                    out.o_boxes[[i, 0]],
                    out.o_boxes[[i, 1]],
                    out.o_boxes[[i, 2]],
                    out.o_boxes[[i, 3]],
                ],
                size,
                size,
            );
            Detection {
                h_box: h,
                o_box: o,
                category: argmax_class(&out.class_probs, i, cfg.n_obj),
                verb: None,
                score: out.p_int[i],
            }
        })
        .collect();
    pairwise_nms(dets, nms_iou)
}

/// Runs the interactiveness benchmark over a dataset with one model.
pub fn run_interactiveness_eval(
    store: &ParamStore,
    cfg: &ModelConfig,
    scheme: IntScheme,
    dataset: &Dataset,
    nms_iou: f64,
) -> Result<(Vec<ImageDetections>, Vec<ImageGts>), crate::model::ModelError> {
    let mut dets = Vec::with_capacity(dataset.images.len());
    let mut gts = Vec::with_capacity(dataset.images.len());
    for scene in &dataset.images {
        let out = eval_forward(store, cfg, scene, scheme, false, false)?;
        dets.push(ImageDetections {
            image_id: scene.id,
            detections: interactiveness_detections(&out, cfg, nms_iou),
        });
        gts.push(ImageGts {
            image_id: scene.id,
            pairs: scene_gt_instances(scene),
        });
    }
    Ok((dets, gts))
}

/// HOI detections from the verb model (`R`), suppressed by the matched
/// interactiveness scores of the stage-1 model (`R'`).
pub struct HoiEvalOutput {
    pub dets: Vec<ImageDetections>,
    pub gts: Vec<ImageGts>,
}

pub fn run_hoi_eval(
    stage2: &ParamStore,
    stage1: &ParamStore,
    cfg: &ModelConfig,
    dataset: &Dataset,
    scheme: IntScheme,
    nis_threshold: Option<f64>,
    nms_iou: f64,
) -> Result<HoiEvalOutput, crate::model::ModelError> {
    let size = cfg.image_size as f64;
    let mut all_dets = Vec::with_capacity(dataset.images.len());
    let mut all_gts = Vec::with_capacity(dataset.images.len());
    for scene in &dataset.images {
        let verb_out = eval_forward(stage2, cfg, scene, scheme, true, false)?;
        let boxes_of = |m: &Matrix, i: usize| {
            PixelBox::from_normalized_cxcywh([m[[i, 0]], m[[i, 1]], m[[i, 2]], m[[i, 3]]], size, size)
        };
        let verb_props: Vec<(PixelBox, PixelBox, usize)> = (0..verb_out.h_boxes.nrows())
            .map(|i| {
                (
                    boxes_of(&verb_out.h_boxes, i),
                    boxes_of(&verb_out.o_boxes, i),
                    argmax_class(&verb_out.class_probs, i, cfg.n_obj),
                )
            })
            .collect();

        // Matched interactiveness from the stage-1 proposal set.
        let matched_int = match nis_threshold {
            Some(_) => {
                let int_out = eval_forward(stage1, cfg, scene, scheme, false, false)?;
                let int_props: Vec<(PixelBox, PixelBox, usize, f64)> = (0..int_out
                    .h_boxes
                    .nrows())
                    .map(|i| {
                        (
                            boxes_of(&int_out.h_boxes, i),
                            boxes_of(&int_out.o_boxes, i),
                            argmax_class(&int_out.class_probs, i, cfg.n_obj),
                            int_out.p_int[i],
                        )
                    })
                    .collect();
                match_for_nis(&verb_props, &int_props)
            }
            None => vec![f64::INFINITY; verb_props.len()],
        };

        let verbs = verb_out.verb_probs.as_ref().expect("verb head requested");
        let mut dets = Vec::new();
        for (i, (h, o, class)) in verb_props.iter().enumerate() {
            if let Some(theta) = nis_threshold {
                if matched_int[i] < theta {
                    continue;
                }
            }
            let obj_conf = verb_out.class_probs[[i, *class]];
            for v in 0..cfg.n_verb {
                dets.push(Detection {
                    h_box: *h,
                    o_box: *o,
                    category: *class,
                    verb: Some(v),
                    score: verbs[[i, v]] * obj_conf,
                });
            }
        }
        all_dets.push(ImageDetections {
            image_id: scene.id,
            detections: pairwise_nms(dets, nms_iou),
        });
        all_gts.push(ImageGts {
            image_id: scene.id,
            pairs: scene_gt_instances(scene),
        });
    }
    Ok(HoiEvalOutput {
        dets: all_dets,
        gts: all_gts,
    })
}

/// Hard-case splits over a dataset. The sparse/crowded and normal/tiny
/// pairs partition the images; the occlusion columns exclude the middle
/// confidence band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Full,
    Sparse,
    Crowded,
    Normal,
    Tiny,
    LessOcc,
    MoreOcc,
}

impl Split {
    pub const ALL: [Split; 7] = [
        Split::Full,
        Split::Sparse,
        Split::Crowded,
        Split::Normal,
        Split::Tiny,
        Split::LessOcc,
        Split::MoreOcc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Full => "full",
            Split::Sparse => "sparse",
            Split::Crowded => "crowded",
            Split::Normal => "normal",
            Split::Tiny => "tiny",
            Split::LessOcc => "less-occ",
            Split::MoreOcc => "more-occ",
        }
    }

    pub fn contains(self, scene: &SceneAnnotation) -> bool {
        let tags = tag_hard_cases(scene);
        match self {
            Split::Full => true,
            Split::Sparse => !tags.crowded,
            Split::Crowded => tags.crowded,
            Split::Normal => !tags.tiny,
            Split::Tiny => tags.tiny,
            Split::LessOcc => tags.occlusion == OcclusionBand::Low,
            Split::MoreOcc => tags.occlusion == OcclusionBand::High,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitRow {
    pub split: String,
    pub images: usize,
    pub gt_pairs: usize,
    /// `None` renders as "n/a" (empty split or no ground truth).
    pub ap: Option<f64>,
}

/// Computes the per-split interactiveness AP table from per-image
/// detections evaluated once.
pub fn split_report(
    dataset: &Dataset,
    dets: &[ImageDetections],
    gts: &[ImageGts],
    splits: &[Split],
) -> Vec<SplitRow> {
    splits
        .iter()
        .map(|&split| {
            let mut sub_dets = Vec::new();
            let mut sub_gts = Vec::new();
            for ((scene, d), g) in dataset.images.iter().zip(dets).zip(gts) {
                if split.contains(scene) {
                    sub_dets.push(d.clone());
                    sub_gts.push(g.clone());
                }
            }
            let gt_pairs = sub_gts.iter().map(|g| g.pairs.len()).sum();
            let ap = if sub_dets.is_empty() {
                None
            } else {
                interactiveness_ap(&sub_dets, &sub_gts)
            };
            SplitRow {
                split: split.name().to_string(),
                images: sub_dets.len(),
                gt_pairs,
                ap,
            }
        })
        .collect()
}

/// Renders split rows as an aligned text table.
pub fn render_split_table(rows: &[SplitRow]) -> String {
    let mut out = String::from("split      images  gt-pairs  interactiveness-AP\n");
    for r in rows {
        let ap = r
            .ap
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".to_string());
        out.push_str(&format!(
            "{:<10} {:>6}  {:>8}  {}\n",
            r.split, r.images, r.gt_pairs, ap
        ));
    }
    out
}

/// Renders split rows as CSV.
pub fn split_csv(rows: &[SplitRow]) -> String {
    let mut out = String::from("split,images,gt_pairs,interactiveness_ap\n");
    for r in rows {
        let ap = r.ap.map(|a| a.to_string()).unwrap_or_else(|| "n/a".into());
        out.push_str(&format!("{},{},{},{}\n", r.split, r.images, r.gt_pairs, ap));
    }
    out
}

/// Score-shuffled baseline: the same detections with scores permuted
/// deterministically across the whole split. Localization stays intact,
/// ranking information is destroyed.
pub fn shuffled_baseline_ap(dets: &[ImageDetections], gts: &[ImageGts], seed: u64) -> Option<f64> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut scores: Vec<f64> = dets
        .iter()
        .flat_map(|d| d.detections.iter().map(|x| x.score))
        .collect();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    scores.shuffle(&mut rng);
    let mut cursor = 0usize;
    let shuffled: Vec<ImageDetections> = dets
        .iter()
        .map(|d| {
            let detections = d
                .detections
                .iter()
                .map(|det| {
                    let mut det = det.clone();
                    det.score = scores[cursor];
                    cursor += 1;
                    det
                })
                .collect();
            ImageDetections {
                image_id: d.image_id,
                detections,
            }
        })
        .collect();
    interactiveness_ap(&shuffled, gts)
}

/// JSONL prediction record, one line per image.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionRecord {
    /// Human box `[w1, h1, w2, h2]` in pixels.
    pub bh: [f64; 4],
    /// Object box `[w1, h1, w2, h2]` in pixels.
    pub bo: [f64; 4],
    /// 1-based object category.
    pub category: u32,
    pub verb_scores: Vec<f64>,
    pub int_score: f64,
}

/// Builds the JSONL record for one image from a forward pass.
pub fn prediction_record(out: &EvalForward, cfg: &ModelConfig, image_id: u64) -> PredictionRecord {
    let size = cfg.image_size as f64;
    let detections = (0..out.h_boxes.nrows())
        .map(|i| {
            let h = PixelBox::from_normalized_cxcywh(
                [
                    out.h_boxes[[i, 0]],
                    out.h_boxes[[i, 1]],
                    out.h_boxes[[i, 2]],
                    out.h_boxes[[i, 3]],
                ],
                size,
                size,
            );
            let o = PixelBox::from_normalized_cxcywh(
                [
                    out.o_boxes[[i, 0]],
                    out.o_boxes[[i, 1]],
                    out.o_boxes[[i, 2]],
                    out.o_boxes[[i, 3]],
                ],
                size,
                size,
            );
            DetectionRecord {
                bh: h.to_wh(),
                bo: o.to_wh(),
                category: (argmax_class(&out.class_probs, i, cfg.n_obj) + 1) as u32,
                verb_scores: out
                    .verb_probs
                    .as_ref()
                    .map(|v| v.row(i).to_vec())
                    .unwrap_or_default(),
                int_score: out.p_int[i],
            }
        })
        .collect();
    PredictionRecord {
        image_id,
        detections,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(h: PixelBox, o: PixelBox, category: usize, score: f64) -> Detection {
        Detection {
            h_box: h,
            o_box: o,
            category,
            verb: None,
            score,
        }
    }

    fn unit_gt(category: usize) -> GtInstance {
        GtInstance {
            h_box: PixelBox::new(0.0, 0.0, 10.0, 10.0),
            o_box: PixelBox::new(20.0, 20.0, 30.0, 30.0),
            category,
            verbs: vec![0],
        }
    }

    #[test]
    fn exact_prediction_is_tp() {
        let gt = unit_gt(0);
        let d = det(gt.h_box, gt.o_box, 0, 0.9);
        let rec = match_predictions(&[d], &[gt], 0);
        assert!(rec.matches[0].tp);
    }

    #[test]
    fn second_prediction_on_same_gt_is_fp() {
        let gt = unit_gt(0);
        let d1 = det(gt.h_box, gt.o_box, 0, 0.9);
        let d2 = det(gt.h_box, gt.o_box, 0, 0.5);
        let rec = match_predictions(&[d2.clone(), d1.clone()], &[gt], 0);
        // Matches are emitted in descending score order.
        assert!(rec.matches[0].tp && rec.matches[0].score == 0.9);
        assert!(!rec.matches[1].tp);
        // TP + FP = predictions.
        assert_eq!(rec.matches.len(), 2);
    }

    #[test]
    fn iou_exactly_half_is_fp() {
        // Overlap arranged so IoU is exactly 0.5: [0,0,1,2] vs [0,0,1,1]
        // gives intersection 1, union 2.
        let gt = GtInstance {
            h_box: PixelBox::new(0.0, 0.0, 1.0, 2.0),
            o_box: PixelBox::new(0.0, 0.0, 1.0, 2.0),
            category: 0,
            verbs: vec![],
        };
        let d = det(
            PixelBox::new(0.0, 0.0, 1.0, 1.0),
            PixelBox::new(0.0, 0.0, 1.0, 1.0),
            0,
            0.9,
        );
        let rec = match_predictions(&[d], &[gt], 0);
        assert!(!rec.matches[0].tp, "IoU == 0.5 must not match");
    }

    #[test]
    fn wrong_class_is_fp() {
        let gt = unit_gt(1);
        let d = det(gt.h_box, gt.o_box, 0, 0.9);
        let rec = match_predictions(&[d], &[gt], 0);
        assert!(!rec.matches[0].tp);
    }

    #[test]
    fn single_correct_prediction_gives_ap_one() {
        let m = [ScoredMatch {
            score: 0.9,
            tp: true,
        }];
        assert_eq!(average_precision(&m, 1), Some(1.0));
    }

    #[test]
    fn lower_scored_correct_gives_ap_half() {
        let m = [
            ScoredMatch {
                score: 0.9,
                tp: false,
            },
            ScoredMatch {
                score: 0.5,
                tp: true,
            },
        ];
        assert_eq!(average_precision(&m, 1), Some(0.5));
    }

    #[test]
    fn zero_gt_is_skipped() {
        assert_eq!(average_precision(&[], 0), None);
    }

    /// Brute-force PR integration: for every true positive, scan the whole
    /// suffix for the maximum precision. Quadratic and independent.
    fn ap_oracle(pooled: &[ScoredMatch], total_gt: usize) -> Option<f64> {
        if total_gt == 0 {
            return None;
        }
        let mut order: Vec<usize> = (0..pooled.len()).collect();
        order.sort_by(|&a, &b| pooled[b].score.total_cmp(&pooled[a].score).then(a.cmp(&b)));
        let mut precisions = Vec::new();
        let mut tp = 0usize;
        for (rank, &i) in order.iter().enumerate() {
            if pooled[i].tp {
                tp += 1;
            }
            precisions.push(tp as f64 / (rank + 1) as f64);
        }
        let mut ap = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if pooled[i].tp {
                let mut best = 0.0f64;
                for &p in &precisions[rank..] {
                    best = best.max(p);
                }
                ap += best / total_gt as f64;
            }
        }
        Some(ap)
    }

    #[test]
    fn ap_matches_bruteforce_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.gen_range(0..=10);
            let matches: Vec<ScoredMatch> = (0..n)
                .map(|_| ScoredMatch {
                    score: rng.gen_range(0.0..1.0),
                    tp: rng.gen_bool(0.5),
                })
                .collect();
            let tp_count = matches.iter().filter(|m| m.tp).count();
            let total_gt = tp_count + rng.gen_range(0..4);
            assert_eq!(average_precision(&matches, total_gt), ap_oracle(&matches, total_gt));
        }
    }

    #[test]
    fn nis_matching_follows_argmax_rule() {
        let b = |x: f64| PixelBox::new(x, 0.0, x + 10.0, 10.0);
        let verb_props = vec![(b(0.0), b(20.0), 1usize)];
        let int_props = vec![
            // Wrong class: ignored even though boxes align.
            (b(0.0), b(20.0), 0usize, 0.99),
            // Right class, partial overlap.
            (b(4.0), b(24.0), 1usize, 0.4),
            // Right class, better overlap: wins.
            (b(1.0), b(21.0), 1usize, 0.7),
        ];
        let matched = match_for_nis(&verb_props, &int_props);
        assert_eq!(matched, vec![0.7]);

        // Identical proposal: IoU sum 2.0, still the max.
        let int_props2 = vec![(b(0.0), b(20.0), 1usize, 0.9), (b(1.0), b(21.0), 1, 0.2)];
        assert_eq!(match_for_nis(&verb_props, &int_props2), vec![0.9]);

        // No class-consistent candidate: zero.
        let int_props3 = vec![(b(0.0), b(20.0), 0usize, 0.9)];
        assert_eq!(match_for_nis(&verb_props, &int_props3), vec![0.0]);
    }

    #[test]
    fn nis_filter_thresholds() {
        let scores = [0.2, 0.6, 0.9];
        let items = vec!["a", "b", "c"];
        assert_eq!(nis_filter(items.clone(), &scores, 0.0).len(), 3);
        assert_eq!(nis_filter(items.clone(), &scores, 0.5), vec!["b", "c"]);
        assert_eq!(nis_filter(items.clone(), &scores, 1.0).len(), 0);
        // Monotone in the threshold.
        let mut last = usize::MAX;
        for theta in [0.0, 0.1, 0.3, 0.5, 0.7, 0.95, 1.0] {
            let kept = nis_filter(items.clone(), &scores, theta).len();
            assert!(kept <= last);
            last = kept;
        }
    }

    #[test]
    fn nms_keeps_one_of_duplicates_and_all_disjoint() {
        let b = |x: f64| PixelBox::new(x, 0.0, x + 10.0, 10.0);
        let dets = vec![
            det(b(0.0), b(20.0), 0, 0.9),
            det(b(0.5), b(20.5), 0, 0.8),
            det(b(100.0), b(120.0), 0, 0.7),
        ];
        let kept = pairwise_nms(dets, 0.6);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.7);

        let disjoint = vec![
            det(b(0.0), b(20.0), 0, 0.9),
            det(b(40.0), b(60.0), 0, 0.8),
        ];
        assert_eq!(pairwise_nms(disjoint, 0.6).len(), 2);
    }

    #[test]
    fn nms_four_pair_fixture_keeps_three() {
        let b = |x: f64| PixelBox::new(x, 0.0, x + 10.0, 10.0);
        // Pairs 1 and 2 overlap heavily; 3 overlaps only in the human box;
        // 4 is elsewhere.
        let dets = vec![
            det(b(0.0), b(20.0), 0, 0.9),
            det(b(1.0), b(21.0), 0, 0.8),
            det(b(0.0), b(60.0), 0, 0.7),
            det(b(100.0), b(130.0), 0, 0.6),
        ];
        let kept = pairwise_nms(dets, 0.6);
        assert_eq!(kept.len(), 3);
    }

    #[test]
    fn nms_requires_same_hoi_class() {
        let b = |x: f64| PixelBox::new(x, 0.0, x + 10.0, 10.0);
        let mut d1 = det(b(0.0), b(20.0), 0, 0.9);
        let mut d2 = det(b(0.0), b(20.0), 0, 0.8);
        d1.verb = Some(0);
        d2.verb = Some(1);
        assert_eq!(pairwise_nms(vec![d1, d2], 0.6).len(), 2);
    }

    #[test]
    fn shuffled_baseline_ranks_lower_on_separable_scores() {
        // Construct matches where TPs all score high: real AP 1.0, the
        // shuffled baseline almost surely lower.
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        let b = |x: f64| PixelBox::new(x, 0.0, x + 10.0, 10.0);
        for img in 0..10u64 {
            let gt = GtInstance {
                h_box: b(0.0),
                o_box: b(20.0),
                category: 0,
                verbs: vec![0],
            };
            let tp = det(b(0.0), b(20.0), 0, 0.95);
            let fp1 = det(b(50.0), b(70.0), 0, 0.2);
            let fp2 = det(b(80.0), b(100.0), 0, 0.1);
            dets.push(ImageDetections {
                image_id: img,
                detections: vec![tp, fp1, fp2],
            });
            gts.push(ImageGts {
                image_id: img,
                pairs: vec![gt],
            });
        }
        let real = interactiveness_ap(&dets, &gts).unwrap();
        let shuffled = shuffled_baseline_ap(&dets, &gts, 3).unwrap();
        assert!((real - 1.0).abs() < 1e-12);
        assert!(shuffled < real);
    }

    #[test]
    fn split_report_partitions_cover_dataset() {
        let ds = crate::scene::generate_dataset(21, 40, &crate::scene::DifficultyProfile::default())
            .unwrap();
        // Detections don't matter for the partition check; use empties.
        let dets: Vec<ImageDetections> = ds
            .images
            .iter()
            .map(|s| ImageDetections {
                image_id: s.id,
                detections: vec![],
            })
            .collect();
        let gts: Vec<ImageGts> = ds
            .images
            .iter()
            .map(|s| ImageGts {
                image_id: s.id,
                pairs: scene_gt_instances(s),
            })
            .collect();
        let rows = split_report(&ds, &dets, &gts, &Split::ALL);
        let by_name = |n: &str| rows.iter().find(|r| r.split == n).unwrap();
        let full = by_name("full");
        assert_eq!(
            by_name("sparse").images + by_name("crowded").images,
            full.images
        );
        assert_eq!(
            by_name("sparse").gt_pairs + by_name("crowded").gt_pairs,
            full.gt_pairs
        );
        assert_eq!(
            by_name("normal").gt_pairs + by_name("tiny").gt_pairs,
            full.gt_pairs
        );
        // The occlusion columns exclude the mid band, so they may undercount.
        assert!(by_name("less-occ").gt_pairs + by_name("more-occ").gt_pairs <= full.gt_pairs);
    }

    #[test]
    fn empty_split_reports_na() {
        let ds = Dataset {
            schema: 1,
            images: vec![],
        };
        let rows = split_report(&ds, &[], &[], &[Split::Crowded]);
        assert_eq!(rows[0].ap, None);
        assert!(render_split_table(&rows).contains("n/a"));
    }

    #[test]
    fn single_image_split_equals_single_image_ap() {
        let b = |x: f64| PixelBox::new(x, 0.0, x + 10.0, 10.0);
        let gt = GtInstance {
            h_box: b(0.0),
            o_box: b(20.0),
            category: 0,
            verbs: vec![0],
        };
        let dets = vec![ImageDetections {
            image_id: 0,
            detections: vec![det(b(0.0), b(20.0), 0, 0.9), det(b(50.0), b(70.0), 0, 0.3)],
        }];
        let gts = vec![ImageGts {
            image_id: 0,
            pairs: vec![gt],
        }];
        assert_eq!(interactiveness_ap(&dets, &gts), Some(1.0));
    }
}
