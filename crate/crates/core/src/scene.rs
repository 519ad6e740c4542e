//! Deterministic synthetic scene generation, the annotation schema, and
//! hard-case tagging.
//!
//! Scenes contain persons rendered as stacks of colored body-part bands
//! and objects rendered as colored shapes. Interactiveness ground truth is
//! purely geometric: a person interacts with an object exactly when one of
//! the verb trigger parts overlaps the object box by at least the overlap
//! threshold, and the verb is determined by which part overlaps. Labels
//! are therefore re-derivable from the serialized boxes alone, and the
//! part geometry that the saliency masks highlight is causally tied to
//! the labels the classifier must learn.

use crate::geometry::PixelBox;
use crate::mask::{BodyPart, NUM_PARTS};
use crate::tape::Matrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Supported annotation schema version.
pub const SCHEMA_VERSION: u32 = 1;

/// Verb vocabulary: each verb fires when its trigger part touches the
/// object. Index = verb class id.
pub const VERBS: [(&str, BodyPart); 4] = [
    ("hold", BodyPart::Hands),
    ("kick", BodyPart::Feet),
    ("inspect", BodyPart::Head),
    ("sit_on", BodyPart::Hip),
];

/// Object vocabulary; categories are 1-based in annotations.
pub const OBJECT_CATEGORIES: [&str; 3] = ["ball", "cup", "bench"];

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    Version { found: i64 },
    #[error("invalid annotation at {path}: {reason}")]
    Invalid { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartBoxes {
    pub feet: Vec<[f64; 4]>,
    pub legs: Vec<[f64; 4]>,
    pub hip: Vec<[f64; 4]>,
    pub hands: Vec<[f64; 4]>,
    pub arms: Vec<[f64; 4]>,
    pub head: Vec<[f64; 4]>,
}

impl PartBoxes {
    pub fn get(&self, part: BodyPart) -> &Vec<[f64; 4]> {
        match part {
            BodyPart::Feet => &self.feet,
            BodyPart::Legs => &self.legs,
            BodyPart::Hip => &self.hip,
            BodyPart::Hands => &self.hands,
            BodyPart::Arms => &self.arms,
            BodyPart::Head => &self.head,
        }
    }

    pub fn as_pixel_boxes(&self) -> [Vec<PixelBox>; NUM_PARTS] {
        std::array::from_fn(|k| {
            self.get(BodyPart::from_index(k))
                .iter()
                .map(|&b| PixelBox::from_wh(b))
                .collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonAnn {
    /// Whole-body box `[w1, h1, w2, h2]`.
    pub bbox: [f64; 4],
    pub parts: PartBoxes,
    /// Pose-quality proxy in `[0, 1]`: one minus the fraction of this
    /// person covered by persons drawn later.
    pub joint_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectAnn {
    pub bbox: [f64; 4],
    /// 1-based object category.
    pub category: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionAnn {
    pub person: usize,
    pub object: usize,
    /// Multi-hot verb vector, one entry per verb class.
    pub verbs: Vec<u8>,
    pub interactive: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part_labels: Option<[bool; NUM_PARTS]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneAnnotation {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub persons: Vec<PersonAnn>,
    pub objects: Vec<ObjectAnn>,
    pub interactions: Vec<InteractionAnn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub schema: u32,
    pub images: Vec<SceneAnnotation>,
}

impl SceneAnnotation {
    /// Part boxes of every person, in the layout the mask builder expects.
    pub fn person_part_boxes(&self) -> Vec<[Vec<PixelBox>; NUM_PARTS]> {
        self.persons
            .iter()
            .map(|p| p.parts.as_pixel_boxes())
            .collect()
    }

    pub fn interactive_pairs(&self) -> impl Iterator<Item = &InteractionAnn> {
        self.interactions.iter().filter(|i| i.interactive)
    }
}

/// Fraction of the object's area covered by the part box.
fn object_overlap(part: &PixelBox, object: &PixelBox) -> f64 {
    let area = object.area();
    if area <= 0.0 {
        return 0.0;
    }
    part.intersection_area(object) / area
}

/// The geometric interactiveness rule. Returns the multi-hot verb vector
/// and the per-part overlap flags for one (person, object) pair.
pub fn interaction_rule(
    parts: &PartBoxes,
    object: &PixelBox,
    threshold: f64,
) -> (Vec<u8>, [bool; NUM_PARTS]) {
    let part_hit: [bool; NUM_PARTS] = std::array::from_fn(|k| {
        parts
            .get(BodyPart::from_index(k))
            .iter()
            .any(|&b| object_overlap(&PixelBox::from_wh(b), object) >= threshold)
    });
    let verbs = VERBS
        .iter()
        .map(|&(_, part)| part_hit[part.index()] as u8)
        .collect();
    (verbs, part_hit)
}

/// Generation profile: scene composition ranges and rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifficultyProfile {
    pub image_size: u32,
    /// Persons per scene outside crowded mode (inclusive range).
    pub person_range: (usize, usize),
    /// Fraction of scenes forced to contain at least three interactive
    /// pairs.
    pub crowded_rate: f64,
    /// Chance that a person receives an interactive object.
    pub interaction_rate: f64,
    /// Chance that a person is drawn at tiny scale.
    pub tiny_rate: f64,
    /// Chance that a person is placed overlapping an earlier person.
    pub occlusion_rate: f64,
    /// Distractor objects added per scene (inclusive range).
    pub distractor_range: (usize, usize),
    /// Minimum object-area overlap fraction that makes a pair interactive.
    pub overlap_threshold: f64,
    /// Hard cap on listed interactions per scene.
    pub max_pairs: usize,
}

impl Default for DifficultyProfile {
    fn default() -> Self {
        Self {
            image_size: 128,
            person_range: (1, 3),
            crowded_rate: 0.35,
            interaction_rate: 0.7,
            tiny_rate: 0.25,
            occlusion_rate: 0.3,
            distractor_range: (0, 2),
            overlap_threshold: 0.25,
            max_pairs: 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("unsatisfiable profile: {0}")]
    Unsatisfiable(String),
}

/// Body-part band layout inside a person box.
fn layout_parts(b: &PixelBox) -> PartBoxes {
    let w = b.width();
    let h = b.height();
    let bx = |fx1: f64, fy1: f64, fx2: f64, fy2: f64| -> [f64; 4] {
        [
            b.x1 + fx1 * w,
            b.y1 + fy1 * h,
            b.x1 + fx2 * w,
            b.y1 + fy2 * h,
        ]
    };
    PartBoxes {
        head: vec![bx(0.25, 0.0, 0.75, 0.18)],
        arms: vec![bx(0.0, 0.18, 0.18, 0.55), bx(0.82, 0.18, 1.0, 0.55)],
        hands: vec![bx(0.0, 0.55, 0.18, 0.68), bx(0.82, 0.55, 1.0, 0.68)],
        hip: vec![bx(0.15, 0.45, 0.85, 0.62)],
        legs: vec![bx(0.18, 0.62, 0.46, 0.90), bx(0.54, 0.62, 0.82, 0.90)],
        feet: vec![bx(0.18, 0.90, 0.46, 1.0), bx(0.54, 0.90, 0.82, 1.0)],
    }
}

fn mix_seed(root: u64, index: u64) -> u64 {
    // splitmix64 step over root + index.
    let mut z = root
        .wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn covered_fraction(target: &PixelBox, later: &[PixelBox]) -> f64 {
    let x1 = target.x1.floor() as i64;
    let x2 = target.x2.ceil() as i64;
    let y1 = target.y1.floor() as i64;
    let y2 = target.y2.ceil() as i64;
    let mut total = 0usize;
    let mut covered = 0usize;
    for py in y1..y2 {
        for px in x1..x2 {
            let cx = px as f64 + 0.5;
            let cy = py as f64 + 0.5;
            if cx < target.x1 || cx > target.x2 || cy < target.y1 || cy > target.y2 {
                continue;
            }
            total += 1;
            if later
                .iter()
                .any(|b| cx >= b.x1 && cx <= b.x2 && cy >= b.y1 && cy <= b.y2)
            {
                covered += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

/// Generates one scene deterministically from `(seed, id, profile)`.
///
/// The crowded/sparse intent is drawn once per scene; attempts whose
/// derived interactive-pair count disagrees with the intent (accidental
/// cross-person contacts, failed placements) are regenerated so the
/// crowded fraction tracks the configured rate.
pub fn generate_scene(
    seed: u64,
    id: u64,
    profile: &DifficultyProfile,
) -> Result<SceneAnnotation, GenerateError> {
    if profile.image_size == 0 {
        return Err(GenerateError::Unsatisfiable("zero-area image".into()));
    }
    let crowded = ChaCha20Rng::seed_from_u64(mix_seed(seed, 0xc0ffee)).gen_bool(profile.crowded_rate);
    let mut fallback = None;
    for attempt in 0..20u64 {
        let scene = generate_attempt(
            mix_seed(seed, attempt.wrapping_mul(0x5bd1e995)),
            id,
            profile,
            crowded,
        );
        let interactive = scene.interactions.iter().filter(|i| i.interactive).count();
        if interactive > profile.max_pairs {
            continue;
        }
        if (interactive >= 3) == crowded {
            return Ok(scene);
        }
        fallback.get_or_insert(scene);
    }
    fallback.ok_or_else(|| {
        GenerateError::Unsatisfiable(format!(
            "could not fit interactions under max_pairs={} in 20 attempts",
            profile.max_pairs
        ))
    })
}

fn generate_attempt(
    seed: u64,
    id: u64,
    profile: &DifficultyProfile,
    crowded: bool,
) -> SceneAnnotation {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let size = profile.image_size as f64;
    let n_persons = if crowded {
        rng.gen_range(3..=profile.person_range.1.max(3))
    } else {
        rng.gen_range(profile.person_range.0..=profile.person_range.1)
    };

    // Place persons.
    let mut person_boxes: Vec<PixelBox> = Vec::new();
    for i in 0..n_persons {
        let tiny = rng.gen_bool(profile.tiny_rate);
        let (wf, hf) = if tiny {
            (rng.gen_range(0.10..0.16), rng.gen_range(0.18..0.30))
        } else {
            (rng.gen_range(0.18..0.34), rng.gen_range(0.34..0.62))
        };
        let w = wf * size;
        let h = hf * size;
        let (x1, y1) = if i > 0 && rng.gen_bool(profile.occlusion_rate) {
            // Drop near an earlier person to create overlap.
            let base = &person_boxes[rng.gen_range(0..person_boxes.len())];
            let jx = rng.gen_range(-0.35..0.35) * base.width();
            let jy = rng.gen_range(-0.25..0.25) * base.height();
            (
                (base.x1 + jx).clamp(0.0, size - w),
                (base.y1 + jy).clamp(0.0, size - h),
            )
        } else {
            (
                rng.gen_range(0.0..(size - w)),
                rng.gen_range(0.0..(size - h)),
            )
        };
        person_boxes.push(PixelBox::new(x1, y1, x1 + w, y1 + h));
    }

    // Place objects: interactive ones on verb trigger parts, then
    // distractors anywhere. Sparse scenes stay under three interactive
    // placements so the crowded tag follows the configured rate.
    let mut objects: Vec<ObjectAnn> = Vec::new();
    let mut placed = 0usize;
    for (i, pb) in person_boxes.iter().enumerate() {
        let wants_object = if crowded && i < 3 {
            true
        } else if !crowded && placed >= 2 {
            false
        } else {
            rng.gen_bool(profile.interaction_rate)
        };
        if !wants_object {
            continue;
        }
        let verb = rng.gen_range(0..VERBS.len());
        let category = rng.gen_range(1..=OBJECT_CATEGORIES.len() as u32);
        let parts = layout_parts(pb);
        let trigger = parts.get(VERBS[verb].1);
        let target = PixelBox::from_wh(trigger[rng.gen_range(0..trigger.len())]);
        if let Some(bbox) = place_object_on(&mut rng, &target, size, profile.overlap_threshold) {
            objects.push(ObjectAnn {
                bbox: bbox.to_wh(),
                category,
            });
            placed += 1;
        }
    }
    let distractors = rng.gen_range(profile.distractor_range.0..=profile.distractor_range.1);
    for _ in 0..distractors {
        let s = rng.gen_range(0.05..0.14) * size;
        let x1 = rng.gen_range(0.0..(size - s));
        let y1 = rng.gen_range(0.0..(size - s));
        objects.push(ObjectAnn {
            bbox: [x1, y1, x1 + s, y1 + s],
            category: rng.gen_range(1..=OBJECT_CATEGORIES.len() as u32),
        });
    }

    // Joint confidence from occlusion by later-drawn persons.
    let persons: Vec<PersonAnn> = person_boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let later = &person_boxes[i + 1..];
            let covered = covered_fraction(b, later);
            PersonAnn {
                bbox: b.to_wh(),
                parts: layout_parts(b),
                joint_confidence: 1.0 - covered,
            }
        })
        .collect();

    // Derive labels from geometry: every interactive pair is listed, plus
    // one nearest-person negative per object while the cap allows.
    let mut interactions: Vec<InteractionAnn> = Vec::new();
    for (oi, obj) in objects.iter().enumerate() {
        let ob = PixelBox::from_wh(obj.bbox);
        for (pi, person) in persons.iter().enumerate() {
            let (verbs, part_hit) =
                interaction_rule(&person.parts, &ob, profile.overlap_threshold);
            if verbs.iter().any(|&v| v != 0) {
                interactions.push(InteractionAnn {
                    person: pi,
                    object: oi,
                    verbs,
                    interactive: true,
                    part_labels: Some(part_hit),
                });
            }
        }
    }
    for (oi, obj) in objects.iter().enumerate() {
        if interactions.len() >= profile.max_pairs {
            break;
        }
        let ob = PixelBox::from_wh(obj.bbox);
        let candidate = persons
            .iter()
            .enumerate()
            .filter(|(pi, _)| {
                !interactions
                    .iter()
                    .any(|int| int.person == *pi && int.object == oi)
            })
            .map(|(pi, p)| {
                let pb = PixelBox::from_wh(p.bbox);
                let dx = (pb.x1 + pb.x2 - ob.x1 - ob.x2) / 2.0;
                let dy = (pb.y1 + pb.y2 - ob.y1 - ob.y2) / 2.0;
                (pi, dx * dx + dy * dy)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((pi, _)) = candidate {
            interactions.push(InteractionAnn {
                person: pi,
                object: oi,
                verbs: vec![0; VERBS.len()],
                interactive: false,
                part_labels: Some([false; NUM_PARTS]),
            });
        }
    }
    interactions.sort_by_key(|i| (i.person, i.object));

    SceneAnnotation {
        id,
        width: profile.image_size,
        height: profile.image_size,
        persons,
        objects,
        interactions,
    }
}

/// Samples an object box overlapping `target` by at least `threshold` of
/// the object's own area, fully inside the image. Retries with smaller
/// objects before giving up.
fn place_object_on(
    rng: &mut ChaCha20Rng,
    target: &PixelBox,
    image_size: f64,
    threshold: f64,
) -> Option<PixelBox> {
    for attempt in 0..40 {
        let shrink = 1.0 - 0.02 * attempt as f64;
        let s = (rng.gen_range(0.05..0.14) * image_size * shrink).max(4.0);
        let cx = (target.x1 + target.x2) / 2.0 + rng.gen_range(-0.5..0.5) * target.width();
        let cy = (target.y1 + target.y2) / 2.0 + rng.gen_range(-0.5..0.5) * target.height();
        let candidate = PixelBox::new(cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0)
            .clamp_to(image_size, image_size);
        if candidate.area() <= 0.0 {
            continue;
        }
        if object_overlap(target, &candidate) >= threshold {
            return Some(candidate);
        }
    }
    None
}

/// Generates a dataset of `count` scenes from a root seed; scene `i` uses
/// an independent sub-seed so generation is order-free.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    profile: &DifficultyProfile,
) -> Result<Dataset, GenerateError> {
    let images = (0..count)
        .map(|i| generate_scene(mix_seed(seed, i as u64), i as u64, profile))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        schema: SCHEMA_VERSION,
        images,
    })
}

/// Canonical serialization: compact JSON with fields in declaration order,
/// so a loaded file re-serializes to the identical byte sequence.
pub fn save_annotations(dataset: &Dataset, path: &Path) -> Result<(), SchemaError> {
    let bytes = serde_json::to_vec(dataset)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<Dataset, SchemaError> {
    let bytes = std::fs::read(path)?;
    parse_annotations(&bytes)
}

pub fn parse_annotations(bytes: &[u8]) -> Result<Dataset, SchemaError> {
    let value: serde_json::Value = serde_json::from_slice(bytes)?;
    let found = value
        .get("schema")
        .and_then(|v| v.as_i64())
        .unwrap_or(-1);
    if found != SCHEMA_VERSION as i64 {
        return Err(SchemaError::Version { found });
    }
    let dataset: Dataset = serde_json::from_value(value)?;
    validate(&dataset)?;
    Ok(dataset)
}

fn check_box(b: &[f64; 4], w: f64, h: f64, path: &str) -> Result<(), SchemaError> {
    let fail = |reason: String| SchemaError::Invalid {
        path: path.to_string(),
        reason,
    };
    if b.iter().any(|v| !v.is_finite()) {
        return Err(fail("non-finite coordinate".into()));
    }
    if b.iter().any(|&v| v < 0.0) {
        return Err(fail(format!("negative coordinate in {b:?}")));
    }
    if b[0] > b[2] || b[1] > b[3] {
        return Err(fail(format!("inverted box {b:?}")));
    }
    if b[2] > w || b[3] > h {
        return Err(fail(format!("box {b:?} exceeds image {w}x{h}")));
    }
    Ok(())
}

/// Structural validation with JSON-path error reporting.
pub fn validate(dataset: &Dataset) -> Result<(), SchemaError> {
    for (si, scene) in dataset.images.iter().enumerate() {
        let (w, h) = (scene.width as f64, scene.height as f64);
        for (pi, person) in scene.persons.iter().enumerate() {
            let base = format!("images[{si}].persons[{pi}]");
            check_box(&person.bbox, w, h, &format!("{base}.bbox"))?;
            if !(0.0..=1.0).contains(&person.joint_confidence) {
                return Err(SchemaError::Invalid {
                    path: format!("{base}.joint_confidence"),
                    reason: format!("{} outside [0,1]", person.joint_confidence),
                });
            }
            let owner = PixelBox::from_wh(person.bbox);
            for part in BodyPart::ALL {
                for (bi, bb) in person.parts.get(part).iter().enumerate() {
                    let path = format!("{base}.parts.{}[{bi}]", part.name());
                    check_box(bb, w, h, &path)?;
                    let pb = PixelBox::from_wh(*bb);
                    if pb.x1 < owner.x1 - 1e-9
                        || pb.y1 < owner.y1 - 1e-9
                        || pb.x2 > owner.x2 + 1e-9
                        || pb.y2 > owner.y2 + 1e-9
                    {
                        return Err(SchemaError::Invalid {
                            path,
                            reason: "part box outside owning person box".into(),
                        });
                    }
                }
            }
        }
        for (oi, obj) in scene.objects.iter().enumerate() {
            let path = format!("images[{si}].objects[{oi}]");
            check_box(&obj.bbox, w, h, &format!("{path}.bbox"))?;
            if obj.category == 0 {
                return Err(SchemaError::Invalid {
                    path: format!("{path}.category"),
                    reason: "categories are 1-based".into(),
                });
            }
        }
        for (ii, int) in scene.interactions.iter().enumerate() {
            let path = format!("images[{si}].interactions[{ii}]");
            if int.person >= scene.persons.len() {
                return Err(SchemaError::Invalid {
                    path: format!("{path}.person"),
                    reason: format!("person index {} out of range", int.person),
                });
            }
            if int.object >= scene.objects.len() {
                return Err(SchemaError::Invalid {
                    path: format!("{path}.object"),
                    reason: format!("object index {} out of range", int.object),
                });
            }
            if int.verbs.iter().any(|&v| v > 1) {
                return Err(SchemaError::Invalid {
                    path: format!("{path}.verbs"),
                    reason: "verb entries must be 0 or 1".into(),
                });
            }
            let any_verb = int.verbs.iter().any(|&v| v == 1);
            if any_verb != int.interactive {
                return Err(SchemaError::Invalid {
                    path: format!("{path}.interactive"),
                    reason: "interactive flag must equal OR of verbs".into(),
                });
            }
        }
    }
    Ok(())
}

/// Hard-case tags for one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionBand {
    Low,
    Mid,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTags {
    pub crowded: bool,
    pub tiny: bool,
    pub occlusion: OcclusionBand,
    pub person_count: usize,
    pub interactive_pair_count: usize,
    /// Smallest person-area ratio among interactive pairs, if any.
    pub min_person_area_ratio: Option<f64>,
    pub mean_joint_confidence: f64,
}

/// Derives the hard-case tags: crowded means at least three interactive
/// pairs; tiny means some interactive pair's person occupies under 10% of
/// the image; occlusion bands split on the image-mean joint confidence at
/// 0.2 and 0.6 with the middle band kept separate.
pub fn tag_hard_cases(scene: &SceneAnnotation) -> SceneTags {
    let image_area = scene.width as f64 * scene.height as f64;
    let mut interactive = 0usize;
    let mut min_ratio: Option<f64> = None;
    for int in scene.interactive_pairs() {
        interactive += 1;
        let pb = PixelBox::from_wh(scene.persons[int.person].bbox);
        let r = pb.area() / image_area;
        min_ratio = Some(min_ratio.map_or(r, |m: f64| m.min(r)));
    }
    let mean_j = if scene.persons.is_empty() {
        1.0
    } else {
        scene
            .persons
            .iter()
            .map(|p| p.joint_confidence)
            .sum::<f64>()
            / scene.persons.len() as f64
    };
    let occlusion = if mean_j < 0.2 {
        OcclusionBand::High
    } else if mean_j > 0.6 {
        OcclusionBand::Low
    } else {
        OcclusionBand::Mid
    };
    SceneTags {
        crowded: interactive >= 3,
        tiny: min_ratio.is_some_and(|r| r < 0.1),
        occlusion,
        person_count: scene.persons.len(),
        interactive_pair_count: interactive,
        min_person_area_ratio: min_ratio,
        mean_joint_confidence: mean_j,
    }
}

/// A rendered scene: `(h*w) x 3` RGB rows in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub width: usize,
    pub height: usize,
    pub pixels: Matrix,
}

const BACKGROUND: [f64; 3] = [0.92, 0.92, 0.92];
const BODY_COLORS: [[f64; 3]; 4] = [
    [0.55, 0.55, 0.62],
    [0.62, 0.52, 0.50],
    [0.50, 0.60, 0.55],
    [0.58, 0.58, 0.48],
];
const PART_COLORS: [[f64; 3]; NUM_PARTS] = [
    [0.45, 0.18, 0.10], // feet
    [0.15, 0.25, 0.85], // legs
    [0.55, 0.15, 0.65], // hip
    [0.10, 0.75, 0.20], // hands
    [0.05, 0.60, 0.65], // arms
    [0.95, 0.80, 0.45], // head
];
const OBJECT_COLORS: [[f64; 3]; 3] = [
    [0.90, 0.10, 0.10], // ball
    [0.95, 0.85, 0.05], // cup
    [0.90, 0.10, 0.80], // bench
];

fn fill_box(img: &mut Matrix, width: usize, height: usize, b: &PixelBox, color: [f64; 3]) {
    let x1 = b.x1.floor().max(0.0) as usize;
    let y1 = b.y1.floor().max(0.0) as usize;
    let x2 = (b.x2.ceil() as usize).min(width);
    let y2 = (b.y2.ceil() as usize).min(height);
    for py in y1..y2 {
        for px in x1..x2 {
            let cx = px as f64 + 0.5;
            let cy = py as f64 + 0.5;
            if cx < b.x1 || cx > b.x2 || cy < b.y1 || cy > b.y2 {
                continue;
            }
            let row = py * width + px;
            for ch in 0..3 {
                img[[row, ch]] = color[ch];
            }
        }
    }
}

fn fill_shape(
    img: &mut Matrix,
    width: usize,
    height: usize,
    b: &PixelBox,
    color: [f64; 3],
    category: u32,
) {
    let cx = (b.x1 + b.x2) / 2.0;
    let cy = (b.y1 + b.y2) / 2.0;
    let rx = b.width() / 2.0;
    let ry = b.height() / 2.0;
    let x1 = b.x1.floor().max(0.0) as usize;
    let y1 = b.y1.floor().max(0.0) as usize;
    let x2 = (b.x2.ceil() as usize).min(width);
    let y2 = (b.y2.ceil() as usize).min(height);
    for py in y1..y2 {
        for px in x1..x2 {
            let fx = px as f64 + 0.5;
            let fy = py as f64 + 0.5;
            if fx < b.x1 || fx > b.x2 || fy < b.y1 || fy > b.y2 {
                continue;
            }
            let inside = match category {
                // Square, disc, diamond per category.
                1 => true,
                2 => {
                    let nx = (fx - cx) / rx.max(1e-9);
                    let ny = (fy - cy) / ry.max(1e-9);
                    nx * nx + ny * ny <= 1.0
                }
                _ => {
                    let nx = ((fx - cx) / rx.max(1e-9)).abs();
                    let ny = ((fy - cy) / ry.max(1e-9)).abs();
                    nx + ny <= 1.0
                }
            };
            if inside {
                let row = py * width + px;
                for ch in 0..3 {
                    img[[row, ch]] = color[ch];
                }
            }
        }
    }
}

/// Renders a scene from its annotation alone (no hidden state), so
/// identical annotations always produce identical pixels.
pub fn render_scene(scene: &SceneAnnotation) -> RenderedScene {
    let width = scene.width as usize;
    let height = scene.height as usize;
    let mut img = Matrix::zeros((width * height, 3));
    for row in 0..width * height {
        for ch in 0..3 {
            img[[row, ch]] = BACKGROUND[ch];
        }
    }
    for (pi, person) in scene.persons.iter().enumerate() {
        let body = PixelBox::from_wh(person.bbox);
        fill_box(
            &mut img,
            width,
            height,
            &body,
            BODY_COLORS[pi % BODY_COLORS.len()],
        );
        for part in BodyPart::ALL {
            for bb in person.parts.get(part) {
                fill_box(
                    &mut img,
                    width,
                    height,
                    &PixelBox::from_wh(*bb),
                    PART_COLORS[part.index()],
                );
            }
        }
    }
    for obj in &scene.objects {
        let color = OBJECT_COLORS[((obj.category as usize) - 1) % OBJECT_COLORS.len()];
        fill_shape(
            &mut img,
            width,
            height,
            &PixelBox::from_wh(obj.bbox),
            color,
            obj.category,
        );
    }
    RenderedScene {
        width,
        height,
        pixels: img,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> DifficultyProfile {
        DifficultyProfile::default()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(123, 0, &profile()).unwrap();
        let b = generate_scene(123, 0, &profile()).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        assert_eq!(render_scene(&a), render_scene(&b));
    }

    #[test]
    fn single_person_overlapping_object_is_one_pair() {
        let p = DifficultyProfile {
            person_range: (1, 1),
            crowded_rate: 0.0,
            interaction_rate: 1.0,
            tiny_rate: 0.0,
            occlusion_rate: 0.0,
            distractor_range: (0, 0),
            ..profile()
        };
        for seed in 0..20 {
            let scene = generate_scene(seed, 0, &p).unwrap();
            let interactive = scene.interactions.iter().filter(|i| i.interactive).count();
            assert_eq!(interactive, 1, "seed {seed}");
        }
    }

    #[test]
    fn crowded_fraction_tracks_profile_rate() {
        let p = DifficultyProfile {
            crowded_rate: 0.4,
            person_range: (1, 4),
            ..profile()
        };
        let ds = generate_dataset(777, 1000, &p).unwrap();
        let crowded = ds
            .images
            .iter()
            .filter(|s| tag_hard_cases(s).crowded)
            .count();
        let rate = crowded as f64 / ds.images.len() as f64;
        assert!((rate - 0.4).abs() < 0.05, "crowded rate {rate}");
    }

    #[test]
    fn forced_crowded_scenes_have_three_pairs() {
        let p = DifficultyProfile {
            crowded_rate: 1.0,
            person_range: (3, 4),
            ..profile()
        };
        let mut ok = 0;
        let n = 50;
        for seed in 0..n {
            let scene = generate_scene(seed, 0, &p).unwrap();
            if tag_hard_cases(&scene).crowded {
                ok += 1;
            }
        }
        // Placement can occasionally fail; the vast majority must succeed.
        assert!(ok as f64 / n as f64 > 0.9, "only {ok}/{n} crowded");
    }

    #[test]
    fn labels_match_rederived_geometry() {
        // Independent re-derivation of every pair's flags from the boxes.
        for seed in 0..30 {
            let scene = generate_scene(seed, 0, &profile()).unwrap();
            let tau = profile().overlap_threshold;
            for (pi, person) in scene.persons.iter().enumerate() {
                for (oi, obj) in scene.objects.iter().enumerate() {
                    let ob = PixelBox::from_wh(obj.bbox);
                    let mut derived = false;
                    for &(_, part) in VERBS.iter() {
                        for bb in person.parts.get(part) {
                            let b = PixelBox::from_wh(*bb);
                            let inter = b.intersection_area(&ob);
                            if ob.area() > 0.0 && inter / ob.area() >= tau {
                                derived = true;
                            }
                        }
                    }
                    let listed = scene
                        .interactions
                        .iter()
                        .find(|i| i.person == pi && i.object == oi);
                    match listed {
                        Some(int) => assert_eq!(
                            int.interactive, derived,
                            "seed {seed} pair ({pi},{oi})"
                        ),
                        None => assert!(!derived, "seed {seed} unlisted interactive ({pi},{oi})"),
                    }
                }
            }
        }
    }

    #[test]
    fn part_boxes_stay_inside_person() {
        for seed in 0..20 {
            let scene = generate_scene(seed, 0, &profile()).unwrap();
            let ds = Dataset {
                schema: SCHEMA_VERSION,
                images: vec![scene],
            };
            validate(&ds).unwrap();
        }
    }

    #[test]
    fn roundtrip_is_canonical() {
        let ds = generate_dataset(42, 20, &profile()).unwrap();
        let dir = std::env::temp_dir().join("hoipart-scene-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.json");
        save_annotations(&ds, &path).unwrap();
        let loaded = load_annotations(&path).unwrap();
        assert_eq!(loaded, ds);
        let path2 = dir.join("ds2.json");
        save_annotations(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn negative_coordinate_reports_path() {
        let mut ds = generate_dataset(1, 1, &profile()).unwrap();
        ds.images[0].objects[0].bbox[0] = -3.0;
        let bytes = serde_json::to_vec(&ds).unwrap();
        let err = parse_annotations(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("images[0].objects[0].bbox") && msg.contains("negative"),
            "{msg}"
        );
    }

    #[test]
    fn unknown_field_is_rejected() {
        let ds = generate_dataset(2, 1, &profile()).unwrap();
        let mut value = serde_json::to_value(&ds).unwrap();
        value["images"][0]["mystery"] = serde_json::json!(1);
        let bytes = serde_json::to_vec(&value).unwrap();
        let err = parse_annotations(&bytes).unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let ds = generate_dataset(3, 1, &profile()).unwrap();
        let mut value = serde_json::to_value(&ds).unwrap();
        value["schema"] = serde_json::json!(9);
        let err = parse_annotations(&serde_json::to_vec(&value).unwrap()).unwrap_err();
        assert!(matches!(err, SchemaError::Version { found: 9 }));
    }

    #[test]
    fn tag_thresholds_match_definitions() {
        let mut scene = generate_scene(5, 0, &profile()).unwrap();
        // Hand-build: exactly 3 interactive pairs => crowded.
        let tags = tag_hard_cases(&scene);
        assert_eq!(tags.crowded, tags.interactive_pair_count >= 3);

        // Tiny: person at 5% of image area in an interactive pair.
        let side = (0.05f64 * (scene.width * scene.height) as f64).sqrt();
        scene.persons[0].bbox = [0.0, 0.0, side, side];
        scene.persons[0].parts = layout_parts(&PixelBox::new(0.0, 0.0, side, side));
        if let Some(int) = scene.interactions.iter().position(|i| i.interactive) {
            scene.interactions[int].person = 0;
            assert!(tag_hard_cases(&scene).tiny);
        }

        // Occlusion bands.
        for p in &mut scene.persons {
            p.joint_confidence = 0.7;
        }
        assert_eq!(tag_hard_cases(&scene).occlusion, OcclusionBand::Low);
        for p in &mut scene.persons {
            p.joint_confidence = 0.1;
        }
        assert_eq!(tag_hard_cases(&scene).occlusion, OcclusionBand::High);
        for p in &mut scene.persons {
            p.joint_confidence = 0.4;
        }
        assert_eq!(tag_hard_cases(&scene).occlusion, OcclusionBand::Mid);
    }

    #[test]
    fn render_draws_objects_over_persons() {
        let p = DifficultyProfile {
            person_range: (1, 1),
            crowded_rate: 0.0,
            interaction_rate: 1.0,
            distractor_range: (0, 0),
            tiny_rate: 0.0,
            occlusion_rate: 0.0,
            ..profile()
        };
        let scene = generate_scene(9, 0, &p).unwrap();
        let img = render_scene(&scene);
        assert_eq!(img.pixels.nrows(), 128 * 128);
        // The object center pixel carries the object color.
        let obj = &scene.objects[0];
        let cx = ((obj.bbox[0] + obj.bbox[2]) / 2.0) as usize;
        let cy = ((obj.bbox[1] + obj.bbox[3]) / 2.0) as usize;
        let row = cy * img.width + cx;
        let expect = OBJECT_COLORS[(obj.category as usize - 1) % 3];
        for ch in 0..3 {
            assert!((img.pixels[[row, ch]] - expect[ch]).abs() < 1e-12);
        }
    }
}
