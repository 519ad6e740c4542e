//! Binary token-grid masks and the body-part saliency map machinery.
//!
//! A [`TokenMask`] marks which tokens of the feature grid participate in a
//! cross-attention call (1 = kept, 0 = masked). Part masks are the union of
//! every person's boxes for one body part, so they highlight that part
//! across the whole image. The progressive schedule then narrows the kept
//! set layer by layer: other persons' whole bodies first, the same part of
//! all persons next, and finally the target person's own part, with the
//! proposal's object always kept.

use crate::geometry::{GridSpec, PixelBox};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of body parts a person is divided into.
pub const NUM_PARTS: usize = 6;

/// The six body parts, in the fixed serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Feet,
    Legs,
    Hip,
    Hands,
    Arms,
    Head,
}

impl BodyPart {
    pub const ALL: [BodyPart; NUM_PARTS] = [
        BodyPart::Feet,
        BodyPart::Legs,
        BodyPart::Hip,
        BodyPart::Hands,
        BodyPart::Arms,
        BodyPart::Head,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Self {
        Self::ALL[k]
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Feet => "feet",
            BodyPart::Legs => "legs",
            BodyPart::Hip => "hip",
            BodyPart::Hands => "hands",
            BodyPart::Arms => "arms",
            BodyPart::Head => "head",
        }
    }
}

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("merge called with an empty part selection")]
    EmptySelection,
    #[error("invalid serialized mask: {0}")]
    BadEncoding(String),
}

/// A binary `H x W` token mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl TokenMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![1; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                if f(r, c) {
                    m.data[r * w + c] = 1;
                }
            }
        }
        m
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.w + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.w + col] = v as u8;
    }

    /// Row-major 0/1 bytes, length `h * w`.
    pub fn bits(&self) -> &[u8] {
        &self.data
    }

    pub fn count_active(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    fn check_shape(&self, other: &Self) -> Result<(), MaskError> {
        if self.h != other.h || self.w != other.w {
            return Err(MaskError::ShapeMismatch(self.h, self.w, other.h, other.w));
        }
        Ok(())
    }

    /// Pointwise maximum (set union).
    pub fn max(&self, other: &Self) -> Self {
        self.check_shape(other).expect("mask shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.max(b))
            .collect();
        Self {
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Pointwise minimum (set intersection).
    pub fn min(&self, other: &Self) -> Self {
        self.check_shape(other).expect("mask shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.min(b))
            .collect();
        Self {
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Pointwise `max(self - other, 0)` (set difference).
    pub fn saturating_sub(&self, other: &Self) -> Self {
        self.check_shape(other).expect("mask shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.saturating_sub(b))
            .collect();
        Self {
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// True when every active cell of `self` is also active in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.h == other.h
            && self.w == other.w
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a == 0 || b == 1)
    }

    /// Compact serialized form: shape header plus row-major bits packed
    /// MSB-first into base64 bytes.
    pub fn to_compact(&self) -> CompactMask {
        let mut packed = vec![0u8; self.data.len().div_ceil(8)];
        for (i, &b) in self.data.iter().enumerate() {
            if b != 0 {
                packed[i / 8] |= 0x80 >> (i % 8);
            }
        }
        CompactMask {
            h: self.h,
            w: self.w,
            bits: B64.encode(packed),
        }
    }

    pub fn from_compact(c: &CompactMask) -> Result<Self, MaskError> {
        let packed = B64
            .decode(&c.bits)
            .map_err(|e| MaskError::BadEncoding(e.to_string()))?;
        let n = c.h * c.w;
        if packed.len() != n.div_ceil(8) {
            return Err(MaskError::BadEncoding(format!(
                "expected {} packed bytes for {}x{}, got {}",
                n.div_ceil(8),
                c.h,
                c.w,
                packed.len()
            )));
        }
        let mut data = vec![0u8; n];
        for (i, slot) in data.iter_mut().enumerate() {
            *slot = ((packed[i / 8] >> (7 - i % 8)) & 1) as u8;
        }
        Ok(Self {
            h: c.h,
            w: c.w,
            data,
        })
    }
}

/// JSON-serializable mask: shape header and base64 row-major bit array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactMask {
    pub h: usize,
    pub w: usize,
    pub bits: String,
}

/// Rasterizes a pixel box onto the token grid.
///
/// Cell `(row, col)` is kept iff the sample point
/// `(col * W0/W, row * H0/H)` lies inside the box, inclusive on both ends.
/// The box is clamped to the image first; a box whose clamped extent has
/// zero area (inverted, degenerate, or entirely outside the image) yields
/// an all-zero mask.
pub fn rasterize_box(b: &PixelBox, spec: &GridSpec) -> TokenMask {
    let b = b.clamp_to(spec.image_w, spec.image_h);
    if b.x2 <= b.x1 || b.y2 <= b.y1 {
        return TokenMask::zeros(spec.grid_h, spec.grid_w);
    }
    let sy = spec.scale_y();
    let sx = spec.scale_x();
    TokenMask::from_fn(spec.grid_h, spec.grid_w, |row, col| {
        let py = row as f64 * sy;
        let px = col as f64 * sx;
        b.y1 <= py && py <= b.y2 && b.x1 <= px && px <= b.x2
    })
}

/// Union of one part's masks over every person in the scene.
///
/// `part_boxes[l]` holds person `l`'s boxes for the part (a part may be
/// split into several boxes, e.g. left and right arm).
pub fn part_saliency_mask(part_boxes: &[Vec<PixelBox>], spec: &GridSpec) -> TokenMask {
    let mut acc = TokenMask::zeros(spec.grid_h, spec.grid_w);
    for person in part_boxes {
        for b in person {
            acc = acc.max(&rasterize_box(b, spec));
        }
    }
    acc
}

/// All six part saliency masks for a scene, indexed by [`BodyPart`] order.
///
/// `persons[l][k]` holds person `l`'s boxes for part `k`. A scene with no
/// persons yields six all-zero masks.
pub fn build_part_masks(persons: &[[Vec<PixelBox>; NUM_PARTS]], spec: &GridSpec) -> [TokenMask; NUM_PARTS] {
    std::array::from_fn(|k| {
        let boxes: Vec<Vec<PixelBox>> = persons.iter().map(|p| p[k].clone()).collect();
        part_saliency_mask(&boxes, spec)
    })
}

/// Masks of a proposal's detected human and object boxes.
pub fn build_instance_masks(
    human: &PixelBox,
    object: &PixelBox,
    spec: &GridSpec,
) -> (TokenMask, TokenMask) {
    (rasterize_box(human, spec), rasterize_box(object, spec))
}

/// Per-layer, per-part masks for one proposal.
///
/// `layers[j][k]` is the mask for decoder layer `j` (0-based; deeper layers
/// keep fewer tokens) and part `k`.
#[derive(Debug, Clone)]
pub struct ProgressiveMasks {
    pub layers: [[TokenMask; NUM_PARTS]; 3],
    /// Union of all other persons' bodies: `max(max_k(part_k) - human, 0)`.
    pub other_humans: TokenMask,
}

/// Builds the three-layer progressive schedule for one proposal.
///
/// Layer 1 keeps the other persons' whole bodies, the part across all
/// persons, and the object. Layer 2 keeps the part across all persons and
/// the object. Layer 3 keeps only the target person's own part and the
/// object. Active sets therefore shrink monotonically with depth.
pub fn build_progressive_masks(
    part_masks: &[TokenMask; NUM_PARTS],
    human: &TokenMask,
    object: &TokenMask,
) -> ProgressiveMasks {
    let mut all_parts = part_masks[0].clone();
    for m in &part_masks[1..] {
        all_parts = all_parts.max(m);
    }
    let other_humans = all_parts.saturating_sub(human);
    let layers = std::array::from_fn(|j| {
        std::array::from_fn(|k| {
            let part = &part_masks[k];
            match j {
                0 => other_humans.max(part).max(object),
                1 => part.max(object),
                _ => part.min(human).max(object),
            }
        })
    });
    ProgressiveMasks {
        layers,
        other_humans,
    }
}

/// Merges the selected parts' masks per layer via pointwise maximum, which
/// equals the union of the selected active sets.
///
/// Errors when no part is selected; the selection policy guarantees at
/// least one part per proposal.
pub fn merge_masks(
    progressive: &ProgressiveMasks,
    selection: &[bool; NUM_PARTS],
) -> Result<[TokenMask; 3], MaskError> {
    if !selection.iter().any(|&s| s) {
        return Err(MaskError::EmptySelection);
    }
    Ok(std::array::from_fn(|j| {
        let mut acc: Option<TokenMask> = None;
        for k in 0..NUM_PARTS {
            if selection[k] {
                let m = &progressive.layers[j][k];
                acc = Some(match acc {
                    Some(a) => a.max(m),
                    None => m.clone(),
                });
            }
        }
        acc.expect("selection checked non-empty")
    }))
}

/// Maximal fraction of the token's pixel footprint covered by any box.
fn max_cell_overlap(spec: &GridSpec, row: usize, col: usize, boxes: &[PixelBox]) -> f64 {
    let cell = spec.cell_rect(row, col);
    let area = cell.area();
    if area <= 0.0 {
        return 0.0;
    }
    boxes
        .iter()
        .map(|b| b.clamp_to(spec.image_w, spec.image_h).intersection_area(&cell) / area)
        .fold(0.0, f64::max)
}

/// Randomly drops border tokens of a rasterized mask.
///
/// Tokens fully inside some box are always kept; a border token survives
/// with probability equal to its maximal fractional overlap with any box.
/// The draw for each cell is derived from `(seed, row, col)` so the result
/// is deterministic and independent of traversal order. Off by default in
/// the pipeline; the reported effect of dropping is negligible.
pub fn border_random_drop(
    mask: &TokenMask,
    boxes: &[PixelBox],
    spec: &GridSpec,
    seed: u64,
) -> TokenMask {
    TokenMask::from_fn(mask.h(), mask.w(), |row, col| {
        if !mask.get(row, col) {
            return false;
        }
        let overlap = max_cell_overlap(spec, row, col, boxes);
        if overlap >= 1.0 {
            return true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (row as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (col as u64).wrapping_mul(0xc2b2ae3d27d4eb4f),
        );
        rng.gen::<f64>() < overlap
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from_rows(rows: &[&[u8]]) -> TokenMask {
        let h = rows.len();
        let w = rows[0].len();
        TokenMask::from_fn(h, w, |r, c| rows[r][c] != 0)
    }

    #[test]
    fn rasterize_full_image_box_is_all_ones() {
        let spec = GridSpec::with_factor(64, 64, 32);
        let m = rasterize_box(&PixelBox::new(0.0, 0.0, 64.0, 64.0), &spec);
        assert_eq!(m, TokenMask::ones(2, 2));
    }

    #[test]
    fn rasterize_quadrant_box() {
        // Sample points are (0,0), (0,32), (32,0), (32,32); only (0,0) is
        // inside [0,0,31,31].
        let spec = GridSpec::with_factor(64, 64, 32);
        let m = rasterize_box(&PixelBox::new(0.0, 0.0, 31.0, 31.0), &spec);
        assert_eq!(m, mask_from_rows(&[&[1, 0], &[0, 0]]));
    }

    #[test]
    fn rasterize_inverted_box_is_empty() {
        let spec = GridSpec::with_factor(64, 64, 32);
        let m = rasterize_box(&PixelBox::new(40.0, 40.0, 20.0, 20.0), &spec);
        assert!(m.is_empty());
    }

    #[test]
    fn rasterize_box_outside_image_clamps_to_empty() {
        let spec = GridSpec::with_factor(64, 64, 32);
        let m = rasterize_box(&PixelBox::new(-30.0, -30.0, -1.0, -1.0), &spec);
        assert!(m.is_empty());
    }

    /// Brute-force evaluation of the rasterization predicate, written out
    /// from scratch (own clamping arithmetic) so it stays independent of
    /// the implementation it checks.
    fn rasterize_oracle(b: &PixelBox, spec: &GridSpec) -> TokenMask {
        let clamp = |v: f64, hi: f64| v.max(0.0).min(hi);
        let x1 = clamp(b.x1, spec.image_w);
        let x2 = clamp(b.x2, spec.image_w);
        let y1 = clamp(b.y1, spec.image_h);
        let y2 = clamp(b.y2, spec.image_h);
        let mut m = TokenMask::zeros(spec.grid_h, spec.grid_w);
        if x2 <= x1 || y2 <= y1 {
            return m;
        }
        for row in 0..spec.grid_h {
            for col in 0..spec.grid_w {
                let py = row as f64 * (spec.image_h / spec.grid_h as f64);
                let px = col as f64 * (spec.image_w / spec.grid_w as f64);
                let inside = y1 <= py && py <= y2 && x1 <= px && px <= x2;
                m.set(row, col, inside);
            }
        }
        m
    }

    #[test]
    fn rasterize_matches_bruteforce_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let gh = rng.gen_range(1..=12);
            let gw = rng.gen_range(1..=12);
            let h0 = rng.gen_range(8.0..512.0);
            let w0 = rng.gen_range(8.0..512.0);
            let spec = GridSpec::new(h0, w0, gh, gw);
            let x1 = rng.gen_range(-64.0..w0);
            let y1 = rng.gen_range(-64.0..h0);
            let b = PixelBox::new(
                x1,
                y1,
                x1 + rng.gen_range(-16.0..w0),
                y1 + rng.gen_range(-16.0..h0),
            );
            assert_eq!(rasterize_box(&b, &spec), rasterize_oracle(&b, &spec));
        }
    }

    #[test]
    fn part_masks_union_over_persons() {
        let spec = GridSpec::with_factor(64, 64, 32);
        // Two persons whose hands rasterize to (0,0) and (1,0).
        let mut p1: [Vec<PixelBox>; NUM_PARTS] = Default::default();
        let mut p2: [Vec<PixelBox>; NUM_PARTS] = Default::default();
        p1[BodyPart::Hands.index()] = vec![PixelBox::new(0.0, 0.0, 10.0, 10.0)];
        p2[BodyPart::Hands.index()] = vec![PixelBox::new(0.0, 32.0, 10.0, 42.0)];
        let masks = build_part_masks(&[p1, p2], &spec);
        assert_eq!(
            masks[BodyPart::Hands.index()],
            mask_from_rows(&[&[1, 0], &[1, 0]])
        );
        assert!(masks[BodyPart::Head.index()].is_empty());
    }

    #[test]
    fn part_masks_zero_persons() {
        let spec = GridSpec::with_factor(64, 64, 32);
        let masks = build_part_masks(&[], &spec);
        assert!(masks.iter().all(|m| m.is_empty()));
    }

    #[test]
    fn part_mask_whole_image_leg_box() {
        let spec = GridSpec::with_factor(64, 64, 32);
        let mut p: [Vec<PixelBox>; NUM_PARTS] = Default::default();
        p[BodyPart::Legs.index()] = vec![PixelBox::new(0.0, 0.0, 64.0, 64.0)];
        let masks = build_part_masks(&[p], &spec);
        assert_eq!(masks[BodyPart::Legs.index()], TokenMask::ones(2, 2));
    }

    #[test]
    fn instance_masks_from_proposal_boxes() {
        let spec = GridSpec::with_factor(64, 64, 32);
        let (h, o) = build_instance_masks(
            &PixelBox::new(0.0, 0.0, 10.0, 10.0),
            &PixelBox::new(32.0, 32.0, 60.0, 60.0),
            &spec,
        );
        assert_eq!(h, mask_from_rows(&[&[1, 0], &[0, 0]]));
        assert_eq!(o, mask_from_rows(&[&[0, 0], &[0, 1]]));
    }

    #[test]
    fn instance_masks_identical_boxes_match() {
        let spec = GridSpec::with_factor(64, 64, 32);
        let b = PixelBox::new(5.0, 5.0, 40.0, 40.0);
        let (h, o) = build_instance_masks(&b, &b, &spec);
        assert_eq!(h, o);
    }

    #[test]
    fn progressive_masks_hand_example() {
        // 2x2 grid; worked end to end by hand.
        let hum = mask_from_rows(&[&[1, 0], &[0, 0]]);
        let obj = mask_from_rows(&[&[0, 0], &[0, 1]]);
        let mut parts: [TokenMask; NUM_PARTS] =
            std::array::from_fn(|_| TokenMask::zeros(2, 2));
        parts[0] = mask_from_rows(&[&[1, 0], &[1, 0]]);
        parts[1] = mask_from_rows(&[&[1, 1], &[0, 0]]);
        // max_k(parts) = [[1,1],[1,0]], so other humans = [[0,1],[1,0]].
        let prog = build_progressive_masks(&parts, &hum, &obj);
        assert_eq!(prog.other_humans, mask_from_rows(&[&[0, 1], &[1, 0]]));
        assert_eq!(prog.layers[0][0], mask_from_rows(&[&[1, 1], &[1, 1]]));
        assert_eq!(prog.layers[1][0], mask_from_rows(&[&[1, 0], &[1, 1]]));
        assert_eq!(prog.layers[2][0], mask_from_rows(&[&[1, 0], &[0, 1]]));
    }

    #[test]
    fn progressive_single_person_no_others() {
        // One person whose parts lie inside the human box: no other humans,
        // layers 1 and 2 equal the part mask, layer 3 intersects with the
        // human box.
        let hum = mask_from_rows(&[&[1, 1], &[1, 0]]);
        let obj = TokenMask::zeros(2, 2);
        let mut parts: [TokenMask; NUM_PARTS] =
            std::array::from_fn(|_| TokenMask::zeros(2, 2));
        parts[3] = mask_from_rows(&[&[1, 0], &[1, 0]]);
        let prog = build_progressive_masks(&parts, &hum, &obj);
        assert!(prog.other_humans.is_empty());
        assert_eq!(prog.layers[0][3], parts[3]);
        assert_eq!(prog.layers[1][3], parts[3]);
        assert_eq!(prog.layers[2][3], parts[3].min(&hum));
    }

    #[test]
    fn progressive_all_ones_inputs() {
        let ones = TokenMask::ones(2, 2);
        let parts: [TokenMask; NUM_PARTS] = std::array::from_fn(|_| ones.clone());
        let prog = build_progressive_masks(&parts, &ones, &ones);
        for j in 0..3 {
            for k in 0..NUM_PARTS {
                assert_eq!(prog.layers[j][k], ones);
            }
        }
    }

    #[test]
    fn progressive_monotonicity_random() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let h = rng.gen_range(1..6);
            let w = rng.gen_range(1..6);
            let rand_mask = |rng: &mut ChaCha8Rng| {
                TokenMask::from_fn(h, w, |_, _| rng.gen_bool(0.4))
            };
            let parts: [TokenMask; NUM_PARTS] = std::array::from_fn(|_| rand_mask(&mut rng));
            let hum = rand_mask(&mut rng);
            let obj = rand_mask(&mut rng);
            let prog = build_progressive_masks(&parts, &hum, &obj);
            for k in 0..NUM_PARTS {
                assert!(prog.layers[2][k].is_subset_of(&prog.layers[1][k]));
                assert!(prog.layers[1][k].is_subset_of(&prog.layers[0][k]));
                // Layer 2 decomposition recomputed independently.
                assert_eq!(prog.layers[1][k], parts[k].max(&obj));
            }
        }
    }

    #[test]
    fn merge_singleton_selection_equals_part() {
        let hum = mask_from_rows(&[&[1, 0], &[0, 0]]);
        let obj = mask_from_rows(&[&[0, 0], &[0, 1]]);
        let mut parts: [TokenMask; NUM_PARTS] =
            std::array::from_fn(|_| TokenMask::zeros(2, 2));
        parts[2] = mask_from_rows(&[&[0, 1], &[0, 0]]);
        let prog = build_progressive_masks(&parts, &hum, &obj);
        let mut sel = [false; NUM_PARTS];
        sel[2] = true;
        let merged = merge_masks(&prog, &sel).unwrap();
        for j in 0..3 {
            assert_eq!(merged[j], prog.layers[j][2]);
        }
    }

    #[test]
    fn merge_is_union_of_selected_parts() {
        let zeros = TokenMask::zeros(2, 2);
        let mut parts: [TokenMask; NUM_PARTS] = std::array::from_fn(|_| zeros.clone());
        parts[0] = mask_from_rows(&[&[1, 0], &[0, 0]]);
        parts[1] = mask_from_rows(&[&[0, 0], &[0, 1]]);
        let prog = build_progressive_masks(&parts, &zeros, &zeros);
        let mut sel = [false; NUM_PARTS];
        sel[0] = true;
        sel[1] = true;
        let merged = merge_masks(&prog, &sel).unwrap();
        // Layer 2 masks of the two parts are disjoint; union covers both.
        assert_eq!(merged[1], mask_from_rows(&[&[1, 0], &[0, 1]]));
        // Merging the same selection again is idempotent.
        let again = merge_masks(&prog, &sel).unwrap();
        assert_eq!(merged, again);
    }

    #[test]
    fn merge_empty_selection_errors() {
        let zeros = TokenMask::zeros(2, 2);
        let parts: [TokenMask; NUM_PARTS] = std::array::from_fn(|_| zeros.clone());
        let prog = build_progressive_masks(&parts, &zeros, &zeros);
        assert!(matches!(
            merge_masks(&prog, &[false; NUM_PARTS]),
            Err(MaskError::EmptySelection)
        ));
    }

    #[test]
    fn merge_all_selected_all_ones() {
        let ones = TokenMask::ones(3, 3);
        let parts: [TokenMask; NUM_PARTS] = std::array::from_fn(|_| ones.clone());
        let prog = build_progressive_masks(&parts, &ones, &ones);
        let merged = merge_masks(&prog, &[true; NUM_PARTS]).unwrap();
        for m in &merged {
            assert_eq!(*m, ones);
        }
    }

    #[test]
    fn border_drop_keeps_interior_drops_outside() {
        let spec = GridSpec::with_factor(128, 128, 32);
        // Box covering the two left columns fully plus a sliver of column 2.
        let b = PixelBox::new(0.0, 0.0, 65.0, 128.0);
        let mask = rasterize_box(&b, &spec);
        for seed in 0..32 {
            let dropped = border_random_drop(&mask, &[b], &spec, seed);
            for row in 0..4 {
                // Interior columns always kept.
                assert!(dropped.get(row, 0));
                assert!(dropped.get(row, 1));
                // Column 3 was never active.
                assert!(!dropped.get(row, 3));
            }
        }
    }

    #[test]
    fn border_drop_keep_rate_tracks_overlap() {
        // A box covering exactly half of cell (0,0): keep rate ~0.5.
        let spec = GridSpec::with_factor(32, 32, 32);
        let b = PixelBox::new(0.0, 0.0, 16.0, 32.0);
        let mask = rasterize_box(&b, &spec);
        assert!(mask.get(0, 0));
        let mut kept = 0usize;
        let trials = 10_000;
        for seed in 0..trials {
            if border_random_drop(&mask, &[b], &spec, seed as u64).get(0, 0) {
                kept += 1;
            }
        }
        let rate = kept as f64 / trials as f64;
        assert!((rate - 0.5).abs() < 0.02, "keep rate {rate}");
    }

    #[test]
    fn border_drop_zero_overlap_always_dropped() {
        // A token with zero area overlap against every box never survives,
        // whatever the incoming mask says.
        let spec = GridSpec::with_factor(32, 32, 32);
        let mask = TokenMask::ones(1, 1);
        let b = PixelBox::new(40.0, 40.0, 60.0, 60.0);
        for seed in 0..64 {
            let dropped = border_random_drop(&mask, &[b], &spec, seed);
            assert!(!dropped.get(0, 0));
        }
    }

    #[test]
    fn compact_roundtrip_preserves_mask() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h = rng.gen_range(1..9);
            let w = rng.gen_range(1..9);
            let m = TokenMask::from_fn(h, w, |_, _| rng.gen_bool(0.5));
            let c = m.to_compact();
            assert_eq!(TokenMask::from_compact(&c).unwrap(), m);
        }
    }

    #[test]
    fn compact_form_is_stable() {
        // Golden encoding for a fixed 3x3 pattern.
        let m = mask_from_rows(&[&[1, 0, 1], &[0, 1, 0], &[1, 1, 0]]);
        let c = m.to_compact();
        assert_eq!(c.h, 3);
        assert_eq!(c.w, 3);
        assert_eq!(c.bits, "qwA=");
        assert_eq!(TokenMask::from_compact(&c).unwrap(), m);
    }
}
