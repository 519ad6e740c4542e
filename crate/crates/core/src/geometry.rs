//! Pixel-space boxes and the token-grid geometry they rasterize onto.

use serde::{Deserialize, Serialize};

/// An axis-aligned box in pixel coordinates of the original image frame.
///
/// Coordinate order follows the annotation convention `[w1, h1, w2, h2]`:
/// `x` runs along the width axis and `y` along the height axis, with
/// `x1 <= x2` and `y1 <= y2` for a non-degenerate box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box from the serialized `[w1, h1, w2, h2]` quadruple.
    pub fn from_wh(coords: [f64; 4]) -> Self {
        Self::new(coords[0], coords[1], coords[2], coords[3])
    }

    pub fn to_wh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// True when the clamped extent is empty along either axis.
    pub fn is_empty(&self) -> bool {
        self.x2 < self.x1 || self.y2 < self.y1
    }

    /// Clamps the box to `[0, w0] x [0, h0]`. The result may be empty.
    pub fn clamp_to(&self, w0: f64, h0: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, w0),
            y1: self.y1.clamp(0.0, h0),
            x2: self.x2.clamp(0.0, w0),
            y2: self.y2.clamp(0.0, h0),
        }
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        ix * iy
    }

    /// Converts a `[0,1]`-normalized `(cx, cy, w, h)` prediction into pixel
    /// corners, clamped to the image bounds.
    pub fn from_normalized_cxcywh(v: [f64; 4], w0: f64, h0: f64) -> Self {
        let (cx, cy, w, h) = (v[0] * w0, v[1] * h0, v[2] * w0, v[3] * h0);
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h).clamp_to(w0, h0)
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
///
/// Degenerate boxes with zero union area yield 0.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (|C| - |U|) / |C|` where `C` is the smallest
/// enclosing box. Lies in `[-1, 1]` and equals 1 iff the boxes coincide.
pub fn giou(a: &PixelBox, b: &PixelBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let cw = (a.x2.max(b.x2) - a.x1.min(b.x1)).max(0.0);
    let ch = (a.y2.max(b.y2) - a.y1.min(b.y1)).max(0.0);
    let enclosing = cw * ch;
    if enclosing <= 0.0 {
        return 0.0;
    }
    let iou_term = if union > 0.0 { inter / union } else { 0.0 };
    iou_term - (enclosing - union) / enclosing
}

/// Spatial relation between the image frame and the token grid.
///
/// A grid cell `(row, col)` samples the image point
/// `(col * W0/W, row * H0/H)`; rasterization keeps a cell when that sample
/// point lies inside the box, inclusively on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Image height in pixels.
    pub image_h: f64,
    /// Image width in pixels.
    pub image_w: f64,
    /// Token rows.
    pub grid_h: usize,
    /// Token columns.
    pub grid_w: usize,
}

impl GridSpec {
    /// Default downsampling factor between image and token grid.
    pub const DEFAULT_FACTOR: usize = 32;

    pub fn new(image_h: f64, image_w: f64, grid_h: usize, grid_w: usize) -> Self {
        assert!(grid_h > 0 && grid_w > 0, "grid must be non-empty");
        assert!(image_h > 0.0 && image_w > 0.0, "image must be non-empty");
        Self {
            image_h,
            image_w,
            grid_h,
            grid_w,
        }
    }

    /// Grid derived from an image size and an integer stride factor.
    pub fn with_factor(image_h: usize, image_w: usize, factor: usize) -> Self {
        assert!(factor > 0 && image_h % factor == 0 && image_w % factor == 0);
        Self::new(
            image_h as f64,
            image_w as f64,
            image_h / factor,
            image_w / factor,
        )
    }

    /// Vertical scale `H0 / H`.
    pub fn scale_y(&self) -> f64 {
        self.image_h / self.grid_h as f64
    }

    /// Horizontal scale `W0 / W`.
    pub fn scale_x(&self) -> f64 {
        self.image_w / self.grid_w as f64
    }

    /// Number of tokens in the grid.
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Pixel footprint of cell `(row, col)`: the half-open tile
    /// `[col*sx, (col+1)*sx) x [row*sy, (row+1)*sy)`.
    pub fn cell_rect(&self, row: usize, col: usize) -> PixelBox {
        let sx = self.scale_x();
        let sy = self.scale_y();
        PixelBox::new(
            col as f64 * sx,
            row as f64 * sy,
            (col + 1) as f64 * sx,
            (row + 1) as f64 * sy,
        )
    }
}
