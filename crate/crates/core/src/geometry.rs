//! Boxes, overlap measures, and anchor-free offset decoding.
//!
//! Degenerate inputs (zero-area unions or enclosing boxes) return 0 instead
//! of erroring so random-input property tests never abort.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::types::ActionTube;

/// Axis-aligned rectangle in pixels, corners (x1, y1) top-left and
/// (x2, y2) bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self { x1: v[0], y1: v[1], x2: v[2], y2: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Intersection over union; 0 for disjoint boxes or zero-area unions.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: IoU minus the empty fraction of the smallest enclosing
/// box. In (-1, 1]; 0 when the enclosing box has zero area.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_with_grad(a, b).0
}

/// GIoU value and its gradient with respect to `a`'s (x1, y1, x2, y2).
///
/// The gradient is a subgradient at the (measure-zero) points where the
/// min/max selections switch.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let zero = [0.0; 4];
    // Intersection with per-coordinate selection derivatives.
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;

    let area_a = a.area();
    let area_b = b.area();
    let union = area_a + area_b - inter;

    // Enclosing box.
    let cx1 = a.x1.min(b.x1);
    let cy1 = a.y1.min(b.y1);
    let cx2 = a.x2.max(b.x2);
    let cy2 = a.y2.max(b.y2);
    let cw = cx2 - cx1;
    let ch = cy2 - cy1;
    let c_area = cw * ch;

    if c_area <= 0.0 {
        return (0.0, zero);
    }
    if union <= 0.0 {
        // Both boxes degenerate but spread apart: IoU contributes nothing.
        let g = 0.0 - (c_area - 0.0) / c_area;
        return (g, zero); // gradient ill-defined on this degenerate set
    }

    // d inter / d a-coords
    let mut d_inter = [0.0; 4];
    if inter > 0.0 {
        if a.x1 > b.x1 {
            d_inter[0] = -ih;
        }
        if a.y1 > b.y1 {
            d_inter[1] = -iw;
        }
        if a.x2 < b.x2 {
            d_inter[2] = ih;
        }
        if a.y2 < b.y2 {
            d_inter[3] = iw;
        }
    }
    // d area_a / d a-coords
    let d_area = [-(a.y2 - a.y1), -(a.x2 - a.x1), a.y2 - a.y1, a.x2 - a.x1];
    // d union = d area_a - d inter
    let d_union: Vec<f64> = (0..4).map(|i| d_area[i] - d_inter[i]).collect();
    // d c_area / d a-coords (only where a's edge is the enclosing edge)
    let mut d_c = [0.0; 4];
    if a.x1 < b.x1 {
        d_c[0] = -ch;
    }
    if a.y1 < b.y1 {
        d_c[1] = -cw;
    }
    if a.x2 > b.x2 {
        d_c[2] = ch;
    }
    if a.y2 > b.y2 {
        d_c[3] = cw;
    }

    let iou_v = inter / union;
    let giou_v = iou_v - (c_area - union) / c_area;

    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_iou = (d_inter[i] * union - inter * d_union[i]) / (union * union);
        // d[-(C - U)/C] = (dU * C - U * dC) / C^2
        let d_pen = (d_union[i] * c_area - union * d_c[i]) / (c_area * c_area);
        grad[i] = d_iou + d_pen;
    }
    (giou_v, grad)
}

/// One spatial position of a pyramid level. Strides are fixed at
/// {8, 16, 32} for levels {1, 2, 3}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub level: usize,
    pub x: usize,
    pub y: usize,
}

impl GridCell {
    pub fn new(level: usize, x: usize, y: usize) -> Result<Self> {
        if !(1..=3).contains(&level) {
            return Err(contract(format!("grid level {level} outside 1..=3")));
        }
        Ok(Self { level, x, y })
    }

    pub fn stride(&self) -> usize {
        8 << (self.level - 1)
    }

    /// Pixel coordinates of the cell center.
    pub fn center(&self) -> (f64, f64) {
        let s = self.stride() as f64;
        ((self.x as f64 + 0.5) * s, (self.y as f64 + 0.5) * s)
    }
}

/// Decodes 4 raw offsets into a box: distances to the four sides are
/// `exp(raw) * stride` from the cell center, which keeps every output box
/// valid without clamping the predictions. Clamps to the frame when a size
/// is given.
pub fn decode_offsets(cell: &GridCell, raw: [f64; 4], frame: Option<(f64, f64)>) -> BBox {
    let s = cell.stride() as f64;
    let (cx, cy) = cell.center();
    let b = BBox::new(
        cx - raw[0].exp() * s,
        cy - raw[1].exp() * s,
        cx + raw[2].exp() * s,
        cy + raw[3].exp() * s,
    );
    match frame {
        Some((w, h)) => b.clamp_to(w, h),
        None => b,
    }
}

/// Inverse of [`decode_offsets`] (without clamping). Errors when the cell
/// center does not lie strictly inside the box, where the log-distance is
/// undefined.
pub fn encode_offsets(cell: &GridCell, b: &BBox) -> Result<[f64; 4]> {
    let s = cell.stride() as f64;
    let (cx, cy) = cell.center();
    let dists = [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy];
    if dists.iter().any(|&d| d <= 0.0) {
        return Err(contract("cell center outside target box".to_string()));
    }
    Ok([
        (dists[0] / s).ln(),
        (dists[1] / s).ln(),
        (dists[2] / s).ln(),
        (dists[3] / s).ln(),
    ])
}

/// Per-coordinate derivative of the decoded box w.r.t. its raw offsets:
/// d(x1)/d(raw0) = -exp(raw0)*s and so on, diagonal.
pub fn decode_jacobian_diag(cell: &GridCell, raw: [f64; 4]) -> [f64; 4] {
    let s = cell.stride() as f64;
    [-raw[0].exp() * s, -raw[1].exp() * s, raw[2].exp() * s, raw[3].exp() * s]
}

/// Spatio-temporal overlap: temporal IoU of the (inclusive) frame spans
/// times the mean per-frame box IoU over the span intersection. Frames where
/// only one tube has a box contribute 0 to the mean.
pub fn tube_iou(a: &ActionTube, b: &ActionTube) -> f64 {
    let (a0, a1) = match a.span() {
        Some(s) => s,
        None => return 0.0,
    };
    let (b0, b1) = match b.span() {
        Some(s) => s,
        None => return 0.0,
    };
    let inter_start = a0.max(b0);
    let inter_end = a1.min(b1);
    if inter_end < inter_start {
        return 0.0;
    }
    let inter_len = (inter_end - inter_start + 1) as f64;
    let union_len = ((a1 - a0 + 1) + (b1 - b0 + 1)) as f64 - inter_len;
    let temporal = inter_len / union_len;

    let mut spatial_sum = 0.0;
    for frame in inter_start..=inter_end {
        if let (Some(ba), Some(bb)) = (a.box_at(frame), b.box_at(frame)) {
            spatial_sum += iou(&ba, &bb);
        }
    }
    temporal * (spatial_sum / inter_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TubeMember;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_box(rng: &mut StdRng) -> BBox {
        let x1 = rng.gen_range(0.0..60.0);
        let y1 = rng.gen_range(0.0..60.0);
        BBox::new(x1, y1, x1 + rng.gen_range(0.5..30.0), y1 + rng.gen_range(0.5..30.0))
    }

    #[test]
    fn iou_hand_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        let far = BBox::new(10.0, 10.0, 11.0, 11.0);
        assert_eq!(iou(&a, &far), 0.0);
        // zero-area union
        let p = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn giou_hand_cases() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        let b = BBox::new(2.0, 2.0, 3.0, 3.0);
        assert!((giou(&a, &b) - (-7.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn giou_never_exceeds_iou_and_both_symmetric() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..1000 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let g = giou(&a, &b);
            let i = iou(&a, &b);
            assert!(g <= i + 1e-12);
            assert!(g > -1.0 && g <= 1.0);
            assert_eq!(giou(&a, &b), giou(&b, &a));
            assert_eq!(iou(&a, &b), iou(&b, &a));
        }
    }

    #[test]
    fn iou_giou_translation_and_scale_invariant() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..200 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let (dx, dy) = (rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0));
            let shift = |q: &BBox| BBox::new(q.x1 + dx, q.y1 + dy, q.x2 + dx, q.y2 + dy);
            assert!((iou(&a, &b) - iou(&shift(&a), &shift(&b))).abs() < 1e-9);
            assert!((giou(&a, &b) - giou(&shift(&a), &shift(&b))).abs() < 1e-9);
            let k = rng.gen_range(0.1..5.0);
            let scale = |q: &BBox| BBox::new(q.x1 * k, q.y1 * k, q.x2 * k, q.y2 * k);
            assert!((iou(&a, &b) - iou(&scale(&a), &scale(&b))).abs() < 1e-9);
            assert!((giou(&a, &b) - giou(&scale(&a), &scale(&b))).abs() < 1e-9);
        }
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(31);
        let h = 1e-5;
        for _ in 0..200 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let (_, grad) = giou_with_grad(&a, &b);
            let coords = [a.x1, a.y1, a.x2, a.y2];
            for i in 0..4 {
                let mut up = coords;
                up[i] += h;
                let mut dn = coords;
                dn[i] -= h;
                let fa = giou(&BBox::new(up[0], up[1], up[2], up[3]), &b);
                let fb = giou(&BBox::new(dn[0], dn[1], dn[2], dn[3]), &b);
                let fd = (fa - fb) / (2.0 * h);
                let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-4);
                // skip points straddling a selection switch
                if (fa - fb).abs() > 1e-12 || grad[i].abs() < 1e-9 {
                    assert!(err < 1e-3, "coord {i}: {} vs {fd}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn grid_cell_strides() {
        assert_eq!(GridCell::new(1, 0, 0).unwrap().stride(), 8);
        assert_eq!(GridCell::new(2, 0, 0).unwrap().stride(), 16);
        assert_eq!(GridCell::new(3, 0, 0).unwrap().stride(), 32);
        assert!(GridCell::new(4, 0, 0).is_err());
    }

    #[test]
    fn decode_zero_offsets() {
        let cell = GridCell::new(1, 0, 0).unwrap();
        let b = decode_offsets(&cell, [0.0; 4], None);
        assert_eq!(b, BBox::new(-4.0, -4.0, 12.0, 12.0));
        let clamped = decode_offsets(&cell, [0.0; 4], Some((64.0, 64.0)));
        assert_eq!(clamped, BBox::new(0.0, 0.0, 12.0, 12.0));
    }

    #[test]
    fn decode_collapses_to_center_in_the_limit() {
        let cell = GridCell::new(2, 1, 1).unwrap();
        let b = decode_offsets(&cell, [-60.0; 4], None);
        let (cx, cy) = cell.center();
        assert!((b.x1 - cx).abs() < 1e-9 && (b.x2 - cx).abs() < 1e-9);
        assert!((b.y1 - cy).abs() < 1e-9 && (b.y2 - cy).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_round_trip() {
        let cell = GridCell::new(1, 2, 1).unwrap();
        let target = BBox::new(3.0, 1.5, 33.0, 29.0); // contains center (20, 12)
        let raw = encode_offsets(&cell, &target).unwrap();
        let back = decode_offsets(&cell, raw, None);
        assert!((back.x1 - target.x1).abs() < 1e-9);
        assert!((back.y1 - target.y1).abs() < 1e-9);
        assert!((back.x2 - target.x2).abs() < 1e-9);
        assert!((back.y2 - target.y2).abs() < 1e-9);
    }

    #[test]
    fn decode_always_valid() {
        let mut rng = StdRng::seed_from_u64(41);
        let cell = GridCell::new(3, 0, 0).unwrap();
        for _ in 0..500 {
            let raw = [
                rng.gen_range(-40.0..40.0),
                rng.gen_range(-40.0..40.0),
                rng.gen_range(-40.0..40.0),
                rng.gen_range(-40.0..40.0),
            ];
            assert!(decode_offsets(&cell, raw, None).is_valid());
        }
        // extreme but finite raw inputs
        assert!(decode_offsets(&cell, [700.0, -700.0, 700.0, -700.0], None).is_valid());
    }

    fn tube(video: &str, class_id: usize, frames: &[(i64, BBox)]) -> ActionTube {
        ActionTube::new(
            video.to_string(),
            class_id,
            frames
                .iter()
                .map(|(f, b)| TubeMember { frame: *f, bbox: *b, score: 1.0 })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn tube_iou_cases() {
        let a = tube("v", 0, &[(0, BBox::new(0.0, 0.0, 2.0, 2.0)), (1, BBox::new(0.0, 0.0, 2.0, 2.0))]);
        assert!((tube_iou(&a, &a) - 1.0).abs() < 1e-12);

        let later = tube("v", 0, &[(5, BBox::new(0.0, 0.0, 2.0, 2.0))]);
        assert_eq!(tube_iou(&a, &later), 0.0);

        // same span, per-frame IoUs 1/7 and 1 -> 1 * mean(4/7)
        let b = tube("v", 0, &[(0, BBox::new(1.0, 1.0, 3.0, 3.0)), (1, BBox::new(0.0, 0.0, 2.0, 2.0))]);
        assert!((tube_iou(&a, &b) - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(tube_iou(&a, &b), tube_iou(&b, &a));
    }
}
