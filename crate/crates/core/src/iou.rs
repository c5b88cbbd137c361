//! Overlap measures for rotated 3D boxes.
//!
//! Bird's-eye-view overlap clips one rectangle footprint against the other
//! (Sutherland-Hodgman over the four edges of a counterclockwise polygon)
//! and takes the shoelace area of the remainder. 3D overlap multiplies
//! that footprint intersection by the vertical extent shared by the two
//! boxes and divides by the volume union.

use crate::kitti::label::Box3D;

/// Shoelace area of a simple polygon; positive for counterclockwise
/// winding, which is the orientation clipping preserves here.
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        twice += x0 * y1 - x1 * y0;
    }
    twice / 2.0
}

/// Clips a polygon to the half-plane on the left of the directed edge
/// a -> b (the inside of a counterclockwise clip polygon).
fn clip_edge(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut out = Vec::with_capacity(subject.len() + 2);
    for i in 0..subject.len() {
        let cur = subject[i];
        let next = subject[(i + 1) % subject.len()];
        let sc = side(cur);
        let sn = side(next);
        if sc >= 0.0 {
            out.push(cur);
        }
        if (sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0) {
            let t = sc / (sc - sn);
            out.push([
                cur[0] + t * (next[0] - cur[0]),
                cur[1] + t * (next[1] - cur[1]),
            ]);
        }
    }
    out
}

/// Area of the intersection of two convex counterclockwise polygons.
pub fn intersection_area(p: &[[f64; 2]], q: &[[f64; 2]]) -> f64 {
    let mut poly = p.to_vec();
    for i in 0..q.len() {
        if poly.len() < 3 {
            return 0.0;
        }
        poly = clip_edge(&poly, q[i], q[(i + 1) % q.len()]);
    }
    polygon_area(&poly).max(0.0)
}

/// Intersection-over-union of the yaw-rotated footprints of two boxes.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let area_a = a.w * a.l;
    let area_b = b.w * b.l;
    if area_a <= f64::EPSILON || area_b <= f64::EPSILON {
        return 0.0;
    }
    let inter = intersection_area(&a.corners_bev(), &b.corners_bev());
    let union = area_a + area_b - inter;
    if union <= f64::EPSILON {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 3D intersection-over-union: BEV footprint intersection times shared
/// vertical extent, over the union of the two volumes. Boxes hang below
/// their y coordinate.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let vol_a = a.volume();
    let vol_b = b.volume();
    if vol_a <= f64::EPSILON || vol_b <= f64::EPSILON {
        return 0.0;
    }
    let y_overlap = (a.y.min(b.y) - (a.y - a.h).max(b.y - b.h)).max(0.0);
    if y_overlap == 0.0 {
        return 0.0;
    }
    let inter = intersection_area(&a.corners_bev(), &b.corners_bev()) * y_overlap;
    let union = vol_a + vol_b - inter;
    if union <= f64::EPSILON {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection-over-union of two axis-aligned image rectangles given as
/// [left, top, right, bottom].
pub fn iou_2d(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= f64::EPSILON {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
