use nalgebra::Vector2;

use super::{BoxSize, Pose};

type P2 = Vector2<f64>;

/// Bird's-eye-view footprint corners, counter-clockwise.
pub fn bev_corners(pose: &Pose, size: &BoxSize) -> Vec<P2> {
    let (s, c) = pose.yaw.sin_cos();
    let hl = size.l / 2.0;
    let hw = size.w / 2.0;
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .iter()
        .map(|&(x, y)| P2::new(c * x - s * y + pose.tx, s * x + c * y + pose.ty))
        .collect()
}

/// Signed shoelace area (positive for counter-clockwise).
pub fn polygon_area(poly: &[P2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

fn cross(o: &P2, a: &P2, b: &P2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Sutherland–Hodgman clipping of `subject` against a convex, counter-clockwise
/// `clip` polygon.
pub fn convex_clip(subject: &[P2], clip: &[P2]) -> Vec<P2> {
    let mut output: Vec<P2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(&a, &b, &cur) >= 0.0;
            let prev_in = cross(&a, &b, &prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_intersection(&prev, &cur, &a, &b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_intersection(&prev, &cur, &a, &b));
            }
        }
    }
    output
}

fn segment_intersection(p: &P2, q: &P2, a: &P2, b: &P2) -> P2 {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let denom = d1 - d2;
    if denom.abs() < 1e-300 {
        return *q;
    }
    let t = d1 / denom;
    p + (q - p) * t
}

/// 3D IoU of two yaw-rotated boxes: BEV polygon overlap times vertical overlap.
pub fn box_iou_3d(pose_a: &Pose, size_a: &BoxSize, pose_b: &Pose, size_b: &BoxSize) -> f64 {
    let za = (pose_a.tz - size_a.h / 2.0, pose_a.tz + size_a.h / 2.0);
    let zb = (pose_b.tz - size_b.h / 2.0, pose_b.tz + size_b.h / 2.0);
    let dz = za.1.min(zb.1) - za.0.max(zb.0);
    if dz <= 0.0 {
        return 0.0;
    }
    let ra = 0.5 * (size_a.l.hypot(size_a.w));
    let rb = 0.5 * (size_b.l.hypot(size_b.w));
    let dxy = (pose_a.tx - pose_b.tx).hypot(pose_a.ty - pose_b.ty);
    if dxy >= ra + rb {
        return 0.0;
    }
    let poly = convex_clip(&bev_corners(pose_a, size_a), &bev_corners(pose_b, size_b));
    let area = polygon_area(&poly).abs();
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * dz;
    let union = size_a.volume() + size_b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}
