//! Procedural car-like shape family with a closed-form signed distance:
//! a rounded-box body smoothly unioned with a rounded-box cabin, expressed
//! directly in the decoder's normalized frame.

use serde::{Deserialize, Serialize};

use crate::geometry::{BoxSize, Vec3, NORMALIZATION_MARGIN};

/// Blend radius of the body/cabin smooth union, normalized units.
pub const FAMILY_BLEND: f64 = 0.05;

/// Cabin width relative to body width.
const CABIN_WIDTH_FRAC: f64 = 0.86;
/// Relative gap between the surface and its box, so that surface points
/// rounded to f32 in world coordinates still lie inside the box.
pub const SURFACE_INSET: f64 = 1e-5;

/// Cubic polynomial smooth minimum; never exceeds `min(a, b)`, deviates from
/// it by at most `k / 6` and stays 1-Lipschitz.
pub fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return a.min(b);
    }
    let h = (k - (a - b).abs()).max(0.0) / k;
    a.min(b) - h * h * h * k / 6.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundedBox {
    pub center: [f64; 3],
    pub half: [f64; 3],
    pub radius: f64,
}

impl RoundedBox {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        let r = self.radius;
        let q = Vec3::new(
            (p.x - self.center[0]).abs() - (self.half[0] - r),
            (p.y - self.center[1]).abs() - (self.half[1] - r),
            (p.z - self.center[2]).abs() - (self.half[2] - r),
        );
        let outside = q.sup(&Vec3::zeros()).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        outside + inside - r
    }
}

/// Family parameters. Lengths are relative to the body length, which is the
/// unit before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    /// Body width / body length.
    pub width_ratio: f64,
    /// Body height / body length.
    pub body_height_ratio: f64,
    /// Cabin length / body length.
    pub cabin_length_frac: f64,
    /// Cabin height / body height.
    pub cabin_height_frac: f64,
    /// Signed longitudinal cabin shift, as a fraction of
    /// `min(1 - cabin_length_frac, cabin_length_frac) / 2`; the cabin always
    /// straddles the box center so the shape stays star-shaped about it.
    pub cabin_offset: f64,
    /// Edge rounding / body length.
    pub rounding: f64,
}

/// Inclusive `(min, max)` bounds of each family parameter.
pub const FAMILY_BOUNDS: [(&str, f64, f64); 6] = [
    ("width_ratio", 0.36, 0.46),
    ("body_height_ratio", 0.12, 0.22),
    ("cabin_length_frac", 0.35, 0.70),
    ("cabin_height_frac", 0.45, 1.00),
    ("cabin_offset", -0.8, 0.8),
    ("rounding", 0.01, 0.035),
];

impl ShapeParams {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.width_ratio,
            self.body_height_ratio,
            self.cabin_length_frac,
            self.cabin_height_frac,
            self.cabin_offset,
            self.rounding,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        ShapeParams {
            width_ratio: a[0],
            body_height_ratio: a[1],
            cabin_length_frac: a[2],
            cabin_height_frac: a[3],
            cabin_offset: a[4],
            rounding: a[5],
        }
    }

    pub fn within_bounds(&self) -> bool {
        self.as_array()
            .iter()
            .zip(FAMILY_BOUNDS.iter())
            .all(|(v, (_, lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Midpoint of every bound.
    pub fn midpoint() -> Self {
        let mut a = [0.0; 6];
        for (v, (_, lo, hi)) in a.iter_mut().zip(FAMILY_BOUNDS.iter()) {
            *v = 0.5 * (lo + hi);
        }
        ShapeParams::from_array(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticShape {
    pub params: Option<ShapeParams>,
    pub body: RoundedBox,
    pub cabin: Option<RoundedBox>,
    pub blend: f64,
    /// Half extents of the shape's box in normalized units (x = length).
    pub half_extents: [f64; 3],
}

impl AnalyticShape {
    /// Builds the normalized shape: bounding box centered at the origin with
    /// half-diagonal `1 / 1.03`.
    pub fn from_params(params: ShapeParams) -> Self {
        let w = params.width_ratio;
        let hb = params.body_height_ratio;
        let hc = params.cabin_height_frac * hb;
        let cl = params.cabin_length_frac;
        let r = params.rounding;
        let total_h = hb + hc;
        let half_raw = Vec3::new(0.5, 0.5 * w, 0.5 * total_h);
        let box_scale = (1.0 / NORMALIZATION_MARGIN) / half_raw.norm();
        let scale = box_scale * (1.0 - SURFACE_INSET);
        let zc = 0.5 * total_h;

        let body = RoundedBox {
            center: [0.0, 0.0, (0.5 * hb - zc) * scale],
            half: [0.5 * scale, 0.5 * w * scale, 0.5 * hb * scale],
            radius: r * scale,
        };
        // cabin bottom sinks 2r into the body so the blend closes the seam
        let cabin_bottom = hb - 2.0 * r;
        let cabin_center_x = 0.5 * params.cabin_offset * (1.0 - cl).min(cl);
        let cabin = RoundedBox {
            center: [
                cabin_center_x * scale,
                0.0,
                (0.5 * (cabin_bottom + total_h) - zc) * scale,
            ],
            half: [
                0.5 * cl * scale,
                0.5 * CABIN_WIDTH_FRAC * w * scale,
                0.5 * (total_h - cabin_bottom) * scale,
            ],
            radius: r * scale,
        };
        AnalyticShape {
            params: Some(params),
            body,
            cabin: Some(cabin),
            blend: FAMILY_BLEND,
            half_extents: [half_raw.x * box_scale, half_raw.y * box_scale, half_raw.z * box_scale],
        }
    }

    /// Sharp axis-aligned box with the given half extents (degenerate member).
    pub fn cuboid(a: f64, b: f64, c: f64) -> Self {
        AnalyticShape {
            params: None,
            body: RoundedBox {
                center: [0.0; 3],
                half: [a, b, c],
                radius: 0.0,
            },
            cabin: None,
            blend: 0.0,
            half_extents: [a, b, c],
        }
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        let body = self.body.sdf(p);
        match &self.cabin {
            Some(cabin) => smooth_min(body, cabin.sdf(p), self.blend),
            None => body,
        }
    }

    /// Central-difference gradient.
    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        let h = 1e-6;
        let mut g = Vec3::zeros();
        for i in 0..3 {
            let mut a = *p;
            let mut b = *p;
            a[i] += h;
            b[i] -= h;
            g[i] = (self.sdf(&a) - self.sdf(&b)) / (2.0 * h);
        }
        g
    }

    /// Newton-style projection onto the zero level set.
    pub fn project_to_surface(&self, p: &Vec3) -> Option<Vec3> {
        let mut x = *p;
        for _ in 0..64 {
            let d = self.sdf(&x);
            if d.abs() < 1e-12 {
                return Some(x);
            }
            let g = self.gradient(&x);
            let gn2 = g.norm_squared();
            if gn2 < 1e-12 {
                return None;
            }
            x -= g * (d / gn2);
        }
        (self.sdf(&x).abs() < 1e-10).then_some(x)
    }

    /// Metric box of this shape for a given body length in meters.
    pub fn box_size(&self, length_m: f64) -> BoxSize {
        let [a, b, c] = self.half_extents;
        let m = length_m / (2.0 * a);
        BoxSize::new(2.0 * c * m, 2.0 * b * m, length_m).expect("positive extents")
    }

    /// First hit of a ray by sphere tracing; `dir` must be unit length.
    pub fn ray_cast(&self, origin: &Vec3, dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t = 0.0;
        for _ in 0..1024 {
            let d = self.sdf(&(origin + dir * t));
            if d < 1e-9 {
                return Some(t);
            }
            t += d;
            if t > t_max {
                return None;
            }
        }
        None
    }
}

/// Signed distance of a family shape at a normalized point.
pub fn analytic_sdf(shape: &AnalyticShape, x: &Vec3) -> f64 {
    shape.sdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng) -> ShapeParams {
        let mut a = [0.0; 6];
        for (v, (_, lo, hi)) in a.iter_mut().zip(FAMILY_BOUNDS.iter()) {
            *v = rng.random_range(*lo..=*hi);
        }
        ShapeParams::from_array(a)
    }

    #[test]
    fn cuboid_center_value() {
        let s = AnalyticShape::cuboid(0.5, 0.2, 0.3);
        assert!((s.sdf(&Vec3::zeros()) + 0.2).abs() < 1e-15);
        assert!((s.sdf(&Vec3::new(1.5, 0.0, 0.0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalized_extent() {
        let s = AnalyticShape::from_params(ShapeParams::midpoint());
        let [a, b, c] = s.half_extents;
        assert!(((a * a + b * b + c * c).sqrt() - 1.0 / 1.03).abs() < 1e-12);
        // box faces touch the surface up to the inset
        let zb = s.body.center[2] / (1.0 - SURFACE_INSET);
        let xc = s.cabin.unwrap().center[0] / (1.0 - SURFACE_INSET);
        for (p, e) in [(Vec3::new(a, 0.0, zb), a), (Vec3::new(0.0, b, zb), b), (Vec3::new(xc, 0.0, c), c)] {
            let d = s.sdf(&p);
            assert!(d > 0.0 && (d - e * SURFACE_INSET).abs() < 1e-12, "{d}");
        }
    }

    #[test]
    fn far_points_match_dense_surface_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = AnalyticShape::from_params(random_params(&mut rng));
        // dense surface sample by projecting random points
        let mut surface = Vec::new();
        while surface.len() < 40_000 {
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if let Some(q) = shape.project_to_surface(&p) {
                surface.push(q);
            }
        }
        for _ in 0..50 {
            let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let p = dir * rng.random_range(1.5..3.0);
            let brute = surface.iter().map(|s| (s - p).norm()).fold(f64::INFINITY, f64::min);
            let f = shape.sdf(&p);
            assert!(f <= brute + 1e-9);
            assert!((f - brute).abs() < 0.01, "sdf {f} vs sampled {brute}");
        }
    }

    #[test]
    fn single_crossing_along_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let shape = AnalyticShape::from_params(random_params(&mut rng));
            for _ in 0..20 {
                let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                let mut sign_changes = 0;
                let mut prev = shape.sdf(&Vec3::zeros()) < 0.0;
                for i in 1..=2000 {
                    let cur = shape.sdf(&(dir * (i as f64 * 0.0015))) < 0.0;
                    if cur != prev {
                        sign_changes += 1;
                    }
                    prev = cur;
                }
                assert_eq!(sign_changes, 1);
            }
        }
    }

    #[test]
    fn lipschitz_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = AnalyticShape::from_params(random_params(&mut rng));
        for _ in 0..10_000 {
            let x = Vec3::new(rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2));
            let y = x + Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            assert!((shape.sdf(&x) - shape.sdf(&y)).abs() <= (x - y).norm() + 0.01);
        }
    }

    #[test]
    fn ray_cast_hits_surface() {
        let shape = AnalyticShape::from_params(ShapeParams::midpoint());
        let origin = Vec3::new(5.0, 0.3, 0.1);
        let dir = (Vec3::zeros() - origin).normalize();
        let t = shape.ray_cast(&origin, &dir, 20.0).unwrap();
        assert!(shape.sdf(&(origin + dir * t)).abs() < 1e-8);
        assert!(shape.ray_cast(&origin, &-dir, 20.0).is_none());
    }

    #[test]
    fn box_size_consistent_with_normalization() {
        let shape = AnalyticShape::from_params(ShapeParams::midpoint());
        let size = shape.box_size(4.5);
        let s = size.normalization_scale();
        assert!((size.l * s / 2.0 - shape.half_extents[0]).abs() < 1e-12);
        assert!((size.w * s / 2.0 - shape.half_extents[1]).abs() < 1e-12);
        assert!((size.h * s / 2.0 - shape.half_extents[2]).abs() < 1e-12);
    }
}
