use super::Vec3;

/// Balanced k-d tree over a fixed point set, stored implicitly as a
/// permutation of point indices (median of each range is the split node).
#[derive(Debug, Clone)]
pub struct NnIndex {
    points: Vec<Vec3>,
    order: Vec<u32>,
    axes: Vec<u8>,
}

impl NnIndex {
    pub fn build(points: Vec<Vec3>) -> Self {
        let n = points.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut axes = vec![0u8; n];
        build_range(&points, &mut order, &mut axes, 0, n);
        NnIndex { points, order, axes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index and squared distance of the nearest stored point, `None` when empty.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.points.len(), &mut best);
        Some(best)
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid] as usize;
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build_range(points: &[Vec3], order: &mut [u32], axes: &mut [u8], lo: usize, hi: usize) {
    if hi - lo <= 1 {
        return;
    }
    // split on the axis of widest spread
    let mut min = Vec3::repeat(f64::INFINITY);
    let mut max = Vec3::repeat(f64::NEG_INFINITY);
    for &i in &order[lo..hi] {
        let p = &points[i as usize];
        min = min.inf(p);
        max = max.sup(p);
    }
    let spread = max - min;
    let axis = if spread.x >= spread.y && spread.x >= spread.z {
        0
    } else if spread.y >= spread.z {
        1
    } else {
        2
    };
    let mid = lo + (hi - lo) / 2;
    order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
        points[a as usize][axis].total_cmp(&points[b as usize][axis])
    });
    axes[mid] = axis as u8;
    build_range(points, order, axes, lo, mid);
    build_range(points, order, axes, mid + 1, hi);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vec3], q: &Vec3) -> f64 {
        points
            .iter()
            .map(|p| (p - q).norm_squared())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn empty_index() {
        assert!(NnIndex::build(Vec::new()).nearest(&Vec3::zeros()).is_none());
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1usize, 2, 3, 17, 256, 3000] {
            let pts: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(rng.random(), rng.random::<f64>() * 3.0, rng.random::<f64>() * 0.1))
                .collect();
            let index = NnIndex::build(pts.clone());
            for _ in 0..200 {
                let q = Vec3::new(rng.random_range(-1.0..2.0), rng.random_range(-1.0..4.0), rng.random_range(-1.0..1.0));
                let (i, d2) = index.nearest(&q).unwrap();
                assert_eq!(d2, brute(&pts, &q));
                assert_eq!((pts[i] - q).norm_squared(), d2);
            }
        }
    }

    #[test]
    fn duplicate_points() {
        let pts = vec![Vec3::new(1.0, 1.0, 1.0); 10];
        let index = NnIndex::build(pts);
        let (_, d2) = index.nearest(&Vec3::new(1.0, 1.0, 2.0)).unwrap();
        assert_eq!(d2, 1.0);
    }
}
