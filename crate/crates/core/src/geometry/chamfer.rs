use std::collections::HashMap;

use super::{NnIndex, PointCloud, Vec3};
use crate::error::{Error, Result};

/// Mean squared distance from each point to its nearest neighbour in `index`,
/// with per-point gradients `2 (x - y_nn) / n` (correspondences held fixed).
pub fn chamfer_single_side(pts: &[Vec3], index: &NnIndex) -> Result<(f64, Vec<Vec3>)> {
    if index.is_empty() {
        return Err(Error::Empty("chamfer target index has no points".into()));
    }
    if pts.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pts.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pts.len());
    for x in pts {
        let (i, d2) = index.nearest(x).expect("non-empty index");
        loss += d2;
        grads.push((x - index.points()[i]) * (2.0 / n));
    }
    Ok((loss / n, grads))
}

type CellKey = (i64, i64, i64);

fn cell_of(p: &Vec3, voxel: f64) -> CellKey {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// Running per-cell centroids. Cells keep their first-insertion order so the
/// emitted point list is deterministic.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    voxel: f64,
    slots: HashMap<CellKey, usize>,
    sums: Vec<Vec3>,
    counts: Vec<u32>,
}

impl VoxelGrid {
    pub fn new(voxel: f64) -> Self {
        assert!(voxel > 0.0, "voxel size must be positive");
        VoxelGrid {
            voxel,
            slots: HashMap::new(),
            sums: Vec::new(),
            counts: Vec::new(),
        }
    }

    pub fn voxel(&self) -> f64 {
        self.voxel
    }

    pub fn insert(&mut self, p: &Vec3) {
        let key = cell_of(p, self.voxel);
        let next = self.sums.len();
        let slot = *self.slots.entry(key).or_insert(next);
        if slot == next {
            self.sums.push(Vec3::zeros());
            self.counts.push(0);
        }
        self.sums[slot] += p;
        self.counts[slot] += 1;
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    pub fn centroids(&self) -> Vec<Vec3> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| s / c as f64)
            .collect()
    }
}

/// One centroid per occupied voxel cell.
pub fn voxel_downsample(pts: &PointCloud, voxel: f64) -> PointCloud {
    let mut grid = VoxelGrid::new(voxel);
    for p in &pts.points {
        grid.insert(p);
    }
    PointCloud::new(grid.centroids(), pts.frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn zero_when_subset() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 2.0, 3.0)];
        let index = NnIndex::build(pts.clone());
        let (loss, grads) = chamfer_single_side(&pts, &index).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.norm() == 0.0));
    }

    #[test]
    fn one_pair() {
        let index = NnIndex::build(vec![Vec3::zeros()]);
        let (loss, grads) = chamfer_single_side(&[Vec3::new(0.3, 0.0, 0.0)], &index).unwrap();
        assert!((loss - 0.09).abs() < 1e-15);
        assert!((grads[0].x - 0.6).abs() < 1e-15);
    }

    #[test]
    fn empty_inputs() {
        let index = NnIndex::build(vec![Vec3::zeros()]);
        let (loss, grads) = chamfer_single_side(&[], &index).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.is_empty());
        let empty = NnIndex::build(Vec::new());
        assert!(chamfer_single_side(&[Vec3::zeros()], &empty).is_err());
    }

    #[test]
    fn single_cell_centroid() {
        let cloud = PointCloud::new(
            vec![Vec3::new(0.01, 0.01, 0.01), Vec3::new(0.03, 0.02, 0.04)],
            Frame::Canonical,
        );
        let out = voxel_downsample(&cloud, 0.05);
        assert_eq!(out.len(), 1);
        assert!((out.points[0] - Vec3::new(0.02, 0.015, 0.025)).norm() < 1e-15);
    }

    #[test]
    fn sparse_points_unchanged() {
        let pts: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64 * 0.2 + 0.001, 0.0, 0.0)).collect();
        let out = voxel_downsample(&PointCloud::new(pts.clone(), Frame::Canonical), 0.1);
        assert_eq!(out.points, pts);
    }

    #[test]
    fn cell_count_matches_quantized_hash() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..10_000)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let voxel = 0.05;
        let cells: HashSet<(i64, i64, i64)> = pts
            .iter()
            .map(|p| {
                (
                    (p.x / voxel).floor() as i64,
                    (p.y / voxel).floor() as i64,
                    (p.z / voxel).floor() as i64,
                )
            })
            .collect();
        let out = voxel_downsample(&PointCloud::new(pts, Frame::Canonical), voxel);
        assert_eq!(out.len(), cells.len());
    }
}
