//! Exact nearest-vertex queries over a static point set.

use kiddo::{ImmutableKdTree, SquaredEuclidean};

use crate::geometry::Vec3;

/// k-d tree over a fixed set of points, returning indices into that set.
#[derive(Debug, Clone)]
pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
    points: Vec<Vec3>,
}

impl PointIndex {
    /// Returns `None` for an empty point set.
    pub fn new(points: &[Vec3]) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Some(Self {
            tree: ImmutableKdTree::new_from_slice(&raw),
            points: points.to_vec(),
        })
    }

    /// Index of the nearest point and its Euclidean distance.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
        let i = nn.item as usize;
        // recompute from the stored point so the distance is bit-exact
        (i, (self.points[i] - q).norm())
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let index = PointIndex::new(&pts).unwrap();
        for _ in 0..200 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random()) * 1.4;
            let (_, d) = index.nearest(&q);
            let brute = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert_eq!(d, brute);
        }
        assert!(PointIndex::new(&[]).is_none());
    }
}
