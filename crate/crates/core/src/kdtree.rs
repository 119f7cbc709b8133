//! Static 3-d tree for nearest-neighbor queries during frame linking.

use crate::geom::Vec3;
use crate::num::Real;

#[derive(Clone, Debug)]
struct Node {
    /// Index into the caller's point list.
    point: usize,
    axis: u8,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct KdTree<T> {
    points: Vec<Vec3<T>>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl<T: Real> KdTree<T> {
    pub fn build(points: &[Vec3<T>]) -> Self {
        let mut tree = Self { points: points.to_vec(), nodes: Vec::with_capacity(points.len()), root: None };
        let mut ids: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build_rec(&mut ids, 0);
        tree
    }

    fn build_rec(&mut self, ids: &mut [usize], depth: usize) -> Option<usize> {
        if ids.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let pts = &self.points;
        ids.sort_by(|&a, &b| {
            pts[a].get(axis).partial_cmp(&pts[b].get(axis)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mid = ids.len() / 2;
        let point = ids[mid];
        let slot = self.nodes.len();
        self.nodes.push(Node { point, axis: axis as u8, left: None, right: None });
        let (lo, hi) = ids.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut hi[1..], depth + 1);
        self.nodes[slot].left = left;
        self.nodes[slot].right = right;
        Some(slot)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest point with squared distance `<= max_dist_sq`, as
    /// `(index, squared distance)`. Equal distances resolve to the lowest
    /// index, matching a linear scan.
    pub fn nearest_within(&self, query: Vec3<T>, max_dist_sq: T) -> Option<(usize, T)> {
        let mut best: Option<(usize, T)> = None;
        if let Some(root) = self.root {
            self.search(root, query, max_dist_sq, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: Vec3<T>, max_dist_sq: T, best: &mut Option<(usize, T)>) {
        let n = &self.nodes[node];
        let p = self.points[n.point];
        let d2 = q.distance_squared(p);
        if d2 <= max_dist_sq {
            let better = match *best {
                None => true,
                Some((bi, bd)) => d2 < bd || (d2 == bd && n.point < bi),
            };
            if better {
                *best = Some((n.point, d2));
            }
        }
        let axis = n.axis as usize;
        let diff = q.get(axis) - p.get(axis);
        let (near, far) = if diff < T::zero() { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, q, max_dist_sq, best);
        }
        if let Some(c) = far {
            let bound = best.map_or(max_dist_sq, |(_, bd)| bd);
            if diff * diff <= bound {
                self.search(c, q, max_dist_sq, best);
            }
        }
    }
}

/// Linear-scan counterpart of [`KdTree::nearest_within`].
pub fn brute_force_nearest_within<T: Real>(points: &[Vec3<T>], query: Vec3<T>, max_dist_sq: T) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, &p) in points.iter().enumerate() {
        let d2 = query.distance_squared(p);
        if d2 <= max_dist_sq && best.is_none_or(|(_, bd)| d2 < bd) {
            best = Some((i, d2));
        }
    }
    best
}
