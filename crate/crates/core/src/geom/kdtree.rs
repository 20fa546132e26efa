//! Static 3-d tree for nearest-neighbor queries over point sets.

use crate::model::Vec3;

const LEAF: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { axis: u8, value: f64, left: u32, right: u32 },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Original index of each stored point.
    index: Vec<u32>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(points, &mut order, 0, points.len(), &mut nodes);
        }
        KdTree {
            points: order.iter().map(|&i| points[i as usize]).collect(),
            index: order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(original index, squared distance)` of the nearest point. Ties resolve
    /// to the lowest original index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for s in start as usize..end as usize {
                    let d = (self.points[s] - q).norm_squared();
                    let idx = self.index[s] as usize;
                    if d < best.1 || (d == best.1 && idx < best.0) {
                        *best = (idx, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near as usize, q, best);
                if diff * diff <= best.1 {
                    self.search(far as usize, q, best);
                }
            }
        }
    }
}

fn build(points: &[Vec3], order: &mut [u32], start: usize, end: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    if end - start <= LEAF {
        nodes.push(Node::Leaf {
            start: start as u32,
            end: end as u32,
        });
        return id;
    }
    let slice = &mut order[start..end];
    let (lo, hi) = slice.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(l, h), &i| (l.inf(&points[i as usize]), h.sup(&points[i as usize])),
    );
    let ext = hi - lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis].total_cmp(&points[b as usize][axis])
    });
    let value = points[slice[mid] as usize][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build(points, order, start, start + mid, nodes);
    let right = build(points, order, start + mid, end, nodes);
    nodes[id as usize] = Node::Split {
        axis: axis as u8,
        value,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let tree = KdTree::new(&pts);
        for _ in 0..500 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            let (i, d) = tree.nearest(&q).unwrap();
            let (bi, bd) = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert_eq!(d, bd);
            assert_eq!(i, bi);
        }
    }

    #[test]
    fn duplicates_resolve_to_lowest_index() {
        let pts = vec![Vec3::new(1.0, 0.0, 0.0); 20];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&Vec3::zeros()).unwrap().0, 0);
        assert!(KdTree::new(&[]).nearest(&Vec3::zeros()).is_none());
    }
}
