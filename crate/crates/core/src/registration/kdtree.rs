//! Minimal 3D kd-tree for exact nearest-neighbor queries over a fixed point
//! set. Build and query order are deterministic: ties in coordinates break
//! on the original point index.

pub struct KdTree {
    points: Vec<[f64; 3]>,
    // Flattened tree: node i covers `order[range]`, splitting on depth % 3.
    order: Vec<u32>,
}

impl KdTree {
    pub fn build(points: Vec<[f64; 3]>) -> Self {
        assert!(!points.is_empty(), "kd-tree needs at least one point");
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        build_rec(&points, &mut order, 0);
        KdTree { points, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the nearest stored point and the squared distance to it.
    pub fn nearest(&self, query: [f64; 3]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.order.len(), 0, query, &mut best);
        best
    }

    fn search(
        &self,
        lo: usize,
        hi: usize,
        depth: usize,
        query: [f64; 3],
        best: &mut (usize, f64),
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid] as usize;
        let p = self.points[idx];
        let d2 = dist2(p, query);
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = depth % 3;
        let diff = query[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, depth + 1, query, best);
        if diff * diff <= best.1 {
            self.search(far.0, far.1, depth + 1, query, best);
        }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn build_rec(points: &[[f64; 3]], order: &mut [u32], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        let (pa, pb) = (points[a as usize][axis], points[b as usize][axis]);
        pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
    });
    let (left, rest) = order.split_at_mut(mid);
    build_rec(points, left, depth + 1);
    build_rec(points, &mut rest[1..], depth + 1);
}
