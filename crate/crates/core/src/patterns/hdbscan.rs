//! HDBSCAN over unit vectors with cosine distance.
//!
//! Core distance is the distance to the `min_samples`-th nearest neighbour,
//! counting the point itself. The minimum spanning tree over mutual
//! reachability is built with Prim's algorithm (lower index wins ties), the
//! single-linkage hierarchy is condensed by `min_cluster_size`, and clusters are
//! chosen by excess of mass. The root is never selected.

use serde::{Deserialize, Serialize};

use crate::vecmath::cosine_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            min_cluster_size: 3,
            min_samples: 2,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_cluster_size < 2 {
            return Err(format!("min_cluster_size must be >= 2, got {}", self.min_cluster_size));
        }
        if self.min_samples < 1 {
            return Err("min_samples must be >= 1".into());
        }
        if self.min_samples > self.min_cluster_size {
            return Err(format!(
                "min_samples ({}) must not exceed min_cluster_size ({})",
                self.min_samples, self.min_cluster_size
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster index per point, `None` for noise. Clusters are numbered by
    /// their lowest member index.
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
}

impl Clustering {
    pub fn noise(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|i| self.labels[*i].is_none()).collect()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|i| self.labels[*i] == Some(cluster))
            .collect()
    }
}

const MIN_DISTANCE: f64 = 1e-12;

fn dist(points: &[Vec<f32>], i: usize, j: usize) -> f64 {
    if i == j {
        0.0
    } else {
        cosine_distance(&points[i], &points[j]) as f64
    }
}

pub fn core_distances(points: &[Vec<f32>], min_samples: usize) -> Vec<f64> {
    let n = points.len();
    let k = min_samples.clamp(1, n.max(1));
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| dist(points, i, j)).collect();
            let (_, kth, _) = row.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Prim's MST over mutual reachability; edges in the order they were added.
pub fn mutual_reachability_mst(points: &[Vec<f32>], min_samples: usize) -> Vec<MstEdge> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let core = core_distances(points, min_samples);
    let mreach = |i: usize, j: usize| dist(points, i, j).max(core[i]).max(core[j]);
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = mreach(current, j);
            if d < best[j] || (d == best[j] && current < from[j]) {
                best[j] = d;
                from[j] = current;
            }
        }
        let mut next = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (next == usize::MAX || best[j] < best[next]) {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge {
            a: from[next],
            b: next,
            weight: best[next],
        });
        current = next;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Single-linkage merge: children (points < n, merges >= n), distance, size.
struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

fn single_linkage(n: usize, mut edges: Vec<MstEdge>) -> Vec<Merge> {
    edges.sort_by(|x, y| {
        x.weight
            .total_cmp(&y.weight)
            .then_with(|| x.a.min(x.b).cmp(&y.a.min(y.b)))
            .then_with(|| x.a.max(x.b).cmp(&y.a.max(y.b)))
    });
    let mut uf = UnionFind::new(2 * n);
    let mut size = vec![1usize; 2 * n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for e in edges {
        let (ra, rb) = (uf.find(e.a), uf.find(e.b));
        let node = n + merges.len();
        uf.parent[ra] = node;
        uf.parent[rb] = node;
        size[node] = size[ra] + size[rb];
        merges.push(Merge {
            left: ra,
            right: rb,
            distance: e.weight,
            size: size[node],
        });
    }
    merges
}

fn lambda(distance: f64) -> f64 {
    1.0 / distance.max(MIN_DISTANCE)
}

/// Condensed-tree cluster: parent, birth lambda, and what leaves it.
struct CondensedCluster {
    parent: Option<usize>,
    birth: f64,
    /// (point, lambda at which it falls out)
    points: Vec<(usize, f64)>,
    /// (child cluster, lambda at which it splits off, size)
    children: Vec<(usize, f64, usize)>,
}

fn condense(n: usize, merges: &[Merge], min_cluster_size: usize) -> Vec<CondensedCluster> {
    let node_size = |x: usize| if x < n { 1 } else { merges[x - n].size };
    let leaves = |root: usize, out: &mut Vec<usize>| {
        let mut stack = vec![root];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let m = &merges[x - n];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
    };
    let mut clusters = vec![CondensedCluster {
        parent: None,
        birth: 0.0,
        points: Vec::new(),
        children: Vec::new(),
    }];
    // (hierarchy node, cluster it belongs to)
    let mut stack = vec![(2 * n - 2, 0usize)];
    while let Some((node, cluster)) = stack.pop() {
        if node < n {
            // A lone point at the top of a cluster (only reachable for n == 1).
            clusters[cluster].points.push((node, f64::INFINITY));
            continue;
        }
        let m = &merges[node - n];
        let lam = lambda(m.distance);
        let (l, r) = (m.left, m.right);
        let (ls, rs) = (node_size(l), node_size(r));
        match (ls >= min_cluster_size, rs >= min_cluster_size) {
            (true, true) => {
                for (child, size) in [(l, ls), (r, rs)] {
                    let id = clusters.len();
                    clusters.push(CondensedCluster {
                        parent: Some(cluster),
                        birth: lam,
                        points: Vec::new(),
                        children: Vec::new(),
                    });
                    clusters[cluster].children.push((id, lam, size));
                    stack.push((child, id));
                }
            }
            (true, false) | (false, true) => {
                let (big, small) = if ls >= min_cluster_size { (l, r) } else { (r, l) };
                let mut fallen = Vec::new();
                leaves(small, &mut fallen);
                clusters[cluster].points.extend(fallen.into_iter().map(|p| (p, lam)));
                stack.push((big, cluster));
            }
            (false, false) => {
                let mut fallen = Vec::new();
                leaves(l, &mut fallen);
                leaves(r, &mut fallen);
                clusters[cluster].points.extend(fallen.into_iter().map(|p| (p, lam)));
            }
        }
    }
    clusters
}

fn stability(c: &CondensedCluster) -> f64 {
    let finite = |l: f64| if l.is_finite() { l } else { 1.0 / MIN_DISTANCE };
    c.points
        .iter()
        .map(|(_, l)| finite(*l) - c.birth)
        .chain(c.children.iter().map(|(_, l, size)| (finite(*l) - c.birth) * *size as f64))
        .sum()
}

/// Full HDBSCAN. Fewer points than `min_cluster_size` (or invalid params)
/// yields zero clusters with every point noise.
pub fn hdbscan(points: &[Vec<f32>], params: &ClusterParams) -> Clustering {
    let n = points.len();
    let all_noise = Clustering {
        labels: vec![None; n],
        n_clusters: 0,
    };
    if params.validate().is_err() || n < params.min_cluster_size || n < 2 {
        return all_noise;
    }
    let mst = mutual_reachability_mst(points, params.min_samples);
    let merges = single_linkage(n, mst);
    let tree = condense(n, &merges, params.min_cluster_size);

    // Excess of mass, leaves first. Children always carry larger ids than parents.
    let mut selected = vec![false; tree.len()];
    let mut best: Vec<f64> = tree.iter().map(stability).collect();
    for c in (1..tree.len()).rev() {
        let subtree: f64 = tree[c].children.iter().map(|(k, ..)| best[*k]).sum();
        if tree[c].children.is_empty() || best[c] >= subtree {
            selected[c] = true;
            let mut stack: Vec<usize> = tree[c].children.iter().map(|(k, ..)| *k).collect();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend(tree[k].children.iter().map(|(j, ..)| *j));
            }
        } else {
            best[c] = subtree;
        }
    }

    let mut raw = vec![None; n];
    for (c, cluster) in tree.iter().enumerate() {
        let mut owner = Some(c);
        while let Some(o) = owner {
            if selected[o] {
                break;
            }
            owner = tree[o].parent;
        }
        if let Some(o) = owner {
            for (p, _) in &cluster.points {
                raw[*p] = Some(o);
            }
        }
    }
    // Renumber by lowest member index.
    let mut order: Vec<usize> = Vec::new();
    for c in raw.iter().flatten() {
        if !order.contains(c) {
            order.push(*c);
        }
    }
    let labels = raw
        .iter()
        .map(|c| c.map(|c| order.iter().position(|o| *o == c).expect("seen")))
        .collect();
    Clustering {
        labels,
        n_clusters: order.len(),
    }
}
