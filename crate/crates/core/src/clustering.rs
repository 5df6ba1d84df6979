//! Graph clustering of arguments connected by similar labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consolidation::{Label, PairId, PairRecord};
use crate::model::Stance;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("within-cluster pair {0} has no label")]
    UnlabeledPair(PairId),
    #[error("clustering has no clusters")]
    NoClusters,
    #[error("k = {k} outside [2, {n}]")]
    KOutOfRange { k: usize, n: usize },
    #[error("graph has no vertices")]
    EmptyGraph,
    #[error("empty parameter grid")]
    EmptyGrid,
    #[error("unknown vertex {0}")]
    UnknownVertex(String),
}

/// Undirected simple graph over argument ids; vertices are kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    vertices: Vec<String>,
    index: HashMap<String, usize>,
    adj: Vec<BTreeSet<usize>>,
}

impl SimilarityGraph {
    pub fn new<I, S>(vertices: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = vertices.into_iter().map(Into::into).collect();
        let vertices: Vec<String> = set.into_iter().collect();
        let index = vertices.iter().enumerate().map(|(k, v)| (v.clone(), k)).collect();
        let adj = vec![BTreeSet::new(); vertices.len()];
        Self { vertices, index, adj }
    }

    /// Vertices from `vertices`, edges from every pair labeled similar.
    pub fn from_labels<I, S>(vertices: I, records: &[PairRecord]) -> Result<Self, ClusterError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut g = Self::new(vertices);
        for r in records.iter().filter(|r| r.label == Label::Similar) {
            g.add_edge(&r.pair.i, &r.pair.j)?;
        }
        Ok(g)
    }

    pub fn add_edge(&mut self, a: &str, b: &str) -> Result<(), ClusterError> {
        let ia = *self.index.get(a).ok_or_else(|| ClusterError::UnknownVertex(a.to_string()))?;
        let ib = *self.index.get(b).ok_or_else(|| ClusterError::UnknownVertex(b.to_string()))?;
        if ia != ib {
            self.adj[ia].insert(ib);
            self.adj[ib].insert(ia);
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[String] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj[v].iter().copied()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    fn clusters_from_assignment(&self, assignment: &[usize]) -> Vec<Vec<String>> {
        let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (v, &c) in assignment.iter().enumerate() {
            groups.entry(c).or_default().push(self.vertices[v].clone());
        }
        canonical(groups.into_values().collect())
    }
}

/// Sorts members, then clusters by their first member.
pub fn canonical(mut clusters: Vec<Vec<String>>) -> Vec<Vec<String>> {
    clusters.retain(|c| !c.is_empty());
    for c in &mut clusters {
        c.sort();
    }
    clusters.sort();
    clusters
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "param", rename_all = "snake_case")]
pub enum ClusterParams {
    Louvain(f64),
    Spectral(usize),
}

impl ClusterParams {
    pub fn method(&self) -> &'static str {
        match self {
            ClusterParams::Louvain(_) => "louvain",
            ClusterParams::Spectral(_) => "spectral",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            ClusterParams::Louvain(r) => r,
            ClusterParams::Spectral(k) => k as f64,
        }
    }
}

/// Clustering export document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub method: String,
    pub param: f64,
    pub error: f64,
    pub clusters: Vec<Vec<String>>,
}

/// Mean over clusters of the fraction of within-cluster pairs labeled
/// dissimilar; a singleton cluster counts as 1.
pub fn cluster_error<F>(clusters: &[Vec<String>], label: F) -> Result<f64, ClusterError>
where
    F: Fn(&PairId) -> Option<Label>,
{
    if clusters.is_empty() {
        return Err(ClusterError::NoClusters);
    }
    let mut total = 0.0;
    for cluster in clusters {
        if cluster.len() < 2 {
            total += 1.0;
            continue;
        }
        let mut dissimilar = 0usize;
        for (x, a) in cluster.iter().enumerate() {
            for b in &cluster[x + 1..] {
                let pair = PairId::new(a.as_str(), b.as_str());
                match label(&pair) {
                    Some(Label::Similar) => {}
                    Some(Label::Dissimilar) => dissimilar += 1,
                    Some(Label::Unlabeled) | None => return Err(ClusterError::UnlabeledPair(pair)),
                }
            }
        }
        let n = cluster.len();
        total += dissimilar as f64 / (n * (n - 1) / 2) as f64;
    }
    Ok(total / clusters.len() as f64)
}

/// Lookup table from labeled records.
pub fn label_lookup(records: &[PairRecord]) -> HashMap<PairId, Label> {
    records.iter().map(|r| (r.pair.clone(), r.label)).collect()
}

/// Weighted graph used across Louvain levels. `adj[i]` includes the self
/// loop, if any, so `degree(i) = Σ_j adj[i][j]`.
#[derive(Debug, Clone)]
struct WeightedGraph {
    adj: Vec<BTreeMap<usize, f64>>,
}

impl WeightedGraph {
    fn from_simple(g: &SimilarityGraph) -> Self {
        let adj = (0..g.len())
            .map(|v| g.neighbors(v).map(|u| (u, 1.0)).collect())
            .collect();
        Self { adj }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn degrees(&self) -> Vec<f64> {
        self.adj.iter().map(|n| n.values().sum()).collect()
    }

    fn modularity(&self, community: &[usize], resolution: f64) -> f64 {
        let degrees = self.degrees();
        let two_m: f64 = degrees.iter().sum();
        if two_m == 0.0 {
            return 0.0;
        }
        let mut inside: HashMap<usize, f64> = HashMap::new();
        let mut tot: HashMap<usize, f64> = HashMap::new();
        for (i, nbrs) in self.adj.iter().enumerate() {
            *tot.entry(community[i]).or_default() += degrees[i];
            for (&j, &w) in nbrs {
                if community[i] == community[j] {
                    *inside.entry(community[i]).or_default() += w;
                }
            }
        }
        tot.iter()
            .map(|(c, &t)| inside.get(c).copied().unwrap_or(0.0) / two_m - resolution * (t / two_m).powi(2))
            .sum()
    }

    fn aggregate(&self, community: &[usize], n_comms: usize) -> Self {
        let mut adj = vec![BTreeMap::new(); n_comms];
        for (i, nbrs) in self.adj.iter().enumerate() {
            for (&j, &w) in nbrs {
                *adj[community[i]].entry(community[j]).or_insert(0.0) += w;
            }
        }
        Self { adj }
    }
}

/// Renumbers communities densely in order of first appearance.
fn relabel(community: &mut [usize]) -> usize {
    let mut map = HashMap::new();
    for c in community.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

/// One round of local moves. Returns whether anything moved.
fn local_moves(g: &WeightedGraph, community: &mut [usize], resolution: f64, rng: &mut ChaCha8Rng) -> bool {
    let degrees = g.degrees();
    let two_m: f64 = degrees.iter().sum();
    let mut tot = vec![0.0; g.len()];
    for i in 0..g.len() {
        tot[community[i]] += degrees[i];
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.shuffle(rng);
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for &i in &order {
            let home = community[i];
            let mut links: BTreeMap<usize, f64> = BTreeMap::new();
            for (&j, &w) in &g.adj[i] {
                if j != i {
                    *links.entry(community[j]).or_insert(0.0) += w;
                }
            }
            tot[home] -= degrees[i];
            let gain = |c: usize, links: &BTreeMap<usize, f64>| {
                links.get(&c).copied().unwrap_or(0.0) - resolution * tot[c] * degrees[i] / two_m
            };
            let mut best = home;
            let mut best_gain = gain(home, &links);
            for &c in links.keys() {
                let g_c = gain(c, &links);
                if g_c > best_gain + 1e-12 {
                    best = c;
                    best_gain = g_c;
                }
            }
            tot[best] += degrees[i];
            if best != home {
                community[i] = best;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    moved_any
}

/// Result of a Louvain run with the modularity after every level.
#[derive(Debug, Clone, PartialEq)]
pub struct LouvainTrace {
    pub assignment: Vec<usize>,
    pub modularity: Vec<f64>,
}

pub fn louvain_trace(graph: &SimilarityGraph, resolution: f64, seed: u64) -> LouvainTrace {
    let n = graph.len();
    let mut assignment: Vec<usize> = (0..n).collect();
    let mut level = WeightedGraph::from_simple(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = vec![level.modularity(&(0..n).collect::<Vec<_>>(), resolution)];
    if graph.edge_count() == 0 {
        return LouvainTrace { assignment, modularity: trace };
    }
    loop {
        let mut community: Vec<usize> = (0..level.len()).collect();
        if !local_moves(&level, &mut community, resolution, &mut rng) {
            break;
        }
        let q = level.modularity(&community, resolution);
        debug_assert!(q >= trace.last().copied().unwrap_or(f64::MIN) - 1e-9);
        trace.push(q);
        let n_comms = relabel(&mut community);
        for a in assignment.iter_mut() {
            *a = community[*a];
        }
        if n_comms == level.len() {
            break;
        }
        level = level.aggregate(&community, n_comms);
    }
    relabel(&mut assignment);
    LouvainTrace { assignment, modularity: trace }
}

pub fn louvain(graph: &SimilarityGraph, resolution: f64, seed: u64) -> Result<Vec<Vec<String>>, ClusterError> {
    if graph.is_empty() {
        return Err(ClusterError::EmptyGraph);
    }
    let trace = louvain_trace(graph, resolution, seed);
    Ok(graph.clusters_from_assignment(&trace.assignment))
}

/// Eigenvectors of the symmetric normalized Laplacian, ascending by
/// eigenvalue. Computed once per graph and reused for every `k`.
#[derive(Debug, Clone)]
pub struct SpectralEmbedding {
    vectors: DMatrix<f64>,
    order: Vec<usize>,
}

impl SpectralEmbedding {
    pub fn new(graph: &SimilarityGraph) -> Self {
        let n = graph.len();
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|v| match graph.degree(v) {
                0 => 0.0,
                d => 1.0 / (d as f64).sqrt(),
            })
            .collect();
        let mut lap = DMatrix::<f64>::identity(n, n);
        for v in 0..n {
            for u in graph.neighbors(v) {
                lap[(v, u)] -= inv_sqrt[v] * inv_sqrt[u];
            }
        }
        let eig = SymmetricEigen::new(lap);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
        Self { vectors: eig.eigenvectors, order }
    }

    /// Rows of the first `k` eigenvectors, each scaled to unit length.
    fn rows(&self, k: usize) -> Vec<Vec<f64>> {
        let n = self.vectors.nrows();
        (0..n)
            .map(|v| {
                let mut row: Vec<f64> = self.order[..k].iter().map(|&c| self.vectors[(v, c)]).collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    row.iter_mut().for_each(|x| *x /= norm);
                }
                row
            })
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with farthest-point seeding (first center drawn from the
/// seeded RNG). Returns one cluster index per point.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k.min(n) {
        let far = (0..n).max_by(|&a, &b| min_d[a].total_cmp(&min_d[b]).then(b.cmp(&a))).expect("n > 0");
        centers.push(points[far].clone());
        for (p, d) in points.iter().zip(min_d.iter_mut()) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let nearest = |p: &[f64], centers: &[Vec<f64>]| {
        (0..centers.len())
            .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])).then(a.cmp(&b)))
            .expect("centers non-empty")
    };
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..300 {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            if counts[c] > 0 {
                *center = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    assignment
}

pub fn spectral_with(
    graph: &SimilarityGraph,
    embedding: &SpectralEmbedding,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>, ClusterError> {
    let n = graph.len();
    if k < 2 || k > n {
        return Err(ClusterError::KOutOfRange { k, n });
    }
    if k == n {
        return Ok(canonical(graph.vertices().iter().map(|v| vec![v.clone()]).collect()));
    }
    let rows = embedding.rows(k);
    let assignment = kmeans(&rows, k, seed);
    Ok(graph.clusters_from_assignment(&assignment))
}

pub fn spectral(graph: &SimilarityGraph, k: usize, seed: u64) -> Result<Vec<Vec<String>>, ClusterError> {
    if k < 2 || k > graph.len() {
        return Err(ClusterError::KOutOfRange { k, n: graph.len() });
    }
    spectral_with(graph, &SpectralEmbedding::new(graph), k, seed)
}

/// Resolutions 0.2, 0.3, …, 2.0.
pub fn default_louvain_grid() -> Vec<f64> {
    (2..=20).map(|i| f64::from(i) / 10.0).collect()
}

/// k = 2 … min(40, |V|).
pub fn default_spectral_grid(n: usize) -> Vec<usize> {
    (2..=n.min(40)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub method: String,
    pub param: f64,
    pub error: f64,
    pub n_clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: Clustering,
    pub grid: Vec<GridPoint>,
}

/// Evaluates every grid point and returns the one with the smallest error.
/// Ties prefer fewer clusters, then Louvain, then the smaller parameter.
pub fn sweep_select<F>(
    graph: &SimilarityGraph,
    label: F,
    louvain_grid: &[f64],
    spectral_grid: &[usize],
    seed: u64,
) -> Result<SweepResult, ClusterError>
where
    F: Fn(&PairId) -> Option<Label>,
{
    if graph.is_empty() {
        return Err(ClusterError::EmptyGraph);
    }
    let spectral_grid: Vec<usize> = spectral_grid.iter().copied().filter(|&k| k >= 2 && k <= graph.len()).collect();
    if louvain_grid.is_empty() && spectral_grid.is_empty() {
        return Err(ClusterError::EmptyGrid);
    }
    let mut candidates: Vec<(ClusterParams, Vec<Vec<String>>)> = Vec::new();
    for &r in louvain_grid {
        candidates.push((ClusterParams::Louvain(r), louvain(graph, r, seed)?));
    }
    if !spectral_grid.is_empty() {
        let embedding = SpectralEmbedding::new(graph);
        for &k in &spectral_grid {
            candidates.push((ClusterParams::Spectral(k), spectral_with(graph, &embedding, k, seed)?));
        }
    }
    let mut best: Option<(f64, usize, u8, f64, Clustering)> = None;
    let mut grid = Vec::with_capacity(candidates.len());
    for (params, clusters) in candidates {
        let error = cluster_error(&clusters, &label)?;
        let key = (error, clusters.len(), u8::from(matches!(params, ClusterParams::Spectral(_))), params.param());
        grid.push(GridPoint { method: params.method().into(), param: params.param(), error, n_clusters: clusters.len() });
        let better = match &best {
            None => true,
            Some((e, n, m, p, _)) => {
                key.0.total_cmp(e)
                    .then(key.1.cmp(n))
                    .then(key.2.cmp(m))
                    .then(key.3.total_cmp(p))
                    .is_lt()
            }
        };
        if better {
            let c = Clustering { method: params.method().into(), param: params.param(), error, clusters };
            best = Some((key.0, key.1, key.2, key.3, c));
        }
    }
    Ok(SweepResult { best: best.expect("grid non-empty").4, grid })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StanceReport {
    pub minority_ratio: Vec<f64>,
}

/// Share of each cluster not holding the cluster's majority stance.
pub fn stance_minority_ratio(clusters: &[Vec<String>], stances: &HashMap<String, Stance>) -> StanceReport {
    let minority_ratio = clusters
        .iter()
        .map(|c| {
            if c.is_empty() {
                return 0.0;
            }
            let pro = c.iter().filter(|id| stances.get(*id) == Some(&Stance::Pro)).count();
            let con = c.len() - pro;
            pro.min(con) as f64 / c.len() as f64
        })
        .collect();
    StanceReport { minority_ratio }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sa: f64 = ra.values().map(|&v| choose2(v)).sum();
    let sb: f64 = rb.values().map(|&v| choose2(v)).sum();
    let expected = sa * sb / choose2(n);
    let max = (sa + sb) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return if index == expected { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// Cluster index per vertex of `graph`, for comparing clusterings.
pub fn assignment_of(graph: &SimilarityGraph, clusters: &[Vec<String>]) -> Vec<usize> {
    let mut out = vec![usize::MAX; graph.len()];
    for (c, members) in clusters.iter().enumerate() {
        for m in members {
            if let Some(&v) = graph.index.get(m) {
                out[v] = c;
            }
        }
    }
    out
}
