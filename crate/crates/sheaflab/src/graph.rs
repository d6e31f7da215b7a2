//! Undirected simple graphs, labeled datasets, file loaders, synthetic
//! dataset generators, and the metrics the spectral checkers need
//! (diameter, fundamental cycle basis, connectivity).

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("node id {id} out of range (n = {n})")]
    IdOutOfRange { id: usize, n: usize },
    #[error("self-loop at node {0} rejected")]
    SelfLoop(usize),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("dataset invalid: {0}")]
    Dataset(String),
    #[error("generator failed: {0}")]
    Generator(String),
}

/// Undirected simple graph. Edges are stored as (u, v) with u < v; the
/// adjacency lists are sorted and consistent with the edge list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list; reversed duplicates collapse to a
    /// single undirected edge. Self-loops and out-of-range ids are errors.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Graph, GraphError> {
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if a >= n {
                return Err(GraphError::IdOutOfRange { id: a, n });
            }
            if b >= n {
                return Err(GraphError::IdOutOfRange { id: b, n });
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in &edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        Ok(Graph { n, edges, adj })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u].binary_search(&v).is_ok()
    }

    /// Index of edge (u, v) in the edge list, in either orientation.
    pub fn edge_index(&self, u: usize, v: usize) -> Option<usize> {
        let key = (u.min(v), u.max(v));
        self.edges.binary_search(&key).ok()
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let dist = self.bfs_distances(0);
        dist.iter().all(|d| d.is_some())
    }

    /// BFS distances from `source`; None marks unreachable nodes.
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v].unwrap();
            for &u in &self.adj[v] {
                if dist[u].is_none() {
                    dist[u] = Some(dv + 1);
                    queue.push_back(u);
                }
            }
        }
        dist
    }

    /// Max over node pairs of the shortest-path length; errors on
    /// disconnected graphs.
    pub fn diameter(&self) -> Result<usize, GraphError> {
        let mut diam = 0;
        for v in 0..self.n {
            let dist = self.bfs_distances(v);
            for d in &dist {
                match d {
                    Some(d) => diam = diam.max(*d),
                    None => return Err(GraphError::Disconnected),
                }
            }
        }
        Ok(diam)
    }

    /// One closed walk per non-tree edge of a BFS spanning tree rooted at
    /// node 0: the tree path u ~> v closed by the edge (v, u). The basis has
    /// m - n + 1 cycles.
    pub fn fundamental_cycles(&self) -> Result<CycleBasis, GraphError> {
        if self.n == 0 {
            return Ok(CycleBasis { cycles: vec![] });
        }
        let mut parent: Vec<Option<usize>> = vec![None; self.n];
        let mut visited = vec![false; self.n];
        let mut tree_edges = HashSet::new();
        visited[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(v) = queue.pop_front() {
            for &u in &self.adj[v] {
                if !visited[u] {
                    visited[u] = true;
                    parent[u] = Some(v);
                    tree_edges.insert((v.min(u), v.max(u)));
                    queue.push_back(u);
                }
            }
        }
        if visited.iter().any(|&v| !v) {
            return Err(GraphError::Disconnected);
        }
        let mut cycles = Vec::new();
        for &(u, v) in &self.edges {
            if tree_edges.contains(&(u, v)) {
                continue;
            }
            cycles.push(self.tree_cycle(&parent, u, v));
        }
        Ok(CycleBasis { cycles })
    }

    // Tree path u ~> v (through the BFS tree), closed by the non-tree edge
    // (v, u).
    fn tree_cycle(&self, parent: &[Option<usize>], u: usize, v: usize) -> Vec<usize> {
        let mut up_u = vec![u];
        let mut cur = u;
        while let Some(p) = parent[cur] {
            up_u.push(p);
            cur = p;
        }
        let mut up_v = vec![v];
        cur = v;
        while let Some(p) = parent[cur] {
            up_v.push(p);
            cur = p;
        }
        // Trim the common tail above the lowest common ancestor.
        let mut i = up_u.len();
        let mut j = up_v.len();
        while i > 1 && j > 1 && up_u[i - 2] == up_v[j - 2] {
            i -= 1;
            j -= 1;
        }
        let mut cycle = up_u[..i].to_vec();
        for k in (0..j - 1).rev() {
            cycle.push(up_v[k]);
        }
        cycle.push(u);
        cycle
    }
}

/// Closed walks used to probe transport path dependence.
#[derive(Debug, Clone)]
pub struct CycleBasis {
    /// Each cycle is a node sequence (v0, v1, ..., vL = v0) with consecutive
    /// nodes adjacent.
    pub cycles: Vec<Vec<usize>>,
}

/// Graph plus node features, class labels, and train/val/test splits.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub graph: Graph,
    /// n x k feature matrix, row per node.
    pub features: Mat,
    /// Class id in 0..num_classes per node.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl LabeledDataset {
    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.graph.n();
        if self.features.rows() != n {
            return Err(GraphError::Dataset(format!(
                "feature rows {} != node count {n}",
                self.features.rows()
            )));
        }
        if self.labels.len() != n {
            return Err(GraphError::Dataset(format!(
                "label count {} != node count {n}",
                self.labels.len()
            )));
        }
        let mut seen = vec![false; self.num_classes];
        for (v, &c) in self.labels.iter().enumerate() {
            if c >= self.num_classes {
                return Err(GraphError::Dataset(format!(
                    "label {c} at node {v} out of range 0..{}",
                    self.num_classes
                )));
            }
            seen[c] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(GraphError::Dataset("some class has no nodes".into()));
        }
        let mut used = vec![false; n];
        for (name, split) in
            [("train", &self.train), ("val", &self.val), ("test", &self.test)]
        {
            for &v in split.iter() {
                if v >= n {
                    return Err(GraphError::Dataset(format!(
                        "{name} split id {v} out of range"
                    )));
                }
                if used[v] {
                    return Err(GraphError::Dataset(format!(
                        "node {v} appears in more than one split"
                    )));
                }
                used[v] = true;
            }
        }
        Ok(())
    }

    /// Fraction of edges whose endpoints share a class.
    pub fn edge_homophily(&self) -> f64 {
        let m = self.graph.m();
        if m == 0 {
            return 0.0;
        }
        let intra = self
            .graph
            .edges()
            .iter()
            .filter(|&&(u, v)| self.labels[u] == self.labels[v])
            .count();
        intra as f64 / m as f64
    }
}

/// Reads an edge-list file: optional "n <count>" header, one "u v" pair per
/// line, '#' starts a comment. Without a header, n = max id + 1.
pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Graph, GraphError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| GraphError::Io { path: path.display().to_string(), source })?;
    parse_edge_list(&text, &path.display().to_string())
}

fn parse_edge_list(text: &str, path: &str) -> Result<Graph, GraphError> {
    let mut n: Option<usize> = None;
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut max_id = 0usize;
    let mut saw_node = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| GraphError::Parse {
            path: path.to_string(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "n" {
            if fields.len() != 2 || n.is_some() {
                return Err(parse_err("malformed header, expected \"n <count>\"".into()));
            }
            n = Some(
                fields[1]
                    .parse()
                    .map_err(|_| parse_err(format!("bad node count {:?}", fields[1])))?,
            );
            continue;
        }
        if fields.len() != 2 {
            return Err(parse_err(format!("expected \"u v\", got {line:?}")));
        }
        let u: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad node id {:?}", fields[0])))?;
        let v: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad node id {:?}", fields[1])))?;
        if u == v {
            return Err(GraphError::SelfLoop(u));
        }
        max_id = max_id.max(u).max(v);
        saw_node = true;
        edges.push((u, v));
    }
    let n = n.unwrap_or(if saw_node { max_id + 1 } else { 0 });
    Graph::new(n, &edges)
}

/// Loads a dataset directory: edges.txt, features.csv (headerless, row per
/// node), labels.csv (one integer per line), train.idx / val.idx / test.idx
/// (one node id per line; val.idx may be empty or absent).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset, GraphError> {
    let dir = dir.as_ref();
    let graph = load_edge_list(dir.join("edges.txt"))?;
    let n = graph.n();

    let feat_path = dir.join("features.csv");
    let feat_text = std::fs::read_to_string(&feat_path)
        .map_err(|source| GraphError::Io { path: feat_path.display().to_string(), source })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in feat_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| GraphError::Parse {
            path: feat_path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    if rows.len() != n {
        return Err(GraphError::Dataset(format!(
            "feature rows {} != node count {n}",
            rows.len()
        )));
    }
    let k = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != k) {
        return Err(GraphError::Dataset("ragged feature rows".into()));
    }
    let features = Mat::from_rows(&rows);

    let label_path = dir.join("labels.csv");
    let label_text = std::fs::read_to_string(&label_path)
        .map_err(|source| GraphError::Io { path: label_path.display().to_string(), source })?;
    let mut labels = Vec::new();
    for (lineno, line) in label_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse::<usize>().map_err(|e| GraphError::Parse {
            path: label_path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    let num_classes = labels.iter().max().map_or(0, |&c| c + 1);

    let read_split = |name: &str, required: bool| -> Result<Vec<usize>, GraphError> {
        let p = dir.join(name);
        if !p.exists() && !required {
            return Ok(vec![]);
        }
        let text = std::fs::read_to_string(&p)
            .map_err(|source| GraphError::Io { path: p.display().to_string(), source })?;
        let mut ids = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            ids.push(line.parse::<usize>().map_err(|e| GraphError::Parse {
                path: p.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(ids)
    };

    let ds = LabeledDataset {
        graph,
        features,
        labels,
        num_classes,
        train: read_split("train.idx", true)?,
        val: read_split("val.idx", false)?,
        test: read_split("test.idx", true)?,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset in the layout `load_dataset` reads.
pub fn save_dataset(ds: &LabeledDataset, dir: impl AsRef<Path>) -> std::io::Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut edges = format!("n {}\n", ds.graph.n());
    for &(u, v) in ds.graph.edges() {
        edges.push_str(&format!("{u} {v}\n"));
    }
    std::fs::write(dir.join("edges.txt"), edges)?;
    let mut feats = String::new();
    for i in 0..ds.features.rows() {
        let row: Vec<String> = ds.features.row(i).iter().map(|x| format!("{x:?}")).collect();
        feats.push_str(&row.join(","));
        feats.push('\n');
    }
    std::fs::write(dir.join("features.csv"), feats)?;
    let labels: String = ds.labels.iter().map(|c| format!("{c}\n")).collect();
    std::fs::write(dir.join("labels.csv"), labels)?;
    for (name, split) in [("train.idx", &ds.train), ("val.idx", &ds.val), ("test.idx", &ds.test)]
    {
        let text: String = split.iter().map(|v| format!("{v}\n")).collect();
        std::fs::write(dir.join(name), text)?;
    }
    Ok(())
}

/// Stratified 80/20 train/test split (val left empty), deterministic under
/// the RNG state.
fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..num_classes {
        let mut members: Vec<usize> =
            (0..labels.len()).filter(|&v| labels[v] == c).collect();
        members.shuffle(rng);
        // Test share is 20% rounded down, but at least 1 when the class has
        // more than one node.
        let n_test = if members.len() > 1 { (members.len() / 5).max(1) } else { 0 };
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

const CONNECT_RETRIES: usize = 32;

/// Connected bipartite graph with partition classes and overlapping
/// isotropic Gaussian features (2-D, class means `mean_sep` apart).
/// Edges are sampled independently with probability `p`; if the result is
/// disconnected, a random perfect matching between the partitions is added,
/// and the whole draw is retried a bounded number of times if that still
/// fails.
pub fn synth_bipartite(
    n_a: usize,
    n_b: usize,
    p: f64,
    mean_sep: f64,
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset, GraphError> {
    assert!(n_a >= 1 && n_b >= 1, "partitions must be nonempty");
    assert!(p > 0.0 && p <= 1.0, "edge probability must be in (0, 1]");
    assert!(sigma > 0.0, "sigma must be positive");
    let n = n_a + n_b;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = None;
    for _ in 0..CONNECT_RETRIES {
        let mut edges = Vec::new();
        for a in 0..n_a {
            for b in 0..n_b {
                if rng.gen::<f64>() < p {
                    edges.push((a, n_a + b));
                }
            }
        }
        let g = Graph::new(n, &edges).expect("bipartite pairs are valid");
        if g.is_connected() {
            graph = Some(g);
            break;
        }
        let mut perm: Vec<usize> = (0..n_b).collect();
        perm.shuffle(&mut rng);
        for (a, &b) in perm.iter().enumerate().take(n_a.min(n_b)) {
            edges.push((a, n_a + b));
        }
        let g = Graph::new(n, &edges).expect("bipartite pairs are valid");
        if g.is_connected() {
            graph = Some(g);
            break;
        }
    }
    let graph = graph.ok_or_else(|| {
        GraphError::Generator(format!("could not connect bipartite graph with p = {p}"))
    })?;

    let labels: Vec<usize> = (0..n).map(|v| usize::from(v >= n_a)).collect();
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    let mut features = Mat::zeros(n, 2);
    for v in 0..n {
        let mean_x = if labels[v] == 0 { -mean_sep / 2.0 } else { mean_sep / 2.0 };
        features[(v, 0)] = mean_x + normal.sample(&mut rng);
        features[(v, 1)] = normal.sample(&mut rng);
    }
    let (train, test) = stratified_split(&labels, 2, &mut rng);
    let ds = LabeledDataset {
        graph,
        features,
        labels,
        num_classes: 2,
        train,
        val: vec![],
        test,
    };
    ds.validate()?;
    Ok(ds)
}

/// Connected graph with a target edge-homophily level h (fraction of
/// intra-class edges), asserted within +-0.05, plus Gaussian class features.
/// Average degree is 4 (m = 2n). Construction: a connectivity skeleton of
/// per-class spanning trees joined by C-1 inter-class edges, then quota
/// sampling of the remaining intra/inter edges.
pub fn synth_multiclass(
    n: usize,
    num_classes: usize,
    h: f64,
    feat_dim: usize,
    seed: u64,
) -> Result<LabeledDataset, GraphError> {
    assert!(num_classes >= 2 && num_classes <= n, "need 2 <= C <= n");
    assert!((0.0..=1.0).contains(&h), "homophily must be in [0, 1]");
    assert!(feat_dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|v| v % num_classes).collect();
    let m_target = 2 * n;
    let m_intra_target = (h * m_target as f64).round() as usize;

    let mut result = None;
    for _ in 0..CONNECT_RETRIES {
        if let Some(edges) =
            sample_homophily_edges(n, &labels, m_target, m_intra_target, &mut rng)
        {
            let g = Graph::new(n, &edges).expect("generator emits valid pairs");
            let intra = edges.iter().filter(|&&(u, v)| labels[u] == labels[v]).count();
            let measured = intra as f64 / edges.len() as f64;
            if g.is_connected() && (measured - h).abs() <= 0.05 {
                result = Some(g);
                break;
            }
        }
    }
    let graph = result.ok_or_else(|| {
        GraphError::Generator(format!(
            "homophily {h} infeasible for n = {n}, C = {num_classes}"
        ))
    })?;

    // Class means evenly spaced at radius 2 (random orientation), sigma = 1.
    // Even spacing keeps the pairwise class separation identical across seeds;
    // independently drawn directions can nearly collide in low dimensions and
    // make a pair of classes unlearnable for any model.
    let normal = Normal::new(0.0, 1.0).expect("unit sigma");
    let mut means = Mat::zeros(num_classes, feat_dim);
    if feat_dim == 1 {
        for c in 0..num_classes {
            means[(c, 0)] = -2.0 + 4.0 * c as f64 / (num_classes - 1) as f64;
        }
    } else {
        let offset = rng.gen::<f64>() * std::f64::consts::TAU;
        for c in 0..num_classes {
            let theta = offset + std::f64::consts::TAU * c as f64 / num_classes as f64;
            means[(c, 0)] = 2.0 * theta.cos();
            means[(c, 1)] = 2.0 * theta.sin();
        }
    }
    let mut features = Mat::zeros(n, feat_dim);
    for v in 0..n {
        for j in 0..feat_dim {
            features[(v, j)] = means[(labels[v], j)] + normal.sample(&mut rng);
        }
    }
    let (train, test) = stratified_split(&labels, num_classes, &mut rng);
    let ds = LabeledDataset {
        graph,
        features,
        labels,
        num_classes,
        train,
        val: vec![],
        test,
    };
    ds.validate()?;
    Ok(ds)
}

// One attempt at a connected homophily-controlled edge set; returns None if
// the quotas cannot be met.
fn sample_homophily_edges(
    n: usize,
    labels: &[usize],
    m_target: usize,
    m_intra_target: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(usize, usize)>> {
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut intra = 0usize;
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    let target_rate = m_intra_target as f64 / m_target as f64;

    // Skeleton: grow one spanning tree, picking each new node's parent from
    // its own class at the target intra rate when possible so the tree does
    // not blow the quota by itself.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut in_tree: Vec<usize> = vec![order[0]];
    for &v in order.iter().skip(1) {
        let same: Vec<usize> =
            in_tree.iter().copied().filter(|&u| labels[u] == labels[v]).collect();
        let diff: Vec<usize> =
            in_tree.iter().copied().filter(|&u| labels[u] != labels[v]).collect();
        let pick_same = if same.is_empty() {
            false
        } else if diff.is_empty() {
            true
        } else {
            rng.gen::<f64>() < target_rate
        };
        let pool = if pick_same { &same } else { &diff };
        let parent = pool[rng.gen_range(0..pool.len())];
        edges.insert(key(parent, v));
        if pick_same {
            intra += 1;
        }
        in_tree.push(v);
    }

    // Quota fill from shuffled candidate pools.
    let mut intra_pool = Vec::new();
    let mut inter_pool = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if edges.contains(&(u, v)) {
                continue;
            }
            if labels[u] == labels[v] {
                intra_pool.push((u, v));
            } else {
                inter_pool.push((u, v));
            }
        }
    }
    intra_pool.shuffle(rng);
    inter_pool.shuffle(rng);
    let m_skeleton = edges.len();
    if m_target < m_skeleton {
        return None;
    }
    let want_intra = m_intra_target.saturating_sub(intra);
    let have_intra = want_intra.min(intra_pool.len());
    for &e in intra_pool.iter().take(have_intra) {
        edges.insert(e);
    }
    let want_inter = m_target.saturating_sub(edges.len());
    if want_inter > inter_pool.len() {
        return None;
    }
    for &e in inter_pool.iter().take(want_inter) {
        edges.insert(e);
    }
    Some(edges.into_iter().collect())
}

/// Path graph 0-1-2-...-(n-1).
pub fn path_graph(n: usize) -> Graph {
    let edges: Vec<(usize, usize)> = (1..n).map(|v| (v - 1, v)).collect();
    Graph::new(n, &edges).expect("path edges are valid")
}

/// Cycle graph on n >= 3 nodes.
pub fn cycle_graph(n: usize) -> Graph {
    assert!(n >= 3);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (v - 1, v)).collect();
    edges.push((n - 1, 0));
    Graph::new(n, &edges).expect("cycle edges are valid")
}

/// Complete graph on n nodes.
pub fn complete_graph(n: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            edges.push((u, v));
        }
    }
    Graph::new(n, &edges).expect("complete edges are valid")
}

/// Connected Erdos-Renyi graph; resamples until connected.
pub fn random_connected_graph(n: usize, p: f64, seed: u64) -> Result<Graph, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..CONNECT_RETRIES {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.gen::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
        let g = Graph::new(n, &edges).expect("pairs valid");
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(GraphError::Generator(format!("could not connect G({n}, {p})")))
}

/// Random tree on n nodes (each node i > 0 attaches to a uniform earlier
/// node).
pub fn random_tree(n: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(usize, usize)> =
        (1..n).map(|v| (rng.gen_range(0..v), v)).collect();
    Graph::new(n, &edges).expect("tree edges are valid")
}

/// Circulant k-regular graph: node v connects to v +- 1, ..., v +- k/2 (mod
/// n), plus the antipodal chord when k is odd (requires even n).
pub fn regular_graph(n: usize, k: usize) -> Result<Graph, GraphError> {
    if k >= n {
        return Err(GraphError::Generator(format!("degree {k} >= n = {n}")));
    }
    if k % 2 == 1 && n % 2 == 1 {
        return Err(GraphError::Generator(format!(
            "odd degree {k} needs an even node count, got {n}"
        )));
    }
    let mut edges = Vec::new();
    for v in 0..n {
        for off in 1..=(k / 2) {
            edges.push((v, (v + off) % n));
        }
    }
    if k % 2 == 1 {
        for v in 0..n / 2 {
            edges.push((v, v + n / 2));
        }
    }
    let g = Graph::new(n, &edges).expect("circulant pairs valid");
    for v in 0..n {
        if g.degree(v) != k {
            return Err(GraphError::Generator(format!(
                "circulant construction gave degree {} at node {v}, wanted {k}",
                g.degree(v)
            )));
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_list_minimal() {
        let g = parse_edge_list("n 2\n0 1", "test").unwrap();
        assert_eq!(g.n(), 2);
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn edge_list_dedups_reversed() {
        let g = parse_edge_list("n 3\n0 1\n1 0", "test").unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn edge_list_rejects_self_loop() {
        assert!(matches!(parse_edge_list("2 2", "test"), Err(GraphError::SelfLoop(2))));
    }

    #[test]
    fn edge_list_comments_and_inference() {
        let g = parse_edge_list("# toy\n0 1 # edge\n1 2\n", "test").unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.m(), 2);
    }

    #[test]
    fn edge_list_id_out_of_range() {
        assert!(matches!(
            parse_edge_list("n 2\n0 5", "test"),
            Err(GraphError::IdOutOfRange { id: 5, n: 2 })
        ));
    }

    #[test]
    fn diameter_known_graphs() {
        assert_eq!(path_graph(3).diameter().unwrap(), 2);
        assert_eq!(complete_graph(4).diameter().unwrap(), 1);
        assert_eq!(cycle_graph(6).diameter().unwrap(), 3);
        for n in 2..=10 {
            assert_eq!(path_graph(n).diameter().unwrap(), n - 1);
        }
    }

    #[test]
    fn diameter_rejects_disconnected() {
        let g = Graph::new(3, &[(0, 1)]).unwrap();
        assert!(matches!(g.diameter(), Err(GraphError::Disconnected)));
    }

    #[test]
    fn fundamental_cycles_counts() {
        assert!(path_graph(5).fundamental_cycles().unwrap().cycles.is_empty());
        let tri = cycle_graph(3).fundamental_cycles().unwrap();
        assert_eq!(tri.cycles.len(), 1);
        assert_eq!(tri.cycles[0].len(), 4);
        let k4 = complete_graph(4).fundamental_cycles().unwrap();
        assert_eq!(k4.cycles.len(), 3);
        for g in [cycle_graph(7), complete_graph(5), random_connected_graph(9, 0.4, 5).unwrap()]
        {
            let basis = g.fundamental_cycles().unwrap();
            assert_eq!(basis.cycles.len(), g.m() - g.n() + 1);
            for cycle in &basis.cycles {
                assert_eq!(cycle.first(), cycle.last());
                for w in cycle.windows(2) {
                    assert!(g.has_edge(w[0], w[1]), "cycle step {w:?} not an edge");
                }
            }
        }
    }

    #[test]
    fn bipartite_minimal_and_deterministic() {
        let ds = synth_bipartite(1, 1, 1.0, 1.0, 1.0, 0).unwrap();
        assert_eq!(ds.graph.n(), 2);
        assert_eq!(ds.graph.m(), 1);
        assert_eq!(ds.num_classes, 2);

        let a = synth_bipartite(20, 20, 0.3, 1.0, 1.0, 42).unwrap();
        let b = synth_bipartite(20, 20, 0.3, 1.0, 1.0, 42).unwrap();
        assert!(a.graph.is_connected());
        assert_eq!(a.graph.edges(), b.graph.edges());
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.train, b.train);
        // Bipartite: no intra-partition edges.
        assert_eq!(a.edge_homophily(), 0.0);
        // 80/20 split proportions per class.
        assert_eq!(a.train.len(), 32);
        assert_eq!(a.test.len(), 8);
    }

    #[test]
    fn multiclass_homophily_within_tolerance() {
        for (h, seed) in [(0.2, 1u64), (0.5, 2), (0.8, 3)] {
            let ds = synth_multiclass(30, 3, h, 2, seed).unwrap();
            assert!(ds.graph.is_connected());
            assert!(
                (ds.edge_homophily() - h).abs() <= 0.05,
                "measured {} target {h}",
                ds.edge_homophily()
            );
        }
    }

    #[test]
    fn multiclass_all_intra_two_classes() {
        // h = 1.0 is feasible up to the single bridge the skeleton needs.
        let ds = synth_multiclass(40, 2, 1.0, 2, 9).unwrap();
        assert!(ds.edge_homophily() >= 0.95);
        assert!(ds.graph.is_connected());
    }

    #[test]
    fn dataset_roundtrip_and_validation() {
        let ds = synth_multiclass(20, 2, 0.5, 3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.graph.edges(), ds.graph.edges());
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.train, ds.train);
        assert_eq!(loaded.features.data(), ds.features.data());

        // Overlapping splits must be rejected.
        std::fs::write(dir.path().join("val.idx"), format!("{}\n", ds.train[0])).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn dataset_missing_labels_errors() {
        let ds = synth_multiclass(12, 2, 0.5, 2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("labels.csv")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn regular_graph_degrees() {
        let g = regular_graph(10, 3).unwrap();
        assert!(g.is_connected());
        assert!((0..10).all(|v| g.degree(v) == 3));
        let g = regular_graph(9, 4).unwrap();
        assert!((0..9).all(|v| g.degree(v) == 4));
        assert!(regular_graph(9, 3).is_err());
    }
}
