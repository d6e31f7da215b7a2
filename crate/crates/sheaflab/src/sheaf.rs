//! Sheaf data structure: restriction-map families, transport composition,
//! and path-dependence measurement.
//!
//! A sheaf attaches a `d`-dimensional stalk to every node and edge of a
//! graph, plus one restriction map per (node, edge) incidence. Composing
//! restriction maps (inverse on the way out, forward on the way in) along a
//! path yields a transport operator; how much transport depends on the path
//! taken is the quantity the spectral checkers consume.

use crate::graph::{CycleBasis, Graph};
use crate::linalg::{self, LinalgError, Mat};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Condition-number cap when inverting general-family restriction maps.
const TRANSPORT_COND_CAP: f64 = 1e12;
/// Frobenius tolerance for the orthogonality invariant of a restriction map.
const ORTHO_TOL: f64 = 1e-10;
/// A cycle transport direction counts as fixed when its direct residual
/// `‖(P − I)q‖` is at most this.
const FIXED_SPACE_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SheafError {
    #[error("stalk dimension must be at least 1")]
    ZeroDim,
    #[error("expected {want} edge map pairs, got {got}")]
    MapCount { want: usize, got: usize },
    #[error("map at edge ({u},{v}) violates the {family:?} family invariant: {msg}")]
    FamilyInvariant {
        u: usize,
        v: usize,
        family: MapFamily,
        msg: String,
    },
    #[error("path is empty")]
    EmptyPath,
    #[error("path nodes {a} and {b} are not adjacent")]
    NotAdjacent { a: usize, b: usize },
    #[error("cycle must start and end at the same node")]
    OpenPath,
    #[error("operation requires an orthogonal-family sheaf, got {0:?}")]
    RequiresOrthogonal(MapFamily),
    #[error("node {0} out of range for graph with {1} nodes")]
    NodeOutOfRange(usize, usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid sheaf JSON: {0}")]
    Json(String),
}

/// Which structural family every restriction map of a sheaf belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapFamily {
    /// 1x1 maps (d = 1).
    Scalar,
    /// Diagonal d x d maps; off-diagonal entries exactly zero.
    Diagonal,
    /// Orthogonal d x d maps (discrete O(d) bundle).
    Orthogonal,
    /// Arbitrary d x d maps.
    General,
}

impl MapFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            MapFamily::Scalar => "scalar",
            MapFamily::Diagonal => "diagonal",
            MapFamily::Orthogonal => "orthogonal",
            MapFamily::General => "general",
        }
    }

    pub fn parse(s: &str) -> Option<MapFamily> {
        match s {
            "scalar" => Some(MapFamily::Scalar),
            "diagonal" => Some(MapFamily::Diagonal),
            "orthogonal" => Some(MapFamily::Orthogonal),
            "general" => Some(MapFamily::General),
            _ => None,
        }
    }
}

/// The two restriction maps of one edge `(u, v)` with `u < v`:
/// `fu` acts on the stalk of `u`, `fv` on the stalk of `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMaps {
    pub fu: Mat,
    pub fv: Mat,
}

/// Transport operator along a concrete path.
#[derive(Debug, Clone)]
pub struct Transport {
    pub matrix: Mat,
    pub path: Vec<usize>,
}

/// A cellular sheaf over a graph with fixed stalk dimension `d`.
#[derive(Debug, Clone)]
pub struct Sheaf {
    graph: Graph,
    d: usize,
    family: MapFamily,
    maps: Vec<EdgeMaps>,
}

fn check_family(m: &Mat, d: usize, family: MapFamily) -> Result<(), String> {
    if m.rows() != d || m.cols() != d {
        return Err(format!("expected {d}x{d} map, got {}x{}", m.rows(), m.cols()));
    }
    match family {
        MapFamily::Scalar => {
            if d != 1 {
                return Err("scalar family requires d = 1".to_string());
            }
        }
        MapFamily::Diagonal => {
            for i in 0..d {
                for j in 0..d {
                    if i != j && m[(i, j)] != 0.0 {
                        return Err(format!("off-diagonal entry ({i},{j}) is {}", m[(i, j)]));
                    }
                }
            }
        }
        MapFamily::Orthogonal => {
            let dev = m.transpose().matmul(m).sub(&Mat::eye(d)).frob_norm();
            if dev > ORTHO_TOL {
                return Err(format!("‖MᵀM − I‖_F = {dev:.3e} exceeds {ORTHO_TOL:.0e}"));
            }
        }
        MapFamily::General => {}
    }
    Ok(())
}

impl Sheaf {
    /// Builds a sheaf from one `EdgeMaps` pair per graph edge (in the
    /// graph's sorted edge order), validating the family invariants.
    pub fn new(
        graph: Graph,
        d: usize,
        family: MapFamily,
        maps: Vec<EdgeMaps>,
    ) -> Result<Sheaf, SheafError> {
        if d == 0 {
            return Err(SheafError::ZeroDim);
        }
        if maps.len() != graph.m() {
            return Err(SheafError::MapCount {
                want: graph.m(),
                got: maps.len(),
            });
        }
        for (k, em) in maps.iter().enumerate() {
            let (u, v) = graph.edges()[k];
            for (side, m) in [(u, &em.fu), (v, &em.fv)] {
                check_family(m, d, family).map_err(|msg| SheafError::FamilyInvariant {
                    u,
                    v,
                    family,
                    msg: format!("side {side}: {msg}"),
                })?;
            }
        }
        Ok(Sheaf {
            graph,
            d,
            family,
            maps,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn family(&self) -> MapFamily {
        self.family
    }

    pub fn maps(&self) -> &[EdgeMaps] {
        &self.maps
    }

    /// The restriction map of node `node` into edge `edge_idx`.
    pub fn restriction(&self, edge_idx: usize, node: usize) -> &Mat {
        let (u, v) = self.graph.edges()[edge_idx];
        if node == u {
            &self.maps[edge_idx].fu
        } else if node == v {
            &self.maps[edge_idx].fv
        } else {
            panic!("node {node} is not an endpoint of edge {edge_idx}");
        }
    }

    /// One hop of transport from `a` to adjacent `b`:
    /// `ρ_{a→b} = ℱ_{b⊴e}⁻¹ ℱ_{a⊴e}` (transpose as inverse for orthogonal maps).
    pub fn hop(&self, a: usize, b: usize) -> Result<Mat, SheafError> {
        let e = self
            .graph
            .edge_index(a, b)
            .ok_or(SheafError::NotAdjacent { a, b })?;
        let fa = self.restriction(e, a);
        let fb = self.restriction(e, b);
        let fb_inv = match self.family {
            MapFamily::Orthogonal => fb.transpose(),
            _ => linalg::inverse(fb, TRANSPORT_COND_CAP)?,
        };
        Ok(fb_inv.matmul(fa))
    }

    /// Transport along `path` (a node sequence with consecutive nodes
    /// adjacent). A length-0 path `[v]` yields the identity.
    pub fn transport(&self, path: &[usize]) -> Result<Transport, SheafError> {
        if path.is_empty() {
            return Err(SheafError::EmptyPath);
        }
        for &v in path {
            if v >= self.graph.n() {
                return Err(SheafError::NodeOutOfRange(v, self.graph.n()));
            }
        }
        let mut matrix = Mat::eye(self.d);
        for w in path.windows(2) {
            matrix = self.hop(w[0], w[1])?.matmul(&matrix);
        }
        Ok(Transport {
            matrix,
            path: path.to_vec(),
        })
    }

    /// `r̂`: the maximum over the basis cycles of `‖P^γ − I‖₂`. A lower
    /// bound on the full path-dependence radius, zero iff transport is
    /// path-independent over the basis. Orthogonal family only.
    pub fn path_dependence_radius(&self, basis: &CycleBasis) -> Result<f64, SheafError> {
        if self.family != MapFamily::Orthogonal {
            return Err(SheafError::RequiresOrthogonal(self.family));
        }
        let eye = Mat::eye(self.d);
        let mut r = 0.0f64;
        for cycle in &basis.cycles {
            let p = self.transport(cycle)?;
            let dev = p.matrix.sub(&eye);
            let sigma = linalg::singular_values(&dev)?;
            r = r.max(sigma.first().copied().unwrap_or(0.0));
        }
        Ok(r)
    }

    /// Orthonormal basis of `ker(P^γ − I)` for a closed cycle, i.e. the
    /// directions the cycle transport fixes. Columns of the returned matrix.
    pub fn cycle_fixed_space(&self, cycle: &[usize]) -> Result<Mat, SheafError> {
        if self.family != MapFamily::Orthogonal {
            return Err(SheafError::RequiresOrthogonal(self.family));
        }
        if cycle.len() < 2 || cycle.first() != cycle.last() {
            return Err(SheafError::OpenPath);
        }
        let p = self.transport(cycle)?.matrix;
        // For orthogonal P, ker(P − I) = ker(2I − P − Pᵀ); the latter is
        // symmetric PSD by construction, so its eigenvectors are reliable.
        let mut s = Mat::eye(self.d).scale(2.0).sub(&p).sub(&p.transpose());
        s = s.symmetrized();
        let eig = linalg::eigh(&s)?;
        let dev = p.sub(&Mat::eye(self.d));
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for i in 0..self.d {
            let q = eig.vectors.col(i);
            // Judge by the direct residual, which is accurate even when the
            // squared-form eigenvalue drowns in rounding error.
            let mut res = 0.0f64;
            for r in 0..self.d {
                let mut acc = 0.0;
                for c in 0..self.d {
                    acc += dev[(r, c)] * q[c];
                }
                res += acc * acc;
            }
            if res.sqrt() <= FIXED_SPACE_TOL {
                cols.push(q);
            }
        }
        let mut out = Mat::zeros(self.d, cols.len());
        for (j, col) in cols.iter().enumerate() {
            for i in 0..self.d {
                out[(i, j)] = col[i];
            }
        }
        Ok(out)
    }

    /// Serializes to the interchange JSON object
    /// `{d, family, maps: [{edge: [u, v], Fu: [[..]], Fv: [[..]]}]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let maps: Vec<serde_json::Value> = self
            .maps
            .iter()
            .zip(self.graph.edges())
            .map(|(em, &(u, v))| {
                serde_json::json!({
                    "edge": [u, v],
                    "Fu": mat_to_rows(&em.fu),
                    "Fv": mat_to_rows(&em.fv),
                })
            })
            .collect();
        serde_json::json!({
            "d": self.d,
            "family": self.family.as_str(),
            "maps": maps,
        })
    }

    /// Parses the JSON produced by [`Sheaf::to_json`]. The graph is
    /// reconstructed from the edge list (nodes `0..=max id`).
    pub fn from_json(value: &serde_json::Value) -> Result<Sheaf, SheafError> {
        let obj = value
            .as_object()
            .ok_or_else(|| SheafError::Json("expected object".into()))?;
        let d = obj
            .get("d")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| SheafError::Json("missing integer field 'd'".into()))?
            as usize;
        let family_str = obj
            .get("family")
            .and_then(|v| v.as_str())
            .ok_or_else(|| SheafError::Json("missing string field 'family'".into()))?;
        let family = MapFamily::parse(family_str)
            .ok_or_else(|| SheafError::Json(format!("unknown family '{family_str}'")))?;
        let entries = obj
            .get("maps")
            .and_then(|v| v.as_array())
            .ok_or_else(|| SheafError::Json("missing array field 'maps'".into()))?;
        let mut edges = Vec::with_capacity(entries.len());
        let mut parsed = Vec::with_capacity(entries.len());
        for entry in entries {
            let edge = entry
                .get("edge")
                .and_then(|v| v.as_array())
                .ok_or_else(|| SheafError::Json("map entry missing 'edge'".into()))?;
            if edge.len() != 2 {
                return Err(SheafError::Json("'edge' must have two node ids".into()));
            }
            let u = edge[0].as_u64().ok_or_else(|| bad_edge_id())? as usize;
            let v = edge[1].as_u64().ok_or_else(|| bad_edge_id())? as usize;
            let fu = rows_to_mat(entry.get("Fu"), d)?;
            let fv = rows_to_mat(entry.get("Fv"), d)?;
            edges.push((u, v));
            parsed.push((u.min(v), u.max(v), if u < v { (fu, fv) } else { (fv, fu) }));
        }
        let n = edges
            .iter()
            .flat_map(|&(u, v)| [u, v])
            .max()
            .map(|m| m + 1)
            .unwrap_or(0);
        let graph = Graph::new(n, &edges).map_err(|e| SheafError::Json(e.to_string()))?;
        // Align map pairs with the graph's sorted edge order.
        parsed.sort_by_key(|&(u, v, _)| (u, v));
        let maps = parsed
            .into_iter()
            .map(|(_, _, (fu, fv))| EdgeMaps { fu, fv })
            .collect();
        Sheaf::new(graph, d, family, maps)
    }
}

fn bad_edge_id() -> SheafError {
    SheafError::Json("edge ids must be non-negative integers".into())
}

fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn rows_to_mat(value: Option<&serde_json::Value>, d: usize) -> Result<Mat, SheafError> {
    let rows = value
        .and_then(|v| v.as_array())
        .ok_or_else(|| SheafError::Json("map entry missing matrix rows".into()))?;
    if rows.len() != d {
        return Err(SheafError::Json(format!(
            "expected {d} matrix rows, got {}",
            rows.len()
        )));
    }
    let mut m = Mat::zeros(d, d);
    for (i, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| SheafError::Json("matrix row is not an array".into()))?;
        if row.len() != d {
            return Err(SheafError::Json(format!(
                "expected {d} entries per row, got {}",
                row.len()
            )));
        }
        for (j, x) in row.iter().enumerate() {
            m[(i, j)] = x
                .as_f64()
                .ok_or_else(|| SheafError::Json("matrix entry is not a number".into()))?;
        }
    }
    Ok(m)
}

/// Sheaf with every restriction map the identity; its Laplacian is the
/// (block-expanded) graph Laplacian.
pub fn trivial_sheaf(g: &Graph, d: usize) -> Result<Sheaf, SheafError> {
    let maps = (0..g.m())
        .map(|_| EdgeMaps {
            fu: Mat::eye(d),
            fv: Mat::eye(d),
        })
        .collect();
    Sheaf::new(g.clone(), d, MapFamily::Orthogonal, maps)
}

/// Product of Householder reflections `H(v) = I − 2vvᵀ/‖v‖²` applied in
/// listed order; orthogonal with determinant `(−1)^k`.
pub fn householder_orthogonal(vs: &[Vec<f64>], d: usize) -> Result<Mat, SheafError> {
    Ok(linalg::householder_product(vs, d)?)
}

fn random_unit_vectors<R: Rng>(rng: &mut R, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            loop {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    return v;
                }
            }
        })
        .collect()
}

/// Random discrete O(d) bundle: each restriction map is an independent
/// product of `d` random Householder reflections. Deterministic under seed.
pub fn random_bundle(g: &Graph, d: usize, seed: u64) -> Result<Sheaf, SheafError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::with_capacity(g.m());
    for _ in 0..g.m() {
        let fu = householder_orthogonal(&random_unit_vectors(&mut rng, d, d), d)?;
        let fv = householder_orthogonal(&random_unit_vectors(&mut rng, d, d), d)?;
        maps.push(EdgeMaps { fu, fv });
    }
    Sheaf::new(g.clone(), d, MapFamily::Orthogonal, maps)
}

fn random_nonzero_scalar<R: Rng>(rng: &mut R) -> f64 {
    // Magnitude bounded away from zero so the map is comfortably invertible.
    let mag = 0.3 + 1.4 * rng.gen::<f64>();
    if rng.gen::<bool>() {
        mag
    } else {
        -mag
    }
}

/// Random sheaf of the requested family, for test corpora. Scalar and
/// Diagonal maps have entries bounded away from zero (invertible); General
/// maps have standard-normal entries.
pub fn random_sheaf(g: &Graph, d: usize, family: MapFamily, seed: u64) -> Result<Sheaf, SheafError> {
    if family == MapFamily::Orthogonal {
        return random_bundle(g, d, seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Mat {
        match family {
            MapFamily::Scalar => Mat::from_vec(1, 1, vec![random_nonzero_scalar(rng)]),
            MapFamily::Diagonal => {
                let diag: Vec<f64> = (0..d).map(|_| random_nonzero_scalar(rng)).collect();
                Mat::diag(&diag)
            }
            MapFamily::General => {
                Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal))
            }
            MapFamily::Orthogonal => unreachable!(),
        }
    };
    let mut maps = Vec::with_capacity(g.m());
    for _ in 0..g.m() {
        let fu = draw(&mut rng);
        let fv = draw(&mut rng);
        maps.push(EdgeMaps { fu, fv });
    }
    Sheaf::new(g.clone(), d, family, maps)
}

/// 2x2 counterclockwise rotation by `theta`.
pub fn rotation2(theta: f64) -> Mat {
    Mat::from_vec(
        2,
        2,
        vec![theta.cos(), -theta.sin(), theta.sin(), theta.cos()],
    )
}
