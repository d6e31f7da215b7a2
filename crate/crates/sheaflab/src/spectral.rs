//! Spectral analysis of sheaf Laplacians: dense eigendecomposition,
//! harmonic (kernel) spaces, Dirichlet energy, and the numerical checkers
//! for the spectral-gap and harmonic-dimension statements.

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::graph::GraphError;
use crate::laplacian::{
    assemble, normalize, BlockMatrix, LaplacianError, NormalizationKind, Normalized, DENSE_CAP,
};
use crate::linalg::{self, LinalgError, Mat};
use crate::sheaf::{MapFamily, Sheaf, SheafError};

/// Absolute eigenvalue threshold separating the kernel of a Sym-normalized
/// operator from near-kernel directions; the spectrum is O(1)-scaled, so an
/// absolute cut is meaningful.
pub const KERNEL_TOL: f64 = 1e-7;

/// Node-count cap for the exhaustive closed-walk enumeration.
pub const ENUM_NODE_CAP: usize = 8;

/// Basis-cycle deviation below which a sheaf is treated as path-independent.
pub const PATH_INDEPENDENT_TOL: f64 = 1e-6;

/// Closed walks whose transport is within this Frobenius distance of the
/// identity are treated as exact identities.
pub const IDENTITY_WALK_TOL: f64 = 1e-12;

/// Additive slack for the gap upper-bound check.
pub const GAP_UPPER_SLACK: f64 = 1e-8;

/// Additive slack for the gap lower-bound check.
pub const GAP_LOWER_SLACK: f64 = 1e-10;

/// Relative tolerance between the quadratic-form and edge-sum Dirichlet
/// energies; disagreement signals an assembly bug.
pub const ENERGY_DUAL_TOL: f64 = 1e-9;

/// Largest principal angle allowed between the closed-form harmonic basis
/// and the numeric kernel.
pub const CLOSED_FORM_ANGLE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("graph must be connected")]
    Disconnected,
    #[error("operator dimension {dim} exceeds the dense eigensolver cap {cap}")]
    DenseCap { dim: usize, cap: usize },
    #[error("checker requires an orthogonal bundle, got family `{0}`")]
    RequiresOrthogonal(&'static str),
    #[error("exhaustive cycle enumeration is capped at n <= {cap}, got n = {n}")]
    SizeCap { n: usize, cap: usize },
    #[error("sheaf is path-dependent (basis cycle deviation {r_hat:.3e})")]
    PathDependent { r_hat: f64 },
    #[error(
        "quadratic-form energy {quadratic:.17e} and edge-sum energy {edge_sum:.17e} \
         disagree beyond {ENERGY_DUAL_TOL:.1e} relative"
    )]
    EnergyMismatch { quadratic: f64, edge_sum: f64 },
    #[error(
        "closed-form harmonic basis misses the numeric kernel \
         (worst principal angle {angle:.3e} rad, numeric dimension {numeric_dim})"
    )]
    SubspaceMismatch { angle: f64, numeric_dim: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Laplacian(#[from] LaplacianError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sheaf(#[from] SheafError),
}

/// A checker outcome in the shape every verification report shares.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub prop: String,
    pub inputs: serde_json::Value,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub tolerance: f64,
}

/// Full eigendecomposition of a symmetric operator, eigenvalues ascending,
/// eigenvector columns orthonormal. Validated on construction.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    eigenvalues: Vec<f64>,
    eigenvectors: Mat,
}

impl EigenDecomposition {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &Mat {
        &self.eigenvectors
    }

    /// The smallest eigenvalue (the spectral gap for a normalized Laplacian
    /// with trivial kernel, zero otherwise).
    pub fn smallest(&self) -> f64 {
        self.eigenvalues[0]
    }
}

/// Dense symmetric eigendecomposition. The input must be symmetric within
/// 1e-10 and no larger than the dense cap; the decomposition is validated
/// (residuals <= 1e-8 * max(1, |lambda|_max), orthonormality <= 1e-8)
/// before it is returned.
pub fn eigh(m: &Mat) -> Result<EigenDecomposition, SpectralError> {
    if m.rows() > DENSE_CAP {
        return Err(SpectralError::DenseCap {
            dim: m.rows(),
            cap: DENSE_CAP,
        });
    }
    let eig = linalg::eigh(m)?;
    eig.validate(m)?;
    Ok(EigenDecomposition {
        eigenvalues: eig.values,
        eigenvectors: eig.vectors,
    })
}

/// An orthonormal basis of the numeric kernel of a PSD operator.
#[derive(Debug, Clone)]
pub struct HarmonicSpace {
    basis: Mat,
    tol: f64,
}

impl HarmonicSpace {
    pub fn basis(&self) -> &Mat {
        &self.basis
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// Kernel dimension.
    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn from_basis(basis: Mat, tol: f64) -> HarmonicSpace {
        HarmonicSpace { basis, tol }
    }
}

/// Eigenvectors of `delta` with eigenvalue at most `tol`.
pub fn harmonic_space(delta: &BlockMatrix, tol: f64) -> Result<HarmonicSpace, SpectralError> {
    let dense = delta.to_dense()?;
    let eig = eigh(&dense)?;
    let h = eig.eigenvalues.iter().take_while(|&&l| l <= tol).count();
    let basis = eig.eigenvectors.block(0, 0, dense.rows(), h);
    Ok(HarmonicSpace { basis, tol })
}

/// Assembles the sheaf Laplacian and Sym-normalizes it.
pub fn sym_normalized_laplacian(s: &Sheaf) -> Result<Normalized, SpectralError> {
    Ok(normalize(&assemble(s), NormalizationKind::Sym)?)
}

/// Dirichlet energy `trace(X^T Delta X)`. The edge-sum form
/// `sum_e ||F_{v <| e} S_v x_v - F_{u <| e} S_u x_u||^2` (with `S` the
/// normalization scalers; equivalently half the sum over both edge
/// orientations) is evaluated alongside and the two must agree to 1e-9
/// relative — disagreement signals a Laplacian assembly bug and is an error.
pub fn dirichlet_energy(s: &Sheaf, delta: &Normalized, x: &Mat) -> Result<f64, SpectralError> {
    let dim = delta.matrix.dim();
    if x.rows() != dim {
        return Err(SpectralError::Shape(format!(
            "signal has {} rows, operator dimension is {}",
            x.rows(),
            dim
        )));
    }
    let quadratic = x.frob_dot(&delta.matrix.matmat(x)?);

    let d = s.d();
    let g = s.graph();
    let f = x.cols();
    let scaled: Vec<Mat> = (0..g.n())
        .map(|v| delta.scalers[v].matmul(&x.block(v * d, 0, d, f)))
        .collect();
    let mut edge_sum = 0.0;
    for (k, &(u, v)) in g.edges().iter().enumerate() {
        let em = &s.maps()[k];
        let diff = em.fu.matmul(&scaled[u]).sub(&em.fv.matmul(&scaled[v]));
        edge_sum += diff.frob_norm().powi(2);
    }

    let scale = quadratic.abs().max(edge_sum.abs()).max(1.0);
    if (quadratic - edge_sum).abs() > ENERGY_DUAL_TOL * scale {
        return Err(SpectralError::EnergyMismatch {
            quadratic,
            edge_sum,
        });
    }
    Ok(quadratic)
}

/// `max over nonzero eigenvalues of (lambda - 1)^2`: the contraction factor
/// of one diffusion step on the non-harmonic part of the spectrum. Kernel
/// eigenvalues (at most [`KERNEL_TOL`]) carry no energy on either side of
/// the contraction bound and do not contribute.
pub fn lambda_star(eigenvalues: &[f64]) -> f64 {
    eigenvalues
        .iter()
        .filter(|&&l| l > KERNEL_TOL)
        .map(|&l| (l - 1.0).powi(2))
        .fold(0.0, f64::max)
}

/// Orthogonal projection of `x` onto the harmonic space: `B B^T x`.
pub fn project_harmonic(h: &HarmonicSpace, x: &Mat) -> Mat {
    let b = h.basis();
    b.matmul(&b.transpose().matmul(x))
}

/// Extreme singular values of `P - I` over the exhaustively enumerated
/// closed walks.
#[derive(Debug, Clone, Copy)]
pub struct WalkDeviationStats {
    /// Largest singular value over all walks (0 on trees).
    pub r_hat: f64,
    /// Smallest singular value over non-identity walks (0 when every walk
    /// transports as the identity).
    pub eps_hat: f64,
    /// Number of closed walks inspected.
    pub walks: usize,
}

/// Per-walk extreme singular values of `P - I` for orthogonal `P`, read off
/// the symmetric matrix `S = 2I - P - P^T = (P - I)^T (P - I)`.
fn deviation_extremes(p: &Mat) -> Result<(f64, f64, f64), SpectralError> {
    let d = p.rows();
    if d == 1 {
        let s = (p[(0, 0)] - 1.0).abs();
        return Ok((s, s, s));
    }
    let mut s = Mat::zeros(d, d);
    let mut trace = 0.0;
    for i in 0..d {
        for j in 0..d {
            s[(i, j)] = -(p[(i, j)] + p[(j, i)]);
        }
        s[(i, i)] += 2.0;
        trace += s[(i, i)];
    }
    let frob = trace.max(0.0).sqrt();
    if d == 2 {
        // Closed-form eigenvalues of the symmetric 2x2 `S`.
        let mean = (s[(0, 0)] + s[(1, 1)]) / 2.0;
        let disc = ((s[(0, 0)] - s[(1, 1)]) / 2.0).hypot(s[(0, 1)]);
        let lo = (mean - disc).max(0.0);
        let hi = (mean + disc).max(0.0);
        return Ok((hi.sqrt(), lo.sqrt(), frob));
    }
    let eig = linalg::eigh(&s)?;
    let lo = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let hi = eig.values.last().copied().unwrap_or(0.0).max(0.0);
    Ok((hi.sqrt(), lo.sqrt(), frob))
}

/// Exhaustively enumerates the cyclically-non-backtracking closed walks of
/// length 3..=2n, one base point (the walk's minimum vertex) and one
/// direction (first neighbor smaller than last) per cyclic class, and folds
/// the extreme singular values of `P - I` over them.
///
/// This multiset of transports represents every closed walk: backtracking
/// hop pairs of an orthogonal bundle cancel exactly, and rotating the base
/// point or reversing direction changes the transport by an orthogonal
/// conjugation or a transpose, neither of which moves singular values.
/// Walks whose transport is the identity within [`IDENTITY_WALK_TOL`]
/// contribute nothing to `r_hat` and are excluded from `eps_hat`.
pub fn walk_deviation_stats(s: &Sheaf) -> Result<WalkDeviationStats, SpectralError> {
    let g = s.graph();
    let n = g.n();
    if n > ENUM_NODE_CAP {
        return Err(SpectralError::SizeCap {
            n,
            cap: ENUM_NODE_CAP,
        });
    }
    let d = s.d();
    let max_len = 2 * n;

    // hops[a][k] transports along the directed edge a -> neighbors(a)[k].
    let mut hops: Vec<Vec<Mat>> = Vec::with_capacity(n);
    for a in 0..n {
        let mut row = Vec::with_capacity(g.degree(a));
        for &b in g.neighbors(a) {
            row.push(s.hop(a, b)?);
        }
        hops.push(row);
    }

    struct Frame {
        node: usize,
        prev: usize,
        next: usize,
    }

    let mut r_hat = 0.0_f64;
    let mut eps_hat = f64::INFINITY;
    let mut walks = 0usize;
    // trans[k] holds the transport of the first k hops of the current walk.
    let mut trans: Vec<Mat> = (0..=max_len).map(|_| Mat::eye(d)).collect();

    for base in 0..n {
        for (k1, &w1) in g.neighbors(base).iter().enumerate() {
            if w1 < base {
                continue;
            }
            trans[1] = hops[base][k1].clone();
            let mut stack = vec![Frame {
                node: w1,
                prev: base,
                next: 0,
            }];
            loop {
                let k = stack.len();
                if k == 0 {
                    break;
                }
                let mut child: Option<Frame> = None;
                {
                    let top = stack.last_mut().expect("non-empty stack");
                    let node = top.node;
                    let prev = top.prev;
                    while top.next < g.neighbors(node).len() {
                        let idx = top.next;
                        top.next += 1;
                        let w = g.neighbors(node)[idx];
                        if w < base || w == prev || k + 1 > max_len - 1 {
                            continue;
                        }
                        trans[k + 1] = hops[node][idx].matmul(&trans[k]);
                        // Close the walk base,...,node,w with the hop w -> base.
                        if k + 1 >= 2 && w1 < w && w != base && node != base {
                            if let Some(pos) = g.neighbors(w).iter().position(|&x| x == base) {
                                let p = hops[w][pos].matmul(&trans[k + 1]);
                                let (hi, lo, frob) = deviation_extremes(&p)?;
                                walks += 1;
                                if frob > IDENTITY_WALK_TOL {
                                    r_hat = r_hat.max(hi);
                                    eps_hat = eps_hat.min(lo);
                                }
                            }
                        }
                        if k + 1 <= max_len - 2 {
                            child = Some(Frame {
                                node: w,
                                prev: node,
                                next: 0,
                            });
                            break;
                        }
                    }
                }
                match child {
                    Some(frame) => stack.push(frame),
                    None => {
                        stack.pop();
                    }
                }
            }
        }
    }

    Ok(WalkDeviationStats {
        r_hat,
        eps_hat: if eps_hat.is_finite() { eps_hat } else { 0.0 },
        walks,
    })
}

fn require_connected_bundle(s: &Sheaf) -> Result<(), SpectralError> {
    if s.family() != MapFamily::Orthogonal {
        return Err(SpectralError::RequiresOrthogonal(s.family().as_str()));
    }
    if !s.graph().is_connected() {
        return Err(SpectralError::Disconnected);
    }
    Ok(())
}

fn sheaf_inputs(s: &Sheaf) -> serde_json::Value {
    json!({
        "n": s.graph().n(),
        "m": s.graph().m(),
        "d": s.d(),
        "family": s.family().as_str(),
    })
}

/// Outcome of the gap upper-bound check `lambda_0 <= r_hat^2 / 2`.
#[derive(Debug, Clone)]
pub struct GapUpperReport {
    pub lambda0: f64,
    pub r_hat: f64,
    /// Whether `r_hat` came from the exhaustive walk enumeration (n <= 8)
    /// or from the fundamental cycle basis (a lower bound on the true
    /// deviation radius, so a failed check is informative only at n <= 8).
    pub exhaustive: bool,
    pub walks: usize,
    pub holds: bool,
    inputs: serde_json::Value,
}

impl GapUpperReport {
    pub fn check_report(&self) -> CheckReport {
        CheckReport {
            prop: "gap_upper".to_string(),
            inputs: self.inputs.clone(),
            lhs: self.lambda0,
            rhs: self.r_hat * self.r_hat / 2.0,
            holds: self.holds,
            tolerance: GAP_UPPER_SLACK,
        }
    }
}

/// Checks `lambda_0 <= r_hat^2 / 2 + 1e-8` on a connected orthogonal
/// bundle. For n <= 8 the deviation radius is exhaustive over closed walks
/// up to length 2n (which covers every composite cycle of two shortest
/// paths plus one edge); above that the fundamental-basis radius is used.
pub fn check_gap_upper(s: &Sheaf) -> Result<GapUpperReport, SpectralError> {
    require_connected_bundle(s)?;
    let g = s.graph();
    let delta = sym_normalized_laplacian(s)?;
    let lambda0 = eigh(&delta.matrix.to_dense()?)?.smallest();
    let (r_hat, exhaustive, walks) = if g.n() <= ENUM_NODE_CAP {
        let stats = walk_deviation_stats(s)?;
        (stats.r_hat, true, stats.walks)
    } else {
        let radius = s.path_dependence_radius(&g.fundamental_cycles()?)?;
        (radius, false, 0)
    };
    let holds = lambda0 <= r_hat * r_hat / 2.0 + GAP_UPPER_SLACK;
    let mut inputs = sheaf_inputs(s);
    inputs["exhaustive"] = json!(exhaustive);
    inputs["walks"] = json!(walks);
    inputs["r_hat"] = json!(r_hat);
    Ok(GapUpperReport {
        lambda0,
        r_hat,
        exhaustive,
        walks,
        holds,
        inputs,
    })
}

/// Outcome of the gap lower-bound check
/// `lambda_0 >= eps_hat^2 / (2 diam n d_max)`.
#[derive(Debug, Clone)]
pub struct GapLowerReport {
    pub lambda0: f64,
    pub eps_hat: f64,
    pub bound: f64,
    pub holds: bool,
    inputs: serde_json::Value,
}

impl GapLowerReport {
    pub fn check_report(&self) -> CheckReport {
        CheckReport {
            prop: "gap_lower".to_string(),
            inputs: self.inputs.clone(),
            lhs: self.lambda0,
            rhs: self.bound,
            holds: self.holds,
            tolerance: GAP_LOWER_SLACK,
        }
    }
}

/// Checks `lambda_0 >= eps_hat^2 / (2 diam n d_max) - 1e-10` on a connected
/// orthogonal bundle with n <= 8, where `eps_hat` is the smallest singular
/// value of `P - I` over the enumerated non-identity closed walks (every
/// unit vector is moved at least that far by every such walk).
pub fn check_gap_lower(s: &Sheaf) -> Result<GapLowerReport, SpectralError> {
    require_connected_bundle(s)?;
    let g = s.graph();
    if g.n() > ENUM_NODE_CAP {
        return Err(SpectralError::SizeCap {
            n: g.n(),
            cap: ENUM_NODE_CAP,
        });
    }
    let delta = sym_normalized_laplacian(s)?;
    let lambda0 = eigh(&delta.matrix.to_dense()?)?.smallest();
    let stats = walk_deviation_stats(s)?;
    let diam = g.diameter()? as f64;
    let denom = 2.0 * diam * g.n() as f64 * g.max_degree() as f64;
    let bound = if denom > 0.0 {
        stats.eps_hat * stats.eps_hat / denom
    } else {
        0.0
    };
    let holds = lambda0 >= bound - GAP_LOWER_SLACK;
    let mut inputs = sheaf_inputs(s);
    inputs["diam"] = json!(diam as usize);
    inputs["d_max"] = json!(g.max_degree());
    inputs["walks"] = json!(stats.walks);
    inputs["eps_hat"] = json!(stats.eps_hat);
    Ok(GapLowerReport {
        lambda0,
        eps_hat: stats.eps_hat,
        bound,
        holds,
        inputs,
    })
}

/// Outcome of the harmonic-dimension check: `h <= d`, with equality exactly
/// for path-independent transport.
#[derive(Debug, Clone)]
pub struct HarmonicDimReport {
    pub h: usize,
    pub d: usize,
    pub r_hat: f64,
    pub path_independent: bool,
    pub holds: bool,
    inputs: serde_json::Value,
}

impl HarmonicDimReport {
    pub fn check_report(&self) -> CheckReport {
        CheckReport {
            prop: "harmonic_dimension".to_string(),
            inputs: self.inputs.clone(),
            lhs: self.h as f64,
            rhs: self.d as f64,
            holds: self.holds,
            tolerance: PATH_INDEPENDENT_TOL,
        }
    }
}

/// Checks `dim H^0 <= d` and `dim H^0 = d` exactly when the fundamental
/// basis radius vanishes, on a connected orthogonal bundle.
pub fn check_harmonic_dim(s: &Sheaf) -> Result<HarmonicDimReport, SpectralError> {
    require_connected_bundle(s)?;
    let g = s.graph();
    let delta = sym_normalized_laplacian(s)?;
    let h = harmonic_space(&delta.matrix, KERNEL_TOL)?.dim();
    let r_hat = s.path_dependence_radius(&g.fundamental_cycles()?)?;
    let path_independent = r_hat <= PATH_INDEPENDENT_TOL;
    let holds = h <= s.d() && ((h == s.d()) == path_independent);
    let mut inputs = sheaf_inputs(s);
    inputs["r_hat"] = json!(r_hat);
    Ok(HarmonicDimReport {
        h,
        d: s.d(),
        r_hat,
        path_independent,
        holds,
        inputs,
    })
}

/// Largest deviation `sigma_max(P - I)` over the fundamental cycle basis,
/// for any map family (transports of non-orthogonal invertible maps are
/// formed with explicit inverses).
fn basis_cycle_deviation(s: &Sheaf) -> Result<f64, SpectralError> {
    let basis = s.graph().fundamental_cycles()?;
    let mut worst = 0.0_f64;
    for cycle in &basis.cycles {
        let p = s.transport(cycle)?.matrix;
        let dev = linalg::singular_values(&p.sub(&Mat::eye(s.d())))?
            .first()
            .copied()
            .unwrap_or(0.0);
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// Closed-form harmonic basis of a path-independent sheaf whose restriction
/// maps are (weighted) orthogonal: column i stacks
/// `sqrt(d_v) * P_{v_star -> v} e_i` with `d_v` the total squared edge
/// weight at `v` (the plain degree for an unweighted bundle). The span is
/// verified against the numeric kernel (principal angles <= 1e-6) before
/// the basis is returned.
pub fn bundle_harmonic_closed_form(
    s: &Sheaf,
    v_star: usize,
) -> Result<HarmonicSpace, SpectralError> {
    let g = s.graph();
    if !g.is_connected() {
        return Err(SpectralError::Disconnected);
    }
    let r_hat = basis_cycle_deviation(s)?;
    if r_hat > PATH_INDEPENDENT_TOL {
        return Err(SpectralError::PathDependent { r_hat });
    }
    let d = s.d();
    let n = g.n();

    // Transport from v_star to every node along a breadth-first tree; any
    // path would do since the transport is path-independent.
    let mut transports: Vec<Option<Mat>> = vec![None; n];
    transports[v_star] = Some(Mat::eye(d));
    let mut queue = std::collections::VecDeque::from([v_star]);
    while let Some(u) = queue.pop_front() {
        for &w in g.neighbors(u) {
            if transports[w].is_none() {
                let step = s.hop(u, w)?;
                transports[w] = Some(step.matmul(transports[u].as_ref().unwrap()));
                queue.push_back(w);
            }
        }
    }

    // Total squared edge weight at each node: trace(F^T F)/d per incidence,
    // which is the squared scale of a weighted orthogonal map and reduces
    // to the degree for an unweighted bundle.
    let mut weight = vec![0.0_f64; n];
    for (k, &(u, v)) in g.edges().iter().enumerate() {
        let em = &s.maps()[k];
        weight[u] += em.fu.frob_norm().powi(2) / d as f64;
        weight[v] += em.fv.frob_norm().powi(2) / d as f64;
    }

    let mut basis = Mat::zeros(n * d, d);
    for v in 0..n {
        let t = transports[v].as_ref().expect("connected graph");
        let scale = weight[v].sqrt();
        for i in 0..d {
            for r in 0..d {
                basis[(v * d + r, i)] = scale * t[(r, i)];
            }
        }
    }
    // Columns are mutually orthogonal with a common norm; normalize them.
    let norm = basis.block(0, 0, n * d, 1).frob_norm();
    if norm > 0.0 {
        basis = basis.scale(1.0 / norm);
    }

    let delta = sym_normalized_laplacian(s)?;
    let numeric = harmonic_space(&delta.matrix, KERNEL_TOL)?;
    if numeric.dim() != d {
        return Err(SpectralError::SubspaceMismatch {
            angle: std::f64::consts::FRAC_PI_2,
            numeric_dim: numeric.dim(),
        });
    }
    let angles = linalg::principal_angles(&basis, numeric.basis())?;
    let worst = angles.last().copied().unwrap_or(0.0);
    if worst > CLOSED_FORM_ANGLE_TOL {
        return Err(SpectralError::SubspaceMismatch {
            angle: worst,
            numeric_dim: numeric.dim(),
        });
    }
    Ok(HarmonicSpace {
        basis,
        tol: KERNEL_TOL,
    })
}
