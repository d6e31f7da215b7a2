//! Constructive sheaves with provable diffusion-limit behavior: homophily
//! weightings, signed two-class sheaves, stacked diagonal one-vs-all
//! sheaves, orthogonal class bundles (rotation and quaternion sets), the
//! energy-increase witness, and the scalar-sheaf impossibility probe.

use thiserror::Error;

use crate::diffusion::{linear_probe, DiffusionError, ProbeConfig};
use crate::graph::{Graph, GraphError};
use crate::laplacian::LaplacianError;
use crate::linalg::{LinalgError, Mat};
use crate::sheaf::{rotation2, EdgeMaps, MapFamily, Sheaf, SheafError};
use crate::spectral::{
    harmonic_space, project_harmonic, sym_normalized_laplacian, CheckReport, SpectralError,
    KERNEL_TOL,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("expected {expected} classes, got {got}")]
    ClassCount { expected: usize, got: usize },
    #[error("class {0} has no nodes")]
    EmptyClass(usize),
    #[error("label {label} of node {node} is outside 0..{num_classes}")]
    LabelRange {
        node: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("labels cover {got} nodes, graph has {expected}")]
    LabelLength { expected: usize, got: usize },
    #[error("graph must be connected")]
    Disconnected,
    #[error("node {0} is in class 0 but has no same-class neighbor")]
    NoIntraClassNeighbor(usize),
    #[error("alpha must exceed 1, got {0}")]
    AlphaRange(f64),
    #[error("edge weight {value} at edge {edge} must be positive")]
    EdgeWeight { edge: usize, value: f64 },
    #[error("{got} edge weights supplied, graph has {expected} edges")]
    EdgeWeightCount { expected: usize, got: usize },
    #[error("stalk dimension {d} is below the class count {c}")]
    DimBelowClassCount { d: usize, c: usize },
    #[error("orthogonal class sets exist only for d in {{2, 4}}, got {0}")]
    UnsupportedDim(usize),
    #[error("{c} classes exceed the {max} matrices of the d={d} class set")]
    TooManyClasses { c: usize, max: usize, d: usize },
    #[error("class-set matrices fail the structure conditions: {0}")]
    RotationSetInvalid(String),
    #[error("graph is not regular (degrees {0} and {1} differ)")]
    NotRegular(usize, usize),
    #[error("graph has no edges")]
    NoEdges,
    #[error("witness needs stalk dimension >= 2, got {0}")]
    WitnessDim(usize),
    #[error("probe requires a scalar sheaf (d = 1), got d = {0}")]
    RequiresScalar(usize),
    #[error(transparent)]
    Sheaf(#[from] SheafError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Laplacian(#[from] LaplacianError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// A per-node class labeling with every class nonempty.
#[derive(Debug, Clone)]
pub struct ClassAssignment {
    labels: Vec<usize>,
    num_classes: usize,
}

impl ClassAssignment {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<ClassAssignment, OracleError> {
        let mut counts = vec![0usize; num_classes];
        for (node, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(OracleError::LabelRange {
                    node,
                    label,
                    num_classes,
                });
            }
            counts[label] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(OracleError::EmptyClass(empty));
        }
        Ok(ClassAssignment {
            labels,
            num_classes,
        })
    }

    /// Infers the class count as `max label + 1`.
    pub fn from_labels(labels: Vec<usize>) -> Result<ClassAssignment, OracleError> {
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        ClassAssignment::new(labels, num_classes)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_of(&self, v: usize) -> usize {
        self.labels[v]
    }

    fn check_graph(&self, g: &Graph) -> Result<(), OracleError> {
        if self.labels.len() != g.n() {
            return Err(OracleError::LabelLength {
                expected: g.n(),
                got: self.labels.len(),
            });
        }
        Ok(())
    }

    fn require_classes(&self, expected: usize) -> Result<(), OracleError> {
        if self.num_classes != expected {
            return Err(OracleError::ClassCount {
                expected,
                got: self.num_classes,
            });
        }
        Ok(())
    }
}

fn require_connected(g: &Graph) -> Result<(), OracleError> {
    if !g.is_connected() {
        return Err(OracleError::Disconnected);
    }
    Ok(())
}

/// Symmetric scalar sheaf that overweights intra-class-0 edges: both
/// restriction maps are `sqrt(alpha)` on edges inside class 0 and `1`
/// elsewhere. For large `alpha` the harmonic projection of generic features
/// separates class 0 (value `sqrt(d_v + h_v (alpha - 1))`, `h_v` the
/// same-class neighbor count) from class 1 (value `sqrt(d_v)`).
///
/// Every class-0 node must have a class-0 neighbor, otherwise its harmonic
/// value stays at the class-1 scale and no weighting can move it.
pub fn homophily_sym_sheaf(
    g: &Graph,
    cls: &ClassAssignment,
    alpha: f64,
) -> Result<Sheaf, OracleError> {
    cls.check_graph(g)?;
    cls.require_classes(2)?;
    require_connected(g)?;
    if !(alpha > 1.0) {
        return Err(OracleError::AlphaRange(alpha));
    }
    for v in 0..g.n() {
        if cls.class_of(v) == 0 && !g.neighbors(v).iter().any(|&u| cls.class_of(u) == 0) {
            return Err(OracleError::NoIntraClassNeighbor(v));
        }
    }
    let root_alpha = alpha.sqrt();
    let maps = g
        .edges()
        .iter()
        .map(|&(u, v)| {
            let w = if cls.class_of(u) == 0 && cls.class_of(v) == 0 {
                root_alpha
            } else {
                1.0
            };
            EdgeMaps {
                fu: Mat::from_vec(1, 1, vec![w]),
                fv: Mat::from_vec(1, 1, vec![w]),
            }
        })
        .collect();
    Ok(Sheaf::new(g.clone(), 1, MapFamily::Scalar, maps)?)
}

/// Signed scalar sheaf separating two classes: the restriction map is
/// `-sqrt(alpha_e)` on class-0 endpoints and `+sqrt(alpha_e)` on class-1
/// endpoints, so intra-class transport is `+1` and inter-class transport is
/// `-1`. The harmonic vector is `+sqrt(sum of incident alpha_e)` on one
/// class and the negative of that form on the other.
pub fn signed_two_class_sheaf(
    g: &Graph,
    cls: &ClassAssignment,
    alpha_e: &[f64],
) -> Result<Sheaf, OracleError> {
    cls.check_graph(g)?;
    cls.require_classes(2)?;
    require_connected(g)?;
    if alpha_e.len() != g.m() {
        return Err(OracleError::EdgeWeightCount {
            expected: g.m(),
            got: alpha_e.len(),
        });
    }
    if let Some((edge, &value)) = alpha_e.iter().enumerate().find(|(_, &a)| !(a > 0.0)) {
        return Err(OracleError::EdgeWeight { edge, value });
    }
    let side = |v: usize, a: f64| -> f64 {
        if cls.class_of(v) == 0 {
            -a.sqrt()
        } else {
            a.sqrt()
        }
    };
    let maps = g
        .edges()
        .iter()
        .zip(alpha_e.iter())
        .map(|(&(u, v), &a)| EdgeMaps {
            fu: Mat::from_vec(1, 1, vec![side(u, a)]),
            fv: Mat::from_vec(1, 1, vec![side(v, a)]),
        })
        .collect();
    Ok(Sheaf::new(g.clone(), 1, MapFamily::Scalar, maps)?)
}

/// Diagonal sheaf of dimension `d >= C` whose channel `i < C` is the
/// unit-weight signed sheaf for class `i` against the rest; channels at `C`
/// and above are `+1` (identity), keeping every map invertible.
pub fn diagonal_multiclass_sheaf(
    g: &Graph,
    cls: &ClassAssignment,
    d: usize,
) -> Result<Sheaf, OracleError> {
    cls.check_graph(g)?;
    require_connected(g)?;
    let c = cls.num_classes();
    if d < c {
        return Err(OracleError::DimBelowClassCount { d, c });
    }
    let channel_sign = |v: usize, i: usize| -> f64 {
        if i < c && cls.class_of(v) == i {
            -1.0
        } else {
            1.0
        }
    };
    let maps = g
        .edges()
        .iter()
        .map(|&(u, v)| {
            let fu = Mat::diag(&(0..d).map(|i| channel_sign(u, i)).collect::<Vec<_>>());
            let fv = Mat::diag(&(0..d).map(|i| channel_sign(v, i)).collect::<Vec<_>>());
            EdgeMaps { fu, fv }
        })
        .collect();
    Ok(Sheaf::new(g.clone(), d, MapFamily::Diagonal, maps)?)
}

/// The class matrices available in dimension `d`: the identity, `d - 1`
/// mutually anticommuting zero-diagonal skew rotations, and all their
/// negatives — `2d` matrices in total. These exist exactly for d = 2
/// (planar rotations) and d = 4 (the unit quaternions as real matrices).
#[derive(Debug, Clone)]
pub struct RotationSet {
    d: usize,
    base: Vec<Mat>,
    signed: Vec<Mat>,
}

impl RotationSet {
    pub fn new(d: usize) -> Result<RotationSet, OracleError> {
        let base: Vec<Mat> = match d {
            2 => vec![
                Mat::eye(2),
                Mat::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]),
            ],
            4 => vec![
                Mat::eye(4),
                Mat::from_rows(&[
                    vec![0.0, -1.0, 0.0, 0.0],
                    vec![1.0, 0.0, 0.0, 0.0],
                    vec![0.0, 0.0, 0.0, -1.0],
                    vec![0.0, 0.0, 1.0, 0.0],
                ]),
                Mat::from_rows(&[
                    vec![0.0, 0.0, -1.0, 0.0],
                    vec![0.0, 0.0, 0.0, 1.0],
                    vec![1.0, 0.0, 0.0, 0.0],
                    vec![0.0, -1.0, 0.0, 0.0],
                ]),
                Mat::from_rows(&[
                    vec![0.0, 0.0, 0.0, -1.0],
                    vec![0.0, 0.0, -1.0, 0.0],
                    vec![0.0, 1.0, 0.0, 0.0],
                    vec![1.0, 0.0, 0.0, 0.0],
                ]),
            ],
            other => return Err(OracleError::UnsupportedDim(other)),
        };
        let mut signed = base.clone();
        signed.extend(base.iter().map(|m| m.scale(-1.0)));
        let set = RotationSet { d, base, signed };
        set.validate()?;
        Ok(set)
    }

    /// Structure conditions on the base matrices: (1) the first is the
    /// identity; (2) the rest have zero diagonal; (3) the rest are
    /// skew-symmetric with square `-I`; (4) distinct products have zero
    /// diagonal; (5) distinct products are skew and anticommute. Together
    /// these make `A^T B` zero-diagonal skew for any two matrices of the
    /// set that are not equal or opposite, which is what puts the class
    /// projections at right angles.
    pub fn validate(&self) -> Result<(), OracleError> {
        let d = self.d;
        let fail = |msg: String| Err(OracleError::RotationSetInvalid(msg));
        let eye = Mat::eye(d);
        if self.base[0].sub(&eye).max_abs() > 1e-14 {
            return fail("first matrix is not the identity".to_string());
        }
        for (k, m) in self.base.iter().enumerate().skip(1) {
            if (0..d).any(|i| m[(i, i)].abs() > 1e-14) {
                return fail(format!("matrix {k} has a nonzero diagonal entry"));
            }
            if m.transpose().add(m).max_abs() > 1e-14 {
                return fail(format!("matrix {k} is not skew-symmetric"));
            }
            if m.matmul(m).add(&eye).max_abs() > 1e-14 {
                return fail(format!("matrix {k} does not square to -I"));
            }
        }
        for k in 1..self.base.len() {
            for l in 1..self.base.len() {
                if k == l {
                    continue;
                }
                let prod = self.base[k].matmul(&self.base[l]);
                if (0..d).any(|i| prod[(i, i)].abs() > 1e-14) {
                    return fail(format!("product {k}*{l} has a nonzero diagonal entry"));
                }
                if prod.transpose().add(&prod).max_abs() > 1e-14 {
                    return fail(format!("product {k}*{l} is not skew-symmetric"));
                }
                if prod.add(&self.base[l].matmul(&self.base[k])).max_abs() > 1e-14 {
                    return fail(format!("matrices {k} and {l} do not anticommute"));
                }
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// All `2d` signed matrices, ordered `R_1..R_d, -R_1..-R_d`, so classes
    /// `i` and `i + d` are assigned opposite matrices.
    pub fn matrices(&self) -> &[Mat] {
        &self.signed
    }

    pub fn class_matrix(&self, class: usize) -> &Mat {
        &self.signed[class]
    }
}

/// Orthogonal bundle whose transport between classes `a` and `b` is
/// `O_a O_b^T` for class matrices from the d-dimensional [`RotationSet`]:
/// every restriction map is the potential `F_{v <| e} = O_{c(v)}^T`, which
/// makes the transport path-independent by construction and supports up to
/// `2d` classes.
pub fn orth_bundle_sheaf(g: &Graph, cls: &ClassAssignment, d: usize) -> Result<Sheaf, OracleError> {
    cls.check_graph(g)?;
    require_connected(g)?;
    let set = RotationSet::new(d)?;
    if cls.num_classes() > 2 * d {
        return Err(OracleError::TooManyClasses {
            c: cls.num_classes(),
            max: 2 * d,
            d,
        });
    }
    let potentials: Vec<Mat> = (0..g.n())
        .map(|v| set.class_matrix(cls.class_of(v)).transpose())
        .collect();
    let maps = g
        .edges()
        .iter()
        .map(|&(u, v)| EdgeMaps {
            fu: potentials[u].clone(),
            fv: potentials[v].clone(),
        })
        .collect();
    Ok(Sheaf::new(g.clone(), d, MapFamily::Orthogonal, maps)?)
}

/// Planar rotation bundle on a regular graph: class `i` is assigned the
/// rotation by `i * 2 pi / C` in potential form, so transported class
/// features of classes `i` and `j` sit at angle `(i - j) * 2 pi / C`.
pub fn regular_rotation_sheaf(g: &Graph, cls: &ClassAssignment) -> Result<Sheaf, OracleError> {
    cls.check_graph(g)?;
    require_connected(g)?;
    let k = g.degree(0);
    for v in 1..g.n() {
        if g.degree(v) != k {
            return Err(OracleError::NotRegular(k, g.degree(v)));
        }
    }
    let theta = 2.0 * std::f64::consts::PI / cls.num_classes() as f64;
    let potentials: Vec<Mat> = (0..g.n())
        .map(|v| rotation2(cls.class_of(v) as f64 * theta).transpose())
        .collect();
    let maps = g
        .edges()
        .iter()
        .map(|&(u, v)| EdgeMaps {
            fu: potentials[u].clone(),
            fv: potentials[v].clone(),
        })
        .collect();
    Ok(Sheaf::new(g.clone(), 2, MapFamily::Orthogonal, maps)?)
}

/// A sheaf, weight matrix and harmonic signal demonstrating that one
/// asymmetric edge lets an arbitrarily small channel-mixing weight create
/// Dirichlet energy from a zero-energy signal.
#[derive(Debug, Clone)]
pub struct EnergyWitness {
    pub sheaf: Sheaf,
    /// `d x d` weight with spectral norm `eps * (1 - 1e-6)`.
    pub w1: Mat,
    /// Harmonic signal, one stalk column scaled by `sqrt(degree)`.
    pub x: Mat,
}

/// Builds the witness on the lexicographically first edge `(u0, v0)`: all
/// restriction maps are the identity except `F_{v0 <| e} = diag(1,..,1,-1)`,
/// whose transport fixes the first `d - 1` coordinates and flips the last.
/// The signal `x_v = sqrt(d_v) e_1` is harmonic; the weight
/// `W_1 = eps' e_d e_1^T` (with `eps' = eps (1 - 1e-6)`) moves the signal
/// onto the flipped coordinate, where the twisted edge charges it with
/// energy `4 eps'^2 > 0`.
pub fn energy_increase_witness(
    g: &Graph,
    d: usize,
    eps: f64,
) -> Result<EnergyWitness, OracleError> {
    require_connected(g)?;
    if g.m() == 0 {
        return Err(OracleError::NoEdges);
    }
    if d < 2 {
        return Err(OracleError::WitnessDim(d));
    }
    let mut reflection = Mat::eye(d);
    reflection[(d - 1, d - 1)] = -1.0;
    let maps = g
        .edges()
        .iter()
        .enumerate()
        .map(|(k, _)| EdgeMaps {
            fu: Mat::eye(d),
            fv: if k == 0 {
                reflection.clone()
            } else {
                Mat::eye(d)
            },
        })
        .collect();
    let sheaf = Sheaf::new(g.clone(), d, MapFamily::Orthogonal, maps)?;

    let eps_eff = eps * (1.0 - 1e-6);
    let mut w1 = Mat::zeros(d, d);
    w1[(d - 1, 0)] = eps_eff;

    let mut x = Mat::zeros(g.n() * d, 1);
    for v in 0..g.n() {
        x[(v * d, 0)] = (g.degree(v) as f64).sqrt();
    }
    Ok(EnergyWitness { sheaf, w1, x })
}

/// What the diffusion limit of a scalar sheaf can linearly separate:
/// probe accuracy on harmonically projected features, plus the
/// one-dimensional interval geometry of the harmonic values per class.
#[derive(Debug, Clone)]
pub struct SeparationProbe {
    /// Probe accuracy trained and evaluated on all nodes — the most any
    /// linear readout of the diffusion limit can achieve.
    pub accuracy: f64,
    pub harmonic_dim: usize,
    /// Some class has a projected value inside the convex hull of the
    /// other classes' values, so that class cannot be linearly separated.
    pub hull_violation: bool,
    /// All classes occupy disjoint value intervals.
    pub separable: bool,
}

impl SeparationProbe {
    /// Report asserting the probe stays at or below `accuracy_cap`.
    pub fn check_report(&self, accuracy_cap: f64) -> CheckReport {
        CheckReport {
            prop: "linear_separation".to_string(),
            inputs: serde_json::json!({
                "harmonic_dim": self.harmonic_dim,
                "hull_violation": self.hull_violation,
                "separable": self.separable,
            }),
            lhs: self.accuracy,
            rhs: accuracy_cap,
            holds: self.accuracy <= accuracy_cap,
            tolerance: 0.0,
        }
    }
}

/// Scales every row of `x` to unit Euclidean norm; rows below machine
/// scale are left untouched.
fn row_directions(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let norm: f64 = (0..x.cols()).map(|c| x[(r, c)] * x[(r, c)]).sum::<f64>().sqrt();
        if norm > 1e-300 {
            for c in 0..x.cols() {
                out[(r, c)] /= norm;
            }
        }
    }
    out
}

/// Projects the features onto the harmonic space of the scalar sheaf's
/// symmetric Laplacian and measures what remains separable: the linear
/// probe's accuracy and the per-class interval geometry of the (at most
/// one-dimensional) harmonic coordinate.
///
/// The probe reads each node's projected feature *direction* (rows scaled
/// to unit norm). Linear separation in the diffusion limit is a statement
/// about where the limiting features point; per-node magnitudes carry
/// degree scaling, which would otherwise leak into the accuracy on
/// irregular graphs.
pub fn impossibility_probe(
    s: &Sheaf,
    cls: &ClassAssignment,
    x: &Mat,
) -> Result<SeparationProbe, OracleError> {
    if s.d() != 1 {
        return Err(OracleError::RequiresScalar(s.d()));
    }
    cls.check_graph(s.graph())?;
    let delta = sym_normalized_laplacian(s)?;
    let h = harmonic_space(&delta.matrix, KERNEL_TOL)?;
    let projected = project_harmonic(&h, x);

    let all: Vec<usize> = (0..s.graph().n()).collect();
    let acc = linear_probe(
        &row_directions(&projected),
        cls.labels(),
        cls.num_classes(),
        &all,
        &[],
        &ProbeConfig::default(),
    )?;

    // Per-node harmonic coordinate: the kernel is at most one-dimensional
    // for a scalar sheaf, so class geometry reduces to value intervals.
    let values: Vec<f64> = if h.dim() == 0 {
        vec![0.0; s.graph().n()]
    } else {
        (0..s.graph().n()).map(|v| h.basis()[(v, 0)]).collect()
    };
    let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - values.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * spread.max(1e-30);
    let mut hull_violation = false;
    for c in 0..cls.num_classes() {
        let mut lo_other = f64::INFINITY;
        let mut hi_other = f64::NEG_INFINITY;
        for v in 0..values.len() {
            if cls.class_of(v) != c {
                lo_other = lo_other.min(values[v]);
                hi_other = hi_other.max(values[v]);
            }
        }
        let inside = (0..values.len()).any(|v| {
            cls.class_of(v) == c
                && values[v] >= lo_other - tol
                && values[v] <= hi_other + tol
        });
        if inside {
            hull_violation = true;
            break;
        }
    }
    Ok(SeparationProbe {
        accuracy: acc.train,
        harmonic_dim: h.dim(),
        hull_violation,
        separable: !hull_violation,
    })
}
