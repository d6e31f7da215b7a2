//! Time integration of sheaf diffusion, the sheaf convolution layer, the
//! discrete diffusion layer with per-coordinate residual scaling, energy
//! contraction checkers, and the linear probe readout.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::laplacian::{assemble, normalize, LaplacianError, NormalizationKind, Normalized};
use crate::linalg::{spectral_norm, LinalgError, Mat};
use crate::sheaf::{MapFamily, Sheaf, SheafError};
use crate::spectral::{
    dirichlet_energy, eigh, lambda_star, project_harmonic, sym_normalized_laplacian, CheckReport,
    HarmonicSpace, SpectralError,
};

/// Relative slack allowed on the energy-contraction inequality.
pub const ENERGY_BOUND_SLACK: f64 = 1e-9;
/// Slack on trajectory energy monotonicity before instability is flagged.
pub const MONOTONICITY_SLACK: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("energy rose from {before} to {after} at t = {t}; step size too large")]
    Instability { t: f64, before: f64, after: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("eps component {0} outside [-1, 1]")]
    EpsRange(f64),
    #[error("sheaf is not in a covered family: {0}")]
    FamilyNotCovered(&'static str),
    #[error("energy checker requires ReLU or LeakyReLU")]
    SigmaUnsupported,
    #[error("degenerate probe split: {0}")]
    DegenerateSplit(String),
    #[error("label {label} of node {node} is outside 0..{num_classes}")]
    LabelRange {
        node: usize,
        label: usize,
        num_classes: usize,
    },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Laplacian(#[from] LaplacianError),
    #[error(transparent)]
    Sheaf(#[from] SheafError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Pointwise nonlinearity used by the convolution and diffusion layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    /// Slope applied on the negative half-line.
    LeakyRelu(f64),
    Elu,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Pointwise derivative; at the ReLU kink the subgradient 0 is chosen
    /// so the value is deterministic.
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    fn map(&self, x: &Mat) -> Mat {
        let mut out = x.clone();
        for v in out.data_mut() {
            *v = self.apply(*v);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy)]
pub struct DiffusionConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_max: f64,
    /// Steps between recorded snapshots; the initial and final states are
    /// always recorded.
    pub record_every: usize,
}

impl DiffusionConfig {
    pub fn new(scheme: Scheme, dt: f64, t_max: f64, record_every: usize) -> DiffusionConfig {
        DiffusionConfig {
            scheme,
            dt,
            t_max,
            record_every,
        }
    }

    fn validate(&self, kind: NormalizationKind) -> Result<(), DiffusionError> {
        if !(self.dt > 0.0) {
            return Err(DiffusionError::InvalidConfig(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.t_max >= 0.0) {
            return Err(DiffusionError::InvalidConfig(format!(
                "t_max must be nonnegative, got {}",
                self.t_max
            )));
        }
        if self.record_every == 0 {
            return Err(DiffusionError::InvalidConfig(
                "record_every must be at least 1".to_string(),
            ));
        }
        // The normalized spectrum lies in [0, 2], so explicit Euler needs
        // dt <= 1 to keep |1 - dt*lambda| <= 1.
        if self.scheme == Scheme::Euler
            && kind == NormalizationKind::Sym
            && self.dt > 1.0 + 1e-12
        {
            return Err(DiffusionError::InvalidConfig(format!(
                "Euler with the symmetric normalization needs dt <= 1, got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

/// Recorded diffusion run: snapshot times, states, and their quadratic
/// Dirichlet energies, all of equal length.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Mat>,
    pub energies: Vec<f64>,
}

impl Trajectory {
    pub fn final_state(&self) -> &Mat {
        self.states.last().expect("trajectory has >= 1 snapshot")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has >= 1 snapshot")
    }
}

fn quadratic_energy(delta: &Normalized, x: &Mat) -> Result<f64, DiffusionError> {
    Ok(x.frob_dot(&delta.matrix.matmat(x)?))
}

fn euler_step(delta: &Normalized, x: &Mat, dt: f64) -> Result<Mat, DiffusionError> {
    let ax = delta.matrix.matmat(x)?;
    Ok(x.sub(&ax.scale(dt)))
}

fn rk4_step(delta: &Normalized, x: &Mat, dt: f64) -> Result<Mat, DiffusionError> {
    let f = |y: &Mat| -> Result<Mat, DiffusionError> { Ok(delta.matrix.matmat(y)?.scale(-1.0)) };
    let k1 = f(x)?;
    let k2 = f(&x.add(&k1.scale(dt / 2.0)))?;
    let k3 = f(&x.add(&k2.scale(dt / 2.0)))?;
    let k4 = f(&x.add(&k3.scale(dt)))?;
    let incr = k1
        .add(&k2.scale(2.0))
        .add(&k3.scale(2.0))
        .add(&k4)
        .scale(dt / 6.0);
    Ok(x.add(&incr))
}

/// Integrates `dX/dt = -Delta X` from `X0` to `t_max`, recording snapshots
/// and Dirichlet energies. Energy must be non-increasing along the
/// trajectory (diffusion is a gradient flow); an increase beyond
/// [`MONOTONICITY_SLACK`] aborts with an instability error.
pub fn diffuse(
    delta: &Normalized,
    x0: &Mat,
    cfg: &DiffusionConfig,
) -> Result<Trajectory, DiffusionError> {
    cfg.validate(delta.kind)?;
    if x0.rows() != delta.matrix.dim() {
        return Err(DiffusionError::Shape(format!(
            "state has {} rows, operator has dimension {}",
            x0.rows(),
            delta.matrix.dim()
        )));
    }
    let mut x = x0.clone();
    let mut t = 0.0;
    let mut energy = quadratic_energy(delta, &x)?;
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x.clone()],
        energies: vec![energy],
    };
    let mut step_count = 0usize;
    while t < cfg.t_max - 1e-12 {
        let dt = cfg.dt.min(cfg.t_max - t);
        x = match cfg.scheme {
            Scheme::Euler => euler_step(delta, &x, dt)?,
            Scheme::Rk4 => rk4_step(delta, &x, dt)?,
        };
        t += dt;
        step_count += 1;
        let next_energy = quadratic_energy(delta, &x)?;
        if next_energy > energy + MONOTONICITY_SLACK * energy.abs().max(1.0) {
            return Err(DiffusionError::Instability {
                t,
                before: energy,
                after: next_energy,
            });
        }
        energy = next_energy;
        let last = t >= cfg.t_max - 1e-12;
        if step_count % cfg.record_every == 0 || last {
            traj.times.push(t);
            traj.states.push(x.clone());
            traj.energies.push(energy);
        }
    }
    Ok(traj)
}

/// Relative distance between the diffusion endpoint and the harmonic
/// projection of the initial state:
/// `|X(t_max) - P_H X0|_F / max(1, |X0|_F)`.
pub fn steady_state_error(
    delta: &Normalized,
    x0: &Mat,
    h: &HarmonicSpace,
    cfg: &DiffusionConfig,
) -> Result<f64, DiffusionError> {
    let traj = diffuse(delta, x0, cfg)?;
    let target = project_harmonic(h, x0);
    let err = traj.final_state().sub(&target).frob_norm();
    Ok(err / x0.frob_norm().max(1.0))
}

/// Applies `W1` to every stalk: `Y[v*d..(v+1)*d, :] = W1 * X[v*d.., :]`.
fn stalk_lhs(w1: &Mat, x: &Mat, d: usize) -> Result<Mat, DiffusionError> {
    if w1.rows() != d || w1.cols() != d {
        return Err(DiffusionError::Shape(format!(
            "W1 is {}x{}, expected {d}x{d}",
            w1.rows(),
            w1.cols()
        )));
    }
    if x.rows() % d != 0 {
        return Err(DiffusionError::Shape(format!(
            "state rows {} are not a multiple of the stalk dimension {d}",
            x.rows()
        )));
    }
    let n = x.rows() / d;
    let f = x.cols();
    // Same accumulation order as Mat::matmul per block, without the
    // per-node temporaries.
    let mut out = Mat::zeros(x.rows(), x.cols());
    for v in 0..n {
        for r in 0..d {
            for k in 0..d {
                let a = w1[(r, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..f {
                    out[(v * d + r, j)] += a * x[(v * d + k, j)];
                }
            }
        }
    }
    Ok(out)
}

/// Parameters of the sheaf convolution layer
/// `Y = sigma((I - Delta)(I (x) W1) X W2)`.
#[derive(Debug, Clone)]
pub struct SCNParams {
    pub w1: Mat,
    pub w2: Mat,
    pub sigma: Activation,
}

/// Sheaf convolution forward pass on the symmetric-normalized Laplacian of
/// `s`. With the trivial scalar sheaf this is exactly one step of graph
/// convolution propagation.
pub fn scn_forward(s: &Sheaf, p: &SCNParams, x: &Mat) -> Result<Mat, DiffusionError> {
    let delta = sym_normalized_laplacian(s)?;
    scn_forward_with(&delta, s.d(), p, x)
}

/// Same as [`scn_forward`] with a precomputed normalized Laplacian.
pub fn scn_forward_with(
    delta: &Normalized,
    d: usize,
    p: &SCNParams,
    x: &Mat,
) -> Result<Mat, DiffusionError> {
    if x.rows() != delta.matrix.dim() {
        return Err(DiffusionError::Shape(format!(
            "state has {} rows, operator has dimension {}",
            x.rows(),
            delta.matrix.dim()
        )));
    }
    if p.w2.rows() != x.cols() {
        return Err(DiffusionError::Shape(format!(
            "W2 has {} rows, state has {} channels",
            p.w2.rows(),
            x.cols()
        )));
    }
    let z = stalk_lhs(&p.w1, x, d)?.matmul(&p.w2);
    let propagated = z.sub(&delta.matrix.matmat(&z)?);
    Ok(match p.sigma {
        Activation::Identity => propagated,
        _ => p.sigma.map(&propagated),
    })
}

/// Parameters of one discrete diffusion layer
/// `X' = (1 + eps) (x) X - sigma(Delta (I (x) W1) X W2)` with `eps`
/// broadcast across the stalk dimension.
#[derive(Debug, Clone)]
pub struct NSDLayerParams {
    pub w1: Mat,
    pub w2: Mat,
    /// Per-stalk-coordinate residual scaling, each entry in [-1, 1].
    pub eps: Vec<f64>,
    pub sigma: Activation,
    /// Normalization used for the layer Laplacian; the augmented form
    /// `(D + I)^{-1/2} L (D + I)^{-1/2}` is the default because it exists
    /// for every sheaf.
    pub kind: NormalizationKind,
}

impl NSDLayerParams {
    pub fn new(w1: Mat, w2: Mat, eps: Vec<f64>, sigma: Activation) -> NSDLayerParams {
        NSDLayerParams {
            w1,
            w2,
            eps,
            sigma,
            kind: NormalizationKind::AugSym,
        }
    }
}

/// One discrete sheaf-diffusion layer on the (possibly learned) sheaf
/// `s_t`. With `eps = 0`, identity weights and identity activation this is
/// exactly one explicit Euler step of the diffusion flow, summed in the
/// same order.
pub fn nsd_layer(layer: &NSDLayerParams, s_t: &Sheaf, x: &Mat) -> Result<Mat, DiffusionError> {
    let d = s_t.d();
    if layer.eps.len() != d {
        return Err(DiffusionError::Shape(format!(
            "eps has {} entries, stalk dimension is {d}",
            layer.eps.len()
        )));
    }
    if let Some(&bad) = layer.eps.iter().find(|e| e.abs() > 1.0) {
        return Err(DiffusionError::EpsRange(bad));
    }
    let delta = normalize(&assemble(s_t), layer.kind)?;
    if x.rows() != delta.matrix.dim() {
        return Err(DiffusionError::Shape(format!(
            "state has {} rows, operator has dimension {}",
            x.rows(),
            delta.matrix.dim()
        )));
    }
    if layer.w2.rows() != x.cols() {
        return Err(DiffusionError::Shape(format!(
            "W2 has {} rows, state has {} channels",
            layer.w2.rows(),
            x.cols()
        )));
    }
    let z = stalk_lhs(&layer.w1, x, d)?.matmul(&layer.w2);
    let smoothed = layer.sigma.map(&delta.matrix.matmat(&z)?);
    let mut out = x.clone();
    let n = x.rows() / d;
    for v in 0..n {
        for r in 0..d {
            let scale = 1.0 + layer.eps[r];
            for c in 0..x.cols() {
                out[(v * d + r, c)] = scale * out[(v * d + r, c)] - smoothed[(v * d + r, c)];
            }
        }
    }
    Ok(out)
}

/// Outcome of the energy-contraction check
/// `E(Y) <= lambda* |W1|^2 |W2^T|^2 E(X)`.
#[derive(Debug, Clone)]
pub struct EnergyDecreaseReport {
    pub energy_in: f64,
    pub energy_out: f64,
    pub lambda_star: f64,
    pub w1_norm: f64,
    pub w2t_norm: f64,
    pub bound: f64,
    pub holds: bool,
}

impl EnergyDecreaseReport {
    pub fn check_report(&self) -> CheckReport {
        CheckReport {
            prop: "energy_decrease".to_string(),
            inputs: serde_json::json!({
                "energy_in": self.energy_in,
                "lambda_star": self.lambda_star,
                "w1_norm": self.w1_norm,
                "w2t_norm": self.w2t_norm,
            }),
            lhs: self.energy_out,
            rhs: self.bound,
            holds: self.holds,
            tolerance: ENERGY_BOUND_SLACK,
        }
    }
}

/// Verifies that the sheaf is positive-scalar (`d = 1`, both restriction
/// maps of each edge sharing a sign) or orthogonal-symmetric (orthogonal
/// maps with `F_u = F_v` per edge), the two families for which the energy
/// contraction is a theorem.
fn verify_energy_family(s: &Sheaf) -> Result<(), DiffusionError> {
    let scalar_positive = s.d() == 1
        && s.maps()
            .iter()
            .all(|em| em.fu[(0, 0)] * em.fv[(0, 0)] > 0.0);
    let orth_sym = s.family() == MapFamily::Orthogonal
        && s.maps()
            .iter()
            .all(|em| em.fu.sub(&em.fv).max_abs() <= 1e-12);
    if scalar_positive || orth_sym {
        Ok(())
    } else {
        Err(DiffusionError::FamilyNotCovered(
            "need a positive scalar sheaf or a symmetric orthogonal bundle",
        ))
    }
}

/// Runs the convolution layer and checks the Dirichlet-energy contraction
/// bound with relative slack [`ENERGY_BOUND_SLACK`]. Spectral norms come
/// from power iteration; `lambda*` is the largest factor `(lambda - 1)^2`
/// over nonzero eigenvalues of the normalized Laplacian.
pub fn check_energy_decrease(
    s: &Sheaf,
    p: &SCNParams,
    x: &Mat,
) -> Result<EnergyDecreaseReport, DiffusionError> {
    match p.sigma {
        Activation::Relu | Activation::LeakyRelu(_) => {}
        _ => return Err(DiffusionError::SigmaUnsupported),
    }
    verify_energy_family(s)?;
    let delta = sym_normalized_laplacian(s)?;
    let y = scn_forward_with(&delta, s.d(), p, x)?;
    let energy_in = dirichlet_energy(s, &delta, x)?;
    let energy_out = dirichlet_energy(s, &delta, &y)?;
    let eig = eigh(&delta.matrix.to_dense()?)?;
    let lam = lambda_star(eig.eigenvalues());
    let w1_norm = spectral_norm(&p.w1);
    let w2t_norm = spectral_norm(&p.w2.transpose());
    let bound = lam * w1_norm * w1_norm * w2t_norm * w2t_norm * energy_in;
    let holds = energy_out <= bound * (1.0 + ENERGY_BOUND_SLACK) + f64::EPSILON;
    Ok(EnergyDecreaseReport {
        energy_in,
        energy_out,
        lambda_star: lam,
        w1_norm,
        w2t_norm,
        bound,
        holds,
    })
}

/// Probe hyperparameters: full-batch gradient descent on multinomial
/// logistic regression, deterministic zero initialization.
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> ProbeConfig {
        ProbeConfig {
            iterations: 500,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeAccuracy {
    pub train: f64,
    /// `None` when the test split is empty.
    pub test: Option<f64>,
}

/// Reshapes an `nd x f` signal into `n` rows of `d*f` features (stalk rows
/// concatenated channel-major per node).
pub fn node_features(x: &Mat, d: usize) -> Result<Mat, DiffusionError> {
    if d == 0 || x.rows() % d != 0 {
        return Err(DiffusionError::Shape(format!(
            "state rows {} are not a multiple of the stalk dimension {d}",
            x.rows()
        )));
    }
    let n = x.rows() / d;
    let f = x.cols();
    Ok(Mat::from_fn(n, d * f, |v, j| x[(v * d + j / f, j % f)]))
}

/// Trains a multinomial logistic probe on the rows of `features` indexed
/// by `train` and reports train/test accuracy. Fixed iteration count and
/// learning rate, zero initialization: bitwise deterministic.
pub fn linear_probe(
    features: &Mat,
    labels: &[usize],
    num_classes: usize,
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeAccuracy, DiffusionError> {
    let n = features.rows();
    let dim = features.cols();
    if labels.len() != n {
        return Err(DiffusionError::Shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            n
        )));
    }
    for (node, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(DiffusionError::LabelRange {
                node,
                label,
                num_classes,
            });
        }
    }
    if train.is_empty() {
        return Err(DiffusionError::DegenerateSplit("empty train split".to_string()));
    }
    if let Some(&bad) = train.iter().chain(test.iter()).find(|&&v| v >= n) {
        return Err(DiffusionError::Shape(format!(
            "split index {bad} outside 0..{n}"
        )));
    }
    let first = labels[train[0]];
    if train.iter().all(|&v| labels[v] == first) {
        return Err(DiffusionError::DegenerateSplit(format!(
            "train split contains only class {first}"
        )));
    }

    let mut weights = Mat::zeros(dim, num_classes);
    let mut bias = vec![0.0f64; num_classes];
    let m = train.len() as f64;
    let mut probs = vec![0.0f64; num_classes];
    for _ in 0..cfg.iterations {
        let mut grad_w = Mat::zeros(dim, num_classes);
        let mut grad_b = vec![0.0f64; num_classes];
        for &v in train {
            softmax_row(features, v, &weights, &bias, &mut probs);
            probs[labels[v]] -= 1.0;
            for j in 0..dim {
                let xj = features[(v, j)];
                if xj != 0.0 {
                    for c in 0..num_classes {
                        grad_w[(j, c)] += xj * probs[c];
                    }
                }
            }
            for c in 0..num_classes {
                grad_b[c] += probs[c];
            }
        }
        let step = cfg.learning_rate / m;
        for j in 0..dim {
            for c in 0..num_classes {
                weights[(j, c)] -= step * grad_w[(j, c)];
            }
        }
        for c in 0..num_classes {
            bias[c] -= step * grad_b[c];
        }
    }

    let mut accuracy = |split: &[usize]| -> f64 {
        let mut hits = 0usize;
        for &v in split {
            softmax_row(features, v, &weights, &bias, &mut probs);
            let mut best = 0usize;
            for c in 1..num_classes {
                if probs[c] > probs[best] {
                    best = c;
                }
            }
            if best == labels[v] {
                hits += 1;
            }
        }
        hits as f64 / split.len() as f64
    };
    Ok(ProbeAccuracy {
        train: accuracy(train),
        test: if test.is_empty() {
            None
        } else {
            Some(accuracy(test))
        },
    })
}

fn softmax_row(features: &Mat, v: usize, weights: &Mat, bias: &[f64], out: &mut [f64]) {
    let num_classes = bias.len();
    for (c, slot) in out.iter_mut().enumerate().take(num_classes) {
        let mut logit = bias[c];
        for j in 0..features.cols() {
            logit += features[(v, j)] * weights[(j, c)];
        }
        *slot = logit;
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for slot in out.iter_mut() {
        *slot = (*slot - max).exp();
        sum += *slot;
    }
    for slot in out.iter_mut() {
        *slot /= sum;
    }
}

/// One row of the trajectory summary CSV.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryRow {
    pub t: f64,
    pub dirichlet_energy: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Writes `t,dirichlet_energy,train_acc,test_acc` rows.
pub fn write_trajectory_csv<W: Write>(mut w: W, rows: &[TrajectoryRow]) -> io::Result<()> {
    writeln!(w, "t,dirichlet_energy,train_acc,test_acc")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{}",
            row.t, row.dirichlet_energy, row.train_acc, row.test_acc
        )?;
    }
    Ok(())
}

const SHDF_MAGIC: &[u8; 4] = b"SHDF";

/// Writes a snapshot as binary little-endian f64s behind a 16-byte header
/// (magic "SHDF", then n, d, f as u32 little-endian).
pub fn write_shdf<W: Write>(mut w: W, d: usize, x: &Mat) -> io::Result<()> {
    if d == 0 || x.rows() % d != 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("state rows {} are not a multiple of d = {d}", x.rows()),
        ));
    }
    let n = x.rows() / d;
    w.write_all(SHDF_MAGIC)?;
    for v in [n as u32, d as u32, x.cols() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for value in x.data() {
        w.write_all(&value.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a snapshot written by [`write_shdf`]; returns `(d, X)` with `X`
/// of shape `nd x f`.
pub fn read_shdf<R: Read>(mut r: R) -> io::Result<(usize, Mat)> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[0..4] != SHDF_MAGIC {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "bad magic, expected SHDF",
        ));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (n, d, f) = (word(4), word(8), word(12));
    let mut data = vec![0.0f64; n * d * f];
    let mut buf = [0u8; 8];
    for slot in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *slot = f64::from_le_bytes(buf);
    }
    Ok((d, Mat::from_vec(n * d, f, data)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{path_graph, random_connected_graph};
    use crate::linalg::sym_matfun;
    use crate::sheaf::{random_sheaf, trivial_sheaf};
    use crate::spectral::{harmonic_space, KERNEL_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn euler_unit_step_on_two_path() {
        let s = trivial_sheaf(&path_graph(2), 1).unwrap();
        let delta = sym_normalized_laplacian(&s).unwrap();
        let x0 = Mat::from_vec(2, 1, vec![1.0, 0.0]);
        let cfg = DiffusionConfig::new(Scheme::Euler, 1.0, 1.0, 1);
        let traj = diffuse(&delta, &x0, &cfg).unwrap();
        // (I - Delta) swaps the two entries for the trivial two-path.
        assert_eq!(traj.states[1][(0, 0)], 0.0);
        assert_eq!(traj.states[1][(1, 0)], 1.0);
    }

    #[test]
    fn rk4_matches_matrix_exponential() {
        let g = random_connected_graph(7, 0.4, 5).unwrap();
        let s = trivial_sheaf(&g, 1).unwrap();
        let delta = sym_normalized_laplacian(&s).unwrap();
        let mut r = rng(11);
        let x0 = random_mat(7, 2, &mut r);
        let t = 1.5;
        let cfg = DiffusionConfig::new(Scheme::Rk4, 0.01, t, 1000);
        let traj = diffuse(&delta, &x0, &cfg).unwrap();
        let dense = delta.matrix.to_dense().unwrap();
        let propagator = sym_matfun(&dense, |lam| (-t * lam).exp()).unwrap();
        let oracle = propagator.matmul(&x0);
        let err = traj.final_state().sub(&oracle).max_abs();
        assert!(err <= 1e-6, "rk4 vs expm: {err}");
    }

    #[test]
    fn harmonic_state_stays_fixed() {
        let g = path_graph(3);
        let s = trivial_sheaf(&g, 1).unwrap();
        let delta = sym_normalized_laplacian(&s).unwrap();
        let x0 = Mat::from_vec(3, 1, vec![1.0, 2.0_f64.sqrt(), 1.0]);
        let cfg = DiffusionConfig::new(Scheme::Euler, 1.0, 10.0, 1);
        let traj = diffuse(&delta, &x0, &cfg).unwrap();
        assert!(traj.final_state().sub(&x0).max_abs() <= 1e-12);
        assert!(traj.energies.iter().all(|&e| e.abs() <= 1e-14));
    }

    #[test]
    fn zero_horizon_records_initial_state() {
        let s = trivial_sheaf(&path_graph(2), 1).unwrap();
        let delta = sym_normalized_laplacian(&s).unwrap();
        let x0 = Mat::from_vec(2, 1, vec![0.3, -0.7]);
        let cfg = DiffusionConfig::new(Scheme::Euler, 1.0, 0.0, 1);
        let traj = diffuse(&delta, &x0, &cfg).unwrap();
        assert_eq!(traj.times.len(), 1);
        assert_eq!(traj.final_time(), 0.0);
    }

    #[test]
    fn steady_state_error_reaches_projection() {
        let g = path_graph(3);
        let s = trivial_sheaf(&g, 1).unwrap();
        let delta = sym_normalized_laplacian(&s).unwrap();
        let h = harmonic_space(&delta.matrix, KERNEL_TOL).unwrap();
        let eig = eigh(&delta.matrix.to_dense().unwrap()).unwrap();
        let gap = eig
            .eigenvalues()
            .iter()
            .find(|&&l| l > KERNEL_TOL)
            .copied()
            .unwrap();
        let mut r = rng(2);
        let x0 = random_mat(3, 3, &mut r);
        let cfg = DiffusionConfig::new(Scheme::Rk4, 1.0, 40.0 / gap, 64);
        let err = steady_state_error(&delta, &x0, &h, &cfg).unwrap();
        assert!(err <= 1e-6, "steady-state error {err}");

        // A state orthogonal to the kernel decays to zero.
        let y = eig.eigenvectors();
        let x_perp = Mat::from_fn(3, 1, |i, _| y[(i, 1)] + 0.5 * y[(i, 2)]);
        let traj = diffuse(&delta, &x_perp, &cfg).unwrap();
        assert!(traj.final_state().max_abs() <= 1e-8);
    }

    #[test]
    fn unstable_step_size_is_detected() {
        let s = trivial_sheaf(&path_graph(2), 1).unwrap();
        let l = assemble(&s);
        let delta = normalize(&l, NormalizationKind::AugSym).unwrap();
        let x0 = Mat::from_vec(2, 1, vec![1.0, -1.0]);
        let cfg = DiffusionConfig::new(Scheme::Euler, 3.0, 9.0, 1);
        assert!(matches!(
            diffuse(&delta, &x0, &cfg),
            Err(DiffusionError::Instability { .. })
        ));
        // The symmetric normalization rejects dt > 1 up front.
        let sym = sym_normalized_laplacian(&s).unwrap();
        let bad = DiffusionConfig::new(Scheme::Euler, 1.5, 3.0, 1);
        assert!(matches!(
            diffuse(&sym, &x0, &bad),
            Err(DiffusionError::InvalidConfig(_))
        ));
    }

    #[test]
    fn scn_reduces_to_graph_convolution_on_trivial_sheaf() {
        let g = random_connected_graph(8, 0.4, 3).unwrap();
        let s = trivial_sheaf(&g, 1).unwrap();
        let mut r = rng(7);
        let x = random_mat(8, 3, &mut r);
        let p = SCNParams {
            w1: Mat::eye(1),
            w2: Mat::eye(3),
            sigma: Activation::Identity,
        };
        let y = scn_forward(&s, &p, &x).unwrap();

        // Dense I - D^{-1/2}(D - A)D^{-1/2} propagation.
        let mut prop = Mat::zeros(8, 8);
        for v in 0..8 {
            prop[(v, v)] = 0.0;
        }
        for &(u, v) in g.edges() {
            let w = 1.0 / ((g.degree(u) as f64).sqrt() * (g.degree(v) as f64).sqrt());
            prop[(u, v)] = w;
            prop[(v, u)] = w;
        }
        let oracle = prop.matmul(&x);
        assert!(y.sub(&oracle).max_abs() <= 1e-13);
    }

    #[test]
    fn scn_matches_dense_oracle() {
        let g = random_connected_graph(6, 0.5, 9).unwrap();
        let d = 3;
        let s = random_sheaf(&g, d, MapFamily::General, 21).unwrap();
        let mut r = rng(13);
        let x = random_mat(6 * d, 2, &mut r);
        let p = SCNParams {
            w1: random_mat(d, d, &mut r),
            w2: random_mat(2, 4, &mut r),
            sigma: Activation::Elu,
        };
        let y = scn_forward(&s, &p, &x).unwrap();

        let delta = sym_normalized_laplacian(&s).unwrap();
        let dense = delta.matrix.to_dense().unwrap();
        let mut kron = Mat::zeros(6 * d, 6 * d);
        for v in 0..6 {
            kron.set_block(v * d, v * d, &p.w1);
        }
        let z = kron.matmul(&x).matmul(&p.w2);
        let expect = p
            .sigma
            .map(&z.sub(&dense.matmul(&z)));
        let rel = y.sub(&expect).frob_norm() / expect.frob_norm().max(1e-30);
        assert!(rel <= 1e-12, "relative error {rel}");

        // Zero input stays zero for ReLU/ELU/identity.
        let zero = Mat::zeros(6 * d, 2);
        for sigma in [Activation::Relu, Activation::Elu, Activation::Identity] {
            let p0 = SCNParams {
                w1: p.w1.clone(),
                w2: Mat::eye(2),
                sigma,
            };
            assert_eq!(scn_forward(&s, &p0, &zero).unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn nsd_identity_settings_reproduce_euler_step_bitwise() {
        let g = random_connected_graph(7, 0.4, 15).unwrap();
        let d = 2;
        let s = random_sheaf(&g, d, MapFamily::General, 33).unwrap();
        let mut r = rng(17);
        let x = random_mat(7 * d, 3, &mut r);
        let layer = NSDLayerParams::new(
            Mat::eye(d),
            Mat::eye(3),
            vec![0.0; d],
            Activation::Identity,
        );
        let y = nsd_layer(&layer, &s, &x).unwrap();

        let delta = normalize(&assemble(&s), NormalizationKind::AugSym).unwrap();
        let euler = euler_step(&delta, &x, 1.0).unwrap();
        for (a, b) in y.data().iter().zip(euler.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn nsd_eps_minus_one_is_pure_replacement() {
        let g = path_graph(4);
        let d = 2;
        let s = trivial_sheaf(&g, d).unwrap();
        let mut r = rng(19);
        let x = random_mat(4 * d, 2, &mut r);
        let w1 = random_mat(d, d, &mut r);
        let w2 = random_mat(2, 2, &mut r);
        let layer = NSDLayerParams::new(w1.clone(), w2.clone(), vec![-1.0; d], Activation::Relu);
        let y = nsd_layer(&layer, &s, &x).unwrap();

        let delta = normalize(&assemble(&s), NormalizationKind::AugSym).unwrap();
        let z = stalk_lhs(&w1, &x, d).unwrap().matmul(&w2);
        let expect = Activation::Relu.map(&delta.matrix.matmat(&z).unwrap()).scale(-1.0);
        assert!(y.sub(&expect).max_abs() <= 1e-15);

        let bad = NSDLayerParams::new(Mat::eye(d), Mat::eye(2), vec![1.5, 0.0], Activation::Relu);
        assert!(matches!(
            nsd_layer(&bad, &s, &x),
            Err(DiffusionError::EpsRange(_))
        ));
    }

    fn random_positive_scalar_sheaf(
        g: &crate::graph::Graph,
        rng: &mut ChaCha8Rng,
    ) -> Sheaf {
        let maps = g
            .edges()
            .iter()
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                crate::sheaf::EdgeMaps {
                    fu: Mat::from_vec(1, 1, vec![sign * rng.gen_range(0.3..2.0)]),
                    fv: Mat::from_vec(1, 1, vec![sign * rng.gen_range(0.3..2.0)]),
                }
            })
            .collect();
        Sheaf::new(g.clone(), 1, MapFamily::Scalar, maps).unwrap()
    }

    fn random_orth_sym_sheaf(
        g: &crate::graph::Graph,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Sheaf {
        let maps = g
            .edges()
            .iter()
            .map(|_| {
                let vs: Vec<Vec<f64>> = (0..d)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let q = crate::sheaf::householder_orthogonal(&vs, d).unwrap();
                crate::sheaf::EdgeMaps {
                    fu: q.clone(),
                    fv: q,
                }
            })
            .collect();
        Sheaf::new(g.clone(), d, MapFamily::Orthogonal, maps).unwrap()
    }

    #[test]
    fn energy_bound_holds_on_random_draws() {
        let mut r = rng(23);
        for trial in 0..20 {
            let g = random_connected_graph(6, 0.5, 100 + trial).unwrap();
            let (s, d) = if trial % 2 == 0 {
                (random_positive_scalar_sheaf(&g, &mut r), 1)
            } else {
                (random_orth_sym_sheaf(&g, 3, &mut r), 3)
            };
            let sigma = if trial % 4 < 2 {
                Activation::Relu
            } else {
                Activation::LeakyRelu(0.2)
            };
            let p = SCNParams {
                w1: random_mat(d, d, &mut r),
                w2: random_mat(2, 3, &mut r),
                sigma,
            };
            let x = random_mat(6 * d, 2, &mut r);
            let report = check_energy_decrease(&s, &p, &x).unwrap();
            assert!(
                report.holds,
                "trial {trial}: E_out {} > bound {}",
                report.energy_out, report.bound
            );
        }
    }

    #[test]
    fn energy_of_harmonic_input_stays_zero() {
        let g = random_connected_graph(6, 0.5, 77).unwrap();
        let mut r = rng(29);
        let s = random_orth_sym_sheaf(&g, 2, &mut r);
        let delta = sym_normalized_laplacian(&s).unwrap();
        let h = harmonic_space(&delta.matrix, KERNEL_TOL).unwrap();
        assert!(h.dim() > 0);
        let x = h.basis().clone();
        let p = SCNParams {
            w1: random_mat(2, 2, &mut r),
            w2: random_mat(h.dim(), 2, &mut r),
            sigma: Activation::Relu,
        };
        let report = check_energy_decrease(&s, &p, &x).unwrap();
        assert!(report.energy_in <= 1e-12);
        assert!(report.energy_out <= 1e-9, "E_out = {}", report.energy_out);
        assert!(report.holds);
    }

    #[test]
    fn energy_checker_rejects_uncovered_families() {
        let g = random_connected_graph(6, 0.5, 55).unwrap();
        let witness = crate::oracle::energy_increase_witness(&g, 2, 0.1).unwrap();
        let p = SCNParams {
            w1: witness.w1.clone(),
            w2: Mat::eye(1),
            sigma: Activation::Relu,
        };
        assert!(matches!(
            check_energy_decrease(&witness.sheaf, &p, &witness.x),
            Err(DiffusionError::FamilyNotCovered(_))
        ));
        // Identity activation is outside the theorem's scope as well.
        let s = trivial_sheaf(&g, 1).unwrap();
        let p = SCNParams {
            w1: Mat::eye(1),
            w2: Mat::eye(1),
            sigma: Activation::Identity,
        };
        let x = Mat::zeros(6, 1);
        assert!(matches!(
            check_energy_decrease(&s, &p, &x),
            Err(DiffusionError::SigmaUnsupported)
        ));
    }

    #[test]
    fn probe_separates_axis_split_classes() {
        let features = Mat::from_fn(10, 1, |v, _| if v < 5 { -1.0 - 0.1 * v as f64 } else { 1.0 + 0.1 * v as f64 });
        let labels: Vec<usize> = (0..10).map(|v| usize::from(v >= 5)).collect();
        let idx: Vec<usize> = (0..10).collect();
        let acc = linear_probe(&features, &labels, 2, &idx, &[], &ProbeConfig::default()).unwrap();
        assert_eq!(acc.train, 1.0);
        assert!(acc.test.is_none());
    }

    #[test]
    fn probe_on_constant_features_matches_prior() {
        let features = Mat::from_fn(8, 2, |_, _| 1.0);
        let labels: Vec<usize> = (0..8).map(|v| v % 2).collect();
        let idx: Vec<usize> = (0..8).collect();
        let acc = linear_probe(&features, &labels, 2, &idx, &idx, &ProbeConfig::default()).unwrap();
        assert_eq!(acc.train, 0.5);
        assert_eq!(acc.test, Some(0.5));
    }

    #[test]
    fn probe_rejects_degenerate_splits() {
        let features = Mat::from_fn(4, 1, |v, _| v as f64);
        let labels = vec![0, 0, 1, 1];
        let err = linear_probe(&features, &labels, 2, &[], &[], &ProbeConfig::default());
        assert!(matches!(err, Err(DiffusionError::DegenerateSplit(_))));
        let err = linear_probe(&features, &labels, 2, &[0, 1], &[], &ProbeConfig::default());
        assert!(matches!(err, Err(DiffusionError::DegenerateSplit(_))));
    }

    #[test]
    fn probe_is_deterministic() {
        let mut r = rng(31);
        let features = random_mat(12, 3, &mut r);
        let labels: Vec<usize> = (0..12).map(|v| v % 3).collect();
        let idx: Vec<usize> = (0..12).collect();
        let a = linear_probe(&features, &labels, 3, &idx, &idx, &ProbeConfig::default()).unwrap();
        let b = linear_probe(&features, &labels, 3, &idx, &idx, &ProbeConfig::default()).unwrap();
        assert_eq!(a.train.to_bits(), b.train.to_bits());
        assert_eq!(a.test.unwrap().to_bits(), b.test.unwrap().to_bits());
    }

    #[test]
    fn node_features_reshape_layout() {
        // Node v, stalk row r, channel c maps to feature column r*f + c.
        let x = Mat::from_fn(4, 2, |i, j| (10 * i + j) as f64);
        let f = node_features(&x, 2).unwrap();
        assert_eq!(f.rows(), 2);
        assert_eq!(f.cols(), 4);
        assert_eq!(f[(0, 0)], 0.0);
        assert_eq!(f[(0, 1)], 1.0);
        assert_eq!(f[(0, 2)], 10.0);
        assert_eq!(f[(0, 3)], 11.0);
        assert_eq!(f[(1, 2)], 30.0);
    }

    #[test]
    fn trajectory_csv_and_shdf_roundtrip() {
        let rows = vec![
            TrajectoryRow {
                t: 0.0,
                dirichlet_energy: 1.5,
                train_acc: 0.5,
                test_acc: 0.25,
            },
            TrajectoryRow {
                t: 1.0,
                dirichlet_energy: 0.75,
                train_acc: 1.0,
                test_acc: 0.9,
            },
        ];
        let mut csv = Vec::new();
        write_trajectory_csv(&mut csv, &rows).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,dirichlet_energy,train_acc,test_acc");
        assert_eq!(lines[1], "0,1.5,0.5,0.25");
        assert_eq!(lines.len(), 3);

        let mut r = rng(37);
        let x = random_mat(6, 3, &mut r);
        let mut buf = Vec::new();
        write_shdf(&mut buf, 2, &x).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 3 * 8);
        assert_eq!(&buf[0..4], b"SHDF");
        let (d, back) = read_shdf(&buf[..]).unwrap();
        assert_eq!(d, 2);
        for (a, b) in back.data().iter().zip(x.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
