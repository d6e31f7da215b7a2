//! Learned-sheaf construction, the end-to-end diffusion model
//! (encoder, stacked diffusion layers that rebuild their sheaf from the
//! current features, linear readout), reverse-mode gradients over a fixed
//! tape of operations, and the full-batch training loop.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffusion::{Activation, DiffusionError};
use crate::graph::{Graph, GraphError, LabeledDataset};
use crate::laplacian::LaplacianError;
use crate::linalg::{self, LinalgError, Mat, SymEig};
use crate::sheaf::{EdgeMaps, MapFamily, Sheaf, SheafError};

/// Denominator clamp for the eigen-derivative divided differences inside
/// the normalization backward pass; below this gap the analytic limit
/// (the derivative of the scalar function) is used instead.
pub const EIGEN_BACKPROP_CLAMP: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient in block {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}")]
    Divergence {
        epoch: usize,
        history: Vec<EpochRow>,
    },
    #[error("symmetric constraint requires a plain scalar learner (d = 1, no fixed blocks)")]
    SymmetricNeedsScalar,
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sheaf(#[from] SheafError),
    #[error(transparent)]
    Laplacian(#[from] LaplacianError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

// ---------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------

type Id = usize;

enum Op {
    Leaf,
    /// C = A B
    MatMul(Id, Id),
    /// C = A + B
    Add(Id, Id),
    /// C = A - B
    Sub(Id, Id),
    /// Elementwise tanh; the node's own value caches tanh(x).
    Tanh(Id),
    /// Elementwise activation; derivative read at the cached input.
    Activate(Id, Activation),
    /// Y = X W + 1 b^T (b is 1 x cols)
    Affine { x: Id, w: Id, b: Id },
    /// Per-node block product Y[v d .., :] = W X[v d .., :]
    StalkLhs { w: Id, x: Id, d: usize },
    /// Row r of node v scaled by (1 + eps[r]); eps is d x 1.
    RowScalePlusOne { x: Id, eps: Id, d: usize },
    /// nd x f -> n x (d f), feature column r*f + c from stalk row r.
    NodeFeatures { x: Id, d: usize },
    /// n x (d f) -> nd x f, inverse of NodeFeatures.
    StalkStack { x: Id, d: usize },
    /// [vec(X_a); vec(X_b)] as a 2df x 1 column.
    EdgeConcat { x: Id, d: usize, a: usize, b: usize },
    /// d x 1 -> diag(d x d)
    DiagFromVec(Id),
    /// d^2 x 1 (row-major) -> d x d
    MatFromVec { y: Id, d: usize },
    /// Product of k Householder reflections built from d-slices of y,
    /// each offset by e1. `ws` are the offset vectors, `partials[i]` is
    /// the product of the first i reflections (partials[0] = I).
    HouseholderChain {
        y: Id,
        d: usize,
        k: usize,
        ws: Vec<Vec<f64>>,
        partials: Vec<Mat>,
    },
    /// Learned block extended by a fixed +1/-1 diagonal pair.
    HybridPad(Id),
    /// Dense sheaf Laplacian from per-incidence maps.
    SheafLaplacian {
        d: usize,
        edges: Vec<(usize, usize)>,
        fu: Vec<Id>,
        fv: Vec<Id>,
    },
    /// Delta = M L M with M = blockdiag((L_vv + I)^{-1/2}).
    NormalizeAug {
        l: Id,
        d: usize,
        eigs: Vec<SymEig>,
        m_full: Mat,
    },
    /// Mean cross-entropy of softmax(logits) rows over `split`.
    CrossEntropy {
        logits: Id,
        probs: Mat,
        labels: Vec<usize>,
        split: Vec<usize>,
    },
}

struct Tape {
    values: Vec<Mat>,
    ops: Vec<Op>,
}

fn acc(grads: &mut [Mat], id: Id, delta: &Mat) {
    let g = &mut grads[id];
    debug_assert_eq!(g.rows(), delta.rows());
    debug_assert_eq!(g.cols(), delta.cols());
    for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
        *a += *b;
    }
}

impl Tape {
    fn new() -> Tape {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Id {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    fn value(&self, id: Id) -> &Mat {
        &self.values[id]
    }

    fn leaf(&mut self, value: Mat) -> Id {
        self.push(value, Op::Leaf)
    }

    fn matmul(&mut self, a: Id, b: Id) -> Id {
        let v = self.values[a].matmul(&self.values[b]);
        self.push(v, Op::MatMul(a, b))
    }

    fn add(&mut self, a: Id, b: Id) -> Id {
        let v = self.values[a].add(&self.values[b]);
        self.push(v, Op::Add(a, b))
    }

    fn sub(&mut self, a: Id, b: Id) -> Id {
        let v = self.values[a].sub(&self.values[b]);
        self.push(v, Op::Sub(a, b))
    }

    fn tanh(&mut self, x: Id) -> Id {
        let mut v = self.values[x].clone();
        for e in v.data_mut() {
            *e = e.tanh();
        }
        self.push(v, Op::Tanh(x))
    }

    fn activate(&mut self, x: Id, act: Activation) -> Id {
        let mut v = self.values[x].clone();
        for e in v.data_mut() {
            *e = act.apply(*e);
        }
        self.push(v, Op::Activate(x, act))
    }

    fn affine(&mut self, x: Id, w: Id, b: Id) -> Result<Id, LearnError> {
        let (xv, wv, bv) = (&self.values[x], &self.values[w], &self.values[b]);
        if xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(LearnError::Shape(format!(
                "affine: X {}x{}, W {}x{}, b {}x{}",
                xv.rows(),
                xv.cols(),
                wv.rows(),
                wv.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let mut v = xv.matmul(wv);
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                v[(r, c)] += bv[(0, c)];
            }
        }
        Ok(self.push(v, Op::Affine { x, w, b }))
    }

    fn stalk_lhs(&mut self, w: Id, x: Id, d: usize) -> Result<Id, LearnError> {
        let (wv, xv) = (&self.values[w], &self.values[x]);
        if wv.rows() != d || wv.cols() != d || xv.rows() % d != 0 {
            return Err(LearnError::Shape(format!(
                "stalk product: W {}x{}, X rows {}, d {d}",
                wv.rows(),
                wv.cols(),
                xv.rows()
            )));
        }
        let n = xv.rows() / d;
        let mut v = Mat::zeros(xv.rows(), xv.cols());
        for node in 0..n {
            let block = wv.matmul(&xv.block(node * d, 0, d, xv.cols()));
            v.set_block(node * d, 0, &block);
        }
        Ok(self.push(v, Op::StalkLhs { w, x, d }))
    }

    fn row_scale_plus_one(&mut self, x: Id, eps: Id, d: usize) -> Result<Id, LearnError> {
        let (xv, ev) = (&self.values[x], &self.values[eps]);
        if ev.rows() != d || ev.cols() != 1 || xv.rows() % d != 0 {
            return Err(LearnError::Shape(format!(
                "row scaling: eps {}x{}, X rows {}, d {d}",
                ev.rows(),
                ev.cols(),
                xv.rows()
            )));
        }
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let s = 1.0 + ev[(r % d, 0)];
            for c in 0..v.cols() {
                v[(r, c)] *= s;
            }
        }
        Ok(self.push(v, Op::RowScalePlusOne { x, eps, d }))
    }

    fn node_features(&mut self, x: Id, d: usize) -> Result<Id, LearnError> {
        let xv = &self.values[x];
        if xv.rows() % d != 0 {
            return Err(LearnError::Shape(format!(
                "node features: {} rows not divisible by d {d}",
                xv.rows()
            )));
        }
        let n = xv.rows() / d;
        let f = xv.cols();
        let v = Mat::from_fn(n, d * f, |node, j| xv[(node * d + j / f, j % f)]);
        Ok(self.push(v, Op::NodeFeatures { x, d }))
    }

    fn stalk_stack(&mut self, x: Id, d: usize) -> Result<Id, LearnError> {
        let xv = &self.values[x];
        if xv.cols() % d != 0 {
            return Err(LearnError::Shape(format!(
                "stalk stack: {} columns not divisible by d {d}",
                xv.cols()
            )));
        }
        let f = xv.cols() / d;
        let v = Mat::from_fn(xv.rows() * d, f, |i, c| xv[(i / d, (i % d) * f + c)]);
        Ok(self.push(v, Op::StalkStack { x, d }))
    }

    fn edge_concat(&mut self, x: Id, d: usize, a: usize, b: usize) -> Id {
        let xv = &self.values[x];
        let f = xv.cols();
        let v = Mat::from_fn(2 * d * f, 1, |i, _| {
            let (node, off) = if i < d * f { (a, i) } else { (b, i - d * f) };
            xv[(node * d + off / f, off % f)]
        });
        self.push(v, Op::EdgeConcat { x, d, a, b })
    }

    fn diag_from_vec(&mut self, y: Id) -> Id {
        let yv = &self.values[y];
        let d = yv.rows();
        let v = Mat::from_fn(d, d, |i, j| if i == j { yv[(i, 0)] } else { 0.0 });
        self.push(v, Op::DiagFromVec(y))
    }

    fn mat_from_vec(&mut self, y: Id, d: usize) -> Id {
        let yv = &self.values[y];
        let v = Mat::from_fn(d, d, |i, j| yv[(i * d + j, 0)]);
        self.push(v, Op::MatFromVec { y, d })
    }

    fn householder_chain(&mut self, y: Id, d: usize, k: usize) -> Id {
        let yv = &self.values[y];
        let mut ws = Vec::with_capacity(k);
        let mut partials = vec![Mat::eye(d)];
        for i in 0..k {
            let mut w = vec![0.0f64; d];
            for r in 0..d {
                w[r] = yv[(i * d + r, 0)];
            }
            // Offset by e1 so a zero parameter vector still defines a
            // reflection.
            w[0] += 1.0;
            let s: f64 = w.iter().map(|x| x * x).sum();
            let mut h = Mat::eye(d);
            for r in 0..d {
                for c in 0..d {
                    h[(r, c)] -= 2.0 / s * w[r] * w[c];
                }
            }
            let p = h.matmul(partials.last().expect("nonempty"));
            ws.push(w);
            partials.push(p);
        }
        let value = partials.last().expect("nonempty").clone();
        self.push(
            value,
            Op::HouseholderChain {
                y,
                d,
                k,
                ws,
                partials,
            },
        )
    }

    fn hybrid_pad(&mut self, m: Id) -> Id {
        let mv = &self.values[m];
        let d = mv.rows();
        let mut v = Mat::zeros(d + 2, d + 2);
        v.set_block(0, 0, mv);
        v[(d, d)] = 1.0;
        v[(d + 1, d + 1)] = -1.0;
        self.push(v, Op::HybridPad(m))
    }

    fn sheaf_laplacian(
        &mut self,
        d: usize,
        n: usize,
        edges: Vec<(usize, usize)>,
        fu: Vec<Id>,
        fv: Vec<Id>,
    ) -> Id {
        let mut l = Mat::zeros(n * d, n * d);
        for (e, &(u, v)) in edges.iter().enumerate() {
            let a = &self.values[fu[e]];
            let b = &self.values[fv[e]];
            l.add_block(u * d, u * d, &a.transpose().matmul(a));
            l.add_block(v * d, v * d, &b.transpose().matmul(b));
            l.add_block(u * d, v * d, &a.transpose().matmul(b).scale(-1.0));
            l.add_block(v * d, u * d, &b.transpose().matmul(a).scale(-1.0));
        }
        self.push(l, Op::SheafLaplacian { d, edges, fu, fv })
    }

    fn normalize_aug(&mut self, l: Id, d: usize) -> Result<Id, LearnError> {
        let lv = &self.values[l];
        let n = lv.rows() / d;
        let mut eigs = Vec::with_capacity(n);
        let mut m_full = Mat::zeros(lv.rows(), lv.rows());
        for v in 0..n {
            let mut s = lv.block(v * d, v * d, d, d);
            for r in 0..d {
                s[(r, r)] += 1.0;
            }
            let eig = linalg::eigh(&s)?;
            let mut mv = Mat::zeros(d, d);
            for a in 0..d {
                for b in 0..d {
                    let mut sum = 0.0;
                    for k in 0..d {
                        let lam = eig.values[k].max(1e-12);
                        sum += eig.vectors[(a, k)] * lam.powf(-0.5) * eig.vectors[(b, k)];
                    }
                    mv[(a, b)] = sum;
                }
            }
            m_full.set_block(v * d, v * d, &mv);
            eigs.push(eig);
        }
        let value = m_full.matmul(&lv.matmul(&m_full));
        Ok(self.push(value, Op::NormalizeAug { l, d, eigs, m_full }))
    }

    fn cross_entropy(
        &mut self,
        logits: Id,
        labels: &[usize],
        split: &[usize],
    ) -> Result<Id, LearnError> {
        let lg = &self.values[logits];
        let c = lg.cols();
        if labels.len() != lg.rows() {
            return Err(LearnError::Shape(format!(
                "{} labels for {} logit rows",
                labels.len(),
                lg.rows()
            )));
        }
        if split.is_empty() {
            return Err(LearnError::InvalidConfig("empty loss split".to_string()));
        }
        let mut probs = Mat::zeros(lg.rows(), c);
        let mut loss = 0.0;
        for &v in split {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                mx = mx.max(lg[(v, j)]);
            }
            let mut sum = 0.0;
            for j in 0..c {
                let e = (lg[(v, j)] - mx).exp();
                probs[(v, j)] = e;
                sum += e;
            }
            for j in 0..c {
                probs[(v, j)] /= sum;
            }
            // Floor the log at -700 without masking NaN (f64::max would).
            let logp = probs[(v, labels[v])].ln();
            loss -= if logp < -700.0 { -700.0 } else { logp };
        }
        loss /= split.len() as f64;
        Ok(self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                split: split.to_vec(),
            },
        ))
    }

    /// Reverse pass seeding d(loss)/d(loss) = 1.
    fn backward(&self, loss: Id) -> Vec<Mat> {
        let mut grads: Vec<Mat> = self
            .values
            .iter()
            .map(|v| Mat::zeros(v.rows(), v.cols()))
            .collect();
        grads[loss][(0, 0)] = 1.0;
        for id in (0..self.ops.len()).rev() {
            let g = grads[id].clone();
            // Skip exactly-zero gradients; NaN must keep propagating so
            // divergence surfaces at the leaves.
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.ops[id] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, &g.matmul(&self.values[*b].transpose()));
                    acc(&mut grads, *b, &self.values[*a].transpose().matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g.scale(-1.0));
                }
                Op::Tanh(x) => {
                    let y = &self.values[id];
                    let mut d = g.clone();
                    for (e, t) in d.data_mut().iter_mut().zip(y.data()) {
                        *e *= 1.0 - t * t;
                    }
                    acc(&mut grads, *x, &d);
                }
                Op::Activate(x, act) => {
                    let input = &self.values[*x];
                    let mut d = g.clone();
                    for (e, t) in d.data_mut().iter_mut().zip(input.data()) {
                        *e *= act.derivative(*t);
                    }
                    acc(&mut grads, *x, &d);
                }
                Op::Affine { x, w, b } => {
                    acc(&mut grads, *x, &g.matmul(&self.values[*w].transpose()));
                    acc(&mut grads, *w, &self.values[*x].transpose().matmul(&g));
                    let mut gb = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gb[(0, c)] += g[(r, c)];
                        }
                    }
                    acc(&mut grads, *b, &gb);
                }
                Op::StalkLhs { w, x, d } => {
                    let (wv, xv) = (&self.values[*w], &self.values[*x]);
                    let n = xv.rows() / d;
                    let mut gw = Mat::zeros(*d, *d);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    let wt = wv.transpose();
                    for node in 0..n {
                        let gv = g.block(node * d, 0, *d, g.cols());
                        let xv_block = xv.block(node * d, 0, *d, xv.cols());
                        gw = gw.add(&gv.matmul(&xv_block.transpose()));
                        gx.set_block(node * d, 0, &wt.matmul(&gv));
                    }
                    acc(&mut grads, *w, &gw);
                    acc(&mut grads, *x, &gx);
                }
                Op::RowScalePlusOne { x, eps, d } => {
                    let (xv, ev) = (&self.values[*x], &self.values[*eps]);
                    let mut gx = g.clone();
                    let mut ge = Mat::zeros(*d, 1);
                    for r in 0..g.rows() {
                        let s = 1.0 + ev[(r % d, 0)];
                        for c in 0..g.cols() {
                            ge[(r % d, 0)] += g[(r, c)] * xv[(r, c)];
                            gx[(r, c)] *= s;
                        }
                    }
                    acc(&mut grads, *x, &gx);
                    acc(&mut grads, *eps, &ge);
                }
                Op::NodeFeatures { x, d } => {
                    let xv = &self.values[*x];
                    let f = xv.cols();
                    let mut gx = Mat::zeros(xv.rows(), f);
                    for node in 0..g.rows() {
                        for j in 0..g.cols() {
                            gx[(node * d + j / f, j % f)] += g[(node, j)];
                        }
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::StalkStack { x, d } => {
                    let xv = &self.values[*x];
                    let f = g.cols();
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for i in 0..g.rows() {
                        for c in 0..f {
                            gx[(i / d, (i % d) * f + c)] += g[(i, c)];
                        }
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::EdgeConcat { x, d, a, b } => {
                    let xv = &self.values[*x];
                    let f = xv.cols();
                    let mut gx = Mat::zeros(xv.rows(), f);
                    for i in 0..g.rows() {
                        let (node, off) = if i < d * f { (*a, i) } else { (*b, i - d * f) };
                        gx[(node * d + off / f, off % f)] += g[(i, 0)];
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::DiagFromVec(y) => {
                    let d = self.values[*y].rows();
                    let gy = Mat::from_fn(d, 1, |i, _| g[(i, i)]);
                    acc(&mut grads, *y, &gy);
                }
                Op::MatFromVec { y, d } => {
                    let gy = Mat::from_fn(d * d, 1, |i, _| g[(i / d, i % d)]);
                    acc(&mut grads, *y, &gy);
                }
                Op::HouseholderChain {
                    y,
                    d,
                    k,
                    ws,
                    partials,
                } => {
                    let m = &self.values[id];
                    let mut gy = Mat::zeros(k * d, 1);
                    for i in 0..*k {
                        let p_prev = &partials[i];
                        let p_cur = &partials[i + 1];
                        // Remaining product to the left of reflection i.
                        let s_left = m.matmul(&p_cur.transpose());
                        let gamma = s_left.transpose().matmul(&g).matmul(&p_prev.transpose());
                        let w = &ws[i];
                        let s: f64 = w.iter().map(|x| x * x).sum();
                        let mut wgw = 0.0;
                        for r in 0..*d {
                            for c in 0..*d {
                                wgw += w[r] * gamma[(r, c)] * w[c];
                            }
                        }
                        for r in 0..*d {
                            let mut t = 0.0;
                            for c in 0..*d {
                                t += (gamma[(r, c)] + gamma[(c, r)]) * w[c];
                            }
                            gy[(i * d + r, 0)] = -2.0 / s * t + 4.0 * wgw / (s * s) * w[r];
                        }
                    }
                    acc(&mut grads, *y, &gy);
                }
                Op::HybridPad(m) => {
                    let d = self.values[*m].rows();
                    acc(&mut grads, *m, &g.block(0, 0, d, d));
                }
                Op::SheafLaplacian { d, edges, fu, fv } => {
                    for (e, &(u, v)) in edges.iter().enumerate() {
                        let a = &self.values[fu[e]];
                        let b = &self.values[fv[e]];
                        let guu = g.block(u * d, u * d, *d, *d);
                        let gvv = g.block(v * d, v * d, *d, *d);
                        let guv = g.block(u * d, v * d, *d, *d);
                        let gvu = g.block(v * d, u * d, *d, *d);
                        let ga = a
                            .matmul(&guu.add(&guu.transpose()))
                            .sub(&b.matmul(&guv.transpose().add(&gvu)));
                        let gb = b
                            .matmul(&gvv.add(&gvv.transpose()))
                            .sub(&a.matmul(&guv.add(&gvu.transpose())));
                        acc(&mut grads, fu[e], &ga);
                        acc(&mut grads, fv[e], &gb);
                    }
                }
                Op::NormalizeAug { l, d, eigs, m_full } => {
                    let lv = &self.values[*l];
                    // Direct dependence: Delta = M L M with M held fixed.
                    let direct = m_full.matmul(&g.matmul(m_full));
                    acc(&mut grads, *l, &direct);
                    // Through M: dL/dM collapses to the block diagonal of
                    // G M L + L M G, then through the inverse square root
                    // of each S_v = L_vv + I by the eigen-derivative rule.
                    let ml = m_full.matmul(lv);
                    let gml = g.matmul(&ml);
                    let lm = lv.matmul(m_full);
                    let lmg = lm.matmul(&g);
                    let p_full = gml.add(&lmg);
                    let n = lv.rows() / d;
                    let mut scatter = Mat::zeros(lv.rows(), lv.rows());
                    for v in 0..n {
                        let p = p_full.block(v * d, v * d, *d, *d);
                        let p_sym = p.add(&p.transpose()).scale(0.5);
                        let eig = &eigs[v];
                        let u = &eig.vectors;
                        let w = u.transpose().matmul(&p_sym).matmul(u);
                        let mut kmat = Mat::zeros(*d, *d);
                        for i in 0..*d {
                            for j in 0..*d {
                                let li = eig.values[i].max(1e-12);
                                let lj = eig.values[j].max(1e-12);
                                let gamma = if (li - lj).abs() < EIGEN_BACKPROP_CLAMP {
                                    let mid = 0.5 * (li + lj);
                                    -0.5 * mid.powf(-1.5)
                                } else {
                                    (li.powf(-0.5) - lj.powf(-0.5)) / (li - lj)
                                };
                                kmat[(i, j)] = w[(i, j)] * gamma;
                            }
                        }
                        let gs = u.matmul(&kmat).matmul(&u.transpose());
                        scatter.set_block(v * d, v * d, &gs);
                    }
                    acc(&mut grads, *l, &scatter);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                    split,
                } => {
                    let scale = g[(0, 0)] / split.len() as f64;
                    let mut gl = Mat::zeros(probs.rows(), probs.cols());
                    for &v in split {
                        for c in 0..probs.cols() {
                            let y = if labels[v] == c { 1.0 } else { 0.0 };
                            gl[(v, c)] += scale * (probs[(v, c)] - y);
                        }
                    }
                    acc(&mut grads, *logits, &gl);
                }
            }
        }
        grads
    }
}

// ---------------------------------------------------------------------
// Learned sheaf
// ---------------------------------------------------------------------

/// Parameters of the per-edge map builder
/// `Phi(x_v, x_u) = reshape(tanh(V [x_v || x_u]))`.
#[derive(Debug, Clone)]
pub struct SheafLearnerParams {
    /// Size of the learned map block.
    pub d: usize,
    /// Feature channels per stalk coordinate.
    pub channels: usize,
    pub family: MapFamily,
    /// Number of Householder reflections (Orthogonal family only).
    pub householder_count: usize,
    /// Feed both endpoint orders the symmetrized features so the two
    /// restriction maps of every edge coincide.
    pub symmetric: bool,
    /// Extend every learned map by a fixed +1/-1 diagonal pair.
    pub hybrid: bool,
    /// q x (2 * stalk_dim * channels) weight matrix.
    pub v: Mat,
}

impl SheafLearnerParams {
    /// Map parameters the family consumes: d (diagonal entries), k*d
    /// (Householder vectors), or d^2 (full matrix).
    pub fn q(family: MapFamily, d: usize, householder_count: usize) -> Result<usize, LearnError> {
        match family {
            MapFamily::Diagonal => Ok(d),
            MapFamily::General => Ok(d * d),
            MapFamily::Orthogonal => {
                if householder_count == 0 || householder_count > d {
                    return Err(LearnError::InvalidConfig(format!(
                        "householder count {householder_count} must be in 1..={d}"
                    )));
                }
                Ok(householder_count * d)
            }
            MapFamily::Scalar => Err(LearnError::InvalidConfig(
                "the learner families are Diagonal, Orthogonal and General; \
                 use General with d = 1 for scalar maps"
                    .to_string(),
            )),
        }
    }

    pub fn stalk_dim(&self) -> usize {
        self.d + if self.hybrid { 2 } else { 0 }
    }

    pub fn new(
        d: usize,
        channels: usize,
        family: MapFamily,
        householder_count: usize,
        hybrid: bool,
        v: Mat,
    ) -> Result<SheafLearnerParams, LearnError> {
        let q = SheafLearnerParams::q(family, d, householder_count)?;
        let stalk = d + if hybrid { 2 } else { 0 };
        if v.rows() != q || v.cols() != 2 * stalk * channels {
            return Err(LearnError::Shape(format!(
                "V is {}x{}, expected {q}x{}",
                v.rows(),
                v.cols(),
                2 * stalk * channels
            )));
        }
        Ok(SheafLearnerParams {
            d,
            channels,
            family,
            householder_count,
            symmetric: false,
            hybrid,
            v,
        })
    }
}

/// Variant whose two endpoint maps are built from the symmetrized
/// endpoint features, collapsing the Laplacian to a weighted graph
/// Laplacian. Only meaningful for plain scalar learners.
pub fn constrain_symmetric(p: &SheafLearnerParams) -> Result<SheafLearnerParams, LearnError> {
    if p.d != 1 || p.hybrid {
        return Err(LearnError::SymmetricNeedsScalar);
    }
    let mut out = p.clone();
    out.symmetric = true;
    Ok(out)
}

/// Emits the map-building ops for one incidence on the tape: features of
/// node `a` concatenated with node `b` (or symmetrized), through V and
/// tanh, reshaped per family, optionally padded with the fixed blocks.
fn phi_map_on_tape(
    tape: &mut Tape,
    v_id: Id,
    x_id: Id,
    p: &SheafLearnerParams,
    a: usize,
    b: usize,
) -> Result<Id, LearnError> {
    let stalk = p.stalk_dim();
    let z = if p.symmetric {
        let z1 = tape.edge_concat(x_id, stalk, a, b);
        let z2 = tape.edge_concat(x_id, stalk, b, a);
        tape.add(z1, z2)
    } else {
        tape.edge_concat(x_id, stalk, a, b)
    };
    let lin = tape.matmul(v_id, z);
    let act = tape.tanh(lin);
    let core = match p.family {
        MapFamily::Diagonal => tape.diag_from_vec(act),
        MapFamily::General => tape.mat_from_vec(act, p.d),
        MapFamily::Orthogonal => tape.householder_chain(act, p.d, p.householder_count),
        MapFamily::Scalar => unreachable!("rejected at construction"),
    };
    Ok(if p.hybrid { tape.hybrid_pad(core) } else { core })
}

/// One restriction map `Phi(x_v, x_u)`; `xv` and `xu` are the endpoint
/// feature blocks of shape stalk_dim x channels. Ordered concatenation
/// makes the function non-symmetric unless the symmetric constraint is
/// set.
pub fn phi_restriction(
    p: &SheafLearnerParams,
    xv: &Mat,
    xu: &Mat,
) -> Result<Mat, LearnError> {
    let stalk = p.stalk_dim();
    for (name, m) in [("xv", xv), ("xu", xu)] {
        if m.rows() != stalk || m.cols() != p.channels {
            return Err(LearnError::Shape(format!(
                "{name} is {}x{}, expected {stalk}x{}",
                m.rows(),
                m.cols(),
                p.channels
            )));
        }
    }
    let mut tape = Tape::new();
    let mut stacked = Mat::zeros(2 * stalk, p.channels);
    stacked.set_block(0, 0, xv);
    stacked.set_block(stalk, 0, xu);
    let x_id = tape.leaf(stacked);
    let v_id = tape.leaf(p.v.clone());
    let map = phi_map_on_tape(&mut tape, v_id, x_id, p, 0, 1)?;
    Ok(tape.value(map).clone())
}

/// Builds the full sheaf from the current features `x` (nd x f):
/// `F_{v <| e} = Phi(x_v, x_u)` for each edge `(u, v)`, deterministic in
/// its inputs.
pub fn build_learned_sheaf(
    p: &SheafLearnerParams,
    g: &Graph,
    x: &Mat,
) -> Result<Sheaf, LearnError> {
    let stalk = p.stalk_dim();
    if x.rows() != g.n() * stalk || x.cols() != p.channels {
        return Err(LearnError::Shape(format!(
            "features are {}x{}, expected {}x{}",
            x.rows(),
            x.cols(),
            g.n() * stalk,
            p.channels
        )));
    }
    let mut tape = Tape::new();
    let x_id = tape.leaf(x.clone());
    let v_id = tape.leaf(p.v.clone());
    let mut maps = Vec::with_capacity(g.m());
    for &(u, v) in g.edges() {
        let fv = phi_map_on_tape(&mut tape, v_id, x_id, p, v, u)?;
        let fu = phi_map_on_tape(&mut tape, v_id, x_id, p, u, v)?;
        maps.push(EdgeMaps {
            fu: tape.value(fu).clone(),
            fv: tape.value(fv).clone(),
        });
    }
    Ok(Sheaf::new(g.clone(), stalk, p.family, maps)?)
}

// ---------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------

/// Shape and family choices of the end-to-end model.
#[derive(Debug, Clone)]
pub struct NSDModelConfig {
    pub in_features: usize,
    pub num_classes: usize,
    /// Learned map block size.
    pub d: usize,
    /// Feature channels per stalk coordinate.
    pub channels: usize,
    /// Number of diffusion layers T.
    pub layers: usize,
    pub family: MapFamily,
    pub householder_count: usize,
    pub sigma: Activation,
    pub symmetric: bool,
    pub hybrid: bool,
}

impl NSDModelConfig {
    pub fn stalk_dim(&self) -> usize {
        self.d + if self.hybrid { 2 } else { 0 }
    }

    fn validate(&self) -> Result<(), LearnError> {
        if self.in_features == 0
            || self.num_classes < 2
            || self.d == 0
            || self.channels == 0
        {
            return Err(LearnError::InvalidConfig(
                "in_features, d, channels must be positive and num_classes >= 2".to_string(),
            ));
        }
        SheafLearnerParams::q(self.family, self.d, self.householder_count)?;
        if self.symmetric && (self.d != 1 || self.hybrid) {
            return Err(LearnError::SymmetricNeedsScalar);
        }
        Ok(())
    }

    fn learner(&self, v: Mat) -> SheafLearnerParams {
        SheafLearnerParams {
            d: self.d,
            channels: self.channels,
            family: self.family,
            householder_count: self.householder_count,
            symmetric: self.symmetric,
            hybrid: self.hybrid,
            v,
        }
    }
}

/// One named parameter tensor; `sheaf_group` marks the sheaf-learner
/// weights, which take their own weight-decay rate.
#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub value: Mat,
    pub sheaf_group: bool,
}

/// Encoder -> T sheaf-rebuilding diffusion layers -> linear readout.
#[derive(Debug, Clone)]
pub struct NSDModel {
    pub config: NSDModelConfig,
    /// Fixed order: encoder.weight, encoder.bias, then per layer
    /// {v, w1, w2, eps}, then readout.weight, readout.bias.
    pub params: Vec<ParamBlock>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

impl NSDModel {
    pub fn new(config: NSDModelConfig, seed: u64) -> Result<NSDModel, LearnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stalk = config.stalk_dim();
        let width = stalk * config.channels;
        let q = SheafLearnerParams::q(config.family, config.d, config.householder_count)?;
        let mut params = vec![
            ParamBlock {
                name: "encoder.weight".to_string(),
                value: glorot(&mut rng, config.in_features, width),
                sheaf_group: false,
            },
            ParamBlock {
                name: "encoder.bias".to_string(),
                value: Mat::zeros(1, width),
                sheaf_group: false,
            },
        ];
        for t in 0..config.layers {
            params.push(ParamBlock {
                name: format!("layer{t}.v"),
                value: glorot(&mut rng, q, 2 * width),
                sheaf_group: true,
            });
            params.push(ParamBlock {
                name: format!("layer{t}.w1"),
                value: glorot(&mut rng, stalk, stalk),
                sheaf_group: false,
            });
            params.push(ParamBlock {
                name: format!("layer{t}.w2"),
                value: glorot(&mut rng, config.channels, config.channels),
                sheaf_group: false,
            });
            params.push(ParamBlock {
                name: format!("layer{t}.eps"),
                value: Mat::zeros(stalk, 1),
                sheaf_group: false,
            });
        }
        params.push(ParamBlock {
            name: "readout.weight".to_string(),
            value: glorot(&mut rng, width, config.num_classes),
            sheaf_group: false,
        });
        params.push(ParamBlock {
            name: "readout.bias".to_string(),
            value: Mat::zeros(1, config.num_classes),
            sheaf_group: false,
        });
        Ok(NSDModel { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.rows() * p.value.cols()).sum()
    }

    /// The sheaf learner of layer `t` with the current weights.
    pub fn layer_learner(&self, t: usize) -> SheafLearnerParams {
        self.config.learner(self.params[2 + 4 * t].value.clone())
    }

    /// Effective residual scaling of layer `t`: tanh of the raw
    /// parameter, guaranteed inside (-1, 1).
    pub fn layer_eps(&self, t: usize) -> Vec<f64> {
        let raw = &self.params[2 + 4 * t + 3].value;
        (0..raw.rows()).map(|r| raw[(r, 0)].tanh()).collect()
    }

    fn check_data(&self, data: &LabeledDataset) -> Result<(), LearnError> {
        let n = data.graph.n();
        if data.features.rows() != n || data.features.cols() != self.config.in_features {
            return Err(LearnError::Shape(format!(
                "features are {}x{}, model expects {}x{}",
                data.features.rows(),
                data.features.cols(),
                n,
                self.config.in_features
            )));
        }
        if data.labels.len() != n {
            return Err(LearnError::Shape(format!(
                "{} labels for {n} nodes",
                data.labels.len()
            )));
        }
        if let Some(&bad) = data.labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(LearnError::Shape(format!(
                "label {bad} outside 0..{}",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    fn run(&self, data: &LabeledDataset, split: &[usize]) -> Result<RunState, LearnError> {
        self.check_data(data)?;
        let cfg = &self.config;
        let stalk = cfg.stalk_dim();
        let mut tape = Tape::new();
        let feats = tape.leaf(data.features.clone());
        let param_ids: Vec<Id> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let hidden = tape.affine(feats, param_ids[0], param_ids[1])?;
        let mut x = tape.stalk_stack(hidden, stalk)?;
        for t in 0..cfg.layers {
            let base = 2 + 4 * t;
            let learner = cfg.learner(tape.value(param_ids[base]).clone());
            let mut fu_ids = Vec::with_capacity(data.graph.m());
            let mut fv_ids = Vec::with_capacity(data.graph.m());
            for &(u, v) in data.graph.edges() {
                fv_ids.push(phi_map_on_tape(
                    &mut tape,
                    param_ids[base],
                    x,
                    &learner,
                    v,
                    u,
                )?);
                fu_ids.push(phi_map_on_tape(
                    &mut tape,
                    param_ids[base],
                    x,
                    &learner,
                    u,
                    v,
                )?);
            }
            let l = tape.sheaf_laplacian(
                stalk,
                data.graph.n(),
                data.graph.edges().to_vec(),
                fu_ids,
                fv_ids,
            );
            let delta = tape.normalize_aug(l, stalk)?;
            let z1 = tape.stalk_lhs(param_ids[base + 1], x, stalk)?;
            let z2 = tape.matmul(z1, param_ids[base + 2]);
            let propagated = tape.matmul(delta, z2);
            let smoothed = tape.activate(propagated, cfg.sigma);
            let eps = tape.tanh(param_ids[base + 3]);
            let scaled = tape.row_scale_plus_one(x, eps, stalk)?;
            x = tape.sub(scaled, smoothed);
        }
        let out = tape.node_features(x, stalk)?;
        let ro = self.params.len() - 2;
        let logits = tape.affine(out, param_ids[ro], param_ids[ro + 1])?;
        let loss = tape.cross_entropy(logits, &data.labels, split)?;
        Ok(RunState {
            tape,
            logits,
            loss,
            param_ids,
        })
    }

    /// Class logits, n x C.
    pub fn forward(&self, data: &LabeledDataset) -> Result<Mat, LearnError> {
        let split = fallback_split(data);
        let run = self.run(data, &split)?;
        Ok(run.tape.value(run.logits).clone())
    }

    /// Cross-entropy over the train split.
    pub fn loss(&self, data: &LabeledDataset) -> Result<f64, LearnError> {
        let run = self.run(data, &data.train)?;
        Ok(run.tape.value(run.loss)[(0, 0)])
    }

    /// Loss and one gradient matrix per parameter block, in block order.
    pub fn loss_and_grad(&self, data: &LabeledDataset) -> Result<(f64, Vec<Mat>), LearnError> {
        let run = self.run(data, &data.train)?;
        let loss = run.tape.value(run.loss)[(0, 0)];
        let grads = run.tape.backward(run.loss);
        let mut out = Vec::with_capacity(self.params.len());
        for (block, &id) in self.params.iter().zip(run.param_ids.iter()) {
            let g = grads[id].clone();
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(LearnError::NonFiniteGradient(block.name.clone()));
            }
            out.push(g);
        }
        Ok((loss, out))
    }
}

struct RunState {
    tape: Tape,
    logits: Id,
    loss: Id,
    param_ids: Vec<Id>,
}

/// Inference-time replay of the model through the public building blocks:
/// the states entering each layer and the sheaf each layer constructed
/// from them.
#[derive(Debug, Clone)]
pub struct UnrollTrace {
    /// Stalk-stacked states, `layers + 1` entries (input first).
    pub states: Vec<Mat>,
    /// Sheaf built by each layer from its incoming state.
    pub sheaves: Vec<Sheaf>,
    pub logits: Mat,
}

impl NSDModel {
    /// Runs the forward pass through [`build_learned_sheaf`] and
    /// [`crate::diffusion::nsd_layer`], exposing every intermediate.
    pub fn unroll(&self, data: &LabeledDataset) -> Result<UnrollTrace, LearnError> {
        self.check_data(data)?;
        let cfg = &self.config;
        let stalk = cfg.stalk_dim();
        let enc_w = &self.params[0].value;
        let enc_b = &self.params[1].value;
        let mut hidden = data.features.matmul(enc_w);
        for r in 0..hidden.rows() {
            for c in 0..hidden.cols() {
                hidden[(r, c)] += enc_b[(0, c)];
            }
        }
        let mut x = Mat::from_fn(data.graph.n() * stalk, cfg.channels, |i, c| {
            hidden[(i / stalk, (i % stalk) * cfg.channels + c)]
        });
        let mut states = vec![x.clone()];
        let mut sheaves = Vec::with_capacity(cfg.layers);
        for t in 0..cfg.layers {
            let learner = self.layer_learner(t);
            let sheaf = build_learned_sheaf(&learner, &data.graph, &x)?;
            let layer = crate::diffusion::NSDLayerParams::new(
                self.params[2 + 4 * t + 1].value.clone(),
                self.params[2 + 4 * t + 2].value.clone(),
                self.layer_eps(t),
                cfg.sigma,
            );
            x = crate::diffusion::nsd_layer(&layer, &sheaf, &x)?;
            sheaves.push(sheaf);
            states.push(x.clone());
        }
        let feats = crate::diffusion::node_features(&x, stalk)?;
        let ro = self.params.len() - 2;
        let mut logits = feats.matmul(&self.params[ro].value);
        let ro_b = &self.params[ro + 1].value;
        for r in 0..logits.rows() {
            for c in 0..logits.cols() {
                logits[(r, c)] += ro_b[(0, c)];
            }
        }
        Ok(UnrollTrace {
            states,
            sheaves,
            logits,
        })
    }
}

/// The train split, or all nodes when it is empty (pure inference).
fn fallback_split(data: &LabeledDataset) -> Vec<usize> {
    if data.train.is_empty() {
        (0..data.graph.n()).collect()
    } else {
        data.train.clone()
    }
}

/// Argmax accuracy over a node split; ties resolve to the smallest class.
pub fn accuracy(logits: &Mat, labels: &[usize], split: &[usize]) -> f64 {
    if split.is_empty() {
        return f64::NAN;
    }
    let mut hits = 0usize;
    for &v in split {
        let mut best = 0usize;
        for c in 1..logits.cols() {
            if logits[(v, c)] > logits[(v, best)] {
                best = c;
            }
        }
        if best == labels[v] {
            hits += 1;
        }
    }
    hits as f64 / split.len() as f64
}

// ---------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------

/// Adam with fixed (0.9, 0.999, 1e-8) moments and per-group weight decay
/// added to the gradient.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay_sheaf: f64,
    pub weight_decay_regular: f64,
    /// Epochs without improvement of the stopping metric before training
    /// halts.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 0.02,
            epochs: 200,
            weight_decay_sheaf: 5e-4,
            weight_decay_regular: 5e-4,
            patience: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub history: Vec<EpochRow>,
    pub best_epoch: usize,
    /// Metrics at the restored best epoch.
    pub best: EpochRow,
}

struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: usize,
}

impl Adam {
    fn new(params: &[ParamBlock]) -> Adam {
        Adam {
            m: params
                .iter()
                .map(|p| Mat::zeros(p.value.rows(), p.value.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Mat::zeros(p.value.rows(), p.value.cols()))
                .collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [ParamBlock], grads: &[Mat], cfg: &TrainConfig) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, block) in params.iter_mut().enumerate() {
            let wd = if block.sheaf_group {
                cfg.weight_decay_sheaf
            } else {
                cfg.weight_decay_regular
            };
            let theta = block.value.data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..theta.len() {
                let g = grads[i].data()[j] + wd * theta[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                theta[j] -= cfg.lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

/// Full-batch training with early stopping on validation accuracy (train
/// accuracy when no validation split exists). The model is restored to
/// its best-metric epoch. Deterministic: identical inputs give bitwise
/// identical parameters.
pub fn train(
    model: &mut NSDModel,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, LearnError> {
    if cfg.epochs == 0 {
        return Err(LearnError::InvalidConfig("epochs must be >= 1".to_string()));
    }
    if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(LearnError::InvalidConfig(format!(
            "learning rate must be finite and nonnegative, got {}",
            cfg.lr
        )));
    }
    if data.train.is_empty() {
        return Err(LearnError::InvalidConfig("empty train split".to_string()));
    }
    let mut adam = Adam::new(&model.params);
    let mut history: Vec<EpochRow> = Vec::new();
    let mut best: Option<(f64, usize, Vec<Mat>, EpochRow)> = None;
    let mut stale = 0usize;
    for epoch in 1..=cfg.epochs {
        let (loss, grads) = match model.loss_and_grad(data) {
            Ok(pair) => pair,
            Err(LearnError::NonFiniteGradient(_)) => {
                return Err(LearnError::Divergence { epoch, history })
            }
            Err(other) => return Err(other),
        };
        if !loss.is_finite() {
            return Err(LearnError::Divergence { epoch, history });
        }
        adam.step(&mut model.params, &grads, cfg);

        let logits = model.forward(data)?;
        let row = EpochRow {
            epoch,
            loss,
            train_acc: accuracy(&logits, &data.labels, &data.train),
            val_acc: accuracy(&logits, &data.labels, &data.val),
            test_acc: accuracy(&logits, &data.labels, &data.test),
        };
        history.push(row);
        let metric = if data.val.is_empty() {
            row.train_acc
        } else {
            row.val_acc
        };
        let improved = match &best {
            None => true,
            Some((m, _, _, _)) => metric > *m + 1e-12,
        };
        if improved {
            best = Some((
                metric,
                epoch,
                model.params.iter().map(|p| p.value.clone()).collect(),
                row,
            ));
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, snapshot, best_row) = best.expect("epochs >= 1 recorded a row");
    for (block, value) in model.params.iter_mut().zip(snapshot) {
        block.value = value;
    }
    Ok(TrainResult {
        history,
        best_epoch,
        best: best_row,
    })
}

/// Writes `epoch,loss,train_acc,val_acc,test_acc` rows.
pub fn write_history_csv<W: Write>(mut w: W, rows: &[EpochRow]) -> io::Result<()> {
    writeln!(w, "epoch,loss,train_acc,val_acc,test_acc")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.epoch, r.loss, r.train_acc, r.val_acc, r.test_acc
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------

fn activation_to_string(a: Activation) -> String {
    match a {
        Activation::Identity => "identity".to_string(),
        Activation::Relu => "relu".to_string(),
        Activation::Elu => "elu".to_string(),
        Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
    }
}

pub fn activation_from_string(s: &str) -> Result<Activation, LearnError> {
    match s {
        "identity" => Ok(Activation::Identity),
        "relu" => Ok(Activation::Relu),
        "elu" => Ok(Activation::Elu),
        other => {
            if let Some(slope) = other.strip_prefix("leaky_relu:") {
                let slope: f64 = slope
                    .parse()
                    .map_err(|_| LearnError::Checkpoint(format!("bad slope in {other}")))?;
                Ok(Activation::LeakyRelu(slope))
            } else {
                Err(LearnError::Checkpoint(format!("unknown activation {other}")))
            }
        }
    }
}

fn mat_to_json(m: &Mat) -> serde_json::Value {
    let rows: Vec<Vec<f64>> = (0..m.rows())
        .map(|r| (0..m.cols()).map(|c| m[(r, c)]).collect())
        .collect();
    serde_json::json!(rows)
}

fn mat_from_json(v: &serde_json::Value) -> Result<Mat, LearnError> {
    let rows = v
        .as_array()
        .ok_or_else(|| LearnError::Checkpoint("parameter is not an array".to_string()))?;
    let nrows = rows.len();
    let ncols = rows
        .first()
        .and_then(|r| r.as_array())
        .map(|r| r.len())
        .unwrap_or(0);
    let mut data = Vec::with_capacity(nrows * ncols);
    for row in rows {
        let row = row
            .as_array()
            .ok_or_else(|| LearnError::Checkpoint("row is not an array".to_string()))?;
        if row.len() != ncols {
            return Err(LearnError::Checkpoint("ragged parameter rows".to_string()));
        }
        for v in row {
            data.push(
                v.as_f64()
                    .ok_or_else(|| LearnError::Checkpoint("non-numeric entry".to_string()))?,
            );
        }
    }
    Ok(Mat::from_vec(nrows, ncols, data))
}

/// JSON checkpoint: config, named parameter tensors, epoch, metrics.
pub fn save_checkpoint<W: Write>(
    mut w: W,
    model: &NSDModel,
    epoch: usize,
    metrics: &serde_json::Value,
) -> Result<(), LearnError> {
    let cfg = &model.config;
    let doc = serde_json::json!({
        "config": {
            "in_features": cfg.in_features,
            "num_classes": cfg.num_classes,
            "d": cfg.d,
            "channels": cfg.channels,
            "layers": cfg.layers,
            "family": cfg.family.as_str(),
            "householder_count": cfg.householder_count,
            "sigma": activation_to_string(cfg.sigma),
            "symmetric": cfg.symmetric,
            "hybrid": cfg.hybrid,
        },
        "params": model.params.iter().map(|p| {
            serde_json::json!({ "name": p.name, "sheaf_group": p.sheaf_group, "value": mat_to_json(&p.value) })
        }).collect::<Vec<_>>(),
        "epoch": epoch,
        "metrics": metrics,
    });
    w.write_all(serde_json::to_string_pretty(&doc)?.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<R: Read>(
    mut r: R,
) -> Result<(NSDModel, usize, serde_json::Value), LearnError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let cfg = &doc["config"];
    let get = |key: &str| -> Result<u64, LearnError> {
        cfg[key]
            .as_u64()
            .ok_or_else(|| LearnError::Checkpoint(format!("missing config field {key}")))
    };
    let family_str = cfg["family"]
        .as_str()
        .ok_or_else(|| LearnError::Checkpoint("missing family".to_string()))?;
    let family = MapFamily::parse(family_str)
        .ok_or_else(|| LearnError::Checkpoint(format!("unknown family {family_str}")))?;
    let config = NSDModelConfig {
        in_features: get("in_features")? as usize,
        num_classes: get("num_classes")? as usize,
        d: get("d")? as usize,
        channels: get("channels")? as usize,
        layers: get("layers")? as usize,
        family,
        householder_count: get("householder_count")? as usize,
        sigma: activation_from_string(
            cfg["sigma"]
                .as_str()
                .ok_or_else(|| LearnError::Checkpoint("missing sigma".to_string()))?,
        )?,
        symmetric: cfg["symmetric"].as_bool().unwrap_or(false),
        hybrid: cfg["hybrid"].as_bool().unwrap_or(false),
    };
    let mut model = NSDModel::new(config, 0)?;
    let params = doc["params"]
        .as_array()
        .ok_or_else(|| LearnError::Checkpoint("missing params".to_string()))?;
    if params.len() != model.params.len() {
        return Err(LearnError::Checkpoint(format!(
            "{} parameter blocks, expected {}",
            params.len(),
            model.params.len()
        )));
    }
    for (block, entry) in model.params.iter_mut().zip(params) {
        let name = entry["name"].as_str().unwrap_or("");
        if name != block.name {
            return Err(LearnError::Checkpoint(format!(
                "block {name} out of order, expected {}",
                block.name
            )));
        }
        let value = mat_from_json(&entry["value"])?;
        if value.rows() != block.value.rows() || value.cols() != block.value.cols() {
            return Err(LearnError::Checkpoint(format!(
                "block {name} is {}x{}, expected {}x{}",
                value.rows(),
                value.cols(),
                block.value.rows(),
                block.value.cols()
            )));
        }
        block.value = value;
    }
    let epoch = doc["epoch"].as_u64().unwrap_or(0) as usize;
    Ok((model, epoch, doc["metrics"].clone()))
}

// ---------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BlockGradCheck {
    pub name: String,
    /// `|g_ad - g_fd|_F / max(|g_ad|_F, |g_fd|_F, 1e-6)`.
    pub relative_error: f64,
}

/// Central-difference validation of the reverse-mode gradients, one
/// relative error per parameter block.
pub fn finite_difference_report(
    model: &NSDModel,
    data: &LabeledDataset,
    h: f64,
) -> Result<Vec<BlockGradCheck>, LearnError> {
    let (_, grads) = model.loss_and_grad(data)?;
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.params.len());
    for (bi, block) in model.params.iter().enumerate() {
        let mut diff_sq = 0.0f64;
        let mut fd_sq = 0.0f64;
        let mut ad_sq = 0.0f64;
        for r in 0..block.value.rows() {
            for c in 0..block.value.cols() {
                let orig = block.value[(r, c)];
                probe.params[bi].value[(r, c)] = orig + h;
                let up = probe.loss(data)?;
                probe.params[bi].value[(r, c)] = orig - h;
                let down = probe.loss(data)?;
                probe.params[bi].value[(r, c)] = orig;
                let fd = (up - down) / (2.0 * h);
                let ad = grads[bi][(r, c)];
                diff_sq += (ad - fd) * (ad - fd);
                fd_sq += fd * fd;
                ad_sq += ad * ad;
            }
        }
        out.push(BlockGradCheck {
            name: block.name.clone(),
            relative_error: diff_sq.sqrt() / fd_sq.sqrt().max(ad_sq.sqrt()).max(1e-6),
        });
    }
    Ok(out)
}
