//! Sheaf Laplacian assembly and normalization.
//!
//! The Laplacian of a sheaf with `d`-dimensional stalks over an `n`-node
//! graph is an `nd x nd` symmetric PSD block matrix whose sparsity pattern
//! is exactly the graph's: diagonal blocks `Σ_e ℱ_{v⊴e}ᵀ ℱ_{v⊴e}` plus one
//! off-diagonal block `−ℱ_{v⊴e}ᵀ ℱ_{u⊴e}` per edge. Storage keeps the upper
//! triangle only (block-CSR) with implicit symmetry `M_{ji} = M_{ij}ᵀ`.

use crate::linalg::{self, LinalgError, Mat};
use crate::sheaf::Sheaf;
use std::io::Write;
use thiserror::Error;

/// Eigenvalue floor for the pseudo-inverse square root.
pub const PINV_CLAMP: f64 = 1e-8;
/// Densifying is allowed only up to this total dimension.
pub const DENSE_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum LaplacianError {
    #[error("shape mismatch: operator is {op_rows}x{op_rows}, operand has {got} rows")]
    ShapeMismatch { op_rows: usize, got: usize },
    #[error("dense conversion refused: nd = {nd} exceeds cap {cap}")]
    DenseCap { nd: usize, cap: usize },
    #[error(
        "diagonal block of node {node} is numerically singular under Sym normalization \
         (smallest eigenvalue {lambda_min:.3e}); use AugSym"
    )]
    SingularBlock { node: usize, lambda_min: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Normalization applied to a sheaf Laplacian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizationKind {
    /// Raw Laplacian.
    None,
    /// `D^{-1/2} L D^{-1/2}`; spectrum in [0, 2].
    Sym,
    /// `(D + I)^{-1/2} L (D + I)^{-1/2}`; always well defined.
    AugSym,
}

/// Symmetric block-sparse matrix: upper-triangle block-CSR.
#[derive(Debug, Clone)]
pub struct BlockMatrix {
    n: usize,
    d: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    blocks: Vec<Mat>,
}

impl BlockMatrix {
    /// Builds from `(i, j, block)` entries with `i ≤ j`; missing diagonal
    /// blocks are filled with zeros so every block row exists.
    pub fn from_blocks(n: usize, d: usize, entries: Vec<(usize, usize, Mat)>) -> BlockMatrix {
        let mut rows: Vec<Vec<(usize, Mat)>> = (0..n).map(|_| Vec::new()).collect();
        let mut have_diag = vec![false; n];
        for (i, j, b) in entries {
            assert!(i <= j && j < n, "block index ({i},{j}) out of range");
            assert!(b.rows() == d && b.cols() == d, "block must be {d}x{d}");
            if i == j {
                have_diag[i] = true;
            }
            rows[i].push((j, b));
        }
        for (i, present) in have_diag.iter().enumerate() {
            if !present {
                rows[i].push((i, Mat::zeros(d, d)));
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut blocks = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            for (j, b) in row {
                col_idx.push(j);
                blocks.push(b);
            }
            row_ptr.push(col_idx.len());
        }
        BlockMatrix {
            n,
            d,
            row_ptr,
            col_idx,
            blocks,
        }
    }

    pub fn block_rows(&self) -> usize {
        self.n
    }

    pub fn block_size(&self) -> usize {
        self.d
    }

    /// Total (scalar) dimension `n * d`.
    pub fn dim(&self) -> usize {
        self.n * self.d
    }

    /// Stored block at `(i, j)` with `i ≤ j`, if present.
    pub fn block(&self, i: usize, j: usize) -> Option<&Mat> {
        assert!(i <= j, "only the upper triangle is stored");
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .binary_search(&j)
            .ok()
            .map(|k| &self.blocks[lo + k])
    }

    pub fn diagonal_block(&self, i: usize) -> &Mat {
        self.block(i, i).expect("diagonal blocks always exist")
    }

    /// Iterates stored `(i, j, block)` triples of the upper triangle.
    pub fn iter_upper(&self) -> impl Iterator<Item = (usize, usize, &Mat)> {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.col_idx[k], &self.blocks[k]))
        })
    }

    /// `Y = M X` with the symmetric expansion of the stored upper triangle.
    /// Deterministic summation order (rows ascending, columns ascending).
    pub fn matmat(&self, x: &Mat) -> Result<Mat, LaplacianError> {
        if x.rows() != self.dim() {
            return Err(LaplacianError::ShapeMismatch {
                op_rows: self.dim(),
                got: x.rows(),
            });
        }
        let d = self.d;
        let f = x.cols();
        let mut y = Mat::zeros(self.dim(), f);
        for (i, j, b) in self.iter_upper() {
            // y_i += B x_j
            for r in 0..d {
                for c in 0..d {
                    let w = b[(r, c)];
                    if w == 0.0 {
                        continue;
                    }
                    for t in 0..f {
                        y[(i * d + r, t)] += w * x[(j * d + c, t)];
                    }
                }
            }
            if i != j {
                // y_j += Bᵀ x_i
                for r in 0..d {
                    for c in 0..d {
                        let w = b[(c, r)];
                        if w == 0.0 {
                            continue;
                        }
                        for t in 0..f {
                            y[(j * d + r, t)] += w * x[(i * d + c, t)];
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Dense symmetric expansion; refused above [`DENSE_CAP`].
    pub fn to_dense(&self) -> Result<Mat, LaplacianError> {
        let nd = self.dim();
        if nd > DENSE_CAP {
            return Err(LaplacianError::DenseCap {
                nd,
                cap: DENSE_CAP,
            });
        }
        let d = self.d;
        let mut out = Mat::zeros(nd, nd);
        for (i, j, b) in self.iter_upper() {
            for r in 0..d {
                for c in 0..d {
                    out[(i * d + r, j * d + c)] = b[(r, c)];
                    if i != j {
                        out[(j * d + c, i * d + r)] = b[(r, c)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Writes the dense-expanded matrix in MatrixMarket coordinate format
    /// (symmetric; lower-triangle entries, 1-based indices).
    pub fn write_matrix_market<W: Write>(&self, w: &mut W) -> Result<(), LaplacianError> {
        let d = self.d;
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, b) in self.iter_upper() {
            for r in 0..d {
                for c in 0..d {
                    let (gi, gj) = (i * d + r, j * d + c);
                    let val = b[(r, c)];
                    if val != 0.0 && gi >= gj {
                        entries.push((gi + 1, gj + 1, val));
                    }
                    if i != j {
                        let (gi, gj) = (j * d + c, i * d + r);
                        if val != 0.0 && gi >= gj {
                            entries.push((gi + 1, gj + 1, val));
                        }
                    }
                }
            }
        }
        entries.sort_by_key(|&(i, j, _)| (j, i));
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(w, "{} {} {}", self.dim(), self.dim(), entries.len())?;
        for (i, j, v) in entries {
            writeln!(w, "{} {} {:.17e}", i, j, v)?;
        }
        Ok(())
    }
}

/// Assembles the sheaf Laplacian `L_ℱ`.
pub fn assemble(s: &Sheaf) -> BlockMatrix {
    let g = s.graph();
    let d = s.d();
    let mut diag: Vec<Mat> = (0..g.n()).map(|_| Mat::zeros(d, d)).collect();
    let mut off: Vec<(usize, usize, Mat)> = Vec::with_capacity(g.m());
    for (k, &(u, v)) in g.edges().iter().enumerate() {
        let em = &s.maps()[k];
        diag[u] = diag[u].add(&em.fu.transpose().matmul(&em.fu));
        diag[v] = diag[v].add(&em.fv.transpose().matmul(&em.fv));
        off.push((u, v, em.fu.transpose().matmul(&em.fv).scale(-1.0)));
    }
    let mut entries: Vec<(usize, usize, Mat)> = diag
        .into_iter()
        .enumerate()
        .map(|(i, b)| (i, i, b))
        .collect();
    entries.extend(off);
    BlockMatrix::from_blocks(g.n(), d, entries)
}

/// The block-diagonal `D` of a Laplacian, as a block matrix.
pub fn degree_blocks(l: &BlockMatrix) -> BlockMatrix {
    let entries = (0..l.block_rows())
        .map(|i| (i, i, l.diagonal_block(i).clone()))
        .collect();
    BlockMatrix::from_blocks(l.block_rows(), l.block_size(), entries)
}

/// Pseudo-inverse square root of a symmetric PSD matrix: eigenvalues above
/// `clamp` contribute `λ^{-1/2}`, the rest are dropped.
pub fn inv_sqrt_psd(b: &Mat, clamp: f64) -> Result<Mat, LaplacianError> {
    Ok(linalg::sym_matfun(b, |lam| {
        if lam > clamp {
            1.0 / lam.sqrt()
        } else {
            0.0
        }
    })?)
}

/// A normalized Laplacian together with the per-node scaling blocks that
/// produced it (needed by the edge-sum Dirichlet energy).
#[derive(Debug, Clone)]
pub struct Normalized {
    pub kind: NormalizationKind,
    /// The operator `Δ = S L S` with `S = blockdiag(scalers)`.
    pub matrix: BlockMatrix,
    /// Per-node `D_v^{-1/2}` (Sym), `(D_v + I)^{-1/2}` (AugSym) or `I` (None).
    pub scalers: Vec<Mat>,
}

/// Normalizes a Laplacian. `Sym` errors on numerically singular diagonal
/// blocks (smallest eigenvalue at or below the pseudo-inverse clamp);
/// `AugSym` always succeeds.
pub fn normalize(l: &BlockMatrix, kind: NormalizationKind) -> Result<Normalized, LaplacianError> {
    let n = l.block_rows();
    let d = l.block_size();
    let mut scalers = Vec::with_capacity(n);
    for v in 0..n {
        let b = l.diagonal_block(v);
        let scaler = match kind {
            NormalizationKind::None => Mat::eye(d),
            NormalizationKind::Sym => {
                let eig = linalg::eigh(&b.symmetrized())?;
                let lambda_min = eig.values.first().copied().unwrap_or(0.0);
                if lambda_min <= PINV_CLAMP {
                    return Err(LaplacianError::SingularBlock {
                        node: v,
                        lambda_min,
                    });
                }
                inv_sqrt_psd(b, PINV_CLAMP)?
            }
            NormalizationKind::AugSym => {
                let aug = b.add(&Mat::eye(d));
                inv_sqrt_psd(&aug, PINV_CLAMP)?
            }
        };
        scalers.push(scaler);
    }
    let entries = l
        .iter_upper()
        .map(|(i, j, b)| (i, j, scalers[i].matmul(b).matmul(&scalers[j])))
        .collect();
    Ok(Normalized {
        kind,
        matrix: BlockMatrix::from_blocks(n, d, entries),
        scalers,
    })
}
